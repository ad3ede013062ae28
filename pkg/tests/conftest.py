import numpy as np
import pytest
import torch

from hdrfuse.stack_io import synth_scene

EV3 = [-2.0, 0.0, 2.0]


@pytest.fixture(scope="session")
def scene64():
    """One deterministic 64x64 moving-rectangle scene shared across tests."""
    return synth_scene(7, 64, 64, 3, EV3)


@pytest.fixture(scope="session")
def static64():
    """Same geometry with motion disabled: every mask is empty."""
    return synth_scene(7, 64, 64, 3, EV3, motion_offset=(0, 0))


def finite_difference_check(
    loss_fn,
    params,
    n_per_tensor: int = 4,
    eps: float = 1e-5,
    rtol: float = 1e-3,
    scale: float = 1e-5,
    seed: int = 0,
):
    """Compare autograd gradients against central finite differences on a
    sample of entries from every parameter tensor (64-bit arithmetic).

    Entries where two step sizes disagree sit on an activation kink where
    finite differences are unreliable; those are skipped, capped at 40%.
    A genuine gradient bug yields step-size-consistent finite differences
    that disagree with autograd, which this check always catches.
    """
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params)
    rng = np.random.default_rng(seed)
    worst, checked, skipped = 0.0, 0, 0

    def fd(flat, i, h):
        orig = float(flat[i])
        flat[i] = orig + h
        lp = float(loss_fn())
        flat[i] = orig - h
        lm = float(loss_fn())
        flat[i] = orig
        return (lp - lm) / (2.0 * h)

    with torch.no_grad():
        for p, g in zip(params, grads):
            fp, fg = p.reshape(-1), g.reshape(-1)
            idxs = rng.choice(fp.numel(), size=min(n_per_tensor, fp.numel()), replace=False)
            for i in idxs:
                h = eps * max(1.0, abs(float(fp[i])))
                fd1 = fd(fp, i, h)
                fd2 = fd(fp, i, h / 2.0)
                if abs(fd1 - fd2) / max(abs(fd1), abs(fd2), scale) > 1e-4:
                    skipped += 1
                    continue
                an = float(fg[i])
                err = abs(fd2 - an) / max(abs(fd2), abs(an), scale)
                worst = max(worst, err)
                checked += 1
    assert checked > 0, "no finite-difference-checkable entries"
    assert skipped <= 0.4 * (checked + skipped), f"too many kink skips: {skipped}/{checked + skipped}"
    return worst, checked, skipped
