"""Run the ablation presets on a small synthetic dataset and tabulate results.

Every preset trains from scratch at desk scale, so a full sweep takes a while
on one CPU core; pass --presets A5,A9 etc. to run a subset.
"""

import argparse
import csv
import json
import sys
from pathlib import Path

from hdrfuse.cli import main as cli_main
from hdrfuse.presets import preset_description, preset_names


def parse_args():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="runs/ablations", help="output directory")
    p.add_argument("--data", default=None, help="dataset manifest; synthesized under --out when omitted")
    p.add_argument("--presets", default=",".join(preset_names()), help="comma-separated preset names")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=6, help="scenes for the synthesized fallback dataset")
    p.add_argument("--size", type=int, default=64, help="scene side for the synthesized fallback dataset")
    return p.parse_args()


def main():
    args = parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    data = args.data
    if data is None:
        data_dir = out / "data"
        rc = cli_main(
            ["synth", f"--count={args.count}", f"--size={args.size}", "--ev=-2,0,2", f"--seed={args.seed}", f"--out={data_dir}"]
        )
        if rc:
            return rc
        data = str(data_dir / "manifest.json")

    rows = []
    for name in args.presets.split(","):
        name = name.strip()
        run_dir = out / name
        rc = cli_main(["ablate", f"--preset={name}", f"--data={data}", f"--seed={args.seed}", f"--out={run_dir}"])
        if rc:
            return rc
        with open(run_dir / "ablation_row.json") as f:
            rows.append(json.load(f))

    with open(out / "ablations.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["preset", "description", "psnr_l", "psnr_t"])
        w.writeheader()
        w.writerows(rows)

    width = max(len(preset_description(r["preset"])) for r in rows)
    print(f"\n{'preset':<8}{'description':<{width + 2}}{'PSNR-L':>8}{'PSNR-T':>8}")
    for r in rows:
        print(f"{r['preset']:<8}{r['description']:<{width + 2}}{r['psnr_l']:>8.2f}{r['psnr_t']:>8.2f}")
    print(f"\nwrote {out / 'ablations.csv'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
