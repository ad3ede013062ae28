"""hdrfuse: ghost-free HDR reconstruction from bracketed exposure stacks.

Motion segmentation splits multi-exposure features into static and dynamic
parts which are fused by separate networks with an external memory, then
decoded into a linear radiance map. Classical weighted merging, synthetic
data generation, training loops, and evaluation utilities are included.
"""

from .errors import (
    BadConfig,
    BadEV,
    ConfigError,
    CorruptHeader,
    DataMismatch,
    HdrfuseError,
    IOFailure,
    MissingFile,
    NumericError,
    ShapeMismatch,
)
from .radiometry import (
    MU_DEFAULT,
    brightness_normalize,
    deghost_classical,
    merge_triangle,
    mu_law_tonemap,
    reinhard_tonemap,
    triangle_weight,
)
from .stack_io import (
    DatasetManifest,
    ExposureStack,
    MotionMask,
    RadianceImage,
    SceneRecord,
    load_hdr,
    load_manifest,
    load_stack,
    save_hdr,
    synth_dataset,
    synth_scene,
)

__version__ = "0.1.0"

__all__ = [
    "BadConfig",
    "BadEV",
    "ConfigError",
    "CorruptHeader",
    "DataMismatch",
    "DatasetManifest",
    "ExposureStack",
    "HdrfuseError",
    "IOFailure",
    "MU_DEFAULT",
    "MissingFile",
    "MotionMask",
    "NumericError",
    "RadianceImage",
    "SceneRecord",
    "ShapeMismatch",
    "brightness_normalize",
    "deghost_classical",
    "load_hdr",
    "load_manifest",
    "load_stack",
    "merge_triangle",
    "mu_law_tonemap",
    "reinhard_tonemap",
    "save_hdr",
    "synth_dataset",
    "synth_scene",
    "triangle_weight",
    "__version__",
]
