"""Graph-augmented dual-branch 3D U-Net for vascular segmentation.

Self-contained: float64 autodiff, the network itself, synthetic vascular
phantoms, exact segmentation metrics, a training loop, an sklearn-style
estimator facade, and a CLI.
"""

from ._alloc import tune_allocator

tune_allocator()

from .autodiff import (  # noqa: E402
    ConvParams,
    LinearParams,
    Tensor,
    conv3d,
    conv_transpose3d,
    gradient_check,
    instance_norm3d,
    no_grad,
)
from .errors import (  # noqa: E402
    ConfigError,
    DimensionMismatchError,
    FileFormatError,
    NumericalAbortError,
    UndefinedMetricError,
    VesselSegError,
)

__all__ = [
    "ConfigError",
    "ConvParams",
    "DimensionMismatchError",
    "FileFormatError",
    "LinearParams",
    "NumericalAbortError",
    "Tensor",
    "UndefinedMetricError",
    "VesselSegError",
    "conv3d",
    "conv_transpose3d",
    "gradient_check",
    "instance_norm3d",
    "no_grad",
    "tune_allocator",
]
