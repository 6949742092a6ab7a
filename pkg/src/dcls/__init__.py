"""Dilated convolution with learnable spacings (DCLS) in numpy."""
from .conv import ConvSpec, conv_backward, conv_forward
from .data import Dataset, load_csv, load_idx, synth_longrange, train_val_split
from .estimator import DclsClassifier
from .exceptions import (
    CheckpointError,
    ConfigError,
    DataFormatError,
    DclsError,
    GroupDivisibilityError,
    MissingCacheError,
    NonFiniteError,
    ShapeMismatchError,
)
from .interp import BILINEAR, GAUSS, TRIANGLE, InterpolationKind, interp_eval, interp_grad
from .kernelgen import (
    ConstructedKernel,
    DclsGeometry,
    DclsParams,
    clamp_positions,
    construct_kernel,
    construct_kernel_backward,
)
from .nn import DclsConv, SyncGroup, dcls_layer_backward, dcls_layer_forward
from .training import SGD, AdamW, build_param_groups, init_params

__version__ = "0.1.0"
