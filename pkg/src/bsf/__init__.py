"""Binarized convolutional networks with separable rank-1 filters.

The package covers the full pipeline: enumerating the rank-1 sign
decomposition of small binary filters into lookup tables, training binarized
conv nets whose filters are constrained to those tables (with either a
straight-through or an analytic SVD-Jacobian backward), a bit-packed
XNOR-popcount inference engine that exploits the separability, and the
storage/MAC cost model that quantifies the savings.
"""

__version__ = "0.1.0"

from .binarize import binarize, clip_shadow, ste_gate
from .sepfilter import (
    FilterLut,
    LazyFilterCache,
    SeparableFilter,
    SvdResult,
    build_lut,
    decode_separable,
    encode_separable,
    filter_key,
    jacobi_svd,
    key_to_filter,
    rank1_binarize,
    table_sizes,
)
from .svdgrad import (
    FilterJacobian,
    JacobianTable,
    build_jacobian_table,
    collect_gradient,
    fd_jacobian,
    rank1_jacobian,
    rotation_rates,
    verify_gradients,
)
from .layers import (
    MODE_FULL,
    MODE_SEP1,
    MODE_SEP2,
    square_hinge_loss,
)
from .network import (
    Adam,
    ConvLayerSpec,
    Network,
    Trainer,
    evaluate,
    lr_schedule,
    parse_arch,
    refresh_batchnorm_stats,
    split_train_val,
)
from .infer import (
    CostReport,
    PackedPlane,
    conv2d_int,
    conv2d_xnor,
    conv2d_xnor_separable,
    cost_report,
    xnor_popcount_dot,
)
from .analysis import analyze_model, pearson_matrix, ripple_stats, savgol_baseline
from .modelio import ModelFile, evaluate_model

__all__ = [
    "__version__",
    "binarize",
    "clip_shadow",
    "ste_gate",
    "FilterLut",
    "LazyFilterCache",
    "SeparableFilter",
    "SvdResult",
    "build_lut",
    "decode_separable",
    "encode_separable",
    "filter_key",
    "jacobi_svd",
    "key_to_filter",
    "rank1_binarize",
    "table_sizes",
    "FilterJacobian",
    "JacobianTable",
    "build_jacobian_table",
    "collect_gradient",
    "fd_jacobian",
    "rank1_jacobian",
    "rotation_rates",
    "verify_gradients",
    "MODE_FULL",
    "MODE_SEP1",
    "MODE_SEP2",
    "square_hinge_loss",
    "Adam",
    "ConvLayerSpec",
    "Network",
    "Trainer",
    "evaluate",
    "lr_schedule",
    "parse_arch",
    "refresh_batchnorm_stats",
    "split_train_val",
    "CostReport",
    "PackedPlane",
    "conv2d_int",
    "conv2d_xnor",
    "conv2d_xnor_separable",
    "cost_report",
    "xnor_popcount_dot",
    "analyze_model",
    "pearson_matrix",
    "ripple_stats",
    "savgol_baseline",
    "ModelFile",
    "evaluate_model",
]
