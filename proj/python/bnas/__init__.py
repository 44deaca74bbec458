"""Binary cell search, training and XNOR deployment."""

from ._bnas import (
    Genotype,
    GenotypeError,
    IoError,
    ShapeError,
    binconv,
    cost_report,
    entropy,
    layer_kinds,
    packed_binconv,
    preset_names,
    quantization_error,
    regularizer_value,
    run_cli,
    select_op,
    sep_quantization_error,
    synthetic_blobs,
    xnor_dot,
)

__all__ = [
    "Genotype",
    "GenotypeError",
    "IoError",
    "ShapeError",
    "binconv",
    "cost_report",
    "entropy",
    "layer_kinds",
    "packed_binconv",
    "preset_names",
    "quantization_error",
    "regularizer_value",
    "run_cli",
    "select_op",
    "sep_quantization_error",
    "synthetic_blobs",
    "xnor_dot",
]
