"""Deep-equilibrium multimodal fusion engine."""

from ._core import (
    ConfigError,
    DivergenceError,
    FusionParams,
    NumericError,
    ShapeError,
    backward,
    gen_signproduct,
    gradcheck,
    init_params,
    jacobian_reg_estimate,
    load_params,
    metrics,
    rel_diff_norm,
    solve,
    train_signproduct,
)

__all__ = [
    "ConfigError",
    "DivergenceError",
    "FusionParams",
    "NumericError",
    "ShapeError",
    "backward",
    "gen_signproduct",
    "gradcheck",
    "init_params",
    "jacobian_reg_estimate",
    "load_params",
    "metrics",
    "rel_diff_norm",
    "solve",
    "train_signproduct",
]
