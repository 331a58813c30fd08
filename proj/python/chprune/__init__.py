"""Channel pruning with a second-order layer error, genetic mask search and
attention-transfer fine-tuning. The heavy lifting lives in the C++ core."""

from ._core import (
    ConfigError,
    Error,
    FormatError,
    ModelStats,
    Network,
    NumericError,
    PruneError,
    ShapeError,
    attention_distance,
    attention_map,
    compute_hessian,
    direct_error,
    evolve,
    kept_channels,
    load_model,
    make_architecture,
    mask_from_hex,
    mask_hex,
    parse_config,
    population_fitness,
    run,
    taylor_error,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
