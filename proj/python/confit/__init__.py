"""Continual fine-tuning laboratory.

Thin wrapper over the compiled extension: mean-recovery primitives, the
full continual training pipeline, the numerical property suite, and the
linear-model theory experiments.
"""

from ._core import (
    ConfigError,
    DataError,
    IoError,
    ShapeError,
    __version__,
    avg_pool,
    avg_pool_broadcast,
    continual_run,
    conv2d,
    drift_experiment,
    polyphase_conv_sum,
    recover_mean,
    theory_sweep,
    verify_suite,
)

__all__ = [
    "ConfigError",
    "DataError",
    "IoError",
    "ShapeError",
    "__version__",
    "avg_pool",
    "avg_pool_broadcast",
    "continual_run",
    "conv2d",
    "drift_experiment",
    "polyphase_conv_sum",
    "recover_mean",
    "theory_sweep",
    "verify_suite",
]
