"""Python bindings for the bevdiff C++ core."""

from ._core import (
    ConfigError,
    Dataset,
    NoiseSchedule,
    ShapeError,
    TrainResult,
    config_hash,
    default_config,
    dropout_prob,
    evaluate,
    focal_loss,
    generate_dataset,
    hungarian_match,
    load_dataset,
    make_schedule,
    make_step_schedule,
    mask_modality,
    miou,
    posterior_mean_var,
    q_sample,
    sample_loop,
    selftest,
    smooth_l1,
    total_loss,
    train,
)

__all__ = [name for name in dir() if not name.startswith("_")]
