"""Knowledge-informed residual RL for CAV longitudinal control."""

from ._core import (
    ConfigError,
    IdmParams,
    PiParams,
    Trainer,
    c_bound,
    command_to_accel,
    evaluate_baseline,
    evaluate_checkpoint,
    generate_cf_dataset,
    idm_accel,
    idm_desired_gap,
    normalize_config,
    pi_target_velocity,
    pi_weights,
    rollout_length,
    run_experiment,
)

__all__ = [
    "ConfigError",
    "IdmParams",
    "PiParams",
    "Trainer",
    "c_bound",
    "command_to_accel",
    "evaluate_baseline",
    "evaluate_checkpoint",
    "generate_cf_dataset",
    "idm_accel",
    "idm_desired_gap",
    "normalize_config",
    "pi_target_velocity",
    "pi_weights",
    "rollout_length",
    "run_experiment",
]
