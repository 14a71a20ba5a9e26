"""Calibrated contrastive preference losses over exactly computable tabular policies."""

from prefcal.envcore import (
    Environment,
    PolicyParams,
    implicit_reward,
    log_partition,
    optimal_policy,
    preference_score,
    softmax,
)
from prefcal.errors import (
    ConfigurationError,
    DivergenceError,
    InvalidEnvironmentError,
    InvalidInputError,
    InvalidParameterError,
    MismatchError,
    PrefCalError,
    ProbeFailureError,
    WrongOperationError,
)
from prefcal.losses import LossSpec, LossValue, Method, batch_loss, cal_pair_loss, calibration_loss, pair_loss
from prefcal.prefdata import (
    PreferenceDataset,
    PreferencePair,
    attach_oracle_rewards,
    bt_probability,
    sample_dataset,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "DivergenceError",
    "Environment",
    "InvalidEnvironmentError",
    "InvalidInputError",
    "InvalidParameterError",
    "LossSpec",
    "LossValue",
    "Method",
    "MismatchError",
    "PolicyParams",
    "PrefCalError",
    "PreferenceDataset",
    "PreferencePair",
    "ProbeFailureError",
    "WrongOperationError",
    "attach_oracle_rewards",
    "batch_loss",
    "bt_probability",
    "cal_pair_loss",
    "calibration_loss",
    "implicit_reward",
    "log_partition",
    "optimal_policy",
    "pair_loss",
    "preference_score",
    "sample_dataset",
    "softmax",
]
