"""Multitask Gaussian process layer trained end to end with an LSTM classifier.

Irregularly sampled multivariate time series are mapped onto an hourly grid
through a multitask GP posterior; reparameterized posterior draws feed an
LSTM, and the GP hyperparameters and network weights are fit jointly.
"""
from .data import (
    EncounterRecord,
    StandardizationStats,
    SyntheticSpec,
    generate_cohort,
    hourly_impute,
    load_cohort,
    save_cohort,
    split_cohort,
    truncate_to_horizon,
)
from .errors import (
    ConfigError,
    DataError,
    GenerationError,
    InvalidHyperparameterError,
    MetricUndefinedError,
    MgpRnnError,
    NumericalError,
    ShapeError,
    TrainingError,
)
from .krylov import cg_solve, lanczos_sqrt_vec
from .metrics import ThresholdScoreTable, aupr, auroc, horizon_sweep, precision_at_sensitivity, threshold_score
from .mgp import MgpHyperparams, PosteriorGaussian, posterior_mean_only, posterior_moments, sample_latents
from .rnn import bce_loss, init_rnn_params, lstm_step, rnn_forward
from .training import Model, TrainConfig, adam_step, fit, mc_expected_loss, risk_score, score_cohort

__version__ = "0.1.0"
