"""Robust estimation for regression models with a dispersion parameter.

A high-breakdown initial estimate (maximum rank correlation plus a
weighted M-estimate on a variance-stabilized scale) is refined by
conditional maximum likelihood on observations whose randomized quantile
residuals fall inside adaptively chosen cutoffs.
"""

from .cml import FitReport, PipelineConfig, cml_fit, cml_pipeline
from .errors import (ConfigError, ConvergenceError, DegenerateDataError, DomainError,
                     NumericError, OverTruncationError, RobCMLError)
from .family import ml_fit
from .initial import initial_estimate
from .model import BETA, NB, Dataset, FamilySpec, ThetaEstimate
from .mrc import mrc_fit
from .rqr import adaptive_cutoffs, rqr_compute

__version__ = "0.1.0"

__all__ = [
    "BETA", "NB", "ConfigError", "ConvergenceError", "Dataset", "DegenerateDataError",
    "DomainError", "FamilySpec", "FitReport", "NumericError", "OverTruncationError",
    "PipelineConfig", "RobCMLError", "ThetaEstimate", "adaptive_cutoffs", "cml_fit",
    "cml_pipeline", "initial_estimate", "ml_fit", "mrc_fit", "rqr_compute",
]
