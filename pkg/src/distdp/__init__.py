"""Differentially private secure sums and distributed Bayesian linear regression."""

__version__ = "0.1.0"

from .dp import PrivacyBudget, QuerySensitivity, gaussian_sigma, distributed_sigma, blr_sensitivity
from .fixedpoint import FixedPointParams, FixedPointVector, encode, decode
from .protocol import ProtocolConfig, RoundResult, run_round, simulate_round

__all__ = [
    "PrivacyBudget",
    "QuerySensitivity",
    "gaussian_sigma",
    "distributed_sigma",
    "blr_sensitivity",
    "FixedPointParams",
    "FixedPointVector",
    "encode",
    "decode",
    "ProtocolConfig",
    "RoundResult",
    "run_round",
    "simulate_round",
]
