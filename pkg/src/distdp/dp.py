"""Gaussian mechanism calibration for the central and distributed settings."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InsufficientClients, InvalidBudget, InvalidThreshold

# the Gaussian mechanism bound is a strict inequality; scale sigma up slightly
SIGMA_MARGIN = 1e-6


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float

    def __post_init__(self):
        # epsilon=inf is accepted and means "no noise"
        if not self.epsilon > 0:
            raise InvalidBudget(f"epsilon must be positive, got {self.epsilon}")
        if not 0 < self.delta < 1:
            raise InvalidBudget(f"delta must lie in (0, 1), got {self.delta}")

    @property
    def is_infinite(self) -> bool:
        return self.epsilon == math.inf

    def split(self, fractions: Sequence[float]) -> list["PrivacyBudget"]:
        """Divide the budget under basic composition.

        ``fractions`` must be positive and sum to one; both epsilon and delta
        are divided in the same proportions.
        """
        fractions = [float(f) for f in fractions]
        if not fractions or any(f <= 0 for f in fractions):
            raise InvalidBudget(f"fractions must be positive, got {fractions}")
        if not math.isclose(sum(fractions), 1.0, rel_tol=1e-12):
            raise InvalidBudget(f"fractions must sum to 1, got {sum(fractions)}")
        return [PrivacyBudget(self.epsilon * f, self.delta * f) for f in fractions]

    def to_dict(self):
        return {"epsilon": self.epsilon, "delta": self.delta}


@dataclass(frozen=True)
class QuerySensitivity:
    l2: float
    dimension: int

    def __post_init__(self):
        if self.l2 < 0:
            raise ValueError(f"sensitivity must be nonnegative, got {self.l2}")


@dataclass(frozen=True)
class NoisePlan:
    sigma_std: float
    sigma_client: float
    N: int
    T: int

    @property
    def total_variance(self) -> float:
        """Variance of the summed noise when all N clients contribute."""
        return self.N * self.sigma_client**2

    @property
    def scaling_factor(self) -> float:
        return self.N / (self.N - self.T - 1)


def gaussian_sigma(sensitivity: QuerySensitivity | float, budget: PrivacyBudget) -> float:
    """Noise std of the Gaussian mechanism with a trusted aggregator.

    Returns sigma with ``sigma**2 = 2 ln(1.25/delta) (l2/eps)**2 * (1 + SIGMA_MARGIN)``.
    An infinite epsilon yields zero noise.
    """
    l2 = sensitivity.l2 if isinstance(sensitivity, QuerySensitivity) else float(sensitivity)
    if not isinstance(budget, PrivacyBudget):
        raise InvalidBudget(f"expected a PrivacyBudget, got {budget!r}")
    if l2 < 0:
        raise ValueError(f"sensitivity must be nonnegative, got {l2}")
    if budget.is_infinite:
        return 0.0
    var = 2.0 * math.log(1.25 / budget.delta) * (l2 / budget.epsilon) ** 2
    return math.sqrt(var * (1.0 + SIGMA_MARGIN))


def distributed_sigma(sigma_std: float, N: int, T: int = 0) -> NoisePlan:
    """Per-client noise so that any N - T - 1 honest clients cover sigma_std."""
    if T < 0:
        raise ValueError(f"T must be nonnegative, got {T}")
    honest = N - T - 1
    if honest < 1:
        raise InsufficientClients(f"need N > T + 1, got N={N}, T={T}")
    sigma_client = sigma_std / math.sqrt(honest)
    # guard the invariant against the rounding of the square root
    while honest * sigma_client**2 < sigma_std**2:
        sigma_client = math.nextafter(sigma_client, math.inf)
    return NoisePlan(sigma_std=sigma_std, sigma_client=sigma_client, N=N, T=T)


def stats_dimension(d: int) -> int:
    return d * (d + 1) // 2 + d


def blr_sensitivity(c_x, c_y: float, d: int) -> QuerySensitivity:
    """l2 sensitivity of the flattened regression sufficient statistics.

    ``c_x`` is either one bound shared by all features or a length-``d``
    vector of per-feature bounds; ``c_y`` bounds the target.  With a common
    bound this reduces to ``d(2d-1) c_x**4 + 4 d (c_x c_y)**2``.
    """
    if d < 1:
        raise ValueError(f"d must be at least 1, got {d}")
    if np.ndim(c_x) == 0:
        c = float(c_x)
        sq = d * (2 * d - 1) * c**4 + 4 * d * (c * c_y) ** 2
    else:
        c = np.asarray(c_x, dtype=np.float64)
        if c.shape != (d,):
            raise ValueError(f"expected {d} feature bounds, got shape {c.shape}")
        c2 = c**2
        off_diag = (np.sum(c2) ** 2 - np.sum(c2**2)) / 2.0
        sq = float(np.sum(c2**2) + 4.0 * off_diag + 4.0 * np.sum(c2) * c_y**2)
    return QuerySensitivity(l2=math.sqrt(sq), dimension=stats_dimension(d))


def sum_of_squares_sensitivity(bounds) -> QuerySensitivity:
    """Sensitivity of summing per-record squares clamped to [0, c_j**2]."""
    c = np.asarray(bounds, dtype=np.float64)
    return QuerySensitivity(l2=float(np.sqrt(np.sum(c**4))), dimension=c.size)


def record_sensitivity(bounds) -> QuerySensitivity:
    """Sensitivity of releasing one record lying in the box [-c, c]."""
    c = np.asarray(bounds, dtype=np.float64)
    return QuerySensitivity(l2=2.0 * float(np.linalg.norm(c)), dimension=c.size)


def sample_gaussian_noise(sigma: float, dimension, rng=None) -> np.ndarray:
    """I.i.d. N(0, sigma**2) draws of the given shape."""
    if sigma < 0:
        raise ValueError(f"sigma must be nonnegative, got {sigma}")
    rng = np.random.default_rng() if rng is None else rng
    draws = rng.standard_normal(dimension)
    return sigma * draws


def l1_tail_bound(d: int, sigma: float, t: float) -> float:
    """Chebyshev-type bound on P(||x||_1 >= t) for x ~ N(0, sigma**2 I_d)."""
    mean = math.sqrt(2.0 / math.pi) * d * sigma
    if t <= mean:
        raise InvalidThreshold(f"threshold {t} must exceed E||x||_1 = {mean}")
    return d * sigma**2 * (1.0 - 2.0 / math.pi) / (t - mean) ** 2
