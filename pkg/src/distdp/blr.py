"""Bayesian linear regression from perturbed sufficient statistics.

The model is ``y | x ~ N(x^T beta, 1/lam)`` with prior ``beta ~ N(0, 1/lambda0 I)``
written in precision form, so the posterior precision is
``lambda0 I + lam * sum x x^T`` and the mean solves
``precision @ mean = lam * sum x y``.  Privacy comes from noising the
flattened statistics, either centrally (trusted aggregator) or through the
distributed protocol, optionally after projecting the data to bounds
chosen from a DP estimate of the marginal stds.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from . import protocol
from .dp import (
    PrivacyBudget,
    QuerySensitivity,
    blr_sensitivity,
    gaussian_sigma,
    record_sensitivity,
    sample_gaussian_noise,
    stats_dimension,
    sum_of_squares_sensitivity,
)
from .errors import DimensionMismatch, InsufficientClients, NotPositiveDefinite
from .fixedpoint import DEFAULT_PARAMS, FixedPointParams

log = logging.getLogger(__name__)

STD_FLOOR = 0.5
DEFAULT_SPLIT = 0.2
DEFAULT_REPEATS = 10
RIDGE_LADDER = (0.0,) + tuple(10.0**k for k in range(-3, 13))


def default_grid() -> np.ndarray:
    """20 threshold multipliers spanning 0.1 to 2.1 standard deviations."""
    return np.linspace(0.1, 2.1, 20)


@dataclass(frozen=True)
class ProjectionBounds:
    """Clamp thresholds ``c_1..c_d`` for the features and ``c_{d+1}`` for the target."""

    thresholds: np.ndarray
    provenance: Literal["assumed", "estimated"] = "assumed"

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.thresholds, dtype=np.float64))
        if c.ndim != 1 or c.size < 2:
            raise ValueError("need bounds for at least one feature and the target")
        if not np.all(c > 0):
            raise ValueError(f"bounds must be strictly positive, got {c}")
        object.__setattr__(self, "thresholds", c)

    @classmethod
    def uniform(cls, c_x: float, c_y: float, d: int, provenance="assumed") -> "ProjectionBounds":
        return cls(np.r_[np.full(d, float(c_x)), float(c_y)], provenance)

    @property
    def d(self) -> int:
        return self.thresholds.size - 1

    @property
    def features(self) -> np.ndarray:
        return self.thresholds[:-1]

    @property
    def target(self) -> float:
        return float(self.thresholds[-1])

    def sensitivity(self) -> QuerySensitivity:
        c_x = self.features
        if np.all(c_x == c_x[0]):
            c_x = float(c_x[0])
        return blr_sensitivity(c_x, self.target, self.d)


def project(x, bounds) -> np.ndarray:
    """Clamp each component ``j`` into ``[-c_j, c_j]``."""
    c = bounds.thresholds if isinstance(bounds, ProjectionBounds) else np.asarray(bounds, float)
    return np.clip(np.asarray(x, dtype=np.float64), -c, c)


@dataclass(frozen=True)
class SufficientStatistics:
    xx: np.ndarray
    xy: np.ndarray
    n: int

    @property
    def d(self) -> int:
        return self.xy.shape[0]


def suff_stats(X, y) -> SufficientStatistics:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise DimensionMismatch(f"X has shape {X.shape}, y has {y.shape[0]} rows")
    return SufficientStatistics(X.T @ X, X.T @ y, X.shape[0])


def _triu(d: int):
    return np.triu_indices(d)


def flatten_stats(s: SufficientStatistics) -> np.ndarray:
    """Upper triangle of ``xx`` row by row, followed by ``xy``."""
    return np.concatenate([s.xx[_triu(s.d)], s.xy])


def unflatten_stats(vec, d: int, n: int = 0) -> SufficientStatistics:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (stats_dimension(d),):
        raise DimensionMismatch(f"expected {stats_dimension(d)} values for d={d}, got {vec.shape}")
    iu = _triu(d)
    k = iu[0].size
    xx = np.zeros((d, d))
    xx[iu] = vec[:k]
    xx = xx + np.triu(xx, 1).T
    return SufficientStatistics(xx, vec[k:].copy(), n)


def record_stats(X, y) -> np.ndarray:
    """Per-record flattened statistics, shape ``(n, d(d+1)/2 + d)``.

    Row ``i`` is what client ``i`` contributes to the distributed sum.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
    i, j = _triu(X.shape[1])
    return np.hstack([X[:, i] * X[:, j], X * y])


@dataclass
class BlrPosterior:
    precision: np.ndarray
    mean: np.ndarray
    lambda0: float = 1.0
    lam: float = 1.0
    n: int = 0
    ridge: float = 0.0
    budget_spent: PrivacyBudget | None = None
    bounds: ProjectionBounds | None = None
    info: dict = field(default_factory=dict)

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.mean.shape[0]:
            raise DimensionMismatch(f"input dimension {X.shape[-1]} != {self.mean.shape[0]}")
        return X @ self.mean

    def to_dict(self) -> dict:
        out = {
            "mean": self.mean.tolist(),
            "precision": self.precision.reshape(-1).tolist(),
            "d": int(self.mean.shape[0]),
            "n": int(self.n),
            "lambda0": self.lambda0,
            "lambda": self.lam,
            "ridge_increment": self.ridge,
            "budget_spent": self.budget_spent.to_dict() if self.budget_spent else None,
        }
        if self.bounds is not None:
            out["bounds"] = self.bounds.thresholds.tolist()
            out["bounds_provenance"] = self.bounds.provenance
        if self.info:
            out["info"] = self.info
        return out

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def posterior(s: SufficientStatistics, lambda0: float = 1.0, lam: float = 1.0) -> BlrPosterior:
    """Closed-form posterior via a Cholesky solve.

    Perturbed statistics can make the precision indefinite or nearly
    singular.  The smallest ridge ``r * lambda0`` from ``RIDGE_LADDER`` that
    brings the smallest eigenvalue back to at least ``lambda0`` (the floor
    unperturbed data always satisfies) is added and stored in
    ``BlrPosterior.ridge``.
    """
    if lambda0 <= 0 or lam <= 0:
        raise ValueError("lambda0 and lambda must be positive")
    d = s.d
    base = lambda0 * np.eye(d) + lam * s.xx
    base = (base + base.T) / 2
    rhs = lam * s.xy
    lowest = np.linalg.eigvalsh(base)[0] if d else lambda0
    # absorbs eigenvalue rounding for unperturbed statistics
    tol = 1e-9 * max(lambda0, float(np.abs(base).max(initial=0.0)))
    for step in RIDGE_LADDER:
        ridge = step * lambda0
        if lowest + ridge < lambda0 - tol:
            continue
        prec = base + ridge * np.eye(d)
        try:
            L = np.linalg.cholesky(prec)
        except np.linalg.LinAlgError:
            continue
        mean = np.linalg.solve(L.T, np.linalg.solve(L, rhs))
        if ridge:
            log.debug("added ridge %g to make the precision positive definite", ridge)
        return BlrPosterior(prec, mean, lambda0, lam, s.n, ridge)
    raise NotPositiveDefinite("precision stayed indefinite after the largest ridge increment")


def predict(x, p: BlrPosterior):
    return p.predict(x)


def generate_auxiliary(n: int, d: int, lambda0: float = 1.0, lam: float = 1.0, rng=None):
    """Draw ``(X, y)`` from ``x ~ N(0, I)``, ``beta ~ N(0, lambda0 I)``, ``y ~ N(x^T beta, lam)``.

    The variances follow the generative model as stated for the auxiliary
    data, so ``lambda0`` and ``lam`` enter here as variances.
    """
    if n < 1:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(rng)
    X = rng.standard_normal((n, d))
    beta = math.sqrt(lambda0) * rng.standard_normal(d)
    y = X @ beta + math.sqrt(lam) * rng.standard_normal(n)
    return X, y


# Noisy summation back ends --------------------------------------------------

class TrustedAggregator:
    """Central Gaussian mechanism over the summed records."""

    name = "TA"
    noise_factor = 1.0

    def noisy_sum(self, records, sensitivity: QuerySensitivity, budget: PrivacyBudget, rng=None):
        records = np.asarray(records, dtype=np.float64)
        sigma = gaussian_sigma(sensitivity, budget)
        return records.sum(axis=0) + sample_gaussian_noise(sigma, records.shape[1], rng)


@dataclass
class DistributedAggregator:
    """Sum through the DCA protocol, one client per record.

    With ``network`` unset the vectorised :func:`protocol.simulate_round` is
    used; otherwise the full message-level round runs over that network.
    """

    n_compute: int = 2
    collusion_tolerance: int = 0
    fp_params: FixedPointParams = DEFAULT_PARAMS
    network: object | None = None
    timeout: float = 0.05
    name: str = "DDP"

    def config(self, n_clients: int, dimension: int, sigma_std: float) -> protocol.ProtocolConfig:
        return protocol.ProtocolConfig.calibrated(
            n_clients, self.n_compute, self.collusion_tolerance, dimension, sigma_std,
            fp_params=self.fp_params, timeout=self.timeout,
        )

    def noise_factor_for(self, n_clients: int) -> float:
        return n_clients / (n_clients - self.collusion_tolerance - 1)

    def noisy_sum(self, records, sensitivity: QuerySensitivity, budget: PrivacyBudget, rng=None):
        records = np.asarray(records, dtype=np.float64)
        n, dim = records.shape
        if n < self.collusion_tolerance + 2:
            raise InsufficientClients(
                f"{n} clients cannot tolerate T={self.collusion_tolerance}"
            )
        cfg = self.config(n, dim, gaussian_sigma(sensitivity, budget))
        if self.network is None:
            return protocol.simulate_round(records, cfg, rng).dp_sum
        return protocol.run_round(records, cfg, self.network, rng).dp_sum


# Pipeline steps --------------------------------------------------------------

def _as_bounds(bounds, d: int) -> ProjectionBounds:
    if isinstance(bounds, ProjectionBounds):
        b = bounds
    else:
        b = ProjectionBounds(np.broadcast_to(np.asarray(bounds, float), (d + 1,)).copy())
    if b.d != d:
        raise DimensionMismatch(f"bounds cover {b.d} features, data has {d}")
    return b


def estimate_marginal_std(data, assumed_bounds, budget: PrivacyBudget, aggregator=None,
                          rng=None, floor: float = STD_FLOOR,
                          estimator: Literal["abs", "squares"] = "abs") -> np.ndarray:
    """DP estimate of the per-column std of zero-centred, pre-projected data.

    ``estimator="abs"`` sums ``|x_ij|`` (sensitivity ``||c||_2``) and rescales
    the mean by ``sqrt(pi/2)``, which is exact for Gaussian columns.
    ``estimator="squares"`` sums ``x_ij**2`` (sensitivity
    ``sqrt(sum c_j**4)``) and takes the square root of the mean.  Estimates
    are capped at the bound ``c_j`` and floored at ``floor``.
    """
    data = np.asarray(data, dtype=np.float64)
    c = assumed_bounds.thresholds if isinstance(assumed_bounds, ProjectionBounds) \
        else np.broadcast_to(np.asarray(assumed_bounds, float), data.shape[1:])
    aggregator = aggregator or TrustedAggregator()
    n = data.shape[0]
    if estimator == "abs":
        total = aggregator.noisy_sum(np.minimum(np.abs(data), c),
                                     QuerySensitivity(float(np.linalg.norm(c)), c.size), budget, rng)
        raw = math.sqrt(math.pi / 2) * total / n
    elif estimator == "squares":
        total = aggregator.noisy_sum(np.minimum(data**2, c**2), sum_of_squares_sensitivity(c),
                                     budget, rng)
        raw = np.sqrt(np.maximum(total / n, 0.0))
    else:
        raise ValueError(f"unknown std estimator {estimator!r}")
    # a column bounded by c cannot have a larger std
    return np.maximum(np.minimum(raw, c), floor)


def _mae(pred, y) -> float:
    return float(np.mean(np.abs(pred - y)))


def grid_search_thresholds(aux, budget: PrivacyBudget, grid: Sequence[float] | None = None,
                           repeats: int = DEFAULT_REPEATS, rng=None, *, lambda0: float = 1.0,
                           lam: float = 1.0, noise_factor: float = 1.0):
    """Choose projection multipliers ``(p_x, p_y)`` on auxiliary data.

    Every grid pair projects the auxiliary features to ``p_x * std`` (one
    common multiplier) and the target to ``p_y * std``.  The DP statistics
    are then simulated ``repeats`` times at ``budget``.  The pair with the
    lowest median MAE on the auxiliary data wins.  ``noise_factor``
    inflates the noise variance, e.g. by N/(N-T-1) for the distributed case.
    """
    X, y = (np.asarray(a, dtype=np.float64) for a in aux)
    grid = default_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    if grid.size == 0:
        raise ValueError("threshold grid is empty")
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    rng = np.random.default_rng(rng)
    n, d = X.shape
    sx, sy = X.std(axis=0), y.std()
    iu = _triu(d)
    k = iu[0].size

    errors = np.empty((grid.size, grid.size, repeats))
    for a, px in enumerate(grid):
        cx = px * sx
        Xp = np.clip(X, -cx, cx)
        xx = Xp.T @ Xp
        for b, py in enumerate(grid):
            cy = py * sy
            xy = Xp.T @ np.clip(y, -cy, cy)
            sigma = gaussian_sigma(blr_sensitivity(cx, cy, d), budget) * math.sqrt(noise_factor)
            noise = sigma * rng.standard_normal((repeats, k + d))
            for r in range(repeats):
                up = np.zeros((d, d))
                up[iu] = noise[r, :k]
                nxx = xx + up + np.triu(up, 1).T
                s = SufficientStatistics(nxx, xy + noise[r, k:], n)
                mean = posterior(s, lambda0, lam).mean
                errors[a, b, r] = _mae(X @ mean, y)
    med = np.median(errors, axis=2)
    a, b = np.unravel_index(np.argmin(med), med.shape)
    return float(grid[a]), float(grid[b])


@dataclass
class FitSettings:
    lambda0: float = 1.0
    lam: float = 1.0
    split: float = DEFAULT_SPLIT
    std_estimator: str = "abs"
    grid: Sequence[float] | None = None
    repeats: int = DEFAULT_REPEATS


def fit_ssp(X, y, bounds, budget: PrivacyBudget, aggregator, rng=None, *, projection: bool = False,
            settings: FitSettings | None = None) -> BlrPosterior:
    """Sufficient-statistics perturbation with an arbitrary summation back end.

    Without projection the data is clamped to ``bounds`` and one noisy sum
    spends the whole budget.  With projection the flow is: clamp to the
    assumed bounds, spend ``settings.split`` of the budget on the marginal
    stds, pick multipliers on auxiliary data, clamp to the tightened
    bounds, spend the rest on the statistics.
    """
    settings = settings or FitSettings()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n, d = X.shape
    rng = np.random.default_rng(rng)
    assumed = _as_bounds(bounds, d)
    data = project(np.column_stack([X, y]), assumed)
    info = {}

    if projection:
        std_budget, main_budget = budget.split([settings.split, 1.0 - settings.split])
        stds = estimate_marginal_std(data, assumed, std_budget, aggregator, rng,
                                     estimator=settings.std_estimator)
        aux = generate_auxiliary(n, d, settings.lambda0, settings.lam, rng)
        factor = getattr(aggregator, "noise_factor_for", lambda _n: 1.0)(n)
        p_x, p_y = grid_search_thresholds(aux, main_budget, settings.grid, settings.repeats, rng,
                                          lambda0=settings.lambda0, lam=settings.lam,
                                          noise_factor=factor)
        multipliers = np.r_[np.full(d, p_x), p_y]
        # the data already lies inside the assumed bounds, so never widen them
        used = ProjectionBounds(np.minimum(multipliers * stds, assumed.thresholds), "estimated")
        data = project(data, used)
        info.update(std_estimate=stds.tolist(), p_x=p_x, p_y=p_y)
    else:
        main_budget = budget
        used = assumed

    sens = used.sensitivity()
    flat = aggregator.noisy_sum(record_stats(data[:, :d], data[:, d]), sens, main_budget, rng)
    post = posterior(unflatten_stats(flat, d, n), settings.lambda0, settings.lam)
    post.budget_spent = budget
    post.bounds = used
    post.info = info
    return post


def fit_trusted_aggregator(X, y, bounds, budget: PrivacyBudget, rng=None, *,
                           projection: bool = False, settings: FitSettings | None = None) -> BlrPosterior:
    """Baseline where one trusted party sees the data and adds all the noise."""
    return fit_ssp(X, y, bounds, budget, TrustedAggregator(), rng,
                   projection=projection, settings=settings)


def fit_distributed(X, y, bounds, budget: PrivacyBudget, aggregator: DistributedAggregator | None = None,
                    rng=None, *, projection: bool = True,
                    settings: FitSettings | None = None) -> BlrPosterior:
    """Distributed fit where row ``i`` of ``X``/``y`` is held by client ``i``."""
    aggregator = aggregator or DistributedAggregator()
    n = np.asarray(X).shape[0]
    if n < aggregator.collusion_tolerance + 2:
        raise InsufficientClients(f"{n} clients cannot tolerate T={aggregator.collusion_tolerance}")
    return fit_ssp(X, y, bounds, budget, aggregator, rng, projection=projection, settings=settings)


def fit_input_perturbation(X, y, bounds, budget: PrivacyBudget, rng=None, *,
                           settings: FitSettings | None = None) -> BlrPosterior:
    """Noise every clamped record, then fit without further privacy."""
    settings = settings or FitSettings()
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    b = _as_bounds(bounds, d)
    rng = np.random.default_rng(rng)
    data = project(np.column_stack([X, np.asarray(y, float).reshape(-1)]), b)
    sigma = gaussian_sigma(record_sensitivity(b.thresholds), budget)
    noisy = data + sample_gaussian_noise(sigma, data.shape, rng)
    post = posterior(suff_stats(noisy[:, :d], noisy[:, d]), settings.lambda0, settings.lam)
    post.budget_spent = budget
    post.bounds = b
    post.info = {"record_sigma": sigma}
    return post


def fit_non_private(X, y, bounds=None, *, settings: FitSettings | None = None) -> BlrPosterior:
    """Exact posterior, optionally on data clamped to ``bounds``."""
    settings = settings or FitSettings()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if bounds is not None:
        b = _as_bounds(bounds, X.shape[1])
        data = project(np.column_stack([X, y]), b)
        X, y = data[:, :-1], data[:, -1]
    return posterior(suff_stats(X, y), settings.lambda0, settings.lam)
