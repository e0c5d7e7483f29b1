"""Experiment runners: method comparison, noise scaling factor, protocol timing."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import blr
from .dp import PrivacyBudget, distributed_sigma
from .protocol import ProtocolConfig, run_round, simulate_round
from .transport import make_network

log = logging.getLogger(__name__)

METHODS = ("NP", "input_perturbation", "TA", "TA_proj", "DDP", "DDP_proj")
DEFAULT_EPS = (0.1, 0.2, 0.5, 1.0, 2.0, 5.0)
DEFAULT_DELTA = 1e-5


def derive_seed(master: int, *keys) -> int:
    """Stable 64-bit seed from a master seed and labels (independent of PYTHONHASHSEED)."""
    text = json.dumps([int(master), *[str(k) for k in keys]])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


# Data ----------------------------------------------------------------------

def generate_synthetic(n: int, d: int, lambda0: float = 1.0, lam: float = 1.0, seed: int = 0,
                       path: str | Path | None = None) -> np.ndarray:
    """Draw a regression data set from the auxiliary model; optionally write it as CSV.

    Columns are the ``d`` features followed by the target, no header.
    """
    X, y = blr.generate_auxiliary(n, d, lambda0, lam, np.random.default_rng(seed))
    data = np.column_stack([X, y])
    if path is not None:
        write_matrix_csv(path, data)
    return data


def write_matrix_csv(path: str | Path, data: np.ndarray):
    buf = io.StringIO()
    np.savetxt(buf, data, delimiter=",", fmt="%.17g")
    Path(path).write_text(buf.getvalue())


def load_csv(path: str | Path, d: int | None = None):
    """Headerless CSV: feature columns then one target column."""
    data = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
    if d is not None and data.shape[1] != d + 1:
        raise ValueError(f"{path} has {data.shape[1]} columns, expected {d + 1}")
    return data[:, :-1], data[:, -1]


def scale_to_range(data: np.ndarray, length: float = 10.0) -> np.ndarray:
    """Centre every column and rescale it to span ``length``."""
    data = np.asarray(data, dtype=np.float64)
    centred = data - data.mean(axis=0)
    span = centred.max(axis=0) - centred.min(axis=0)
    span[span == 0] = 1.0
    return centred * (length / span)


# Comparison ------------------------------------------------------------------

@dataclass
class ExperimentSpec:
    methods: Sequence[str] = METHODS
    n: int = 5000
    d: int = 10
    csv_path: str | None = None
    eps: Sequence[float] = DEFAULT_EPS
    delta: float = DEFAULT_DELTA
    cv_runs: int = 25
    test_size: int = 1000
    n_compute: int = 2
    collusion_t: int = 0
    transport: str = "sim"
    seed: int = 0
    lambda0: float = 1.0
    lam: float = 1.0
    assumed_bound: float = 7.5
    range_length: float = 10.0
    split: float = blr.DEFAULT_SPLIT
    std_estimator: str = "abs"
    grid: Sequence[float] | None = None
    repeats: int = blr.DEFAULT_REPEATS

    def __post_init__(self):
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}; choose from {METHODS}")
        if self.cv_runs < 1:
            raise ValueError("cv_runs must be positive")

    def settings(self) -> blr.FitSettings:
        return blr.FitSettings(self.lambda0, self.lam, self.split, self.std_estimator,
                               self.grid, self.repeats)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["methods"] = list(self.methods)
        out["eps"] = list(self.eps)
        out["grid"] = None if self.grid is None else list(self.grid)
        return out


@dataclass
class ResultRow:
    method: str
    eps: float
    median_mae: float
    iqr: float
    n: int
    d: int
    wall_time: float = 0.0
    maes: list = field(default_factory=list, repr=False)


@dataclass
class ResultTable:
    rows: list[ResultRow]
    spec: ExperimentSpec | None = None

    COLUMNS = ("method", "eps", "median_mae", "iqr", "n", "d")

    def cell(self, method: str, eps: float) -> ResultRow:
        for r in self.rows:
            if r.method == method and r.eps == eps:
                return r
        raise KeyError((method, eps))

    def to_csv(self, include_timing: bool = False) -> str:
        """Result table as CSV text.

        Wall-clock time is left out unless requested so that seeded runs
        give byte-identical tables.
        """
        cols = self.COLUMNS + (("wall_time",) if include_timing else ())
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.rows:
            w.writerow([repr(getattr(r, c)) if isinstance(getattr(r, c), float) else getattr(r, c)
                        for c in cols])
        return buf.getvalue()

    def metadata(self) -> dict:
        spec = self.spec.to_dict() if self.spec else {}
        return {
            "seed": spec.get("seed"),
            "config": spec,
            "config_hash": hashlib.sha256(json.dumps(spec, sort_keys=True).encode()).hexdigest(),
            "versions": _versions(),
            "wall_time": {f"{r.method}@{r.eps}": r.wall_time for r in self.rows},
        }


def _versions() -> dict:
    import cryptography

    return {"distdp": __version__, "numpy": np.__version__, "cryptography": cryptography.__version__,
            "python": platform.python_version()}


def load_experiment_data(spec: ExperimentSpec):
    if spec.csv_path:
        X, y = load_csv(spec.csv_path)
    else:
        raw = generate_synthetic(spec.n + spec.test_size, spec.d, spec.lambda0, spec.lam,
                                 derive_seed(spec.seed, "data"))
        X, y = raw[:, :-1], raw[:, -1]
    data = scale_to_range(np.column_stack([X, y]), spec.range_length)
    return data[:, :-1], data[:, -1]


def _aggregator(spec: ExperimentSpec, network):
    return blr.DistributedAggregator(n_compute=spec.n_compute, collusion_tolerance=spec.collusion_t,
                                     network=network)


def fit_method(method: str, X, y, spec: ExperimentSpec, eps: float, rng, network=None) -> blr.BlrPosterior:
    budget = PrivacyBudget(eps, spec.delta)
    d = X.shape[1]
    bounds = blr.ProjectionBounds.uniform(spec.assumed_bound, spec.assumed_bound, d)
    settings = spec.settings()
    if method == "NP":
        return blr.fit_non_private(X, y, settings=settings)
    if method == "input_perturbation":
        return blr.fit_input_perturbation(X, y, bounds, budget, rng, settings=settings)
    if method in ("TA", "TA_proj"):
        return blr.fit_trusted_aggregator(X, y, bounds, budget, rng,
                                          projection=method == "TA_proj", settings=settings)
    if method in ("DDP", "DDP_proj"):
        return blr.fit_distributed(X, y, bounds, budget, _aggregator(spec, network), rng,
                                   projection=method == "DDP_proj", settings=settings)
    raise ValueError(f"unknown method {method!r}")


def run_comparison(spec: ExperimentSpec) -> ResultTable:
    """Median test MAE of every method at every epsilon over ``cv_runs`` random splits.

    The split of run ``r`` is shared by all methods.  The DP randomness of
    each (method, eps, run) cell comes from its own derived seed.
    """
    X, y = load_experiment_data(spec)
    n_total = X.shape[0]
    if spec.test_size >= n_total:
        raise ValueError(f"test_size {spec.test_size} leaves no training data ({n_total} rows)")
    network = None if spec.transport == "sim" else make_network(spec.transport)
    maes = {(m, e): [] for m in spec.methods for e in spec.eps}
    times = {(m, e): 0.0 for m in spec.methods for e in spec.eps}
    try:
        for run in range(spec.cv_runs):
            perm = np.random.default_rng(derive_seed(spec.seed, "split", run)).permutation(n_total)
            test, train = perm[:spec.test_size], perm[spec.test_size:]
            for method in spec.methods:
                np_mae = None
                for eps in spec.eps:
                    t0 = time.perf_counter()
                    if method == "NP" and np_mae is not None:
                        mae = np_mae
                    else:
                        rng = np.random.default_rng(derive_seed(spec.seed, method, eps, run))
                        post = fit_method(method, X[train], y[train], spec, eps, rng, network)
                        mae = float(np.mean(np.abs(post.predict(X[test]) - y[test])))
                        if method == "NP":
                            np_mae = mae
                    times[(method, eps)] += time.perf_counter() - t0
                    maes[(method, eps)].append(mae)
            log.info("cv run %d/%d done", run + 1, spec.cv_runs)
    finally:
        if network is not None:
            network.close()

    rows = []
    for (method, eps), values in maes.items():
        q1, med, q3 = np.percentile(values, [25, 50, 75])
        rows.append(ResultRow(method, float(eps), float(med), float(q3 - q1), len(train), X.shape[1],
                              times[(method, eps)], values))
    return ResultTable(rows, spec)


# Noise scaling -------------------------------------------------------------

@dataclass
class ScalingRow:
    N: int
    T: int
    factor: float
    measured: float = math.nan


def measure_variance_ratio(N: int, T: int, samples: int = 20000, seed: int = 0,
                           dimension: int = 1000) -> float:
    """Monte-Carlo ratio of distributed to central noise variance.

    Runs the protocol on zero inputs with ``sigma_std = 1`` until at least
    ``samples`` noise coordinates have been collected.
    """
    rng = np.random.default_rng(seed)
    cfg = ProtocolConfig.calibrated(N, 2, T, dimension, 1.0)
    rounds = max(1, math.ceil(samples / dimension))
    draws = np.concatenate([simulate_round(np.zeros((N, dimension)), cfg, rng).dp_sum
                            for _ in range(rounds)])
    return float(np.var(draws))


def run_scaling_factor(n_range: Sequence[int], t_range: Sequence[int],
                       spot_cells: Sequence[tuple[int, int]] = (), samples: int = 20000,
                       seed: int = 0) -> list[ScalingRow]:
    """Analytic factor N/(N-T-1) on a grid, plus measured ratios at spot cells."""
    spots = {tuple(c) for c in spot_cells}
    rows = []
    for T in t_range:
        for N in n_range:
            if N <= T + 1:
                continue
            plan = distributed_sigma(1.0, N, T)
            row = ScalingRow(N, T, plan.scaling_factor)
            if (N, T) in spots:
                row.measured = measure_variance_ratio(N, T, samples, derive_seed(seed, "scaling", N, T))
            rows.append(row)
    for N, T in spots - {(r.N, r.T) for r in rows}:
        rows.append(ScalingRow(N, T, distributed_sigma(1.0, N, T).scaling_factor,
                               measure_variance_ratio(N, T, samples, derive_seed(seed, "scaling", N, T))))
    return rows


def scaling_csv(rows: Sequence[ScalingRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["N", "T", "factor", "measured"])
    for r in rows:
        w.writerow([r.N, r.T, repr(r.factor), "" if math.isnan(r.measured) else repr(r.measured)])
    return buf.getvalue()


# Protocol timing ------------------------------------------------------------

@dataclass
class BenchRow:
    N: int
    d: int
    M: int
    seconds: float
    messages_per_node: int


def run_protocol_bench(n_list: Sequence[int], d_list: Sequence[int], M: int = 10,
                       repeats: int = 5, transport: str = "sim", seed: int = 0) -> list[BenchRow]:
    """Average wall-clock seconds of one protocol round per (N, d) cell.

    ``transport="sim"`` times the vectorised round; ``"inproc"``/``"tcp"``
    time the full message-level round and are only practical for small cells.
    """
    rows = []
    for N in n_list:
        for d in d_list:
            cfg = ProtocolConfig.calibrated(N, M, 0, d, 1.0, timeout=1.0)
            Z = np.zeros((N, d))
            rng = np.random.default_rng(derive_seed(seed, "bench", N, d))
            elapsed = []
            for _ in range(repeats):
                if transport == "sim":
                    t0 = time.perf_counter()
                    result = simulate_round(Z, cfg, rng)
                    elapsed.append(time.perf_counter() - t0)
                else:
                    with make_network(transport) as net:
                        t0 = time.perf_counter()
                        result = run_round(Z, cfg, net, rng)
                        elapsed.append(time.perf_counter() - t0)
            counts = set(result.messages_per_node.values())
            rows.append(BenchRow(N, d, M, float(np.mean(elapsed)), min(counts)))
            log.info("bench N=%d d=%d: %.4fs", N, d, rows[-1].seconds)
    return rows


def growth_exponent(rows: Sequence[BenchRow]) -> float:
    """Slope of log(seconds) against log(N * d)."""
    x = np.log([r.N * r.d for r in rows])
    y = np.log([r.seconds for r in rows])
    return float(np.polyfit(x, y, 1)[0])


def bench_csv(rows: Sequence[BenchRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["N", "d", "M", "seconds", "messages_per_node"])
    for r in rows:
        w.writerow([r.N, r.d, r.M, f"{r.seconds:.6f}", r.messages_per_node])
    return buf.getvalue()


def write_outputs(out_dir: str | Path, name: str, table_csv: str, metadata: dict) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{name}.csv"
    path.write_text(table_csv)
    (out / f"{name}.meta.json").write_text(json.dumps(metadata, indent=2, sort_keys=True) + "\n")
    return path
