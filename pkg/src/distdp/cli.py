"""Command line entry point (``distdp`` / ``python -m distdp``)."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from .dp import PrivacyBudget, QuerySensitivity, distributed_sigma, gaussian_sigma
from .errors import DistDPError
from .protocol import ProtocolConfig, run_round
from .transport import FaultScript, KeyStore, make_network

DEFAULTS = {
    "seed": 0,
    "out": "results",
    "delta": harness.DEFAULT_DELTA,
}


def _floats(text: str):
    return [float(v) for v in text.split(",") if v]


def _ints(text: str):
    return [int(v) for v in text.split(",") if v]


def _cells(text: str):
    return [tuple(int(p) for p in cell.split(":")) for cell in text.split(",") if cell]


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON file of option values; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")


def _protocol_flags(p: argparse.ArgumentParser, transports=("inproc", "tcp", "sim")):
    p.add_argument("--transport", choices=transports)
    p.add_argument("--n-clients", type=int)
    p.add_argument("--n-compute", type=int)
    p.add_argument("--collusion-t", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="distdp", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic regression data set")
    _common(p)
    p.add_argument("--n", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--lambda0", type=float)
    p.add_argument("--lambda", dest="lam", type=float)

    p = sub.add_parser("compare", help="median MAE of each method over CV runs")
    _common(p)
    _protocol_flags(p)
    p.add_argument("--methods", type=lambda s: s.split(","))
    p.add_argument("--eps", type=_floats, help="comma-separated epsilons")
    p.add_argument("--delta", type=float)
    p.add_argument("--data", dest="csv_path", help="headerless CSV, target in the last column")
    p.add_argument("--n", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--cv-runs", type=int)
    p.add_argument("--test-size", type=int)

    p = sub.add_parser("scaling-factor", help="distributed noise scaling factor N/(N-T-1)")
    _common(p)
    p.add_argument("--n-range", type=_ints)
    p.add_argument("--t-range", type=_ints)
    p.add_argument("--spot", type=_cells, help="cells to measure, e.g. 100:10,10:0")
    p.add_argument("--samples", type=int)

    p = sub.add_parser("bench-protocol", help="protocol round runtimes")
    _common(p)
    _protocol_flags(p)
    p.add_argument("--n-list", type=_ints)
    p.add_argument("--d-list", type=_ints)
    p.add_argument("--repeats", type=int)

    p = sub.add_parser("sum", help="one DCA round over a CSV of client vectors")
    _common(p)
    _protocol_flags(p, ("inproc", "tcp"))
    p.add_argument("--input", required=False, help="CSV, one row per client")
    p.add_argument("--eps", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--sensitivity", type=float, help="l2 sensitivity; omit for a noiseless sum")
    p.add_argument("--timeout", type=float)

    p = sub.add_parser("fit", help="fit one regression method and write the posterior as JSON")
    _common(p)
    _protocol_flags(p)
    p.add_argument("--data", dest="csv_path")
    p.add_argument("--method", choices=harness.METHODS)
    p.add_argument("--eps", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--bound", type=float, help="assumed bound on every column")
    return parser


def resolve(args: argparse.Namespace) -> dict:
    opts = {}
    if getattr(args, "config", None):
        opts.update(json.loads(Path(args.config).read_text()))
    explicit = "seed" in opts or getattr(args, "seed", None) is not None
    opts = {**DEFAULTS, **opts}
    opts.update({k: v for k, v in vars(args).items()
                 if v is not None and k not in ("config", "command", "verbose")})
    opts["explicit_seed"] = explicit
    return opts


def cmd_gen_data(o: dict) -> int:
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    path = out / "synthetic.csv"
    harness.generate_synthetic(o.get("n", 1000), o.get("d", 10), o.get("lambda0", 1.0),
                               o.get("lam", 1.0), o["seed"], path)
    print(path)
    return 0


def cmd_compare(o: dict) -> int:
    fields = harness.ExperimentSpec.__dataclass_fields__
    spec = harness.ExperimentSpec(**{k: v for k, v in o.items() if k in fields})
    table = harness.run_comparison(spec)
    text = table.to_csv()
    path = harness.write_outputs(o["out"], "comparison", text, table.metadata())
    sys.stdout.write(text)
    print(f"wrote {path}", file=sys.stderr)
    return 0


def cmd_scaling(o: dict) -> int:
    rows = harness.run_scaling_factor(o.get("n_range", [2, 5, 10, 20, 50, 100, 200, 500, 1000]),
                                      o.get("t_range", [0, 1, 2, 5, 10]),
                                      o.get("spot", []), o.get("samples", 20000), o["seed"])
    text = harness.scaling_csv(rows)
    meta = {"seed": o["seed"], "config": {k: v for k, v in o.items() if k != "out"},
            "versions": harness._versions()}
    harness.write_outputs(o["out"], "scaling_factor", text, meta)
    sys.stdout.write(text)
    return 0


def cmd_bench(o: dict) -> int:
    rows = harness.run_protocol_bench(o.get("n_list", [100, 1000, 10000]),
                                      o.get("d_list", [10, 100, 1000]),
                                      o.get("n_compute", 10),
                                      o.get("repeats", 5), o.get("transport", "sim"), o["seed"])
    text = harness.bench_csv(rows)
    exponent = harness.growth_exponent(rows) if len(rows) > 1 else float("nan")
    meta = {"seed": o["seed"], "growth_exponent": exponent, "versions": harness._versions()}
    harness.write_outputs(o["out"], "bench_protocol", text, meta)
    sys.stdout.write(text)
    print(f"growth exponent in N*d: {exponent:.3f}", file=sys.stderr)
    return 0


def cmd_sum(o: dict) -> int:
    if "input" not in o:
        raise SystemExit("sum: --input is required")
    Z = np.loadtxt(o["input"], delimiter=",", ndmin=2)
    N, d = Z.shape
    if o.get("n_clients", N) != N:
        raise SystemExit(f"sum: --n-clients={o['n_clients']} but the input has {N} rows")
    sigma_std = 0.0
    if o.get("sensitivity") is not None:
        if o.get("eps") is None:
            raise SystemExit("sum: --sensitivity needs --eps")
        sigma_std = gaussian_sigma(QuerySensitivity(o["sensitivity"], d),
                                   PrivacyBudget(o["eps"], o["delta"]))
    T = o.get("collusion_t", 0)
    plan = distributed_sigma(sigma_std, N, T)
    cfg = ProtocolConfig(N, o.get("n_compute", 2), T, d, sigma_client=plan.sigma_client,
                         timeout=o.get("timeout", 0.5))
    faults = FaultScript.of(*[tuple(f) for f in o.get("faults", [])])
    keys = KeyStore.from_mapping(o["link_keys"], generate_missing=True) if "link_keys" in o else None
    # an explicit seed trades the OS randomness for a reproducible transcript
    rng = np.random.default_rng(o["seed"]) if o["explicit_seed"] else None
    with make_network(o.get("transport", "inproc"), faults, keys) as net:
        result = run_round(Z, cfg, net, rng)
    payload = {
        "dp_sum": result.dp_sum.tolist(),
        "participating_clients": sorted(result.participating_clients),
        "dropped_clients": sorted(result.dropped_clients),
        "sigma_std": sigma_std,
        "sigma_client": plan.sigma_client,
    }
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "sum.json").write_text(json.dumps(payload, indent=2) + "\n")
    print(json.dumps(payload))
    return 0


def cmd_fit(o: dict) -> int:
    if "csv_path" not in o:
        raise SystemExit("fit: --data is required")
    X, y = harness.load_csv(o["csv_path"])
    spec = harness.ExperimentSpec(
        n_compute=o.get("n_compute", 2), collusion_t=o.get("collusion_t", 0), delta=o["delta"],
        assumed_bound=o.get("bound", 7.5), transport=o.get("transport", "sim"), seed=o["seed"],
    )
    method = o.get("method", "DDP_proj")
    eps = o.get("eps", 1.0)
    network = None if spec.transport == "sim" else make_network(spec.transport)
    try:
        post = harness.fit_method(method, X, y, spec, eps, np.random.default_rng(o["seed"]), network)
    finally:
        if network is not None:
            network.close()
    post.info = {**post.info, "method": method}
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "posterior.json").write_text(post.to_json(indent=2) + "\n")
    print(post.to_json())
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "compare": cmd_compare,
    "scaling-factor": cmd_scaling,
    "bench-protocol": cmd_bench,
    "sum": cmd_sum,
    "fit": cmd_fit,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](resolve(args))
    except DistDPError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
