import json
import subprocess
import sys

import numpy as np
import pytest

from distdp import harness
from distdp.cli import main
from distdp.protocol import compute_id


def small_spec(**kw):
    base = dict(n=300, d=2, eps=(0.5, 5.0), cv_runs=3, test_size=100, repeats=2, seed=3)
    base.update(kw)
    return harness.ExperimentSpec(**base)


def test_derive_seed_is_stable():
    assert harness.derive_seed(1, "DDP", 0.5, 3) == harness.derive_seed(1, "DDP", 0.5, 3)
    assert harness.derive_seed(1, "DDP", 0.5, 3) != harness.derive_seed(1, "TA", 0.5, 3)


def test_generate_synthetic(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    harness.generate_synthetic(50, 4, seed=9, path=a)
    harness.generate_synthetic(50, 4, seed=9, path=b)
    assert a.read_bytes() == b.read_bytes()
    X, y = harness.load_csv(a, d=4)
    assert X.shape == (50, 4) and y.shape == (50,)
    with pytest.raises(ValueError):
        harness.load_csv(a, d=3)
    data = harness.generate_synthetic(10**4, 3, seed=1)
    assert np.all(np.abs(data[:, :3].std(axis=0) - 1) < 0.05)


def test_scale_to_range():
    data = np.random.default_rng(0).normal(size=(100, 3))
    s = harness.scale_to_range(data, 10.0)
    assert np.allclose(s.max(axis=0) - s.min(axis=0), 10.0)
    assert np.allclose(s.mean(axis=0), 0.0)


def test_comparison_table():
    table = harness.run_comparison(small_spec())
    assert len(table.rows) == 6 * 2
    np_rows = [table.cell("NP", e) for e in (0.5, 5.0)]
    assert np_rows[0].median_mae == np_rows[1].median_mae
    for r in table.rows:
        assert len(r.maes) == 3
        assert r.median_mae == pytest.approx(np.median(r.maes))
    # more budget helps the noisiest method
    assert table.cell("input_perturbation", 5.0).median_mae <= table.cell("input_perturbation", 0.5).median_mae
    assert table.to_csv() == harness.run_comparison(small_spec()).to_csv()
    meta = table.metadata()
    assert meta["seed"] == 3 and len(meta["config_hash"]) == 64


def test_comparison_rejects_unknown_method():
    with pytest.raises(ValueError):
        harness.ExperimentSpec(methods=("NP", "magic"))


def test_scaling_factor_rows():
    rows = harness.run_scaling_factor([2, 1000], [0], [(100, 10)], samples=20000, seed=0)
    by_cell = {(r.N, r.T): r for r in rows}
    assert by_cell[(2, 0)].factor == 2.0
    assert by_cell[(1000, 0)].factor == pytest.approx(1000 / 999, rel=1e-15)
    assert by_cell[(100, 10)].measured == pytest.approx(100 / 89, rel=0.05)
    assert "N,T,factor,measured" in harness.scaling_csv(rows)


def test_protocol_bench():
    rows = harness.run_protocol_bench([100, 1000], [10, 100], M=4, repeats=5)
    assert all(r.messages_per_node == r.N for r in rows)
    cell = {(r.N, r.d): r.seconds for r in rows}
    assert cell[(1000, 100)] > cell[(100, 10)]
    # 100x the work should cost well under 100x the time
    assert cell[(1000, 100)] < 100 * cell[(100, 10)]
    msg = harness.run_protocol_bench([5], [3], M=3, repeats=1, transport="inproc")
    assert msg[0].messages_per_node == 5


def run_cli(*args):
    return main([str(a) for a in args])


def test_cli_gen_data_and_fit(tmp_path, capsys):
    assert run_cli("gen-data", "--n", 200, "--d", 3, "--seed", 1, "--out", tmp_path) == 0
    data = tmp_path / "synthetic.csv"
    assert np.loadtxt(data, delimiter=",").shape == (200, 4)
    assert run_cli("fit", "--data", data, "--method", "DDP", "--eps", 1, "--bound", 4,
                   "--seed", 2, "--out", tmp_path) == 0
    post = json.loads((tmp_path / "posterior.json").read_text())
    assert post["d"] == 3 and post["n"] == 200 and post["info"]["method"] == "DDP"


def test_cli_compare_is_deterministic(tmp_path, capsys):
    outs = []
    for i in range(2):
        out = tmp_path / str(i)
        assert run_cli("compare", "--n", 200, "--d", 2, "--cv-runs", 2, "--test-size", 50,
                       "--eps", "1", "--methods", "NP,TA,DDP", "--seed", 4, "--out", out) == 0
        outs.append((out / "comparison.csv").read_bytes())
        assert json.loads((out / "comparison.meta.json").read_text())["seed"] == 4
    assert outs[0] == outs[1]


def test_cli_config_file_and_flag_override(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n": 150, "d": 2, "seed": 8}))
    assert run_cli("gen-data", "--config", cfg, "--out", tmp_path / "a") == 0
    assert run_cli("gen-data", "--config", cfg, "--d", 3, "--out", tmp_path / "b") == 0
    assert np.loadtxt(tmp_path / "a" / "synthetic.csv", delimiter=",").shape == (150, 3)
    assert np.loadtxt(tmp_path / "b" / "synthetic.csv", delimiter=",").shape == (150, 4)


@pytest.mark.parametrize("transport", ["inproc", "tcp"])
def test_cli_sum_with_faults(tmp_path, capsys, transport):
    Z = np.arange(24, dtype=float).reshape(8, 3)
    src = tmp_path / "z.csv"
    np.savetxt(src, Z, delimiter=",")
    cfg = tmp_path / "cfg.json"
    keys = {f"{i}-{compute_id(k)}": bytes([i, k] * 16).hex() for i in range(8) for k in range(3)}
    cfg.write_text(json.dumps({"faults": [[2, 0, "drop_before_send"]], "link_keys": keys,
                               "timeout": 0.2}))
    rc = run_cli("sum", "--config", cfg, "--input", src, "--transport", transport,
                 "--n-compute", 3, "--collusion-t", 1, "--seed", 0, "--out", tmp_path)
    assert rc == 0
    res = json.loads((tmp_path / "sum.json").read_text())
    assert res["dropped_clients"] == [2]
    assert np.allclose(res["dp_sum"], Z.sum(axis=0) - Z[2], atol=1e-6)


def test_cli_sum_noise_and_abort(tmp_path, capsys):
    src = tmp_path / "z.csv"
    np.savetxt(src, np.zeros((5, 2)), delimiter=",")
    assert run_cli("sum", "--input", src, "--eps", 1, "--sensitivity", 1, "--seed", 1,
                   "--collusion-t", 1, "--out", tmp_path) == 0
    res = json.loads((tmp_path / "sum.json").read_text())
    assert res["sigma_client"] ** 2 * 3 >= res["sigma_std"] ** 2
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"faults": [[0, 0, "drop_before_send"], [1, 0, "drop_before_send"]]}))
    assert run_cli("sum", "--config", cfg, "--input", src, "--collusion-t", 1, "--out", tmp_path) == 2
    assert "dropped" in capsys.readouterr().err


def test_cli_scaling_and_bench(tmp_path, capsys):
    assert run_cli("scaling-factor", "--n-range", "2,10", "--t-range", "0", "--out", tmp_path) == 0
    assert (tmp_path / "scaling_factor.csv").read_text().splitlines()[1] == "2,0,2.0,"
    assert run_cli("bench-protocol", "--n-list", "10,100", "--d-list", "5", "--repeats", 1,
                   "--out", tmp_path) == 0
    assert "growth_exponent" in json.loads((tmp_path / "bench_protocol.meta.json").read_text())


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "distdp", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("gen-data", "compare", "scaling-factor", "bench-protocol", "sum", "fit"):
        assert cmd in out.stdout
