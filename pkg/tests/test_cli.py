import json
import socket
import threading

import numpy as np
import pytest

from fedspca.cli import main, parse_sweep, read_config
from fedspca.core import read_matrix_csv, write_matrix_csv
from fedspca.datagen import load_wdbc_base
from fedspca.errors import ValidationError


def run(*argv):
    return main([str(a) for a in argv])


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@pytest.fixture
def tiny(tmp_path):
    """A K=1 manifest with a 6 x 4 matrix of well separated spectrum."""
    r = np.random.default_rng(0)
    A = r.normal(size=(6, 4)) * np.array([3.0, 1.0, 0.5, 0.2])
    write_matrix_csv(tmp_path / "shard_0.csv", A)
    (tmp_path / "manifest.json").write_text(json.dumps({"kind": "custom", "shards": ["shard_0.csv"]}))
    return tmp_path / "manifest.json", A


def test_gen_synth_writes_shards(tmp_path):
    assert run("gen", "synth", "--iid", "--k", 10, "--seed", 7, "--d", 40, "--out-dir", tmp_path) == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["K"] == 10 and len(manifest["shards"]) == 10
    assert all((tmp_path / f"shard_{i}.csv").is_file() for i in range(10))
    assert read_matrix_csv(tmp_path / "v_sol.csv").shape == (40, 2)


def test_gen_noniid_needs_two_workers(tmp_path, capsys):
    assert run("gen", "synth", "--noniid", "--k", 1, "--out-dir", tmp_path) == 2
    assert "K >= 2" in capsys.readouterr().err


def test_gen_wdbc_from_csv(tmp_path):
    base = load_wdbc_base()
    lines = [",".join(["%d" % (900000 + i), "M" if i % 3 else "B"] + ["%.17g" % x for x in row])
             for i, row in enumerate(base)]
    (tmp_path / "wdbc.csv").write_text("\n".join(lines) + "\n")
    out = tmp_path / "gen"
    assert run("gen", "wdbc", "--input", tmp_path / "wdbc.csv", "--mode", "iid", "--k", 2, "--out-dir", out) == 0
    shard = read_matrix_csv(out / "shard_0.csv")
    assert shard.shape[1] == 830
    np.testing.assert_array_equal(shard[:, :30], base[:shard.shape[0]])


def test_run_matches_eigen_oracle(tiny, tmp_path):
    manifest, A = tiny
    out = tmp_path / "out"
    assert run("run", "fsspca", "--manifest", manifest, "--k", 1, "--lambda1", 0, "--lambda2", 0,
               "--rho", 10, "--r", 1, "--max-rounds", 2000, "--out-dir", out) == 0
    z = read_matrix_csv(out / "loadings.csv")[:, 0]
    Ac = A - A.mean(axis=0)
    top = np.linalg.eigh(Ac.T @ Ac)[1][:, -1]
    assert abs(top @ z) >= 1 - 1e-6
    report = json.loads((out / "report.json").read_text())
    assert report["converged"] and report["trace_rows"] == report["rounds"]


def test_run_fsspca_consensus(tmp_path):
    data = tmp_path / "data"
    run("gen", "synth", "--iid", "--k", 5, "--d", 50, "--seed", 1, "--out-dir", data)
    out = tmp_path / "out"
    assert run("run", "fsspca", "--manifest", data / "manifest.json", "--lambda1", 50, "--lambda2", 100,
               "--rho", 1000, "--r", 2, "--out-dir", out) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["final_mean_abs_cosine"] >= 0.999
    assert report["metrics"]["recovery_error"] <= 0.1


def test_run_faspca_deflation(tmp_path):
    data = tmp_path / "data"
    run("gen", "synth", "--iid", "--k", 2, "--d", 40, "--seed", 2, "--out-dir", data)
    out = tmp_path / "out"
    assert run("run", "faspca", "--manifest", data / "manifest.json", "--deflate", 2,
               "--lambda", 50, "--rho", 1000, "--out-dir", out) == 0
    z = read_matrix_csv(out / "loadings.csv")
    assert z.shape == (40, 2)
    assert abs(z[:, 0] @ z[:, 1]) <= 1e-6


def test_config_file_overlay(tiny, tmp_path, monkeypatch):
    manifest, _ = tiny
    monkeypatch.chdir(tmp_path)
    (tmp_path / "fedspca.conf").write_text("# defaults\nrho = 7\nmax-rounds = 5\nlambda2 = 1\n")
    assert run("run", "fsspca", "--manifest", manifest, "--rho", 9, "--out-dir", "a") == 0
    opts = json.loads((tmp_path / "a" / "report.json").read_text())["run"]["options"]
    assert opts["rho"] == 9.0 and opts["max_rounds"] == 5 and opts["lambda2"] == 1.0
    (tmp_path / "fedspca.conf").write_text("rho = 7\nflavour = 3\n")
    assert run("run", "fsspca", "--manifest", manifest, "--out-dir", "b") == 2


def test_read_config_errors(tmp_path):
    p = tmp_path / "c.conf"
    p.write_text("rho 7\n")
    with pytest.raises(ValidationError):
        read_config(p)
    p.write_text("rho = seven\n")
    with pytest.raises(ValidationError):
        read_config(p)


def test_parse_sweep():
    assert parse_sweep("lambda1=10:50:10") == ("lambda1", [10.0, 20.0, 30.0, 40.0, 50.0])
    assert parse_sweep("rho=0.1:0.3:0.1")[1] == [0.1, 0.2, 0.3]
    for bad in ("seed=1:2:1", "lambda=1:2", "lambda=2:1:1", "lambda=1:2:0"):
        with pytest.raises(ValidationError):
            parse_sweep(bad)


def test_sweep_and_replay_reproduce(tiny, tmp_path):
    manifest, _ = tiny
    sweep = tmp_path / "sweep"
    assert run("run", "faspca", "--manifest", manifest, "--rho", 10, "--max-rounds", 50,
               "--sweep", "lambda=0:1:0.5", "--out-dir", sweep) == 0
    rows = json.loads((sweep / "sweep.json").read_text())
    assert [r["lambda"] for r in rows] == [0.0, 0.5, 1.0]
    single = tmp_path / "single"
    run("run", "faspca", "--manifest", manifest, "--rho", 10, "--max-rounds", 50, "--lambda", 0.5,
        "--out-dir", single)
    a = read_matrix_csv(sweep / "sweep_lambda_0.5" / "loadings.csv")
    b = read_matrix_csv(single / "loadings.csv")
    assert np.abs(a - b).max() <= 1e-10
    replay = tmp_path / "replay"
    assert run("run", "--replay", single / "report.json", "--out-dir", replay) == 0
    c = read_matrix_csv(replay / "loadings.csv")
    assert np.abs(b - c).max() <= 1e-10


def test_tcp_transport_matches_in_process(tiny, tmp_path):
    manifest, _ = tiny
    for transport in ("in_process", "tcp"):
        assert run("run", "fsspca", "--manifest", manifest, "--r", 2, "--lambda2", 1, "--max-rounds", 30,
                   "--transport", transport, "--out-dir", tmp_path / transport) == 0
    a = read_matrix_csv(tmp_path / "in_process" / "loadings.csv")
    b = read_matrix_csv(tmp_path / "tcp" / "loadings.csv")
    assert np.abs(a - b).max() <= 1e-10


def test_master_with_external_worker(tiny, tmp_path):
    port = free_port()
    codes = {}
    master = threading.Thread(target=lambda: codes.setdefault("m", run(
        "master", "faspca", "--k", 1, "--bind", f"127.0.0.1:{port}", "--max-rounds", 20,
        "--timeout", 20, "--out-dir", tmp_path / "m")))
    master.start()
    # retry until the master is listening; a refused connection exits with 4
    for _ in range(200):
        if run("worker", "--connect", f"127.0.0.1:{port}", "--shard", tmp_path / "shard_0.csv",
               "--timeout", 20) == 0:
            break
        threading.Event().wait(0.05)
    master.join(30)
    assert codes["m"] == 0
    assert read_matrix_csv(tmp_path / "m" / "loadings.csv").shape == (4, 1)


def test_metrics_command(tmp_path, capsys):
    r = np.random.default_rng(1)
    V = np.linalg.qr(r.normal(size=(830, 2)))[0]
    write_matrix_csv(tmp_path / "v.csv", V)
    assert run("metrics", "--loadings", tmp_path / "v.csv", "--reference", tmp_path / "v.csv") == 0
    assert json.loads(capsys.readouterr().out)["recovery_error"] <= 1e-24
    assert run("metrics", "--loadings", tmp_path / "v.csv", "--l0", "--tol", 0) == 0
    assert json.loads(capsys.readouterr().out)["l0_count"] == 1660
    assert run("metrics", "--loadings", tmp_path / "v.csv", "--profile", "--original-count", 30,
               "--out-dir", tmp_path / "m") == 0
    prof = json.loads(capsys.readouterr().out)["small_value_percentages"]
    assert list(prof["added"]) == [str(i) for i in range(1, 11)]
    assert (tmp_path / "m" / "metrics.json").is_file()


def test_exit_codes(tmp_path, tiny):
    assert run("run", "fsspca", "--manifest", tmp_path / "missing.json") == 2
    assert run("run", "fsspca", "--manifest", tiny[0], "--rho", -1) == 2
    write_matrix_csv(tmp_path / "shard_0.csv", np.zeros((4, 3)))
    (tmp_path / "zero.json").write_text(json.dumps({"kind": "custom", "shards": ["shard_0.csv"]}))
    assert run("run", "faspca", "--manifest", tmp_path / "zero.json", "--out-dir", tmp_path / "o") == 3
    assert run("worker", "--connect", f"127.0.0.1:{free_port()}", "--shard", tmp_path / "shard_0.csv",
               "--timeout", 2) == 4
    with pytest.raises(SystemExit):
        run("run")
