import copy
import json
import subprocess
import sys

import pytest

from tvcert.certify import certificate_from_params
from tvcert.cli import main, render_json, report_render, validate_config
from tvcert.errors import ConfigError

CERT = {"metric_upper": 0.01, "params": {"d": 1, "gamma": 1, "c_phi": 2, "delta": 1, "c_f": 2}}


def body(text):
    return [line for line in text.splitlines() if not line.startswith("# timestamp:")]


def run_cli(*argv):
    return subprocess.run([sys.executable, "-m", "tvcert.cli", *argv], capture_output=True, text=True)


def test_clt_series_columns(tmp_path):
    out = tmp_path / "r.csv"
    assert main(["clt", "--base", "laplace", "--n-list", "4,16,64", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    header = [line for line in lines if line.startswith("#")]
    assert [h.split(":")[0] for h in header] == ["# tvcert 0.1.0", "# command", "# seed", "# config", "# timestamp"]
    rows = [line for line in lines if not line.startswith("#")]
    assert rows[0] == "n,tv,tv_trunc_err,supdist,slope_so_far"
    assert [r.split(",")[0] for r in rows[1:]] == ["4", "16", "64"]
    assert rows[1].split(",")[-1] == "nan"
    assert float(rows[3].split(",")[-1]) < 0


@pytest.mark.parametrize("gamma", [0, -1])
def test_nonpositive_gamma_exits_two_naming_field(gamma, capsys):
    cfg = copy.deepcopy(CERT)
    cfg["params"]["gamma"] = gamma
    assert main(["certify", "--config", json.dumps(cfg)]) == 2
    assert "params.gamma" in capsys.readouterr().err


@pytest.mark.parametrize(
    "mutation,field",
    [
        (lambda c: c.update(unknown=1), "unknown"),
        (lambda c: c["params"].update(c_phi="two"), "params.c_phi"),
        (lambda c: c.update(metric_upper=-0.5), "metric_upper"),
        (lambda c: c.update(mode="loose"), "mode"),
    ],
)
def test_schema_violations(mutation, field, capsys):
    cfg = copy.deepcopy(CERT)
    mutation(cfg)
    assert main(["certify", "--config", json.dumps(cfg)]) == 2
    assert field in capsys.readouterr().err


def test_validate_config_raises_config_error():
    with pytest.raises(ConfigError) as e:
        validate_config({"command": "clt", "base": "laplace", "n_list": []})
    assert e.value.field.startswith("n_list")


def test_numeric_failure_exits_one(capsys):
    assert main(["clt", "--base", '{"family":"cauchy"}', "--n-list", "4"]) == 1
    err = capsys.readouterr().err
    assert "numeric failure [" in err


def test_clt_output_deterministic_across_thread_counts(tmp_path):
    outs = []
    for threads in ("1", "8", "1"):
        p = tmp_path / f"t{threads}_{len(outs)}.csv"
        assert main(["clt", "--base", "laplace", "--n-list", "2,8,32,128", "--threads", threads, "--out", str(p)]) == 0
        outs.append(body(p.read_text()))
    assert outs[0] == outs[1] == outs[2]


def test_dynsys_output_deterministic(tmp_path):
    rec = {
        "nu": {"type": "affine", "A": [[0.5]], "b": [0.0]},
        "coeffs": {"type": "geometric", "ratio": 0.5, "tol": 1e-8},
        "innovation": {"family": "laplace", "lambda": 1.0},
        "init": {"family": "point", "x": [1.0]},
        "kappa": 0.5,
    }
    outs = []
    for i in range(2):
        p = tmp_path / f"d{i}.csv"
        argv = ["dynsys", "--recursion", json.dumps(rec), "--horizon", "5", "--paths", "2000", "--seed", "3"]
        assert main(argv + ["--out", str(p)]) == 0
        outs.append(body(p.read_text()))
    assert outs[0] == outs[1]
    assert outs[0][-1].startswith("5,")


def test_certify_render_and_json_agree(tmp_path, capsys):
    out = tmp_path / "c.json"
    assert main(["certify", "--config", json.dumps(CERT), "--out", str(out)]) == 0
    text = capsys.readouterr().out
    doc = json.loads(out.read_text())
    lines = text.strip().splitlines()
    keys = [line.split(" ")[0] for line in lines]
    assert keys[:5] == ["a_d", "C_gamma", "G_tilde", "G_prime", "G"]
    assert lines[-1].startswith("bound: d_TV <= ")
    assert lines[-1].endswith("<= 2 enforced: yes")
    assert doc["result"]["tv_bound"] == 2.0
    assert f"raw {doc['result']['tv_raw']:.11g}" in lines[-1]
    assert f"G = {doc['result']['ledger']['G']:.12g}" in text


def test_report_render_without_cap():
    cert = certificate_from_params(1e-12, 1, 1, 2, 1, 2, "fm", "paper_faithful")
    last = report_render(cert).strip().splitlines()[-1]
    assert last.endswith("<= 2 enforced: no")


def test_render_json_excludes_threads_and_out():
    cfg = {"command": "clt", "base": "laplace", "n_list": [4], "threads": 8, "out": "x.csv", "seed": 2}
    doc = json.loads(render_json(cfg, {"ok": True}))
    assert "threads" not in doc["config"] and "out" not in doc["config"]
    assert doc["seed"] == 2


def test_check_dominated_command(capsys):
    cfg = {
        "sequence": [{"family": "gaussian", "mean": [0.0], "cov": [[1.0 + 1.0 / k]]} for k in (1, 4, 16)],
        "limit": {"family": "gaussian", "mean": [0.0], "cov": [[1.0]]},
        "psi": {"kind": "gaussian", "c": 0.5},
    }
    assert main(["check-dominated", "--config", json.dumps(cfg)]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["result"]["verdict"]


def test_console_entry_point():
    r = run_cli("--version")
    assert r.returncode == 0 and "tvcert" in r.stdout
