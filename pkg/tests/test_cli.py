import json

import numpy as np
import pytest

from cli import build_parser, main, resolve_config
from errors import ConfigError

FAST_FLAGS = ["--propensity-learner", "logistic", "--outcome-learner", "logistic", "--threads", "1"]


@pytest.fixture
def csv_path(tmp_path):
    gen = np.random.default_rng(3)
    n = 300
    x = gen.uniform(size=n)
    T = (gen.uniform(size=n) < 0.3 + 0.4 * x).astype(int)
    W = T
    Y = x + gen.standard_normal(n)
    lines = ["x1,T,W,Y"] + [f"{a:.6f},{t},{w},{y:.6f}" for a, t, w, y in zip(x, T, W, Y)]
    path = tmp_path / "data.csv"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def estimate_args(csv_path, out, *extra):
    return ["estimate", "--data", str(csv_path), "--treatment", "T", "--outcome", "Y", "--covariates", "x1",
            "--splits", "1", "--output", str(out), *FAST_FLAGS, *extra]


def test_estimate_writes_report(csv_path, tmp_path):
    out = tmp_path / "report.json"
    assert main(estimate_args(csv_path, out, "--seed", "7", "--gamma", "0.5")) == 0
    doc = json.loads(out.read_text())
    for key in ("schema_version", "config_echo", "estimand", "theta", "jacobian", "sigma", "stderr", "ci", "n",
                "splits", "warnings"):
        assert key in doc
    assert doc["config_echo"]["seed"] == 7
    assert doc["n"] == 300
    assert doc["ci"]["lower"][0] <= doc["theta"][0] <= doc["ci"]["upper"][0]
    assert not (tmp_path / "report.json.tmp").exists()


def test_estimate_echoes_drawn_seed(csv_path, tmp_path):
    out = tmp_path / "report.json"
    assert main(estimate_args(csv_path, out)) == 0
    assert isinstance(json.loads(out.read_text())["config_echo"]["seed"], int)


def test_estimate_effect(csv_path, tmp_path):
    out = tmp_path / "effect.json"
    assert main(estimate_args(csv_path, out, "--seed", "1", "--effect", "--splits", "3", "--aggregate", "median")) == 0
    doc = json.loads(out.read_text())
    assert set(doc["arms"]) == {"treated", "control"}
    assert doc["estimand"] == "quantile_effect"
    assert doc["theta"][0] == pytest.approx(doc["arms"]["treated"]["theta"][0] - doc["arms"]["control"]["theta"][0])


def test_estimate_missing_outcome_is_config_error(csv_path, tmp_path, capsys):
    code = main(["estimate", "--data", str(csv_path), "--treatment", "T", "--output", str(tmp_path / "r.json")])
    assert code == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"]["code"] == "config_error"
    assert not (tmp_path / "r.json").exists()


def test_lqte_without_instrument_fails(csv_path, tmp_path, capsys):
    code = main(estimate_args(csv_path, tmp_path / "r.json", "--estimand", "lqte", "--seed", "1"))
    assert code != 0
    assert json.loads(capsys.readouterr().err)["error"]["code"] == "missing_instrument"


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"gamma": 0.25, "splits": 7, "learners": {"outcome": {"kind": "gbt", "trees": 10}}}))
    args = build_parser().parse_args(["estimate", "--config", str(cfg), "--splits", "2", "--outcome-learner", "ridge"])
    run = resolve_config(args)
    assert run["gamma"] == 0.25
    assert run["splits"] == 2
    assert run["learners"]["outcome"] == {"kind": "ridge", "trees": 10}
    assert run["threads"] >= 1


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"gama": 0.25}))
    with pytest.raises(ConfigError):
        resolve_config(build_parser().parse_args(["estimate", "--config", str(cfg)]))


def test_self_normalize_flag():
    assert resolve_config(build_parser().parse_args(["estimate"]))["self_normalize"] is True
    run = resolve_config(build_parser().parse_args(["estimate", "--no-self-normalize"]))
    assert run["self_normalize"] is False


def simulate(tmp_path, name, *extra):
    cfg = tmp_path / "sim.json"
    cfg.write_text(json.dumps({"learners": {"propensity": {"kind": "logistic"}, "outcome": {"kind": "logistic"}}}))
    out = tmp_path / name
    code = main(["simulate", "--config", str(cfg), "--n", "200", "--reps", "2", "--runs", "1", "--seed", "1",
                 "--output", str(out), *extra])
    return code, out


def test_simulate_writes_study(tmp_path):
    code, out = simulate(tmp_path, "study.json", "--methods", "ldml,ipw", "--threads", "1")
    assert code == 0
    doc = json.loads(out.read_text())
    assert doc["study"] == "paper-sim"
    assert len(doc["reports"]) == 2
    assert {r["method"] for r in doc["reports"]} == {"ldml", "ipw"}


def test_simulate_is_byte_identical(tmp_path):
    _, first = simulate(tmp_path, "a.json", "--methods", "ldml,ipw", "--threads", "1")
    _, second = simulate(tmp_path, "b.json", "--methods", "ldml,ipw", "--threads", "2")
    assert first.read_bytes() == second.read_bytes()


def test_simulate_unknown_method(tmp_path):
    code, out = simulate(tmp_path, "study.json", "--methods", "ldml,bootstrap")
    assert code == 2
    assert not out.exists()


def test_simulate_needs_seed(tmp_path, capsys):
    assert main(["simulate", "--n", "200", "--reps", "1", "--output", str(tmp_path / "s.json")]) == 2
    assert "seed" in json.loads(capsys.readouterr().err)["error"]["message"]
