import json
import time
from pathlib import Path

import numpy as np
import pytest

from pilqr.cli import main
from pilqr.errors import ConfigurationError
from pilqr.harness import (
    CSV_COLUMNS,
    AlignmentError,
    ExperimentConfig,
    compare,
    iteration_seed,
    load_config,
    parse_config,
    read_progress,
    run_experiment,
    worker_count,
)

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

LQ_CONDITION = {"A": [[1.0, 0.1], [0.0, 1.0]], "B": [[0.0], [0.1]], "Q": [[1.0, 0.0], [0.0, 0.1]], "R": [[0.01]], "x0": [1.0, 0.0], "x0_noise": 0.1, "horizon": 10}


def lq_config(**kw):
    base = {"name": "lq", "env": "lq", "iterations": 1, "n_samples": 2, "conditions": [LQ_CONDITION], "eval_samples": 5}
    return ExperimentConfig.model_validate({**base, **kw})


def artifact_bytes(d):
    return {p.name: p.read_bytes() for p in sorted(Path(d).iterdir()) if p.is_file()}


# config parsing


def test_shipped_configs_validate():
    for path in sorted(CONFIGS.glob("*.json")):
        cfg = load_config(path)
        assert not any(isinstance(c, str) for c in cfg.conditions), path


def test_unknown_key_reports_line():
    text = '{\n "env": "lq",\n "conditions": [{}],\n "iteratoins": 3\n}'
    with pytest.raises(ConfigurationError, match=r"cfg.json:4: iteratoins: Extra inputs are not permitted"):
        parse_config(text, "cfg.json")


def test_invalid_values_report_lines():
    text = '{\n "env": "lq",\n "conditions": [{}],\n "n_samples": 1,\n "eps_min": 1.0,\n "eps_max": 0.5\n}'
    with pytest.raises(ConfigurationError) as e:
        parse_config(text, "c.json")
    msg = str(e.value)
    assert "c.json:4: n_samples" in msg and "c.json:6: eps_max" in msg


def test_malformed_json_position():
    with pytest.raises(ConfigurationError, match=r"bad.json:2:\d+: invalid JSON"):
        parse_config('{"env": "lq",\n "conditions": [}', "bad.json")


def test_missing_condition_file(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"env": "pusher", "conditions": ["nope.json"]}))
    with pytest.raises(ConfigurationError, match="condition file not found"):
        load_config(tmp_path / "c.json")


def test_hash_is_stable_and_sensitive():
    a, b = lq_config(), lq_config()
    assert a.config_hash() == b.config_hash()
    assert lq_config(n_samples=3).config_hash() != a.config_hash()


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("PILQR_THREADS", "2")
    assert worker_count(8) == 2 and worker_count(1) == 1
    monkeypatch.delenv("PILQR_THREADS")
    assert worker_count(3) >= 1


def test_iteration_seeds_distinct():
    seeds = {iteration_seed(s, it, c) for s in range(3) for it in range(5) for c in range(4)}
    assert len(seeds) == 60


# running


def test_lq_smoke_run(tmp_path):
    start = time.perf_counter()
    res = run_experiment(lq_config(), 0, tmp_path)
    assert time.perf_counter() - start < 1.0
    rows = read_progress(tmp_path / "progress.csv")
    assert len(rows) == 1 and tuple(rows[0]) == CSV_COLUMNS
    assert rows[0]["episodes_cumulative"] == 2
    for name in ("manifest.json", "policy.json", "checkpoint.json", "summary.json"):
        assert (tmp_path / name).is_file()
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["seed"] == 0 and manifest["config_hash"] == lq_config().config_hash()
    assert np.isfinite(res.final_cost)


def test_same_seed_identical_bytes(tmp_path):
    cfg = lq_config(iterations=3, n_samples=4)
    run_experiment(cfg, 3, tmp_path / "a")
    run_experiment(cfg, 3, tmp_path / "b")
    assert artifact_bytes(tmp_path / "a") == artifact_bytes(tmp_path / "b")


def test_rerun_from_manifest_is_bitwise(tmp_path):
    assert main(["run", "--config", str(CONFIGS / "lq_smoke.json"), "--seed", "4", "--out", str(tmp_path / "a")]) == 0
    assert main(["run", "--config", str(tmp_path / "a" / "manifest.json"), "--out", str(tmp_path / "b")]) == 0
    assert artifact_bytes(tmp_path / "a") == artifact_bytes(tmp_path / "b")


def test_thread_count_does_not_change_results(tmp_path, monkeypatch):
    cfg = ExperimentConfig.model_validate(
        {"env": "reacher", "horizon": 20, "iterations": 2, "n_samples": 3, "eval_samples": 2, "conditions": [{"target": [0.8, 0.6]}, {"target": [1.4, 1.2]}]}
    )
    monkeypatch.setenv("PILQR_THREADS", "1")
    run_experiment(cfg, 0, tmp_path / "one")
    monkeypatch.setenv("PILQR_THREADS", "4")
    run_experiment(cfg, 0, tmp_path / "four")
    assert artifact_bytes(tmp_path / "one") == artifact_bytes(tmp_path / "four")


def test_pusher_budget_is_400_episodes(tmp_path, quiet):
    cfg = load_config(CONFIGS / "pusher_pilqr.json")
    cfg = cfg.model_copy(update={"conditions": cfg.conditions[:1], "horizon": 20, "eval_samples": 0})
    res = run_experiment(cfg, 0, tmp_path)
    assert len(res.rows) == 20 and res.rows[-1]["episodes_cumulative"] == 400


def test_mdgps_run_writes_global_policy(tmp_path, quiet):
    cfg = ExperimentConfig.model_validate(
        {"env": "reacher", "algorithm": "mdgps", "horizon": 20, "iterations": 2, "n_samples": 3, "eval_samples": 2, "conditions": [{"target": [0.8, 0.6]}, {"target": [1.4, 1.2]}]}
    )
    run_experiment(cfg, 1, tmp_path)
    doc = json.loads((tmp_path / "policy.json").read_text())
    assert doc["global_policy"]["fitted"] and len(doc["policies"]) == 2


# compare


def test_single_config_table_equals_its_csv(tmp_path):
    cfg = lq_config(iterations=3, n_samples=3)
    table = compare([cfg], tmp_path)
    own = read_progress(tmp_path / "lq" / "seed_0" / "progress.csv")
    assert [r["mean_cost"] for r in table] == [r["mean_cost"] for r in own]
    assert all(r["seed_std"] == 0 and r["n_seeds"] == 1 for r in table)


def test_identical_configs_agree_within_seed_spread(tmp_path):
    a = lq_config(name="a", iterations=3, n_samples=5, seeds=[0, 1, 2, 3])
    b = lq_config(name="b", iterations=3, n_samples=5, seeds=[10, 11, 12, 13])
    table = compare([a, b], tmp_path)
    last = {r["name"]: r for r in table if r["iteration"] == 2}
    spread = max(last["a"]["seed_std"], last["b"]["seed_std"])
    assert abs(last["a"]["mean_cost"] - last["b"]["mean_cost"]) <= 3 * spread


def test_different_budgets_share_iteration_axis(tmp_path):
    small = lq_config(name="small", iterations=2, n_samples=2)
    big = lq_config(name="big", iterations=2, n_samples=20)
    table = compare([small, big], tmp_path)
    eps = {(r["name"], r["iteration"]): r["episodes_cumulative"] for r in table}
    assert eps[("small", 1)] == 4 and eps[("big", 1)] == 40


def test_mismatched_horizons_rejected(tmp_path):
    other = dict(LQ_CONDITION, horizon=12)
    with pytest.raises(AlignmentError):
        compare([lq_config(name="a"), lq_config(name="b", conditions=[other])], tmp_path, run=False)


# CLI


def test_validate_command(capsys):
    assert main(["validate", "--config", str(CONFIGS / "pusher_pilqr.json")]) == 0
    assert capsys.readouterr().out.startswith("ok: pusher_pilqr")


def test_invalid_config_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n "env": "lq",\n "conditions": [{}],\n "algorithm": "sgd"\n}')
    assert main(["validate", "--config", str(bad)]) == 2
    assert f"{bad}:4: algorithm" in capsys.readouterr().err


def test_numerical_abort_exit_code(tmp_path, capsys):
    cfg = tmp_path / "boom.json"
    cfg.write_text(json.dumps({"env": "lq", "iterations": 2, "n_samples": 3, "conditions": [{"A": [[1e80]], "B": [[1.0]], "Q": [[1.0]], "R": [[1.0]], "x0": [1.0], "horizon": 8}]}))
    with np.errstate(all="ignore"), pytest.warns(RuntimeWarning):
        code = main(["run", "--config", str(cfg), "--out", str(tmp_path / "out")])
    assert code == 3
    assert "numerical abort" in capsys.readouterr().err
    # the initial checkpoint survives the abort
    assert json.loads((tmp_path / "out" / "checkpoint.json").read_text())["iteration"] == -1


def test_compare_alignment_exit_code(tmp_path):
    for name, h in (("a", 10), ("b", 12)):
        (tmp_path / f"{name}.json").write_text(json.dumps({"name": name, "env": "lq", "conditions": [dict(LQ_CONDITION, horizon=h)]}))
    assert main(["compare", "--out", str(tmp_path / "o"), str(tmp_path / "a.json"), str(tmp_path / "b.json")]) == 2


def test_run_needs_output_dir(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"env": "lq", "conditions": [LQ_CONDITION]}))
    assert main(["run", "--config", str(cfg)]) == 2
