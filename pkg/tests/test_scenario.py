import csv
import json
import math

import numpy as np
import pytest

from a2visr.cli import main
from a2visr.runlog import LogError, RunLog, compute_metrics, read_raw, write_raw
from a2visr.scenario import PRESETS, ConfigError, ScenarioConfig, ablate, preset, replay, run_scenario, sweep


def short(name="s1_clear", seconds=3.0, **kw):
    return ScenarioConfig.from_dict({**preset(name).to_dict(), "duration": seconds, **kw})


@pytest.fixture(scope="module")
def short_run():
    cfg = short(seconds=4.0)
    return cfg, run_scenario(cfg)


@pytest.fixture(scope="module")
def exported(short_run, tmp_path_factory):
    cfg, log = short_run
    path = tmp_path_factory.mktemp("run") / "raw.csv"
    write_raw(log, path)
    return cfg, log, path


def synthetic_log(errors, detected=None):
    n = len(errors)
    truth = np.zeros((n, 6))
    est = truth.copy()
    est[:, :3] = errors
    z = np.zeros((n, 6))
    return RunLog(
        t=0.04 * np.arange(n), est=est, prior=z, ref=z, truth=truth, y=np.zeros((n, 8)),
        mask=np.ones((n, 8), dtype=bool), weights=np.ones((n, 14)), gimbal=np.zeros((n, 2)),
        cam_detected=np.ones(n, dtype=bool) if detected is None else np.asarray(detected),
        in_fov=np.ones(n, dtype=bool), stale=np.zeros((n, 4), dtype=int), status=["ok"] * n,
        solve_ms=np.full(n, 1.5),
    )


# -- configuration ------------------------------------------------------------


@pytest.mark.parametrize("name", PRESETS)
def test_presets_round_trip_through_json(name):
    cfg = preset(name)
    again = ScenarioConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again.to_dict() == cfg.to_dict()


def test_default_scenario_matches_desk_protocol():
    cfg = preset("s1_clear")
    assert cfg.uav["radius"] == 1.0 and cfg.uav["speed"] == 0.6 and cfg.uav["center"][2] == 0.5
    assert cfg.window.Tw == 8 and cfg.window.kt == 3


def test_outdoor_preset_reaches_twelve_metres():
    truth = preset("outdoor_longrange").build_truth()
    ranges = [np.linalg.norm(truth.relative_state(t)[:3]) for t in np.linspace(0, 40, 400)]
    assert 11.5 < max(ranges) < 12.5


@pytest.mark.parametrize("bad", [
    {"colour": "red"},
    {"duration": 0},
    {"mode": "sometimes"},
    {"uav": {"type": "spiral"}},
    {"uav": {"type": "circle", "center": [0, 0, 1], "radius": -1, "speed": 1}},
    {"noise": {"uwb": -0.1}},
    {"window": {"Tw": 4, "kt": 6}},
    {"window": {"dt": 0.05}},
    {"confidence": {"m": -1}},
    {"faults": [{"sensor": "lidar", "start": 0, "end": 1, "mode": "dropped"}]},
])
def test_config_errors(bad):
    with pytest.raises(ConfigError):
        ScenarioConfig.from_dict({**preset("s1_clear").to_dict(), **bad})


def test_mode_alias():
    assert ScenarioConfig(mode="fixed-weights").mode == "fixed"
    assert ScenarioConfig(mode="no-uwb").estimator_config().disabled == ("uwb",)


def test_unknown_preset():
    with pytest.raises(ConfigError):
        preset("s9")


# -- metrics ------------------------------------------------------------------


def test_constant_offset_metrics():
    m = compute_metrics(synthetic_log(np.tile([0.1, 0, 0], (10, 1))))
    assert m.rmse[0] == pytest.approx(0.1, abs=1e-15) and m.mae[0] == pytest.approx(0.1, abs=1e-15)
    assert m.ate == pytest.approx(0.1, abs=1e-15) and m.rmse[1] == 0.0


def test_zero_error_metrics():
    m = compute_metrics(synthetic_log(np.zeros((5, 3))))
    assert m.rmse == (0.0, 0.0, 0.0) and m.mae == (0.0, 0.0, 0.0) and m.max_error == 0.0 and m.ate == 0.0


def test_metrics_match_hand_computation(rng):
    e = rng.normal(0, 0.1, (40, 3))
    detected = rng.random(40) > 0.3
    m = compute_metrics(synthetic_log(e, detected), warmup=0.4)
    rows = [list(map(float, r)) for r in e[10:]]
    n = len(rows)
    for ax in range(3):
        assert m.rmse[ax] == pytest.approx(math.sqrt(sum(r[ax] ** 2 for r in rows) / n), rel=1e-12)
        assert m.mae[ax] == pytest.approx(sum(abs(r[ax]) for r in rows) / n, rel=1e-12)
    norms = [math.sqrt(sum(v * v for v in r)) for r in rows]
    assert m.max_error == pytest.approx(max(norms), rel=1e-12)
    assert m.ate == pytest.approx(math.sqrt(sum(v * v for v in norms) / n), rel=1e-12)
    assert m.visual_loss_ratio == pytest.approx(sum(not d for d in detected[10:]) / n)
    assert m.ticks == 30


def test_metrics_without_truth():
    log = synthetic_log(np.zeros((5, 3)))
    log.truth = None
    assert compute_metrics(log).rmse is None
    with pytest.raises(LogError):
        compute_metrics(log, require_truth=True)
    with pytest.raises(LogError):
        compute_metrics(synthetic_log(np.zeros((5, 3))), warmup=10.0)


def test_log_rejects_non_monotone_time():
    log = synthetic_log(np.zeros((3, 3)))
    with pytest.raises(LogError):
        RunLog(**{**log.__dict__, "t": np.array([0.0, 0.08, 0.04])})


# -- runs ---------------------------------------------------------------------


def test_run_is_deterministic(short_run):
    cfg, log = short_run
    again = run_scenario(cfg)
    assert log.same_estimates(again)
    assert np.array_equal(log.truth, again.truth) and np.array_equal(log.gimbal, again.gimbal)


def test_different_seed_differs(short_run):
    cfg, log = short_run
    assert not log.same_estimates(run_scenario(short(seconds=4.0, seed=1)))


def test_run_log_shape(short_run):
    _, log = short_run
    assert len(log) == 101 and log.t[-1] == pytest.approx(4.0)
    assert np.allclose(log.weights[:, :].sum(axis=1)[20:], 10.0, rtol=1e-9)
    assert set(log.status) <= {"ok", "regularized", "degraded", "solver_failure"}


def test_tick_csv_round_trip(short_run, tmp_path):
    _, log = short_run
    log.write_csv(tmp_path / "ticks.csv")
    back = RunLog.read_csv(tmp_path / "ticks.csv")
    assert back.same_estimates(log) and np.array_equal(back.truth, log.truth)
    assert compute_metrics(back, 1.0) == compute_metrics(log, 1.0)


def test_replay_reproduces_estimates(exported):
    cfg, log, path = exported
    again = replay(path, cfg)
    assert again.same_estimates(log)
    assert np.array_equal(again.in_fov, log.in_fov) and np.array_equal(again.gimbal, log.gimbal)


def _rewrite(src, dst, keep):
    with open(src, newline="") as fh:
        rows = list(csv.reader(fh))
    with open(dst, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(rows[0])
        for r in rows[1:]:
            out = keep(r)
            if out is not None:
                w.writerow(out)


def test_replay_with_gap_holds_measurements(exported, tmp_path):
    cfg, log, path = exported
    gap = tmp_path / "gap.csv"
    _rewrite(path, gap, lambda r: None if r[1] == "uwb" and 1.0 <= float(r[0]) < 2.0 else r)
    out = replay(gap, cfg)
    uwb_stale = out.stale[:, 0]
    inside = (out.t > 1.1) & (out.t < 2.0)
    assert np.all(uwb_stale[inside] > 0) and uwb_stale[inside].max() >= 20
    assert np.all(np.isfinite(out.est)) and len(out) == len(log)
    assert compute_metrics(out, 1.0).ate < 0.2


def test_truncated_replay_gives_partial_report(exported, tmp_path):
    cfg, log, path = exported
    text = path.read_text()
    cut = tmp_path / "cut.csv"
    cut.write_text(text[: len(text) // 2])
    out = replay(cut, cfg)
    assert 0 < len(out) < len(log)
    assert out.same_estimates(replay(cut, cfg))
    assert np.array_equal(out.est, log.est[: len(out)])


def test_malformed_rows_are_skipped_up_to_limit(exported, tmp_path):
    cfg, log, path = exported
    rows = path.read_text().splitlines()
    few = tmp_path / "few.csv"
    few.write_text("\n".join(rows[:50] + ["0.5,uwb,abc,,,1", "garbage"] + rows[50:]) + "\n")
    assert read_raw(few).skipped == 2
    assert len(replay(few, cfg)) == len(log)
    many = tmp_path / "many.csv"
    bad = ["nan,uwb,1.0,,,1"] * (len(rows) // 10)
    many.write_text("\n".join(rows + bad) + "\n")
    with pytest.raises(LogError):
        read_raw(many)


def test_replay_without_truth(exported, tmp_path):
    cfg, log, path = exported
    bare = tmp_path / "bare.csv"
    _rewrite(path, bare, lambda r: None if r[1].startswith("truth") else r)
    out = replay(bare, cfg)
    assert out.truth is None and out.same_estimates(log)
    assert compute_metrics(out).rmse is None


def test_replay_rejects_bad_header(tmp_path, short_run):
    p = tmp_path / "bad.csv"
    p.write_text("time,name\n1,2\n")
    with pytest.raises(LogError):
        replay(p, short_run[0])


def test_ablation_and_sweep_run():
    cfg = short(seconds=2.0)
    a, b = ablate(cfg, "no-uwb", warmup=1.0)
    assert a.ticks == b.ticks and a.ate != b.ate
    rows = sweep(cfg, [2, 4], [1, 3], warmup=1.0)
    assert [(Tw, kt) for Tw, kt, _ in rows] == [(2, 1), (4, 1), (4, 3)]


def test_uwb_loss_is_modest_when_vision_is_clear():
    base, other = ablate(short(seconds=20.0), "no-uwb")
    assert other.ate < 1.5 * base.ate


def test_optical_loss_hurts_more_than_uwb_loss_under_visual_loss():
    cfg = preset("l2_visual_loss")
    _, no_opt = ablate(cfg, "no-optical")
    _, no_uwb = ablate(cfg, "no-uwb")
    assert no_opt.ate > no_uwb.ate


# -- command line -------------------------------------------------------------


def test_cli_simulate_replay_metrics(tmp_path, capsys):
    out = tmp_path / "sim"
    assert main(["simulate", "--preset", "s1_clear", "--duration", "2", "--out", str(out)]) == 0
    for f in ("config.json", "raw.csv", "ticks.csv", "metrics.json"):
        assert (out / f).exists()
    assert main(["replay", str(out / "raw.csv"), "--out", str(tmp_path / "rep")]) == 0
    a = RunLog.read_csv(out / "ticks.csv")
    b = RunLog.read_csv(tmp_path / "rep" / "ticks.csv")
    assert a.same_estimates(b)
    capsys.readouterr()
    assert main(["metrics", str(out / "ticks.csv")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report == json.loads((out / "metrics.json").read_text())


def test_cli_ablate_and_sweep(tmp_path):
    assert main(["ablate", "--preset", "s1_clear", "--duration", "1", "--warmup", "0.5", "--out", str(tmp_path)]) == 0
    assert set(json.loads((tmp_path / "ablation.json").read_text())) == {"adaptive", "fixed"}
    assert main(["sweep", "--duration", "1", "--warmup", "0.5", "--tw", "3", "--kt", "1", "2",
                 "--out", str(tmp_path)]) == 0
    assert len(json.loads((tmp_path / "sweep.json").read_text())) == 2


def test_cli_config_file_and_seed(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"duration": 3.0, "seed": 4}))
    assert main(["simulate", "--config", str(cfg), "--seed", "9", "--out", str(tmp_path / "o")]) == 0
    assert json.loads((tmp_path / "o" / "config.json").read_text())["seed"] == 9


def test_cli_config_errors_exit_2(tmp_path, monkeypatch):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["simulate", "--config", str(bad)]) == 2
    bad.write_text(json.dumps({"speed_of_light": 1}))
    assert main(["simulate", "--config", str(bad)]) == 2
    assert main(["simulate", "--config", str(tmp_path / "missing.json")]) == 2
    monkeypatch.setenv("A2VISR_LOG_LEVEL", "loud")
    assert main(["simulate", "--duration", "1"]) == 2


def test_cli_run_failures_exit_3(tmp_path):
    assert main(["replay", str(tmp_path / "nothing.csv"), "--preset", "s1_clear"]) == 3
    empty = tmp_path / "ticks.csv"
    empty.write_text("t\n")
    assert main(["metrics", str(empty)]) == 3
