"""Scenario configuration, presets and the closed-loop simulation driver."""

from __future__ import annotations

import copy
import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from . import confidence as conf
from .dynamics import DynamicsParams, RelativeState
from .estimator import EstimatorConfig, SlidingWindowEstimator, WindowConfig
from .geometry import FrameId, PoseTransform, compose, inverse, rot_z
from .runlog import LogError, MetricsReport, RunLog, compute_metrics, read_raw
from .sensors import MEASURED, FaultSchedule, SensorNoiseSpec, SensorSimulator, Synchronizer
from .trajectories import Circle, Offset, Shuttle, Stationary, TrackingDeviation, Truth, Waypoints
from .vision import (CameraModel, GimbalGeometry, GimbalState, MarkerArray, VisionError, camera_position_feedback,
                     estimate_marker_pose, forward_kinematics, inverse_kinematics, project_markers, track_step)

log = logging.getLogger(__name__)

MODES = ("adaptive", "fixed", "no-optical", "no-uwb")
_MODE_ALIASES = {"fixed-weights": "fixed"}


class ConfigError(ValueError):
    """Invalid scenario configuration."""


@dataclass
class CameraSpec:
    fx: float = 600.0
    fy: float = 600.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480
    marker_width: float = 0.20
    marker_height: float = 0.15
    mount_offset: tuple = (0.0, 0.0, 0.15)
    max_range: float = 6.0
    max_rate: float = 4.0

    def model(self) -> CameraModel:
        return CameraModel(self.fx, self.fy, self.cx, self.cy, self.width, self.height)


@dataclass
class ScenarioConfig:
    """Everything that determines a run, together with ``seed``.

    ``uav`` and ``ugv`` are trajectory specs keyed by ``type``; UAV
    positions are in the initial ground frame except for ``hover``, whose
    ``offset`` is relative to the ground vehicle.
    """

    name: str = "s1_clear"
    duration: float = 60.0
    seed: int = 0
    uav: dict = field(default_factory=lambda: {"type": "circle", "center": [2.0, 0.0, 0.5], "radius": 1.0, "speed": 0.6})
    ugv: dict = field(default_factory=lambda: {"type": "stationary"})
    tracking_error: float = 0.02
    noise: SensorNoiseSpec = field(default_factory=SensorNoiseSpec)
    faults: FaultSchedule = field(default_factory=FaultSchedule)
    window: WindowConfig = field(default_factory=WindowConfig)
    dynamics: DynamicsParams = field(default_factory=DynamicsParams)
    confidence: dict = field(default_factory=dict)
    camera: CameraSpec = field(default_factory=CameraSpec)
    mode: str = "adaptive"
    latency_compensation: bool = True

    def __post_init__(self):
        if not self.duration > 0:
            raise ConfigError("duration must be positive")
        self.mode = _MODE_ALIASES.get(self.mode, self.mode)
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if abs(self.window.dt - self.dynamics.dt) > 1e-12:
            raise ConfigError("window.dt and dynamics.dt differ")
        self.confidence_params()
        self.build_truth()

    # -- derived objects -----------------------------------------------------

    def confidence_params(self) -> conf.ConfidenceParams:
        c = dict(self.confidence)
        eps_f = c.pop("eps_f", None)
        sig = {"inertial": self.noise.imu, "uwb": self.noise.uwb, "alt": self.noise.alt,
               "opt": self.noise.opt, "cam": self.noise.cam}
        try:
            p = conf.ConfidenceParams.from_noise(sig, Tw=self.window.Tw, **c)
            if eps_f is not None:
                p = dataclasses.replace(p, eps_f={**p.eps_f, **eps_f})
        except (TypeError, ValueError) as e:
            raise ConfigError(f"confidence: {e}") from e
        return p

    def estimator_config(self) -> EstimatorConfig:
        disabled = {"no-optical": ("opt",), "no-uwb": ("uwb",)}.get(self.mode, ())
        return EstimatorConfig(
            window=self.window,
            dynamics=self.dynamics,
            confidence=self.confidence_params(),
            mode="fixed" if self.mode == "fixed" else "adaptive",
            disabled=disabled,
            latency_compensation=self.latency_compensation,
        )

    def build_plan(self):
        ugv = _trajectory(self.ugv, None, "ugv")
        uav = _trajectory(self.uav, ugv, "uav")
        return uav, ugv

    def build_truth(self) -> Truth:
        uav, ugv = self.build_plan()
        if self.tracking_error:
            uav = TrackingDeviation(uav, self.tracking_error)
        return Truth(uav, ugv)

    # -- (de)serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["faults"] = [dataclasses.asdict(f) for f in self.faults.faults]
        return _jsonable(d)

    @classmethod
    def from_dict(cls, d: dict) -> ScenarioConfig:
        d = copy.deepcopy(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "noise" in d:
                d["noise"] = SensorNoiseSpec(**d["noise"])
            if "faults" in d:
                f = d["faults"]
                d["faults"] = FaultSchedule(f["faults"] if isinstance(f, dict) else f)
            if "window" in d:
                d["window"] = WindowConfig(**d["window"])
            if "dynamics" in d:
                d["dynamics"] = DynamicsParams(**d["dynamics"])
            if "camera" in d:
                d["camera"] = CameraSpec(**d["camera"])
            return cls(**d)
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as e:
            raise ConfigError(str(e)) from e


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    return x


def _trajectory(spec: dict, ugv, who: str):
    spec = dict(spec)
    kind = spec.pop("type", None)
    try:
        if kind == "stationary":
            return Stationary(tuple(spec.get("point", (0.0, 0.0, 0.0))))
        if kind == "circle":
            if who == "ugv":
                r = float(spec.get("radius", 1.0))
                # starts at the origin heading along +x
                return Circle((0.0, r, 0.0), r, float(spec.get("speed", 0.2)), -np.pi / 2)
            return Circle(tuple(spec["center"]), float(spec["radius"]), float(spec["speed"]), float(spec.get("phase", 0.0)))
        if kind == "shuttle":
            return Shuttle(tuple(spec.get("start", (0.0, 0.0, 0.0))), tuple(spec.get("direction", (1.0, 0.0, 0.0))),
                           float(spec.get("amplitude", 1.0)), float(spec.get("period", 20.0)))
        if kind == "waypoints":
            return Waypoints(spec["times"], spec["points"])
        if kind == "hover" and who == "uav":
            return Offset(ugv, tuple(spec.get("offset", (2.0, 0.0, 0.5))))
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"{who} trajectory: {e}") from e
    raise ConfigError(f"{who} trajectory type {kind!r} is not supported")


# -- presets -----------------------------------------------------------------


def _faults(*items):
    return FaultSchedule([{"sensor": s, "start": a, "end": b, "mode": m, "factor": f} for s, a, b, m, f in items])


def preset(name: str) -> ScenarioConfig:
    """Named scenario. Harsh and loss presets are synthetic analogues built
    from the noise and dropout model."""
    if name == "s1_clear":
        return ScenarioConfig(name=name)
    if name == "s2_harsh":
        bursts = [("cam", t0, t0 + 1.5, "dropped", 1.0) for t0 in (8.0, 21.0, 37.0, 49.0)]
        bursts += [("opt", 12.0, 18.0, "inflated", 3.0), ("cam", 25.0, 35.0, "inflated", 2.5)]
        return ScenarioConfig(
            name=name,
            uav={"type": "circle", "center": [2.0, 0.0, 0.7], "radius": 1.0, "speed": 0.6},
            noise=SensorNoiseSpec(cam=0.04, pixel=1.0, uwb=0.08, opt=0.08),
            faults=_faults(*bursts),
        )
    if name == "l1_visual_loss":
        return ScenarioConfig(name=name, duration=70.0,
                              faults=_faults(("cam", 30.0, 40.0, "dropped", 1.0), ("cam", 50.0, 60.0, "dropped", 1.0)))
    if name == "l2_visual_loss":
        return ScenarioConfig(name=name, duration=45.0, faults=_faults(("cam", 15.0, 30.0, "dropped", 1.0)))
    if name == "m1_relative_hover":
        return ScenarioConfig(
            name=name, duration=40.0,
            ugv={"type": "shuttle", "direction": [1.0, 0.0, 0.0], "amplitude": 1.0, "period": 20.0},
            uav={"type": "hover", "offset": [2.0, 0.5, 0.6]},
        )
    if name == "m2_dual_trajectory":
        return ScenarioConfig(
            name=name, duration=40.0,
            ugv={"type": "circle", "radius": 1.0, "speed": 0.2},
            uav={"type": "circle", "center": [3.0, 0.0, 0.8], "radius": 1.2, "speed": 0.5},
        )
    if name == "outdoor_longrange":
        return ScenarioConfig(
            name=name, duration=80.0,
            uav={"type": "circle", "center": [6.5, 0.0, 2.0], "radius": 5.5, "speed": 1.0, "phase": np.pi},
        )
    raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")


PRESETS = ("s1_clear", "s2_harsh", "l1_visual_loss", "l2_visual_loss", "m1_relative_hover",
           "m2_dual_trajectory", "outdoor_longrange")


# -- active vision -----------------------------------------------------------


class ActiveVision:
    """Ground camera on a pan/tilt mechanism observing the marker array.

    Commanded angles are quantized to the encoder resolution, so the
    encoder readings used in the chain equal the executed angles.
    """

    def __init__(self, spec: CameraSpec, truth: Truth, initial_target, pixel_sigma: float = 0.0):
        self.spec = spec
        self.pixel_sigma = pixel_sigma
        self.truth = truth
        self.cam = spec.model()
        self.markers = MarkerArray.facing_x(spec.marker_width, spec.marker_height)
        self.geom = GimbalGeometry()
        self.T_GM = PoseTransform(np.eye(3), spec.mount_offset, FrameId.MECHANISM_BASE, FrameId.GROUND)
        target = np.asarray(initial_target, dtype=float) - np.asarray(spec.mount_offset)
        self.gimbal = inverse_kinematics(target, self.geom).quantized()
        self.in_fov: list[tuple[float, bool]] = []

    def T_GpG(self, t: float) -> PoseTransform:
        return PoseTransform(rot_z(self.truth.ugv_yaw(t)), np.zeros(3), FrameId.GROUND, FrameId.GROUND_REFERENCE)

    def measure(self, t: float, rng: np.random.Generator) -> tuple[np.ndarray, bool]:
        T_GpG = self.T_GpG(t)
        T_MC = forward_kinematics(self.gimbal, self.geom)
        T_GpC = compose(compose(T_GpG, self.T_GM), T_MC)
        rel = self.truth.uav_position(t) - self.truth.ugv_position(t)
        T_GpB = PoseTransform(rot_z(self.truth.uav_yaw(t)), rel, FrameId.BODY, FrameId.GROUND_REFERENCE)
        T_CB = compose(inverse(T_GpC), T_GpB)
        proj = project_markers(T_CB, self.markers, self.cam)
        self.in_fov.append((t, proj.ok))
        if not proj.ok or np.linalg.norm(T_CB.translation) > self.spec.max_range:
            return np.zeros(3), False
        pix = proj.pixels
        if rng is not None and self.pixel_sigma > 0:
            pix = pix + rng.normal(0.0, self.pixel_sigma, pix.shape)
        try:
            est = estimate_marker_pose(pix, self.markers, self.cam, upright=True)
        except VisionError as e:
            log.debug("marker pose failed at t=%.3f: %s", t, e)
            return np.zeros(3), False
        return camera_position_feedback(T_GpG, self.T_GM, T_MC, est.pose), True

    def track(self, t: float, x_hat, dt: float) -> None:
        base = compose(self.T_GpG(t), self.T_GM)
        cmd = track_step(RelativeState.from_vector(x_hat), self.gimbal, self.geom, self.spec.max_rate, dt, base_pose=base)
        self.gimbal = cmd.quantized()


# -- runs --------------------------------------------------------------------


class _Recorder:
    def __init__(self):
        self.rows = {k: [] for k in ("t", "est", "prior", "ref", "truth", "y", "mask", "weights", "gimbal",
                                     "cam_detected", "in_fov", "stale", "status", "solve_ms")}
        self.raw_ticks = []

    def add(self, t, out, bundle, ref, truth, mask, gimbal, in_fov, raw):
        r = self.rows
        r["t"].append(t)
        r["est"].append(out.x_k)
        r["prior"].append(out.priors[-1])
        r["ref"].append(ref)
        r["truth"].append(truth)
        r["y"].append(bundle.y())
        r["mask"].append(mask)
        r["weights"].append(np.concatenate([out.weights[s] for s in conf.SENSORS]))
        r["gimbal"].append(gimbal)
        r["cam_detected"].append(bundle.cam_valid)
        r["in_fov"].append(in_fov)
        r["stale"].append([bundle.stale[s] for s in MEASURED])
        r["status"].append(out.status)
        r["solve_ms"].append(out.solve_ms)
        self.raw_ticks.append(raw)

    def log(self, with_truth=True) -> RunLog:
        r = self.rows
        arr = {k: np.array(v) for k, v in r.items() if k != "status"}
        return RunLog(
            t=arr["t"], est=arr["est"].reshape(-1, 6), prior=arr["prior"].reshape(-1, 6),
            ref=arr["ref"].reshape(-1, 6), truth=arr["truth"].reshape(-1, 6) if with_truth else None,
            y=arr["y"].reshape(-1, 8), mask=arr["mask"].reshape(-1, 8).astype(bool),
            weights=arr["weights"].reshape(-1, sum(conf.DIMS.values())), gimbal=arr["gimbal"].reshape(-1, 2),
            cam_detected=arr["cam_detected"].astype(bool), in_fov=arr["in_fov"].astype(bool),
            stale=arr["stale"].reshape(-1, len(MEASURED)).astype(int), status=list(r["status"]),
            solve_ms=arr["solve_ms"], raw=[s for tick in self.raw_ticks for s in tick], raw_ticks=self.raw_ticks,
        )


def _tick_times(cfg: ScenarioConfig) -> np.ndarray:
    n = int(np.floor(cfg.duration / cfg.window.dt + 1e-9)) + 1
    return np.arange(n) * cfg.window.dt


def run_scenario(cfg: ScenarioConfig) -> RunLog:
    """Closed loop: truth, sensors, vision chain, estimator, gimbal command."""
    truth = cfg.build_truth()
    plan_uav, plan_ugv = cfg.build_plan()
    est = SlidingWindowEstimator(cfg.estimator_config())
    dt = cfg.window.dt

    def reference(t):
        return np.concatenate([plan_uav.position(t) - plan_ugv.position(t), plan_uav.velocity(t) - plan_ugv.velocity(t)])

    vision = ActiveVision(cfg.camera, truth, reference(0.0)[:3], cfg.noise.pixel)
    sim = SensorSimulator(truth, cfg.noise, cfg.faults, cfg.seed, mu=cfg.dynamics.mu, g=cfg.dynamics.g,
                          camera_fn=vision.measure)
    rec = _Recorder()
    for t in _tick_times(cfg):
        t = float(t)
        bundle, imu, raw = sim.simulate_tick(t)
        ref = reference(t)
        out = est.step(imu, bundle, ref)
        gimbal = (vision.gimbal.theta, vision.gimbal.phi)
        fov = all(ok for _, ok in vision.in_fov) if vision.in_fov else True
        vision.in_fov.clear()
        rec.add(t, out, bundle, ref, truth.relative_state(t), est.ticks[-1].mask, gimbal, fov, raw)
        vision.track(t, out.x_k, dt)
    return rec.log()


def replay(path, cfg: ScenarioConfig) -> RunLog:
    """Drive the estimator from an exported raw CSV, bypassing the simulator.

    Ticks are taken from the reference rows. Each tick sees exactly the
    samples written before its rows, so a simulator export replays to the
    same estimates. Missing samples engage the usual zero-order hold.
    """
    raw = read_raw(path)
    if raw.skipped:
        log.warning("replay skipped %d of %d rows", raw.skipped, raw.total)
    if not raw.ticks:
        raise LogError(f"{path}: no complete ticks")
    est = SlidingWindowEstimator(cfg.estimator_config())
    sync = Synchronizer()
    rec = _Recorder()
    has_truth = all("truth_pos" in d and "truth_vel" in d for _, d in raw.ticks)
    pushed = 0
    for t, rows in raw.ticks:
        upto = rows["_pos"]
        batch = raw.samples[pushed:upto]
        pushed = max(pushed, upto)
        sync.push(batch)
        bundle, imu = sync.tick(t)
        ref = np.concatenate([rows["ref_pos"], rows["ref_vel"]])
        out = est.step(imu, bundle, ref)
        truth = np.concatenate([rows["truth_pos"], rows["truth_vel"]]) if has_truth else np.full(6, np.nan)
        theta, phi, fov = rows.get("gimbal", (0.0, 0.0, 1.0))
        rec.add(t, out, bundle, ref, truth, est.ticks[-1].mask, (theta, phi), bool(fov), list(batch))
    return rec.log(with_truth=has_truth)


def ablate(cfg: ScenarioConfig, mode: str, warmup: float = 2.0) -> tuple[MetricsReport, MetricsReport]:
    """Matched-seed pair: the adaptive baseline and the ablated run."""
    base = dataclasses.replace(cfg, mode="adaptive")
    other = dataclasses.replace(cfg, mode=mode)
    return compute_metrics(run_scenario(base), warmup), compute_metrics(run_scenario(other), warmup)


def sweep(cfg: ScenarioConfig, Tws, kts, warmup: float = 2.0) -> list[tuple[int, int, MetricsReport]]:
    """Grid over window width and polynomial order; invalid pairs are skipped."""
    out = []
    for Tw in Tws:
        for kt in kts:
            if kt > Tw:
                continue
            window = WindowConfig(Tw=int(Tw), kt=int(kt), dt=cfg.window.dt)
            run = dataclasses.replace(cfg, window=window)
            out.append((int(Tw), int(kt), compute_metrics(run_scenario(run), warmup)))
    return out
