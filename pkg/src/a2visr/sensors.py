"""Observation models, multi-rate synchronization and synthetic sensors.

Measurement rows are always laid out as ``[UWB, OPT x/y/z, ALT, CAM x/y/z]``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .dynamics import GRAVITY, ImuSample
from .geometry import UnitQuaternion, rot_z, rotation_to_quat

log = logging.getLogger(__name__)

EPS_POS = 1e-3
TIME_EPS = 1e-9

MEASURED = ("uwb", "opt", "alt", "cam")
SENSOR_DIMS = {"uwb": 1, "opt": 3, "alt": 1, "cam": 3}
ROW_SLICES = {"uwb": slice(0, 1), "opt": slice(1, 4), "alt": slice(4, 5), "cam": slice(5, 8)}
RAW_SENSORS = ("imu", "uwb", "opt", "alt", "cam")
FAULT_MODES = ("frozen", "dropped", "inflated")


class DegenerateGeometry(ValueError):
    """Raised when the range direction cannot be formed."""


# -- observation models ------------------------------------------------------


def uwb_direction(r) -> np.ndarray:
    r = np.asarray(r, dtype=float).reshape(3)
    n = float(np.linalg.norm(r))
    if not n > EPS_POS:
        raise DegenerateGeometry(f"|r| = {n:.3g} m is below {EPS_POS} m")
    return r / n


@dataclass(frozen=True, eq=False)
class ObservationMatrix:
    C: np.ndarray
    rho: np.ndarray
    beta: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))


def assemble_observation(rho, ages=None) -> ObservationMatrix:
    """Build the 8x6 measurement matrix.

    ``ages`` optionally maps a sensor to the age (s) of its held sample.
    Position rows of a stale sample then predict ``p - age*v``, the first
    order position at sampling time. With no ages the matrix is the plain
    linear model.
    """
    rho = np.asarray(rho, dtype=float).reshape(3)
    if abs(np.linalg.norm(rho) - 1.0) > 1e-9:
        raise ValueError("rho must be a unit vector")
    beta = np.array([0.0, 0.0, 1.0])
    C = np.zeros((8, 6))
    C[0, :3] = rho
    C[1:4, 3:] = np.eye(3)
    C[4, :3] = beta
    C[5:8, :3] = np.eye(3)
    if ages:
        for name in ("uwb", "alt", "cam"):
            age = ages.get(name, 0.0)
            if age:
                rows = ROW_SLICES[name]
                C[rows, 3:] = -age * C[rows, :3]
    return ObservationMatrix(C, rho, beta)


def optical_observation(v_body, h_k, h_prev, dt, R, v_ugv) -> tuple[np.ndarray, bool]:
    """Relative velocity from optical flow plus differenced altimeter.

    Returns ``(y, ok)``; ``ok`` is False on the first tick, where no
    previous height exists and the vertical rate is taken as zero.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    v_body = np.asarray(v_body, dtype=float)
    ok = h_prev is not None
    vz = (h_k - h_prev) / dt if ok else 0.0
    v = np.array([v_body[0], v_body[1], vz])
    return np.asarray(R, dtype=float) @ v - np.asarray(v_ugv, dtype=float), ok


def altimeter_observation(h: float, h_g: float) -> float:
    return h - h_g


# -- bundles and synchronization ---------------------------------------------


@dataclass(frozen=True)
class RawSample:
    """One raw sensor sample, the unit of the replay CSV."""

    t: float
    sensor: str
    values: tuple
    valid: bool = True


@dataclass(frozen=True, eq=False)
class MeasurementBundle:
    """Per-tick snapshot of the held measurements.

    Invalid sensors carry their last held value with ``valid`` False;
    values are never NaN. ``age`` is the time since the held sample was
    taken and ``stale`` counts ticks without a fresh sample.
    """

    t: float
    uwb_range: float
    uwb_valid: bool
    opt_velocity: np.ndarray
    opt_valid: bool
    alt: float
    alt_valid: bool
    cam_position: np.ndarray
    cam_valid: bool
    age: dict = field(default_factory=dict)
    stale: dict = field(default_factory=dict)

    def y(self) -> np.ndarray:
        return np.concatenate([[self.uwb_range], self.opt_velocity, [self.alt], self.cam_position])

    def value(self, sensor: str) -> np.ndarray:
        return self.y()[ROW_SLICES[sensor]]

    def valid(self, sensor: str) -> bool:
        return getattr(self, f"{sensor}_valid")

    def valid_mask(self) -> np.ndarray:
        m = np.zeros(8, dtype=bool)
        for name in MEASURED:
            m[ROW_SLICES[name]] = self.valid(name)
        return m


class Synchronizer:
    """Zero-order hold of multi-rate raw samples onto the estimator grid."""

    def __init__(self):
        self._held: dict[str, RawSample] = {}
        self._stale = {name: 0 for name in MEASURED}
        self._imu_acc: dict[float, tuple] = {}
        self._imu_pending: list[ImuSample] = []

    def push(self, samples: Iterable[RawSample]) -> None:
        for s in samples:
            if s.sensor == "imu":
                if s.valid:
                    self._imu_acc[s.t] = s.values
            elif s.sensor == "imu_q":
                acc = self._imu_acc.pop(s.t, None)
                if acc is None:
                    continue
                self._imu_pending.append(ImuSample(s.t, acc, UnitQuaternion.from_vector_part(s.values)))
            elif s.sensor in MEASURED:
                held = self._held.get(s.sensor)
                if held is None or s.t >= held.t:
                    self._held[s.sensor] = s
                    self._stale[s.sensor] = -1

    def tick(self, t: float) -> tuple[MeasurementBundle, list[ImuSample]]:
        """Bundle at tick ``t`` plus the IMU samples in ``[t_prev, t)``."""
        batch = [s for s in self._imu_pending if s.t < t - TIME_EPS]
        self._imu_pending = [s for s in self._imu_pending if s.t >= t - TIME_EPS]
        fields = {}
        age, stale = {}, {}
        for name in MEASURED:
            self._stale[name] += 1
            stale[name] = self._stale[name]
            s = self._held.get(name)
            dim = SENSOR_DIMS[name]
            if s is None:
                fields[name] = (np.zeros(dim), False)
                age[name] = 0.0
            else:
                fields[name] = (np.asarray(s.values[:dim], dtype=float), bool(s.valid))
                age[name] = max(0.0, t - s.t)
        bundle = MeasurementBundle(
            t=t,
            uwb_range=float(fields["uwb"][0][0]),
            uwb_valid=fields["uwb"][1],
            opt_velocity=fields["opt"][0],
            opt_valid=fields["opt"][1],
            alt=float(fields["alt"][0][0]),
            alt_valid=fields["alt"][1],
            cam_position=fields["cam"][0],
            cam_valid=fields["cam"][1],
            age=age,
            stale=stale,
        )
        return bundle, batch


# -- synthetic sensors -------------------------------------------------------


@dataclass
class SensorNoiseSpec:
    """Gaussian noise and sampling rates of the synthetic sensors.

    Sigmas are in sensor units: m/s^2 for the accelerometer, m for range,
    altitude and camera position, m/s for optical flow, px for marker
    pixels. ``bias`` maps a sensor to a drift rate added per second.
    """

    imu: float = 0.05
    uwb: float = 0.05
    opt: float = 0.05
    alt: float = 0.01
    cam: float = 0.02
    pixel: float = 0.5
    rate_imu: float = 100.0
    rate_uwb: float = 50.0
    rate_opt: float = 25.0
    rate_alt: float = 25.0
    rate_cam: float = 30.0
    bias: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("imu", "uwb", "opt", "alt", "cam", "pixel"):
            if getattr(self, name) < 0:
                raise ValueError(f"noise sigma for {name} must be >= 0")
        for name in RAW_SENSORS:
            if self.rate(name) <= 0:
                raise ValueError(f"rate for {name} must be positive")
        for name in self.bias:
            if name not in RAW_SENSORS:
                raise ValueError(f"unknown sensor {name!r} in bias")

    def sigma(self, sensor: str) -> float:
        return getattr(self, sensor)

    def rate(self, sensor: str) -> float:
        return getattr(self, f"rate_{sensor}")

    @classmethod
    def noiseless(cls, **overrides) -> SensorNoiseSpec:
        return cls(imu=0.0, uwb=0.0, opt=0.0, alt=0.0, cam=0.0, pixel=0.0, **overrides)


@dataclass(frozen=True)
class Fault:
    sensor: str
    start: float
    end: float
    mode: str
    factor: float = 1.0

    def __post_init__(self):
        if self.sensor not in RAW_SENSORS:
            raise ValueError(f"unknown sensor {self.sensor!r}")
        if self.mode not in FAULT_MODES:
            raise ValueError(f"unknown fault mode {self.mode!r}")
        if self.end < self.start:
            raise ValueError("fault interval has negative length")
        if self.mode == "inflated" and self.factor < 0:
            raise ValueError("inflation factor must be >= 0")

    def active(self, t: float) -> bool:
        return self.start <= t < self.end


@dataclass
class FaultSchedule:
    faults: list = field(default_factory=list)

    def __post_init__(self):
        self.faults = [f if isinstance(f, Fault) else Fault(**f) for f in self.faults]

    def mode(self, sensor: str, t: float) -> tuple[str | None, float]:
        """Active mode for a sensor; dropped beats frozen beats inflated."""
        active = [f for f in self.faults if f.sensor == sensor and f.active(t)]
        for mode in ("dropped", "frozen"):
            if any(f.mode == mode for f in active):
                return mode, 1.0
        factor = 1.0
        for f in active:
            factor *= f.factor
        return ("inflated", factor) if active else (None, 1.0)


class SensorSimulator:
    """Sample the onboard sensors from scripted truth.

    ``truth`` provides ``uav_position/velocity/acceleration``, ``uav_yaw``
    and ``ugv_position/velocity`` as functions of time, all in the initial
    ground frame. The camera is sampled through ``camera_fn(t, rng)``,
    which returns ``(position, detected)`` from the active-vision chain.

    The accelerometer senses the thrust specific force: drag acts on the
    airframe but is not seen by the accelerometer, so the input rebuilt
    from it equals the true acceleration plus ``mu * v``.
    """

    def __init__(self, truth, noise: SensorNoiseSpec, faults: FaultSchedule, seed: int,
                 mu=(0.2, 0.2, 0.2), g: float = GRAVITY, h_g: float = 0.0,
                 camera_fn: Callable | None = None):
        self.truth = truth
        self.noise = noise
        self.faults = faults
        self.mu = np.asarray(mu, dtype=float)
        self.g = g
        self.h_g = h_g
        self.camera_fn = camera_fn
        children = np.random.SeedSequence(seed).spawn(len(RAW_SENSORS))
        self.rngs = {name: np.random.default_rng(c) for name, c in zip(RAW_SENSORS, children)}
        self._next = {name: 0 for name in RAW_SENSORS}
        self._last: dict[str, tuple] = {}
        self._heights: list[tuple[float, float]] = []
        self.sync = Synchronizer()
        self.camera_status: list[tuple[float, bool]] = []

    # per-sensor clean measurement functions
    def _imu(self, t):
        yaw = self.truth.uav_yaw(t)
        R = rot_z(yaw)
        u = self.truth.uav_acceleration(t) + self.mu * self.truth.uav_velocity(t)
        a = R.T @ (u + self.g * np.array([0.0, 0.0, 1.0])) / self.g
        return a, R

    def _uwb(self, t):
        p = self.truth.uav_position(t) - self.truth.ugv_position(t)
        return np.array([np.linalg.norm(p)])

    def _alt_height(self, t):
        return float(self.truth.uav_position(t)[2])

    def _sample(self, name: str, t: float) -> list[RawSample]:
        rng = self.rngs[name]
        mode, factor = self.faults.mode(name, t)
        sigma = self.noise.sigma(name) * factor
        drift = np.asarray(self.noise.bias.get(name, (0.0, 0.0, 0.0)), dtype=float) * t
        valid = True
        q = None
        if name == "imu":
            a, R = self._imu(t)
            val = a + (rng.normal(0.0, sigma, 3) if sigma > 0 else 0.0) / self.g + drift / self.g
            q = _rotation_to_vector_part(R)
        elif name == "uwb":
            val = self._uwb(t) + (rng.normal(0.0, sigma, 1) if sigma > 0 else 0.0) + drift[:1]
            val = np.maximum(val, 0.0)
        elif name == "alt":
            h = self._alt_height(t) + (rng.normal(0.0, sigma) if sigma > 0 else 0.0) + drift[0]
            val = np.array([altimeter_observation(h, self.h_g)])
        elif name == "opt":
            R = rot_z(self.truth.uav_yaw(t))
            v_body = R.T @ self.truth.uav_velocity(t)
            v_body = v_body + (rng.normal(0.0, sigma, 3) if sigma > 0 else 0.0) + drift
            v_ugv = self.truth.ugv_velocity(t)
            if len(self._heights) == 2:
                (t0, h0), (t1, h1) = self._heights
                val, _ = optical_observation(v_body, h1, h0, t1 - t0, R, v_ugv)
            else:
                val, _ = optical_observation(v_body, 0.0, None, 1.0, R, v_ugv)
        elif name == "cam":
            if self.camera_fn is None:
                val, valid = np.zeros(3), False
            else:
                val, valid = self.camera_fn(t, rng)
                val = np.asarray(val, dtype=float)
                if valid and sigma > 0:
                    val = val + rng.normal(0.0, sigma, 3)
                val = val + drift
            self.camera_status.append((t, bool(valid)))
        else:
            raise ValueError(name)

        vals = tuple(float(c) for c in np.atleast_1d(val))
        prev = self._last.get(name)
        if mode == "frozen" and prev is not None:
            vals, valid = prev
        elif mode == "dropped" or not valid:
            valid = False
            if prev is not None:
                vals = prev[0]
        self._last[name] = (vals, valid)
        if name == "alt":
            # the optical module differences the heights it actually reads
            self._heights.append((t, vals[0] + self.h_g))
            del self._heights[:-2]
        if name == "imu":
            return [RawSample(t, "imu", vals, valid), RawSample(t, "imu_q", q, valid)]
        return [RawSample(t, name, vals, valid)]

    def sample_until(self, t: float) -> list[RawSample]:
        """All raw samples with timestamps up to ``t`` not yet produced.

        The altimeter is sampled before the optical flow at equal times so
        the vertical rate uses the current height.
        """
        out = []
        for name in ("imu", "uwb", "alt", "opt", "cam"):
            rate = self.noise.rate(name)
            while True:
                ts = self._next[name] / rate
                if ts > t + TIME_EPS:
                    break
                self._next[name] += 1
                out.extend(self._sample(name, ts))
        out.sort(key=lambda s: s.t)
        return out

    def simulate_tick(self, t: float) -> tuple[MeasurementBundle, list[ImuSample], list[RawSample]]:
        raw = self.sample_until(t)
        self.sync.push(raw)
        bundle, imu = self.sync.tick(t)
        return bundle, imu, raw


def _rotation_to_vector_part(R) -> tuple:
    q = rotation_to_quat(R)
    return (q.x, q.y, q.z)
