"""Scripted UAV and UGV motion in the initial ground frame.

Every trajectory returns position, velocity and acceleration analytically
so the synthetic sensors are exact up to their injected noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline


class Trajectory:
    def position(self, t: float) -> np.ndarray:
        raise NotImplementedError

    def velocity(self, t: float) -> np.ndarray:
        raise NotImplementedError

    def acceleration(self, t: float) -> np.ndarray:
        raise NotImplementedError

    def heading(self, t: float) -> float:
        """Yaw following the horizontal velocity, 0 when at rest."""
        v = self.velocity(t)
        return float(np.arctan2(v[1], v[0])) if np.hypot(v[0], v[1]) > 1e-9 else 0.0


@dataclass(frozen=True)
class Stationary(Trajectory):
    point: tuple = (0.0, 0.0, 0.0)

    def position(self, t):
        return np.array(self.point, dtype=float)

    def velocity(self, t):
        return np.zeros(3)

    def acceleration(self, t):
        return np.zeros(3)

    def heading(self, t):
        return 0.0


@dataclass(frozen=True)
class Circle(Trajectory):
    """Horizontal circle at constant speed, counter-clockwise from angle ``phase``."""

    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 1.0
    speed: float = 0.6
    phase: float = 0.0

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("circle radius must be positive")

    @property
    def omega(self) -> float:
        return self.speed / self.radius

    def _angle(self, t):
        return self.phase + self.omega * t

    def position(self, t):
        a = self._angle(t)
        return np.asarray(self.center, dtype=float) + self.radius * np.array([np.cos(a), np.sin(a), 0.0])

    def velocity(self, t):
        a = self._angle(t)
        return self.speed * np.array([-np.sin(a), np.cos(a), 0.0])

    def acceleration(self, t):
        a = self._angle(t)
        return -self.speed * self.omega * np.array([np.cos(a), np.sin(a), 0.0])


@dataclass(frozen=True)
class Shuttle(Trajectory):
    """Sinusoidal back-and-forth motion along ``direction``; keeps its heading."""

    start: tuple = (0.0, 0.0, 0.0)
    direction: tuple = (1.0, 0.0, 0.0)
    amplitude: float = 1.0
    period: float = 20.0

    def __post_init__(self):
        if self.period <= 0:
            raise ValueError("shuttle period must be positive")

    def _d(self):
        d = np.asarray(self.direction, dtype=float)
        return d / np.linalg.norm(d)

    def position(self, t):
        w = 2 * np.pi / self.period
        return np.asarray(self.start, dtype=float) + self.amplitude * np.sin(w * t) * self._d()

    def velocity(self, t):
        w = 2 * np.pi / self.period
        return self.amplitude * w * np.cos(w * t) * self._d()

    def acceleration(self, t):
        w = 2 * np.pi / self.period
        return -self.amplitude * w * w * np.sin(w * t) * self._d()

    def heading(self, t):
        d = self._d()
        return float(np.arctan2(d[1], d[0]))


class Waypoints(Trajectory):
    """C2 cubic spline through timed waypoints, at rest at both ends and
    holding the last point afterwards."""

    def __init__(self, times, points):
        times = np.asarray(times, dtype=float)
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        if len(times) != len(points) or len(times) < 2:
            raise ValueError("waypoints need at least two timed points")
        if np.any(np.diff(times) <= 0):
            raise ValueError("waypoint times must be strictly increasing")
        self.times = times
        self.points = points
        self._s = CubicSpline(times, points, bc_type="clamped")

    def _clip(self, t):
        return float(np.clip(t, self.times[0], self.times[-1]))

    def position(self, t):
        return self._s(self._clip(t))

    def velocity(self, t):
        if t > self.times[-1] or t < self.times[0]:
            return np.zeros(3)
        return self._s(t, 1)

    def acceleration(self, t):
        if t > self.times[-1] or t < self.times[0]:
            return np.zeros(3)
        return self._s(t, 2)


@dataclass(frozen=True)
class Offset(Trajectory):
    """A fixed offset from another trajectory (relative hover)."""

    base: Trajectory
    offset: tuple = (2.0, 0.0, 0.5)

    def position(self, t):
        return self.base.position(t) + np.asarray(self.offset, dtype=float)

    def velocity(self, t):
        return self.base.velocity(t)

    def acceleration(self, t):
        return self.base.acceleration(t)


@dataclass(frozen=True)
class TrackingDeviation(Trajectory):
    """Planner path plus a small smooth tracking error.

    The flown path is not the planned one; this keeps the planner
    reference an imperfect prediction, as on a real vehicle.
    """

    plan: Trajectory
    amplitude: float = 0.02
    freqs: tuple = (0.37, 0.53, 0.29)
    phases: tuple = (0.0, 1.1, 2.3)

    def _parts(self, t):
        a = self.amplitude * np.array([1.0, 1.0, 0.5])
        w = 2 * np.pi * np.asarray(self.freqs)
        arg = w * t + np.asarray(self.phases)
        return a, w, arg

    def position(self, t):
        a, w, arg = self._parts(t)
        return self.plan.position(t) + a * np.sin(arg)

    def velocity(self, t):
        a, w, arg = self._parts(t)
        return self.plan.velocity(t) + a * w * np.cos(arg)

    def acceleration(self, t):
        a, w, arg = self._parts(t)
        return self.plan.acceleration(t) - a * w * w * np.sin(arg)


class Truth:
    """Flown UAV and UGV motion, in the interface the sensor simulator expects.

    The UAV yaws to keep its marker face (body +x) toward the ground
    vehicle.
    """

    def __init__(self, uav: Trajectory, ugv: Trajectory):
        self.uav = uav
        self.ugv = ugv

    def uav_position(self, t):
        return self.uav.position(t)

    def uav_velocity(self, t):
        return self.uav.velocity(t)

    def uav_acceleration(self, t):
        return self.uav.acceleration(t)

    def uav_yaw(self, t) -> float:
        d = self.ugv.position(t) - self.uav.position(t)
        return float(np.arctan2(d[1], d[0]))

    def ugv_position(self, t):
        return self.ugv.position(t)

    def ugv_velocity(self, t):
        return self.ugv.velocity(t)

    def ugv_yaw(self, t) -> float:
        return self.ugv.heading(t)

    def relative_state(self, t) -> np.ndarray:
        return np.concatenate([self.uav.position(t) - self.ugv.position(t),
                               self.uav.velocity(t) - self.ugv.velocity(t)])
