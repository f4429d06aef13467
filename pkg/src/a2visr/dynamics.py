"""Relative UAV/UGV dynamics and their discretization."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import UnitQuaternion, quat_to_rotation

GRAVITY = 9.81
E_Z = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True, eq=False)
class RelativeState:
    """Position and velocity of the body relative to the ground reference frame."""

    p: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        for name in ("p", "v"):
            a = np.asarray(getattr(self, name), dtype=float).reshape(3).copy()
            if not np.all(np.isfinite(a)):
                raise ValueError(f"relative state {name} must be finite")
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @classmethod
    def from_vector(cls, x) -> RelativeState:
        x = np.asarray(x, dtype=float).reshape(6)
        return cls(x[:3], x[3:])

    @classmethod
    def zero(cls) -> RelativeState:
        return cls(np.zeros(3), np.zeros(3))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.p, self.v])


@dataclass(frozen=True)
class ImuSample:
    """One accelerometer sample (g units, body frame) with its attitude."""

    t: float
    a: tuple
    q: UnitQuaternion


@dataclass(frozen=True)
class DynamicsParams:
    mu: tuple = (0.2, 0.2, 0.2)
    dt: float = 0.04
    g: float = GRAVITY

    def __post_init__(self):
        object.__setattr__(self, "mu", tuple(float(m) for m in np.asarray(self.mu).reshape(3)))
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.g <= 0:
            raise ValueError("gravity must be positive")
        if min(self.mu) < 0:
            raise ValueError("drag coefficients must be non-negative")

    @property
    def drag(self) -> np.ndarray:
        return np.diag(self.mu)


@dataclass(frozen=True, eq=False)
class StateTransition:
    A: np.ndarray
    B: np.ndarray = field(repr=False)


def compute_input(s: ImuSample, params: DynamicsParams) -> np.ndarray:
    """Acceleration input in the initial ground frame, gravity removed."""
    R = quat_to_rotation(s.q)
    return params.g * (R @ np.asarray(s.a, dtype=float)) - params.g * E_Z


def average_input(samples: Sequence[ImuSample], params: DynamicsParams) -> np.ndarray:
    """Mean acceleration input over one estimator tick.

    Averaging keeps the integral of the acceleration over the tick.
    An empty batch yields zero input.
    """
    if not samples:
        return np.zeros(3)
    return np.mean([compute_input(s, params) for s in samples], axis=0)


def discretize(params: DynamicsParams) -> StateTransition:
    dt = params.dt
    mu = params.drag
    if dt * max(params.mu) >= 1.0:
        raise ValueError(
            f"dt*mu = {dt * max(params.mu):.3g} >= 1: velocity block is not contractive"
        )
    I3 = np.eye(3)
    A = np.block([[I3, dt * I3], [np.zeros((3, 3)), I3 - dt * mu]])
    B = np.kron(np.array([[0.5 * dt * dt], [dt]]), I3)
    return StateTransition(A, B)


def propagate(x: RelativeState, u, st: StateTransition) -> RelativeState:
    return RelativeState.from_vector(st.A @ x.as_vector() + st.B @ np.asarray(u, dtype=float))


def relative_velocity_reference(v_body, R, v_ugv) -> np.ndarray:
    """Rate of change of the relative position: body velocity rotated out of
    the body frame minus the ground vehicle velocity."""
    return np.asarray(R, dtype=float) @ np.asarray(v_body, dtype=float) - np.asarray(v_ugv, dtype=float)
