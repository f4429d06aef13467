"""Adaptive sliding confidence: failure, quality, moving variance, weights.

Diagonal matrices are carried as 1-D arrays of their diagonal entries.
Sensors are evaluated in the fixed order of ``SENSORS``; the inertial
channel is 6-dimensional because it weights the state-transfer rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

SENSORS = ("inertial", "uwb", "alt", "opt", "cam")
DIMS = {"inertial": 6, "uwb": 1, "alt": 1, "opt": 3, "cam": 3}
PRIOR_WEIGHT = 0.1


@dataclass
class ConfidenceParams:
    """Preset constants of the confidence evaluation.

    ``eps_f`` maps a sensor to its failure threshold; sensors missing from
    it use ``default_eps_f``. ``per_axis_failure`` replaces the min-over-axes
    failure rule by an axis-wise one.
    """

    eps: float = 1e-6
    m: float = 10.0
    omega0: float = 0.5
    Xi: float = 10.0
    Tw: int = 8
    eps_f: dict = field(default_factory=dict)
    default_eps_f: float = 0.0
    per_axis_failure: bool = False

    def __post_init__(self):
        if not 0 < self.eps <= 1e-3:
            raise ValueError("eps must lie in (0, 1e-3]")
        if self.m <= 0:
            raise ValueError("sigmoid slope m must be positive")
        if self.Xi <= 0:
            raise ValueError("weight budget Xi must be positive")
        if self.Tw < 1:
            raise ValueError("Tw must be >= 1")
        for k in self.eps_f:
            if k not in SENSORS:
                raise ValueError(f"unknown sensor {k!r} in eps_f")

    def threshold(self, sensor: str) -> float:
        return self.eps_f.get(sensor, self.default_eps_f)

    @classmethod
    def from_noise(cls, sigmas: dict, Tw: int = 8, **kw) -> ConfidenceParams:
        """Failure thresholds of ``0.01 * (Tw + 1) * sigma`` per sensor."""
        eps_f = {k: 0.01 * (Tw + 1) * float(v) for k, v in sigmas.items()}
        return cls(Tw=Tw, eps_f=eps_f, **kw)


def failure_status(history, eps_f: float, eps: float = 1e-6, per_axis: bool = False) -> np.ndarray:
    """Long-term failure flag from accumulated absolute first differences.

    ``history`` holds consecutive measurements, one row per tick. When the
    smallest per-axis total variation is at or below ``eps_f`` the whole
    sensor is scaled by ``eps``; otherwise it is left at one.
    """
    h = np.atleast_2d(np.asarray(history, dtype=float))
    if h.shape[0] == 1 and h.shape[1] > 1 and np.ndim(history) == 1:
        h = h.T
    s = h.shape[1]
    omega = np.abs(np.diff(h, axis=0)).sum(axis=0) if len(h) > 1 else np.zeros(s)
    if per_axis:
        return np.where(omega > eps_f, 1.0, eps)
    return np.full(s, 1.0 if omega.min() > eps_f else eps)


def quality_status(y_k, y_prev, m: float = 10.0, omega0: float = 0.5) -> np.ndarray:
    """One minus a sigmoid of the per-axis jump between consecutive samples."""
    jump = np.abs(np.asarray(y_k, dtype=float) - np.asarray(y_prev, dtype=float))
    return 1.0 - expit(m * (np.atleast_1d(jump) - omega0))


def moving_variance(residuals) -> np.ndarray:
    """Sum of residual outer products over the window (rows are ticks)."""
    r = np.atleast_2d(np.asarray(residuals, dtype=float))
    return r.T @ r


def inertial_residuals(reference, priors) -> np.ndarray:
    return np.asarray(reference, dtype=float) - np.asarray(priors, dtype=float)


def measurement_residuals(C_rows, reference, y) -> np.ndarray:
    """``C_k @ xbar_k - y_k`` for every tick; ``C_rows`` is ``(n, s, 6)``."""
    return np.einsum("nij,nj->ni", np.asarray(C_rows, dtype=float), np.asarray(reference, dtype=float)) - np.asarray(y, dtype=float)


def normalized_gamma(P_all) -> list[np.ndarray]:
    """Per-axis reliability ``1 - P_dd / sum_j tr(P_j)``, clamped to [0, 1]."""
    P_all = [np.atleast_2d(np.asarray(P, dtype=float)) for P in P_all]
    total = sum(float(np.trace(P)) for P in P_all)
    if not total > 0:
        return [np.ones(P.shape[0]) for P in P_all]
    return [np.clip(1.0 - np.diag(P) / total, 0.0, 1.0) for P in P_all]


@dataclass
class WeightSet:
    """Diagonal weights for one tick.

    ``sensors`` maps each entry of ``SENSORS`` to its diagonal; ``prior``
    weights the prior term and is not normalized.
    """

    prior: np.ndarray
    sensors: dict
    degraded: bool = False

    def __getitem__(self, sensor: str) -> np.ndarray:
        return self.sensors[sensor]

    def total(self) -> float:
        return float(sum(np.sum(w) for w in self.sensors.values()))

    def measurement_diag(self) -> np.ndarray:
        """Weights for the 8 measurement rows ``[UWB, OPT, ALT, CAM]``."""
        s = self.sensors
        return np.concatenate([s["uwb"], s["opt"], s["alt"], s["cam"]])

    @classmethod
    def uniform(cls, value: float = 1.0, prior: float = PRIOR_WEIGHT) -> WeightSet:
        return cls(np.full(6, prior), {k: np.full(DIMS[k], value) for k in SENSORS})


def assemble_weights(S_f: dict, S_q: dict, gamma: dict, Xi: float, eps: float = 1e-6,
                     prior: float = PRIOR_WEIGHT) -> WeightSet:
    """Hadamard product of the three factors, normalized to a total of ``Xi``.

    If every sensor has failed (all failure flags at ``eps``, or a
    denominator at or below ``eps**2``) the sensor weights are zeroed,
    leaving the prior alone, and the set is flagged as degraded.
    """
    prod = {}
    for k in SENSORS:
        a, b, c = (np.asarray(d[k], dtype=float) for d in (S_f, S_q, gamma))
        if not a.shape == b.shape == c.shape == (DIMS[k],):
            raise ValueError(f"factor shapes for {k} disagree")
        prod[k] = a * b * c
    denom = sum(float(v.sum()) for v in prod.values())
    all_failed = all(np.all(np.asarray(S_f[k]) <= eps) for k in SENSORS)
    if denom <= eps * eps or all_failed:
        return WeightSet(np.full(6, prior), {k: np.zeros(DIMS[k]) for k in SENSORS}, degraded=True)
    return WeightSet(np.full(6, prior), {k: Xi * v / denom for k, v in prod.items()})


def _tile_inertial(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return np.concatenate([v, v]) if v.shape == (3,) else v


@dataclass
class Assessment:
    """Factors behind one tick's weights, kept for logging."""

    weights: WeightSet
    S_f: dict
    S_q: dict
    gamma: dict
    P: dict


def evaluate(histories: dict, residuals: dict, params: ConfidenceParams, mode: str = "adaptive") -> Assessment:
    """Weights for the newest tick from the window history.

    ``histories[k]`` holds the raw stream of sensor ``k`` (the inertial
    stream is the acceleration input, 3 columns) with the newest row last,
    ``Tw + 2`` rows so that ``Tw + 1`` differences are summed; shorter
    histories are not judged for failure.
    ``residuals[k]`` holds the moving-variance residuals over the window,
    or None to mark the reference as missing (variance then uninformative).

    ``mode="fixed"`` keeps only failure detection on top of identity
    weights.
    """
    S_f, S_q, P = {}, {}, {}
    for k in SENSORS:
        h = np.asarray(histories[k], dtype=float)
        if h.ndim == 1:
            h = h[:, None]
        if len(h) >= params.Tw + 2:
            sf = failure_status(h, params.threshold(k), params.eps, params.per_axis_failure)
        else:
            # too little history to call a sensor failed
            sf = np.ones(h.shape[1])
        sq = quality_status(h[-1], h[-2], params.m, params.omega0) if len(h) > 1 else np.ones(h.shape[1])
        if k == "inertial":
            sf = np.full(6, sf.min()) if not params.per_axis_failure else _tile_inertial(sf)
            sq = _tile_inertial(sq)
        S_f[k], S_q[k] = sf, sq
        r = residuals.get(k)
        P[k] = moving_variance(r) if r is not None and len(r) else np.zeros((DIMS[k], DIMS[k]))
    if mode == "fixed":
        ones = {k: np.ones(DIMS[k]) for k in SENSORS}
        w = WeightSet(np.full(6, PRIOR_WEIGHT), {k: S_f[k].copy() for k in SENSORS})
        return Assessment(w, S_f, ones, ones, P)
    gammas = dict(zip(SENSORS, normalized_gamma([P[k] for k in SENSORS])))
    w = assemble_weights(S_f, S_q, gammas, params.Xi, params.eps)
    return Assessment(w, S_f, S_q, gammas, P)
