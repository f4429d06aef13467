"""Sliding-window weighted least squares with polynomial dimension reduction.

The window holds the newest ``n <= Tw + 1`` ticks. Unknowns are the
relative states of those ticks; the rows are prior terms, state-transfer
terms between consecutive ticks and the 8 measurement rows of each tick.
"""

from __future__ import annotations

import logging
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular

from . import confidence as conf
from .dynamics import DynamicsParams, StateTransition, average_input, discretize
from .sensors import MEASURED, ROW_SLICES, DegenerateGeometry, MeasurementBundle, assemble_observation, uwb_direction

log = logging.getLogger(__name__)

NX = 6
NY = 8
NU = 3
COND_LIMIT = 1e12
RIDGE = 1e-9


class SolverError(RuntimeError):
    """Normal equations stayed singular after regularization."""


@dataclass(frozen=True)
class WindowConfig:
    Tw: int = 8
    kt: int = 3
    dt: float = 0.04

    def __post_init__(self):
        if self.Tw < 1:
            raise ValueError("Tw must be >= 1")
        if not 0 <= self.kt <= self.Tw:
            raise ValueError("kt must satisfy 0 <= kt <= Tw")
        if self.dt <= 0:
            raise ValueError("dt must be positive")


@dataclass(frozen=True, eq=False)
class WindowProblem:
    """Stacked system ``Ex x ~ Ealpha alpha`` with diagonal weights ``w``."""

    Ex: np.ndarray
    Ealpha: np.ndarray
    w: np.ndarray
    alpha: np.ndarray
    times: np.ndarray

    @property
    def n(self) -> int:
        return len(self.times)

    @property
    def W(self) -> np.ndarray:
        return np.diag(self.w)

    @property
    def target(self) -> np.ndarray:
        return self.Ealpha @ self.alpha

    def residual(self, x) -> np.ndarray:
        return self.Ex @ np.asarray(x, dtype=float).reshape(-1) - self.target

    def objective(self, x) -> float:
        r = self.residual(x)
        return float(r @ (self.w * r))

    def gradient(self, x) -> np.ndarray:
        return 2.0 * self.Ex.T @ (self.w * self.residual(x))


@dataclass(frozen=True, eq=False)
class PolynomialBasis:
    """Per-tick blocks ``kron(I6, t_k)`` with ``t_k = [1, s, .., s^kt]``.

    ``s = (t - t0) / scale`` where ``scale`` is the window duration; the
    raw-time coefficients follow by dividing power ``j`` by ``scale**j``.
    """

    tau: np.ndarray
    kt: int
    t0: float
    scale: float

    def raw_coefficients(self, c) -> np.ndarray:
        c = np.asarray(c, dtype=float).reshape(NX, self.kt + 1)
        return (c / self.scale ** np.arange(self.kt + 1)).reshape(-1)


@dataclass(eq=False)
class EstimatorOutput:
    x_seq: np.ndarray
    x_k: np.ndarray
    coeffs: np.ndarray | None = None
    weights: conf.WeightSet | None = None
    solve_ms: float = 0.0
    status: str = "ok"
    priors: np.ndarray | None = None


def _as_transitions(transitions, m: int) -> list[StateTransition]:
    if isinstance(transitions, StateTransition):
        return [transitions] * m
    transitions = list(transitions)
    if len(transitions) != m:
        raise ValueError(f"transitions: expected {m}, got {len(transitions)}")
    return transitions


def build_problem(priors, inputs, ys, transitions, Cs, weights: Sequence[conf.WeightSet],
                  masks=None, times=None) -> WindowProblem:
    """Assemble the stacked window system.

    ``inputs[j]`` and ``transitions[j]`` drive tick ``j`` to tick ``j + 1``.
    Rows of invalid measurements (``masks`` False) get weight exactly 0.
    """
    priors = np.asarray(priors, dtype=float).reshape(-1, NX)
    n = len(priors)
    inputs = np.asarray(inputs, dtype=float).reshape(-1, NU)
    ys = np.asarray(ys, dtype=float).reshape(-1, NY)
    Cs = np.asarray(Cs, dtype=float).reshape(-1, NY, NX)
    weights = list(weights)
    problems = []
    if n < 1:
        problems.append("priors: need at least one tick")
    for name, got, want in (("inputs", len(inputs), n - 1), ("measurements", len(ys), n),
                            ("observation matrices", len(Cs), n), ("weights", len(weights), n)):
        if got != want:
            problems.append(f"{name}: expected {want}, got {got}")
    masks = np.ones((n, NY), dtype=bool) if masks is None else np.asarray(masks, dtype=bool).reshape(-1, NY)
    if len(masks) != n:
        problems.append(f"masks: expected {n}, got {len(masks)}")
    times = np.arange(n, dtype=float) if times is None else np.asarray(times, dtype=float)
    if len(times) != n:
        problems.append(f"times: expected {n}, got {len(times)}")
    if problems:
        raise ValueError("window sequences disagree: " + "; ".join(problems))
    trans = _as_transitions(transitions, n - 1)

    nx, nt, ny = NX * n, NX * (n - 1), NY * n
    Ex = np.zeros((nx + nt + ny, nx))
    Ea = np.zeros((nx + nt + ny, nx + NU * (n - 1) + ny))
    Ex[:nx] = np.eye(nx)
    Ea[:nx, :nx] = np.eye(nx)
    for j, st in enumerate(trans):
        r = nx + NX * j
        Ex[r:r + NX, NX * j:NX * (j + 1)] = -st.A
        Ex[r:r + NX, NX * (j + 1):NX * (j + 2)] = np.eye(NX)
        Ea[r:r + NX, nx + NU * j:nx + NU * (j + 1)] = st.B
    r0 = nx + nt
    c0 = nx + NU * (n - 1)
    for k in range(n):
        Ex[r0 + NY * k:r0 + NY * (k + 1), NX * k:NX * (k + 1)] = Cs[k]
    Ea[r0:, c0:] = np.eye(ny)

    w_meas = np.concatenate([wk.measurement_diag() for wk in weights]) * masks.reshape(-1)
    w = np.concatenate([
        np.concatenate([wk.prior for wk in weights]),
        np.concatenate([wk["inertial"] for wk in weights[1:]]) if n > 1 else np.zeros(0),
        w_meas,
    ])
    alpha = np.concatenate([priors.reshape(-1), inputs.reshape(-1), ys.reshape(-1)])
    return WindowProblem(Ex, Ea, w, alpha, times)


def polynomial_basis(times, kt: int) -> PolynomialBasis:
    times = np.asarray(times, dtype=float)
    if kt < 0 or kt > len(times) - 1:
        raise ValueError(f"kt = {kt} needs at least {kt + 1} ticks, window has {len(times)}")
    if np.any(np.diff(times) <= 0):
        raise ValueError("window times must be strictly increasing")
    t0 = float(times[0])
    scale = float(times[-1] - t0) if len(times) > 1 else 1.0
    s = (times - t0) / scale
    V = s[:, None] ** np.arange(kt + 1)
    tau = np.zeros((NX * len(times), NX * (kt + 1)))
    for k in range(len(times)):
        tau[NX * k:NX * (k + 1)] = np.kron(np.eye(NX), V[k])
    return PolynomialBasis(tau, kt, t0, scale)


def _solve_normal(E, w, b) -> tuple[np.ndarray, bool]:
    """Weighted least squares through QR of the square-root-weighted rows.

    This is the minimizer of the normal equations without squaring the
    condition number. When the normal matrix would be conditioned worse
    than ``COND_LIMIT`` a ridge ``RIDGE * tr(E^T W E) / dim`` is added.
    """
    sw = np.sqrt(w)
    A = E * sw[:, None]
    y = sw * b
    Q, R = np.linalg.qr(A)
    s = np.linalg.svd(R, compute_uv=False)
    regularized = False
    if s[-1] ** 2 <= s[0] ** 2 / COND_LIMIT:
        dim = A.shape[1]
        lam = RIDGE * float(np.sum(s * s)) / dim
        if not lam > 0:
            raise SolverError("weighted system is zero")
        A = np.vstack([A, np.sqrt(lam) * np.eye(dim)])
        y = np.concatenate([y, np.zeros(dim)])
        Q, R = np.linalg.qr(A)
        regularized = True
    d = np.abs(np.diag(R))
    if not np.all(np.isfinite(R)) or d.min() <= 1e-300:
        raise SolverError("triangular factor is singular")
    return solve_triangular(R, Q.T @ y), regularized


def solve_full(p: WindowProblem) -> EstimatorOutput:
    t0 = time.perf_counter()
    x, reg = _solve_normal(p.Ex, p.w, p.target)
    seq = x.reshape(-1, NX)
    return EstimatorOutput(seq, seq[-1].copy(), solve_ms=1e3 * (time.perf_counter() - t0),
                           status="regularized" if reg else "ok")


def solve_reduced(p: WindowProblem, basis: PolynomialBasis) -> EstimatorOutput:
    if basis.tau.shape[0] != p.Ex.shape[1]:
        raise ValueError("basis does not match the window size")
    t0 = time.perf_counter()
    c, reg = _solve_normal(p.Ex @ basis.tau, p.w, p.target)
    seq = (basis.tau @ c).reshape(-1, NX)
    return EstimatorOutput(seq, seq[-1].copy(), coeffs=c, solve_ms=1e3 * (time.perf_counter() - t0),
                           status="regularized" if reg else "ok")


# -- per-tick pipeline -------------------------------------------------------


@dataclass
class EstimatorConfig:
    """Everything the per-tick pipeline needs.

    ``mode`` is ``adaptive`` or ``fixed``; ``disabled`` lists measured
    sensors removed from the fusion entirely.
    """

    window: WindowConfig = field(default_factory=WindowConfig)
    dynamics: DynamicsParams = field(default_factory=DynamicsParams)
    confidence: conf.ConfidenceParams = field(default_factory=conf.ConfidenceParams)
    mode: str = "adaptive"
    disabled: tuple = ()
    latency_compensation: bool = True

    def __post_init__(self):
        if self.mode not in ("adaptive", "fixed"):
            raise ValueError(f"unknown weighting mode {self.mode!r}")
        for s in self.disabled:
            if s not in MEASURED:
                raise ValueError(f"cannot disable unknown sensor {s!r}")
        if abs(self.window.dt - self.dynamics.dt) > 1e-12:
            raise ValueError("window and dynamics disagree on dt")
        if self.confidence.Tw != self.window.Tw:
            raise ValueError("confidence and window disagree on Tw")


@dataclass(eq=False)
class _Tick:
    t: float
    u: np.ndarray
    y: np.ndarray
    mask: np.ndarray
    ages: dict
    ref: np.ndarray
    weights: conf.WeightSet | None = None


class SlidingWindowEstimator:
    """Runs the window estimator one tick at a time.

    The posterior sequence of one tick becomes the prior sequence of the
    next; the newest prior is the last posterior propagated through the
    dynamics with the tick's averaged IMU input.
    """

    def __init__(self, cfg: EstimatorConfig | None = None):
        self.cfg = cfg or EstimatorConfig()
        self.st = discretize(self.cfg.dynamics)
        Tw = self.cfg.window.Tw
        self.ticks: deque[_Tick] = deque(maxlen=Tw + 1)
        self.posterior: np.ndarray | None = None
        self.priors: np.ndarray | None = None
        self.hist: dict[str, deque] = {k: deque(maxlen=Tw + 2) for k in conf.SENSORS}
        self._u_prev = np.zeros(NU)
        self.last_assessment: conf.Assessment | None = None

    def _mask(self, bundle: MeasurementBundle) -> np.ndarray:
        m = bundle.valid_mask()
        for s in self.cfg.disabled:
            m[ROW_SLICES[s]] = False
        return m

    def _initial_state(self, bundle: MeasurementBundle, ref: np.ndarray, mask: np.ndarray) -> np.ndarray:
        x = ref.copy()
        if mask[ROW_SLICES["cam"]].all():
            x[:3] = bundle.cam_position
        if mask[ROW_SLICES["opt"]].all():
            x[3:] = bundle.opt_velocity
        return x

    def _observation(self, prior: np.ndarray, ages: dict) -> tuple[np.ndarray, bool]:
        try:
            rho = uwb_direction(prior[:3])
            ok = True
        except DegenerateGeometry:
            rho = np.array([0.0, 0.0, 1.0])
            ok = False
        return assemble_observation(rho, ages if self.cfg.latency_compensation else None).C, ok

    def _assess(self, priors: np.ndarray, Cs: np.ndarray) -> conf.Assessment:
        ticks = list(self.ticks)
        ref = np.array([tk.ref for tk in ticks])
        ys = np.array([tk.y for tk in ticks])
        residuals = {"inertial": conf.inertial_residuals(ref, priors)}
        for s in MEASURED:
            rows = ROW_SLICES[s]
            residuals[s] = conf.measurement_residuals(Cs[:, rows, :], ref, ys[:, rows])
        histories = {k: np.array(self.hist[k]) for k in conf.SENSORS}
        return conf.evaluate(histories, residuals, self.cfg.confidence, self.cfg.mode)

    def step(self, imu_batch, bundle: MeasurementBundle, reference) -> EstimatorOutput:
        """Process one tick; ``reference`` is the planner's relative state."""
        ref = np.asarray(reference, dtype=float).reshape(NX)
        if imu_batch:
            u = average_input(imu_batch, self.cfg.dynamics)
        else:
            u = self._u_prev
        self._u_prev = u
        y = bundle.y()
        mask = self._mask(bundle)

        self.hist["inertial"].append(u)
        for s in MEASURED:
            self.hist[s].append(y[ROW_SLICES[s]])
        ages = {s: bundle.age.get(s, 0.0) for s in MEASURED}

        if self.posterior is None:
            newest = self._initial_state(bundle, ref, mask)
            carried = np.zeros((0, NX))
        else:
            newest = self.st.A @ self.posterior[-1] + self.st.B @ u
            keep = min(len(self.posterior), self.cfg.window.Tw)
            carried = self.posterior[len(self.posterior) - keep:]
        self.ticks.append(_Tick(bundle.t, u, y, mask, ages, ref))
        priors = np.vstack([carried, newest])
        n = len(self.ticks)
        assert len(priors) == n

        Cs = np.empty((n, NY, NX))
        uwb_ok = np.ones(n, dtype=bool)
        for k, tk in enumerate(self.ticks):
            Cs[k], uwb_ok[k] = self._observation(priors[k], tk.ages)

        assessment = self._assess(priors, Cs)
        self.last_assessment = assessment
        self.ticks[-1].weights = assessment.weights

        masks = np.array([tk.mask for tk in self.ticks])
        masks[~uwb_ok, ROW_SLICES["uwb"]] = False
        times = np.array([tk.t for tk in self.ticks])
        problem = build_problem(
            priors,
            np.array([tk.u for tk in list(self.ticks)[1:]]),
            np.array([tk.y for tk in self.ticks]),
            self.st,
            Cs,
            [tk.weights for tk in self.ticks],
            masks,
            times,
        )
        kt = min(self.cfg.window.kt, n - 1)
        t_start = time.perf_counter()
        try:
            out = solve_reduced(problem, polynomial_basis(times, kt))
        except SolverError as e:
            log.warning("solver failure at t=%.3f: %s", bundle.t, e)
            out = EstimatorOutput(priors.copy(), priors[-1].copy(), status="solver_failure")
        out.solve_ms = 1e3 * (time.perf_counter() - t_start)
        if assessment.weights.degraded and out.status == "ok":
            out.status = "degraded"
        out.weights = assessment.weights
        out.priors = priors
        self.priors = priors
        self.posterior = out.x_seq
        return out
