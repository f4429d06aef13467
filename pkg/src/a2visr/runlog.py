"""Per-tick run logs, their CSV form and the summary metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .confidence import DIMS, SENSORS
from .sensors import MEASURED, RawSample

STATE = ("px", "py", "pz", "vx", "vy", "vz")
WEIGHT_COLS = tuple(f"w_{s}_{i}" for s in SENSORS for i in range(DIMS[s]))
RAW_COLUMNS = ("t", "sensor_id", "v1", "v2", "v3", "valid")
TICK_ROWS = ("ref_pos", "ref_vel", "truth_pos", "truth_vel", "gimbal")


class LogError(ValueError):
    """A log file cannot be interpreted."""


def _f(x: float) -> str:
    return repr(float(x))


@dataclass(eq=False)
class RunLog:
    """One record per estimator tick, stored column-wise.

    ``truth`` is None for replays of logs that carry no ground truth.
    ``raw`` keeps the raw sensor samples in arrival order for export.
    """

    t: np.ndarray
    est: np.ndarray
    prior: np.ndarray
    ref: np.ndarray
    truth: np.ndarray | None
    y: np.ndarray
    mask: np.ndarray
    weights: np.ndarray
    gimbal: np.ndarray
    cam_detected: np.ndarray
    in_fov: np.ndarray
    stale: np.ndarray
    status: list
    solve_ms: np.ndarray
    raw: list = field(default_factory=list, repr=False)
    raw_ticks: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        n = len(self.t)
        if np.any(np.diff(self.t) <= 0):
            raise LogError("tick timestamps must increase")
        for name in ("est", "prior", "ref", "y", "mask", "weights", "gimbal", "cam_detected", "in_fov", "stale", "solve_ms"):
            if len(getattr(self, name)) != n:
                raise LogError(f"column {name} has {len(getattr(self, name))} rows, expected {n}")
        if self.truth is not None and len(self.truth) != n:
            raise LogError("truth length differs from tick count")

    def __len__(self):
        return len(self.t)

    def weight(self, sensor: str) -> np.ndarray:
        start = sum(DIMS[s] for s in SENSORS[:SENSORS.index(sensor)])
        return self.weights[:, start:start + DIMS[sensor]]

    def same_estimates(self, other: RunLog) -> bool:
        """Exact equality of everything except wall-clock solve times."""
        arrays = ("t", "est", "prior", "ref", "y", "mask", "weights", "stale")
        if len(self) != len(other):
            return False
        return all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays) and self.status == other.status

    # -- tick CSV ------------------------------------------------------------

    def columns(self) -> list[str]:
        cols = ["t"]
        cols += [f"est_{c}" for c in STATE] + [f"prior_{c}" for c in STATE] + [f"ref_{c}" for c in STATE]
        cols += [f"truth_{c}" for c in STATE]
        cols += [f"y_{i}" for i in range(8)] + [f"mask_{i}" for i in range(8)]
        cols += list(WEIGHT_COLS)
        cols += ["gimbal_theta", "gimbal_phi", "cam_detected", "in_fov"]
        cols += [f"stale_{s}" for s in MEASURED] + ["status", "solve_ms"]
        return cols

    def write_csv(self, path) -> None:
        truth = self.truth if self.truth is not None else np.full((len(self), 6), np.nan)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns())
            for k in range(len(self)):
                row = [_f(self.t[k])]
                for arr in (self.est, self.prior, self.ref, truth, self.y):
                    row += [_f(v) for v in arr[k]]
                row += [str(int(v)) for v in self.mask[k]]
                row += [_f(v) for v in self.weights[k]]
                row += [_f(v) for v in self.gimbal[k]]
                row += [str(int(self.cam_detected[k])), str(int(self.in_fov[k]))]
                row += [str(int(v)) for v in self.stale[k]]
                row += [self.status[k], _f(self.solve_ms[k])]
                w.writerow(row)

    @classmethod
    def read_csv(cls, path) -> RunLog:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise LogError(f"{path} holds no ticks")

        def block(prefix, names, conv=float):
            return np.array([[conv(r[f"{prefix}{c}"]) for c in names] for r in rows])

        truth = block("truth_", STATE)
        return cls(
            t=np.array([float(r["t"]) for r in rows]),
            est=block("est_", STATE),
            prior=block("prior_", STATE),
            ref=block("ref_", STATE),
            truth=None if np.all(np.isnan(truth)) else truth,
            y=block("y_", range(8)),
            mask=block("mask_", range(8), int).astype(bool),
            weights=block("", WEIGHT_COLS),
            gimbal=block("gimbal_", ("theta", "phi")),
            cam_detected=np.array([bool(int(r["cam_detected"])) for r in rows]),
            in_fov=np.array([bool(int(r["in_fov"])) for r in rows]),
            stale=block("stale_", MEASURED, int),
            status=[r["status"] for r in rows],
            solve_ms=np.array([float(r["solve_ms"]) for r in rows]),
        )


# -- raw CSV -------------------------------------------------------------------


def write_raw(log: RunLog, path) -> None:
    """Raw samples followed, per tick, by reference, truth and gimbal rows.

    Values are written with ``repr`` so a replay reads back the exact
    floats.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RAW_COLUMNS)
        for k in range(len(log)):
            for s in log.raw_ticks[k]:
                vals = [_f(v) for v in s.values] + [""] * (3 - len(s.values))
                w.writerow([_f(s.t), s.sensor, *vals, str(int(s.valid))])
            t = _f(log.t[k])
            w.writerow([t, "ref_pos", *(_f(v) for v in log.ref[k, :3]), "1"])
            w.writerow([t, "ref_vel", *(_f(v) for v in log.ref[k, 3:]), "1"])
            if log.truth is not None:
                w.writerow([t, "truth_pos", *(_f(v) for v in log.truth[k, :3]), "1"])
                w.writerow([t, "truth_vel", *(_f(v) for v in log.truth[k, 3:]), "1"])
            w.writerow([t, "gimbal", _f(log.gimbal[k, 0]), _f(log.gimbal[k, 1]), str(int(log.in_fov[k])), "1"])


_WIDTH = {"imu": 3, "imu_q": 3, "uwb": 1, "opt": 3, "alt": 1, "cam": 3,
          "ref_pos": 3, "ref_vel": 3, "truth_pos": 3, "truth_vel": 3, "gimbal": 3}


@dataclass
class RawLog:
    samples: list
    ticks: list
    skipped: int
    total: int


def read_raw(path, max_skip_fraction: float = 0.05) -> RawLog:
    """Parse a raw CSV into sensor samples and per-tick rows.

    Malformed rows are skipped and counted; more than ``max_skip_fraction``
    of skipped rows aborts. ``ticks`` is a list of ``(t, {row: values})``
    holding only ticks that carry both reference rows.
    """
    samples: list[tuple[int, RawSample]] = []
    ticks: dict[float, dict] = {}
    order: list[float] = []
    skipped = total = 0
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != RAW_COLUMNS:
            raise LogError(f"{path}: expected header {','.join(RAW_COLUMNS)}")
        for row in reader:
            total += 1
            try:
                if len(row) != len(RAW_COLUMNS):
                    raise ValueError("column count")
                t = float(row[0])
                name = row[1]
                width = _WIDTH[name]
                vals = tuple(float(v) for v in row[2:2 + width])
                if not all(math.isfinite(v) for v in vals) or not math.isfinite(t):
                    raise ValueError("non-finite value")
                if any(v != "" for v in row[2 + width:5]):
                    raise ValueError("extra values")
                valid = {"1": True, "0": False}[row[5]]
            except (ValueError, KeyError):
                skipped += 1
                continue
            if name in TICK_ROWS:
                if t not in ticks:
                    ticks[t] = {}
                    order.append(t)
                ticks[t][name] = vals
                ticks[t]["_pos"] = len(samples)
            else:
                samples.append((len(samples), RawSample(t, name, vals, valid)))
    if total and skipped > max_skip_fraction * total:
        raise LogError(f"{path}: {skipped} of {total} rows malformed")
    complete = [(t, ticks[t]) for t in order if "ref_pos" in ticks[t] and "ref_vel" in ticks[t]]
    return RawLog([s for _, s in samples], complete, skipped, total)


# -- metrics -----------------------------------------------------------------


@dataclass
class MetricsReport:
    rmse: tuple | None
    mae: tuple | None
    max_error: float | None
    ate: float | None
    mean_solve_ms: float
    visual_loss_ratio: float
    ticks: int

    def to_dict(self) -> dict:
        return asdict(self)

    def __str__(self):
        if self.rmse is None:
            return f"ticks={self.ticks} eta={100 * self.visual_loss_ratio:.1f}% (no truth)"
        r = "/".join(f"{v:.4f}" for v in self.rmse)
        m = "/".join(f"{v:.4f}" for v in self.mae)
        return (f"RMSE {r} m, MAE {m} m, max {self.max_error:.4f} m, ATE {self.ate:.4f} m, "
                f"solve {self.mean_solve_ms:.2f} ms, eta {100 * self.visual_loss_ratio:.1f}%")


def compute_metrics(log: RunLog, warmup: float = 0.0, require_truth: bool = False) -> MetricsReport:
    """Error statistics over ticks with ``t >= t0 + warmup``.

    Without truth only the status part is reported, unless
    ``require_truth`` asks for a refusal.
    """
    if len(log) == 0:
        raise LogError("empty log")
    keep = log.t >= log.t[0] + warmup - 1e-12
    if not np.any(keep):
        raise LogError("warm-up covers the whole log")
    solve = float(np.mean(log.solve_ms[keep]))
    eta = float(np.mean(~log.cam_detected[keep]))
    if log.truth is None:
        if require_truth:
            raise LogError("log has no truth; error metrics refused")
        return MetricsReport(None, None, None, None, solve, eta, int(keep.sum()))
    e = log.est[keep, :3] - log.truth[keep, :3]
    norm = np.linalg.norm(e, axis=1)
    return MetricsReport(
        rmse=tuple(float(v) for v in np.sqrt(np.mean(e * e, axis=0))),
        mae=tuple(float(v) for v in np.mean(np.abs(e), axis=0)),
        max_error=float(norm.max()),
        ate=float(np.sqrt(np.mean(norm * norm))),
        mean_solve_ms=solve,
        visual_loss_ratio=eta,
        ticks=int(keep.sum()),
    )


def position_error(log: RunLog) -> np.ndarray:
    if log.truth is None:
        raise LogError("log has no truth")
    return np.linalg.norm(log.est[:, :3] - log.truth[:, :3], axis=1)


def save_outputs(log: RunLog, out_dir, config: dict, warmup: float = 0.0) -> MetricsReport:
    import json

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    write_raw(log, out / "raw.csv")
    log.write_csv(out / "ticks.csv")
    report = compute_metrics(log, warmup)
    (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return report
