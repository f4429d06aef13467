"""Active vision: pan/tilt kinematics, marker projection and planar PnP.

Camera convention: x right, y down, z along the optical axis. At the home
pose (pan = tilt = 0) the optical axis points along +x of the mechanism
base frame with image "up" along +z.
"""

from __future__ import annotations

import functools
import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .dynamics import RelativeState
from .geometry import FrameId, PoseTransform, compose, exp_so3, rot_y, rot_z, skew

log = logging.getLogger(__name__)

ENCODER_RESOLUTION = np.deg2rad(0.088)

# camera axes expressed in the tilt link at the home pose
HOME_MOUNT = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


class VisionError(RuntimeError):
    """Base class for per-tick detection failures."""


class OrderingError(VisionError):
    pass


class PoseError(VisionError):
    pass


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = float(np.mod(a + np.pi, 2 * np.pi) - np.pi)
    return np.pi if a == -np.pi else a


@dataclass(frozen=True)
class GimbalState:
    theta: float = 0.0
    phi: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(self.theta))
        if not -np.pi / 2 - 1e-12 <= self.phi <= np.pi / 2 + 1e-12:
            raise ValueError(f"tilt {self.phi:.4f} rad outside [-pi/2, pi/2]")
        object.__setattr__(self, "phi", float(np.clip(self.phi, -np.pi / 2, np.pi / 2)))

    def quantized(self, resolution: float = ENCODER_RESOLUTION) -> GimbalState:
        if resolution <= 0:
            return self
        q = lambda a: round(a / resolution) * resolution  # noqa: E731
        return GimbalState(q(self.theta), float(np.clip(q(self.phi), -np.pi / 2, np.pi / 2)))


@dataclass(frozen=True)
class CameraModel:
    fx: float = 600.0
    fy: float = 600.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def project(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        return np.column_stack([self.fx * X[:, 0] / X[:, 2] + self.cx, self.fy * X[:, 1] / X[:, 2] + self.cy])

    def inside(self, uv) -> np.ndarray:
        uv = np.atleast_2d(uv)
        return (uv[:, 0] >= 0) & (uv[:, 0] <= self.width) & (uv[:, 1] >= 0) & (uv[:, 1] <= self.height)


@dataclass(frozen=True, eq=False)
class MarkerArray:
    """Four coplanar markers on a rectangle, body frame, ordered
    top-left, top-right, bottom-right, bottom-left."""

    points: np.ndarray

    def __post_init__(self):
        P = np.asarray(self.points, dtype=float).reshape(4, 3).copy()
        tl, tr, br, bl = P
        n = np.cross(tr - tl, bl - tl)
        if np.linalg.norm(n) < 1e-9:
            raise ValueError("marker array is degenerate")
        n = n / np.linalg.norm(n)
        scale = max(np.linalg.norm(tr - tl), np.linalg.norm(bl - tl))
        if abs(n @ (br - tl)) > 1e-9 * max(1.0, scale):
            raise ValueError("markers are not coplanar")
        sides = [np.linalg.norm(tr - tl), np.linalg.norm(br - bl), np.linalg.norm(bl - tl), np.linalg.norm(br - tr)]
        diags = [np.linalg.norm(br - tl), np.linalg.norm(bl - tr)]
        if abs(sides[0] - sides[1]) > 1e-9 or abs(sides[2] - sides[3]) > 1e-9 or abs(diags[0] - diags[1]) > 1e-9:
            raise ValueError("markers do not form a rectangle")
        P.setflags(write=False)
        object.__setattr__(self, "points", P)

    @classmethod
    def rectangle(cls, width: float = 0.20, height: float = 0.15, z: float = 0.0) -> MarkerArray:
        """Rectangle in the body x/y plane, centred on the body origin."""
        w, h = width / 2, height / 2
        return cls(np.array([[h, -w, z], [h, w, z], [-h, w, z], [-h, -w, z]]))

    @classmethod
    def facing_x(cls, width: float = 0.20, height: float = 0.15) -> MarkerArray:
        """Rectangle in the body y/z plane, seen face on from the +x side."""
        w, h = width / 2, height / 2
        return cls(np.array([[0.0, -w, h], [0.0, w, h], [0.0, w, -h], [0.0, -w, -h]]))

    def plane_frame(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(R, o, uv)``: body <- plane rotation, plane origin, 2-D marker coords."""
        return self._plane

    @functools.cached_property
    def _plane(self):
        tl, tr, br, bl = self.points
        o = self.points.mean(axis=0)
        e1 = (tr - tl) / np.linalg.norm(tr - tl)
        e2 = (bl - tl) - ((bl - tl) @ e1) * e1
        e2 = e2 / np.linalg.norm(e2)
        R = np.column_stack([e1, e2, np.cross(e1, e2)])
        uv = (self.points - o) @ R[:, :2]
        return R, o, uv


@dataclass(frozen=True, eq=False)
class GimbalGeometry:
    """Link offsets and camera mount of the pan/tilt mechanism.

    ``pan_offset`` locates the tilt axis in the pan link; ``tilt_offset``
    locates the camera in the tilt link. Both default to zero (concentric
    axes).
    """

    pan_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    tilt_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    mount_rotation: np.ndarray = field(default_factory=lambda: HOME_MOUNT.copy())

    def __post_init__(self):
        for name in ("pan_offset", "tilt_offset"):
            a = np.asarray(getattr(self, name), dtype=float).reshape(3)
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, a)

    @property
    def concentric(self) -> bool:
        return not (np.any(self.pan_offset) or np.any(self.tilt_offset))


# -- kinematics --------------------------------------------------------------


def forward_kinematics(gs: GimbalState, geom: GimbalGeometry = GimbalGeometry()) -> PoseTransform:
    """Camera pose in the mechanism base frame (camera -> base)."""
    Rp = rot_z(gs.theta)
    Rt = rot_y(-gs.phi)
    R = Rp @ Rt @ geom.mount_rotation
    t = Rp @ (geom.pan_offset + Rt @ geom.tilt_offset)
    return PoseTransform(R, t, FrameId.CAMERA, FrameId.MECHANISM_BASE)


def _axis_angles(target) -> tuple[float, float]:
    x, y, z = target
    return float(np.arctan2(y, x)), float(np.arctan2(z, np.hypot(x, y)))


def inverse_kinematics(target, geom: GimbalGeometry = GimbalGeometry(), previous: GimbalState | None = None,
                       tol: float = 1e-13, max_iter: int = 50) -> GimbalState:
    """Joint angles that put ``target`` (base frame) on the optical axis.

    On the pan axis the tilt saturates at +-pi/2 and the pan is held at
    ``previous``.
    """
    target = np.asarray(target, dtype=float).reshape(3)
    prev_theta = previous.theta if previous is not None else 0.0
    if np.linalg.norm(target) < 1e-9:
        raise ValueError("target coincides with the gimbal origin; direction undefined")
    if np.hypot(target[0], target[1]) <= 1e-6:
        return GimbalState(prev_theta, np.copysign(np.pi / 2, target[2]))
    theta, phi = _axis_angles(target)
    if geom.concentric and np.allclose(geom.mount_rotation, HOME_MOUNT):
        return GimbalState(theta, phi)

    # Newton iterations on the normalized image coordinates
    x = np.array([theta, phi])

    def err(a):
        T = forward_kinematics(GimbalState(a[0], float(np.clip(a[1], -np.pi / 2, np.pi / 2))), geom)
        c = T.rotation.T @ (target - T.translation)
        return np.array([c[0] / c[2], c[1] / c[2]])

    for _ in range(max_iter):
        e = err(x)
        if np.max(np.abs(e)) < tol:
            break
        h = 1e-7
        J = np.column_stack([(err(x + [h, 0]) - err(x - [h, 0])) / (2 * h),
                             (err(x + [0, h]) - err(x - [0, h])) / (2 * h)])
        x = x - np.linalg.solve(J, e)
        x[1] = float(np.clip(x[1], -np.pi / 2, np.pi / 2))
    return GimbalState(x[0], x[1])


def track_step(fused: RelativeState, current: GimbalState, geom: GimbalGeometry, max_rate: float, dt: float,
               base_pose: PoseTransform | None = None, lookahead: float | None = None) -> GimbalState:
    """Rate-limited pan/tilt command toward the fused target estimate.

    ``base_pose`` maps the mechanism base into the ground reference frame;
    identity when omitted. The target is predicted ``lookahead`` seconds
    ahead (default one tick).
    """
    if lookahead is None:
        lookahead = dt
    p = fused.p + lookahead * fused.v
    if base_pose is not None:
        p = base_pose.inverse().apply(p)
    try:
        want = inverse_kinematics(p, geom, previous=current)
    except ValueError:
        return current
    step = max_rate * dt
    dth = float(np.clip(wrap_angle(want.theta - current.theta), -step, step))
    dph = float(np.clip(want.phi - current.phi, -step, step))
    return GimbalState(current.theta + dth, current.phi + dph)


# -- projection and ordering -------------------------------------------------


@dataclass(frozen=True, eq=False)
class Projection:
    pixels: np.ndarray
    observable: np.ndarray
    depth: np.ndarray

    @property
    def ok(self) -> bool:
        return bool(np.all(self.observable))


def project_markers(T_CB: PoseTransform, markers: MarkerArray, cam: CameraModel) -> Projection:
    if T_CB.source != FrameId.BODY or T_CB.target != FrameId.CAMERA:
        raise ValueError("projection needs a body -> camera transform")
    X = markers.points @ T_CB.rotation.T + T_CB.translation
    depth = X[:, 2]
    front = depth > 1e-9
    uv = np.zeros((4, 2))
    uv[front] = cam.project(X[front])
    observable = front & cam.inside(uv)
    return Projection(uv, observable, depth)


def order_correspondences(points) -> np.ndarray:
    """Sort four image points into top-left, top-right, bottom-right, bottom-left.

    The points are walked around their centroid in screen-clockwise order
    (image y points down) starting from the point with the smallest
    ``u + v``; ties go to the smaller ``v``. The result depends only on the
    set of points, not on their input order.
    """
    P = np.asarray(points, dtype=float).reshape(4, 2)
    scale = max(np.ptp(P[:, 0]), np.ptp(P[:, 1]))
    if scale <= 0:
        raise OrderingError("points coincide")
    for i, j in itertools.combinations(range(4), 2):
        if np.linalg.norm(P[i] - P[j]) <= 1e-9 * scale:
            raise OrderingError("duplicate points")
    c = P.mean(axis=0)
    ang = np.arctan2(P[:, 1] - c[1], P[:, 0] - c[0])
    hull = P[np.argsort(ang)]
    d = np.roll(hull, -1, axis=0) - hull
    cross = d[:, 0] * np.roll(d, -1, axis=0)[:, 1] - d[:, 1] * np.roll(d, -1, axis=0)[:, 0]
    if np.any(cross <= 1e-9 * scale * scale):
        raise OrderingError("points are collinear or not convex")
    key = hull[:, 0] + hull[:, 1]
    start = min(range(4), key=lambda i: (key[i], hull[i, 1]))
    return np.roll(hull, -start, axis=0)


# -- PnP ---------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PnPResult:
    pose: PoseTransform
    residual: float


def _normalize_2d(P):
    c = P.mean(axis=0)
    d = P - c
    s = np.sqrt(2) / max(np.sqrt((d * d).sum(axis=1)).mean(), 1e-12)
    T = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1]])
    return T, d * s


def homography_dlt(src, dst) -> tuple[np.ndarray, float]:
    """Normalized DLT homography mapping ``src`` to ``dst``; returns ``(H, cond)``."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    Ts, s = _normalize_2d(src)
    Td, d = _normalize_2d(dst)
    n = len(s)
    x, y = s[:, 0], s[:, 1]
    u, v = d[:, 0], d[:, 1]
    one, zero = np.ones(n), np.zeros(n)
    A = np.empty((2 * n, 9))
    A[0::2] = np.column_stack([-x, -y, -one, zero, zero, zero, u * x, u * y, u])
    A[1::2] = np.column_stack([zero, zero, zero, -x, -y, -one, v * x, v * y, v])
    _, S, Vt = np.linalg.svd(A)
    Hn = Vt[-1].reshape(3, 3)
    H = np.linalg.solve(Td, Hn @ Ts)
    cond = S[0] / S[-2] if S[-2] > 0 else np.inf
    return H / H[2, 2] if abs(H[2, 2]) > 1e-15 else H, cond


def _pose_from_homography(H) -> tuple[np.ndarray, np.ndarray]:
    """Plane -> camera pose from a homography on normalized image coordinates."""
    h1, h2, h3 = H[:, 0], H[:, 1], H[:, 2]
    lam = 2.0 / (np.linalg.norm(h1) + np.linalg.norm(h2))
    if h3[2] * lam < 0:
        lam = -lam
    r1, r2 = lam * h1, lam * h2
    M = np.column_stack([r1, r2, np.cross(r1, r2)])
    U, _, Vt = np.linalg.svd(M)
    R = U @ np.diag([1.0, 1.0, np.linalg.det(U @ Vt)]) @ Vt
    return R, lam * h3


def _mirror_candidate(R, t):
    """Second planar-pose candidate: plane normal reflected about the line of sight."""
    n1 = R[:, 2]
    d = t / np.linalg.norm(t)
    n2 = 2 * (d @ n1) * d - n1
    axis = np.cross(n1, n2)
    s = np.linalg.norm(axis)
    if s < 1e-12:
        return None
    ang = np.arctan2(s, n1 @ n2)
    return exp_so3(axis / s * ang) @ R, t


def _reprojection(R, t, X, uv, cam):
    Xc = X @ R.T + t
    z = Xc[:, 2]
    if np.any(z <= 0):
        return np.inf, None
    r = np.empty(2 * len(X))
    r[0::2] = cam.fx * Xc[:, 0] / z + cam.cx - uv[:, 0]
    r[1::2] = cam.fy * Xc[:, 1] / z + cam.cy - uv[:, 1]
    return float(np.sqrt(np.mean(r * r))), r


def _refine(R, t, X, uv, cam, iters=20):
    """Levenberg-Marquardt on the reprojection error (rotation as a left
    perturbation)."""
    lam = 1e-6
    err, r = _reprojection(R, t, X, uv, cam)
    if r is None:
        return R, t, err
    n = len(X)
    J = np.zeros((2 * n, 6))
    for _ in range(iters):
        RX = X @ R.T
        Xc = RX + t
        iz = 1.0 / Xc[:, 2]
        a = cam.fx * iz
        b = cam.fy * iz
        c = -cam.fx * Xc[:, 0] * iz * iz
        d = -cam.fy * Xc[:, 1] * iz * iz
        # rows interleaved u0, v0, u1, ...; translation block is d(pixel)/d(Xc),
        # rotation block is (RX x d(pixel)/d(Xc)) for a left perturbation
        J[0::2, 3] = a
        J[0::2, 5] = c
        J[1::2, 4] = b
        J[1::2, 5] = d
        J[0::2, 0] = RX[:, 1] * c
        J[0::2, 1] = RX[:, 2] * a - RX[:, 0] * c
        J[0::2, 2] = -RX[:, 1] * a
        J[1::2, 0] = RX[:, 1] * d - RX[:, 2] * b
        J[1::2, 1] = -RX[:, 0] * d
        J[1::2, 2] = RX[:, 0] * b
        JtJ = J.T @ J
        g = J.T @ r
        step = -np.linalg.solve(JtJ + lam * np.diag(np.diag(JtJ) + 1e-12), g)
        R_new = exp_so3(step[:3]) @ R
        t_new = t + step[3:]
        err_new, r_new = _reprojection(R_new, t_new, X, uv, cam)
        if np.max(np.abs(step)) < 1e-10:
            if err_new < err:
                R, t, err = R_new, t_new, err_new
            break
        if err_new < err:
            converged = err - err_new <= 1e-8 * err
            R, t, err, r = R_new, t_new, err_new, r_new
            lam *= 0.1
            if converged or err < 1e-12:
                break
        else:
            lam *= 10
            if lam > 1e4:
                break
    return R, t, err


def _plane_pose_to_body(R_cp, t_cp, markers):
    R_bp, o, _ = markers.plane_frame()
    # camera <- body = camera <- plane <- body
    R = R_cp @ R_bp.T
    t = t_cp - R @ o
    return PoseTransform(R, t, FrameId.BODY, FrameId.CAMERA)


def _homography_pose(pixels, markers, cam):
    _, _, uv_plane = markers.plane_frame()
    pts = np.column_stack([(pixels[:, 0] - cam.cx) / cam.fx, (pixels[:, 1] - cam.cy) / cam.fy])
    H, cond = homography_dlt(uv_plane, pts)
    if not np.isfinite(cond) or cond > 1e8:
        raise PoseError(f"ill-conditioned homography (cond {cond:.3g})")
    R, t = _pose_from_homography(H)
    return R, t, np.column_stack([uv_plane, np.zeros(4)])


def solve_pnp(pixels, markers: MarkerArray, cam: CameraModel) -> PnPResult:
    """Body -> camera pose from four ordered marker pixels.

    Homography decomposition seeds both planar-ambiguity candidates; each
    is refined on the reprojection error and the one with all markers in
    front of the camera and the smaller residual wins.
    """
    pixels = np.asarray(pixels, dtype=float).reshape(4, 2)
    R, t, Xp = _homography_pose(pixels, markers, cam)
    best = None
    seeds = [(R, t)]
    mirror = _mirror_candidate(R, t)
    if mirror is not None:
        seeds.append(mirror)
    for R0, t0 in seeds:
        Rr, tr, err = _refine(R0, t0, Xp, pixels, cam)
        if np.isfinite(err) and (best is None or err < best[2]):
            best = (Rr, tr, err)
    if best is None:
        raise PoseError("no pose candidate places the markers in front of the camera")
    return PnPResult(_plane_pose_to_body(best[0], best[1], markers), best[2])


def _hypothesis_scores(cands, uv_plane, cam) -> np.ndarray:
    """Reprojection RMS of the homography pose of each correspondence
    hypothesis, batched over the first axis of ``cands``."""
    m = len(cands)
    pts = np.stack([(cands[..., 0] - cam.cx) / cam.fx, (cands[..., 1] - cam.cy) / cam.fy], axis=-1)
    Ts, s = _normalize_2d(uv_plane)
    c = pts.mean(axis=1, keepdims=True)
    d = pts - c
    k = np.sqrt(2) / np.maximum(np.sqrt((d * d).sum(axis=2)).mean(axis=1), 1e-12)
    d = d * k[:, None, None]
    x, y = s[:, 0], s[:, 1]
    u, v = d[..., 0], d[..., 1]
    A = np.zeros((m, 8, 9))
    A[:, 0::2, 0], A[:, 0::2, 1], A[:, 0::2, 2] = -x, -y, -1.0
    A[:, 1::2, 3], A[:, 1::2, 4], A[:, 1::2, 5] = -x, -y, -1.0
    A[:, 0::2, 6], A[:, 0::2, 7], A[:, 0::2, 8] = u * x, u * y, u
    A[:, 1::2, 6], A[:, 1::2, 7], A[:, 1::2, 8] = v * x, v * y, v
    _, _, Vt = np.linalg.svd(A)
    Hn = Vt[:, -1].reshape(m, 3, 3)
    Td_inv = np.zeros((m, 3, 3))
    Td_inv[:, 0, 0] = Td_inv[:, 1, 1] = 1.0 / k
    Td_inv[:, 0, 2], Td_inv[:, 1, 2] = c[:, 0, 0], c[:, 0, 1]
    Td_inv[:, 2, 2] = 1.0
    H = Td_inv @ Hn @ Ts
    h1, h2, h3 = H[:, :, 0], H[:, :, 1], H[:, :, 2]
    lam = 2.0 / (np.linalg.norm(h1, axis=1) + np.linalg.norm(h2, axis=1))
    lam = np.where(h3[:, 2] * lam < 0, -lam, lam)
    r1, r2 = lam[:, None] * h1, lam[:, None] * h2
    M = np.stack([r1, r2, np.cross(r1, r2)], axis=2)
    U, _, Vt = np.linalg.svd(M)
    D = np.ones((m, 3))
    D[:, 2] = np.linalg.det(U @ Vt)
    R = (U * D[:, None, :]) @ Vt
    t = lam[:, None] * h3
    X = np.concatenate([uv_plane, np.zeros((4, 1))], axis=1)
    Xc = np.einsum("mij,nj->mni", R, X) + t[:, None, :]
    z = Xc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        proj = np.stack([cam.fx * Xc[..., 0] / z + cam.cx, cam.fy * Xc[..., 1] / z + cam.cy], axis=-1)
    err = np.sqrt(((proj - cands) ** 2).sum(axis=2).mean(axis=1))
    err[np.any(z <= 0, axis=1) | ~np.isfinite(err)] = np.inf
    return err


def estimate_marker_pose(pixels, markers: MarkerArray, cam: CameraModel, upright: bool = False) -> PnPResult:
    """PnP on unordered detections.

    The canonical image order fixes the correspondences up to a cyclic
    shift and a winding flip (markers seen from either side).

    With ``upright`` the marker is known to be seen front on with its top
    edge roughly horizontal (image roll within 45 degrees, as with a
    pan/tilt camera and a vertical marker); the shift whose top edge is
    closest to the image +u axis is used. Otherwise all eight hypotheses
    are scored by the residual of their homography pose. At long range a
    rectangle fits its 90 degree rotated twin almost equally well through
    a tilted plane, so the general search can pick the wrong aspect under
    pixel noise.
    """
    ordered = order_correspondences(pixels)
    if upright:
        top = np.roll(ordered, -1, axis=0) - ordered
        ang = np.abs(np.arctan2(top[:, 1], top[:, 0]))
        return solve_pnp(np.roll(ordered, -int(np.argmin(ang)), axis=0), markers, cam)
    _, _, uv_plane = markers.plane_frame()
    cands = np.stack([np.roll(base, -shift, axis=0) for base in (ordered, ordered[::-1]) for shift in range(4)])
    err = _hypothesis_scores(cands, uv_plane, cam)
    best = int(np.argmin(err))
    if not np.isfinite(err[best]):
        raise PoseError("no correspondence hypothesis places the markers in front of the camera")
    return solve_pnp(cands[best], markers, cam)


def camera_position_feedback(T_GpG: PoseTransform, T_GM: PoseTransform, T_MC: PoseTransform,
                             T_CB: PoseTransform) -> np.ndarray:
    """Relative position of the body in the ground reference frame.

    Composes ground-reference <- ground <- mechanism <- camera <- body and
    returns the translation.
    """
    return compose(compose(compose(T_GpG, T_GM), T_MC), T_CB).translation.copy()
