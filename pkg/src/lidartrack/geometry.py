"""SE(3) pose algebra, pinhole camera projection, and pose perturbation.

Conventions used throughout the package:

* A ``PoseSE3`` maps world coordinates into the camera frame,
  ``p_cam = R @ p_world + t`` (the extrinsic convention).  The camera
  center in world coordinates is therefore ``-R^T t``.
* Rotations are stored as unit quaternions ``(w, x, y, z)`` and
  renormalized after every composition so long tracking runs do not
  accumulate drift.
* The local parameterization for optimizers is right-multiplicative:
  a 6-vector ``xi = (wx, wy, wz, tx, ty, tz)`` updates a pose as
  ``T <- T * exp(xi)`` (rotation block first).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Below this rotation angle (radians) exp/log switch to series expansions.
SMALL_ANGLE = 1e-8

# Points closer than this to the camera plane count as "behind".
MIN_DEPTH = 1e-9


class BehindCameraError(ValueError):
    """Projection was requested for a point with non-positive depth."""


# ---------------------------------------------------------------------------
# quaternion helpers (w, x, y, z)
# ---------------------------------------------------------------------------

def _quat_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def _quat_conjugate(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def _quat_normalize(q):
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero quaternion")
    q = q / n
    # canonical sign keeps log/rotvec single-valued
    if q[0] < 0.0:
        q = -q
    return q


def _quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _matrix_to_quat(R):
    # Shepperd's method: pick the largest diagonal combination for stability.
    R = np.asarray(R, dtype=float)
    t = np.trace(R)
    if t > 0.0:
        s = math.sqrt(t + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array([(R[2, 1] - R[1, 2]) / s,
                      0.25 * s,
                      (R[0, 1] + R[1, 0]) / s,
                      (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array([(R[0, 2] - R[2, 0]) / s,
                      (R[0, 1] + R[1, 0]) / s,
                      0.25 * s,
                      (R[1, 2] + R[2, 1]) / s])
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array([(R[1, 0] - R[0, 1]) / s,
                      (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s,
                      0.25 * s])
    return _quat_normalize(q)


def _quat_from_rotvec(rv):
    rv = np.asarray(rv, dtype=float)
    angle = np.linalg.norm(rv)
    if angle < SMALL_ANGLE:
        # sin(a/2)/a ~ 1/2 - a^2/48
        s = 0.5 - angle * angle / 48.0
        q = np.array([1.0 - angle * angle / 8.0, rv[0] * s, rv[1] * s, rv[2] * s])
    else:
        half = 0.5 * angle
        s = math.sin(half) / angle
        q = np.array([math.cos(half), rv[0] * s, rv[1] * s, rv[2] * s])
    return _quat_normalize(q)


def _rotvec_from_quat(q):
    w, x, y, z = q
    if w < 0.0:
        w, x, y, z = -w, -x, -y, -z
    s = math.sqrt(x * x + y * y + z * z)
    if s < SMALL_ANGLE:
        # theta/s -> 2/w * (1 - s^2/(3 w^2)) as s -> 0
        scale = 2.0 / w * (1.0 - s * s / (3.0 * w * w))
    else:
        scale = 2.0 * math.atan2(s, w) / s
    return np.array([x, y, z]) * scale


def _skew(v):
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera matrix K plus the image size in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    @property
    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    @property
    def mean_focal(self):
        return 0.5 * (self.fx + self.fy)


@dataclass(frozen=True)
class PerturbBounds:
    """Per-axis bounds of the uniform pose disturbance (meters / degrees)."""

    max_transl_per_axis: float
    max_rot_per_axis_deg: float

    def __post_init__(self):
        if self.max_transl_per_axis < 0 or self.max_rot_per_axis_deg < 0:
            raise ValueError("perturbation bounds must be non-negative")


# Default disturbance used to draw initial poses; calibrated so that the
# mean rotation/translation offsets land near 9.67 deg / 182.8 cm.
DEFAULT_PERTURB = PerturbBounds(max_transl_per_axis=2.0, max_rot_per_axis_deg=10.0)


class PoseSE3:
    """Rigid transform world -> camera stored as (unit quaternion, translation)."""

    __slots__ = ("q", "t")

    def __init__(self, q, t):
        self.q = _quat_normalize(np.asarray(q, dtype=float))
        self.t = np.asarray(t, dtype=float).reshape(3).copy()
        if not np.all(np.isfinite(self.t)):
            raise ValueError("non-finite translation")

    # -- constructors -------------------------------------------------------

    @classmethod
    def identity(cls):
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_rt(cls, R, t):
        return cls(_matrix_to_quat(R), t)

    @classmethod
    def from_rotvec(cls, rv, t):
        return cls(_quat_from_rotvec(rv), t)

    # -- group operations ----------------------------------------------------

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """self applied after other: (self*other)(p) = self(other(p))."""
        q = _quat_multiply(self.q, other.q)
        t = self.rotation_matrix() @ other.t + self.t
        return PoseSE3(q, t)

    def inverse(self) -> "PoseSE3":
        qc = _quat_conjugate(self.q)
        Rt = self.rotation_matrix().T
        return PoseSE3(qc, -Rt @ self.t)

    def apply(self, pts):
        """Transform one point (3,) or an array of points (N, 3)."""
        R = self.rotation_matrix()
        pts = np.asarray(pts, dtype=float)
        if pts.ndim == 1:
            return R @ pts + self.t
        return pts @ R.T + self.t

    # -- views ---------------------------------------------------------------

    def rotation_matrix(self):
        return _quat_to_matrix(self.q)

    def matrix(self):
        """3x4 row-major [R|t]."""
        return np.hstack([self.rotation_matrix(), self.t.reshape(3, 1)])

    def center(self):
        """Camera center in world coordinates, -R^T t."""
        return -(self.rotation_matrix().T @ self.t)

    def rotvec(self):
        return _rotvec_from_quat(self.q)

    def __repr__(self):
        return f"PoseSE3(q={np.round(self.q, 6)}, t={np.round(self.t, 6)})"


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def pose_compose(a: PoseSE3, b: PoseSE3) -> PoseSE3:
    return a.compose(b)


def pose_inverse(a: PoseSE3) -> PoseSE3:
    return a.inverse()


def transform_point(T: PoseSE3, p_world) -> np.ndarray:
    """Rigid transform of a world point into the camera frame."""
    return T.apply(np.asarray(p_world, dtype=float))


def project_point(K: CameraIntrinsics, p_cam) -> np.ndarray:
    """Pinhole projection of a camera-frame point; raises behind the camera.

    u = fx * X / Z + cx,  v = fy * Y / Z + cy.  No bounds clamping: callers
    mask out-of-image projections themselves.
    """
    p = np.asarray(p_cam, dtype=float)
    if p[2] <= MIN_DEPTH:
        raise BehindCameraError(f"point has non-positive depth Z={p[2]:g}")
    return np.array([K.fx * p[0] / p[2] + K.cx, K.fy * p[1] / p[2] + K.cy])


def h_project(K: CameraIntrinsics, T: PoseSE3, p_world) -> np.ndarray:
    """Full camera projection: world point -> camera frame -> pixel."""
    return project_point(K, transform_point(T, p_world))


def project_points(K: CameraIntrinsics, pts_cam):
    """Vectorized pinhole projection.

    Returns (uv, in_front): uv is (N, 2) with rows undefined where
    in_front is False.
    """
    pts_cam = np.asarray(pts_cam, dtype=float).reshape(-1, 3)
    z = pts_cam[:, 2]
    in_front = z > MIN_DEPTH
    zs = np.where(in_front, z, 1.0)
    uv = np.empty((len(pts_cam), 2))
    uv[:, 0] = K.fx * pts_cam[:, 0] / zs + K.cx
    uv[:, 1] = K.fy * pts_cam[:, 1] / zs + K.cy
    return uv, in_front


def se3_exp(xi) -> PoseSE3:
    """Exponential map; xi = (rotation block, translation block)."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    omega, rho = xi[:3], xi[3:]
    theta = np.linalg.norm(omega)
    W = _skew(omega)
    if theta < SMALL_ANGLE:
        V = np.eye(3) + 0.5 * W + (1.0 / 6.0) * (W @ W)
    else:
        A = (1.0 - math.cos(theta)) / theta ** 2
        B = (theta - math.sin(theta)) / theta ** 3
        V = np.eye(3) + A * W + B * (W @ W)
    return PoseSE3(_quat_from_rotvec(omega), V @ rho)


def se3_log(T: PoseSE3) -> np.ndarray:
    """Logarithm map, inverse of :func:`se3_exp` for rotation angles < pi."""
    omega = T.rotvec()
    theta = np.linalg.norm(omega)
    W = _skew(omega)
    if theta < SMALL_ANGLE:
        Vinv = np.eye(3) - 0.5 * W + (1.0 / 12.0) * (W @ W)
    else:
        half = 0.5 * theta
        C = (1.0 - half * math.cos(half) / math.sin(half)) / theta ** 2
        Vinv = np.eye(3) - 0.5 * W + C * (W @ W)
    return np.concatenate([omega, Vinv @ T.t])


def pose_error(a: PoseSE3, b: PoseSE3) -> tuple[float, float]:
    """(rotation error deg, translation error m) between two poses.

    Translation is measured between camera centers (-R^T t); rotation is
    the geodesic angle of the relative rotation.
    """
    rel = _quat_multiply(a.q, _quat_conjugate(b.q))
    s = np.linalg.norm(rel[1:])
    angle = 2.0 * math.atan2(s, abs(rel[0]))
    transl = float(np.linalg.norm(a.center() - b.center()))
    return math.degrees(angle), transl


def perturb_pose(T: PoseSE3, bounds: PerturbBounds, seed) -> PoseSE3:
    """Apply an independent uniform per-axis disturbance to a pose.

    The rotation vector has each component drawn from +-max_rot, the
    camera-center offset each component from +-max_transl, so
    ``pose_error(T, perturbed)`` returns exactly the drawn magnitudes.
    Deterministic for a fixed seed.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    dt = rng.uniform(-bounds.max_transl_per_axis, bounds.max_transl_per_axis, 3)
    rv = np.radians(rng.uniform(-bounds.max_rot_per_axis_deg,
                                bounds.max_rot_per_axis_deg, 3))
    dq = _quat_from_rotvec(rv)
    q_new = _quat_multiply(T.q, dq)
    R_new = _quat_to_matrix(_quat_normalize(q_new))
    c_new = T.center() + dt
    return PoseSE3(q_new, -(R_new @ c_new))


def reprojection_jacobian(K: CameraIntrinsics, pose: PoseSE3, pts_world):
    """Projection with its Jacobian w.r.t. the right-multiplicative update.

    For r(xi) = project(K, pose * exp(xi), P) evaluated at xi = 0:
    d p_cam / d xi = R @ [-[P]x | I], and the pixel Jacobian follows by
    the chain rule through the pinhole division.

    Returns (uv (N,2), z (N,), J (N,2,6)).  Callers must ensure z > 0.
    """
    P = np.asarray(pts_world, dtype=float).reshape(-1, 3)
    n = len(P)
    R = pose.rotation_matrix()
    cam = P @ R.T + pose.t
    x, y, z = cam[:, 0], cam[:, 1], cam[:, 2]
    uv = np.empty((n, 2))
    uv[:, 0] = K.fx * x / z + K.cx
    uv[:, 1] = K.fy * y / z + K.cy

    # d p_cam / d xi: rotation block R @ (-[P]x), translation block R
    Px = np.zeros((n, 3, 3))
    Px[:, 0, 1] = -P[:, 2]
    Px[:, 0, 2] = P[:, 1]
    Px[:, 1, 0] = P[:, 2]
    Px[:, 1, 2] = -P[:, 0]
    Px[:, 2, 0] = -P[:, 1]
    Px[:, 2, 1] = P[:, 0]
    dcam = np.empty((n, 3, 6))
    np.matmul(R[None, :, :], -Px, out=dcam[:, :, :3])
    dcam[:, :, 3:] = R[None, :, :]

    # d uv / d p_cam
    dpi = np.zeros((n, 2, 3))
    iz = 1.0 / z
    dpi[:, 0, 0] = K.fx * iz
    dpi[:, 0, 2] = -K.fx * x * iz * iz
    dpi[:, 1, 1] = K.fy * iz
    dpi[:, 1, 2] = -K.fy * y * iz * iz

    J = dpi @ dcam
    return uv, z, J
