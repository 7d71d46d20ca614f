"""Two-view cone-beam geometry.

Conventions used throughout the package:

* World frame: millimetres, origin at the rotation centre.  The rotation
  axis is +y (vertical).  A positive ``view_angle`` rotates the
  source/detector assembly about +y by the right-hand rule (+z swings
  toward +x), i.e. counterclockwise when viewed from above with +x to the
  right and +z up the page.
* At ``view_angle = 0`` the source sits at ``(0, 0, +sod)`` and looks along
  -z; the detector plane is perpendicular to the optical axis at distance
  ``sdd`` from the source.
* Camera frame: x right (detector columns, u), y down (detector rows, v),
  z forward (source toward detector).  Pixel (u, v) = (col, row), 0-indexed
  at pixel centres; the principal point is the detector centre
  ``((cols-1)/2, (rows-1)/2)``.
* View 1 of a stereo pair is the reference camera.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import distance_transform_edt
from scipy.spatial import cKDTree

from .errors import (
    BoundsError,
    DecompositionError,
    DegenerateMatchesError,
    GeometryError,
    PointAtInfinityError,
)

_ORTHO_TOL = 1e-9


def rotation_x(deg: float) -> np.ndarray:
    a = math.radians(deg)
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rotation_y(deg: float) -> np.ndarray:
    a = math.radians(deg)
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_z(deg: float) -> np.ndarray:
    a = math.radians(deg)
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class IntrinsicMatrix:
    """Pinhole intrinsics in pixel units."""

    focal_u: float
    focal_v: float
    principal_u: float
    principal_v: float
    skew: float = 0.0

    def __post_init__(self):
        if self.focal_u <= 0 or self.focal_v <= 0:
            raise GeometryError("focal lengths must be positive")

    def matrix(self) -> np.ndarray:
        return np.array(
            [
                [self.focal_u, self.skew, self.principal_u],
                [0.0, self.focal_v, self.principal_v],
                [0.0, 0.0, 1.0],
            ]
        )


@dataclass(frozen=True)
class Pose:
    """Relative rotation and translation (camera 1 -> camera 2).

    ``translation`` is in millimetres, or a unit-norm direction while the
    global scale is unresolved.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if R.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if not np.allclose(R.T @ R, np.eye(3), atol=_ORTHO_TOL):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation determinant must be +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    def angle_deg(self) -> float:
        """Rotation angle of the relative rotation."""
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return math.degrees(math.acos(min(1.0, max(-1.0, c))))


@dataclass(frozen=True)
class ProjectionMatrix:
    """3x4 camera matrix, normalized so the left 3 entries of the last row
    have unit norm."""

    entries: np.ndarray

    def __post_init__(self):
        P = np.asarray(self.entries, dtype=float)
        if P.shape != (3, 4):
            raise ValueError("projection matrix must be 3x4")
        if np.linalg.matrix_rank(P[:, :3]) != 3:
            raise GeometryError("left 3x3 block must have rank 3")
        n = np.linalg.norm(P[2, :3])
        object.__setattr__(self, "entries", P / n)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.entries, dtype=dtype)


@dataclass(frozen=True)
class ConeBeamGeometry:
    """Circular cone-beam acquisition geometry for one view."""

    sod: float
    sdd: float
    detector_rows: int
    detector_cols: int
    pixel_pitch: float
    view_angle: float = 0.0
    detector_tilt: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not (0 < self.sod < self.sdd):
            raise GeometryError(
                f"need 0 < sod < sdd, got sod={self.sod}, sdd={self.sdd}"
            )
        if self.pixel_pitch <= 0:
            raise GeometryError(f"pixel_pitch must be positive, got {self.pixel_pitch}")
        if self.detector_rows < 1 or self.detector_cols < 1:
            raise GeometryError("detector dimensions must be >= 1")

    @property
    def magnification(self) -> float:
        return self.sdd / self.sod

    def intrinsics(self) -> IntrinsicMatrix:
        f = self.sdd / self.pixel_pitch
        return IntrinsicMatrix(
            focal_u=f,
            focal_v=f,
            principal_u=(self.detector_cols - 1) / 2.0,
            principal_v=(self.detector_rows - 1) / 2.0,
        )

    def source_position(self) -> np.ndarray:
        """World position of the X-ray source."""
        return rotation_y(self.view_angle) @ np.array([0.0, 0.0, self.sod])

    def camera_rotation(self) -> np.ndarray:
        """World-to-camera rotation (rows are the camera axes in world coords)."""
        base = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]])
        R = base @ rotation_y(self.view_angle).T
        p, r, y = self.detector_tilt
        tilt = rotation_z(r) @ rotation_y(y) @ rotation_x(p)
        return tilt @ R

    def with_view_angle(self, angle_deg: float) -> "ConeBeamGeometry":
        return ConeBeamGeometry(
            sod=self.sod,
            sdd=self.sdd,
            detector_rows=self.detector_rows,
            detector_cols=self.detector_cols,
            pixel_pitch=self.pixel_pitch,
            view_angle=angle_deg,
            detector_tilt=self.detector_tilt,
        )


@dataclass(frozen=True)
class PointMatchSet:
    """Corresponding pixel coordinates (u1, v1, u2, v2) across two views."""

    coords: np.ndarray

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.coords, dtype=float))
        if c.ndim != 2 or c.shape[1] != 4:
            raise ValueError("matches must be an (N, 4) array of (u1, v1, u2, v2)")
        if len(np.unique(c, axis=0)) != len(c):
            raise ValueError("duplicate matches are not allowed")
        object.__setattr__(self, "coords", c)

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def view1(self) -> np.ndarray:
        return self.coords[:, 0:2]

    @property
    def view2(self) -> np.ndarray:
        return self.coords[:, 2:4]


def projection_matrix_from_geometry(geom: ConeBeamGeometry) -> ProjectionMatrix:
    """Build P = K [R | t] placing the rotation-axis origin ``sod`` mm in
    front of the source along the optical axis.

    The world origin projects to the principal point by construction.
    """
    K = geom.intrinsics().matrix()
    R = geom.camera_rotation()
    t = -R @ geom.source_position()
    return ProjectionMatrix(K @ np.hstack([R, t[:, None]]))


def project_point(P: ProjectionMatrix | np.ndarray, x) -> tuple[float, float]:
    """Dehomogenized projection of a single world point (mm) to pixels."""
    u, v = project_points(P, np.asarray(x, dtype=float).reshape(1, 3))[0]
    return float(u), float(v)


def project_points(P: ProjectionMatrix | np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Project an (N, 3) array of world points; returns (N, 2) pixel coords."""
    M = np.asarray(P, dtype=float)
    pts = np.asarray(pts, dtype=float)
    h = M[:, :3] @ pts.T + M[:, 3:4]
    w = h[2]
    if np.any(np.abs(w) < 1e-12):
        raise PointAtInfinityError("point lies on the camera's principal plane")
    return (h[:2] / w).T


def _hartley_normalization(pts: np.ndarray) -> np.ndarray:
    """Similarity transform sending the centroid to the origin and the mean
    distance to sqrt(2)."""
    centroid = pts.mean(axis=0)
    d = np.linalg.norm(pts - centroid, axis=1).mean()
    if d < 1e-12:
        raise DegenerateMatchesError("matches are coincident; zero parallax spread")
    s = math.sqrt(2.0) / d
    return np.array(
        [[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]]
    )


def estimate_fundamental(matches: PointMatchSet | np.ndarray) -> np.ndarray:
    """Normalized eight-point estimate of the fundamental matrix.

    Applies Hartley normalization, solves the homogeneous least-squares
    system x2' F x1 = 0 by SVD and enforces rank 2.
    """
    if not isinstance(matches, PointMatchSet):
        matches = PointMatchSet(np.asarray(matches))
    if len(matches) < 8:
        raise ValueError(f"need at least 8 matches, got {len(matches)}")
    x1, x2 = matches.view1, matches.view2
    T1 = _hartley_normalization(x1)
    T2 = _hartley_normalization(x2)
    n1 = (T1[:2, :2] @ x1.T + T1[:2, 2:3]).T
    n2 = (T2[:2, :2] @ x2.T + T2[:2, 2:3]).T

    a1, b1 = n1[:, 0], n1[:, 1]
    a2, b2 = n2[:, 0], n2[:, 1]
    ones = np.ones(len(matches))
    A = np.column_stack(
        [a2 * a1, a2 * b1, a2, b2 * a1, b2 * b1, b2, a1, b1, ones]
    )
    _, s, vt = np.linalg.svd(A)
    # Eight independent constraints are required; with fewer the nullspace
    # is not one-dimensional and F is not determined.
    if s[-2] < 1e-9 * max(s[0], 1e-300):
        raise DegenerateMatchesError("matches are in a degenerate configuration")
    F = vt[-1].reshape(3, 3)

    u, sv, vtf = np.linalg.svd(F)
    F = u @ np.diag([sv[0], sv[1], 0.0]) @ vtf
    F = T2.T @ F @ T1
    return F / np.linalg.norm(F)


def epipolar_residuals(F: np.ndarray, matches: PointMatchSet | np.ndarray) -> np.ndarray:
    """|x2' F x1| per match, with F and the homogeneous pixel vectors
    normalized to unit length."""
    if not isinstance(matches, PointMatchSet):
        matches = PointMatchSet(np.asarray(matches))
    Fn = F / np.linalg.norm(F)
    h1 = np.column_stack([matches.view1, np.ones(len(matches))])
    h2 = np.column_stack([matches.view2, np.ones(len(matches))])
    h1 = h1 / np.linalg.norm(h1, axis=1, keepdims=True)
    h2 = h2 / np.linalg.norm(h2, axis=1, keepdims=True)
    return np.abs(np.einsum("ni,ij,nj->n", h2, Fn, h1))


def _triangulate_normalized(R: np.ndarray, t: np.ndarray, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """DLT triangulation in normalized camera coordinates; returns (N, 3)
    points in the camera-1 frame."""
    P1 = np.hstack([np.eye(3), np.zeros((3, 1))])
    P2 = np.hstack([R, t[:, None]])
    out = np.empty((len(x1), 3))
    for i, (p, q) in enumerate(zip(x1, x2)):
        A = np.array(
            [
                p[0] * P1[2] - P1[0],
                p[1] * P1[2] - P1[1],
                q[0] * P2[2] - P2[0],
                q[1] * P2[2] - P2[1],
            ]
        )
        _, _, vt = np.linalg.svd(A)
        X = vt[-1]
        w = X[3] if abs(X[3]) > 1e-15 else 1e-15
        out[i] = X[:3] / w
    return out


def decompose_essential(
    F: np.ndarray,
    K1: IntrinsicMatrix,
    K2: IntrinsicMatrix,
    matches: PointMatchSet | np.ndarray,
) -> Pose:
    """Recover the relative pose from F via the essential matrix.

    E = K2' F K1 is factored into the four (R, t) candidates; the candidate
    placing the majority of the triangulated matches in front of both
    cameras wins.  ||t|| = 1 (scale unresolved).
    """
    if not isinstance(matches, PointMatchSet):
        matches = PointMatchSet(np.asarray(matches))
    K1m, K2m = K1.matrix(), K2.matrix()
    E = K2m.T @ np.asarray(F, dtype=float) @ K1m
    U, _, Vt = np.linalg.svd(E)
    # Work with proper rotations; E is defined up to sign.
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t_unit = U[:, 2]

    K1i, K2i = np.linalg.inv(K1m), np.linalg.inv(K2m)
    h1 = np.column_stack([matches.view1, np.ones(len(matches))])
    h2 = np.column_stack([matches.view2, np.ones(len(matches))])
    n1 = (K1i @ h1.T).T
    n2 = (K2i @ h2.T).T
    n1 = n1[:, :2] / n1[:, 2:3]
    n2 = n2[:, :2] / n2[:, 2:3]

    best, best_count = None, -1
    for R in (U @ W @ Vt, U @ W.T @ Vt):
        for t in (t_unit, -t_unit):
            X = _triangulate_normalized(R, t, n1, n2)
            z1 = X[:, 2]
            z2 = (X @ R.T + t)[:, 2]
            count = int(np.sum((z1 > 0) & (z2 > 0)))
            if count > best_count:
                best, best_count = (R, t), count
    if best_count <= len(matches) / 2:
        raise DecompositionError(
            f"cheirality vote failed: best candidate has {best_count}/{len(matches)} "
            "points in front of both cameras"
        )
    R, t = best
    return Pose(rotation=R, translation=t / np.linalg.norm(t))


def resolve_translation_scale(pose: Pose, known_sod: float) -> Pose:
    """Fix the translation scale from the nominal source-to-rotation-axis
    distance.

    Two views of one circular trajectory with relative rotation angle a sit
    on a circle of radius ``known_sod``; their baseline is
    ``2 sod sin(a/2)``.
    """
    if known_sod <= 0:
        raise ValueError(f"known_sod must be positive, got {known_sod}")
    n = np.linalg.norm(pose.translation)
    if abs(n - 1.0) > 1e-6:
        raise ValueError("pose translation must be unit-norm before scaling")
    half = math.radians(pose.angle_deg()) / 2.0
    if half < 1e-9:
        raise ValueError(
            "relative rotation is zero; the source distance does not determine a baseline"
        )
    baseline = 2.0 * known_sod * math.sin(half)
    return Pose(rotation=pose.rotation, translation=pose.translation * baseline)


def _delta_rotation(pitch_deg: float, roll_deg: float, yaw_deg: float) -> np.ndarray:
    """Object-pose perturbation rotation: yaw about y, pitch about x, roll
    about z, composed R = Ry(yaw) Rx(pitch) Rz(roll)."""
    return rotation_y(yaw_deg) @ rotation_x(pitch_deg) @ rotation_z(roll_deg)


def apply_pose_delta(points: np.ndarray, delta, center: np.ndarray | None = None) -> np.ndarray:
    """Apply a (pitch, roll, yaw, dx, dy, dz) perturbation to points (mm),
    rotating about ``center`` (default: the point centroid)."""
    pts = np.asarray(points, dtype=float)
    if center is None:
        center = pts.mean(axis=0)
    p, r, y, dx, dy, dz = delta
    R = _delta_rotation(p, r, y)
    return (pts - center) @ R.T + center + np.array([dx, dy, dz])


@dataclass
class PoseRefinement:
    """Result of :func:`refine_pose`."""

    pitch_deg: float
    roll_deg: float
    yaw_deg: float
    shift_mm: tuple[float, float, float]
    residual_px: float

    @property
    def delta(self) -> tuple[float, float, float, float, float, float]:
        return (self.pitch_deg, self.roll_deg, self.yaw_deg, *self.shift_mm)


class _ViewObjective:
    """Per-view symmetric chamfer machinery: a distance transform of the
    observed map for the forward direction, a lit-pixel cloud for the
    reverse one."""

    def __init__(self, observed: np.ndarray, P: np.ndarray, max_points: int, rng: np.random.Generator):
        mask = np.asarray(observed) > 0.5
        if not mask.any():
            raise ValueError("observed feature map has no lit pixels")
        self.P = np.asarray(P, dtype=float)
        self.dist = distance_transform_edt(~mask)
        lit = np.argwhere(mask)  # (row, col)
        if len(lit) > max_points:
            lit = lit[rng.choice(len(lit), size=max_points, replace=False)]
        self.lit_uv = lit[:, ::-1].astype(float)  # (u, v)
        self.shape = mask.shape

    def chamfer(self, pts_world: np.ndarray) -> float:
        uv = project_points(self.P, pts_world)
        rows, cols = self.shape
        u = np.clip(uv[:, 0], 0.0, cols - 1.0)
        v = np.clip(uv[:, 1], 0.0, rows - 1.0)
        # bilinear sample of the distance transform
        u0 = np.floor(u).astype(int)
        v0 = np.floor(v).astype(int)
        u1 = np.minimum(u0 + 1, cols - 1)
        v1 = np.minimum(v0 + 1, rows - 1)
        fu, fv = u - u0, v - v0
        d = (
            self.dist[v0, u0] * (1 - fu) * (1 - fv)
            + self.dist[v0, u1] * fu * (1 - fv)
            + self.dist[v1, u0] * (1 - fu) * fv
            + self.dist[v1, u1] * fu * fv
        )
        forward = d.mean()
        tree = cKDTree(uv)
        reverse = tree.query(self.lit_uv, k=1)[0].mean()
        return 0.5 * (forward + reverse)


def _golden_section(f, lo: float, hi: float, tol: float) -> tuple[float, float]:
    """Golden-section minimization of a 1-D function on [lo, hi]."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while (b - a) > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return (c, fc) if fc < fd else (d, fd)


def refine_pose(
    edge_points: np.ndarray,
    observed_maps,
    initial,
    pose_delta=(0.0, 0.0, 0.0, 0.0, 0.0, 0.0),
    angle_bound_deg: float = 5.0,
    shift_bound_mm: float = 10.0,
    sweeps: int = 3,
    grid_steps: int = 9,
    max_points: int = 4000,
    seed: int = 0,
) -> PoseRefinement:
    """Refine the object pose against two thresholded feature maps.

    Coordinate descent over (pitch, roll, yaw, dx, dy, dz): a coarse grid
    per axis followed by golden-section, minimizing the mean symmetric
    distance between the projected ``edge_points`` and the lit pixels of
    ``observed_maps`` in both views.  For tractability both point clouds
    are subsampled to ``max_points`` (seeded).

    Raises :class:`BoundsError` when the best perturbation lands on the
    search boundary.
    """
    pts = np.asarray(edge_points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
        raise ValueError("edge_points must be a nonempty (N, 3) array")
    rng = np.random.default_rng(seed)
    if len(pts) > max_points:
        pts = pts[rng.choice(len(pts), size=max_points, replace=False)]
    center = pts.mean(axis=0)

    views = []
    for obs, P in zip(observed_maps, initial):
        data = obs.data if hasattr(obs, "data") else obs
        views.append(_ViewObjective(data, np.asarray(P), max_points, rng))

    bounds = [angle_bound_deg] * 3 + [shift_bound_mm] * 3
    tols = [0.005] * 3 + [0.02] * 3
    delta = list(pose_delta)

    def objective(d):
        moved = apply_pose_delta(pts, d, center=center)
        return sum(v.chamfer(moved) for v in views) / len(views)

    best_val = objective(delta)
    for _ in range(sweeps):
        for axis in range(6):
            b = bounds[axis]

            def axis_f(x, axis=axis):
                trial = list(delta)
                trial[axis] = x
                return objective(trial)

            grid = np.linspace(-b, b, grid_steps)
            vals = [axis_f(g) for g in grid]
            i = int(np.argmin(vals))
            lo = grid[max(i - 1, 0)]
            hi = grid[min(i + 1, grid_steps - 1)]
            x, val = _golden_section(axis_f, lo, hi, tols[axis])
            if val < best_val:
                delta[axis] = float(x)
                best_val = val

    result = PoseRefinement(
        pitch_deg=delta[0],
        roll_deg=delta[1],
        yaw_deg=delta[2],
        shift_mm=(delta[3], delta[4], delta[5]),
        residual_px=float(best_val),
    )
    edge = [bounds[i] - 1.5 * (2 * bounds[i] / (grid_steps - 1)) for i in range(6)]
    if any(abs(delta[i]) > edge[i] for i in range(6)):
        raise BoundsError(
            "pose refinement reached its search bounds",
            best=result.delta,
            residual=result.residual_px,
        )
    return result
