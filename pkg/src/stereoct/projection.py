"""X-ray measurement simulation: cone-beam line integrals and the
intensity-to-attenuation conversion.

Volume arrays are indexed ``data[ix, iy, iz]``; the world position of voxel
(i, j, k) centre is ``origin + voxel_pitch * (i, j, k)``.  Projection arrays
are indexed ``data[row, col]`` with (u, v) = (col, row).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError
from .geometry import ConeBeamGeometry, projection_matrix_from_geometry, project_points

PROJECTION_KINDS = ("intensity", "attenuation", "probability")


@dataclass
class Volume:
    """3D scalar grid with voxel pitch (mm) and world origin (mm)."""

    data: np.ndarray
    voxel_pitch: float
    origin: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError("volume data must be a nonempty 3D array")
        if self.voxel_pitch <= 0:
            raise ValueError(f"voxel_pitch must be positive, got {self.voxel_pitch}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume values must be finite")
        self.origin = np.asarray(self.origin, dtype=float).reshape(3)

    @classmethod
    def centered(cls, data: np.ndarray, voxel_pitch: float) -> "Volume":
        """Volume whose grid is centred on the world origin."""
        data = np.asarray(data, dtype=float)
        n = np.array(data.shape)
        origin = -voxel_pitch * (n - 1) / 2.0
        return cls(data=data, voxel_pitch=voxel_pitch, origin=origin)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def index_to_mm(self, idx: np.ndarray) -> np.ndarray:
        return self.origin + self.voxel_pitch * np.asarray(idx, dtype=float)

    def mm_to_index(self, mm: np.ndarray) -> np.ndarray:
        return (np.asarray(mm, dtype=float) - self.origin) / self.voxel_pitch

    def like(self, data: np.ndarray) -> "Volume":
        return Volume(data=data, voxel_pitch=self.voxel_pitch, origin=self.origin.copy())


@dataclass
class Projection:
    """2D detector grid with pixel pitch (mm).

    ``kind`` is one of intensity (raw counts, positive), attenuation (line
    integrals) or probability (feature map in [0, 1]).
    """

    data: np.ndarray
    pixel_pitch: float
    kind: str = "attenuation"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 2 or min(self.data.shape) < 1:
            raise ValueError("projection data must be a nonempty 2D array")
        if self.pixel_pitch <= 0:
            raise ValueError(f"pixel_pitch must be positive, got {self.pixel_pitch}")
        if self.kind not in PROJECTION_KINDS:
            raise ValueError(f"unknown projection kind {self.kind!r}")
        if self.kind == "probability":
            if self.data.min() < -1e-9 or self.data.max() > 1 + 1e-9:
                raise ValueError("probability maps must lie in [0, 1]")
        if self.kind == "intensity" and self.data.min() <= 0:
            raise ValueError("intensity images must be strictly positive")

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def like(self, data: np.ndarray, kind: str | None = None) -> "Projection":
        return Projection(data=data, pixel_pitch=self.pixel_pitch, kind=kind or self.kind)


# detect2d's per-pixel probability map is a probability-kind Projection
FeatureMap2D = Projection


def detector_pixel_positions(
    geom: ConeBeamGeometry, rows: np.ndarray, cols: np.ndarray
) -> np.ndarray:
    """World positions (mm) of detector pixel centres for (row, col) arrays."""
    S = geom.source_position()
    R = geom.camera_rotation()
    K = geom.intrinsics()
    u_mm = (np.asarray(cols, dtype=float) - K.principal_u) * geom.pixel_pitch
    v_mm = (np.asarray(rows, dtype=float) - K.principal_v) * geom.pixel_pitch
    return (
        S
        + geom.sdd * R[2]
        + u_mm[..., None] * R[0]
        + v_mm[..., None] * R[1]
    )


def _joseph_integrals(
    data: np.ndarray, pitch: float, origin: np.ndarray, src: np.ndarray, dst: np.ndarray
) -> np.ndarray:
    """Line integrals from a common source to per-ray destinations.

    Joseph's method: unit steps of one voxel pitch along each ray's dominant
    axis, bilinear interpolation in the transverse plane.
    """
    ps = (src - origin) / pitch
    pd = (dst - src) / pitch  # direction in index units, t in [0, 1]
    seg_full = np.linalg.norm(dst - src, axis=1)
    out = np.zeros(len(dst))
    dominant = np.argmax(np.abs(pd), axis=1)

    for axis in range(3):
        sel = np.flatnonzero(dominant == axis)
        if len(sel) == 0:
            continue
        b_axis, c_axis = [a for a in range(3) if a != axis]
        plane = np.ascontiguousarray(np.moveaxis(data, axis, 0))
        n_a, n_b, n_c = plane.shape
        da = pd[sel, axis]
        db = pd[sel, b_axis]
        dc = pd[sel, c_axis]
        seg = seg_full[sel] / np.abs(da)  # mm of ray per plane step
        acc = np.zeros(len(sel))
        for k in range(n_a):
            t = (k - ps[axis]) / da
            pb = ps[b_axis] + t * db
            pc = ps[c_axis] + t * dc
            valid = (t > 0.0) & (t < 1.0) & (pb >= 0.0) & (pb <= n_b - 1) & (pc >= 0.0) & (pc <= n_c - 1)
            if not valid.any():
                continue
            b0 = np.clip(np.floor(pb).astype(np.intp), 0, n_b - 2)
            c0 = np.clip(np.floor(pc).astype(np.intp), 0, n_c - 2)
            fb = pb - b0
            fc = pc - c0
            flat = plane[k].ravel()
            base = b0 * n_c + c0
            val = (
                flat[base] * (1 - fb) * (1 - fc)
                + flat[base + 1] * (1 - fb) * fc
                + flat[base + n_c] * fb * (1 - fc)
                + flat[base + n_c + 1] * fb * fc
            )
            acc += np.where(valid, val, 0.0)
        out[sel] = acc * seg
    return out


def _checked_rotation(object_rotation) -> np.ndarray:
    if object_rotation is None:
        return np.eye(3)
    R = np.asarray(object_rotation, dtype=float)
    if R.shape != (3, 3) or not np.allclose(R.T @ R, np.eye(3), atol=1e-9):
        raise ValueError("object_rotation must be a 3x3 rotation matrix")
    return R


def forward_project(
    vol: Volume,
    geom: ConeBeamGeometry,
    object_rotation=None,
    supersample: int = 1,
) -> Projection:
    """Cone-beam line integrals of an attenuation volume.

    ``object_rotation`` rotates the object about the world origin before
    projection (implemented by counter-rotating source and detector, no
    resampling).  ``supersample`` averages s x s sub-rays per pixel.
    """
    Robj = _checked_rotation(object_rotation)
    S = Robj.T @ geom.source_position()

    lo = vol.origin - vol.voxel_pitch / 2.0
    hi = vol.origin + vol.voxel_pitch * (np.array(vol.shape) - 0.5)
    if np.all(S >= lo) and np.all(S <= hi):
        raise GeometryError("source position lies inside the volume grid")

    rows, cols = np.meshgrid(
        np.arange(geom.detector_rows), np.arange(geom.detector_cols), indexing="ij"
    )
    acc = np.zeros(rows.size)
    offsets = (np.arange(supersample) + 0.5) / supersample - 0.5
    for dr in offsets:
        for dc in offsets:
            D = detector_pixel_positions(geom, rows.ravel() + dr, cols.ravel() + dc)
            D = D @ Robj  # rotate detector into the object frame
            acc += _joseph_integrals(vol.data, vol.voxel_pitch, vol.origin, S, D)
    acc /= supersample * supersample
    return Projection(
        data=acc.reshape(geom.detector_rows, geom.detector_cols),
        pixel_pitch=geom.pixel_pitch,
        kind="attenuation",
    )


def intensity_to_attenuation(img: Projection, i0) -> Projection:
    """Beer-Lambert inversion: attenuation = ln(i0 / I), clamped below at 0
    where I exceeds the flat field."""
    if img.kind != "intensity":
        raise ValueError(f"expected an intensity projection, got kind={img.kind!r}")
    I = img.data
    bad = np.argwhere(I <= 0)
    if len(bad):
        raise ValueError(f"nonpositive intensity at pixel {tuple(bad[0])}")
    if isinstance(i0, Projection):
        flat = i0.data
    else:
        flat = np.asarray(i0, dtype=float)
    if np.any(flat <= 0):
        raise ValueError("flat field i0 must be strictly positive")
    att = np.log(flat / I)
    return img.like(np.maximum(att, 0.0), kind="attenuation")


def _points_from_feature_input(points) -> np.ndarray:
    if isinstance(points, Volume):
        idx = np.argwhere(points.data > 0)
        return points.index_to_mm(idx)
    if hasattr(points, "positions_mm"):
        return np.asarray(points.positions_mm, dtype=float)
    return np.asarray(points, dtype=float).reshape(-1, 3)


def render_edge_projection(
    points,
    geom: ConeBeamGeometry,
    object_rotation=None,
) -> Projection:
    """Binary projection of 3D feature points (or a binary feature volume).

    Each point is splatted with its bilinear footprint; any pixel receiving
    positive weight is lit.
    """
    pts = _points_from_feature_input(points)
    if len(pts) == 0:
        raise ValueError("feature set is empty")
    Robj = _checked_rotation(object_rotation)
    P = projection_matrix_from_geometry(geom)
    uv = project_points(P, pts @ Robj.T)
    rows, cols = geom.detector_rows, geom.detector_cols
    acc = np.zeros((rows, cols))
    u0 = np.floor(uv[:, 0]).astype(np.intp)
    v0 = np.floor(uv[:, 1]).astype(np.intp)
    fu = uv[:, 0] - u0
    fv = uv[:, 1] - v0
    for dv, du, w in (
        (0, 0, (1 - fu) * (1 - fv)),
        (0, 1, fu * (1 - fv)),
        (1, 0, (1 - fu) * fv),
        (1, 1, fu * fv),
    ):
        vv, uu = v0 + dv, u0 + du
        ok = (vv >= 0) & (vv < rows) & (uu >= 0) & (uu < cols) & (w > 0)
        np.add.at(acc, (vv[ok], uu[ok]), w[ok])
    return Projection(
        data=(acc > 0).astype(float), pixel_pitch=geom.pixel_pitch, kind="probability"
    )
