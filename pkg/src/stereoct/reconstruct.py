"""Filtered back-projection operators for the two-view feature mapper.

The two-view sum B_L + B_R is a feature-coincidence map, not a quantitative
reconstruction; a full circular sweep through :func:`fdk_reconstruct` is
quantitative (used by the self-consistency tests).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GeometryError
from .geometry import ConeBeamGeometry, projection_matrix_from_geometry
from .projection import Projection, Volume, detector_pixel_positions

RAMP_WINDOWS = ("ramlak", "hann")


@dataclass(frozen=True)
class VolumeSpec:
    """Grid specification for a reconstruction target."""

    shape: tuple[int, int, int]
    voxel_pitch: float
    origin: np.ndarray | None = None

    def empty(self) -> Volume:
        data = np.zeros(self.shape)
        if self.origin is None:
            return Volume.centered(data, self.voxel_pitch)
        return Volume(data=data, voxel_pitch=self.voxel_pitch, origin=self.origin)


def _target_volume(target) -> Volume:
    if isinstance(target, VolumeSpec):
        return target.empty()
    if isinstance(target, Volume):
        return target.like(np.zeros(target.shape))
    raise TypeError("target must be a Volume or VolumeSpec")


def ramp_kernel(length: int, pixel_pitch: float) -> np.ndarray:
    """Band-limited Ram-Lak kernel sampled at offsets -length/2 < n <= length/2,
    stored in FFT layout (index 0 = zero offset)."""
    tau = pixel_pitch
    n = np.fft.fftfreq(length, d=1.0 / length)  # 0, 1, ..., -1 offsets
    h = np.zeros(length)
    h[0] = 1.0 / (4.0 * tau * tau)
    odd = (np.abs(n) % 2) == 1
    h[odd] = -1.0 / (np.pi * n[odd] * tau) ** 2
    return h


def ramp_filter(proj: Projection, window: str = "ramlak") -> Projection:
    """Row-wise ramp filtering via zero-padded FFT convolution.

    Each detector row is convolved with the discrete Ram-Lak kernel
    (h[0] = 1/(4 tau^2), h[odd n] = -1/(n pi tau)^2, tau = pixel pitch),
    optionally Hann-apodized.
    """
    if proj.kind not in ("attenuation", "probability"):
        raise ValueError(f"cannot ramp-filter a {proj.kind!r} projection")
    if window not in RAMP_WINDOWS:
        raise ValueError(f"unknown window {window!r}; expected one of {RAMP_WINDOWS}")
    rows, cols = proj.shape
    length = 1 << int(np.ceil(np.log2(max(2 * cols, 4))))
    h = ramp_kernel(length, proj.pixel_pitch)
    H = np.fft.rfft(h)
    if window == "hann":
        f = np.fft.rfftfreq(length, d=proj.pixel_pitch)
        nyquist = 0.5 / proj.pixel_pitch
        H = H * (0.5 + 0.5 * np.cos(np.pi * f / nyquist))
    padded = np.zeros((rows, length))
    padded[:, :cols] = proj.data
    filtered = np.fft.irfft(np.fft.rfft(padded, axis=1) * H, n=length, axis=1)
    return proj.like(filtered[:, :cols], kind=proj.kind)


def weight_cosine(proj: Projection, geom: ConeBeamGeometry) -> Projection:
    """FDK cosine pre-weighting: sdd / sqrt(sdd^2 + u^2 + v^2) per pixel."""
    K = geom.intrinsics()
    u = (np.arange(geom.detector_cols) - K.principal_u) * geom.pixel_pitch
    v = (np.arange(geom.detector_rows) - K.principal_v) * geom.pixel_pitch
    w = geom.sdd / np.sqrt(geom.sdd**2 + u[None, :] ** 2 + v[:, None] ** 2)
    return proj.like(proj.data * w)


def fdk_backproject(
    proj: Projection,
    geom: ConeBeamGeometry,
    target,
    angular_weight_rad: float | None = None,
) -> Volume:
    """Voxel-driven cone-beam backprojection of one (already weighted and
    filtered) projection.

    Each voxel centre is projected onto the detector and the bilinear sample
    is accumulated with the FDK distance weight (sod/(sod - s))^2, where s
    is the voxel's signed distance from the rotation axis along the source
    direction.  With ``angular_weight_rad`` set, the quantitative FDK view
    scale (d_beta / 2) * pixel_pitch * sdd/sod is applied, so summing over a
    full sweep reconstructs attenuation units.
    """
    vol = _target_volume(target)
    nx, ny, nz = vol.shape
    S = geom.source_position()
    s_hat = S / np.linalg.norm(S)

    corners = vol.origin[None, :] + vol.voxel_pitch * (
        np.array(np.meshgrid([0, nx - 1], [0, ny - 1], [0, nz - 1])).reshape(3, -1).T
    )
    if np.max(corners @ s_hat) >= geom.sod:
        raise GeometryError("voxel grid extends behind the source")

    P = projection_matrix_from_geometry(geom).entries
    ii, jj, kk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    pts = vol.origin[None, :] + vol.voxel_pitch * np.column_stack(
        [ii.ravel(), jj.ravel(), kk.ravel()]
    )
    h = P[:, :3] @ pts.T + P[:, 3:4]
    u = h[0] / h[2]
    v = h[1] / h[2]

    rows, cols = proj.shape
    valid = (u >= 0) & (u <= cols - 1) & (v >= 0) & (v <= rows - 1)
    u0 = np.clip(np.floor(u).astype(np.intp), 0, cols - 2)
    v0 = np.clip(np.floor(v).astype(np.intp), 0, rows - 2)
    fu = np.clip(u - u0, 0.0, 1.0)
    fv = np.clip(v - v0, 0.0, 1.0)
    flat = proj.data.ravel()
    base = v0 * cols + u0
    sample = (
        flat[base] * (1 - fu) * (1 - fv)
        + flat[base + 1] * fu * (1 - fv)
        + flat[base + cols] * (1 - fu) * fv
        + flat[base + cols + 1] * fu * fv
    )
    s = pts @ s_hat
    weight = (geom.sod / (geom.sod - s)) ** 2
    scale = 1.0
    if angular_weight_rad is not None:
        scale = (angular_weight_rad / 2.0) * proj.pixel_pitch * geom.sdd / geom.sod
    vol.data = (np.where(valid, sample * weight, 0.0) * scale).reshape(nx, ny, nz)
    return vol


def feature_backprojection(
    feature_map: Projection,
    geom: ConeBeamGeometry,
    target,
    window: str = "ramlak",
    filtered: bool = True,
) -> Volume:
    """Single-view filtered back-projection of a feature map (cosine weight,
    ramp filter, FDK backprojection), clamped to nonnegative evidence."""
    weighted = weight_cosine(feature_map, geom)
    if filtered:
        weighted = ramp_filter(weighted, window=window)
    bp = fdk_backproject(weighted, geom, target)
    bp.data = np.maximum(bp.data, 0.0)
    return bp


def stereo_backproject(
    mapL: Projection,
    mapR: Projection,
    geomL: ConeBeamGeometry,
    geomR: ConeBeamGeometry,
    target,
    window: str = "ramlak",
    filtered: bool = True,
) -> Volume:
    """Two-view sum of filtered back-projections, clamped below at 0."""
    for m in (mapL, mapR):
        if m.kind != "probability":
            raise ValueError("stereo_backproject expects probability feature maps")

    def one(m, g):
        w = weight_cosine(m, g)
        if filtered:
            w = ramp_filter(w, window=window)
        return fdk_backproject(w, g, target)

    out = one(mapL, geomL)
    out.data = out.data + one(mapR, geomR).data
    out.data = np.maximum(out.data, 0.0)
    return out


def fdk_reconstruct(
    projections,
    geometries,
    target,
    window: str = "ramlak",
) -> Volume:
    """Quantitative FDK over a set of views: cosine weighting, ramp filter,
    angular-weighted backprojection sum."""
    projections = list(projections)
    geometries = list(geometries)
    if len(projections) != len(geometries) or not projections:
        raise ValueError("need one geometry per projection")
    dbeta = 2.0 * np.pi / len(projections)
    out = _target_volume(target)
    for proj, geom in zip(projections, geometries):
        q = ramp_filter(weight_cosine(proj, geom), window=window)
        out.data += fdk_backproject(q, geom, out, angular_weight_rad=dbeta).data
    return out


def backproject_adjoint(proj: Projection, geom: ConeBeamGeometry, target) -> Volume:
    """Exact transpose of :func:`stereoct.projection.forward_project` on the
    target grid (Joseph interpolation scattered instead of gathered).

    Internal: exists so the projector pair can be checked with the
    inner-product identity <A v, p> = <v, A' p>.
    """
    vol = _target_volume(target)
    data = vol.data
    pitch = vol.voxel_pitch
    rows_n, cols_n = proj.shape
    rows, cols = np.meshgrid(np.arange(rows_n), np.arange(cols_n), indexing="ij")
    D = detector_pixel_positions(geom, rows.ravel(), cols.ravel())
    S = geom.source_position()
    values = proj.data.ravel()

    ps = (S - vol.origin) / pitch
    pd = (D - S) / pitch
    seg_full = np.linalg.norm(D - S, axis=1)
    dominant = np.argmax(np.abs(pd), axis=1)

    for axis in range(3):
        sel = np.flatnonzero(dominant == axis)
        if len(sel) == 0:
            continue
        b_axis, c_axis = [a for a in range(3) if a != axis]
        plane = np.moveaxis(data, axis, 0)  # view; scatter goes into data
        n_a, n_b, n_c = plane.shape
        da = pd[sel, axis]
        db = pd[sel, b_axis]
        dc = pd[sel, c_axis]
        seg = seg_full[sel] / np.abs(da)
        contrib = values[sel] * seg
        for k in range(n_a):
            t = (k - ps[axis]) / da
            pb = ps[b_axis] + t * db
            pc = ps[c_axis] + t * dc
            valid = (
                (t > 0.0) & (t < 1.0)
                & (pb >= 0.0) & (pb <= n_b - 1)
                & (pc >= 0.0) & (pc <= n_c - 1)
            )
            if not valid.any():
                continue
            b0 = np.clip(np.floor(pb[valid]).astype(np.intp), 0, n_b - 2)
            c0 = np.clip(np.floor(pc[valid]).astype(np.intp), 0, n_c - 2)
            fb = pb[valid] - b0
            fc = pc[valid] - c0
            val = contrib[valid]
            sl = plane[k]
            np.add.at(sl, (b0, c0), val * (1 - fb) * (1 - fc))
            np.add.at(sl, (b0, c0 + 1), val * (1 - fb) * fc)
            np.add.at(sl, (b0 + 1, c0), val * fb * (1 - fc))
            np.add.at(sl, (b0 + 1, c0 + 1), val * fb * fc)
    return vol
