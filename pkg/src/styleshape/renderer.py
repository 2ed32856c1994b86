"""Differentiable explicit rendering: shading and perspective reprojection.

Conventions (documented choices, applied consistently everywhere):

* Images are [C, H, W]; pixel (u, v) has u along width and v along height,
  so array element [c, v, u].  The canonical lattice spans u in [0, W-1],
  v in [0, H-1] with pixel centers at integer coordinates.
* The camera sits at the origin looking down +z; objects live near z = 1 m.
  Surface normals are sign-corrected to n_z > 0 and the light direction is
  (l_x, l_y, 1)/norm, so a frontal plane lit head-on gets full diffuse.
* Euler rotation order is R = R_x(w1) R_y(w2) R_z(w3); w4..w6 translate
  along x, y, z.  Fixed so checkpoints are portable.  The rotation pivots
  at the nominal object center (0, 0, 1 m), so a yaw turns the object in
  place instead of sweeping it across the narrow frustum.
* The canonical-to-actual warp is realized by forward rasterization of the
  depth-displaced pixel lattice (two triangles per cell) with a z-buffer,
  which also yields the warped depth map needed by the evaluation metrics.
  Triangle coverage is treated as locally constant for gradients; vertex
  positions, interpolated depths and sampling coordinates all carry
  gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

DEPTH_MIN = 0.9
DEPTH_MAX = 1.1
ROTATION_BOUND = math.pi / 3.0  # 60 degrees per axis
TRANSLATION_BOUND = 0.1  # meters per axis

# inclusive-edge tolerance for the inside-triangle test; keeps the identity
# warp (vertices exactly on pixel centers) fully covered under fp noise
_EDGE_TOL = 1e-9
_MIN_TRI_AREA = 1e-12
_MIN_VERTEX_Z = 1e-6


class RenderError(ValueError):
    """Geometrically invalid rendering input."""


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics with the principal point at the image center."""

    width: int
    height: int
    fov_degrees: float
    f: float
    c_u: float
    c_v: float

    def rays(self) -> np.ndarray:
        """K^-1 (u, v, 1) for every lattice pixel, shape [3, H, W]."""
        v, u = np.meshgrid(
            np.arange(self.height, dtype=np.float64),
            np.arange(self.width, dtype=np.float64),
            indexing="ij",
        )
        return np.stack(
            [(u - self.c_u) / self.f, (v - self.c_v) / self.f, np.ones_like(u)]
        )


def make_intrinsics(width: int, height: int, fov_degrees: float) -> CameraIntrinsics:
    if width < 2 or height < 2:
        raise RenderError(f"image size must be at least 2x2, got {width}x{height}")
    if not (0.0 < fov_degrees < 180.0):
        raise RenderError(f"field of view must be in (0, 180) degrees, got {fov_degrees}")
    f = (width - 1) / (2.0 * math.tan(math.radians(fov_degrees) / 2.0))
    return CameraIntrinsics(
        width=width,
        height=height,
        fov_degrees=fov_degrees,
        f=f,
        c_u=(width - 1) / 2.0,
        c_v=(height - 1) / 2.0,
    )


@dataclass
class Viewpoint:
    """Rigid transform from canonical to actual camera frame.

    w is a 6-vector Tensor: rotation angles (radians, about x/y/z) then
    translations (meters).  The network head keeps |angles| < 60 deg and
    |translations| < 0.1 m.
    """

    w: Tensor

    @classmethod
    def zero(cls) -> "Viewpoint":
        return cls(Tensor(np.zeros(6)))

    @classmethod
    def from_values(cls, values) -> "Viewpoint":
        arr = np.asarray(values, dtype=np.float64)
        if arr.shape != (6,):
            raise RenderError(f"viewpoint needs 6 values, got shape {arr.shape}")
        return cls(Tensor(arr))

    def angles(self) -> Tensor:
        return self.w[0:3]

    def translation(self) -> Tensor:
        return self.w[3:6]


@dataclass
class LightParams:
    """Ambient/diffuse weights in [0,1] and a +z-hemisphere direction."""

    k_s: Tensor
    k_d: Tensor
    l_x: Tensor
    l_y: Tensor

    @classmethod
    def from_values(cls, k_s, k_d, l_x, l_y) -> "LightParams":
        return cls(Tensor(k_s), Tensor(k_d), Tensor(l_x), Tensor(l_y))

    def direction(self) -> Tensor:
        """Unit light direction (l_x, l_y, 1)/norm; z component positive."""
        raw = T.stack_scalars([self.l_x, self.l_y, Tensor(1.0)])
        norm = T.sqrt(T.sum_(raw * raw))
        return raw / norm


@dataclass
class RenderFeatures:
    """The explicit rendering features predicted for one image."""

    albedo: Tensor  # [3,H,W] in [0,1]
    depth: Tensor  # [1,H,W] in [0.9,1.1]
    light: LightParams
    view: Viewpoint
    conf: Tensor  # [1,H,W] > 0
    conf_flip: Tensor  # [1,H,W] > 0
    conf_percep: Tensor  # [1,H/4,W/4] > 0
    conf_percep_flip: Tensor  # [1,H/4,W/4] > 0


# ---------------------------------------------------------------------------
# normals and shading
# ---------------------------------------------------------------------------


def _axis_diff(p: Tensor, axis: int) -> Tensor:
    """Central differences along an axis, one-sided at the two borders."""
    n = p.shape[axis]
    if n < 2:
        raise RenderError("need at least 2 samples to differentiate")

    def sl(a, b):
        key = [slice(None)] * p.ndim
        key[axis] = slice(a, b)
        return p[tuple(key)]

    first = sl(1, 2) - sl(0, 1)
    inner = (sl(2, n) - sl(0, n - 2)) * 0.5
    last = sl(n - 1, n) - sl(n - 2, n - 1)
    return T.concat([first, inner, last], axis=axis)


def _cross3(a: Tensor, b: Tensor) -> Tensor:
    """Cross product along the leading (xyz) axis of [3,...] tensors."""
    ax, ay, az = a[0:1], a[1:2], a[2:3]
    bx, by, bz = b[0:1], b[1:2], b[2:3]
    return T.concat([ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx], axis=0)


def compute_normals(depth: Tensor, K: CameraIntrinsics) -> Tensor:
    """Per-pixel unit surface normals from a depth map, [3,H,W].

    Each pixel is unprojected to P = d * K^-1 (u,v,1); tangents along u and
    v come from central differences of P (one-sided at the borders); the
    normal is the normalized cross product, sign-corrected to n_z > 0.
    Differentiable w.r.t. depth.
    """
    if depth.ndim != 3 or depth.shape[0] != 1:
        raise RenderError(f"depth must be [1,H,W], got {depth.shape}")
    if np.any(depth.data <= 0):
        raise RenderError("depth must be strictly positive")
    points = depth * Tensor(K.rays())  # [3,H,W]
    t_u = _axis_diff(points, axis=2)
    t_v = _axis_diff(points, axis=1)
    raw = _cross3(t_u, t_v)
    norm_sq = T.sum_(raw * raw, axis=0, keepdims=True)
    if np.any(norm_sq.data == 0.0):
        raise RenderError("degenerate tangents produced a zero-length normal")
    normals = raw / T.sqrt(norm_sq)
    z_sign = np.where(normals.data[2:3] >= 0.0, 1.0, -1.0)  # locally constant
    return normals * Tensor(z_sign)


def shade(albedo: Tensor, normals: Tensor, light: LightParams) -> Tensor:
    """Lambertian shading J = a * (k_s + k_d * max(0, <l, n>)) per channel."""
    direction = light.direction().reshape((3, 1, 1))
    lambert = T.sum_(normals * direction, axis=0, keepdims=True)
    return albedo * (light.k_s + light.k_d * T.relu(lambert))


# ---------------------------------------------------------------------------
# pose
# ---------------------------------------------------------------------------


def euler_rotation(angles: Tensor) -> Tensor:
    """R = R_x(a1) R_y(a2) R_z(a3), a 3x3 rotation built from scalar ops."""
    if angles.shape != (3,):
        raise RenderError(f"expected 3 angles, got shape {angles.shape}")
    one, zero = Tensor(1.0), Tensor(0.0)
    ax, ay, az = angles[0:1].reshape(()), angles[1:2].reshape(()), angles[2:3].reshape(())

    def rot(c, s, axis):
        rows = {
            0: [one, zero, zero, zero, c, -s, zero, s, c],
            1: [c, zero, s, zero, one, zero, -s, zero, c],
            2: [c, -s, zero, s, c, zero, zero, zero, one],
        }[axis]
        return T.stack_scalars(rows).reshape((3, 3))

    rx = rot(T.cos(ax), T.sin(ax), 0)
    ry = rot(T.cos(ay), T.sin(ay), 1)
    rz = rot(T.cos(az), T.sin(az), 2)
    return T.matmul(T.matmul(rx, ry), rz)


# ---------------------------------------------------------------------------
# rasterizing reprojection
# ---------------------------------------------------------------------------


def _lattice_triangles(h: int, w: int) -> np.ndarray:
    """Vertex index triples for the 2*(H-1)*(W-1) lattice triangles."""
    r, c = np.meshgrid(np.arange(h - 1), np.arange(w - 1), indexing="ij")
    v00 = (r * w + c).ravel()
    v01 = v00 + 1
    v10 = v00 + w
    v11 = v10 + 1
    upper = np.stack([v00, v01, v10], axis=1)
    lower = np.stack([v11, v10, v01], axis=1)
    # interleave so triangle 2*cell and 2*cell+1 share a cell
    tris = np.empty((2 * len(v00), 3), dtype=np.int64)
    tris[0::2] = upper
    tris[1::2] = lower
    return tris


def _rasterize_coverage(xs, ys, zs, tris, h, w):
    """Z-buffered coverage of the projected lattice (value pass, no grads).

    Returns flat pixel indices of covered pixels and, aligned with them,
    the covering triangle's id.  Ties at equal depth go to the lower
    triangle index.
    """
    ax, ay = xs[tris[:, 0]], ys[tris[:, 0]]
    bx, by = xs[tris[:, 1]], ys[tris[:, 1]]
    cx, cy = xs[tris[:, 2]], ys[tris[:, 2]]
    denom = (by - cy) * (ax - cx) + (cx - bx) * (ay - cy)
    z_ok = (
        (zs[tris[:, 0]] > _MIN_VERTEX_Z)
        & (zs[tris[:, 1]] > _MIN_VERTEX_Z)
        & (zs[tris[:, 2]] > _MIN_VERTEX_Z)
    )
    valid = (np.abs(denom) > _MIN_TRI_AREA) & z_ok

    x_lo = np.maximum(np.ceil(np.minimum(np.minimum(ax, bx), cx) - _EDGE_TOL), 0)
    x_hi = np.minimum(np.floor(np.maximum(np.maximum(ax, bx), cx) + _EDGE_TOL), w - 1)
    y_lo = np.maximum(np.ceil(np.minimum(np.minimum(ay, by), cy) - _EDGE_TOL), 0)
    y_hi = np.minimum(np.floor(np.maximum(np.maximum(ay, by), cy) + _EDGE_TOL), h - 1)
    bw = (x_hi - x_lo + 1).astype(np.int64)
    bh = (y_hi - y_lo + 1).astype(np.int64)
    counts = np.where(valid, np.maximum(bw, 0) * np.maximum(bh, 0), 0)
    total = int(counts.sum())
    if total == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)

    tri_id = np.repeat(np.arange(len(tris)), counts)
    offsets = np.concatenate(([0], np.cumsum(counts)[:-1]))
    rank = np.arange(total) - offsets[tri_id]
    px = x_lo[tri_id].astype(np.int64) + rank % bw[tri_id]
    py = y_lo[tri_id].astype(np.int64) + rank // bw[tri_id]

    d = denom[tri_id]
    wa = ((by - cy)[tri_id] * (px - cx[tri_id]) + (cx - bx)[tri_id] * (py - cy[tri_id])) / d
    wb = ((cy - ay)[tri_id] * (px - ax[tri_id]) + (ax - cx)[tri_id] * (py - ay[tri_id])) / d
    wc = 1.0 - wa - wb
    inside = (wa >= -_EDGE_TOL) & (wb >= -_EDGE_TOL) & (wc >= -_EDGE_TOL)
    if not inside.any():
        return np.empty(0, np.int64), np.empty(0, np.int64)

    tri_id = tri_id[inside]
    pix = (py[inside] * w + px[inside]).astype(np.int64)
    z = (
        wa[inside] * zs[tris[tri_id, 0]]
        + wb[inside] * zs[tris[tri_id, 1]]
        + wc[inside] * zs[tris[tri_id, 2]]
    )
    order = np.lexsort((tri_id, z, pix))
    pix_sorted = pix[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    return pix_sorted[first], tri_id[order][first]


def _interpolate_coverage(xs: Tensor, ys: Tensor, zs: Tensor, tris, tri_of_pix, pix, w):
    """Barycentric source coordinates and depth for the covered pixels.

    One fused differentiable op: output [P,3] columns are (u_src, v_src,
    z).  Gradients flow to the projected vertex arrays through both the
    barycentric weights and the interpolated depth; the pixel-to-triangle
    assignment itself is the frozen coverage decision.
    """
    ia, ib, ic = tris[tri_of_pix, 0], tris[tri_of_pix, 1], tris[tri_of_pix, 2]
    px = (pix % w).astype(np.float64)
    py = (pix // w).astype(np.float64)
    ua, ub, uc = (ia % w).astype(np.float64), (ib % w).astype(np.float64), (ic % w).astype(np.float64)
    va, vb, vc = (ia // w).astype(np.float64), (ib // w).astype(np.float64), (ic // w).astype(np.float64)
    n = xs.shape[0]

    xsd, ysd, zsd = xs.data, ys.data, zs.data
    xa, xb, xc = xsd[ia], xsd[ib], xsd[ic]
    ya, yb, yc = ysd[ia], ysd[ib], ysd[ic]
    za, zb, zc = zsd[ia], zsd[ib], zsd[ic]

    exa, eya = xa - xc, ya - yc
    exb, eyb = xb - xc, yb - yc
    epx, epy = px - xc, py - yc
    denom = eyb * exa - exb * eya
    wa = (eyb * epx - exb * epy) / denom
    wb = (exa * epy - eya * epx) / denom
    wc = 1.0 - wa - wb
    out = np.stack(
        [wa * ua + wb * ub + wc * uc, wa * va + wb * vb + wc * vc,
         wa * za + wb * zb + wc * zc], axis=1
    )

    def vjp(g):
        gu, gv, gz = g[:, 0], g[:, 1], g[:, 2]
        gwa = gu * ua + gv * va + gz * za
        gwb = gu * ub + gv * vb + gz * zb
        gwc = gu * uc + gv * vc + gz * zc
        gza, gzb, gzc = gz * wa, gz * wb, gz * wc
        # wc = 1 - wa - wb
        gwa = gwa - gwc
        gwb = gwb - gwc
        g_na = gwa / denom
        g_nb = gwb / denom
        g_d = -(gwa * wa + gwb * wb) / denom
        # Na = eyb*epx - exb*epy ; Nb = exa*epy - eya*epx ; D = eyb*exa - exb*eya
        geyb = g_na * epx + g_d * exa
        gexb = -g_na * epy - g_d * eya
        gepx = g_na * eyb - g_nb * eya
        gepy = g_nb * exa - g_na * exb
        gexa = g_nb * epy + g_d * eyb
        geya = -g_nb * epx - g_d * exb
        gxa, gya = gexa, geya
        gxb, gyb = gexb, geyb
        gxc = -gexa - gexb - gepx
        gyc = -geya - geyb - gepy
        gxs = (np.bincount(ia, gxa, minlength=n) + np.bincount(ib, gxb, minlength=n)
               + np.bincount(ic, gxc, minlength=n))
        gys = (np.bincount(ia, gya, minlength=n) + np.bincount(ib, gyb, minlength=n)
               + np.bincount(ic, gyc, minlength=n))
        gzs = (np.bincount(ia, gza, minlength=n) + np.bincount(ib, gzb, minlength=n)
               + np.bincount(ic, gzc, minlength=n))
        return gxs, gys, gzs

    return T.custom_op("interpolate_coverage", out, (xs, ys, zs), vjp)


def reproject(
    canonical: Tensor,
    depth: Tensor,
    view: Viewpoint,
    K: CameraIntrinsics,
    fill_depth: float = 1.0,
    return_coverage: bool = False,
):
    """Warp a canonical image and depth into the actual view.

    Every lattice pixel is lifted to 3D by its depth, rigidly moved by the
    viewpoint, projected, and the resulting triangle mesh is rasterized
    with a z-buffer.  Covered output pixels bilinearly sample `canonical`
    at the barycentrically interpolated source coordinates.

    Returns (image [3,H,W], warped depth [1,H,W], mask [1,H,W] in {0,1});
    uncovered image pixels are 0 and uncovered depths are `fill_depth`.
    With `return_coverage`, also returns the covering triangle id per pixel
    (-1 where uncovered), useful for excluding coverage-edge pixels from
    finite-difference probes.
    """
    h, w = K.height, K.width
    if canonical.shape[-2:] != (h, w) or depth.shape != (1, h, w):
        raise RenderError(
            f"reproject shape mismatch: canonical {canonical.shape}, depth {depth.shape}"
        )
    n = h * w
    rays = Tensor(K.rays().reshape(3, n))
    points = depth.reshape((1, n)) * rays  # [3,n]
    rot = euler_rotation(view.angles())
    # rotation pivots at the nominal object center (0, 0, 1 m); a pure
    # camera-origin rotation would sweep the object out of a 10-degree
    # frustum within a couple of degrees, which the +/-60 degree pose
    # bound clearly does not intend
    center = Tensor(np.array([0.0, 0.0, 1.0]).reshape(3, 1))
    moved = T.matmul(rot, points - center) + center + view.translation().reshape((3, 1))
    z = moved[2:3, :]
    if np.max(z.data) <= 0.0:
        raise RenderError("all points behind camera")
    xs = moved[0:1, :] / z * K.f + Tensor(K.c_u)
    ys = moved[1:2, :] / z * K.f + Tensor(K.c_v)

    tris = _lattice_triangles(h, w)
    pix, tri_of_pix = _rasterize_coverage(
        xs.data[0], ys.data[0], z.data[0], tris, h, w
    )

    mask_flat = np.zeros(n, dtype=np.float64)
    mask_flat[pix] = 1.0
    mask = Tensor(mask_flat.reshape(1, h, w))

    if len(pix) == 0:
        image = Tensor(np.zeros((canonical.shape[0], h, w)))
        warped = Tensor(np.full((1, h, w), fill_depth))
        out = (image, warped, mask)
        return out + ((-np.ones((h, w), np.int64)),) if return_coverage else out

    xs1, ys1, zs1 = xs.reshape((n,)), ys.reshape((n,)), z.reshape((n,))
    interp = _interpolate_coverage(xs1, ys1, zs1, tris, tri_of_pix, pix, w)
    p = len(pix)
    grid = interp[:, 0:2]
    sampled = T.grid_sample_bilinear(canonical, grid)  # [C,p]
    image = T.scatter_cols(sampled, pix, n).reshape((canonical.shape[0], h, w))
    warped = T.scatter_cols(interp[:, 2:3].reshape((1, p)), pix, n).reshape((1, h, w))
    warped = warped + Tensor((1.0 - mask_flat).reshape(1, h, w) * fill_depth)

    if return_coverage:
        cover = -np.ones(n, dtype=np.int64)
        cover[pix] = tri_of_pix
        return image, warped, mask, cover.reshape(h, w)
    return image, warped, mask
