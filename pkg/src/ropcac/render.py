"""Differentiable point splatting: view transform, projection, z-buffer
rasterization, and front-to-back alpha compositing.

Geometry is fixed per scene, so the only gradient path is image -> point
colors, which is exactly linear once the fragment buffer is built.  The
fragment buffer is therefore computed once (cacheable across training steps)
and compositing reduces to a sparse matrix apply with per-fragment
coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Node, value_of

CULL_EPS = 1e-9
DEGENERATE_UP_EPS = 1e-9


@dataclass
class CameraParams:
    """Pinhole camera; R, T map world to view space, camera looking down +Z."""

    R: np.ndarray
    T: np.ndarray
    fov: float  # vertical field of view, radians
    near: float
    far: float
    ap: float
    width: int
    height: int

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.T = np.asarray(self.T, dtype=np.float64).reshape(3)
        if not np.allclose(self.R @ self.R.T, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation is not orthonormal")
        if not 0.0 < self.near < self.far:
            raise ValueError(f"need 0 < near < far, got near={self.near} far={self.far}")
        if not 0.0 < self.fov < np.pi:
            raise ValueError(f"fov must lie in (0, pi), got {self.fov}")
        if self.width < 1 or self.height < 1 or self.ap <= 0:
            raise ValueError("bad viewport")


@dataclass
class RasterSettings:
    """Splat radius (NDC units), fragment cap per pixel, background color."""

    radius: float
    k: int = 10
    background: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)
        if self.radius <= 0:
            raise ValueError("splat radius must be positive")
        if self.k < 1:
            raise ValueError("need at least one fragment per pixel")


@dataclass
class FragmentBuffer:
    """Per-pixel fragment lists in CSR layout, closest fragment first.

    start has length height*width + 1; fragments for flat pixel p occupy
    rows[start[p]:start[p+1]], sorted by (depth, point row).  d is the NDC
    distance from splat center to pixel center.
    """

    width: int
    height: int
    start: np.ndarray
    rows: np.ndarray
    d: np.ndarray
    depth: np.ndarray

    @property
    def n_fragments(self) -> int:
        return self.rows.shape[0]

    def pixel_of_fragment(self) -> np.ndarray:
        counts = np.diff(self.start)
        return np.repeat(np.arange(self.width * self.height), counts)


def look_at(distance: float, elevation: float, azimuth: float):
    """Rotation and translation for a camera on the sphere about the origin.

    Angles in degrees.  Azimuth rotates about world +Y measured from +Z;
    elevation lifts from the XZ-plane.  The camera looks at the origin with
    +Y up (up is taken along +Z when the camera sits on the Y axis).  In view
    space the origin lands at (0, 0, distance).
    """
    if distance <= 0:
        raise ValueError("camera distance must be positive")
    e = np.deg2rad(elevation)
    a = np.deg2rad(azimuth)
    pos = distance * np.array(
        [np.cos(e) * np.sin(a), np.sin(e), np.cos(e) * np.cos(a)]
    )
    z_axis = -pos / np.linalg.norm(pos)
    up = np.array([0.0, 1.0, 0.0])
    x_axis = np.cross(up, z_axis)
    if np.linalg.norm(x_axis) < DEGENERATE_UP_EPS:
        up = np.array([0.0, 0.0, 1.0])
        x_axis = np.cross(up, z_axis)
    x_axis = x_axis / np.linalg.norm(x_axis)
    y_axis = np.cross(z_axis, x_axis)
    R = np.stack([x_axis, y_axis, z_axis])
    T = -R @ pos
    return R, T


def make_camera(
    distance: float,
    elevation: float,
    azimuth: float,
    fov_deg: float = 60.0,
    width: int = 1024,
    height: int = 1024,
    near: float | None = None,
    far: float | None = None,
) -> CameraParams:
    """Camera from orbit coordinates with the default frustum fit."""
    R, T = look_at(distance, elevation, azimuth)
    if near is None:
        near = 0.1 * distance
    if far is None:
        far = 4.0 * distance
    ap = width / height
    return CameraParams(R, T, np.deg2rad(fov_deg), near, far, ap, width, height)


def default_settings(width: int, height: int, background=(1.0, 1.0, 1.0), k: int = 10):
    """Splats roughly 1.5 pixels across: one NDC unit spans min(W,H)/2 pixels."""
    return RasterSettings(radius=2.0 / min(width, height) * 1.5, k=k, background=background)


def bounding_sphere(points: np.ndarray):
    """Center of the axis-aligned box and the max distance to it."""
    points = np.asarray(points, dtype=np.float64)
    center = 0.5 * (points.min(axis=0) + points.max(axis=0))
    radius = float(np.linalg.norm(points - center, axis=1).max())
    return center, radius


def auto_distance(points: np.ndarray, fov_deg: float = 60.0) -> float:
    """Distance at which the bounding sphere fills 90% of the vertical fov."""
    _, radius = bounding_sphere(points)
    half = np.deg2rad(0.9 * fov_deg) / 2.0
    if radius == 0.0:
        return 1.0
    return radius / np.sin(half)


def recenter(points: np.ndarray) -> np.ndarray:
    center, _ = bounding_sphere(points)
    return np.asarray(points, dtype=np.float64) - center


def project(x_view: np.ndarray, cam: CameraParams):
    """Perspective projection to NDC; returns (ndc, visible mask).

    x_ndc = x / (z tan(fov/2) ap), y_ndc = y / (z tan(fov/2)),
    z_ndc = far (z - near) / (z (far - near)).  Points with z <= 1e-9 are
    culled and carry unspecified NDC values.
    """
    x_view = np.asarray(x_view, dtype=np.float64)
    z = x_view[..., 2]
    visible = z > CULL_EPS
    zsafe = np.where(visible, z, 1.0)
    t = np.tan(cam.fov / 2.0)
    ndc = np.empty_like(x_view)
    ndc[..., 0] = x_view[..., 0] / (zsafe * t * cam.ap)
    ndc[..., 1] = x_view[..., 1] / (zsafe * t)
    ndc[..., 2] = cam.far * (zsafe - cam.near) / (zsafe * (cam.far - cam.near))
    return ndc, visible


def viewport(ndc_xy: np.ndarray, width: int, height: int):
    """NDC to pixel-space splat centers; +x_ndc is the left image edge."""
    ndc_xy = np.asarray(ndc_xy, dtype=np.float64)
    u = (1.0 - ndc_xy[..., 0]) * width / 2.0 - 0.5
    v = (1.0 - ndc_xy[..., 1]) * height / 2.0 - 0.5
    return u, v


def _pixel_centers_ndc(u: np.ndarray, v: np.ndarray, width: int, height: int):
    """Inverse viewport map for pixel-center coordinates."""
    x = 1.0 - (2.0 * u + 1.0) / width
    y = 1.0 - (2.0 * v + 1.0) / height
    return x, y


def rasterize(points: np.ndarray, cam: CameraParams, settings: RasterSettings) -> FragmentBuffer:
    """Collect, per pixel, the K nearest-in-depth splats covering it.

    A splat covers a pixel when the NDC distance between splat center and
    pixel center is strictly below the radius (weight would be zero at the
    boundary).  Ties in depth break on point row so the buffer is canonical
    under input permutation.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    view = points @ cam.R.T + cam.T
    ndc, visible = project(view, cam)
    idx = np.nonzero(visible)[0]
    W, H = cam.width, cam.height
    if idx.size == 0:
        return FragmentBuffer(W, H, np.zeros(H * W + 1, dtype=np.int64),
                              np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0))
    u, v = viewport(ndc[idx, :2], W, H)
    # candidate pixels within the splat's pixel-space footprint
    ru = settings.radius * W / 2.0
    rv = settings.radius * H / 2.0
    mu, mv = int(np.ceil(ru)), int(np.ceil(rv))
    uc = np.round(u).astype(np.int64)
    vc = np.round(v).astype(np.int64)
    r2 = settings.radius * settings.radius
    pix_list, row_list, d_list, z_list = [], [], [], []
    for dv in range(-mv, mv + 1):
        pv = vc + dv
        for du in range(-mu, mu + 1):
            pu = uc + du
            inside = (pu >= 0) & (pu < W) & (pv >= 0) & (pv < H)
            if not inside.any():
                continue
            sel = np.nonzero(inside)[0]
            px, py = _pixel_centers_ndc(pu[sel].astype(np.float64),
                                        pv[sel].astype(np.float64), W, H)
            dx = ndc[idx[sel], 0] - px
            dy = ndc[idx[sel], 1] - py
            d2 = dx * dx + dy * dy
            hit = d2 < r2
            if not hit.any():
                continue
            sel = sel[hit]
            pix_list.append(pv[sel] * W + pu[sel])
            row_list.append(idx[sel])
            d_list.append(np.sqrt(d2[hit]))
            z_list.append(ndc[idx[sel], 2])
    if not pix_list:
        return FragmentBuffer(W, H, np.zeros(H * W + 1, dtype=np.int64),
                              np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0))
    pix = np.concatenate(pix_list)
    rows = np.concatenate(row_list)
    d = np.concatenate(d_list)
    depth = np.concatenate(z_list)
    order = np.lexsort((rows, depth, pix))
    pix, rows, d, depth = pix[order], rows[order], d[order], depth[order]
    # keep at most K fragments per pixel (they are depth-sorted already)
    boundaries = np.empty(pix.size, dtype=bool)
    boundaries[0] = True
    boundaries[1:] = pix[1:] != pix[:-1]
    group_start = np.maximum.accumulate(np.where(boundaries, np.arange(pix.size), 0))
    rank = np.arange(pix.size) - group_start
    keep = rank < settings.k
    pix, rows, d, depth = pix[keep], rows[keep], d[keep], depth[keep]
    counts = np.bincount(pix, minlength=H * W)
    start = np.zeros(H * W + 1, dtype=np.int64)
    np.cumsum(counts, out=start[1:])
    return FragmentBuffer(W, H, start, rows.astype(np.int64), d, depth)


def fragment_coefficients(frags: FragmentBuffer, settings: RasterSettings):
    """Per-fragment color coefficient and per-pixel residual transmittance.

    coef_i = w_i * prod_{j<i} (1 - w_j) with w = 1 - d^2/r^2; resid is the
    product over all fragments of (1 - w), which multiplies the background.
    """
    n_pix = frags.width * frags.height
    counts = np.diff(frags.start)
    if frags.n_fragments == 0:
        return np.zeros(0), np.ones(n_pix)
    w = 1.0 - (frags.d * frags.d) / (settings.radius * settings.radius)
    occupied = np.nonzero(counts)[0]
    cmax = int(counts.max())
    # pad each pixel's fragment list to a dense (Q, cmax) block; w=0 padding
    # is inert (coefficient 0, transmittance factor 1)
    slot = np.arange(cmax)
    frag_idx = frags.start[occupied][:, None] + slot[None, :]
    valid = slot[None, :] < counts[occupied][:, None]
    wmat = np.zeros((occupied.size, cmax))
    wmat[valid] = w[frag_idx[valid]]
    trans = np.cumprod(1.0 - wmat, axis=1)
    excl = np.ones_like(trans)
    excl[:, 1:] = trans[:, :-1]
    coef = np.zeros(frags.n_fragments)
    coef[frag_idx[valid]] = (wmat * excl)[valid]
    resid = np.ones(n_pix)
    resid[occupied] = trans[:, -1]
    return coef, resid


def composite(frags: FragmentBuffer, colors, settings: RasterSettings) -> np.ndarray:
    """Blend fragment colors front to back over the background."""
    colors = value_of(colors)
    coef, resid = fragment_coefficients(frags, settings)
    flat = resid[:, None] * settings.background[None, :]
    if frags.n_fragments:
        pix = frags.pixel_of_fragment()
        np.add.at(flat, pix, coef[:, None] * colors[frags.rows])
    return flat.reshape(frags.height, frags.width, 3)


def composite_backward(
    g_image: np.ndarray, frags: FragmentBuffer, settings: RasterSettings, n_points: int
) -> np.ndarray:
    """Image gradient back to point colors; compositing is linear in colors."""
    coef, _ = fragment_coefficients(frags, settings)
    g_flat = np.asarray(g_image).reshape(-1, 3)
    g_colors = np.zeros((n_points, 3), dtype=g_flat.dtype)
    if frags.n_fragments:
        pix = frags.pixel_of_fragment()
        np.add.at(g_colors, frags.rows, coef[:, None] * g_flat[pix])
    return g_colors


def composite_op(tape, frags: FragmentBuffer, colors, settings: RasterSettings) -> Node:
    """Tape-recorded compositing for training losses."""
    n_points = value_of(colors).shape[0]
    out = Node(composite(frags, colors, settings))
    if tape is not None and isinstance(colors, Node):
        def bw():
            g = composite_backward(out.grad, frags, settings, n_points)
            colors.accumulate(g.astype(colors.value.dtype))
        tape.record(out, bw)
    return out


def render(points: np.ndarray, colors: np.ndarray, cam: CameraParams,
           settings: RasterSettings) -> np.ndarray:
    """Full pipeline: transform, rasterize, composite.  Deterministic."""
    frags = rasterize(points, cam, settings)
    return composite(frags, value_of(colors), settings)
