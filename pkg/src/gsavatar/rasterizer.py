"""Tile-based differentiable splatting of frame-space Gaussians.

Each Gaussian is projected to a 2D Gaussian, binned into 16x16 pixel tiles by
its 3-sigma bounding rectangle, sorted front to back (view depth, then index)
and alpha-composited per pixel.  A Gaussian contributes to a pixel only inside
its 3-sigma ellipse, so the tiled result is identical to a per-pixel full sort.
The backward pass re-walks each pixel's list, keeping per-(tile, Gaussian)
partial sums that are reduced in a fixed order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from numba import njit

TILE = 16
DILATION = 0.3
CUTOFF_SQ = 9.0  # squared Mahalanobis radius (3 sigma)
T_MIN = 1e-4


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.01
    far: float = 100.0
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))  # world -> camera
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise ValueError("need 0 < near < far")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    @property
    def center(self) -> np.ndarray:
        return -np.asarray(self.rotation).T @ np.asarray(self.translation)

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy, "width": self.width,
                "height": self.height, "near": self.near, "far": self.far,
                "rotation": np.asarray(self.rotation).tolist(), "translation": np.asarray(self.translation).tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d.get("width", 0)),
                   int(d.get("height", 0)), float(d.get("near", 0.01)), float(d.get("far", 100.0)),
                   np.asarray(d.get("rotation", np.eye(3)), dtype=np.float64),
                   np.asarray(d.get("translation", np.zeros(3)), dtype=np.float64))

    def with_pose(self, rotation, translation) -> "Camera":
        return Camera(self.fx, self.fy, self.cx, self.cy, self.width, self.height, self.near, self.far,
                      np.asarray(rotation, dtype=np.float64), np.asarray(translation, dtype=np.float64))

    def project_points(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pinhole projection of world points; returns (uv, depth)."""
        cam = points @ np.asarray(self.rotation).T + self.translation
        z = cam[:, 2]
        uv = np.stack([self.fx * cam[:, 0] / z + self.cx, self.fy * cam[:, 1] / z + self.cy], axis=1)
        return uv, z


# ---------------------------------------------------------------------------
# projection


@dataclass
class Projection:
    mean2d: np.ndarray  # M x 2
    cov2d: np.ndarray  # M x 2 x 2 (dilated)
    depth: np.ndarray  # M view depth
    valid: np.ndarray  # M bool
    cam_points: np.ndarray
    jac: np.ndarray  # M x 2 x 3 (projection Jacobian times world->camera rotation)
    covs: np.ndarray


def project(means: np.ndarray, covs: np.ndarray, camera: Camera) -> Projection:
    """Perspective projection of Gaussian centres and first-order covariance transfer."""
    rot = np.asarray(camera.rotation, dtype=np.float64)
    cam = means @ rot.T + camera.translation
    x, y, z = cam[:, 0], cam[:, 1], cam[:, 2]
    valid = (z > camera.near) & (z < camera.far)
    zs = np.where(valid, z, 1.0)
    mean2d = np.stack([camera.fx * x / zs + camera.cx, camera.fy * y / zs + camera.cy], axis=1)
    j = np.zeros((means.shape[0], 2, 3))
    j[:, 0, 0] = camera.fx / zs
    j[:, 0, 2] = -camera.fx * x / zs**2
    j[:, 1, 1] = camera.fy / zs
    j[:, 1, 2] = -camera.fy * y / zs**2
    t = j @ rot
    cov2d = t @ covs @ np.swapaxes(t, 1, 2) + DILATION * np.eye(2)
    return Projection(mean2d, cov2d, z, valid, cam, t, covs)


def project_backward(proj: Projection, camera: Camera, d_mean2d: np.ndarray, d_cov2d: np.ndarray,
                     d_depth: np.ndarray | None = None):
    """Returns (d_means M x 3, d_covs M x 3 x 3) in world space."""
    rot = np.asarray(camera.rotation, dtype=np.float64)
    x, y = proj.cam_points[:, 0], proj.cam_points[:, 1]
    z = np.where(proj.valid, proj.cam_points[:, 2], 1.0)
    fx, fy = camera.fx, camera.fy
    t = proj.jac
    d_covs = np.swapaxes(t, 1, 2) @ d_cov2d @ t
    d_t = d_cov2d @ t @ np.swapaxes(proj.covs, 1, 2) + np.swapaxes(d_cov2d, 1, 2) @ t @ proj.covs
    d_j = d_t @ rot.T
    d_cam = np.zeros_like(proj.cam_points)
    d_cam[:, 0] = d_mean2d[:, 0] * fx / z
    d_cam[:, 1] = d_mean2d[:, 1] * fy / z
    d_cam[:, 2] = -d_mean2d[:, 0] * fx * x / z**2 - d_mean2d[:, 1] * fy * y / z**2
    if d_depth is not None:
        d_cam[:, 2] += d_depth
    d_cam[:, 0] += d_j[:, 0, 2] * (-fx / z**2)
    d_cam[:, 1] += d_j[:, 1, 2] * (-fy / z**2)
    d_cam[:, 2] += (d_j[:, 0, 0] * (-fx / z**2) + d_j[:, 0, 2] * (2 * fx * x / z**3)
                    + d_j[:, 1, 1] * (-fy / z**2) + d_j[:, 1, 2] * (2 * fy * y / z**3))
    mask = proj.valid[:, None]
    d_cam = np.where(mask, d_cam, 0.0)
    d_covs = np.where(mask[:, :, None], d_covs, 0.0)
    return d_cam @ rot, d_covs


# ---------------------------------------------------------------------------
# kernels


@njit(cache=True)
def _forward_kernel(tile_order, tile_start, tile_end, point_list, means, conics, colors, opac, depths, bg,
                    width, height, tiles_x, color_out, depth_out, alpha_out, trans_out, last_out):
    for t in tile_order:
        ty = t // tiles_x
        tx = t - ty * tiles_x
        for py in range(ty * TILE, min(ty * TILE + TILE, height)):
            for px in range(tx * TILE, min(tx * TILE + TILE, width)):
                trans = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                d = 0.0
                last = tile_start[t]
                for e in range(tile_start[t], tile_end[t]):
                    g = point_list[e]
                    last = e + 1
                    dx = px - means[g, 0]
                    dy = py - means[g, 1]
                    q = conics[g, 0] * dx * dx + 2.0 * conics[g, 1] * dx * dy + conics[g, 2] * dy * dy
                    if q > CUTOFF_SQ:
                        continue
                    sigma = opac[g] * np.exp(-0.5 * q)
                    w = sigma * trans
                    c0 += colors[g, 0] * w
                    c1 += colors[g, 1] * w
                    c2 += colors[g, 2] * w
                    d += depths[g] * w
                    trans *= 1.0 - sigma
                    if trans < T_MIN:
                        break
                color_out[py, px, 0] = c0 + trans * bg[0]
                color_out[py, px, 1] = c1 + trans * bg[1]
                color_out[py, px, 2] = c2 + trans * bg[2]
                depth_out[py, px] = d
                alpha_out[py, px] = 1.0 - trans
                trans_out[py, px] = trans
                last_out[py, px] = last


@njit(cache=True)
def _backward_kernel(tile_order, tile_start, tile_end, point_list, means, conics, colors, opac, depths, bg,
                     width, height, tiles_x, last_in, g_color, g_depth, g_alpha,
                     e_mean, e_conic, e_opac, e_color, e_depth):
    max_len = 0
    for t in range(tile_start.shape[0]):
        max_len = max(max_len, tile_end[t] - tile_start[t])
    sig = np.empty(max_len)
    tb = np.empty(max_len)
    gauss = np.empty(max_len, dtype=np.int64)
    entry = np.empty(max_len, dtype=np.int64)
    gv = np.empty(max_len)
    dxs = np.empty(max_len)
    dys = np.empty(max_len)
    for t in tile_order:
        ty = t // tiles_x
        tx = t - ty * tiles_x
        for py in range(ty * TILE, min(ty * TILE + TILE, height)):
            for px in range(tx * TILE, min(tx * TILE + TILE, width)):
                gc0 = g_color[py, px, 0]
                gc1 = g_color[py, px, 1]
                gc2 = g_color[py, px, 2]
                gd = g_depth[py, px]
                ga = g_alpha[py, px]
                if gc0 == 0.0 and gc1 == 0.0 and gc2 == 0.0 and gd == 0.0 and ga == 0.0:
                    continue
                # replay the forward walk
                n = 0
                trans = 1.0
                for e in range(tile_start[t], last_in[py, px]):
                    g = point_list[e]
                    dx = px - means[g, 0]
                    dy = py - means[g, 1]
                    q = conics[g, 0] * dx * dx + 2.0 * conics[g, 1] * dx * dy + conics[g, 2] * dy * dy
                    if q > CUTOFF_SQ:
                        continue
                    gval = np.exp(-0.5 * q)
                    s = opac[g] * gval
                    sig[n] = s
                    gv[n] = gval
                    tb[n] = trans
                    gauss[n] = g
                    entry[n] = e
                    dxs[n] = dx
                    dys[n] = dy
                    n += 1
                    trans *= 1.0 - s
                    if trans < T_MIN:
                        break
                s0 = bg[0]
                s1 = bg[1]
                s2 = bg[2]
                sd = 0.0
                sa = 0.0
                for k in range(n - 1, -1, -1):
                    g = gauss[k]
                    e = entry[k]
                    s = sig[k]
                    tk = tb[k]
                    w = s * tk
                    d_sigma = tk * (gc0 * (colors[g, 0] - s0) + gc1 * (colors[g, 1] - s1) + gc2 * (colors[g, 2] - s2)
                                    + gd * (depths[g] - sd) + ga * (1.0 - sa))
                    e_color[e, 0] += gc0 * w
                    e_color[e, 1] += gc1 * w
                    e_color[e, 2] += gc2 * w
                    e_depth[e] += gd * w
                    s0 = colors[g, 0] * s + (1.0 - s) * s0
                    s1 = colors[g, 1] * s + (1.0 - s) * s1
                    s2 = colors[g, 2] * s + (1.0 - s) * s2
                    sd = depths[g] * s + (1.0 - s) * sd
                    sa = s + (1.0 - s) * sa
                    e_opac[e] += d_sigma * gv[k]
                    dq = -0.5 * d_sigma * s
                    dx = dxs[k]
                    dy = dys[k]
                    e_mean[e, 0] -= dq * 2.0 * (conics[g, 0] * dx + conics[g, 1] * dy)
                    e_mean[e, 1] -= dq * 2.0 * (conics[g, 1] * dx + conics[g, 2] * dy)
                    e_conic[e, 0] += dq * dx * dx
                    e_conic[e, 1] += dq * dx * dy
                    e_conic[e, 2] += dq * dy * dy


# ---------------------------------------------------------------------------
# binning and public API


@dataclass
class RasterCache:
    mean2d: np.ndarray
    conics: np.ndarray
    colors: np.ndarray
    opacities: np.ndarray
    depths: np.ndarray
    background: np.ndarray
    tile_start: np.ndarray
    tile_end: np.ndarray
    point_list: np.ndarray
    last: np.ndarray
    tiles_x: int
    width: int
    height: int
    num_gaussians: int


@dataclass
class RenderOutput:
    color: np.ndarray  # H x W x 3
    depth: np.ndarray  # H x W
    alpha: np.ndarray  # H x W
    cache: RasterCache | None = None
    projection: Projection | None = None


@dataclass
class RasterGrads:
    mean2d: np.ndarray
    cov2d: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    depth: np.ndarray
    mean2d_norm: np.ndarray  # per-Gaussian norm of the view-space (NDC-scaled) positional gradient


def conics_from_cov2d(cov2d: np.ndarray):
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    ok = det > 0
    safe = np.where(ok, det, 1.0)
    conics = np.stack([c / safe, -b / safe, a / safe], axis=1)
    return conics, det, ok


def _bin_gaussians(mean2d, cov2d, depths, valid, width, height):
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(mid * mid - (a * c - b * b), 0.0))
    radius = np.ceil(3.0 * np.sqrt(np.maximum(lam, 0.0)))
    x0 = np.floor((mean2d[:, 0] - radius) / TILE)
    x1 = np.floor((mean2d[:, 0] + radius) / TILE)
    y0 = np.floor((mean2d[:, 1] - radius) / TILE)
    y1 = np.floor((mean2d[:, 1] + radius) / TILE)
    on = valid & (x1 >= 0) & (y1 >= 0) & (x0 < tiles_x) & (y0 < tiles_y) & np.isfinite(radius)
    x0 = np.clip(x0, 0, tiles_x - 1).astype(np.int64)
    x1 = np.clip(x1, 0, tiles_x - 1).astype(np.int64)
    y0 = np.clip(y0, 0, tiles_y - 1).astype(np.int64)
    y1 = np.clip(y1, 0, tiles_y - 1).astype(np.int64)
    idx = np.nonzero(on)[0]
    order = idx[np.lexsort((idx, depths[idx]))]  # front to back, ties by index
    counts = (x1[order] - x0[order] + 1) * (y1[order] - y0[order] + 1)
    total = int(counts.sum())
    rank = np.repeat(np.arange(order.size), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    wid = np.repeat(x1[order] - x0[order] + 1, counts)
    tx = np.repeat(x0[order], counts) + local % np.maximum(wid, 1)
    ty = np.repeat(y0[order], counts) + local // np.maximum(wid, 1)
    tile_id = ty * tiles_x + tx
    key = tile_id * max(order.size, 1) + rank
    perm = np.argsort(key, kind="stable")
    point_list = order[rank[perm]].astype(np.int64)
    tile_sorted = tile_id[perm]
    ntiles = tiles_x * tiles_y
    tile_start = np.searchsorted(tile_sorted, np.arange(ntiles), side="left").astype(np.int64)
    tile_end = np.searchsorted(tile_sorted, np.arange(ntiles), side="right").astype(np.int64)
    return tile_start, tile_end, point_list, tiles_x, tiles_y


def rasterize(mean2d, cov2d, colors, opacities, depths, valid, camera: Camera, background=None,
              tile_order=None) -> RenderOutput:
    """Front-to-back alpha compositing of projected Gaussians."""
    width, height = camera.width, camera.height
    bg = np.zeros(3) if background is None else np.asarray(background, dtype=np.float64)
    conics, _, ok = conics_from_cov2d(cov2d)
    valid = valid & ok
    tile_start, tile_end, point_list, tiles_x, tiles_y = _bin_gaussians(mean2d, cov2d, depths, valid, width, height)
    order = np.arange(tiles_x * tiles_y, dtype=np.int64) if tile_order is None else np.asarray(tile_order, np.int64)
    color = np.empty((height, width, 3))
    depth = np.empty((height, width))
    alpha = np.empty((height, width))
    trans = np.empty((height, width))
    last = np.empty((height, width), dtype=np.int64)
    args = (np.ascontiguousarray(mean2d, dtype=np.float64), conics, np.ascontiguousarray(colors, dtype=np.float64),
            np.ascontiguousarray(opacities, dtype=np.float64), np.ascontiguousarray(depths, dtype=np.float64), bg)
    _forward_kernel(order, tile_start, tile_end, point_list, *args, width, height, tiles_x,
                    color, depth, alpha, trans, last)
    cache = RasterCache(args[0], conics, args[2], args[3], args[4], bg, tile_start, tile_end, point_list, last,
                        tiles_x, width, height, mean2d.shape[0])
    return RenderOutput(color, depth, alpha, cache)


class StaleCacheError(RuntimeError):
    pass


def rasterize_backward(cache: RasterCache, d_color, d_depth=None, d_alpha=None, tile_order=None) -> RasterGrads:
    """Exact reverse of the compositing recurrence for one forward pass."""
    if cache is None:
        raise StaleCacheError("no forward cache available")
    h, w = cache.height, cache.width
    d_color = np.ascontiguousarray(d_color, dtype=np.float64)
    if d_color.shape != (h, w, 3):
        raise StaleCacheError(f"colour gradient shape {d_color.shape} does not match cached render {(h, w, 3)}")
    d_depth = np.zeros((h, w)) if d_depth is None else np.ascontiguousarray(d_depth, dtype=np.float64)
    d_alpha = np.zeros((h, w)) if d_alpha is None else np.ascontiguousarray(d_alpha, dtype=np.float64)
    if d_depth.shape != (h, w) or d_alpha.shape != (h, w):
        raise StaleCacheError("depth/alpha gradient shape does not match cached render")
    n_entries = cache.point_list.size
    e_mean = np.zeros((n_entries, 2))
    e_conic = np.zeros((n_entries, 3))
    e_opac = np.zeros(n_entries)
    e_color = np.zeros((n_entries, 3))
    e_depth = np.zeros(n_entries)
    ntiles = cache.tile_start.size
    order = np.arange(ntiles, dtype=np.int64) if tile_order is None else np.asarray(tile_order, np.int64)
    _backward_kernel(order, cache.tile_start, cache.tile_end, cache.point_list, cache.mean2d, cache.conics,
                     cache.colors, cache.opacities, cache.depths, cache.background, w, h, cache.tiles_x,
                     cache.last, d_color, d_depth, d_alpha, e_mean, e_conic, e_opac, e_color, e_depth)
    m = cache.num_gaussians
    idx = cache.point_list
    g_mean = np.zeros((m, 2))
    g_conic = np.zeros((m, 3))
    g_opac = np.zeros(m)
    g_color = np.zeros((m, 3))
    g_depth = np.zeros(m)
    np.add.at(g_mean, idx, e_mean)
    np.add.at(g_conic, idx, e_conic)
    np.add.at(g_opac, idx, e_opac)
    np.add.at(g_color, idx, e_color)
    np.add.at(g_depth, idx, e_depth)
    # conic = cov^-1  =>  dL/dcov = -conic G conic
    con = np.empty((m, 2, 2))
    con[:, 0, 0], con[:, 0, 1], con[:, 1, 0], con[:, 1, 1] = (cache.conics[:, 0], cache.conics[:, 1],
                                                              cache.conics[:, 1], cache.conics[:, 2])
    gm = np.empty((m, 2, 2))
    gm[:, 0, 0], gm[:, 0, 1], gm[:, 1, 0], gm[:, 1, 1] = g_conic[:, 0], g_conic[:, 1], g_conic[:, 1], g_conic[:, 2]
    g_cov = -con @ gm @ con
    ndc = g_mean * np.array([0.5 * w, 0.5 * h])
    return RasterGrads(g_mean, g_cov, g_opac, g_color, g_depth, np.linalg.norm(ndc, axis=1))


def render(means, covs, colors, opacities, camera: Camera, background=None, tile_order=None) -> RenderOutput:
    """Project and rasterize frame-space Gaussians."""
    proj = project(means, covs, camera)
    out = rasterize(proj.mean2d, proj.cov2d, colors, opacities, proj.depth, proj.valid, camera, background,
                    tile_order)
    out.projection = proj
    return out


def render_reference(mean2d, cov2d, colors, opacities, depths, valid, width, height, background=None):
    """Naive per-pixel renderer: full depth sort of every Gaussian at every pixel."""
    bg = np.zeros(3) if background is None else np.asarray(background, dtype=np.float64)
    conics, _, ok = conics_from_cov2d(cov2d)
    live = [i for i in range(len(depths)) if valid[i] and ok[i]]
    color = np.zeros((height, width, 3))
    depth = np.zeros((height, width))
    alpha = np.zeros((height, width))
    for py in range(height):
        for px in range(width):
            ranked = sorted(live, key=lambda i: (depths[i], i))
            trans, c, d = 1.0, np.zeros(3), 0.0
            for i in ranked:
                dx, dy = px - mean2d[i, 0], py - mean2d[i, 1]
                q = conics[i, 0] * dx * dx + 2 * conics[i, 1] * dx * dy + conics[i, 2] * dy * dy
                if q > CUTOFF_SQ:
                    continue
                s = opacities[i] * np.exp(-0.5 * q)
                c = c + colors[i] * s * trans
                d += depths[i] * s * trans
                trans *= 1 - s
                if trans < T_MIN:
                    break
            color[py, px] = c + trans * bg
            depth[py, px] = d
            alpha[py, px] = 1 - trans
    return color, depth, alpha


# ---------------------------------------------------------------------------
# image IO

DEPTH_MAGIC = b"GSDP"


def write_png(path, image: np.ndarray) -> None:
    from PIL import Image

    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def read_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float64) / 255.0


def write_depth(path, depth: np.ndarray) -> None:
    d = np.ascontiguousarray(depth, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(DEPTH_MAGIC + struct.pack("<II", d.shape[0], d.shape[1]) + d.tobytes())


def read_depth(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != DEPTH_MAGIC:
        raise ValueError(f"{path}: not a depth file")
    h, w = struct.unpack("<II", raw[4:12])
    return np.frombuffer(raw[12:], dtype="<f4").reshape(h, w).copy()
