"""Coordinate maps, bilinear sampling, map algebra, and small image filters.

Conventions used throughout the package:

* Coordinates are normalized: (0, 0) is the top-left corner and (1, 1) the
  bottom-right corner of the *source* image. Pixel (row v, col u) of an
  H x W raster has its center at ((u + 0.5) / W, (v + 0.5) / H).
* A backward map lives on the rectified canvas and stores, per pixel, the
  sampling location in the distorted image. A forward map lives on the
  distorted image and stores each pixel's destination on the rectified
  canvas. Coordinates may leave [0, 1]; sampling there is defined (fill).
* All containers are frozen; operations are pure functions.
"""

from dataclasses import dataclass, field

import numpy as np

from dewarp import _kernels
from dewarp._kernels import MODE_CLAMP, MODE_EXTRAPOLATE, MODE_FILL

BACKWARD = "backward"
FORWARD = "forward"

# Rec. 601 luma weights
_LUMA = np.array([0.299, 0.587, 0.114])


def _frozen(arr):
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Raster:
    """H x W x C float image or mask, values normally in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError(f"raster must be HxWxC, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("raster contains non-finite values")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]


@dataclass(frozen=True)
class CoordMap:
    """H x W x 2 field of normalized (x, y) sampling coordinates."""

    coords: np.ndarray
    kind: str = BACKWARD

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.ndim != 3 or coords.shape[2] != 2:
            raise ValueError(f"coord map must be HxWx2, got shape {coords.shape}")
        if coords.shape[0] < 2 or coords.shape[1] < 2:
            raise ValueError("coord map needs height >= 2 and width >= 2")
        if self.kind not in (BACKWARD, FORWARD):
            raise ValueError(f"unknown map kind {self.kind!r}")
        if not np.all(np.isfinite(coords)):
            raise ValueError("coord map contains non-finite values")
        object.__setattr__(self, "coords", _frozen(coords))

    @property
    def height(self):
        return self.coords.shape[0]

    @property
    def width(self):
        return self.coords.shape[1]

    def flipped_kind(self):
        return FORWARD if self.kind == BACKWARD else BACKWARD


@dataclass(frozen=True)
class Point2:
    """Single normalized coordinate pair."""

    x: float
    y: float

    def __post_init__(self):
        if not (np.isfinite(self.x) and np.isfinite(self.y)):
            raise ValueError("point coordinates must be finite")


def identity_map(height, width, kind=BACKWARD):
    """Map sending every pixel to its own center."""
    if height < 2 or width < 2:
        raise ValueError("identity map needs height >= 2 and width >= 2")
    xs = (np.arange(width) + 0.5) / width
    ys = (np.arange(height) + 0.5) / height
    coords = np.empty((height, width, 2))
    coords[:, :, 0] = xs[None, :]
    coords[:, :, 1] = ys[:, None]
    return CoordMap(coords, kind)


def _as_points(p):
    if isinstance(p, Point2):
        return np.array([[p.x, p.y]])
    return np.asarray(p, dtype=np.float64).reshape(1, 2)


def sample_bilinear(raster, p, fill=0.0):
    """Bilinearly interpolated value vector at normalized point ``p``.

    Locations outside the image blend toward the constant ``fill`` through
    the boundary pixels and reach it once no pixel center is within one
    pixel of the sample site.
    """
    return _kernels.sample_map(raster.data, _as_points(p), MODE_FILL, fill)[0]


def sample_bilinear_grad(raster, p, fill=0.0):
    """(value, d/dx, d/dy) of bilinear sampling w.r.t. normalized coords.

    At exact cell boundaries the lower-indexed cell's derivative is used.
    """
    v, dx, dy = _kernels.sample_map_grad(raster.data, _as_points(p), MODE_FILL, fill)
    return v[0], dx[0], dy[0]


def grid_sample(raster, cmap, fill=0.0):
    """Warp ``raster`` through a coordinate map: out(u, v) = raster[cmap(u, v)]."""
    pts = cmap.coords.reshape(-1, 2)
    out = _kernels.sample_map(raster.data, pts, MODE_FILL, fill)
    return Raster(out.reshape(cmap.height, cmap.width, raster.channels))


def resize_raster(raster, height, width):
    """Bilinear resize via sampling at the target grid's pixel centers."""
    if height < 2 or width < 2:
        raise ValueError("resize target needs height >= 2 and width >= 2")
    pts = identity_map(height, width).coords.reshape(-1, 2)
    out = _kernels.sample_map(raster.data, pts, MODE_CLAMP)
    return Raster(out.reshape(height, width, raster.channels))


def compose_maps(outer, inner):
    """Evaluate ``outer`` (as a coordinate field) at the values of ``inner``.

    ``inner`` may be a CoordMap, an (N, 2) array, or a sequence of Point2.
    Returns (result, valid) where ``valid`` flags values of ``inner`` that
    fell inside outer's [0, 1]^2 domain; out-of-domain results are linear
    extrapolations of the boundary cells.
    """
    if isinstance(inner, CoordMap):
        pts = inner.coords.reshape(-1, 2)
    elif isinstance(inner, np.ndarray):
        pts = inner.reshape(-1, 2)
    else:
        pts = np.array([[p.x, p.y] for p in inner], dtype=np.float64)
    valid = (
        (pts[:, 0] >= 0.0) & (pts[:, 0] <= 1.0)
        & (pts[:, 1] >= 0.0) & (pts[:, 1] <= 1.0)
    )
    out = _kernels.sample_map(outer.coords, pts, MODE_EXTRAPOLATE)
    if isinstance(inner, CoordMap):
        composed = CoordMap(out.reshape(inner.height, inner.width, 2), outer.kind)
        return composed, valid.reshape(inner.height, inner.width)
    return out, valid


def invert_map(cmap, iterations=30):
    """Fixed-point inversion of a diffeomorphic map.

    Iterates q <- q - (map(q) - target) from the identity. Returns
    (inverse map with flipped kind, mean final residual in pixels of the
    inverted map's grid); the caller decides whether the residual is
    acceptable.
    """
    h, w = cmap.height, cmap.width
    target = identity_map(h, w).coords.reshape(-1, 2)
    q = target.copy()
    fwd = cmap.coords
    resid = None
    for _ in range(iterations):
        resid = _kernels.sample_map(fwd, q, MODE_EXTRAPOLATE) - target
        q -= resid
    resid = _kernels.sample_map(fwd, q, MODE_EXTRAPOLATE) - target
    scale = np.array([w, h], dtype=np.float64)
    mean_px = float(np.mean(np.linalg.norm(resid * scale, axis=1)))
    inv = CoordMap(q.reshape(h, w, 2), cmap.flipped_kind())
    return inv, mean_px


def roundtrip_deviation_px(fm, bm):
    """(mean, max) pixel deviation of compose(fm, bm) from the identity."""
    composed, _ = compose_maps(fm, bm)
    ident = identity_map(bm.height, bm.width)
    delta = composed.coords - ident.coords
    scale = np.array([bm.width, bm.height], dtype=np.float64)
    err = np.linalg.norm(delta * scale, axis=2)
    return float(err.mean()), float(err.max())


def gaussian_blur(raster, sigma):
    """Separable Gaussian blur, kernel radius ceil(3*sigma), clamped edges."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return raster
    radius = int(np.ceil(3.0 * sigma))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    kernel /= kernel.sum()

    data = raster.data
    padded = np.pad(data, ((radius, radius), (0, 0), (0, 0)), mode="edge")
    out = np.zeros_like(data)
    for i, kw in enumerate(kernel):
        out += kw * padded[i:i + data.shape[0]]
    padded = np.pad(out, ((0, 0), (radius, radius), (0, 0)), mode="edge")
    out = np.zeros_like(data)
    for i, kw in enumerate(kernel):
        out += kw * padded[:, i:i + data.shape[1]]
    return Raster(out)


def to_luma(raster):
    """Single-channel view of a raster (Rec. 601 for 3-channel input)."""
    if raster.channels == 1:
        return raster
    if raster.channels != 3:
        raise ValueError(f"cannot convert {raster.channels}-channel raster to luma")
    return Raster(raster.data @ _LUMA)


def gradient_magnitude(raster):
    """Central-difference gradient magnitude with replicated borders."""
    data = to_luma(raster).data[:, :, 0]
    padded = np.pad(data, 1, mode="edge")
    gx = (padded[1:-1, 2:] - padded[1:-1, :-2]) / 2.0
    gy = (padded[2:, 1:-1] - padded[:-2, 1:-1]) / 2.0
    return Raster(np.sqrt(gx * gx + gy * gy))
