"""Synthetic page rendering, smooth warp generation, and boundary regimes.

Pages are rendered as dark text-line bars on a light background so every
line's midline is exact ground truth (no OCR in the loop). Warps compose a
random projective transform, a cylindrical curl displacement, and a few
Gaussian fold bumps, expressed directly as a backward map; inversion gives
the forward map. Incomplete-boundary regimes (overflow, corner absence,
edge occlusion) are derived from complete samples.
"""

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from dewarp.errors import GenerationError
from dewarp.geometry import (
    BACKWARD,
    FORWARD,
    CoordMap,
    Raster,
    grid_sample,
    identity_map,
    invert_map,
)

REGIMES = ("complete", "overflow", "absence", "occlusion")

# point spacing along text-line midlines, in page pixels
CP_SPACING_PX = 8.0


@dataclass(frozen=True)
class TextLine:
    """Ordered control points along one line's midline, rectified frame."""

    points: np.ndarray  # (N, 2) normalized
    line_id: int

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
            raise ValueError("textline needs at least two (x, y) points")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)


@dataclass(frozen=True)
class DocumentSample:
    image: Raster
    doc_mask: Raster
    textlines: tuple
    page_size: int


@dataclass(frozen=True)
class WarpSample:
    distorted: Raster
    dm_gt: Raster
    bm_gt: CoordMap
    fm_gt: CoordMap
    textlines: tuple
    regime: str
    seed: int
    occ_mask: Optional[Raster] = None


@dataclass(frozen=True)
class WarpParams:
    perspective_strength: float = 0.06
    curl_amplitude: float = 0.035
    fold_count: int = 2
    fold_sigma: float = 0.12
    canvas_size: int = 432
    seed: int = 0


def gen_document(seed, lines, page):
    """Render a page of ``lines`` text bars; midlines become TextLines."""
    if lines < 1:
        raise ValueError("need at least one text line")
    margin = max(4.0, 0.06 * page)
    pitch = (page - 2.0 * margin) / lines
    if pitch < 12.0:
        raise ValueError(f"page of {page}px is too small for {lines} lines")

    rng = np.random.default_rng([int(seed), 0xD0C])
    background = rng.uniform(0.88, 0.96)
    img = np.full((page, page, 1), background)
    textlines = []
    for i in range(lines):
        y_mid = margin + (i + 0.5) * pitch + rng.uniform(-0.12, 0.12) * pitch
        bar_h = rng.uniform(0.28, 0.48) * min(pitch, 30.0)
        x0 = rng.uniform(0.06, 0.16) * page
        x1 = page - rng.uniform(0.06, 0.30) * page
        ink = rng.uniform(0.05, 0.25)

        rows = np.arange(page) + 0.5
        cols = np.arange(page) + 0.5
        in_rows = np.abs(rows - y_mid) <= bar_h / 2.0
        in_cols = (cols >= x0) & (cols <= x1)
        img[np.ix_(in_rows, in_cols, [0])] = ink

        xs = np.arange(x0 + 4.0, x1 - 3.0, CP_SPACING_PX)
        if xs.size < 2:
            xs = np.array([x0 + 4.0, x0 + 4.0 + CP_SPACING_PX])
        pts = np.stack([xs / page, np.full_like(xs, y_mid / page)], axis=1)
        textlines.append(TextLine(points=pts, line_id=i + 1))

    mask = np.ones((page, page, 1))
    return DocumentSample(
        image=Raster(img),
        doc_mask=Raster(mask),
        textlines=tuple(textlines),
        page_size=page,
    )


def solve_homography(src, dst):
    """3x3 projective transform mapping 4 src points onto 4 dst points."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i in range(4):
        x, y = src[i]
        gx, gy = dst[i]
        a[2 * i] = [x, y, 1, 0, 0, 0, -gx * x, -gx * y]
        a[2 * i + 1] = [0, 0, 0, x, y, 1, -gy * x, -gy * y]
        b[2 * i] = gx
        b[2 * i + 1] = gy
    h = np.linalg.solve(a, b)
    return np.array(
        [[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]]
    )


def apply_homography(hmat, pts):
    pts = np.asarray(pts, dtype=np.float64)
    ones = np.ones((pts.shape[0], 1))
    proj = np.hstack([pts, ones]) @ hmat.T
    return proj[:, :2] / proj[:, 2:3]


def _warp_field(params, draws, scale):
    """Closure evaluating the analytic backward map at normalized points."""
    corners_src = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    inset = 0.035
    corners_dst = corners_src * (1.0 - 2.0 * inset) + inset + draws["corner_jitter"] * scale
    hmat = solve_homography(corners_src, corners_dst)

    amp_curl = params.curl_amplitude * draws["curl_gain"] * scale
    phase = draws["curl_phase"]
    folds = draws["folds"]

    def field(pts):
        u = pts[:, 0]
        v = pts[:, 1]
        dx = amp_curl * np.sin(math.pi * u + phase) * (1.0 + 0.25 * (v - 0.5))
        dy = np.zeros_like(v)
        for cx, cy, sig, ax, ay in folds:
            g = np.exp(-((u - cx) ** 2 + (v - cy) ** 2) / (2.0 * sig * sig))
            dx = dx + ax * scale * g
            dy = dy + ay * scale * g
        return apply_homography(hmat, np.stack([u + dx, v + dy], axis=1))

    return field


def _min_jacobian_det(field, probes=64):
    eps = 0.5 / probes
    grid = identity_map(probes, probes).coords.reshape(-1, 2)
    fu = field(grid + [eps, 0.0]) - field(grid - [eps, 0.0])
    fv = field(grid + [0.0, eps]) - field(grid - [0.0, eps])
    det = (fu[:, 0] * fv[:, 1] - fu[:, 1] * fv[:, 0]) / (2.0 * eps) ** 2
    return float(det.min())


def gen_warp(params):
    """Random smooth diffeomorphic backward map on the params canvas.

    Amplitudes are damped and the warp regenerated (up to 5 retries) until
    the probe-grid Jacobian determinant stays above 0.05 and the map stays
    inside the frame.
    """
    rng = np.random.default_rng([int(params.seed), 0x3A9])
    ps = params.perspective_strength
    draws = {
        "corner_jitter": rng.uniform(-ps, ps, size=(4, 2)),
        "curl_gain": rng.uniform(0.6, 1.0) * rng.choice([-1.0, 1.0]),
        "curl_phase": rng.uniform(-0.4, 0.4),
        "folds": [
            (
                rng.uniform(0.15, 0.85),
                rng.uniform(0.15, 0.85),
                params.fold_sigma * rng.uniform(0.7, 1.3),
                params.curl_amplitude * rng.uniform(-0.8, 0.8),
                params.curl_amplitude * rng.uniform(-0.8, 0.8),
            )
            for _ in range(params.fold_count)
        ],
    }

    n = params.canvas_size
    grid = identity_map(n, n).coords.reshape(-1, 2)
    for attempt in range(6):
        scale = 0.7 ** attempt
        field = _warp_field(params, draws, scale)
        if _min_jacobian_det(field) <= 0.05:
            continue
        coords = field(grid)
        if coords.min() < 0.004 or coords.max() > 0.996:
            continue
        return CoordMap(coords.reshape(n, n, 2), BACKWARD)
    raise GenerationError(
        f"no diffeomorphic warp after retries (seed {params.seed})"
    )


def apply_warp(doc, bm_gt, seed=0):
    """Distort a flat page through the inverse of ``bm_gt``; regime=complete."""
    fm_gt, residual_px = invert_map(bm_gt, iterations=30)
    if residual_px > 1.0:
        raise GenerationError(f"map inversion residual {residual_px:.2f}px > 1px")
    distorted = grid_sample(doc.image, fm_gt)
    dm_gt = grid_sample(doc.doc_mask, fm_gt)
    return WarpSample(
        distorted=distorted,
        dm_gt=dm_gt,
        bm_gt=bm_gt,
        fm_gt=fm_gt,
        textlines=doc.textlines,
        regime="complete",
        seed=int(seed),
    )


def crop_boundaries(sample, n_b, seed):
    """Crop 1..4 photo boundaries by 5-20%; bm coords leaving [0,1] signal overflow."""
    if not 1 <= n_b <= 4:
        raise ValueError(f"n_b must be in [1, 4], got {n_b}")
    rng = np.random.default_rng([int(seed), 0xC40])
    sides = rng.choice(4, size=n_b, replace=False)  # 0=left 1=right 2=top 3=bottom
    fractions = rng.uniform(0.05, 0.20, size=n_b)

    h, w = sample.distorted.height, sample.distorted.width
    cut = {0: 0, 1: 0, 2: 0, 3: 0}
    for side, frac in zip(sides, fractions):
        cut[int(side)] = int(round(frac * (w if side in (0, 1) else h)))
    left, right, top, bottom = cut[0], cut[1], cut[2], cut[3]
    new_w = w - left - right
    new_h = h - top - bottom

    def crop(raster):
        return Raster(raster.data[top:h - bottom, left:w - right])

    coords = sample.bm_gt.coords.copy()
    coords[:, :, 0] = (coords[:, :, 0] * w - left) / new_w
    coords[:, :, 1] = (coords[:, :, 1] * h - top) / new_h
    bm = CoordMap(coords, BACKWARD)
    fm = CoordMap(sample.fm_gt.coords[top:h - bottom, left:w - right], FORWARD)

    return replace(
        sample,
        distorted=crop(sample.distorted),
        dm_gt=crop(sample.dm_gt),
        bm_gt=bm,
        fm_gt=fm,
        regime="overflow",
        seed=int(seed),
        occ_mask=crop(sample.occ_mask) if sample.occ_mask is not None else None,
    )


def _occluded_fraction(dm, region):
    doc_area = float(dm.sum())
    return float((dm * region).sum()) / doc_area if doc_area > 0 else 0.0


def occlude(sample, kind, seed):
    """Remove a corner triangle ('corner') or overlay an edge box ('edge').

    The occluded document area is bisected into [2%, 15%] of the document.
    """
    if sample.regime not in ("complete", "overflow"):
        raise ValueError(f"cannot occlude a {sample.regime} sample")
    if kind not in ("corner", "edge"):
        raise ValueError(f"unknown occlusion kind {kind!r}")
    rng = np.random.default_rng([int(seed), 0x0CC if kind == "corner" else 0x0CE])

    h, w = sample.distorted.height, sample.distorted.width
    dm = sample.dm_gt.data[:, :, 0]
    ys = (np.arange(h) + 0.5)[:, None]
    xs = (np.arange(w) + 0.5)[None, :]
    target = rng.uniform(0.04, 0.13)

    if kind == "corner":
        cy = rng.integers(0, 2) * h  # 0 or h
        cx = rng.integers(0, 2) * w
        dist = np.abs(xs - cx) + np.abs(ys - cy)

        def region_at(scale):
            return (dist <= scale).astype(np.float64)[:, :, None]

        fill_value = 0.0
    else:
        side = int(rng.integers(0, 4))
        span0 = rng.uniform(0.15, 0.5)
        span1 = span0 + rng.uniform(0.25, 0.45)
        if side in (0, 1):  # left/right: box spans rows, protrudes in x
            lo, hi = span0 * h, min(span1, 0.95) * h
            in_span = (ys >= lo) & (ys <= hi)

            def region_at(scale):
                depth = (xs <= scale) if side == 0 else (xs >= w - scale)
                return (in_span & depth).astype(np.float64)[:, :, None]
        else:
            lo, hi = span0 * w, min(span1, 0.95) * w
            in_span = (xs >= lo) & (xs <= hi)

            def region_at(scale):
                depth = (ys <= scale) if side == 2 else (ys >= h - scale)
                return (in_span & depth).astype(np.float64)[:, :, None]

        fill_value = 0.62

    lo_scale, hi_scale = 0.0, float(max(h, w))
    region = region_at(hi_scale)
    if _occluded_fraction(dm, region[:, :, 0]) < target:
        raise GenerationError("document too small to occlude")
    for _ in range(40):
        mid = 0.5 * (lo_scale + hi_scale)
        region = region_at(mid)
        frac = _occluded_fraction(dm, region[:, :, 0])
        if frac < target:
            lo_scale = mid
        else:
            hi_scale = mid
    region = region_at(hi_scale)
    frac = _occluded_fraction(dm, region[:, :, 0])
    if not 0.02 <= frac <= 0.15:
        raise GenerationError(f"occluded fraction {frac:.3f} outside [0.02, 0.15]")

    keep = 1.0 - region
    distorted = Raster(sample.distorted.data * keep + fill_value * region)
    dm_new = Raster(sample.dm_gt.data * keep)
    return replace(
        sample,
        distorted=distorted,
        dm_gt=dm_new,
        regime="absence" if kind == "corner" else "occlusion",
        seed=int(seed),
        occ_mask=Raster(region),
    )


def make_margin_gt(sample):
    """Crisp rectified background mask: 1 = margin, 0 = document content."""
    sampled = grid_sample(sample.dm_gt, sample.bm_gt).data
    return Raster(((1.0 - sampled) >= 0.5).astype(np.float64))


def make_sample(regime, seed, canvas=432, lines=None, params=None):
    """One WarpSample of the requested regime, fully determined by ``seed``."""
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}")
    rng = np.random.default_rng([int(seed), 0x5A5])
    if lines is None:
        lines = int(rng.integers(6, 13))
    if params is None:
        params = WarpParams(canvas_size=canvas, seed=int(seed))
    doc = gen_document(seed, lines, params.canvas_size)
    sample = apply_warp(doc, gen_warp(params), seed=seed)
    if regime == "complete":
        return sample
    if regime == "overflow":
        return crop_boundaries(sample, int(rng.integers(1, 5)), seed)
    return occlude(sample, "corner" if regime == "absence" else "edge", seed)
