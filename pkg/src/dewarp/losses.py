"""Dewarp objective: backward-map L1, text straightness, margin consistency.

Every term returns (scalar, gradient field) where the gradient is taken with
respect to the full-resolution backward map's coordinate values. Reductions
are means so the term weights stay resolution-independent. The text term is
measured in rectified-frame pixels; the margin term samples a blurred
background mask with out-of-range fill 1 (beyond the photo is background).
"""

from dataclasses import dataclass

import numpy as np

from dewarp import _kernels
from dewarp._kernels import MODE_EXTRAPOLATE, MODE_FILL
from dewarp.errors import NumericError
from dewarp.geometry import BACKWARD, FORWARD, Raster, gaussian_blur


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.1  # margin term
    beta: float = 0.5   # text term

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass(frozen=True)
class LossReport:
    l_b: float
    l_m: float
    l_t: float
    l_total: float
    grad: np.ndarray

    def __post_init__(self):
        grad = np.ascontiguousarray(self.grad, dtype=np.float64)
        grad.flags.writeable = False
        object.__setattr__(self, "grad", grad)


@dataclass(frozen=True)
class RemappedLine:
    """A text line pushed through z_p then fm_gt, back onto the rectified frame."""

    points: np.ndarray  # (N, 2) normalized, rectified frame
    valid: np.ndarray   # (N,) bool; False where z_p left fm_gt's domain
    line_id: int


def soft_background(dm_gt, sigma=2.0):
    """Blurred background map 1 - DM_gt; gives the margin term its gradient."""
    return gaussian_blur(Raster(1.0 - dm_gt.data), sigma)


def loss_bm(z_p, z_gt):
    """Mean absolute difference between predicted and ground-truth maps."""
    if (z_p.height, z_p.width) != (z_gt.height, z_gt.width):
        raise ValueError("backward maps differ in shape")
    if z_p.kind != BACKWARD or z_gt.kind != BACKWARD:
        raise ValueError("loss_bm expects two backward maps")
    diff = z_p.coords - z_gt.coords
    loss = float(np.mean(np.abs(diff)))
    grad = np.sign(diff) / diff.size
    return loss, grad


def remap_control_points(z_p, fm_gt, textlines):
    """Map rectified control points to the distorted image and back.

    Points whose distorted-image position lands outside fm_gt's domain are
    flagged invalid.
    """
    if z_p.kind != BACKWARD:
        raise ValueError("z_p must be a backward map")
    if fm_gt.kind != FORWARD:
        raise ValueError("fm_gt must be a forward map")
    out = []
    for tl in textlines:
        q = _kernels.sample_map(z_p.coords, tl.points, MODE_EXTRAPOLATE)
        valid = (
            (q[:, 0] >= 0.0) & (q[:, 0] <= 1.0)
            & (q[:, 1] >= 0.0) & (q[:, 1] <= 1.0)
        )
        pts = _kernels.sample_map(fm_gt.coords, q, MODE_EXTRAPOLATE)
        out.append(RemappedLine(points=pts, valid=valid, line_id=tl.line_id))
    return out


def _bilinear_cell(coord, n):
    """Value-path cell index and fraction for extrapolate-mode sampling."""
    p = coord * n - 0.5
    i0 = np.clip(np.floor(p), 0, n - 2).astype(np.int64)
    return i0, p - i0


def loss_text(z_p, fm_gt, textlines):
    """Mean squared vertical deviation of remapped points from GT line means.

    Measured in rectified-frame pixels. Lines with fewer than two valid
    points are skipped; each line is averaged over its own valid count.
    """
    h, w = z_p.height, z_p.width
    grad = np.zeros((h, w, 2))
    per_line = []
    used = 0
    total = 0.0
    for tl in textlines:
        pts = tl.points
        q = _kernels.sample_map(z_p.coords, pts, MODE_EXTRAPOLATE)
        valid = (
            (q[:, 0] >= 0.0) & (q[:, 0] <= 1.0)
            & (q[:, 1] >= 0.0) & (q[:, 1] <= 1.0)
        )
        k = int(valid.sum())
        per_line.append((pts, q, valid, k))
        if k >= 2:
            used += 1
    if used == 0:
        raise ValueError("no text line has two or more valid remapped points")

    for pts, q, valid, k in per_line:
        if k < 2:
            continue
        fy, dfy_dx, dfy_dy = _kernels.sample_map_grad(
            fm_gt.coords, q, MODE_EXTRAPOLATE
        )
        y_px = fy[:, 1] * h
        gt_mean_px = pts[:, 1].mean() * h
        err = np.where(valid, y_px - gt_mean_px, 0.0)
        total += float(np.sum(err * err)) / k

        # d loss / dq, then scatter through the fixed interpolation of z_p at pts
        coeff = 2.0 * err / (used * k)
        dq_x = coeff * dfy_dx[:, 1] * h
        dq_y = coeff * dfy_dy[:, 1] * h
        x0, fx = _bilinear_cell(pts[:, 0], w)
        y0, fy_frac = _bilinear_cell(pts[:, 1], h)
        for dy in (0, 1):
            for dx in (0, 1):
                wgt = (fx if dx else 1.0 - fx) * (fy_frac if dy else 1.0 - fy_frac)
                np.add.at(grad, (y0 + dy, x0 + dx, 0), wgt * dq_x)
                np.add.at(grad, (y0 + dy, x0 + dx, 1), wgt * dq_y)
    return total / used, grad


def loss_margin(z_p, background_soft, m_gt):
    """Mean absolute difference between sampled and ground-truth margins.

    The soft background mask is sampled through z_p with out-of-range fill 1.
    """
    h, w = z_p.height, z_p.width
    if (m_gt.height, m_gt.width) != (h, w):
        raise ValueError("m_gt shape must match the backward map")
    vals, dx, dy = _kernels.sample_map_grad(
        background_soft.data, z_p.coords.reshape(-1, 2), MODE_FILL, 1.0
    )
    m_p = vals[:, 0].reshape(h, w)
    diff = m_p - m_gt.data[:, :, 0]
    loss = float(np.mean(np.abs(diff)))
    coeff = np.sign(diff) / diff.size
    grad = np.empty((h, w, 2))
    grad[:, :, 0] = coeff * dx[:, 0].reshape(h, w)
    grad[:, :, 1] = coeff * dy[:, 0].reshape(h, w)
    return loss, grad


def loss_total(
    z_p,
    z_gt=None,
    fm_gt=None,
    textlines=None,
    background_soft=None,
    m_gt=None,
    weights=LossWeights(),
):
    """Weighted sum of the active terms; inactive terms contribute exactly 0."""
    have_b = z_gt is not None
    have_t = fm_gt is not None and textlines
    have_m = background_soft is not None and m_gt is not None
    if not (have_b or have_t or have_m):
        raise ValueError("no loss term has inputs")

    grad = np.zeros((z_p.height, z_p.width, 2))
    l_b = l_m = l_t = 0.0
    if have_b:
        l_b, g = loss_bm(z_p, z_gt)
        grad += g
    if have_m:
        l_m, g = loss_margin(z_p, background_soft, m_gt)
        grad += weights.alpha * g
    if have_t:
        l_t, g = loss_text(z_p, fm_gt, textlines)
        grad += weights.beta * g
    l_total = l_b + weights.alpha * l_m + weights.beta * l_t
    return LossReport(l_b=l_b, l_m=l_m, l_t=l_t, l_total=l_total, grad=grad)


def gradcheck(objective, params, eps=1e-4, max_checks=512, seed=0):
    """Max relative error between analytic and central-difference gradients.

    ``objective`` maps a flat parameter vector to (loss, gradient vector).
    At most ``max_checks`` randomly chosen parameters are probed.
    """
    params = np.asarray(params, dtype=np.float64)
    loss0, grad = objective(params)
    grad = np.asarray(grad, dtype=np.float64).reshape(-1)
    if not np.isfinite(loss0) or not np.all(np.isfinite(grad)):
        raise NumericError("objective produced non-finite loss or gradient")

    rng = np.random.default_rng(seed)
    n = params.size
    idx = rng.choice(n, size=min(max_checks, n), replace=False)
    worst = 0.0
    for i in idx:
        probe = params.copy()
        probe[i] += eps
        f_plus, _ = objective(probe)
        probe[i] -= 2.0 * eps
        f_minus, _ = objective(probe)
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError("objective produced non-finite loss during probing")
        numeric = (f_plus - f_minus) / (2.0 * eps)
        rel = abs(grad[i] - numeric) / max(abs(grad[i]), abs(numeric), 1e-8)
        worst = max(worst, rel)
    return worst
