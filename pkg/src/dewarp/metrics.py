"""Evaluation metrics: MS-SSIM, local distortion, aligned distortion, ED/CER.

Geometric metrics run either on an exact flow (derived from ground-truth
maps) or on a flow estimated by coarse-to-fine block matching. Estimated
and exact modes are tagged in the report because their numbers are not
comparable across modes.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from dewarp import _kernels
from dewarp._kernels import MODE_CLAMP
from dewarp.geometry import (
    Raster,
    compose_maps,
    gradient_magnitude,
    identity_map,
    resize_raster,
    to_luma,
)

EXACT_FLOW = "exact-flow"
ESTIMATED_FLOW = "estimated-flow"

EVAL_SIDE = 598  # larger image side for the evaluation protocol

_MSSSIM_WEIGHTS = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])
_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2


@dataclass(frozen=True)
class FlowField:
    """Per-pixel (dx, dy) displacement in pixels, optionally masked."""

    displacement: np.ndarray
    valid: Optional[np.ndarray] = None

    def __post_init__(self):
        disp = np.ascontiguousarray(self.displacement, dtype=np.float64)
        if disp.ndim != 3 or disp.shape[2] != 2:
            raise ValueError("flow must be (H, W, 2)")
        if not np.all(np.isfinite(disp)):
            raise ValueError("flow contains non-finite values")
        disp.flags.writeable = False
        object.__setattr__(self, "displacement", disp)
        if self.valid is not None:
            valid = np.ascontiguousarray(self.valid, dtype=bool)
            if valid.shape != disp.shape[:2]:
                raise ValueError("valid mask shape must match the flow")
            valid.flags.writeable = False
            object.__setattr__(self, "valid", valid)

    @property
    def height(self):
        return self.displacement.shape[0]

    @property
    def width(self):
        return self.displacement.shape[1]


@dataclass(frozen=True)
class MetricsReport:
    image_id: str
    mode: str
    ms_ssim: Optional[float]
    ld: Optional[float]
    ad: Optional[float]
    ed: Optional[float]
    cer: Optional[float]
    eval_height: int
    eval_width: int


def _gauss_window(size=11, sigma=1.5):
    xs = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    return k / k.sum()


def _filter_valid(img, kernel):
    """Separable 'valid'-region correlation with a 1D kernel."""
    taps = kernel.size
    out = np.zeros((img.shape[0] - taps + 1, img.shape[1]))
    for i, kw in enumerate(kernel):
        out += kw * img[i:i + out.shape[0]]
    out2 = np.zeros((out.shape[0], img.shape[1] - taps + 1))
    for i, kw in enumerate(kernel):
        out2 += kw * out[:, i:i + out2.shape[1]]
    return out2


def _downsample2(img):
    h, w = (img.shape[0] // 2) * 2, (img.shape[1] // 2) * 2
    img = img[:h, :w]
    return 0.25 * (img[0::2, 0::2] + img[0::2, 1::2] + img[1::2, 0::2] + img[1::2, 1::2])


def _ssim_cs(a, b, kernel):
    mu_a = _filter_valid(a, kernel)
    mu_b = _filter_valid(b, kernel)
    var_a = _filter_valid(a * a, kernel) - mu_a * mu_a
    var_b = _filter_valid(b * b, kernel) - mu_b * mu_b
    cov = _filter_valid(a * b, kernel) - mu_a * mu_b
    cs_map = (2.0 * cov + _SSIM_C2) / (var_a + var_b + _SSIM_C2)
    lum = (2.0 * mu_a * mu_b + _SSIM_C1) / (mu_a * mu_a + mu_b * mu_b + _SSIM_C1)
    return float(np.mean(lum * cs_map)), float(np.mean(cs_map))


def ms_ssim(a, b):
    """Multi-scale SSIM with an 11x11 sigma-1.5 Gaussian window.

    Uses 5 scales when the smaller image side allows it (>= 176 px) and
    fewer scales with renormalized weights otherwise. Scales are built by
    2x2 mean pooling.
    """
    if (a.height, a.width) != (b.height, b.width):
        raise ValueError("ms_ssim inputs differ in shape")
    xa = to_luma(a).data[:, :, 0]
    xb = to_luma(b).data[:, :, 0]
    min_dim = min(xa.shape)
    scales = min(5, int(np.floor(np.log2(min_dim / 11.0))) + 1)
    if scales < 1:
        raise ValueError("images too small for an 11x11 SSIM window")
    weights = _MSSSIM_WEIGHTS[:scales]
    weights = weights / weights.sum()

    kernel = _gauss_window()
    score = 1.0
    for level in range(scales):
        ssim_mean, cs_mean = _ssim_cs(xa, xb, kernel)
        if level < scales - 1:
            score *= max(cs_mean, 0.0) ** weights[level]
            xa = _downsample2(xa)
            xb = _downsample2(xb)
        else:
            score *= max(ssim_mean, 0.0) ** weights[level]
    return float(score)


def _box_mean(values, counts, radius):
    """Windowed mean of ``values`` over valid entries, +inf where empty."""
    def boxsum(img):
        pad = np.zeros((img.shape[0] + 1, img.shape[1] + 1))
        pad[1:, 1:] = np.cumsum(np.cumsum(img, 0), 1)
        r = radius
        h, w = img.shape
        y0 = np.clip(np.arange(h) - r, 0, h)
        y1 = np.clip(np.arange(h) + r + 1, 0, h)
        x0 = np.clip(np.arange(w) - r, 0, w)
        x1 = np.clip(np.arange(w) + r + 1, 0, w)
        return (pad[y1][:, x1] - pad[y0][:, x1] - pad[y1][:, x0] + pad[y0][:, x0])

    total = boxsum(values)
    num = boxsum(counts)
    out = np.full(values.shape, np.inf)
    np.divide(total, num, out=out, where=num > 0)
    return out


def _shift_pair(a, b, dx, dy):
    """Overlap views of a and b(p + d) plus the overlap indicator."""
    h, w = a.shape
    ay0, ay1 = max(0, -dy), min(h, h - dy)
    ax0, ax1 = max(0, -dx), min(w, w - dx)
    sq = np.zeros((h, w))
    cnt = np.zeros((h, w))
    if ay1 > ay0 and ax1 > ax0:
        diff = a[ay0:ay1, ax0:ax1] - b[ay0 + dy:ay1 + dy, ax0 + dx:ax1 + dx]
        sq[ay0:ay1, ax0:ax1] = diff * diff
        cnt[ay0:ay1, ax0:ax1] = 1.0
    return sq, cnt


def _block_match(a, b, radius=4, block=9):
    """Integer residual flow minimizing mean squared block difference."""
    half = block // 2
    candidates = sorted(
        ((dx, dy) for dx in range(-radius, radius + 1) for dy in range(-radius, radius + 1)),
        key=lambda d: (abs(d[0]) + abs(d[1]), abs(d[1]), abs(d[0]), d[1], d[0]),
    )
    best_cost = None
    best_dx = np.zeros(a.shape)
    best_dy = np.zeros(a.shape)
    for dx, dy in candidates:
        sq, cnt = _shift_pair(a, b, dx, dy)
        cost = _box_mean(sq, cnt, half)
        if best_cost is None:
            best_cost = cost
            continue
        better = cost < best_cost
        best_cost = np.where(better, cost, best_cost)
        best_dx = np.where(better, dx, best_dx)
        best_dy = np.where(better, dy, best_dy)
    return np.stack([best_dx, best_dy], axis=2)


def _warp_by_flow(img, flow):
    h, w = img.shape
    ident = identity_map(h, w).coords
    pts = ident.reshape(-1, 2) + flow.reshape(-1, 2) / np.array([w, h])
    out = _kernels.sample_map(img[:, :, None], pts, MODE_CLAMP)
    return out[:, 0].reshape(h, w)


def _resize_flow(flow, h, w):
    src_h, src_w = flow.shape[:2]
    pts = identity_map(h, w).coords.reshape(-1, 2)
    out = _kernels.sample_map(flow, pts, MODE_CLAMP).reshape(h, w, 2)
    return out * np.array([w / src_w, h / src_h])


def _median3(img):
    padded = np.pad(img, 1, mode="edge")
    stack = [
        padded[dy:dy + img.shape[0], dx:dx + img.shape[1]]
        for dy in range(3)
        for dx in range(3)
    ]
    return np.median(np.stack(stack), axis=0)


def estimate_flow(a, b, levels=4):
    """Dense displacement by coarse-to-fine 9x9 block matching, +-4 px.

    Deterministic; ties favor the zero displacement, so identical images
    produce the exact zero field.
    """
    if (a.height, a.width) != (b.height, b.width):
        raise ValueError("estimate_flow inputs differ in shape")
    xa = to_luma(a).data[:, :, 0]
    xb = to_luma(b).data[:, :, 0]
    pyr_a, pyr_b = [xa], [xb]
    for _ in range(levels - 1):
        if min(pyr_a[-1].shape) < 24:
            break
        pyr_a.append(_downsample2(pyr_a[-1]))
        pyr_b.append(_downsample2(pyr_b[-1]))

    flow = np.zeros(pyr_a[-1].shape + (2,))
    for level in range(len(pyr_a) - 1, -1, -1):
        la, lb = pyr_a[level], pyr_b[level]
        if flow.shape[:2] != la.shape:
            flow = _resize_flow(flow, *la.shape)
        warped = _warp_by_flow(lb, flow)
        flow = flow + _block_match(la, warped)
    flow = np.stack([_median3(flow[:, :, 0]), _median3(flow[:, :, 1])], axis=2)
    return FlowField(flow)


def exact_flow_from_maps(bm_pred, fm_gt):
    """Endpoint-error flow on the rectified canvas from ground-truth maps."""
    composed, valid = compose_maps(fm_gt, bm_pred)
    ident = identity_map(bm_pred.height, bm_pred.width)
    disp = (composed.coords - ident.coords) * np.array(
        [bm_pred.width, bm_pred.height], dtype=np.float64
    )
    return FlowField(disp, valid)


def _selection(flow, mask):
    sel = np.ones(flow.displacement.shape[:2], dtype=bool)
    if flow.valid is not None:
        sel &= flow.valid
    if mask is not None:
        sel &= mask.data[:, :, 0] > 0.5
    return sel


def ld(flow, mask=None):
    """Mean displacement magnitude in pixels over the selected domain."""
    sel = _selection(flow, mask)
    if not sel.any():
        raise ValueError("no pixels selected for ld")
    mags = np.linalg.norm(flow.displacement, axis=2)
    return float(mags[sel].mean())


def ad(flow, gt_image, mask=None):
    """Residual distortion after a weighted global scale+translation fit.

    Weights are the ground-truth gradient magnitudes (mean-normalized);
    the result is the weighted mean residual norm over the image diagonal.
    """
    h, w = flow.height, flow.width
    if (gt_image.height, gt_image.width) != (h, w):
        raise ValueError("flow and gt_image differ in shape")
    weights = gradient_magnitude(gt_image).data[:, :, 0].copy()
    weights[~_selection(flow, mask)] = 0.0
    wsum = weights.sum()
    if wsum <= 0.0:
        raise ValueError("aligned distortion needs non-zero gradient weights")
    weights = weights / (wsum / weights.size)

    ys, xs = np.mgrid[0:h, 0:w]
    p = np.stack([xs + 0.5, ys + 0.5], axis=2).reshape(-1, 2)
    y = p + flow.displacement.reshape(-1, 2)
    wf = weights.reshape(-1)
    wtot = wf.sum()
    p_bar = (wf[:, None] * p).sum(axis=0) / wtot
    y_bar = (wf[:, None] * y).sum(axis=0) / wtot
    pc = p - p_bar
    yc = y - y_bar
    scale = float((wf * (pc * yc).sum(axis=1)).sum() / (wf * (pc * pc).sum(axis=1)).sum())
    shift = y_bar - scale * p_bar
    resid = scale * p + shift - y
    mean_resid = float((wf * np.linalg.norm(resid, axis=1)).sum() / wtot)
    return mean_resid / float(np.hypot(h, w))


def edit_distance(hyp, ref):
    """Levenshtein distance with unit insert/delete/replace costs."""
    if len(hyp) < len(ref):
        hyp, ref = ref, hyp
    if not ref:
        return len(hyp)
    previous = list(range(len(ref) + 1))
    for i, ch in enumerate(hyp):
        current = [i + 1]
        for j, cr in enumerate(ref):
            current.append(
                min(previous[j + 1] + 1, current[j] + 1, previous[j] + (ch != cr))
            )
        previous = current
    return previous[-1]


def cer(hyp, ref):
    """Character error rate: edit distance over reference length."""
    if not ref:
        raise ValueError("reference string is empty")
    return edit_distance(hyp, ref) / len(ref)


def evaluate_sample(rectified, gt, exact_flow=None, texts=None, image_id=""):
    """All applicable metrics for one rectified/ground-truth pair.

    Images are resized so the ground truth's larger side is 598 px; the
    flow is exact when provided, otherwise estimated by block matching.
    """
    scale = EVAL_SIDE / max(gt.height, gt.width)
    eval_h = max(2, int(round(gt.height * scale)))
    eval_w = max(2, int(round(gt.width * scale)))
    a = resize_raster(to_luma(rectified), eval_h, eval_w)
    b = resize_raster(to_luma(gt), eval_h, eval_w)

    score = ms_ssim(a, b)
    if exact_flow is not None:
        disp = _resize_flow(exact_flow.displacement, eval_h, eval_w)
        valid = None
        if exact_flow.valid is not None:
            v = _kernels.sample_map(
                exact_flow.valid.astype(np.float64)[:, :, None],
                identity_map(eval_h, eval_w).coords.reshape(-1, 2),
                MODE_CLAMP,
            )
            valid = v[:, 0].reshape(eval_h, eval_w) > 0.999
        flow = FlowField(disp, valid)
        mode = EXACT_FLOW
    else:
        flow = estimate_flow(a, b)
        mode = ESTIMATED_FLOW

    ed_val = cer_val = None
    if texts:
        eds = [float(edit_distance(hyp, ref)) for hyp, ref in texts]
        cers = [cer(hyp, ref) for hyp, ref in texts]
        ed_val = float(np.mean(eds))
        cer_val = float(np.mean(cers))

    return MetricsReport(
        image_id=image_id,
        mode=mode,
        ms_ssim=score,
        ld=ld(flow),
        ad=ad(flow, b),
        ed=ed_val,
        cer=cer_val,
        eval_height=eval_h,
        eval_width=eval_w,
    )
