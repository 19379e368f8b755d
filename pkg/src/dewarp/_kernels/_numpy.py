"""Pure-numpy bilinear sampling kernels (fallback backend).

Coordinates are normalized to [0, 1] with the pixel-center convention:
pixel (row v, col u) of an H x W field sits at ((u + 0.5) / W, (v + 0.5) / H).
The compiled backend in ``_core.pyx`` mirrors these formulas term for term.
"""

import numpy as np

# Out-of-range policies for sample sites.
MODE_FILL = 0         # virtual constant padding outside the field
MODE_EXTRAPOLATE = 1  # linear extension of the boundary cell (coordinate fields)
MODE_CLAMP = 2        # border replication (image warping in flow estimation)


def sample_map(field, pts, mode=MODE_FILL, fill=0.0):
    """Bilinear sample of an (H, W, C) field at N normalized points.

    Returns an (N, C) array. ``mode`` selects the out-of-range policy.
    """
    field = np.ascontiguousarray(field, dtype=np.float64)
    pts = np.asarray(pts, dtype=np.float64)
    h, w, c = field.shape
    px = pts[:, 0] * w - 0.5
    py = pts[:, 1] * h - 0.5

    if mode == MODE_CLAMP:
        px = np.clip(px, 0.0, w - 1.0)
        py = np.clip(py, 0.0, h - 1.0)

    if mode == MODE_EXTRAPOLATE:
        x0 = np.clip(np.floor(px), 0, w - 2).astype(np.int64)
        y0 = np.clip(np.floor(py), 0, h - 2).astype(np.int64)
    else:
        x0 = np.floor(px).astype(np.int64)
        y0 = np.floor(py).astype(np.int64)
    fx = px - x0
    fy = py - y0

    out = np.zeros((pts.shape[0], c), dtype=np.float64)
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        xi = x0 + dx
        yi = y0 + dy
        wgt = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
        if mode == MODE_FILL:
            inb = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            vals = np.where(
                inb[:, None],
                field[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)],
                fill,
            )
        else:
            vals = field[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        out += wgt[:, None] * vals
    return out


def sample_map_grad(field, pts, mode=MODE_FILL, fill=0.0):
    """Bilinear sample plus partial derivatives w.r.t. the normalized coords.

    Returns (values, d/dx, d/dy), each (N, C). At exact cell boundaries the
    lower-indexed cell's derivative is used, so the same (value, grad) pair
    is consistent there by continuity.
    """
    field = np.ascontiguousarray(field, dtype=np.float64)
    pts = np.asarray(pts, dtype=np.float64)
    h, w, c = field.shape
    px = pts[:, 0] * w - 0.5
    py = pts[:, 1] * h - 0.5

    if mode == MODE_CLAMP:
        px = np.clip(px, 0.0, w - 1.0)
        py = np.clip(py, 0.0, h - 1.0)

    x0f = np.floor(px)
    y0f = np.floor(py)
    # lower-cell tie-break at integer coordinates
    x0f[px == x0f] -= 1.0
    y0f[py == y0f] -= 1.0
    if mode != MODE_FILL:
        x0f = np.clip(x0f, 0, w - 2)
        y0f = np.clip(y0f, 0, h - 2)
    x0 = x0f.astype(np.int64)
    y0 = y0f.astype(np.int64)
    fx = px - x0
    fy = py - y0

    n = pts.shape[0]
    corners = np.empty((2, 2, n, c), dtype=np.float64)
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            vals = field[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
            if mode == MODE_FILL:
                inb = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
                vals = np.where(inb[:, None], vals, fill)
            corners[dy, dx] = vals

    fx1 = (1.0 - fx)[:, None]
    fy1 = (1.0 - fy)[:, None]
    fxc = fx[:, None]
    fyc = fy[:, None]
    val = (fy1 * (fx1 * corners[0, 0] + fxc * corners[0, 1])
           + fyc * (fx1 * corners[1, 0] + fxc * corners[1, 1]))
    # d/dpx then scaled by w (px = x*w - 0.5); clamp mode keeps the interior
    # derivative even at the clamp boundary (one-sided limit).
    dpx = fy1 * (corners[0, 1] - corners[0, 0]) + fyc * (corners[1, 1] - corners[1, 0])
    dpy = fx1 * (corners[1, 0] - corners[0, 0]) + fxc * (corners[1, 1] - corners[0, 1])
    return val, dpx * w, dpy * h
