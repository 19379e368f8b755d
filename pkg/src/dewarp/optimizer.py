"""Per-image rectification: adaptive first-order descent on a control grid.

The decision variables are (dx, dy) offsets on a coarse lattice whose
corner-aligned bilinear upsampling yields the full-resolution backward map.
Optimization is coarse-to-fine (8x8 -> 16x16 -> configured grid) with a
step-halving safeguard that keeps the accepted loss trace monotone.
"""

from collections import namedtuple
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from dewarp.errors import NumericError
from dewarp.geometry import BACKWARD, CoordMap, grid_sample, identity_map
from dewarp.losses import LossWeights, loss_total

TraceEntry = namedtuple("TraceEntry", "l_b l_m l_t l_total")


@dataclass(frozen=True)
class ControlGrid:
    """Coarse (dx, dy) displacement lattice, normalized units."""

    offsets: np.ndarray

    def __post_init__(self):
        off = np.ascontiguousarray(self.offsets, dtype=np.float64)
        if off.ndim != 3 or off.shape[2] != 2:
            raise ValueError("control grid offsets must be (g_h, g_w, 2)")
        if off.shape[0] < 2 or off.shape[1] < 2:
            raise ValueError("control grid needs at least 2x2 nodes")
        if not np.all(np.isfinite(off)):
            raise ValueError("control grid offsets must be finite")
        off.flags.writeable = False
        object.__setattr__(self, "offsets", off)

    @property
    def g_h(self):
        return self.offsets.shape[0]

    @property
    def g_w(self):
        return self.offsets.shape[1]


@dataclass(frozen=True)
class OptConfig:
    g_h: int = 29
    g_w: int = 29
    max_iters: int = 400
    learning_rate: float = 0.02
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    plateau_patience: int = 30
    plateau_rtol: float = 1e-5
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")


@dataclass(frozen=True)
class DewarpProblem:
    """Inputs of the integrated loss for one image."""

    height: int
    width: int
    z_gt: Optional[CoordMap] = None
    fm_gt: Optional[CoordMap] = None
    textlines: Optional[tuple] = None
    background_soft: Optional[object] = None
    m_gt: Optional[object] = None


@dataclass(frozen=True)
class OptResult:
    bm: CoordMap
    loss_trace: tuple
    iterations_run: int
    converged: bool


def init_grid(g_h, g_w):
    """All-zero offsets: the identity map."""
    if g_h < 2 or g_w < 2:
        raise ValueError("control grid needs at least 2x2 nodes")
    return ControlGrid(np.zeros((g_h, g_w, 2)))


def _pixel_weights(n_out, n_nodes):
    """Corner-aligned interpolation weights from grid nodes to pixel centers."""
    s = (np.arange(n_out) + 0.5) / n_out
    t = s * (n_nodes - 1)
    i0 = np.clip(np.floor(t), 0, n_nodes - 2).astype(np.int64)
    f = t - i0
    mat = np.zeros((n_out, n_nodes))
    mat[np.arange(n_out), i0] = 1.0 - f
    mat[np.arange(n_out), i0 + 1] = f
    return mat


def _node_weights(n_out, n_in):
    """Corner-aligned node-to-node interpolation (grid prolongation)."""
    t = np.arange(n_out) / (n_out - 1) * (n_in - 1)
    i0 = np.clip(np.floor(t), 0, n_in - 2).astype(np.int64)
    f = t - i0
    mat = np.zeros((n_out, n_in))
    mat[np.arange(n_out), i0] = 1.0 - f
    mat[np.arange(n_out), i0 + 1] += f
    return mat


def expand(grid, h, w):
    """Bilinear upsampling of identity + offsets to full resolution.

    Exact at grid node positions and linear in the offsets, so loss
    gradients pull back through the transposed weights (see ``pullback``).
    """
    if h < 2 or w < 2:
        raise ValueError("expansion target needs height >= 2 and width >= 2")
    wy = _pixel_weights(h, grid.g_h)
    wx = _pixel_weights(w, grid.g_w)
    off = np.stack([wy @ grid.offsets[:, :, c] @ wx.T for c in (0, 1)], axis=2)
    return CoordMap(identity_map(h, w).coords + off, BACKWARD)


def pullback(grad_field, g_h, g_w):
    """Transpose of ``expand``: full-resolution gradient -> grid gradient."""
    h, w = grad_field.shape[:2]
    wy = _pixel_weights(h, g_h)
    wx = _pixel_weights(w, g_w)
    return np.stack([wy.T @ grad_field[:, :, c] @ wx for c in (0, 1)], axis=2)


def prolong(grid, g_h, g_w):
    """Resample a control grid onto a finer lattice (coarse-to-fine step)."""
    wy = _node_weights(g_h, grid.g_h)
    wx = _node_weights(g_w, grid.g_w)
    off = np.stack([wy @ grid.offsets[:, :, c] @ wx.T for c in (0, 1)], axis=2)
    return ControlGrid(off)


def _levels(cfg):
    """Coarse-to-fine grid sizes by repeated halving, coarsest first.

    Halving to (g + 1) // 2 keeps successive lattices nested (exactly so
    when g_fine = 2 * g_coarse - 1, as with the 8 -> 15 -> 29 default), so
    prolongation does not perturb the expanded map.
    """
    sizes = [(cfg.g_h, cfg.g_w)]
    gh, gw = cfg.g_h, cfg.g_w
    while gh > 8 or gw > 8:
        gh = max(8, (gh + 1) // 2)
        gw = max(8, (gw + 1) // 2)
        sizes.append((gh, gw))
        if gh == 8 and gw == 8:
            break
    return sizes[::-1]


def optimize(problem, cfg=OptConfig()):
    """Fit a backward map to the active loss terms of ``problem``.

    Adam-style updates with a step-halving safeguard (at most 5 halvings;
    a step that still increases the loss is rejected outright, keeping the
    accepted trace monotone within 1e-9).
    """
    h, w = problem.height, problem.width
    b1, b2 = cfg.betas

    def evaluate(grid):
        bm = expand(grid, h, w)
        return loss_total(
            bm,
            z_gt=problem.z_gt,
            fm_gt=problem.fm_gt,
            textlines=problem.textlines,
            background_soft=problem.background_soft,
            m_gt=problem.m_gt,
            weights=cfg.weights,
        )

    levels = _levels(cfg)
    level_idx = 0
    grid = init_grid(*levels[0])
    report = evaluate(grid)
    if not np.isfinite(report.l_total):
        raise NumericError("loss is non-finite at initialization")
    grad = pullback(report.grad, grid.g_h, grid.g_w)

    m = np.zeros_like(grid.offsets)
    v = np.zeros_like(grid.offsets)
    t = 0
    trace = []
    best = report.l_total
    stall = 0
    converged = False

    for _ in range(cfg.max_iters):
        t += 1
        m = b1 * m + (1.0 - b1) * grad
        v = b2 * v + (1.0 - b2) * grad * grad
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        step = cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)

        accepted = None
        scale = 1.0
        for _ in range(6):
            cand = ControlGrid(np.clip(grid.offsets - scale * step, -0.5, 0.5))
            cand_report = evaluate(cand)
            if not np.isfinite(cand_report.l_total):
                err = NumericError("loss became non-finite during optimization")
                err.last_result = _result(grid, h, w, trace, converged=False)
                raise err
            if cand_report.l_total <= report.l_total + 1e-12:
                accepted = (cand, cand_report)
                break
            scale *= 0.5
        if accepted is not None:
            grid, report = accepted
            grad = pullback(report.grad, grid.g_h, grid.g_w)
        trace.append(TraceEntry(report.l_b, report.l_m, report.l_t, report.l_total))

        if best - report.l_total > cfg.plateau_rtol * max(best, 1e-12):
            best = report.l_total
            stall = 0
        else:
            stall += 1

        if report.l_total == 0.0:
            converged = True
            break
        if stall >= cfg.plateau_patience:
            if level_idx + 1 == len(levels):
                converged = True
                break
            # refinement is loss-neutral for nested lattices; guard the
            # switch so a non-nesting config cannot break monotonicity
            fine = prolong(grid, *levels[level_idx + 1])
            fine_report = evaluate(fine)
            if fine_report.l_total > report.l_total + 1e-12:
                converged = True
                break
            level_idx += 1
            grid, report = fine, fine_report
            grad = pullback(report.grad, grid.g_h, grid.g_w)
            m = np.zeros_like(grid.offsets)
            v = np.zeros_like(grid.offsets)
            t = 0
            best = report.l_total
            stall = 0

    return _result(grid, h, w, trace, converged)


def _result(grid, h, w, trace, converged):
    return OptResult(
        bm=expand(grid, h, w),
        loss_trace=tuple(trace),
        iterations_run=len(trace),
        converged=converged,
    )


def rectify(image, bm):
    """Dewarp an image by sampling it through a backward map."""
    if bm.kind != BACKWARD:
        raise ValueError("rectify expects a backward map")
    return grid_sample(image, bm)
