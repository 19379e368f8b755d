"""Batch command-line surface: synth, dewarp, eval, gradcheck.

Exit codes: 0 ok, 2 bad arguments, 3 generation failure, 4 numeric failure,
5 no active loss term, 6 unreadable inputs, 7 gradcheck gate failure.
"""

import argparse
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from dewarp import io, losses, metrics, synth
from dewarp.errors import GenerationError, NumericError
from dewarp.geometry import CoordMap, Raster, identity_map
from dewarp.losses import LossWeights, gradcheck, soft_background
from dewarp.optimizer import DewarpProblem, OptConfig, optimize, rectify

DEFAULT_REGIMES = {
    "complete": 41 / 188,
    "overflow": 107 / 188,
    "absence": 20 / 188,
    "occlusion": 20 / 188,
}

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_GENERATION = 3
EXIT_NUMERIC = 4
EXIT_NO_LOSS = 5
EXIT_UNREADABLE = 6
EXIT_GRADCHECK = 7


def _fail(message, code):
    print(f"error: {message}", file=sys.stderr)
    return code


def _resolve_seed(value):
    if value is not None:
        return int(value)
    env = os.environ.get("DEWARP_SEED")
    return int(env) if env else 0


def _sample_seed(root_seed, index):
    ss = np.random.SeedSequence([int(root_seed), int(index)])
    return int(ss.generate_state(1, np.uint64)[0])


def _parse_regimes(spec):
    weights = {}
    for part in spec.split(","):
        name, _, value = part.partition(":")
        name = name.strip()
        if name not in synth.REGIMES:
            raise ValueError(f"unknown regime {name!r}")
        weights[name] = float(value)
    if abs(sum(weights.values()) - 1.0) > 1e-6:
        raise ValueError("regime weights must sum to 1")
    return weights


def _regime_quota(weights, count, seed):
    """Largest-remainder quota, deterministically shuffled."""
    names = [r for r in synth.REGIMES if r in weights]
    raw = np.array([weights[r] * count for r in names])
    base = np.floor(raw).astype(int)
    rem = count - base.sum()
    order = np.argsort(-(raw - base), kind="stable")
    for i in order[:rem]:
        base[i] += 1
    assignments = [name for name, n in zip(names, base) for _ in range(n)]
    perm = np.random.default_rng([int(seed), 0x517]).permutation(count)
    return [assignments[i] for i in perm]


# ---------------------------------------------------------------------------
# synth

def cmd_synth(args):
    seed = _resolve_seed(args.seed)
    try:
        weights = _parse_regimes(args.regimes)
    except ValueError as exc:
        return _fail(str(exc), EXIT_USAGE)
    if args.count < 1:
        return _fail("--count must be >= 1", EXIT_USAGE)

    regimes = _regime_quota(weights, args.count, seed)
    os.makedirs(args.out, exist_ok=True)

    def emit(index):
        sample = synth.make_sample(
            regimes[index], _sample_seed(seed, index), canvas=args.canvas
        )
        write_sample_dir(os.path.join(args.out, f"{index:04d}"), sample)

    try:
        if args.jobs > 1:
            with ThreadPoolExecutor(max_workers=args.jobs) as pool:
                list(pool.map(emit, range(args.count)))
        else:
            for index in range(args.count):
                emit(index)
    except GenerationError as exc:
        return _fail(str(exc), EXIT_GENERATION)
    print(f"wrote {args.count} samples to {args.out}")
    return EXIT_OK


def write_sample_dir(path, sample):
    os.makedirs(path, exist_ok=True)
    io.save_png(os.path.join(path, "distorted.png"), sample.distorted)
    io.save_png(os.path.join(path, "dm_gt.png"), sample.dm_gt)
    io.save_dwmap(os.path.join(path, "bm_gt.dwmap"), sample.bm_gt)
    io.save_dwmap(os.path.join(path, "fm_gt.dwmap"), sample.fm_gt)
    io.save_png(os.path.join(path, "m_gt.png"), synth.make_margin_gt(sample))
    io.save_textlines(os.path.join(path, "textlines.txt"), sample.textlines)
    meta = [
        f"regime={sample.regime}",
        f"seed={sample.seed}",
        f"height={sample.distorted.height}",
        f"width={sample.distorted.width}",
    ]
    io.save_text(os.path.join(path, "meta.txt"), "\n".join(meta) + "\n")


def read_sample_dir(path):
    def p(name):
        return os.path.join(path, name)

    return {
        "distorted": io.load_png(p("distorted.png")),
        "dm_gt": io.load_png(p("dm_gt.png")),
        "bm_gt": io.load_dwmap(p("bm_gt.dwmap")),
        "fm_gt": io.load_dwmap(p("fm_gt.dwmap")),
        "m_gt": io.load_png(p("m_gt.png")),
        "textlines": io.load_textlines(p("textlines.txt")),
    }


# ---------------------------------------------------------------------------
# dewarp

def build_problem(
    height,
    width,
    *,
    bm_gt=None,
    fm_gt=None,
    textlines=None,
    dm_gt=None,
    m_gt=None,
    supervised=False,
    use_text=True,
    use_margin=True,
):
    """Assemble the loss inputs the requested switches leave active."""
    z_gt = bm_gt if supervised else None
    tl = tuple(textlines) if (use_text and textlines and fm_gt is not None) else None
    fm = fm_gt if tl else None
    bg = mg = None
    if use_margin and dm_gt is not None and m_gt is not None:
        bg = soft_background(dm_gt)
        mg = m_gt
    if z_gt is None and tl is None and bg is None:
        return None
    return DewarpProblem(
        height=height,
        width=width,
        z_gt=z_gt,
        fm_gt=fm,
        textlines=tl,
        background_soft=bg,
        m_gt=mg,
    )


def cmd_dewarp(args):
    seed = _resolve_seed(args.seed)
    try:
        if args.sample:
            files = read_sample_dir(args.sample)
        else:
            if not args.image or not args.mask:
                return _fail("need --sample or both --image and --mask", EXIT_USAGE)
            files = {
                "distorted": io.load_png(args.image),
                "dm_gt": io.load_png(args.mask),
                "bm_gt": io.load_dwmap(args.bm_gt) if args.bm_gt else None,
                "fm_gt": io.load_dwmap(args.fm_gt) if args.fm_gt else None,
                "m_gt": io.load_png(args.m_gt) if args.m_gt else None,
                "textlines": io.load_textlines(args.textlines) if args.textlines else None,
            }
    except (OSError, ValueError) as exc:
        return _fail(str(exc), EXIT_UNREADABLE)

    if args.supervised and files["bm_gt"] is None:
        return _fail("--supervised needs a ground-truth backward map", EXIT_USAGE)

    if files["bm_gt"] is not None:
        height, width = files["bm_gt"].height, files["bm_gt"].width
    elif files["m_gt"] is not None:
        height, width = files["m_gt"].height, files["m_gt"].width
    else:
        side = max(files["distorted"].height, files["distorted"].width)
        height = width = side
    if files["m_gt"] is None and not args.no_margin:
        # self-supervised margin prior: no background should remain
        files["m_gt"] = Raster(np.zeros((height, width, 1)))

    problem = build_problem(
        height,
        width,
        bm_gt=files["bm_gt"],
        fm_gt=files["fm_gt"],
        textlines=files["textlines"],
        dm_gt=files["dm_gt"],
        m_gt=files["m_gt"],
        supervised=args.supervised,
        use_text=not args.no_text,
        use_margin=not args.no_margin,
    )
    if problem is None:
        return _fail("all loss terms disabled or missing inputs", EXIT_NO_LOSS)

    cfg = OptConfig(
        g_h=args.grid,
        g_w=args.grid,
        max_iters=args.iters,
        learning_rate=args.lr,
        weights=LossWeights(alpha=args.alpha, beta=args.beta),
        seed=seed,
    )
    try:
        result = optimize(problem, cfg)
    except NumericError as exc:
        return _fail(str(exc), EXIT_NUMERIC)

    os.makedirs(args.out, exist_ok=True)
    io.save_dwmap(os.path.join(args.out, "bm_pred.dwmap"), result.bm)
    io.save_png(
        os.path.join(args.out, "rectified.png"),
        rectify(files["distorted"], result.bm),
    )
    rows = ["iteration,l_b,l_m,l_t,l_total"]
    for i, entry in enumerate(result.loss_trace):
        rows.append(
            f"{i},{entry.l_b:.9g},{entry.l_m:.9g},{entry.l_t:.9g},{entry.l_total:.9g}"
        )
    io.save_text(os.path.join(args.out, "trace.csv"), "\n".join(rows) + "\n")
    final = result.loss_trace[-1]
    print(
        f"iterations={result.iterations_run} converged={result.converged} "
        f"l_total={final.l_total:.6g} l_b={final.l_b:.6g}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval

def _fmt(value):
    return "-" if value is None else f"{value:.6f}"


def cmd_eval(args):
    pairs = []
    try:
        if args.pairs:
            with open(args.pairs, "r", encoding="utf-8") as fh:
                for line in fh:
                    line = line.rstrip("\n")
                    if not line.strip():
                        continue
                    cols = line.split("\t")
                    if len(cols) not in (2, 4):
                        return _fail(
                            "pairs file rows need 2 or 4 tab-separated paths", EXIT_USAGE
                        )
                    pairs.append(cols + [None] * (4 - len(cols)))
        elif args.rectified and args.gt:
            pairs.append([args.rectified, args.gt, args.bm, args.fm])
        else:
            return _fail("need --pairs or both --rectified and --gt", EXIT_USAGE)

        texts = None
        if args.texts:
            texts = []
            with open(args.texts, "r", encoding="utf-8") as fh:
                for line in fh:
                    line = line.rstrip("\n")
                    if not line:
                        continue
                    hyp, _, ref = line.partition("\t")
                    texts.append((hyp, ref))
            if len(texts) != len(pairs):
                return _fail(
                    f"{len(texts)} text pairs for {len(pairs)} image pairs", EXIT_USAGE
                )

        reports = []
        for i, (rect_path, gt_path, bm_path, fm_path) in enumerate(pairs):
            rect = io.load_png(rect_path)
            gt = io.load_png(gt_path)
            flow = None
            if bm_path and fm_path:
                flow = metrics.exact_flow_from_maps(
                    io.load_dwmap(bm_path), io.load_dwmap(fm_path)
                )
            reports.append(
                metrics.evaluate_sample(
                    rect,
                    gt,
                    exact_flow=flow,
                    texts=[texts[i]] if texts else None,
                    image_id=os.path.basename(rect_path),
                )
            )
    except (OSError, ValueError) as exc:
        return _fail(str(exc), EXIT_UNREADABLE)

    rows = ["image_id,mode,ms_ssim,ld,ad,ed,cer"]
    for r in reports:
        rows.append(
            f"{r.image_id},{r.mode},{_fmt(r.ms_ssim)},{_fmt(r.ld)},"
            f"{_fmt(r.ad)},{_fmt(r.ed)},{_fmt(r.cer)}"
        )
    modes = sorted({r.mode for r in reports})
    cells = [modes[0] if len(modes) == 1 else "-"]
    for name in ("ms_ssim", "ld", "ad", "ed", "cer"):
        vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        cells.append(_fmt(float(np.mean(vals)) if vals else None))
    mean_row = "MEAN," + ",".join(cells)
    rows.append(mean_row)
    io.save_text(args.out, "\n".join(rows) + "\n")
    print(mean_row)
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck

def gradcheck_instance(seed=0, size=64):
    """Seeded small overflow sample plus a perturbed map, for gradient checks.

    The perturbation keeps |z_p - z_gt| well above the finite-difference
    step so the L1 term stays off its sign-flip set.
    """
    sample = synth.make_sample("overflow", seed, canvas=size, lines=4)
    m_gt = synth.make_margin_gt(sample)
    bg = soft_background(sample.dm_gt)

    h, w = sample.bm_gt.height, sample.bm_gt.width
    ident = identity_map(h, w).coords
    u = ident[:, :, 0]
    v = ident[:, :, 1]
    bump = np.stack(
        [
            0.010 * np.sin(2.1 * math.pi * v + 0.3) + 0.006,
            0.010 * np.cos(1.7 * math.pi * u - 0.2) - 0.014,
        ],
        axis=2,
    )
    z_p = CoordMap(sample.bm_gt.coords + bump, sample.bm_gt.kind)
    return {
        "z_p": z_p,
        "z_gt": sample.bm_gt,
        "fm_gt": sample.fm_gt,
        "textlines": sample.textlines,
        "background_soft": bg,
        "m_gt": m_gt,
    }


def _objectives(inst, weights):
    shape = inst["z_p"].coords.shape

    def as_map(params):
        return CoordMap(params.reshape(shape), "backward")

    def f_b(params):
        value, grad = losses.loss_bm(as_map(params), inst["z_gt"])
        return value, grad.reshape(-1)

    def f_t(params):
        value, grad = losses.loss_text(
            as_map(params), inst["fm_gt"], inst["textlines"]
        )
        return value, grad.reshape(-1)

    def f_m(params):
        value, grad = losses.loss_margin(
            as_map(params), inst["background_soft"], inst["m_gt"]
        )
        return value, grad.reshape(-1)

    def f_total(params):
        report = losses.loss_total(
            as_map(params),
            z_gt=inst["z_gt"],
            fm_gt=inst["fm_gt"],
            textlines=inst["textlines"],
            background_soft=inst["background_soft"],
            m_gt=inst["m_gt"],
            weights=weights,
        )
        return report.l_total, report.grad.reshape(-1)

    return [("L_B", f_b), ("L_T", f_t), ("L_M", f_m), ("total", f_total)]


def cmd_gradcheck(args):
    seed = _resolve_seed(args.seed)
    inst = gradcheck_instance(seed, args.size)
    params = inst["z_p"].coords.reshape(-1).copy()
    threshold = 1e-4
    worst_any = 0.0
    try:
        for name, objective in _objectives(inst, LossWeights()):
            worst = gradcheck(objective, params, eps=args.eps, seed=seed)
            worst_any = max(worst_any, worst)
            print(f"{name}: max_rel_err={worst:.3e}")
    except NumericError as exc:
        return _fail(str(exc), EXIT_NUMERIC)
    if worst_any >= threshold:
        print(f"gradcheck FAILED: {worst_any:.3e} >= {threshold:g}", file=sys.stderr)
        return EXIT_GRADCHECK
    print("gradcheck passed")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="dewarp", description="Document dewarping toolbox"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic warp samples")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--canvas", type=int, default=432)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument(
        "--regimes",
        default=",".join(f"{k}:{v!r}" for k, v in DEFAULT_REGIMES.items()),
        help="comma-separated regime:weight list summing to 1",
    )
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("dewarp", help="optimize a backward map for one image")
    p.add_argument("--sample", help="sample directory in the synth layout")
    p.add_argument("--image")
    p.add_argument("--mask")
    p.add_argument("--textlines")
    p.add_argument("--fm-gt")
    p.add_argument("--bm-gt")
    p.add_argument("--m-gt")
    p.add_argument("--out", required=True)
    p.add_argument("--supervised", action="store_true")
    p.add_argument("--no-text", action="store_true")
    p.add_argument("--no-margin", action="store_true")
    p.add_argument("--iters", type=int, default=400)
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--grid", type=int, default=29)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--beta", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_dewarp)

    p = sub.add_parser("eval", help="compute metrics for rectified/GT pairs")
    p.add_argument("--pairs", help="TSV: rectified, gt [, bm_pred, fm_gt]")
    p.add_argument("--rectified")
    p.add_argument("--gt")
    p.add_argument("--bm")
    p.add_argument("--fm")
    p.add_argument("--texts", help="TSV: hypothesis, reference per image")
    p.add_argument("--out", default="report.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient gate")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--eps", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
