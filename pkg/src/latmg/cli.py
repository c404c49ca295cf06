"""Command-line entry point: ``latmg {gen,homogenize,bench,optimize,oracle,hierarchy}``.

Exit codes: 0 success, 2 invalid input, 3 solver did not converge.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .cycles import (CycleConfig, WarmStart, fmg_init, load_warm_start, relative_residual,
                     run_cycle, save_warm_start, solve)
from .hierarchy import build_hierarchy
from .homog import dense_solve, setup_cell_problem
from .simp import SimpConfig, optimize, random_density
from .smooth import KINDS as SMOOTHERS, SmootherConfig, pcg_solve
from .voxgeom import (GridFormatError, MaterialModel, VoxelGrid, benchmark_suite, generate_laminate,
                      generate_tpms, generate_truss, load_grid, random_occupancy, save_grid,
                      tpms_level_for_fraction, volume_fraction)

log = logging.getLogger("latmg")

EXIT_OK, EXIT_INVALID, EXIT_NOT_CONVERGED = 0, 2, 3

# Frozen CSV schemas; append new columns at the end only.
BENCH_COLUMNS = ("geometry", "index", "n", "volume_fraction", "physics", "schedule", "smoother",
                 "iters", "omega", "init", "cycles", "r_initial", "r_final", "wall_time")
HISTORY_COLUMNS = ("iter", "J", "vf", "max_drho", "r", "cycles", "pruned")

TPMS_KINDS = ("gyroid", "schwarz_p", "diamond")
TRUSS_KINDS = ("cubic", "bcc", "octet")
GEN_KINDS = TPMS_KINDS + TRUSS_KINDS + ("laminate", "random", "solid")


class CliError(Exception):
    def __init__(self, msg: str, code: int = EXIT_INVALID):
        super().__init__(msg)
        self.code = code


# -- option parsing ------------------------------------------------------------
def _physics(s: str) -> str:
    if s in ("elastic", "elasticity"):
        return "elasticity"
    if s == "thermal":
        return "thermal"
    raise argparse.ArgumentTypeError(f"unknown physics {s!r} (elastic|thermal)")


def _int_list(s: str) -> list[int]:
    try:
        vals = [int(v) for v in s.replace("{", "").replace("}", "").split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}")
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("iteration counts must be positive")
    return vals


def _csv_list(s: str) -> list[str]:
    return [v.strip() for v in s.split(",") if v.strip()]


def worker_count(requested: int | None) -> int:
    """``--jobs`` capped by ``LATMG_THREADS`` and the CPU count."""
    n = requested or 1
    cap = os.environ.get("LATMG_THREADS")
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise CliError(f"LATMG_THREADS must be an integer, got {cap!r}")
    return max(1, min(n, os.cpu_count() or 1))


def cycle_config(args, depth: int | None = None, schedule: str | None = None,
                 smoother: str | None = None) -> CycleConfig:
    """Build a :class:`CycleConfig` from solver flags.

    ``--iters`` is either one count (pre- and post-smoothing on every level)
    or one count per level, the last being the coarsest level.
    """
    kind = smoother or args.smoother
    omega = args.omega
    iters = args.iters
    try:
        coarsest = SmootherConfig(kind, args.coarsest_iters, omega)
        if len(iters) == 1:
            pre = post = SmootherConfig(kind, iters[0], omega)
        else:
            if depth is not None and len(iters) != depth:
                raise CliError(f"--iters lists {len(iters)} levels but the hierarchy has {depth}")
            pre = post = tuple(SmootherConfig(kind, k, omega) for k in iters[:-1])
            coarsest = SmootherConfig(kind, iters[-1], omega)
        return CycleConfig(schedule or args.schedule, pre, post, coarsest, args.max_cycles, args.tol)
    except ValueError as exc:
        raise CliError(str(exc))


def _material(args) -> MaterialModel | None:
    if args.E is None and args.nu is None and args.kappa is None:
        return None
    d = MaterialModel()
    return MaterialModel(d.E if args.E is None else args.E, d.nu if args.nu is None else args.nu,
                         d.kappa if args.kappa is None else args.kappa)


def _load(path) -> VoxelGrid:
    try:
        return load_grid(path)
    except FileNotFoundError as exc:
        raise CliError(f"no such grid: {exc.filename}")


def _emit(obj, out):
    text = json.dumps(obj, indent=2)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


# -- commands ------------------------------------------------------------------
def cmd_gen(args) -> int:
    n, kind = args.n, args.kind
    shift = tuple(args.shift) if args.shift else (0.0, 0.0, 0.0)
    kw = {"period": tuple(args.period)}
    if kind in TPMS_KINDS:
        if args.level is not None:
            level = args.level
        else:
            level = tpms_level_for_fraction(kind, n, args.vf if args.vf is not None else 0.3, shift)
        grid = generate_tpms(kind, n, level, shift, **kw)
    elif kind in TRUSS_KINDS:
        grid = generate_truss(kind, n, args.radius, shift, **kw)
    elif kind == "laminate":
        layers = args.layers if args.layers is not None else int(round((args.vf or 0.5) * n))
        grid = generate_laminate(n, args.axis, layers, **kw)
    elif kind == "random":
        grid = random_occupancy(n, args.vf if args.vf is not None else 0.5, args.seed, **kw)
    else:
        grid = VoxelGrid(np.ones((n, n, n)), "occupancy", **kw)
    stem = args.out or f"{kind}{n}"
    meta, data = save_grid(grid, stem)
    _emit({"kind": kind, "resolution": n, "volume_fraction": volume_fraction(grid),
           "header": str(meta), "data": str(data)}, None)
    return EXIT_OK


def cmd_homogenize(args) -> int:
    grid = _load(args.input)
    material = _material(args)
    cp = setup_cell_problem(grid, args.physics, material, args.levels)
    cfg = cycle_config(args, cp.hierarchy.depth)
    warm = None
    if args.warm_start:
        warm = load_warm_start(args.warm_start, cp.hierarchy, cp.kernel.dof, cp.kernel.modes)
    elif args.init == "fmg":
        warm = fmg_init(cp.ops, cp.loads, cfg)
    u, report = solve(cp.ops, cp.loads, warm, cfg)
    tensor = cp.tensor(u)
    if args.save_field:
        save_warm_start(args.save_field, WarmStart(fine=u))
    out = {
        "input": str(args.input),
        "resolution": grid.resolution,
        "levels": cp.hierarchy.depth,
        "config": {"schedule": cfg.schedule, "smoother": args.smoother, "iters": args.iters,
                   "coarsest_iters": args.coarsest_iters, "omega": cfg.coarsest.omega,
                   "tol": cfg.tol, "max_cycles": cfg.max_cycles,
                   "init": "file" if args.warm_start else args.init},
        **tensor.to_dict(),
        "solve": report.to_dict(),
    }
    _emit(out, args.out)
    if not report.converged:
        log.error("not converged: r = %.3e after %d cycles", report.final_residual, report.cycles)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_oracle(args) -> int:
    grid = _load(args.input)
    cp = setup_cell_problem(grid, args.physics, _material(args), args.levels)
    op = cp.ops.op(1)
    size = op.num_nodes * op.dof
    if args.method == "dense":
        if size > args.cap:
            raise CliError(f"{size} unknowns exceed the dense oracle cap {args.cap}; use --method pcg")
        u = dense_solve(op, cp.loads, args.cap)
        iterations = None
    else:
        u, iterations = pcg_solve(op, cp.loads, args.tol, args.max_iter)
    r = relative_residual(op, u, cp.loads)
    out = {"input": str(args.input), "method": args.method, "residual": r,
           "iterations": iterations, **cp.tensor(u).to_dict()}
    _emit(out, args.out)
    if args.method == "pcg" and r > args.tol:
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_hierarchy(args) -> int:
    grid = _load(args.input)
    hier = build_hierarchy(grid, args.levels)
    out = {"resolutions": hier.resolutions,
           "levels": [{"level": t.level, "resolution": t.resolution,
                       "elements": t.num_elements, "nodes": t.num_nodes} for t in hier]}
    if args.full:
        out["topology"] = [t.to_json() for t in hier]
    _emit(out, args.out)
    return EXIT_OK


def _bench_geometries(args) -> list[tuple[str, VoxelGrid]]:
    if args.suite:
        d = Path(args.suite)
        if not d.is_dir():
            raise CliError(f"suite directory {d} does not exist")
        paths = sorted(d.glob("*.json"))
        if not paths:
            raise CliError(f"no grids in {d}")
        return [(p.stem, _load(p)) for p in paths]
    return benchmark_suite(args.n, args.count, args.seed)


def bench_one(task) -> list[dict]:
    """Benchmark one geometry over the schedule x smoother grid (picklable for worker pools)."""
    idx, name, grid, args = task
    cp = setup_cell_problem(grid, args.physics, None, args.levels)
    op = cp.ops.op(1)
    base = cycle_config(args, cp.hierarchy.depth, "v", "gs8")
    u0 = fmg_init(cp.ops, cp.loads, base).fine if args.init == "fmg" else op.zeros(cp.kernel.modes)
    r0 = relative_residual(op, u0, cp.loads)
    rows = []
    for sched in args.schedules:
        for sm in args.smoothers:
            cfg = cycle_config(args, cp.hierarchy.depth, sched, sm)
            t0 = time.perf_counter()
            u = u0
            for _ in range(args.cycles):
                u = run_cycle(cp.ops, u, cp.loads, None, cfg)
            rows.append({
                "geometry": name, "index": idx, "n": grid.resolution,
                "volume_fraction": volume_fraction(grid), "physics": args.physics,
                "schedule": cfg.schedule, "smoother": cfg.coarsest.kind,
                "iters": "/".join(str(k) for k in args.iters), "omega": cfg.coarsest.omega,
                "init": args.init, "cycles": args.cycles, "r_initial": r0,
                "r_final": relative_residual(op, u, cp.loads),
                "wall_time": time.perf_counter() - t0,
            })
    return rows


def cmd_bench(args) -> int:
    geoms = _bench_geometries(args)
    for s in args.schedules:
        CycleConfig(schedule=s)  # validate before spending time
    tasks = [(i, name, g, args) for i, (name, g) in enumerate(geoms)]
    jobs = worker_count(args.jobs)
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(bench_one, tasks))
    else:
        results = [bench_one(t) for t in tasks]
    rows = [r for rs in results for r in rs]
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    finally:
        if fh is not sys.stdout:
            fh.close()
    summary = {}
    for r in rows:
        summary.setdefault(f"{r['schedule']}/{r['smoother']}", []).append(r["r_final"])
    for key, vals in summary.items():
        log.info("%-16s median r = %.3e", key, float(np.median(vals)))
    return EXIT_OK


def cmd_optimize(args) -> int:
    if args.input:
        grid = _load(args.input)
        if grid.kind != "density":
            grid = grid.with_values(grid.values, "density")
        start = grid
    else:
        start = random_density(args.n, args.vf, args.seed)
    cfg = SimpConfig(penal=args.penal, volfrac=args.vf, filter_radius=args.filter_radius,
                     move=args.move, max_iter=args.max_iter, levels=args.levels, seed=args.seed,
                     stop_tol=args.stop_tol)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    res = optimize(start, args.objective, cfg)
    with open(outdir / "history.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
        w.writeheader()
        for h in res.history:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in h.items()})
    save_grid(res.grid, outdir / "design")
    hist = res.history
    summary = {"objective": args.objective, "iterations": len(hist),
               "J_initial": hist[0]["J"] if hist else None, "J_final": hist[-1]["J"] if hist else None,
               "volume_fraction": volume_fraction(res.grid), "aborted": res.aborted}
    _emit(summary, outdir / "summary.json")
    _emit(summary, None)
    return EXIT_NOT_CONVERGED if res.aborted else EXIT_OK


# -- parser --------------------------------------------------------------------
def _add_solver_flags(p: argparse.ArgumentParser):
    p.add_argument("--physics", type=_physics, default="elasticity", help="elastic | thermal")
    p.add_argument("--schedule", default="v", choices=["v", "half-v", "half_v", "fmg", "w", "f"])
    p.add_argument("--smoother", default="gs8", choices=list(SMOOTHERS) + ["pcg"])
    p.add_argument("--iters", type=_int_list, default=[2],
                   help="smoothing sweeps: one count, or one per level (last = coarsest)")
    p.add_argument("--coarsest-iters", type=int, default=10)
    p.add_argument("--omega", type=float, default=None, help="relaxation factor")
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--max-cycles", type=int, default=50)
    p.add_argument("--levels", type=int, default=None)


def _add_material_flags(p: argparse.ArgumentParser):
    p.add_argument("--E", type=float, default=None)
    p.add_argument("--nu", type=float, default=None)
    p.add_argument("--kappa", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="latmg", description="Periodic voxel homogenization with geometric multigrid")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="count", default=0)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--jobs", type=int, default=1)
    common.add_argument("--deterministic", action="store_true",
                        help="fixed-order reductions (always on; accepted for compatibility)")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a voxel grid", parents=[common])
    g.add_argument("kind", choices=GEN_KINDS)
    g.add_argument("n", type=int)
    g.add_argument("--vf", type=float, default=None, help="target volume fraction")
    g.add_argument("--level", type=float, default=None, help="TPMS level (overrides --vf)")
    g.add_argument("--radius", type=float, default=0.1, help="strut radius in period units")
    g.add_argument("--layers", type=int, default=None)
    g.add_argument("--axis", default="x", choices=["x", "y", "z"])
    g.add_argument("--shift", type=float, nargs=3, default=None)
    g.add_argument("--period", type=float, nargs=3, default=(1.0, 1.0, 1.0))
    g.add_argument("-o", "--out", default=None, help="output stem (writes .json + .raw)")
    g.set_defaults(func=cmd_gen)

    h = sub.add_parser("homogenize", help="effective tensor via multigrid", parents=[common])
    h.add_argument("input")
    _add_solver_flags(h)
    _add_material_flags(h)
    h.add_argument("--warm-start", default=None, help="field file with initial field / corrections")
    h.add_argument("--init", default="zero", choices=["zero", "fmg"])
    h.add_argument("--save-field", default=None)
    h.add_argument("-o", "--out", default=None)
    h.set_defaults(func=cmd_homogenize)

    b = sub.add_parser("bench", help="schedule x smoother residual benchmark (CSV)", parents=[common])
    b.add_argument("--suite", default=None, help="directory of grids (default: built-in suite)")
    b.add_argument("--n", type=int, default=16)
    b.add_argument("--count", type=int, default=10)
    b.add_argument("--schedules", type=_csv_list, default=["v", "w", "half_v"])
    b.add_argument("--smoothers", type=_csv_list, default=["gs8"])
    b.add_argument("--cycles", type=int, default=3)
    b.add_argument("--init", default="fmg", choices=["zero", "fmg"])
    _add_solver_flags(b)
    b.add_argument("-o", "--out", default=None)
    b.set_defaults(func=cmd_bench)

    o = sub.add_parser("optimize", help="SIMP inverse homogenization", parents=[common])
    o.add_argument("input", nargs="?", default=None)
    o.add_argument("--random", action="store_true", help="start from seeded random density")
    o.add_argument("--n", type=int, default=16)
    o.add_argument("--objective", default="bulk", choices=["young", "shear", "bulk"])
    o.add_argument("--vf", type=float, default=0.3)
    o.add_argument("--penal", type=float, default=3.0)
    o.add_argument("--filter-radius", type=float, default=1.5)
    o.add_argument("--move", type=float, default=0.2)
    o.add_argument("--max-iter", type=int, default=30)
    o.add_argument("--stop-tol", type=float, default=1e-5)
    o.add_argument("--levels", type=int, default=None)
    o.add_argument("-o", "--out", default="opt_out")
    o.set_defaults(func=cmd_optimize)

    r = sub.add_parser("oracle", help="reference solve (dense or long PCG)", parents=[common])
    r.add_argument("input")
    r.add_argument("--physics", type=_physics, default="elasticity")
    r.add_argument("--method", default="dense", choices=["dense", "pcg"])
    r.add_argument("--cap", type=int, default=4096)
    r.add_argument("--tol", type=float, default=1e-10)
    r.add_argument("--max-iter", type=int, default=20000)
    r.add_argument("--levels", type=int, default=None)
    _add_material_flags(r)
    r.add_argument("-o", "--out", default=None)
    r.set_defaults(func=cmd_oracle)

    d = sub.add_parser("hierarchy", help="dump the multigrid level structure", parents=[common])
    d.add_argument("input")
    d.add_argument("--levels", type=int, default=None)
    d.add_argument("--full", action="store_true", help="include node/element lists")
    d.add_argument("-o", "--out", default=None)
    d.set_defaults(func=cmd_hierarchy)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"latmg: error: {exc}", file=sys.stderr)
        return exc.code
    except (GridFormatError, ValueError) as exc:
        print(f"latmg: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except BrokenPipeError:
        # downstream reader closed early (e.g. ``| head``)
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
