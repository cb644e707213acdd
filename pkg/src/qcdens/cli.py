"""Experiment orchestration: sample | fit | eval | bench | heatmap.

Configuration is a flat ``key = value`` text file with sections (parsed by
configparser); ``qcdens --print-config`` emits every default.  All
artifacts are deterministic functions of the configuration: reruns produce
byte-identical files in single-threaded mode.

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import os
import sys
from dataclasses import dataclass, field
from multiprocessing import Pool

import numpy as np

from .data import (
    Dataset,
    DensityGrid,
    EXAMPLES,
    WINDOWS,
    density_grid,
    kde_oracle_ise,
    load_dataset,
    sample,
    save_dataset,
)
from .deformation import rebuild
from .dilatation import BasisSpec, save_theta, load_theta
from .errors import ConfigError, QcdensError
from .grid import GridSpec, quad, read_qgrid, write_qgrid
from .likelihood import TargetDensity, gaussian_target, halfg_target
from .optimizer import (
    FitResult,
    OptimizerConfig,
    default_lambda_grid,
    fitted_density,
    lambda_sweep,
)

__all__ = [
    "ExperimentConfig",
    "target_for",
    "auto_basis_radius",
    "mass_level",
    "cmd_sample",
    "cmd_fit",
    "cmd_eval",
    "cmd_bench",
    "cmd_heatmap",
    "main",
]


def target_for(example: str) -> TargetDensity:
    """The per-example target law (halfg uses the softened half-normal;
    stroke and waffle use mean-zero isotropic normals, sd 0.05 and 0.5)."""
    if example == "halfg":
        return halfg_target()
    if example == "stroke":
        return gaussian_target(0.05)
    if example == "waffle":
        return gaussian_target(0.5)
    raise ConfigError(f"unknown example {example!r}")


def default_basis_order(example: str, n: int) -> int:
    """N = 6 except the heavy runs: N = 10 (waffle) / 8 (stroke) at n = 10000."""
    if n >= 10000:
        if example == "waffle":
            return 10
        if example == "stroke":
            return 8
    return 6


def auto_basis_radius(points: np.ndarray) -> float:
    """Support radius covering the data with an 8 percent margin."""
    r = float(np.max(np.hypot(points[:, 0], points[:, 1]))) if len(points) else 0.0
    return max(2.8, 1.08 * r)


@dataclass
class ExperimentConfig:
    example: str = "stroke"
    n: int = 1000
    seed: int = 1
    basis_order: int = 0          # 0 = per-example default
    basis_radius: float = 0.0     # 0 = auto from data
    grid_n: int = 256
    window: float = 0.0           # 0 = per-example default
    window_n: int = 512
    supersample: int = 4
    output_dir: str = "qcdens_out"
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    bench_examples: tuple = EXAMPLES
    bench_sizes: tuple = (100, 1000)
    bench_seeds: tuple = (1, 2, 3)
    threads: int = 1

    def resolved_window(self) -> float:
        return self.window if self.window > 0 else WINDOWS[self.example]

    def resolved_order(self) -> int:
        return self.basis_order if self.basis_order > 0 else default_basis_order(self.example, self.n)

    def window_spec(self) -> GridSpec:
        return GridSpec(L=self.resolved_window(), n=self.window_n)


def render_config(cfg: ExperimentConfig) -> str:
    opt = cfg.optimizer
    lam = ",".join(f"{v:.6g}" for v in opt.lambda_grid)
    return (
        "[experiment]\n"
        f"example = {cfg.example}\n"
        f"n = {cfg.n}\n"
        f"seed = {cfg.seed}\n"
        f"basis_order = {cfg.basis_order}\n"
        f"basis_radius = {cfg.basis_radius}\n"
        f"grid_n = {cfg.grid_n}\n"
        f"window = {cfg.window}\n"
        f"window_n = {cfg.window_n}\n"
        f"supersample = {cfg.supersample}\n"
        f"output_dir = {cfg.output_dir}\n"
        "\n[optimizer]\n"
        f"max_step_len = {opt.max_step_len}\n"
        f"hessian_init_diag = {opt.hessian_init_diag}\n"
        f"max_halvings = {opt.max_halvings}\n"
        f"rebuild_every = {opt.rebuild_every}\n"
        f"rebuild_steps = {opt.rebuild_steps}\n"
        f"max_iters = {opt.max_iters}\n"
        f"grad_tol = {opt.grad_tol}\n"
        f"beltrami_tol = {opt.beltrami_tol}\n"
        f"lambda_grid = {lam}\n"
        "\n[bench]\n"
        f"examples = {','.join(cfg.bench_examples)}\n"
        f"sizes = {','.join(str(s) for s in cfg.bench_sizes)}\n"
        f"seeds = {','.join(str(s) for s in cfg.bench_seeds)}\n"
    )


def _get(parser, section, key, conv, default, errors):
    if not parser.has_option(section, key):
        return default
    raw = parser.get(section, key)
    try:
        return conv(raw)
    except Exception:
        errors.append(f"[{section}] {key}: cannot parse {raw!r}")
        return default


def load_config(path: str | None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is None:
        return cfg
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    errors: list[str] = []
    g = lambda *a: _get(parser, *a, errors)  # noqa: E731

    cfg.example = g("experiment", "example", str, cfg.example)
    cfg.n = g("experiment", "n", int, cfg.n)
    cfg.seed = g("experiment", "seed", int, cfg.seed)
    cfg.basis_order = g("experiment", "basis_order", int, cfg.basis_order)
    cfg.basis_radius = g("experiment", "basis_radius", float, cfg.basis_radius)
    cfg.grid_n = g("experiment", "grid_n", int, cfg.grid_n)
    cfg.window = g("experiment", "window", float, cfg.window)
    cfg.window_n = g("experiment", "window_n", int, cfg.window_n)
    cfg.supersample = g("experiment", "supersample", int, cfg.supersample)
    cfg.output_dir = g("experiment", "output_dir", str, cfg.output_dir)

    opt = cfg.optimizer
    lam_conv = lambda s: np.array([float(v) for v in s.split(",") if v.strip()])  # noqa: E731
    kwargs = dict(
        max_step_len=g("optimizer", "max_step_len", float, opt.max_step_len),
        hessian_init_diag=g("optimizer", "hessian_init_diag", float, opt.hessian_init_diag),
        max_halvings=g("optimizer", "max_halvings", int, opt.max_halvings),
        rebuild_every=g("optimizer", "rebuild_every", int, opt.rebuild_every),
        rebuild_steps=g("optimizer", "rebuild_steps", int, opt.rebuild_steps),
        max_iters=g("optimizer", "max_iters", int, opt.max_iters),
        grad_tol=g("optimizer", "grad_tol", float, opt.grad_tol),
        beltrami_tol=g("optimizer", "beltrami_tol", float, opt.beltrami_tol),
        lambda_grid=g("optimizer", "lambda_grid", lam_conv, opt.lambda_grid),
    )
    split = lambda conv: (lambda s: tuple(conv(v) for v in s.split(",") if v.strip()))  # noqa: E731
    cfg.bench_examples = g("bench", "examples", split(str), cfg.bench_examples)
    cfg.bench_sizes = g("bench", "sizes", split(int), cfg.bench_sizes)
    cfg.bench_seeds = g("bench", "seeds", split(int), cfg.bench_seeds)

    if cfg.example not in EXAMPLES:
        errors.append(f"[experiment] example must be one of {EXAMPLES}, got {cfg.example!r}")
    for ex in cfg.bench_examples:
        if ex not in EXAMPLES:
            errors.append(f"[bench] unknown example {ex!r}")
    try:
        cfg.optimizer = OptimizerConfig(**kwargs)
    except ValueError as exc:
        errors.append(f"[optimizer] {exc}")
    if errors:
        raise ConfigError("; ".join(errors))
    return cfg


# ---------------------------------------------------------------------------
# subcommands


def _dataset_name(cfg: ExperimentConfig) -> str:
    return f"{cfg.example}_n{cfg.n}_s{cfg.seed}"


def cmd_sample(cfg: ExperimentConfig) -> str:
    os.makedirs(cfg.output_dir, exist_ok=True)
    ds = sample(cfg.example, cfg.n, cfg.seed)
    path = os.path.join(cfg.output_dir, _dataset_name(cfg) + ".csv")
    save_dataset(path, ds)
    return path


def write_trace(path, trace) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "objective", "grad_norm", "step_len", "halvings", "rebuilt"])
        for row in trace:
            w.writerow([row.iter, repr(row.objective), repr(row.grad_norm),
                        repr(row.step_len), row.halvings, int(row.rebuilt)])


def _fit_dataset(cfg: ExperimentConfig, ds: Dataset, truth: DensityGrid) -> tuple[FitResult, BasisSpec, GridSpec]:
    radius = cfg.basis_radius if cfg.basis_radius > 0 else auto_basis_radius(ds.points)
    basis = BasisSpec(N=cfg.resolved_order(), L=radius)
    spec = GridSpec(L=2.0 * radius, n=cfg.grid_n)
    target = target_for(cfg.example)
    result = lambda_sweep(ds.z, target, basis, spec, cfg.optimizer, truth=truth)
    return result, basis, spec


def cmd_fit(cfg: ExperimentConfig, dataset_path: str | None = None) -> dict:
    os.makedirs(cfg.output_dir, exist_ok=True)
    if dataset_path is None:
        ds = sample(cfg.example, cfg.n, cfg.seed)
    else:
        ds = load_dataset(dataset_path, example=cfg.example, seed=cfg.seed)
    truth = density_grid(cfg.example, cfg.window_spec(), supersample=cfg.supersample)
    result, basis, spec = _fit_dataset(cfg, ds, truth)
    stem = os.path.join(cfg.output_dir, _dataset_name(cfg))
    best = result.best
    save_theta(stem + ".qtheta", best.theta, basis)
    for i, rec in enumerate(result.records):
        write_trace(f"{stem}_lambda{i:02d}.trace.csv", rec.trace)
    with open(stem + ".fit.txt", "w", encoding="ascii") as fh:
        fh.write(f"selected_lambda = {best.lam!r}\n")
        fh.write(f"grid_n = {spec.n}\ngrid_L = {spec.L!r}\n")
        for rec in result.records:
            m = rec.metrics
            fh.write(f"lambda {rec.lam!r} iters {rec.n_iters} term {rec.termination}"
                     f" ise {m.ise!r} h2 {m.hellinger_sq!r} l1 {m.l1!r}\n" if m else
                     f"lambda {rec.lam!r} iters {rec.n_iters} term {rec.termination}\n")
    return {"result": result, "basis": basis, "spec": spec, "theta_path": stem + ".qtheta"}


def cmd_eval(cfg: ExperimentConfig, theta_path: str, dataset_path: str | None = None) -> dict:
    os.makedirs(cfg.output_dir, exist_ok=True)
    theta, basis = load_theta(theta_path)
    spec = GridSpec(L=2.0 * basis.L, n=cfg.grid_n)
    state = rebuild(theta, basis, spec, M=cfg.optimizer.rebuild_steps,
                    beltrami_tol=cfg.optimizer.beltrami_tol)
    window = cfg.window_spec()
    target = target_for(cfg.example)
    est = fitted_density(state, target, window)
    truth = density_grid(cfg.example, window, supersample=cfg.supersample)
    from .data import metrics as _metrics
    m = _metrics(est, truth)
    stem = os.path.join(cfg.output_dir, _dataset_name(cfg))
    write_qgrid(stem + ".fitted.qgrid", window, est.values)
    write_qgrid(stem + ".true.qgrid", window, truth.values)
    with open(stem + ".metrics.txt", "w", encoding="ascii") as fh:
        fh.write(f"ise = {m.ise!r}\nhellinger_sq = {m.hellinger_sq!r}\n"
                 f"hellinger = {m.hellinger!r}\nl1 = {m.l1!r}\n"
                 f"beltrami_residual = {state.residual!r}\n")
    return {"metrics": m, "state": state}


def _bench_job(args) -> dict:
    example, n, seed, cfg, truth_vals = args
    job_cfg = ExperimentConfig(**{**cfg.__dict__, "example": example, "n": n, "seed": seed})
    job_cfg.optimizer = cfg.optimizer
    window = job_cfg.window_spec()
    truth = DensityGrid(spec=window, values=truth_vals)
    ds = sample(example, n, seed)
    result, basis, spec = _fit_dataset(job_cfg, ds, truth)
    best = result.best
    bw, kde_ise, kde_grid = kde_oracle_ise(ds.points, truth)
    from .data import metrics as _metrics
    km = _metrics(kde_grid, truth)
    dm = best.metrics
    return {
        "example": example, "n": n, "seed": seed,
        "def_ise": dm.ise, "def_h2": dm.hellinger_sq, "def_l1": dm.l1,
        "def_lambda": best.lam, "def_residual": best.residual,
        "kde_ise": km.ise, "kde_h2": km.hellinger_sq, "kde_l1": km.l1,
        "kde_bw": bw,
        "terminations": ",".join(r.termination for r in result.records),
        "traces": [r.trace for r in result.records],
    }


def run_bench(cfg: ExperimentConfig) -> list[dict]:
    """All (example, n, seed) jobs, merged in sorted-key order."""
    truths = {}
    for ex in cfg.bench_examples:
        w = GridSpec(L=cfg.window if cfg.window > 0 else WINDOWS[ex], n=cfg.window_n)
        truths[ex] = density_grid(ex, w, supersample=cfg.supersample).values
    jobs = [(ex, n, seed, cfg, truths[ex])
            for ex in sorted(cfg.bench_examples)
            for n in sorted(cfg.bench_sizes)
            for seed in sorted(cfg.bench_seeds)]
    if cfg.threads > 1:
        with Pool(cfg.threads) as pool:
            rows = pool.map(_bench_job, jobs)
    else:
        rows = [_bench_job(j) for j in jobs]
    return rows


def summarize_bench(rows: list[dict]) -> str:
    """Aggregate table: mean (sd) times 1e4, per example/size/method."""
    out = io.StringIO()
    keys = sorted({(r["example"], r["n"]) for r in rows})
    out.write(f"{'case':8s} {'n':>6s} {'method':12s} {'ISE':>12s} {'H2':>12s} {'L1':>12s}\n")
    for ex, n in keys:
        sel = [r for r in rows if r["example"] == ex and r["n"] == n]
        for method, pre in (("deformation", "def"), ("kernel", "kde")):
            cells = []
            for met in ("ise", "h2", "l1"):
                vals = np.array([r[f"{pre}_{met}"] for r in sel]) * 1e4
                cells.append(f"{vals.mean():7.0f} ({vals.std(ddof=1) if len(vals) > 1 else 0.0:.0f})")
            out.write(f"{ex:8s} {n:6d} {method:12s} {cells[0]:>12s} {cells[1]:>12s} {cells[2]:>12s}\n")
    return out.getvalue()


def cmd_bench(cfg: ExperimentConfig) -> list[dict]:
    os.makedirs(cfg.output_dir, exist_ok=True)
    rows = run_bench(cfg)
    path = os.path.join(cfg.output_dir, "bench_report.csv")
    cols = ["example", "n", "seed", "def_ise", "def_h2", "def_l1", "def_lambda",
            "def_residual", "kde_ise", "kde_h2", "kde_l1", "kde_bw", "terminations"]
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([r[c] if not isinstance(r[c], float) else repr(r[c]) for c in cols])
    with open(os.path.join(cfg.output_dir, "bench_summary.txt"), "w", encoding="ascii") as fh:
        fh.write(summarize_bench(rows))
    for r in rows:
        stem = os.path.join(cfg.output_dir, f"{r['example']}_n{r['n']}_s{r['seed']}")
        for i, tr in enumerate(r["traces"]):
            write_trace(f"{stem}_lambda{i:02d}.trace.csv", tr)
    return rows


def mass_level(grid: DensityGrid, alpha: float, iters: int = 60) -> float:
    """Threshold c with integral of p over {p >= c} equal to alpha."""
    vals = grid.values
    lo, hi = 0.0, float(vals.max())
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        mass = quad(grid.spec, np.where(vals >= mid, vals, 0.0))
        if mass > alpha:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def cmd_heatmap(cfg: ExperimentConfig, grid_path: str) -> dict:
    """Emit sqrt-density grid plus 95/50/25 percent mass contour levels."""
    os.makedirs(cfg.output_dir, exist_ok=True)
    spec, vals = read_qgrid(grid_path)
    if np.iscomplexobj(vals):
        raise ConfigError("heatmap expects a real density grid")
    grid = DensityGrid(spec=spec, values=vals)
    stem = os.path.join(cfg.output_dir, os.path.splitext(os.path.basename(grid_path))[0])
    write_qgrid(stem + ".sqrt.qgrid", spec, np.sqrt(np.clip(vals, 0.0, None)))
    levels = {alpha: mass_level(grid, alpha) for alpha in (0.95, 0.50, 0.25)}
    with open(stem + ".levels.txt", "w", encoding="ascii") as fh:
        for alpha, c in sorted(levels.items()):
            fh.write(f"{alpha!r} {c!r}\n")
    return {"levels": levels}


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qcdens",
                                description="deformation-based density estimation experiments")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--threads", type=int, default=None, help="bench worker processes")
    p.add_argument("--out", default=None, help="override the output directory")
    p.add_argument("--print-config", action="store_true", help="print defaults and exit")
    sub = p.add_subparsers(dest="command")
    sub.add_parser("sample")
    fit = sub.add_parser("fit")
    fit.add_argument("--data", default=None, help="dataset CSV (default: sample fresh)")
    ev = sub.add_parser("eval")
    ev.add_argument("--theta", required=True, help="QTHETA file")
    ev.add_argument("--data", default=None)
    sub.add_parser("bench")
    hm = sub.add_parser("heatmap")
    hm.add_argument("--grid", required=True, help="QGRID density file")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.threads is not None:
            cfg.threads = args.threads
        if args.out is not None:
            cfg.output_dir = args.out
        if args.print_config:
            sys.stdout.write(render_config(cfg))
            return 0
        if args.command is None:
            build_parser().print_help()
            return 0
        if args.command == "sample":
            path = cmd_sample(cfg)
            print(path)
        elif args.command == "fit":
            out = cmd_fit(cfg, dataset_path=args.data)
            print(out["theta_path"])
        elif args.command == "eval":
            out = cmd_eval(cfg, args.theta, dataset_path=args.data)
            m = out["metrics"]
            print(f"ise {m.ise:.6g} h2 {m.hellinger_sq:.6g} l1 {m.l1:.6g}")
        elif args.command == "bench":
            cmd_bench(cfg)
            print(os.path.join(cfg.output_dir, "bench_summary.txt"))
        elif args.command == "heatmap":
            out = cmd_heatmap(cfg, args.grid)
            for alpha, c in sorted(out["levels"].items()):
                print(f"{alpha} {c:.6g}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except QcdensError as exc:
        print(f"numeric failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
