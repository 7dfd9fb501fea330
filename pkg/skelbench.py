#!/usr/bin/env python3
"""
skelbench - benchmark runner for recursive skeletonization factorizations
Builds a test problem, factorizes it, times one solve and reports accuracy.
"""
import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import scipy

from factorization import METHODS, STRICT_CHECKS, default_proxy_count, factor_rss, factor_rsws, save_factorization
from geometry import MAX_DEPTH, PROXY_RADIUS, build_tree
from problems import (
    GAUSSIAN_RIDGE,
    GAUSSIAN_SIGMA,
    build_cube3d,
    build_gaussian_spd,
    build_sphere_dlp,
    build_square2d,
    export_mesh,
    harmonic_reference,
    harmonic_setup,
    icosphere,
    potential_error,
    random_points,
)
from verify import DENSE_LIMIT, DENSE_MATVEC_LIMIT, factor_linop, forward_error, inverse_error, pcg_solve, source_linop

# Configuration
LOG_LEVEL = os.environ.get("RSKEL_LOG_LEVEL", "WARNING")

PROBLEMS = ("square2d", "cube3d", "sphere", "gaussian-spd")
METRICS = ("e_a", "e_s", "n_i", "e_p", "logdet")
FORMATS = ("csv", "json")
DEFAULT_NOCC = {"square2d": 256, "cube3d": 64, "sphere": 256, "gaussian-spd": 64}
CG_RTOL = 1e-12
CG_MAXIT = 200
SCALING_RATIO = 6.0


@dataclass
class RunConfig:
    problem: str
    n: int  # points per side, sphere refinement level, or N for gaussian-spd
    eps: float = 1e-6
    method: str = "rs-s"
    n_occ: Optional[int] = None
    n_p: Optional[int] = None
    seed: int = 0
    metrics: frozenset = frozenset()
    out: Optional[str] = None
    fmt: str = "csv"
    sigma: float = GAUSSIAN_SIGMA
    ridge: float = GAUSSIAN_RIDGE
    use_proxy: Optional[bool] = None
    save: Optional[str] = None

    @property
    def num_dofs(self) -> int:
        if self.problem == "square2d":
            return self.n ** 2
        if self.problem == "cube3d":
            return self.n ** 3
        if self.problem == "sphere":
            return 20 * 4 ** self.n
        return self.n

    def validate(self):
        if self.problem not in PROBLEMS:
            raise ValueError(f"Unknown problem: {self.problem}. Valid: {', '.join(PROBLEMS)}")
        if self.method not in METHODS:
            raise ValueError(f"Unknown method: {self.method}. Valid: {', '.join(METHODS)}")
        if not self.eps > 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")
        minimum = {"square2d": 2, "cube3d": 2, "sphere": 0, "gaussian-spd": 1}[self.problem]
        if self.n < minimum:
            raise ValueError(f"Size parameter for {self.problem} must be >= {minimum}, got {self.n}")
        if self.n_occ is not None and self.n_occ < 1:
            raise ValueError(f"n_occ must be >= 1, got {self.n_occ}")
        if self.n_p is not None and self.n_p < 1:
            raise ValueError(f"n_p must be >= 1, got {self.n_p}")
        if self.fmt not in FORMATS:
            raise ValueError(f"Unknown format: {self.fmt}. Valid: {', '.join(FORMATS)}")
        unknown = set(self.metrics) - set(METRICS)
        if unknown:
            raise ValueError(f"Unknown metrics: {', '.join(sorted(unknown))}. Valid: {', '.join(METRICS)}")
        if {"e_a", "e_s"} & set(self.metrics) and self.num_dofs > DENSE_LIMIT:
            raise ValueError(f"e_a/e_s need N <= {DENSE_LIMIT} (RSKEL_DENSE_LIMIT), got N={self.num_dofs}")
        if "e_p" in self.metrics and self.problem != "sphere":
            raise ValueError("e_p is only defined for the sphere problem")
        if "n_i" in self.metrics and self.problem == "sphere":
            raise ValueError("n_i needs a symmetric positive definite problem; sphere is unsymmetric")
        if "logdet" in self.metrics and self.problem != "gaussian-spd":
            raise ValueError("logdet is only defined for gaussian-spd")


@dataclass
class RunReport:
    N: int
    method: str
    eps: float
    t_f: float
    t_s: float
    m_f: int
    e_a: Optional[float] = None
    e_s: Optional[float] = None
    n_i: Optional[int] = None
    e_p: Optional[float] = None
    logdet: Optional[float] = None
    k_levels: list[int] = field(default_factory=list)

    @classmethod
    def header(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def row(self) -> list:
        values = asdict(self)
        values["k_levels"] = ";".join(str(k) for k in self.k_levels)
        return ["" if values[name] is None else values[name] for name in self.header()]


# =============================================================================
# Benchmark
# =============================================================================

def _build_problem(config: RunConfig):
    """Return (src, mesh or None, spd)"""
    if config.problem == "square2d":
        return build_square2d(config.n)[1], None, False
    if config.problem == "cube3d":
        return build_cube3d(config.n)[1], None, False
    if config.problem == "sphere":
        mesh, _, src = build_sphere_dlp(config.n)
        return src, mesh, False
    points = random_points(config.n, dim=2, seed=config.seed)
    return build_gaussian_spd(points, sigma=config.sigma, ridge=config.ridge), None, True


def run_benchmark(config: RunConfig):
    """Build, factorize, time one solve and compute the requested metrics"""
    config.validate()
    src, mesh, spd = _build_problem(config)
    n_occ = DEFAULT_NOCC[config.problem] if config.n_occ is None else config.n_occ
    n_p = default_proxy_count(src.dim) if config.n_p is None else config.n_p
    tree = build_tree(src.points, n_occ=n_occ)

    factor = factor_rss if config.method == "rs-s" else factor_rsws
    start = time.perf_counter()
    F = factor(src, tree, config.eps, n_p=n_p, spd=spd, use_proxy=config.use_proxy)
    t_f = time.perf_counter() - start

    rng = np.random.default_rng(config.seed)
    field_ = harmonic_setup(config.seed) if mesh is not None else None
    b = harmonic_reference(mesh, field_)[0] if field_ is not None else rng.standard_normal(src.n)
    start = time.perf_counter()
    u = F.solve(b)
    t_s = time.perf_counter() - start

    report = RunReport(N=src.n, method=config.method, eps=config.eps, t_f=t_f, t_s=t_s, m_f=F.nbytes,
                       k_levels=list(F.skeleton_sizes))
    metrics = set(config.metrics)
    if metrics & {"e_a", "e_s", "n_i"}:
        K = source_linop(src)
        if "e_a" in metrics:
            report.e_a = forward_error(K, F, seed=config.seed)
        if "e_s" in metrics:
            report.e_s = inverse_error(K, F, seed=config.seed)
        if "n_i" in metrics:
            rhs = K.matvec(rng.standard_normal(src.n))
            result = pcg_solve(K, rhs, M_inv=factor_linop(F, inverse=True), rtol=CG_RTOL, maxit=CG_MAXIT)
            if not result.converged:
                logging.warning(f"Preconditioned CG did not reach rtol={CG_RTOL} in {CG_MAXIT} iterations")
            report.n_i = result.iterations
    if "e_p" in metrics:
        report.e_p = potential_error(mesh, field_, u)
    if "logdet" in metrics:
        report.logdet = F.logdet()
    if config.save:
        save_factorization(F, config.save)
    return report


def emit_report(report: RunReport, path: Optional[str] = None, fmt: str = "csv"):
    """Append one report as a CSV row (header once per file) or a JSON line; stdout when path is None"""
    if fmt not in FORMATS:
        raise ValueError(f"Unknown format: {fmt}. Valid: {', '.join(FORMATS)}")
    new_file = path is None or not os.path.exists(path) or os.path.getsize(path) == 0
    stream = sys.stdout if path is None else open(path, "a", newline="")
    try:
        if fmt == "json":
            stream.write(json.dumps(asdict(report)) + "\n")
        else:
            writer = csv.writer(stream, lineterminator="\n")
            if new_file:
                writer.writerow(RunReport.header())
            writer.writerow(report.row())
    finally:
        if path is not None:
            stream.close()


def check_scaling(reports: list[RunReport]) -> list[float]:
    """t_f ratios between consecutive runs with 4x the unknowns; warns above the expected bound"""
    ratios = []
    for prev, cur in zip(reports, reports[1:]):
        if cur.N == 4 * prev.N and prev.t_f > 0:
            ratio = cur.t_f / prev.t_f
            ratios.append(ratio)
            if ratio > SCALING_RATIO:
                logging.warning(f"t_f grew {ratio:.1f}x from N={prev.N} to N={cur.N}")
    return ratios


# =============================================================================
# CLI Commands
# =============================================================================

def _save_path(save: Optional[str], n: int, sweep: bool) -> Optional[str]:
    if not save or not sweep:
        return save
    p = Path(save)
    return str(p.with_name(f"{p.stem}_{n}{p.suffix or '.npz'}"))


def cmd_run(args):
    """Run one benchmark per size value"""
    metrics = frozenset(m.strip() for m in args.metrics.split(",") if m.strip()) if args.metrics else frozenset()
    sweep = len(args.n) > 1
    configs = [
        RunConfig(
            problem=args.problem,
            n=n,
            eps=args.eps,
            method=args.method,
            n_occ=args.nocc,
            n_p=args.nproxy,
            seed=args.seed,
            metrics=metrics,
            out=args.out,
            fmt=args.format,
            sigma=args.sigma,
            ridge=args.ridge,
            use_proxy=False if args.no_proxy else None,
            save=_save_path(args.save, n, sweep),
        )
        for n in args.n
    ]
    for config in configs:
        config.validate()

    reports = []
    for config in configs:
        report = run_benchmark(config)
        emit_report(report, config.out, config.fmt)
        reports.append(report)
        if config.out:
            print(f"✅ {config.problem} N={report.N} {config.method}: t_f={report.t_f:.2f}s "
                  f"m_f={report.m_f / 1e6:.2f} MB k={report.k_levels}")
    check_scaling(reports)
    return 0


def cmd_mesh(args):
    """Export the sphere triangulation"""
    mesh = icosphere(args.level)
    export_mesh(mesh, args.out)
    print(f"✅ Wrote {len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles to {args.out}")
    return 0


def cmd_doctor(args):
    """Diagnose the numerical environment"""
    print("🩺 skelbench doctor\n")
    issues = []

    print("Packages:")
    print(f"  ✅ numpy {np.__version__}")
    print(f"  ✅ scipy {scipy.__version__}")

    print("\nConfiguration:")
    print(f"  RSKEL_PROXY_RADIUS       = {PROXY_RADIUS}")
    print(f"  RSKEL_MAX_DEPTH          = {MAX_DEPTH}")
    print(f"  RSKEL_DENSE_LIMIT        = {DENSE_LIMIT}")
    print(f"  RSKEL_DENSE_MATVEC_LIMIT = {DENSE_MATVEC_LIMIT}")
    print(f"  RSKEL_STRICT             = {int(STRICT_CHECKS)}")
    print(f"  RSKEL_LOG_LEVEL          = {LOG_LEVEL}")
    if PROXY_RADIUS <= 2.0:
        print("  ⚠️  Proxy surface does not enclose the near field")
        issues.append("Set RSKEL_PROXY_RADIUS above 2 (default 2.5)")

    print("\nFactorization:")
    try:
        _, src = build_square2d(16)
        tree = build_tree(src.points, n_occ=16)
        F = factor_rss(src, tree, 1e-12, check=True)
        x = np.random.default_rng(0).standard_normal(src.n)
        err = np.linalg.norm(F.solve(F.apply(x)) - x) / np.linalg.norm(x)
        if err <= 1e-10:
            print(f"  ✅ square2d N={src.n}: solve(apply(x)) error {err:.1e}")
        else:
            print(f"  ❌ square2d N={src.n}: solve(apply(x)) error {err:.1e}")
            issues.append("Inverse consistency check failed")
    except Exception as e:
        print(f"  ❌ Factorization failed: {e}")
        issues.append("Factorization of a small problem failed")

    print("\n" + "=" * 50)
    if issues:
        print(f"❌ Found {len(issues)} issue(s):\n")
        for issue in issues:
            print(f"  • {issue}")
        return 1
    print("✅ All checks passed!")
    return 0


def main(argv=None):
    logging.basicConfig(level=getattr(logging, LOG_LEVEL.upper(), logging.WARNING),
                        format="%(levelname)s %(message)s")
    parser = argparse.ArgumentParser(
        prog="skelbench",
        description="Recursive skeletonization benchmarks",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  skelbench run --problem square2d --n 64 --eps 1e-6 --metrics e_a,n_i
  skelbench run --problem cube3d --n 8 16 --method rs-ws --out results.csv
  skelbench run --problem sphere --n 3 --metrics e_p --format json
  skelbench run --problem gaussian-spd --n 512 --eps 1e-9 --metrics logdet
  skelbench mesh --level 3 --out sphere3.txt
  skelbench doctor
        """
    )

    subparsers = parser.add_subparsers(dest="command", help="Commands")

    # run
    p_run = subparsers.add_parser("run", help="Factorize a test problem and report")
    p_run.add_argument("--problem", required=True, choices=PROBLEMS, help="Test problem")
    p_run.add_argument("--n", type=int, nargs="+", required=True,
                       help="Points per side, sphere level, or N for gaussian-spd (several for a sweep)")
    p_run.add_argument("--eps", type=float, default=1e-6, help="ID tolerance (default: 1e-6)")
    p_run.add_argument("--method", choices=METHODS, default="rs-s", help="Factorization (default: rs-s)")
    p_run.add_argument("--nocc", type=int, default=None, help="Leaf occupancy (default: per problem)")
    p_run.add_argument("--nproxy", type=int, default=None, help="Proxy points (default: 64 in 2D, 512 in 3D)")
    p_run.add_argument("--seed", type=int, default=0, help="Random seed (default: 0)")
    p_run.add_argument("--metrics", default="", help=f"Comma-separated subset of {','.join(METRICS)}")
    p_run.add_argument("--out", default=None, help="Append results to this file (default: stdout)")
    p_run.add_argument("--format", choices=FORMATS, default="csv", help="Output format (default: csv)")
    p_run.add_argument("--sigma", type=float, default=GAUSSIAN_SIGMA, help="Gaussian kernel width")
    p_run.add_argument("--ridge", type=float, default=GAUSSIAN_RIDGE, help="Gaussian diagonal shift")
    p_run.add_argument("--no-proxy", action="store_true", help="Compress against the explicit far field")
    p_run.add_argument("--save", default=None, help="Write the factorization to this .npz path")

    # mesh
    p_mesh = subparsers.add_parser("mesh", help="Export the sphere triangulation")
    p_mesh.add_argument("--level", type=int, required=True, help="Refinement level")
    p_mesh.add_argument("--out", required=True, help="Output path")

    # doctor
    subparsers.add_parser("doctor", help="Check the environment")

    args = parser.parse_args(argv)

    if not args.command:
        parser.print_help()
        return 0

    commands = {
        "run": cmd_run,
        "mesh": cmd_mesh,
        "doctor": cmd_doctor,
    }

    try:
        return commands[args.command](args)
    except Exception as e:
        print(f"❌ {e}", file=sys.stderr)
        print("error: " + json.dumps({"type": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
