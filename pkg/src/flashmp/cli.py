"""Experiment harness: solve / cn / costs / sweep runs with CSV outputs.

Outputs land in the --out directory:

* ``trace.csv``      one row per iteration: ``iter,relres,time_ms``
* ``breakdown.csv``  per-phase seconds: ``category,seconds``
* ``summary.csv``    one row per run (config echo, iterations, MDoF/s, ...)
* ``cn_steps.csv``   per-step rows in cn mode
* ``costs.csv``      analytic cost table in costs mode
* ``sweep.csv``      weak-scaling table in sweep mode

Exit codes: 0 converged, 2 not converged, 64 configuration error.
The right-hand side is b = A x0 with x0 seeded uniform in [-1, 1]
(64-bit PCG generator), so identical configs reproduce identical traces;
--zero-times writes 0 in the time column for byte-identical files.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .grid import Box, FieldVector
from .instrument import BREAKDOWN_CATEGORIES, NULL_TIMER, PhaseTimer
from .krylov import SolveReport, SolverConfig, bicgstab, gmres
from .cn_driver import CnSolver, EmState, StepFailure, cn_step, save_checkpoint
from .schwarz import (DistributedOperator, RasPreconditioner, make_partition,
                      make_transport, scatter_field)
from .subdomain import (analytic_cost, correction_size, direct_method_flops,
                        direct_method_inverse_bytes, direct_method_vector_bytes)

EXIT_OK = 0
EXIT_NOT_CONVERGED = 2
EXIT_CONFIG = 64

MDOFS_DEFINITION = "# mdofs = 3*nx*ny*nz*px*py*pz / solve_seconds / 1e6"

DEFAULT_SWEEP_RANKS = (1, 2, 4, 8)


@dataclass
class ExperimentConfig:
    mode: str = "solve"                      # solve | cn | costs | sweep
    sub: tuple[int, int, int] = (16, 16, 16)  # per-rank subdomain extents
    grid: tuple[int, int, int] = (2, 2, 2)    # process grid
    overlap: int = 1
    alpha: float = 0.25
    method: str = "bicgstab"
    restart: int = 30
    tol: float = 1e-12
    max_iter: int = 1000
    seed: int = 42
    steps: int = 10
    preconditioner: str = "ras"               # ras | none
    transport: str = "serial"                 # serial | threads
    out: str = "out"
    trace: bool = False
    breakdown: bool = False
    zero_times: bool = False
    ranks: tuple[int, ...] = DEFAULT_SWEEP_RANKS

    @property
    def global_box(self) -> Box:
        return Box(*(s * g for s, g in zip(self.sub, self.grid)))

    def solver_config(self) -> SolverConfig:
        return SolverConfig(method=self.method, restart=self.restart, tol=self.tol,
                            max_iter=self.max_iter, preconditioner=self.preconditioner)


@dataclass
class RunSummary:
    config: ExperimentConfig
    report: SolveReport
    mdofs: float
    efficiency: float | None = None


def _mdofs(config: ExperimentConfig, seconds: float) -> float:
    return config.global_box.dof / seconds / 1e6 if seconds > 0 else 0.0


def weak_scaling_efficiency(ranks, mdofs) -> list[float]:
    """Throughput relative to linear scaling from the first entry."""
    base_ranks, base = ranks[0], mdofs[0]
    out = []
    for n, m in zip(ranks, mdofs):
        ideal = base * (n / base_ranks)
        out.append(m / ideal if ideal > 0 else 0.0)
    return out


def random_rhs(config: ExperimentConfig, op: DistributedOperator, partition):
    """b = A x0 with seeded uniform x0; returns the distributed b."""
    rng = np.random.default_rng(config.seed)
    x0 = rng.uniform(-1.0, 1.0, config.global_box.dof)
    return op.apply(scatter_field(partition, x0))


def run_solve(config: ExperimentConfig, write_outputs: bool = True) -> RunSummary:
    """One solve experiment; writes trace/breakdown/summary CSVs."""
    timer = PhaseTimer()
    transport = make_transport(config.transport, int(np.prod(config.grid)))
    try:
        partition = make_partition(config.global_box, config.grid, config.overlap)
        op = DistributedOperator(partition, config.alpha, transport, timer=NULL_TIMER)
        prec = None
        if config.preconditioner == "ras":
            prec = RasPreconditioner(partition, config.alpha, transport, timer=timer)
        b = random_rhs(config, op, partition)
        op.timer = timer

        runner = bicgstab if config.method == "bicgstab" else gmres
        _, report = runner(op, prec, b, config.solver_config(), timer=timer)
    finally:
        transport.close()

    summary = RunSummary(config, report, _mdofs(config, report.seconds))
    if write_outputs:
        out = Path(config.out)
        out.mkdir(parents=True, exist_ok=True)
        write_trace_csv(out / "trace.csv", report, config.zero_times)
        write_breakdown_csv(out / "breakdown.csv", report)
        write_summary_csv(out / "summary.csv", [summary])
        if config.trace:
            for it, relres, elapsed in report.trace:
                print(f"iter {it:5d}  relres {relres:.6e}  t {elapsed * 1e3:.3f} ms")
        if config.breakdown:
            for cat in BREAKDOWN_CATEGORIES:
                print(f"{cat:>10s}  {report.breakdown.get(cat, 0.0):.6f} s")
    return summary


def run_cn(config: ExperimentConfig) -> tuple[int, list[dict]]:
    """Time-step experiment; writes cn_steps.csv and a final checkpoint."""
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(config.seed)
    gbox = config.global_box
    dt = 2.0 * np.sqrt(config.alpha)
    state = EmState(
        E=FieldVector(gbox, rng.uniform(-1.0, 1.0, gbox.dof)),
        H=FieldVector(gbox, rng.uniform(-1.0, 1.0, gbox.dof)),
        t=0, dt=dt)

    transport = make_transport(config.transport, int(np.prod(config.grid)))
    rows: list[dict] = []
    code = EXIT_OK
    try:
        solver = CnSolver(gbox, config.grid, config.overlap, config.alpha,
                          config.solver_config(), transport)
        for _ in range(config.steps):
            try:
                state, report = cn_step(state, solver)
            except StepFailure as exc:
                print(f"flashmp: {exc}", file=sys.stderr)
                code = EXIT_NOT_CONVERGED
                break
            rows.append({
                "step": state.t,
                "iterations": report.iterations,
                "relres": report.final_relres,
                "seconds": report.seconds,
                "max_abs_e": float(np.abs(state.E.data).max()),
                "max_abs_h": float(np.abs(state.H.data).max()),
            })
    finally:
        transport.close()

    with open(out / "cn_steps.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["step", "iterations", "relres", "seconds",
                                          "max_abs_e", "max_abs_h"])
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(v) for k, v in row.items()})
    save_checkpoint(state, out / "checkpoint")
    return code, rows


def run_costs(config: ExperimentConfig) -> list[tuple[str, str, str]]:
    """Analytic cost table for a cubic subdomain; writes costs.csv."""
    nx, ny, nz = config.sub
    if not (nx == ny == nz):
        raise ValueError(f"costs mode needs a cubic subdomain, got {config.sub}")
    n = nx
    box = Box(n, n, n)
    cost = analytic_cost(box, correction_size(box))
    rows = [
        ("flops_total_nominal", str(cost.flops_total), str(direct_method_flops(n))),
        ("flops_per_solve", str(cost.flops_per_solve), str(direct_method_flops(n))),
        ("flops_per_exact_solve", str(cost.flops_per_exact_solve), ""),
        ("flops_per_correction", str(cost.flops_per_correction), ""),
        ("bytes_resident", str(cost.bytes_resident), str(direct_method_inverse_bytes(n))),
        ("bytes_vectors", str(48 * box.volume), str(direct_method_vector_bytes(n))),
        ("correction_size_m", str(cost.m), ""),
    ]
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "costs.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "flashmp", "direct"])
        w.writerows(rows)
    print(f"subdomain {n}^3 (m = {cost.m})")
    for name, ours, direct in rows:
        print(f"{name:>24s}  {ours:>16s}  {direct:>16s}")
    return rows


def _proc_grid_for(nranks: int) -> tuple[int, int, int]:
    """Most cubic (px, py, pz) with px*py*pz = nranks."""
    if nranks < 1:
        raise ValueError(f"rank count must be >= 1, got {nranks}")
    best = None
    for px in range(1, nranks + 1):
        if nranks % px:
            continue
        rest = nranks // px
        for py in range(1, rest + 1):
            if rest % py:
                continue
            pz = rest // py
            spread = max(px, py, pz) - min(px, py, pz)
            key = (spread, -px)
            if best is None or key < best[0]:
                best = (key, (px, py, pz))
    return best[1]


def run_scaling_sweep(config: ExperimentConfig) -> list[RunSummary]:
    """Weak scaling over worker counts with a fixed per-rank subdomain."""
    summaries = []
    for nranks in config.ranks:
        grid = _proc_grid_for(nranks)
        cfg = replace(config, grid=grid, mode="solve",
                      out=str(Path(config.out) / f"ranks_{nranks}"))
        summaries.append(run_solve(cfg, write_outputs=True))
    eff = weak_scaling_efficiency(
        [int(np.prod(s.config.grid)) for s in summaries],
        [s.mdofs for s in summaries])
    for s, e in zip(summaries, eff):
        s.efficiency = e

    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="") as f:
        f.write(MDOFS_DEFINITION + "\n")
        w = csv.writer(f)
        w.writerow(["ranks", "px", "py", "pz", "global_nx", "global_ny", "global_nz",
                    "iterations", "converged", "seconds", "mdofs", "efficiency"])
        for s in summaries:
            g = s.config.global_box
            w.writerow([int(np.prod(s.config.grid)), *s.config.grid, g.nx, g.ny, g.nz,
                        s.report.iterations, int(s.report.converged),
                        _fmt(s.report.seconds), _fmt(s.mdofs), _fmt(s.efficiency)])
    return summaries


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_trace_csv(path, report: SolveReport, zero_times: bool = False) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iter", "relres", "time_ms"])
        for it, relres, elapsed in report.trace:
            ms = 0.0 if zero_times else elapsed * 1e3
            w.writerow([it, _fmt(float(relres)), _fmt(float(ms))])


def write_breakdown_csv(path, report: SolveReport) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["category", "seconds"])
        for cat in BREAKDOWN_CATEGORIES:
            w.writerow([cat, _fmt(float(report.breakdown.get(cat, 0.0)))])


SUMMARY_COLUMNS = [
    "mode", "method", "preconditioner", "sub_nx", "sub_ny", "sub_nz",
    "px", "py", "pz", "overlap", "alpha", "tol", "restart", "max_iter", "seed",
    "transport", "iterations", "converged", "final_relres", "seconds", "mdofs",
    "efficiency", "failure",
]


def write_summary_csv(path, summaries: list[RunSummary]) -> None:
    with open(path, "w", newline="") as f:
        f.write(MDOFS_DEFINITION + "\n")
        w = csv.writer(f)
        w.writerow(SUMMARY_COLUMNS)
        for s in summaries:
            c, r = s.config, s.report
            w.writerow([
                c.mode, c.method, c.preconditioner, *c.sub, *c.grid, c.overlap,
                _fmt(c.alpha), _fmt(c.tol), c.restart, c.max_iter, c.seed, c.transport,
                r.iterations, int(r.converged), _fmt(float(r.final_relres)),
                _fmt(float(r.seconds)), _fmt(float(s.mdofs)),
                _fmt(s.efficiency) if s.efficiency is not None else "",
                r.failure or "",
            ])


def _parse_triple(text: str) -> tuple[int, int, int]:
    parts = [int(p) for p in text.split(",")]
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3 or min(parts) < 1:
        raise ValueError(f"expected NX,NY,NZ positive integers, got {text!r}")
    return tuple(parts)


def _parse_ranks(text: str) -> tuple[int, ...]:
    ranks = tuple(int(p) for p in text.split(","))
    if not ranks or min(ranks) < 1:
        raise ValueError(f"expected a list of positive rank counts, got {text!r}")
    return ranks


def read_config_file(path) -> dict:
    """key=value lines; '#' starts a comment; keys mirror the CLI flags."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = val
    return values


_BOOL_KEYS = {"trace", "breakdown", "zero_times"}


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig()
    file_values = read_config_file(args.config) if args.config else {}
    valid = {f.name for f in fields(ExperimentConfig)}
    for key, raw in file_values.items():
        if key == "dt":
            cfg.alpha = float(raw) ** 2 / 4.0
            continue
        if key not in valid:
            raise ValueError(f"unknown config key {key!r}")
        if key in ("sub", "grid"):
            setattr(cfg, key, _parse_triple(raw))
        elif key == "ranks":
            cfg.ranks = _parse_ranks(raw)
        elif key in _BOOL_KEYS:
            setattr(cfg, key, raw.lower() in ("1", "true", "yes", "on"))
        elif key in ("overlap", "restart", "max_iter", "seed", "steps"):
            setattr(cfg, key, int(raw))
        elif key in ("alpha", "tol"):
            setattr(cfg, key, float(raw))
        else:
            setattr(cfg, key, raw)

    # flags override the config file
    if args.mode is not None:
        cfg.mode = args.mode
    if args.sub is not None:
        cfg.sub = _parse_triple(args.sub)
    if args.grid is not None:
        cfg.grid = _parse_triple(args.grid)
    if args.overlap is not None:
        cfg.overlap = args.overlap
    if args.alpha is not None and args.dt is not None:
        raise ValueError("--alpha and --dt are mutually exclusive")
    if args.alpha is not None:
        cfg.alpha = args.alpha
    if args.dt is not None:
        cfg.alpha = args.dt * args.dt / 4.0
    if args.method is not None:
        cfg.method = args.method
    if args.restart is not None:
        cfg.restart = args.restart
    if args.tol is not None:
        cfg.tol = args.tol
    if args.max_iter is not None:
        cfg.max_iter = args.max_iter
    if args.seed is not None:
        cfg.seed = args.seed
    if args.steps is not None:
        cfg.steps = args.steps
    if args.preconditioner is not None:
        cfg.preconditioner = args.preconditioner
    if args.transport is not None:
        cfg.transport = args.transport
    if args.out is not None:
        cfg.out = args.out
    if args.trace:
        cfg.trace = True
    if args.breakdown:
        cfg.breakdown = True
    if args.zero_times:
        cfg.zero_times = True
    if args.ranks is not None:
        cfg.ranks = _parse_ranks(args.ranks)

    if cfg.mode not in ("solve", "cn", "costs", "sweep"):
        raise ValueError(f"unknown mode {cfg.mode!r}")
    if cfg.alpha < 0:
        raise ValueError("alpha must be >= 0")
    if cfg.overlap < 0:
        raise ValueError("overlap must be >= 0")
    cfg.solver_config()  # validates method/tol/restart/preconditioner
    return cfg


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="flashmp",
        description="Solver experiments for the implicit double-curl system: "
                    "exact-subdomain Schwarz preconditioning of BiCGSTAB/GMRES.",
        epilog="CSV schemas: trace.csv(iter,relres,time_ms); "
               "breakdown.csv(category,seconds); summary.csv(%s); "
               "sweep.csv(ranks,px,py,pz,global_*,iterations,converged,seconds,"
               "mdofs,efficiency); costs.csv(metric,flashmp,direct). "
               "MDoF/s %s." % (",".join(SUMMARY_COLUMNS), MDOFS_DEFINITION.lstrip("# ")))
    p.add_argument("--config", help="key=value config file; flags override it")
    p.add_argument("--mode", choices=["solve", "cn", "costs", "sweep"],
                   help="experiment kind (default solve)")
    p.add_argument("--sub", help="subdomain extents NX,NY,NZ per rank (default 16,16,16)")
    p.add_argument("--grid", help="process grid PX,PY,PZ (default 2,2,2)")
    p.add_argument("--overlap", type=int, help="Schwarz overlap layers (default 1)")
    p.add_argument("--alpha", type=float, help="operator strength dt^2/4 (default 0.25)")
    p.add_argument("--dt", type=float, help="time step; alternative to --alpha")
    p.add_argument("--method", choices=["bicgstab", "gmres"], help="Krylov method")
    p.add_argument("--restart", type=int, help="GMRES restart length (default 30)")
    p.add_argument("--tol", type=float, help="relative residual target (default 1e-12)")
    p.add_argument("--max-iter", dest="max_iter", type=int, help="iteration cap")
    p.add_argument("--seed", type=int, help="PRNG seed for x0 / initial fields")
    p.add_argument("--steps", type=int, help="cn mode: number of time steps")
    p.add_argument("--preconditioner", choices=["ras", "none"],
                   help="preconditioner (default ras)")
    p.add_argument("--transport", choices=["serial", "threads"],
                   help="in-process transport (default serial)")
    p.add_argument("--out", help="output directory (default ./out)")
    p.add_argument("--trace", action="store_true", help="also print the trace to stdout")
    p.add_argument("--breakdown", action="store_true",
                   help="also print the timing breakdown to stdout")
    p.add_argument("--zero-times", dest="zero_times", action="store_true",
                   help="write 0 in trace time columns (byte-identical reruns)")
    p.add_argument("--ranks", help="sweep mode: comma list of worker counts "
                                   "(default 1,2,4,8)")
    return p


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG

    try:
        cfg = build_config(args)
    except (ValueError, OSError) as exc:
        print(f"flashmp: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if cfg.mode == "solve":
            summary = run_solve(cfg)
            r = summary.report
            status = "converged" if r.converged else f"NOT converged ({r.failure or 'max_iter'})"
            print(f"{cfg.method} {status}: {r.iterations} iterations, "
                  f"relres {r.final_relres:.3e}, {summary.mdofs:.3f} MDoF/s")
            return EXIT_OK if r.converged else EXIT_NOT_CONVERGED
        if cfg.mode == "cn":
            code, rows = run_cn(cfg)
            done = rows[-1]["step"] if rows else 0
            print(f"cn: {done}/{cfg.steps} steps completed")
            return code
        if cfg.mode == "costs":
            run_costs(cfg)
            return EXIT_OK
        summaries = run_scaling_sweep(cfg)
        for s in summaries:
            print(f"ranks {int(np.prod(s.config.grid)):4d}: {s.mdofs:10.3f} MDoF/s  "
                  f"efficiency {100.0 * (s.efficiency or 0):6.1f}%")
        return EXIT_OK if all(s.report.converged for s in summaries) else EXIT_NOT_CONVERGED
    except (ValueError, OSError) as exc:
        print(f"flashmp: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
