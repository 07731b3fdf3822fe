"""Preconditioned BiCGSTAB and restarted GMRES over distributed vectors.

Vectors are lists of per-rank owned arrays; global inner products reduce
per-rank partials left to right in rank order (:func:`reduce_dot`), so
results do not depend on worker scheduling.  Both solvers start from
x0 = 0 and stop on the TRUE relative residual ||b - A x_k|| / ||b||,
recomputed explicitly at the end of every iteration; the recomputation is
also what the convergence trace logs, and it is excluded from the work
counters below.

Work accounting follows the usual per-iteration tallies:

* BiCGSTAB: 2 preconditioner applies, 2 SpMV, 4 dot products (rho,
  (r0*, v), (t, s), (t, t)) and 6 AXPY-type updates.  Convergence-check
  norms are not counted as dots.
* GMRES(k): 1 preconditioner apply and 1 SpMV per inner iteration; the
  modified Gram-Schmidt sweep at inner step j costs j dots + j AXPYs plus
  the normalization norm, which the tally counts with the dots; averaged
  over a full cycle that is (k+1)/2 + 1 dots and (k+1)/2 AXPYs.  GMRES is
  left preconditioned; inside a cycle the Givens recurrence estimate of
  the preconditioned residual triggers the exit, and the true residual
  decides convergence at cycle boundaries.  Cycle-setup work (one
  preconditioner apply per restart) is reported separately in
  ``overhead`` so the per-iteration tallies stay exact.

Breakdowns (rho, omega, or an orthogonalization denominator numerically
zero) and divergence (true residual beyond 1e8 of the start) are
reported on the :class:`SolveReport`, never raised mid-experiment.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .instrument import NULL_TIMER, PhaseTimer

DIVERGENCE_LIMIT = 1e8
REORTH_THRESHOLD = 1e-8


@dataclass
class SolverConfig:
    method: str = "bicgstab"        # "bicgstab" | "gmres"
    restart: int = 30               # gmres cycle length
    tol: float = 1e-12              # relative residual target
    max_iter: int = 1000
    preconditioner: str = "ras"     # "none" | "ras"

    def __post_init__(self):
        if self.method not in ("bicgstab", "gmres"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.tol <= 0:
            raise ValueError("tol must be > 0")
        if self.restart < 1:
            raise ValueError("restart must be >= 1")
        if self.preconditioner not in ("none", "ras"):
            raise ValueError(f"unknown preconditioner {self.preconditioner!r}")


@dataclass
class SolveReport:
    """Convergence trace, work tallies and timing for one solve."""

    method: str
    iterations: int = 0
    converged: bool = False
    final_relres: float = math.inf
    trace: list[tuple[int, float, float]] = field(default_factory=list)
    breakdown: dict[str, float] = field(default_factory=dict)
    work_per_iteration: list[dict[str, int]] = field(default_factory=list)
    restart_cycles: list[int] = field(default_factory=list)
    overhead: dict[str, int] = field(default_factory=dict)
    failure: str | None = None
    seconds: float = 0.0
    x0: str = "zero"

    def work_totals(self) -> dict[str, int]:
        tot = {"precond": 0, "spmv": 0, "dot": 0, "axpy": 0}
        for w in self.work_per_iteration:
            for k in tot:
                tot[k] += w[k]
        return tot

    def work_means(self) -> dict[str, float]:
        """Per-iteration averages of the work tallies."""
        n = max(1, len(self.work_per_iteration))
        return {k: v / n for k, v in self.work_totals().items()}


def reduce_dot(partials) -> float:
    """Left-to-right sum of per-rank partials (fixed order, reproducible)."""
    acc = 0.0
    for p in partials:
        acc = acc + float(p)
    return acc


class _Dist:
    """Coordinator-side vector algebra over per-rank arrays."""

    def __init__(self, timer):
        self.timer = timer

    def zeros_like(self, v):
        return [np.zeros_like(x) for x in v]

    def copy(self, v):
        return [x.copy() for x in v]

    def dot(self, a, b) -> float:
        with self.timer.phase("axpy_dot"):
            partials = [float(x @ y) for x, y in zip(a, b)]
        with self.timer.phase("reduction"):
            return reduce_dot(partials)

    def norm(self, a) -> float:
        return math.sqrt(self.dot(a, a))

    def lincomb(self, alpha, a, beta, b):
        """alpha*a + beta*b, elementwise per rank."""
        with self.timer.phase("axpy_dot"):
            return [alpha * x + beta * y for x, y in zip(a, b)]

    def axpy_into(self, y, alpha, x):
        """y += alpha*x in place."""
        with self.timer.phase("axpy_dot"):
            for yr, xr in zip(y, x):
                yr += alpha * xr

    def scale(self, alpha, a):
        with self.timer.phase("axpy_dot"):
            return [alpha * x for x in a]


def _true_relres(op, x, b, bnorm, vec) -> float:
    """||b - A x|| / ||b|| recomputed from scratch (never counted as work)."""
    ax = op.apply(x)
    r = vec.lincomb(1.0, b, -1.0, ax)
    return vec.norm(r) / bnorm


def bicgstab(op, prec, b, config: SolverConfig, timer=NULL_TIMER):
    """Preconditioned BiCGSTAB; returns (x, SolveReport)."""
    t0 = time.perf_counter()
    vec = _Dist(timer)
    report = SolveReport(method="bicgstab")
    psolve = prec.apply if prec is not None else None

    bnorm = vec.norm(b)
    x = vec.zeros_like(b)
    if bnorm == 0.0:
        report.converged = True
        report.final_relres = 0.0
        report.trace.append((0, 0.0, time.perf_counter() - t0))
        report.seconds = report.trace[-1][2]
        if isinstance(timer, PhaseTimer):
            report.breakdown = dict(timer.seconds)
        return x, report

    r = vec.copy(b)
    r_shadow = vec.copy(b)
    p = vec.zeros_like(b)
    v = vec.zeros_like(b)
    rho_old = alpha = omega = 1.0
    report.trace.append((0, 1.0, time.perf_counter() - t0))

    for it in range(1, config.max_iter + 1):
        work = {"precond": 0, "spmv": 0, "dot": 0, "axpy": 0}

        rho = vec.dot(r_shadow, r)
        work["dot"] += 1
        if rho == 0.0:
            report.failure = f"bicgstab breakdown: rho = 0 at iteration {it}"
            break
        beta = (rho / rho_old) * (alpha / omega)
        # first pass: p = v = 0, so this reduces to p = r for any beta
        p = vec.lincomb(1.0, p, -omega, v)
        p = vec.lincomb(1.0, r, beta, p)
        work["axpy"] += 2

        if psolve is not None:
            p_hat = psolve(p)
            work["precond"] += 1
        else:
            p_hat = p
        v = op.apply(p_hat)
        work["spmv"] += 1

        denom = vec.dot(r_shadow, v)
        work["dot"] += 1
        if denom == 0.0:
            report.failure = f"bicgstab breakdown: (r0*, v) = 0 at iteration {it}"
            break
        alpha = rho / denom
        s = vec.lincomb(1.0, r, -alpha, v)
        work["axpy"] += 1

        if psolve is not None:
            s_hat = psolve(s)
            work["precond"] += 1
        else:
            s_hat = s
        t = op.apply(s_hat)
        work["spmv"] += 1

        ts = vec.dot(t, s)
        tt = vec.dot(t, t)
        work["dot"] += 2
        omega = ts / tt if tt != 0.0 else 0.0

        vec.axpy_into(x, alpha, p_hat)
        vec.axpy_into(x, omega, s_hat)
        r = vec.lincomb(1.0, s, -omega, t)
        work["axpy"] += 3
        rho_old = rho

        report.work_per_iteration.append(work)
        report.iterations = it
        relres = _true_relres(op, x, b, bnorm, vec)
        report.trace.append((it, relres, time.perf_counter() - t0))
        report.final_relres = relres
        if relres <= config.tol:
            report.converged = True
            break
        if not math.isfinite(relres) or relres > DIVERGENCE_LIMIT:
            report.failure = f"bicgstab divergence: relres {relres:.3e} at iteration {it}"
            break
        if omega == 0.0:
            report.failure = f"bicgstab breakdown: omega = 0 at iteration {it}"
            break

    report.seconds = report.trace[-1][2] if report.trace else time.perf_counter() - t0
    if isinstance(timer, PhaseTimer):
        report.breakdown = dict(timer.seconds)
    return x, report


def gmres(op, prec, b, config: SolverConfig, timer=NULL_TIMER):
    """Left-preconditioned restarted GMRES with modified Gram-Schmidt."""
    t0 = time.perf_counter()
    vec = _Dist(timer)
    report = SolveReport(method="gmres")
    report.overhead = {"restart_precond": 0, "residual_spmv": 0}
    psolve = prec.apply if prec is not None else None
    k = config.restart

    bnorm = vec.norm(b)
    x = vec.zeros_like(b)
    if bnorm == 0.0:
        report.converged = True
        report.final_relres = 0.0
        report.trace.append((0, 0.0, time.perf_counter() - t0))
        report.seconds = report.trace[-1][2]
        if isinstance(timer, PhaseTimer):
            report.breakdown = dict(timer.seconds)
        return x, report

    report.trace.append((0, 1.0, time.perf_counter() - t0))
    total_it = 0
    pr0_norm = None  # preconditioned residual norm at the very start
    r = vec.copy(b)  # true residual of x0 = 0; refreshed at each restart
    relres = 1.0

    while total_it < config.max_iter:
        if psolve is not None:
            z = psolve(r)
            report.overhead["restart_precond"] += 1
        else:
            z = vec.copy(r)
        beta = vec.norm(z)
        if pr0_norm is None:
            pr0_norm = beta
        if beta == 0.0:
            report.converged = relres <= config.tol
            break

        basis = [vec.scale(1.0 / beta, z)]
        H = np.zeros((k + 1, k))
        g = np.zeros(k + 1)
        g[0] = beta
        cs = np.zeros(k)
        sn = np.zeros(k)
        inner = 0
        stop = False

        for j in range(k):
            if total_it >= config.max_iter:
                break
            work = {"precond": 0, "spmv": 0, "dot": 0, "axpy": 0}
            w = op.apply(basis[j])
            work["spmv"] += 1
            if psolve is not None:
                w = psolve(w)
                work["precond"] += 1

            # modified Gram-Schmidt with one-shot re-orthogonalization
            for i in range(j + 1):
                hij = vec.dot(basis[i], w)
                H[i, j] = hij
                vec.axpy_into(w, -hij, basis[i])
                work["dot"] += 1
                work["axpy"] += 1
            hnorm = vec.norm(w)
            work["dot"] += 1
            col_norm = math.sqrt(float(H[:j + 1, j] @ H[:j + 1, j]) + hnorm * hnorm)
            if col_norm > 0.0 and hnorm <= REORTH_THRESHOLD * col_norm:
                for i in range(j + 1):
                    c = vec.dot(basis[i], w)
                    H[i, j] += c
                    vec.axpy_into(w, -c, basis[i])
                    work["dot"] += 1
                    work["axpy"] += 1
                hnorm = vec.norm(w)
                work["dot"] += 1
            H[j + 1, j] = hnorm

            happy = hnorm == 0.0 or (col_norm > 0.0 and hnorm < 1e-14 * col_norm)
            if not happy:
                basis.append(vec.scale(1.0 / hnorm, w))

            # Givens update of the small least-squares problem
            for i in range(j):
                h1 = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
                h2 = -sn[i] * H[i, j] + cs[i] * H[i + 1, j]
                H[i, j], H[i + 1, j] = h1, h2
            denom = math.hypot(H[j, j], H[j + 1, j])
            if denom == 0.0:
                report.failure = f"gmres breakdown: zero column at iteration {total_it + 1}"
                stop = True
                break
            cs[j], sn[j] = H[j, j] / denom, H[j + 1, j] / denom
            H[j, j] = denom
            H[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]
            estimate = abs(g[j + 1]) / pr0_norm if pr0_norm > 0 else 0.0

            inner = j + 1
            total_it += 1
            report.iterations = total_it
            report.work_per_iteration.append(work)

            # form the current iterate for the trace / stopping decisions
            y = np.linalg.solve(np.triu(H[:inner, :inner]), g[:inner])
            x_cur = vec.copy(x)
            for i in range(inner):
                vec.axpy_into(x_cur, float(y[i]), basis[i])
            relres = _true_relres(op, x_cur, b, bnorm, vec)
            report.overhead["residual_spmv"] += 1
            report.trace.append((total_it, relres, time.perf_counter() - t0))
            report.final_relres = relres

            if not math.isfinite(relres) or relres > DIVERGENCE_LIMIT:
                report.failure = f"gmres divergence: relres {relres:.3e} at iteration {total_it}"
                stop = True
                break
            if happy or estimate <= config.tol or relres <= config.tol:
                stop = True  # cycle exit; convergence decided on true relres below
                break

        if inner:
            x = x_cur
            report.restart_cycles.append(inner)
        if relres <= config.tol:
            report.converged = True
            break
        if report.failure is not None:
            break
        if not stop and total_it >= config.max_iter:
            break
        # restart: reuse the traced true residual r = b - A x
        ax = op.apply(x)
        report.overhead["residual_spmv"] += 1
        r = vec.lincomb(1.0, b, -1.0, ax)

    report.seconds = report.trace[-1][2] if report.trace else time.perf_counter() - t0
    if isinstance(timer, PhaseTimer):
        report.breakdown = dict(timer.seconds)
    return x, report
