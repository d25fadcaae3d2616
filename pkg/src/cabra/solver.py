"""Resolvent-splitting iteration over a coupled operator structure.

One iteration sweeps the monotone operators in index order: operator i
receives drive_i + 2 (L_A x)_i - alpha (Q_A u)_i through the inverse diagonal
scaling, where u caches the cocoercive outputs B_j((K_A x)_j), each computed
as soon as its cutoff operator has run.  Strict block lower triangularity of
the coupling makes a single pass exact.  The state update is either

    z <- z + gamma_nu M_A x        (reduced z-form), or
    v <- v - gamma_nu W_A x        (expanded v-form, v = -M_A^T z),

which generate identical x sequences for matching starts.

Iterations are counted from 1 (the first sweep is iteration 1).  A run is
converged at the first iteration whose fixed-point residual |M_A x| is at
most ``tol`` and whose inclusion residual |R_A^* w + R_B^* u| is at most
``10 tol``.
"""

from __future__ import annotations

import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import structure as st
from .errors import InvalidParams
from .matparams import BlockMatrixSet, lifted_maps, validate
from .structure import CouplingStructure, LiftedVector


# ---------------------------------------------------------------------------
# step-size schedules


@dataclass(frozen=True)
class Constant:
    value: float

    def __call__(self, nu: int) -> float:
        return self.value

    def diverges(self, limit: float) -> bool:
        return 0.0 < self.value < limit


@dataclass(frozen=True)
class HarmonicOffset:
    """gamma_nu = limit * nu / (nu + 1): approaches `limit` from below.

    The running sum of gamma_nu (limit - gamma_nu) is a harmonic series, so
    the divergence condition holds for any positive limit.
    """

    limit: float

    def __call__(self, nu: int) -> float:
        return self.limit * nu / (nu + 1.0)

    def diverges(self, limit: float) -> bool:
        return 0.0 < self.limit <= limit


@dataclass(frozen=True)
class CustomSchedule:
    """User-supplied schedule; the caller certifies the divergence condition."""

    fn: object
    certified_divergent: bool = False

    def __call__(self, nu: int) -> float:
        return float(self.fn(nu))

    def diverges(self, limit: float) -> bool:
        return self.certified_divergent


@dataclass
class SolverConfig:
    """Step sizes, stopping rule, and run limits.

    ``gamma`` may be a float (constant schedule) or a schedule object.  With
    ``strict=True`` a gamma outside the guaranteed range (0, 2 - alpha/2)
    raises; by default it only warns, since several reference experiments run
    outside the proven range.
    """

    alpha: float = 2.0
    gamma: object = None
    max_iterations: int = 10000
    tol: float = 1e-8
    trace_every: int = 1
    strict: bool = False
    threads: int | None = None

    def __post_init__(self):
        if not (0.0 < self.alpha < 4.0):
            raise InvalidParams(f"alpha must lie in (0, 4), got {self.alpha}")
        if self.max_iterations < 1:
            raise InvalidParams("max_iterations must be at least 1")
        limit = 2.0 - self.alpha / 2.0
        if self.gamma is None:
            self.gamma = Constant(0.95 * limit)
        elif isinstance(self.gamma, (int, float)):
            self.gamma = Constant(float(self.gamma))
        g1 = self.gamma(1)
        if g1 <= 0.0:
            raise InvalidParams(f"gamma must be positive, got {g1}")
        if not self.gamma.diverges(limit):
            msg = (
                f"gamma schedule (gamma_1={g1}) is outside the guaranteed range "
                f"(0, {limit}) for alpha={self.alpha}; convergence is not covered by theory"
            )
            if self.strict:
                raise InvalidParams(msg)
            warnings.warn(msg, RuntimeWarning, stacklevel=2)

    def thread_count(self) -> int:
        if self.threads is not None:
            return max(1, int(self.threads))
        return max(1, int(os.environ.get("CABRA_THREADS", "1")))


@dataclass
class SolveTrace:
    iters: list[int] = field(default_factory=list)
    fp_residual: list[float] = field(default_factory=list)
    consensus_residual: list[float] = field(default_factory=list)
    inclusion_residual: list[float] = field(default_factory=list)
    objective_gap: list[float | None] = field(default_factory=list)
    violation: list[float | None] = field(default_factory=list)
    elapsed_s: list[float] = field(default_factory=list)

    COLUMNS = (
        "iter", "fp_residual", "consensus_residual", "inclusion_residual",
        "objective_gap", "violation", "elapsed_s",
    )

    def rows(self):
        for row in zip(
            self.iters, self.fp_residual, self.consensus_residual,
            self.inclusion_residual, self.objective_gap, self.violation,
            self.elapsed_s,
        ):
            yield row


@dataclass
class SolveResult:
    y: np.ndarray
    x: np.ndarray
    w: np.ndarray
    u: np.ndarray
    state: np.ndarray
    mode: str
    converged: bool
    converged_iteration: int | None
    iterations: int
    trace: SolveTrace
    x_history: list | None = None


# ---------------------------------------------------------------------------
# the sweep


def assemble_input(maps, drive: np.ndarray, x: np.ndarray, u: np.ndarray,
                   alpha: float, i: int) -> np.ndarray:
    """Resolvent argument for operator i; touches only finalized values."""
    cs = maps.cs
    sl = cs.hx_op_slices[i]
    raw = drive[sl] + maps.L2_row(i, x) - alpha * maps.Q_row(i, u)
    return maps.dinv_hx[sl] * raw


def sweep(cs: CouplingStructure, params: BlockMatrixSet, ops, drive,
          alpha: float, maps=None, threads: int = 1):
    """One forward-substitution pass: returns (x, w, u) as flat arrays.

    ``drive`` is the -M_A^T z (or v) term in hx.  w collects the recovered
    monotone elements, u the cocoercive outputs keyed by operator.
    """
    maps = maps or lifted_maps(cs, params)
    drive = np.asarray(drive.data if isinstance(drive, LiftedVector) else drive, float)
    x = np.zeros(cs.hx_dim)
    w = np.zeros(cs.hx_dim)
    u = np.zeros(cs.bx_dim)

    def run_op(i):
        sl = cs.hx_op_slices[i]
        arg = assemble_input(maps, drive, x, u, alpha, i)
        xi, wi = ops.monotone[i].resolve(arg, alpha, maps.d_hx[sl])
        return i, xi, wi

    def finish_b(j):
        u[cs.bx_op_slices[j]] = ops.cocoercive[j].forward(maps.K_row(j, x))

    if threads <= 1:
        by_cutoff = {}
        for j in range(cs.m):
            by_cutoff.setdefault(cs.istar[j], []).append(j)
        for i in range(cs.n):
            _, xi, wi = run_op(i)
            sl = cs.hx_op_slices[i]
            x[sl] = xi
            w[sl] = wi
            for j in by_cutoff.get(i, ()):
                finish_b(j)
        return x, w, u

    # wave-parallel execution over the dependency DAG; results are written
    # back in operator order, so the outcome matches the sequential pass.
    done_ops: set[int] = set()
    done_b: set[int] = set()
    with ThreadPoolExecutor(max_workers=threads) as pool:
        while len(done_ops) < cs.n:
            ready = [
                i for i in range(cs.n)
                if i not in done_ops
                and maps.op_preds[i] <= done_ops
                and maps.op_b_preds[i] <= done_b
            ]
            if not ready:
                raise RuntimeError("dependency cycle in sweep scheduling")
            for i, xi, wi in pool.map(run_op, ready):
                sl = cs.hx_op_slices[i]
                x[sl] = xi
                w[sl] = wi
            done_ops.update(ready)
            for j in range(cs.m):
                if j not in done_b and maps.b_inputs[j] <= done_ops and cs.istar[j] in done_ops:
                    finish_b(j)
                    done_b.add(j)
    return x, w, u


# ---------------------------------------------------------------------------
# residuals and full runs


def inclusion_residual(cs: CouplingStructure, w, u) -> float:
    """Norm of R_A^* w + R_B^* u; zero exactly at a solution certificate."""
    w = np.asarray(w.data if isinstance(w, LiftedVector) else w, float)
    u = np.asarray(u.data if isinstance(u, LiftedVector) else u, float)
    return float(np.linalg.norm(st.adjoint_A(cs, w) + st.adjoint_B(cs, u)))


def run_cabra(cs, params, ops, config: SolverConfig, mode: str = "v",
              state0=None, metrics=None, check_params: bool = True,
              keep_history: bool = False) -> SolveResult:
    """Iterate until the stopping rule fires or max_iterations is reached.

    mode "z" keeps the reduced state z and drives with -M_A^T z; mode "v"
    keeps v = -M_A^T z directly and updates with W_A.  ``state0`` seeds the
    state (defaults to zero); a v-form start outside the admissible subspace
    is projected onto it with a warning.  ``metrics``, if given, maps the
    consensus estimate y-bar to a dict with optional ``objective_gap`` and
    ``violation`` entries recorded in the trace.
    """
    if mode not in ("z", "v"):
        raise ValueError("mode must be 'z' or 'v'")
    if check_params:
        rep = validate(cs, params)
        if not rep.ok:
            failed = ", ".join(f"{c.name}[k={c.k}]" for c in rep.failures()[:4])
            raise InvalidParams(f"parameter validation failed: {failed}")
    maps = lifted_maps(cs, params)
    threads = config.thread_count()

    if mode == "z":
        state = np.zeros(cs.hz_dim) if state0 is None else np.asarray(state0, float).copy()
        if state.shape != (cs.hz_dim,):
            raise InvalidParams(f"z state must have length {cs.hz_dim}")
    else:
        state = np.zeros(cs.hx_dim) if state0 is None else np.asarray(state0, float).copy()
        if state.shape != (cs.hx_dim,):
            raise InvalidParams(f"v state must have length {cs.hx_dim}")
        leak = st.adjoint_A(cs, state)
        if np.linalg.norm(leak) > 1e-10 * max(1.0, np.linalg.norm(state)):
            warnings.warn("v0 is not in the admissible subspace; projecting", RuntimeWarning)
            state = state - st.select_A(cs, leak / cs.copy_counts_gy).data

    trace = SolveTrace()
    t0 = time.perf_counter()
    x = w = u = None
    converged_at = None
    history: list | None = [] if keep_history else None
    nu = 0
    for nu in range(1, config.max_iterations + 1):
        drive = -(maps.M_A_T @ state) if mode == "z" else state
        x, w, u = sweep(cs, params, ops, drive, config.alpha, maps=maps, threads=threads)
        if history is not None:
            history.append(x.copy())
        fp = float(np.linalg.norm(maps.M_A @ x))
        incl = inclusion_residual(cs, w, u)
        hit = fp <= config.tol and incl <= 10.0 * config.tol
        if nu % config.trace_every == 0 or nu == 1 or hit:
            cons = float(np.linalg.norm(st.project_consensus(cs, x)[1].data))
            gap = viol = None
            if metrics is not None:
                got = metrics(st.mean_estimate(cs, x))
                gap = got.get("objective_gap")
                viol = got.get("violation")
            trace.iters.append(nu)
            trace.fp_residual.append(fp)
            trace.consensus_residual.append(cons)
            trace.inclusion_residual.append(incl)
            trace.objective_gap.append(gap)
            trace.violation.append(viol)
            trace.elapsed_s.append(time.perf_counter() - t0)
        if hit:
            converged_at = nu
            break
        g = config.gamma(nu)
        if mode == "z":
            state = state + g * (maps.M_A @ x)
        else:
            state = state - g * (maps.W_A @ x)

    return SolveResult(
        y=st.mean_estimate(cs, x),
        x=x, w=w, u=u, state=state, mode=mode,
        converged=converged_at is not None,
        converged_iteration=converged_at,
        iterations=nu,
        trace=trace,
        x_history=history,
    )


def warm_start_v(cs, params, y_est, w_est=None, u_est=None, alpha: float = 2.0):
    """Admissible v-form start from a solution estimate.

    v0 = (D_A - 2 L_A) select_A(y_est), optionally refined by alpha times the
    admissible-subspace projection of w_est + Q_A u_est (estimates of the
    monotone elements and cocoercive outputs at the solution).
    """
    maps = lifted_maps(cs, params)
    v0 = maps.DL2 @ st.select_A(cs, y_est).data
    if w_est is not None or u_est is not None:
        extra = np.zeros(cs.hx_dim)
        if w_est is not None:
            extra += np.asarray(w_est.data if isinstance(w_est, LiftedVector) else w_est, float)
        if u_est is not None:
            ub = np.asarray(u_est.data if isinstance(u_est, LiftedVector) else u_est, float)
            extra += maps.Q_A @ ub
        extra = extra - st.select_A(cs, st.adjoint_A(cs, extra) / cs.copy_counts_gy).data
        v0 = v0 + alpha * extra
    return LiftedVector("hx", v0, cs)


def operator_S(cs, params, ops, config: SolverConfig, z) -> np.ndarray:
    """x = S z: the sweep output for drive -M_A^T z."""
    maps = lifted_maps(cs, params)
    z = np.asarray(z.data if isinstance(z, LiftedVector) else z, float)
    x, _, _ = sweep(cs, params, ops, -(maps.M_A_T @ z), config.alpha, maps=maps)
    return x


def operator_T(cs, params, ops, config: SolverConfig, z) -> np.ndarray:
    """T z = z + gamma_1 M_A S(z): one application of the fixed-point map."""
    maps = lifted_maps(cs, params)
    z = np.asarray(z.data if isinstance(z, LiftedVector) else z, float)
    x = operator_S(cs, params, ops, config, z)
    return z + config.gamma(1) * (maps.M_A @ x)
