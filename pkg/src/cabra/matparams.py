"""Per-block matrix parameters and their lifted application.

Each block k carries symmetric matrices Z_k, W_k of size n_k, coupling
matrices K_k (m_k x n_k) and Q_k (n_k x m_k), and the derived pieces
D_k = diag(Z_k), L_k = -strict_lower(Z_k), a factor M_k with M_k^T M_k = W_k,
and U_k = (Q_k^T - K_k)^T diag(beta_k)^{-1} (Q_k^T - K_k).  `validate` checks
the full assumption set these must satisfy; `LiftedMaps` assembles the
corresponding operators on the flat lifted spaces as sparse matrices.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .errors import (
    DependencyViolation,
    NoConvergence,
    NotPSD,
    ShapeMismatch,
    WrongNullspace,
)
from .structure import CouplingStructure, LiftedVector

_FACTOR_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class BlockMatrixSet:
    """Validated-shape container for the per-block parameter matrices.

    ``beta`` holds, per block k, the cocoercivity constants of the operators
    in J_k; ``skj`` holds, per block k, the cutoff positions s^k_j aligned
    with J_k (or None when unknown).
    """

    Z: tuple[np.ndarray, ...]
    W: tuple[np.ndarray, ...]
    D: tuple[np.ndarray, ...]
    L: tuple[np.ndarray, ...]
    M: tuple[np.ndarray, ...]
    U: tuple[np.ndarray, ...]
    K: tuple[np.ndarray, ...]
    Q: tuple[np.ndarray, ...]
    beta: tuple[np.ndarray, ...]
    skj: tuple[tuple[int, ...], ...] | None = None

    @property
    def p(self) -> int:
        return len(self.Z)


def _sym(a):
    return 0.5 * (a + a.T)


def factor_psd(W: np.ndarray, rank: int) -> np.ndarray:
    """Return M with ``rank`` rows and M^T M = W (pivoted Cholesky, eig fallback)."""
    n = W.shape[0]
    try:
        c, piv, r, info = scipy.linalg.lapack.dpstrf(W, lower=0)
        if info >= 0 and r >= rank:
            U = np.triu(c)[:rank, :]
            M = np.zeros((rank, n))
            M[:, piv[:n] - 1] = U
            if np.linalg.norm(M.T @ M - W) <= _FACTOR_TOL * max(1.0, np.linalg.norm(W)):
                return M
    except Exception:
        pass
    lam, V = np.linalg.eigh(W)
    order = np.argsort(lam)[::-1][:rank]
    lam_top = np.clip(lam[order], 0.0, None)
    M = np.sqrt(lam_top)[:, None] * V[:, order].T
    return M


def derive(cs: CouplingStructure, Z, W, K=None, Q=None, beta=None) -> BlockMatrixSet:
    """Derive D, L, M, U from per-block (Z, W, K, Q) and global beta.

    Parameters
    ----------
    Z, W : per-block symmetric matrices, shapes (n_k, n_k).
    K, Q : per-block coupling matrices, shapes (m_k, n_k) / (n_k, m_k);
        may be None if every m_k is zero.
    beta : cocoercivity constants, one per cocoercive operator j.
    """
    beta = np.asarray([] if beta is None else beta, dtype=float)
    if beta.shape != (cs.m,):
        raise ShapeMismatch(f"beta must have length m={cs.m}, got {beta.shape}")
    if np.any(beta <= 0):
        raise ValueError("beta must be positive")
    beta_per_k = [beta[list(cs.Jk[k])] for k in range(cs.p)]
    Ks = [None if cs.mk[k] == 0 else K[k] for k in range(cs.p)]
    Qs = [None if cs.mk[k] == 0 else Q[k] for k in range(cs.p)]
    skj = tuple(tuple(cs.skj[(k, j)] for j in cs.Jk[k]) for k in range(cs.p))
    return from_blocks(Z, W, Ks, Qs, beta_per_k, skj)


def from_blocks(Z, W, K, Q, beta_per_k, skj=None) -> BlockMatrixSet:
    """Structure-free variant of `derive`: everything supplied per block."""
    p = len(Z)
    Zs, Ws, Ds, Ls, Ms, Us, Ks, Qs, betas = [], [], [], [], [], [], [], [], []
    for k in range(p):
        Zk = np.array(Z[k], dtype=float)
        Wk = np.array(W[k], dtype=float)
        n = Zk.shape[0]
        bk = np.asarray(beta_per_k[k], dtype=float)
        m = bk.size
        for name, A in (("Z", Zk), ("W", Wk)):
            if A.shape != (n, n):
                raise ShapeMismatch(f"{name}[{k}] has shape {A.shape}, expected ({n}, {n})")
            if np.max(np.abs(A - A.T)) > 1e-12 * max(1.0, np.max(np.abs(A))):
                raise ValueError(f"{name}[{k}] is not symmetric")
        Zk, Wk = _sym(Zk), _sym(Wk)
        lam_w = np.linalg.eigvalsh(Wk)
        if lam_w[0] < -1e-8:
            raise NotPSD("W", k, lam_w[0])
        if np.max(np.abs(Wk @ np.ones(n))) > 1e-8:
            raise WrongNullspace(k, "W @ 1 != 0")
        if lam_w[1] <= 1e-8:
            raise WrongNullspace(k, f"lambda_2(W) = {lam_w[1]:.3e} <= 1e-8")
        lam_z0 = np.linalg.eigvalsh(Zk)[0]
        if lam_z0 < -1e-8:
            raise NotPSD("Z", k, lam_z0)

        Dk = np.diag(Zk).copy()
        Lk = -np.tril(Zk, -1)
        Mk = factor_psd(Wk, n - 1)
        if np.linalg.norm(Mk.T @ Mk - Wk) > _FACTOR_TOL * max(1.0, np.linalg.norm(Wk)):
            raise NoConvergence(f"factorization of W[{k}] failed to reach {_FACTOR_TOL}")

        if m == 0:
            Kk = np.zeros((0, n))
            Qk = np.zeros((n, 0))
            Uk = np.zeros((n, n))
        else:
            if np.any(bk <= 0):
                raise ValueError("beta must be positive")
            Kk = np.array(K[k], dtype=float)
            Qk = np.array(Q[k], dtype=float)
            if Kk.shape != (m, n):
                raise ShapeMismatch(f"K[{k}] has shape {Kk.shape}, expected ({m}, {n})")
            if Qk.shape != (n, m):
                raise ShapeMismatch(f"Q[{k}] has shape {Qk.shape}, expected ({n}, {m})")
            R = Qk.T - Kk
            Uk = R.T @ np.diag(1.0 / bk) @ R
        Zs.append(Zk); Ws.append(Wk); Ds.append(Dk); Ls.append(Lk)
        Ms.append(Mk); Us.append(Uk); Ks.append(Kk); Qs.append(Qk); betas.append(bk)

    return BlockMatrixSet(
        Z=tuple(Zs), W=tuple(Ws), D=tuple(Ds), L=tuple(Ls), M=tuple(Ms),
        U=tuple(Us), K=tuple(Ks), Q=tuple(Qs), beta=tuple(betas),
        skj=None if skj is None else tuple(tuple(int(s) for s in row) for row in skj),
    )


# ---------------------------------------------------------------------------
# validation


@dataclass
class Check:
    k: int
    name: str
    passed: bool
    violation: float
    tol: float


@dataclass
class ValidationReport:
    checks: list[Check] = field(default_factory=list)

    def add(self, k, name, violation, tol, passed=None):
        if passed is None:
            passed = violation <= tol
        self.checks.append(Check(k, name, bool(passed), float(violation), tol))

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list[Check]:
        return [c for c in self.checks if not c.passed]

    def as_table(self) -> str:
        lines = [f"{'k':>3s}  {'check':<16s}  {'status':<6s}  {'violation':>12s}  {'tol':>9s}"]
        for c in self.checks:
            status = "pass" if c.passed else "FAIL"
            lines.append(f"{c.k:>3d}  {c.name:<16s}  {status:<6s}  {c.violation:>12.3e}  {c.tol:>9.1e}")
        return "\n".join(lines)


def support_bounds(K: np.ndarray, Q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per cocoercive row t: last nonzero column of K and first nonzero row of Q.

    Structural test on exact zeros.  Empty K rows give -1; empty Q columns
    give n (one past the end).
    """
    m, n = K.shape
    sbar = np.full(m, -1, dtype=int)
    sdot = np.full(m, n, dtype=int)
    for t in range(m):
        nz = np.nonzero(K[t, :])[0]
        if nz.size:
            sbar[t] = nz[-1]
        nz = np.nonzero(Q[:, t])[0]
        if nz.size:
            sdot[t] = nz[0]
    return sbar, sdot


def validate(cs: CouplingStructure | None, params: BlockMatrixSet, tol: float = 1e-8) -> ValidationReport:
    """Check every assumption on the parameter matrices, per block.

    Covers the base assumption set (PSD orderings, row sums, derived-matrix
    identities, nullspaces, support ordering), its implied identities, and
    the cutoff-compatibility condition.  With ``cs=None`` the cutoff check
    uses the positions stored on ``params``.
    """
    rep = ValidationReport()
    p = params.p
    for k in range(p):
        Z, W, D, L, M, U = params.Z[k], params.W[k], params.D[k], params.L[k], params.M[k], params.U[k]
        K, Q, beta = params.K[k], params.Q[k], params.beta[k]
        n = Z.shape[0]
        m = K.shape[0]
        ones = np.ones(n)

        lam_z = np.linalg.eigvalsh(_sym(Z))
        lam_w = np.linalg.eigvalsh(_sym(W))
        rep.add(k, "Z_psd", max(0.0, -lam_z[0]), tol)
        rep.add(k, "W_psd", max(0.0, -lam_w[0]), tol)
        rep.add(k, "7a_Z_geq_W", max(0.0, -np.linalg.eigvalsh(_sym(Z - W))[0]), tol)
        rep.add(k, "7b_Z_geq_U", max(0.0, -np.linalg.eigvalsh(_sym(Z - U))[0]), tol)
        rep.add(k, "7c_Z_ones", np.max(np.abs(Z @ ones)), tol)
        rep.add(k, "7d_D_diag", np.max(np.abs(D - np.diag(Z))), tol)
        rep.add(k, "7e_L_tri", np.max(np.abs(L + np.tril(Z, -1))), tol)
        w_ones = np.max(np.abs(W @ ones))
        rep.add(
            k, "7f_W_nullspace",
            max(w_ones, max(0.0, tol - lam_w[1])), tol,
            passed=(w_ones <= tol and lam_w[1] > tol),
        )
        rep.add(k, "7g_W_factor", np.max(np.abs(M.T @ M - W)), tol)
        if m > 0:
            R = Q.T - K
            Uref = R.T @ np.diag(1.0 / beta) @ R
            rep.add(k, "7h_U_formula", np.max(np.abs(U - Uref)), tol)
            rep.add(k, "7i_K_ones", np.max(np.abs(K @ ones - 1.0)), tol)
            rep.add(k, "7j_Q_ones", np.max(np.abs(Q.T @ ones - 1.0)), tol)
            sbar, sdot = support_bounds(K, Q)
            rep.add(k, "7k_support", float(np.sum(sbar >= sdot)), 0.0)
        else:
            rep.add(k, "7h_U_formula", np.max(np.abs(U)), tol)
            rep.add(k, "7i_K_ones", 0.0, tol)
            rep.add(k, "7j_Q_ones", 0.0, tol)
            rep.add(k, "7k_support", 0.0, 0.0)

        rep.add(k, "8a_Z_decomp", np.max(np.abs(np.diag(D) - L - L.T - Z)), tol)
        rep.add(k, "8b_ones_quad", abs(ones @ (np.diag(D) - 2 * L) @ ones), tol)
        rep.add(k, "8c_U_ones", np.max(np.abs(U @ ones)) if m > 0 else 0.0, tol)
        rep.add(k, "8d_Z_nullspace", max(0.0, tol - lam_z[1]), tol, passed=lam_z[1] > tol)
        m_ones = np.max(np.abs(M @ ones)) if M.size else 0.0
        sig_min = scipy.linalg.svdvals(M)[-1] if M.size else np.inf
        rep.add(
            k, "8e_M_nullspace",
            max(m_ones, max(0.0, tol - sig_min**2)), tol,
            passed=(m_ones <= tol and sig_min**2 > tol),
        )

        if m > 0:
            if cs is not None:
                positions = [cs.skj[(k, j)] for j in cs.Jk[k]]
            elif params.skj is not None:
                positions = list(params.skj[k])
            else:
                positions = None
            if positions is None:
                rep.add(k, "28_cutoff", float("nan"), 0.0)
                rep.checks[-1].passed = False
            else:
                sbar, sdot = support_bounds(K, Q)
                bad = sum(
                    0 if (sbar[t] <= positions[t] < sdot[t]) else 1
                    for t in range(m)
                )
                rep.add(k, "28_cutoff", float(bad), 0.0)
        else:
            rep.add(k, "28_cutoff", 0.0, 0.0)
    return rep


# ---------------------------------------------------------------------------
# built-in families


def uniform_family(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Z = W = n/(n-1) I - 1/(n-1) 11^T (complete-graph weights)."""
    if n < 2:
        raise ValueError("n must be >= 2")
    Z = (n * np.eye(n) - np.ones((n, n))) / (n - 1)
    return Z, Z.copy()


def sinkhorn_scale(d, tol: float = 1e-10, maxit: int = 10000) -> tuple[np.ndarray, np.ndarray]:
    """Diagonally scaled weights from target row sums d.

    Finds a symmetric X >= 0 with zero diagonal and row sums d by balancing
    X = diag(u) (11^T - I) diag(u), then returns Z = W = diag(X @ 1) - X.
    The balancing iteration is the symmetric scaling fixed point with a
    Newton step in log coordinates when it improves the residual.
    """
    d = np.asarray(d, dtype=float)
    n = d.size
    if n < 2:
        raise ValueError("need at least two rows")
    if np.any(d <= 0):
        raise ValueError("d must be positive")

    w = 0.5 * np.log(d / max(n - 1, 1))

    def resid(w):
        u = np.exp(np.clip(w, -350.0, 350.0))
        return u * (u.sum() - u) - d

    g = resid(w)
    for _ in range(maxit):
        if np.abs(g).max() <= tol:
            break
        u = np.exp(np.clip(w, -350.0, 350.0))
        S = u.sum()
        J = np.outer(u, u)
        np.fill_diagonal(J, u * (S - u))
        step = np.linalg.lstsq(J, -g, rcond=None)[0]
        t, base = 1.0, np.linalg.norm(g)
        for _ in range(60):
            g2 = resid(w + t * step)
            if np.linalg.norm(g2) < base:
                break
            t *= 0.5
        else:
            w = w + 0.5 * (np.log(d / np.maximum(S - u, 1e-300)) - w)
            g = resid(w)
            continue
        w = w + t * step
        g = g2
    err = np.abs(g).max()
    if not (err <= tol):
        raise NoConvergence(f"row-sum residual {err:.3e} > {tol:.1e} after {maxit} iterations", err)

    u = np.exp(w)
    X = np.outer(u, u)
    np.fill_diagonal(X, 0.0)
    X = _sym(X)
    Z = np.diag(X.sum(axis=1)) - X
    return Z, Z.copy()


@dataclass(frozen=True)
class WtaBlock:
    Z: np.ndarray
    W: np.ndarray
    K: np.ndarray
    Q: np.ndarray
    U: np.ndarray


def wta_family(s_count: int) -> WtaBlock:
    """Closed-form block for one assignment variable shared by s_count scenarios.

    The block has 1 + s_count monotone copies (the separable nonnegativity
    operator first, then the per-scenario budget projections) and s_count
    cocoercive rows, all with unit cocoercivity.
    """
    s = int(s_count)
    if s < 1:
        raise ValueError("s_count must be >= 1")
    n = 1 + s
    Z = np.eye(n)
    Z[0, 0] = s
    Z[0, 1:] = -1.0
    Z[1:, 0] = -1.0
    W = np.eye(n) - np.ones((n, n)) / n
    K = np.zeros((s, n))
    K[:, 0] = 1.0
    Q = np.zeros((n, s))
    Q[1:, :] = 1.0 / s
    U = np.zeros((n, n))
    U[0, 0] = s
    U[0, 1:] = -1.0
    U[1:, 0] = -1.0
    U[1:, 1:] = 1.0 / s
    return WtaBlock(Z=Z, W=W, K=K, Q=Q, U=U)


# ---------------------------------------------------------------------------
# lifted operators


class LiftedMaps:
    """Sparse realizations of the block matrices on the flat lifted spaces.

    Also derives the forward-substitution dependency structure and asserts,
    at build time, that the lower-triangularity the sweep relies on holds
    structurally: rows of the doubled lower factor reach only earlier
    operators, the b-coupling reaches only operators past each cutoff, and
    the cocoercive inputs use only operators up to the cutoff.
    """

    def __init__(self, cs: CouplingStructure, params: BlockMatrixSet):
        self.cs = cs
        self.params = params
        p = cs.p

        d_hx = np.empty(cs.hx_dim)
        for (i, k), sl in cs.hx_block_slices.items():
            d_hx[sl] = params.D[k][cs.s_of[(i, k)]]
        if np.any(d_hx <= 0):
            raise NotPSD("D", -1, float(d_hx.min()))
        self.d_hx = d_hx
        self.dinv_hx = 1.0 / d_hx

        def build(shape, entries):
            rows, cols, vals = entries
            if rows:
                r = np.concatenate(rows); c = np.concatenate(cols); v = np.concatenate(vals)
            else:
                r = c = v = np.zeros(0)
            return sp.csr_matrix((v, (r, c)), shape=shape)

        def hx_entries(mat_of_k):
            rows, cols, vals = [], [], []
            for k in range(p):
                A = mat_of_k[k]
                dk = cs.dims[k]
                for sr, ir in enumerate(cs.Ik[k]):
                    rsl = cs.hx_block_slices[(ir, k)]
                    for sc, ic in enumerate(cs.Ik[k]):
                        if A[sr, sc] != 0.0:
                            csl = cs.hx_block_slices[(ic, k)]
                            rows.append(np.arange(rsl.start, rsl.stop))
                            cols.append(np.arange(csl.start, csl.stop))
                            vals.append(np.full(dk, A[sr, sc]))
            return rows, cols, vals

        self.Z_A = build((cs.hx_dim, cs.hx_dim), hx_entries(params.Z))
        self.W_A = build((cs.hx_dim, cs.hx_dim), hx_entries(params.W))
        self.U_A = build((cs.hx_dim, cs.hx_dim), hx_entries(params.U))
        self.L2_A = build((cs.hx_dim, cs.hx_dim), hx_entries([2.0 * L for L in params.L]))

        rows, cols, vals = [], [], []
        for k in range(p):
            Mk = params.M[k]
            dk = cs.dims[k]
            for c_row in range(cs.nk[k] - 1):
                rsl = cs.hz_slices[(k, c_row)]
                for s, i in enumerate(cs.Ik[k]):
                    if Mk[c_row, s] != 0.0:
                        csl = cs.hx_block_slices[(i, k)]
                        rows.append(np.arange(rsl.start, rsl.stop))
                        cols.append(np.arange(csl.start, csl.stop))
                        vals.append(np.full(dk, Mk[c_row, s]))
        self.M_A = build((cs.hz_dim, cs.hx_dim), (rows, cols, vals))
        self.M_A_T = self.M_A.T.tocsr()

        rows, cols, vals = [], [], []
        for k in range(p):
            Kk = params.K[k]
            dk = cs.dims[k]
            for t, j in enumerate(cs.Jk[k]):
                rsl = cs.bx_block_slices[(j, k)]
                for s, i in enumerate(cs.Ik[k]):
                    if Kk[t, s] != 0.0:
                        csl = cs.hx_block_slices[(i, k)]
                        rows.append(np.arange(rsl.start, rsl.stop))
                        cols.append(np.arange(csl.start, csl.stop))
                        vals.append(np.full(dk, Kk[t, s]))
        self.K_A = build((cs.bx_dim, cs.hx_dim), (rows, cols, vals))

        rows, cols, vals = [], [], []
        for k in range(p):
            Qk = params.Q[k]
            dk = cs.dims[k]
            for s, i in enumerate(cs.Ik[k]):
                rsl = cs.hx_block_slices[(i, k)]
                for t, j in enumerate(cs.Jk[k]):
                    if Qk[s, t] != 0.0:
                        csl = cs.bx_block_slices[(j, k)]
                        rows.append(np.arange(rsl.start, rsl.stop))
                        cols.append(np.arange(csl.start, csl.stop))
                        vals.append(np.full(dk, Qk[s, t]))
        self.Q_A = build((cs.hx_dim, cs.bx_dim), (rows, cols, vals))

        # (D_A - 2 L_A), used for warm starts
        self.DL2 = (sp.diags(d_hx) - self.L2_A).tocsr()

        self._op_rows = {
            name: [m[cs.hx_op_slices[i]] for i in range(cs.n)]
            for name, m in (("L2", self.L2_A), ("Q", self.Q_A))
        }
        self._k_rows = [self.K_A[cs.bx_op_slices[j]] for j in range(cs.m)]
        self._assert_triangular()
        self._build_dag()

    # -- structural guarantees -------------------------------------------

    def _assert_triangular(self):
        cs = self.cs
        for i in range(cs.n):
            sub = self._op_rows["L2"][i]
            if sub.nnz and sub.indices.max() >= cs.hx_op_slices[i].start:
                raise DependencyViolation(
                    f"lower factor row block {i} reaches operator >= {i}; run validate()"
                )
            sub = self._op_rows["Q"][i]
            if sub.nnz:
                for col in np.unique(sub.indices):
                    j = self._bx_owner(col)
                    if cs.istar[j] >= i:
                        raise DependencyViolation(
                            f"b-coupling row block {i} reads operator {j} with cutoff {cs.istar[j]} >= {i}"
                        )
        for j in range(cs.m):
            sub = self._k_rows[j]
            if sub.nnz == 0:
                continue
            limit = cs.hx_op_slices[cs.istar[j]].stop
            if sub.indices.max() >= limit:
                raise DependencyViolation(
                    f"cocoercive input {j} reads an operator past its cutoff {cs.istar[j]}"
                )

    def _bx_owner(self, col: int) -> int:
        for j, sl in enumerate(self.cs.bx_op_slices):
            if sl.start <= col < sl.stop:
                return j
        raise IndexError(col)

    def _build_dag(self):
        cs = self.cs
        op_preds = [set() for _ in range(cs.n)]
        b_inputs = [set() for _ in range(cs.m)]
        op_b_preds = [set() for _ in range(cs.n)]
        for i in range(cs.n):
            sub = self._op_rows["L2"][i]
            for col in np.unique(sub.indices) if sub.nnz else ():
                op_preds[i].add(self._hx_owner(col))
            sub = self._op_rows["Q"][i]
            for col in np.unique(sub.indices) if sub.nnz else ():
                op_b_preds[i].add(self._bx_owner(col))
        for j in range(cs.m):
            sub = self._k_rows[j]
            for col in np.unique(sub.indices) if sub.nnz else ():
                b_inputs[j].add(self._hx_owner(col))
        self.op_preds = [frozenset(s) for s in op_preds]
        self.op_b_preds = [frozenset(s) for s in op_b_preds]
        self.b_inputs = [frozenset(s) for s in b_inputs]

    def _hx_owner(self, col: int) -> int:
        for i, sl in enumerate(self.cs.hx_op_slices):
            if sl.start <= col < sl.stop:
                return i
        raise IndexError(col)

    # -- applications ------------------------------------------------------

    def L2_row(self, i: int, x_flat: np.ndarray) -> np.ndarray:
        """Block i of 2 L_A x; reads only operators before i."""
        return self._op_rows["L2"][i] @ x_flat

    def Q_row(self, i: int, b_flat: np.ndarray) -> np.ndarray:
        """Block i of Q_A b; reads only cocoercive outputs with cutoff < i."""
        return self._op_rows["Q"][i] @ b_flat

    def K_row(self, j: int, x_flat: np.ndarray) -> np.ndarray:
        """Block j of K_A x; reads only operators up to the cutoff of j."""
        return self._k_rows[j] @ x_flat


_lifted_cache: "weakref.WeakKeyDictionary[BlockMatrixSet, dict]" = weakref.WeakKeyDictionary()


def lifted_maps(cs: CouplingStructure, params: BlockMatrixSet) -> LiftedMaps:
    """Build (or fetch cached) sparse lifted operators for (cs, params)."""
    per_params = _lifted_cache.setdefault(params, {})
    maps = per_params.get(cs)
    if maps is None:
        maps = LiftedMaps(cs, params)
        per_params[cs] = maps
    return maps


_WHICH = {
    "Z_A": ("Z_A", "hx", "hx"),
    "W_A": ("W_A", "hx", "hx"),
    "U_A": ("U_A", "hx", "hx"),
    "M_A": ("M_A", "hx", "hz"),
    "M_A_T": ("M_A_T", "hz", "hx"),
}


def apply_lifted(cs, params, which: str, v) -> LiftedVector:
    """Apply one of the lifted operators to a vector in its domain space.

    ``which`` is one of Z_A, W_A, U_A, M_A, M_A_T, D_A_inv.
    """
    maps = lifted_maps(cs, params)
    if which == "D_A_inv":
        data = np.asarray(v.data if isinstance(v, LiftedVector) else v, dtype=float)
        if data.shape != (cs.hx_dim,):
            raise ShapeMismatch(f"D_A_inv expects hx of length {cs.hx_dim}")
        return LiftedVector("hx", maps.dinv_hx * data, cs)
    try:
        attr, dom, cod = _WHICH[which]
    except KeyError:
        raise ValueError(f"unknown lifted operator {which!r}") from None
    data = np.asarray(v.data if isinstance(v, LiftedVector) else v, dtype=float)
    if data.shape != (cs.dim_of(dom),):
        raise ShapeMismatch(f"{which} expects {dom} of length {cs.dim_of(dom)}")
    return LiftedVector(cod, getattr(maps, attr) @ data, cs)


def apply_L_row(cs, params, x_partial, i: int) -> np.ndarray:
    """Block i of 2 L_A x, valid as soon as operators before i are final."""
    x = np.asarray(x_partial.data if isinstance(x_partial, LiftedVector) else x_partial, float)
    return lifted_maps(cs, params).L2_row(i, x)


def apply_QBK_row(cs, params, b_cache, i: int) -> np.ndarray:
    """Block i of Q_A b from the cache of cocoercive outputs."""
    b = np.asarray(b_cache.data if isinstance(b_cache, LiftedVector) else b_cache, float)
    return lifted_maps(cs, params).Q_row(i, b)
