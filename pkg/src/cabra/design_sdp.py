"""Per-block parameter design as a small cone program.

`build_sdp` lowers a `DesignSpec` to an explicit cone program over the free
scalar parameters (upper triangles of Z and W, unmasked K and Q entries,
plus objective slacks): linear equalities (row sums, consistency with the
cone-block coordinates) and a product of cones (PSD blocks, a second-order
block and a nonnegative slack for the diagonal-match objective).  Entries
masked by a zero pattern are eliminated rather than constrained, so returned
matrices carry exact structural zeros.

`feasibility_solve` runs Dykstra's alternating projections between the
affine set and the cone product; both projections are exact, so the iterates
converge to a point of the intersection whenever one exists.  Alternating
projections cannot certify infeasibility: a residual that stays above
tolerance raises `Infeasible` with the final residual attached.  Objectives
are handled by bisection on an epigraph level (`design_solve`).

`emit_sdpa` / `parse_sdpa` write and read the program in the sparse SDPA
exchange format for external solvers; the round trip is lossless.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import Infeasible, PatternConflict, SchemaError

_SQRT2 = math.sqrt(2.0)


# ---------------------------------------------------------------------------
# specs


@dataclass(frozen=True)
class DiagMatch:
    """Objective |diag(Z) - d_a - Q d_b|_2 + weight * |Z|_2 (spectral norm)."""

    d_a: tuple
    d_b: tuple
    weight: float = 0.1
    norm: str = "spectral"

    def __post_init__(self):
        object.__setattr__(self, "d_a", tuple(float(v) for v in self.d_a))
        object.__setattr__(self, "d_b", tuple(float(v) for v in self.d_b))
        if self.norm != "spectral":
            raise ValueError("only the spectral-norm variant is implemented")


@dataclass(frozen=True)
class DesignSpec:
    """One block's design problem.

    ``skj`` gives, per cocoercive row t, the cutoff position: K row t may
    touch columns <= skj[t] and Q column t rows > skj[t].  ``zero_K`` /
    ``zero_Q`` may mask further entries (but never widen the cutoff
    pattern); ``zero_Z`` / ``zero_W`` force off-diagonal zeros.
    """

    n: int
    m: int = 0
    beta: tuple = ()
    c: float = 1.0
    objective: object = None  # None | "lambda_max" | DiagMatch
    w_equals_z: bool = False
    skj: tuple = ()
    zero_Z: frozenset = frozenset()
    zero_W: frozenset = frozenset()
    zero_K: frozenset = frozenset()
    zero_Q: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        object.__setattr__(self, "skj", tuple(int(s) for s in self.skj))
        object.__setattr__(self, "zero_Z", frozenset(self.zero_Z))
        object.__setattr__(self, "zero_W", frozenset(self.zero_W))
        object.__setattr__(self, "zero_K", frozenset(self.zero_K))
        object.__setattr__(self, "zero_Q", frozenset(self.zero_Q))
        if self.n < 2:
            raise ValueError("n must be >= 2")
        if self.c <= 0:
            raise ValueError("connectivity c must be positive")
        if self.m > 0:
            if len(self.beta) != self.m:
                raise ValueError("beta must have one entry per cocoercive row")
            if len(self.skj) != self.m:
                raise ValueError("skj must have one cutoff per cocoercive row")
            for t, s in enumerate(self.skj):
                if not (0 <= s < self.n - 1):
                    raise ValueError(f"skj[{t}]={s} outside [0, n-2]")
        for i, j in self.zero_Z | self.zero_W:
            if i == j:
                raise PatternConflict("zero patterns may not touch the diagonal")
        for t in range(self.m):
            if not self.k_allowed(t):
                raise PatternConflict(f"K row {t} has no free entries; row sum 1 impossible")
            if not self.q_allowed(t):
                raise PatternConflict(f"Q column {t} has no free entries; column sum 1 impossible")

    def k_allowed(self, t: int) -> list[int]:
        return [s for s in range(self.skj[t] + 1) if (t, s) not in self.zero_K]

    def q_allowed(self, t: int) -> list[int]:
        return [s for s in range(self.skj[t] + 1, self.n) if (s, t) not in self.zero_Q]

    def zfree(self, i: int, j: int) -> bool:
        a, b = min(i, j), max(i, j)
        return (a, b) not in self.zero_Z and (b, a) not in self.zero_Z

    def wfree(self, i: int, j: int) -> bool:
        if self.w_equals_z:
            return self.zfree(i, j)
        a, b = min(i, j), max(i, j)
        return (a, b) not in self.zero_W and (b, a) not in self.zero_W


def block_parallel_spec(n: int = 6, m: int = 2, c: float = 1.0, beta=None) -> DesignSpec:
    """Three two-operator blocks with decoupled ends and mid-pipeline coupling.

    Within each block (0,1), (2,3), (4,5) the Z entries vanish so the pair
    runs concurrently; W vanishes between the first and last block so they
    can overlap across iterations; the cocoercive rows read only the first
    block and feed only operators past the middle.
    """
    if n != 6 or m != 2:
        raise ValueError("the block-parallel pattern is defined for n=6, m=2")
    beta = tuple(1.0 for _ in range(m)) if beta is None else tuple(beta)
    zero_Z = frozenset({(0, 1), (2, 3), (4, 5)})
    zero_W = frozenset((i, ip) for i in (0, 1) for ip in (4, 5))
    zero_K = frozenset((t, s) for t in range(m) for s in range(2, n))
    zero_Q = frozenset((s, t) for t in range(m) for s in range(0, 3))
    return DesignSpec(
        n=n, m=m, beta=beta, c=c, objective=None, w_equals_z=False,
        skj=tuple(2 for _ in range(m)),
        zero_Z=zero_Z, zero_W=zero_W, zero_K=zero_K, zero_Q=zero_Q,
    )


# ---------------------------------------------------------------------------
# packing helpers


def pack_sym(A: np.ndarray) -> np.ndarray:
    """Isometric upper-triangle packing: off-diagonal entries scaled by sqrt(2)."""
    n = A.shape[0]
    out = np.empty(n * (n + 1) // 2)
    idx = 0
    for i in range(n):
        out[idx] = A[i, i]
        idx += 1
        for j in range(i + 1, n):
            out[idx] = A[i, j] * _SQRT2
            idx += 1
    return out


def unpack_sym(v: np.ndarray, n: int) -> np.ndarray:
    A = np.empty((n, n))
    idx = 0
    for i in range(n):
        A[i, i] = v[idx]
        idx += 1
        for j in range(i + 1, n):
            A[i, j] = A[j, i] = v[idx] / _SQRT2
            idx += 1
    return A


def _packed_index(n: int):
    """(i, j) with i <= j -> position in the packed vector."""
    pos = {}
    idx = 0
    for i in range(n):
        pos[(i, i)] = idx
        idx += 1
        for j in range(i + 1, n):
            pos[(i, j)] = idx
            idx += 1
    return pos


@dataclass
class ConeBlock:
    name: str
    kind: str      # "psd" | "soc" | "nonneg"
    size: int      # matrix order (psd) or vector length (soc, nonneg)
    const: np.ndarray
    coef: sp.csr_matrix  # packed_len x n_theta

    @property
    def packed_len(self) -> int:
        return self.const.size

    def project_packed(self, v: np.ndarray) -> np.ndarray:
        if self.kind == "psd":
            lam, V = np.linalg.eigh(unpack_sym(v, self.size))
            lam = np.clip(lam, 0.0, None)
            return pack_sym((V * lam) @ V.T)
        if self.kind == "soc":
            s, r = v[0], v[1:]
            nr = np.linalg.norm(r)
            if nr <= s:
                return v.copy()
            if nr <= -s:
                return np.zeros_like(v)
            t = 0.5 * (s + nr)
            out = np.empty_like(v)
            out[0] = t
            out[1:] = (t / nr) * r
            return out
        return np.maximum(v, 0.0)

    def min_eig_packed(self, v: np.ndarray) -> float:
        if self.kind == "psd":
            return float(np.linalg.eigvalsh(unpack_sym(v, self.size))[0])
        if self.kind == "soc":
            return float(v[0] - np.linalg.norm(v[1:]))
        return float(v.min())


@dataclass
class SdpProblem:
    """Explicit cone program over the free design parameters."""

    spec: DesignSpec
    var_names: list
    var_index: dict
    eq_rows: sp.csr_matrix
    eq_rhs: np.ndarray
    blocks: list
    objective: np.ndarray  # linear objective over theta (zeros = feasibility)

    @property
    def n_theta(self) -> int:
        return len(self.var_names)

    @property
    def n_equalities(self) -> int:
        return self.eq_rows.shape[0]

    def block_names(self) -> list:
        return [b.name for b in self.blocks]

    def theta_from_matrices(self, Z, W=None, K=None, Q=None, extra=None) -> np.ndarray:
        theta = np.zeros(self.n_theta)
        for idx, name in enumerate(self.var_names):
            tag = name[0]
            if tag == "Z":
                theta[idx] = Z[name[1], name[2]]
            elif tag == "W" and W is not None:
                theta[idx] = W[name[1], name[2]]
            elif tag == "K" and K is not None:
                theta[idx] = K[name[1], name[2]]
            elif tag == "Q" and Q is not None:
                theta[idx] = Q[name[1], name[2]]
            elif extra is not None and name in extra:
                theta[idx] = extra[name]
        return theta

    def matrices_from_theta(self, theta: np.ndarray):
        n, m = self.spec.n, self.spec.m
        Z = np.zeros((n, n))
        W = np.zeros((n, n))
        K = np.zeros((m, n))
        Q = np.zeros((n, m))
        for idx, name in enumerate(self.var_names):
            tag = name[0]
            if tag == "Z":
                Z[name[1], name[2]] = Z[name[2], name[1]] = theta[idx]
            elif tag == "W":
                W[name[1], name[2]] = W[name[2], name[1]] = theta[idx]
            elif tag == "K":
                K[name[1], name[2]] = theta[idx]
            elif tag == "Q":
                Q[name[1], name[2]] = theta[idx]
        if self.spec.w_equals_z:
            W = Z.copy()
        return Z, W, K, Q


class _Rows:
    def __init__(self):
        self.data, self.rows, self.cols = [], [], []
        self.rhs = []
        self.r = 0

    def add(self, coeffs: dict, rhs: float):
        for col, val in coeffs.items():
            self.rows.append(self.r)
            self.cols.append(col)
            self.data.append(val)
        self.rhs.append(rhs)
        self.r += 1

    def matrix(self, n_cols) -> tuple[sp.csr_matrix, np.ndarray]:
        M = sp.csr_matrix((self.data, (self.rows, self.cols)), shape=(self.r, n_cols))
        return M, np.array(self.rhs)


def build_sdp(spec: DesignSpec, tau: float | None = None) -> SdpProblem:
    """Lower a design spec to the explicit cone program.

    With an objective and ``tau=None`` the epigraph level is a variable with
    unit objective coefficient (the form written to SDPA files); with
    ``tau`` given the level is fixed, which is the feasibility subproblem
    used during bisection.
    """
    n, m = spec.n, spec.m
    var_names: list = []

    def addvar(name):
        var_names.append(name)
        return len(var_names) - 1

    for i in range(n):
        for j in range(i, n):
            if i == j or spec.zfree(i, j):
                addvar(("Z", i, j))
    if not spec.w_equals_z:
        for i in range(n):
            for j in range(i, n):
                if i == j or spec.wfree(i, j):
                    addvar(("W", i, j))
    for t in range(m):
        for s in spec.k_allowed(t):
            addvar(("K", t, s))
    for t in range(m):
        for s in spec.q_allowed(t):
            addvar(("Q", s, t))

    has_obj_var = spec.objective is not None and tau is None
    if spec.objective == "lambda_max" and has_obj_var:
        addvar(("tau",))
    if isinstance(spec.objective, DiagMatch):
        addvar(("s1",))
        addvar(("s2",))
        if has_obj_var:
            addvar(("tau",))

    index = {name: i for i, name in enumerate(var_names)}
    nv = len(var_names)

    def zvar(i, j):
        return index.get(("Z", min(i, j), max(i, j)))

    def wvar(i, j):
        if spec.w_equals_z:
            return zvar(i, j)
        return index.get(("W", min(i, j), max(i, j)))

    eq = _Rows()
    for i in range(n):  # Z 1 = 0
        coeffs = {}
        for j in range(n):
            v = zvar(i, j)
            if v is not None:
                coeffs[v] = coeffs.get(v, 0.0) + 1.0
        eq.add(coeffs, 0.0)
    if not spec.w_equals_z:
        for i in range(n):  # W 1 = 0
            coeffs = {}
            for j in range(n):
                v = wvar(i, j)
                if v is not None:
                    coeffs[v] = coeffs.get(v, 0.0) + 1.0
            eq.add(coeffs, 0.0)
    for t in range(m):  # K 1 = 1
        eq.add({index[("K", t, s)]: 1.0 for s in spec.k_allowed(t)}, 1.0)
    for t in range(m):  # Q^T 1 = 1
        eq.add({index[("Q", s, t)]: 1.0 for s in spec.q_allowed(t)}, 1.0)
    eq_rows, eq_rhs = eq.matrix(nv)

    blocks: list[ConeBlock] = []

    def sym_block(name, size, entries, const_mat=None):
        """entries: dict (i, j) i<=j -> list of (var, coef)."""
        pos = _packed_index(size)
        const = np.zeros(size * (size + 1) // 2)
        if const_mat is not None:
            const = pack_sym(const_mat)
        rows, cols, vals = [], [], []
        for (i, j), terms in entries.items():
            scale = 1.0 if i == j else _SQRT2
            for var, coef in terms:
                rows.append(pos[(i, j)])
                cols.append(var)
                vals.append(coef * scale)
        coef = sp.csr_matrix((vals, (rows, cols)), shape=(const.size, nv))
        blocks.append(ConeBlock(name, "psd", size, const, coef))

    if not spec.w_equals_z:
        entries = {}
        for i in range(n):
            for j in range(i, n):
                terms = []
                v = zvar(i, j)
                if v is not None:
                    terms.append((v, 1.0))
                v = wvar(i, j)
                if v is not None:
                    terms.append((v, -1.0))
                if terms:
                    entries[(i, j)] = terms
        sym_block("Z_minus_W", n, entries)

    # Schur block [[Z, Q - K^T], [Q^T - K, diag(beta)]]  (just [[Z]] if m=0)
    size = n + m
    entries = {}
    for i in range(n):
        for j in range(i, n):
            v = zvar(i, j)
            if v is not None:
                entries[(i, j)] = [(v, 1.0)]
    for s in range(n):
        for t in range(m):
            terms = []
            v = index.get(("Q", s, t))
            if v is not None:
                terms.append((v, 1.0))
            v = index.get(("K", t, s))
            if v is not None:
                terms.append((v, -1.0))
            if terms:
                entries[(s, n + t)] = terms
    const_mat = np.zeros((size, size))
    for t in range(m):
        const_mat[n + t, n + t] = spec.beta[t]
    sym_block("schur", size, entries, const_mat)

    # Fiedler block W + (c/n) 11^T - c I
    entries = {}
    for i in range(n):
        for j in range(i, n):
            v = wvar(i, j)
            if v is not None:
                entries[(i, j)] = [(v, 1.0)]
    const_mat = np.full((n, n), spec.c / n) - spec.c * np.eye(n)
    sym_block("fiedler", n, entries, const_mat)

    objective = np.zeros(nv)
    if spec.objective == "lambda_max":
        # tau I - Z >= 0
        entries = {}
        for i in range(n):
            for j in range(i, n):
                terms = []
                v = zvar(i, j)
                if v is not None:
                    terms.append((v, -1.0))
                if i == j and has_obj_var:
                    terms.append((index[("tau",)], 1.0))
                if terms:
                    entries[(i, j)] = terms
        const_mat = (tau if tau is not None else 0.0) * np.eye(n)
        sym_block("obj_cap", n, entries, const_mat if tau is not None else None)
        if has_obj_var:
            objective[index[("tau",)]] = 1.0
    elif isinstance(spec.objective, DiagMatch):
        obj = spec.objective
        # s2 I - Z >= 0 bounds the spectral norm of the PSD matrix Z
        entries = {}
        for i in range(n):
            for j in range(i, n):
                terms = []
                v = zvar(i, j)
                if v is not None:
                    terms.append((v, -1.0))
                if i == j:
                    terms.append((index[("s2",)], 1.0))
                if terms:
                    entries[(i, j)] = terms
        sym_block("spectral_cap", n, entries)
        # SOC: |diag(Z) - d_a - Q d_b| <= s1
        rows, cols, vals = [], [], []
        const = np.zeros(1 + n)
        rows.append(0); cols.append(index[("s1",)]); vals.append(1.0)
        for i in range(n):
            const[1 + i] = -obj.d_a[i]
            v = zvar(i, i)
            rows.append(1 + i); cols.append(v); vals.append(1.0)
            for t in range(m):
                v = index.get(("Q", i, t))
                if v is not None:
                    rows.append(1 + i); cols.append(v); vals.append(-obj.d_b[t])
        coef = sp.csr_matrix((vals, (rows, cols)), shape=(1 + n, nv))
        blocks.append(ConeBlock("diag_match", "soc", 1 + n, const, coef))
        # tau - s1 - weight s2 >= 0
        rows = [0, 0]; cols = [index[("s1",)], index[("s2",)]]; vals = [-1.0, -obj.weight]
        const = np.array([tau if tau is not None else 0.0])
        if has_obj_var:
            rows.append(0); cols.append(index[("tau",)]); vals.append(1.0)
            const = np.zeros(1)
        coef = sp.csr_matrix((vals, (rows, cols)), shape=(1, nv))
        blocks.append(ConeBlock("obj_level", "nonneg", 1, const, coef))
        if has_obj_var:
            objective[index[("tau",)]] = 1.0

    return SdpProblem(
        spec=spec, var_names=var_names, var_index=index,
        eq_rows=eq_rows, eq_rhs=eq_rhs, blocks=blocks, objective=objective,
    )


# ---------------------------------------------------------------------------
# Dykstra feasibility solver


@dataclass
class DesignResult:
    Z: np.ndarray
    W: np.ndarray
    K: np.ndarray
    Q: np.ndarray
    residual: float
    iterations: int


def _dykstra(problem: SdpProblem, theta0: np.ndarray, tol: float, maxit: int,
             plateau: float = 0.0):
    """Alternating projections with Dykstra corrections on (affine, cones).

    The iterate is [theta; packed cone coordinates].  Returns the affine
    projection of the final iterate plus the residual achieved.
    """
    nv = problem.n_theta
    offs = [nv]
    for b in problem.blocks:
        offs.append(offs[-1] + b.packed_len)
    N = offs[-1]

    # affine rows: consistency X_b - coef theta = const, plus the equalities
    parts_top = []
    for b in problem.blocks:
        parts_top.append(-b.coef)
    consist = sp.hstack(
        [sp.vstack(parts_top)] + [sp.identity(N - nv, format="csr")], format="csr"
    ) if problem.blocks else sp.csr_matrix((0, N))
    eq_full = sp.hstack(
        [problem.eq_rows, sp.csr_matrix((problem.eq_rows.shape[0], N - nv))], format="csr"
    )
    E = sp.vstack([consist, eq_full]).tocsr()
    f = np.concatenate([np.concatenate([b.const for b in problem.blocks]) if problem.blocks else np.zeros(0), problem.eq_rhs])

    Ed = E.toarray()
    # pseudo-inverse application via SVD (handles redundant rows)
    U, S, Vt = np.linalg.svd(Ed, full_matrices=False)
    keep = S > S[0] * 1e-12 if S.size else np.zeros(0, bool)
    Ui, Si, Vti = U[:, keep], S[keep], Vt[keep]

    def proj_affine(x):
        res = Ed @ x - f
        return x - Vti.T @ ((Ui.T @ res) / Si)

    def proj_cones(x):
        out = x.copy()
        for b, o in zip(problem.blocks, offs):
            out[o:o + b.packed_len] = b.project_packed(x[o:o + b.packed_len])
        return out

    def residual_at(x_affine):
        worst = 0.0
        for b, o in zip(problem.blocks, offs):
            worst = max(worst, -min(0.0, b.min_eig_packed(x_affine[o:o + b.packed_len])))
        return worst

    x = np.zeros(N)
    x[:nv] = theta0
    for b, o in zip(problem.blocks, offs):
        x[o:o + b.packed_len] = b.coef @ theta0 + b.const
    x = proj_affine(x)
    best = residual_at(x)
    if best <= tol:
        return x, best, 0

    p = np.zeros(N)
    q = np.zeros(N)
    y = x
    checkpoint = best
    for it in range(1, maxit + 1):
        z = proj_cones(y + p)
        p = y + p - z
        y = proj_affine(z + q)
        q = z + q - y
        if it % 10 == 0 or it == maxit:
            res = residual_at(y)
            if res <= tol:
                return y, res, it
            if plateau > 0.0 and it % 500 == 0:
                if res > plateau * checkpoint:
                    return y, res, it
                checkpoint = res
    return y, residual_at(y), maxit


def feasibility_solve(spec: DesignSpec, tol: float = 1e-9, maxit: int = 50000,
                      initial=None, tau: float | None = None,
                      plateau: float = 0.0) -> DesignResult:
    """Find parameters satisfying the design constraints by projection.

    ``initial`` may be a (Z, W, K, Q) tuple used as the starting point;
    the default is the uniform family with cutoff-respecting couplings.
    Raises `Infeasible` when the residual stays above ``tol`` after
    ``maxit`` iterations.
    """
    stripped = spec.objective is not None and tau is None
    prob_spec = DesignSpec(
        n=spec.n, m=spec.m, beta=spec.beta, c=spec.c,
        objective=None if stripped else spec.objective,
        w_equals_z=spec.w_equals_z, skj=spec.skj,
        zero_Z=spec.zero_Z, zero_W=spec.zero_W,
        zero_K=spec.zero_K, zero_Q=spec.zero_Q,
    ) if stripped else spec
    problem = build_sdp(prob_spec, tau=tau)

    if initial is None:
        initial = default_initial(prob_spec)
    extra = {}
    if isinstance(prob_spec.objective, DiagMatch):
        Z0 = initial[0]
        obj = prob_spec.objective
        r0 = np.diag(Z0) - np.array(obj.d_a) - initial[3] @ np.array(obj.d_b)
        extra[("s1",)] = float(np.linalg.norm(r0))
        extra[("s2",)] = float(np.linalg.eigvalsh(Z0)[-1])
    theta0 = problem.theta_from_matrices(*initial, extra=extra)

    x, res, it = _dykstra(problem, theta0, tol, maxit, plateau=plateau)
    if res > tol:
        raise Infeasible(res, it)
    Z, W, K, Q = problem.matrices_from_theta(x[:problem.n_theta])
    return DesignResult(Z=Z, W=W, K=K, Q=Q, residual=res, iterations=it)


def default_initial(spec: DesignSpec):
    """Uniform-family start with canonical cutoff-respecting couplings."""
    n, m = spec.n, spec.m
    Z = (n * np.eye(n) - np.ones((n, n))) / (n - 1)
    W = Z.copy()
    K = np.zeros((m, n))
    Q = np.zeros((n, m))
    for t in range(m):
        ks = spec.k_allowed(t)
        K[t, ks[-1]] = 1.0
        qs = spec.q_allowed(t)
        Q[qs, t] = 1.0 / len(qs)
    return Z, W, K, Q


def lambda_max_start(result: DesignResult) -> float:
    return float(np.linalg.eigvalsh(result.Z)[-1])


def design_solve(spec: DesignSpec, tol: float = 1e-9, maxit: int = 20000,
                 bisect_rel: float = 1e-2, bisect_iters: int = 20) -> DesignResult:
    """Feasibility for plain specs; bisection on the epigraph level otherwise.

    The objective level is bisected at a workable probe tolerance and the
    accepted design is then re-solved, from itself, at a marginally relaxed
    level with the full tolerance, so the returned matrices are as tight as
    a plain feasibility solve.
    """
    if spec.objective is None:
        return feasibility_solve(spec, tol=tol, maxit=maxit)

    base = feasibility_solve(spec, tol=tol, maxit=maxit)
    if spec.objective == "lambda_max":
        hi = lambda_max_start(base)
        lo = spec.c
    else:
        obj = spec.objective
        r = np.diag(base.Z) - np.array(obj.d_a) - base.Q @ np.array(obj.d_b)
        hi = float(np.linalg.norm(r) + obj.weight * np.linalg.eigvalsh(base.Z)[-1])
        lo = 0.0
    best = base
    warm = (base.Z, base.W, base.K, base.Q)
    probe_tol = max(tol, 1e-8)
    probe_maxit = min(maxit, 3000)
    found = False
    for _ in range(bisect_iters):
        if hi - lo <= bisect_rel * max(1.0, hi):
            break
        mid = 0.5 * (hi + lo)
        try:
            cand = feasibility_solve(
                spec, tol=probe_tol, maxit=probe_maxit, initial=warm, tau=mid,
                plateau=0.9,
            )
        except Infeasible:
            lo = mid
            continue
        best, hi = cand, mid
        warm = (cand.Z, cand.W, cand.K, cand.Q)
        found = True
    if found and probe_tol > tol:
        best = feasibility_solve(
            spec, tol=tol, maxit=maxit, initial=warm,
            tau=hi * (1.0 + 1e-3) + 1e-9,
        )
    return best


def check_fiedler(W: np.ndarray) -> float:
    """Second-smallest eigenvalue of a symmetric matrix."""
    W = np.asarray(W, dtype=float)
    lam = np.linalg.eigvalsh(0.5 * (W + W.T))
    return float(lam[1]) if lam.size > 1 else float(lam[0])


# ---------------------------------------------------------------------------
# SDPA sparse exchange format
#
# The emitted problem is:  min c^T x  s.t.  sum_k x_k F_k - F0 >= 0 (block
# diagonal), with one PSD block per cone block (second-order blocks written
# as arrow matrices, nonnegative blocks as diagonal entries) and a final
# diagonal block carrying each equality as a pair of opposed inequalities.


def _fmt(v: float) -> str:
    return f"{v:.17g}"


def sdpa_data(problem: SdpProblem):
    """Canonical tuple (nvars, blockstruct, c, entries) for the SDPA file.

    entries is a dict (matno, blockno, i, j) -> value with 1-based indices,
    matno 0 denoting F0, and only upper-triangle entries present.
    """
    nv = problem.n_theta
    blockstruct = []
    entries = {}

    def put(mat, blk, i, j, val):
        if val == 0.0:
            return
        key = (mat, blk, min(i, j), max(i, j))
        entries[key] = entries.get(key, 0.0) + val

    blkno = 0
    for b in problem.blocks:
        blkno += 1
        if b.kind == "psd":
            blockstruct.append(b.size)
            pos = _packed_index(b.size)
            inv = {v: k for k, v in pos.items()}
            coef = b.coef.tocoo()
            for r, cvar, val in zip(coef.row, coef.col, coef.data):
                i, j = inv[r]
                scale = 1.0 if i == j else 1.0 / _SQRT2
                put(cvar + 1, blkno, i + 1, j + 1, val * scale)
            for r, cval in enumerate(b.const):
                i, j = inv[r]
                scale = 1.0 if i == j else 1.0 / _SQRT2
                put(0, blkno, i + 1, j + 1, -cval * scale)
        elif b.kind == "soc":
            d = b.size - 1
            blockstruct.append(d + 1)
            # arrow matrix [[s I, r], [r^T, s]]
            coef = b.coef.tocoo()
            for r, cvar, val in zip(coef.row, coef.col, coef.data):
                if r == 0:
                    for i in range(d + 1):
                        put(cvar + 1, blkno, i + 1, i + 1, val)
                else:
                    put(cvar + 1, blkno, r, d + 1, val)
            for r, cval in enumerate(b.const):
                if cval == 0.0:
                    continue
                if r == 0:
                    for i in range(d + 1):
                        put(0, blkno, i + 1, i + 1, -cval)
                else:
                    put(0, blkno, r, d + 1, -cval)
        else:  # nonneg: diagonal block
            blockstruct.append(-b.size)
            coef = b.coef.tocoo()
            for r, cvar, val in zip(coef.row, coef.col, coef.data):
                put(cvar + 1, blkno, r + 1, r + 1, val)
            for r, cval in enumerate(b.const):
                put(0, blkno, r + 1, r + 1, -cval)

    n_eq = problem.n_equalities
    if n_eq:
        blkno += 1
        blockstruct.append(-2 * n_eq)
        eq = problem.eq_rows.tocoo()
        for r, cvar, val in zip(eq.row, eq.col, eq.data):
            put(cvar + 1, blkno, 2 * r + 1, 2 * r + 1, val)
            put(cvar + 1, blkno, 2 * r + 2, 2 * r + 2, -val)
        for r, rhs in enumerate(problem.eq_rhs):
            put(0, blkno, 2 * r + 1, 2 * r + 1, rhs)
            put(0, blkno, 2 * r + 2, 2 * r + 2, -rhs)

    entries = {k: v for k, v in entries.items() if v != 0.0}
    return nv, blockstruct, list(problem.objective), entries


def emit_sdpa(problem: SdpProblem, sink) -> None:
    """Write the problem in sparse SDPA format (.dat-s) to a path or stream."""
    nv, blockstruct, c, entries = sdpa_data(problem)
    own = isinstance(sink, (str, bytes)) or hasattr(sink, "__fspath__")
    fh = open(sink, "w") if own else sink
    try:
        fh.write(f"{nv}\n")
        fh.write(f"{len(blockstruct)}\n")
        fh.write(" ".join(str(b) for b in blockstruct) + "\n")
        fh.write(" ".join(_fmt(v) for v in c) + "\n")
        for (mat, blk, i, j), val in sorted(entries.items()):
            fh.write(f"{mat} {blk} {i} {j} {_fmt(val)}\n")
    finally:
        if own:
            fh.close()


def parse_sdpa(source):
    """Read a sparse SDPA file back into (nvars, blockstruct, c, entries)."""
    own = isinstance(source, (str, bytes)) or hasattr(source, "__fspath__")
    fh = open(source) if own else source
    try:
        lines = [
            ln.strip() for ln in fh
            if ln.strip() and not ln.lstrip().startswith(("*", '"'))
        ]
    finally:
        if own:
            fh.close()
    if len(lines) < 4:
        raise SchemaError("SDPA file too short")

    def ints(line):
        return [int(tok) for tok in line.replace(",", " ").replace("{", " ").replace("}", " ").replace("(", " ").replace(")", " ").split()]

    try:
        nv = ints(lines[0])[0]
        nblocks = ints(lines[1])[0]
        blockstruct = ints(lines[2])
        c = [float(tok) for tok in lines[3].replace(",", " ").split()]
        entries = {}
        for ln in lines[4:]:
            toks = ln.split()
            mat, blk, i, j = int(toks[0]), int(toks[1]), int(toks[2]), int(toks[3])
            entries[(mat, blk, min(i, j), max(i, j))] = float(toks[4])
    except (ValueError, IndexError) as exc:
        raise SchemaError(f"malformed SDPA line: {exc}") from exc
    if len(blockstruct) != nblocks:
        raise SchemaError("block structure line does not match block count")
    if len(c) != nv:
        raise SchemaError("objective line does not match variable count")
    return nv, blockstruct, c, entries


def sdpa_roundtrip_ok(problem: SdpProblem) -> bool:
    """Emit to text and parse back; exact equality of the canonical data."""
    buf = io.StringIO()
    emit_sdpa(problem, buf)
    buf.seek(0)
    return parse_sdpa(buf) == sdpa_data(problem)
