"""Seeded instance generators and reference oracles for the experiment suite.

Each generator returns a `ProblemInstance` bundling the coupling structure,
the operator bank, one or more parameter strategies, per-experiment defaults
for (alpha, gamma), and enough raw data for the reference oracles.  All
randomness flows through numpy Generators seeded per trial, so instances are
reproducible byte for byte.

Halfspace conventions: the operator blocks always project onto
{x : c^T x <= v}.  Experiments whose feasible set is an intersection of
"greater-than" halfspaces (the near-parallel projection problems) negate
(c, v) when building the operators and keep the original orientation in the
metadata for violation reporting.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import design_sdp as dz
from . import files
from . import matparams as mp
from . import operators as op
from . import solver as sv
from . import structure as st

EXPERIMENT_NAMES = (
    "illustrative", "toy2d", "halfspace_scaled", "quadratic_scaled",
    "halfquad", "block_parallel", "wta",
)


@dataclass
class ProblemInstance:
    name: str
    kind: str                    # feasibility | quadratic | composite | wta
    cs: st.CouplingStructure
    ops: op.OperatorBank
    params: dict
    alpha: float
    gamma: float
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def config(self, **over) -> sv.SolverConfig:
        kw = dict(alpha=self.alpha, gamma=self.gamma)
        kw.update(over)
        return sv.SolverConfig(**kw)


def instance_hash(inst: ProblemInstance) -> str:
    """Stable content hash over the generated data."""
    h = hashlib.sha256()
    h.update(inst.name.encode())
    h.update(json.dumps(st.to_json_dict(inst.cs), sort_keys=True).encode())
    for bank in (inst.ops.monotone, inst.ops.cocoercive):
        for o in bank:
            h.update(json.dumps(files.operator_to_dict(o), sort_keys=True).encode())
    for label in sorted(inst.params):
        pars = inst.params[label]
        h.update(label.encode())
        for k in range(pars.p):
            h.update(np.ascontiguousarray(pars.Z[k]).tobytes())
            h.update(np.ascontiguousarray(pars.K[k]).tobytes())
            h.update(np.ascontiguousarray(pars.Q[k]).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# violation / objective helpers


def halfspace_violation(inst: ProblemInstance, y: np.ndarray) -> float:
    """Sum of positive constraint gaps of the monotone projections at y."""
    cs = inst.cs
    total = 0.0
    for i, o in enumerate(inst.ops.monotone):
        sel = st.select_A(cs, y).data[cs.hx_op_slices[i]]
        if isinstance(o, op.HalfspaceNormalCone):
            total += max(0.0, float(o.c @ sel - o.v))
        elif isinstance(o, op.NonnegativeCone):
            total += float(np.sum(np.maximum(-sel, 0.0)))
    return total


def quadratic_objective_B(inst: ProblemInstance, y: np.ndarray) -> float:
    """Sum of the quadratics behind the cocoercive blocks, at the selection."""
    cs = inst.cs
    total = 0.0
    xb = st.select_B(cs, y).data
    for j, o in enumerate(inst.ops.cocoercive):
        v = xb[cs.bx_op_slices[j]]
        total += 0.5 * float(v @ o.H @ v) - float(o.h @ v)
    return total


def quadratic_objective_A(inst: ProblemInstance, y: np.ndarray) -> float:
    """Sum of the quadratics behind affine monotone blocks, at the selection."""
    cs = inst.cs
    total = 0.0
    xa = st.select_A(cs, y).data
    for i, o in enumerate(inst.ops.monotone):
        v = xa[cs.hx_op_slices[i]]
        total += 0.5 * float(v @ o.H @ v) - float(o.h @ v)
    return total


def wta_objective(inst: ProblemInstance, y: np.ndarray) -> float:
    """Expected surviving value, the unscaled stochastic objective."""
    meta = inst.meta
    w, V, q = meta["w"], meta["V"], meta["q"]
    branch_of = meta["branch_of"]
    block_index = meta["block_index"]
    nW, nE, nS, nT = q.shape
    total = 0.0
    for s in range(nS):
        for j in range(nE):
            dot = 0.0
            for i in range(nW):
                for t in range(nT):
                    k = block_index[(i, j, t, branch_of[s, t])]
                    dot += q[i, j, s, t] * y[k]
            total += w[s] * V[j] * np.exp(-dot)
    return total


def make_metrics(inst: ProblemInstance, reference: np.ndarray | None):
    """Trace callbacks: objective gap against the reference, violation sum."""
    f_ref = None
    objective = None
    if inst.kind == "quadratic":
        objective = lambda y: quadratic_objective_A(inst, y)
    elif inst.kind == "composite":
        objective = lambda y: quadratic_objective_B(inst, y)
    elif inst.kind == "wta":
        objective = lambda y: wta_objective(inst, y)
    if objective is not None and reference is not None:
        f_ref = objective(reference)

    def metrics(y):
        out = {}
        if objective is not None:
            val = objective(y)
            out["objective_gap"] = abs(val - f_ref) if f_ref is not None else val
        out["violation"] = halfspace_violation(inst, y)
        return out

    return metrics


# ---------------------------------------------------------------------------
# generators


def gen_toy2d() -> ProblemInstance:
    """Two nearly parallel greater-than halfspaces in the plane."""
    c1 = np.array([0.05, -1.0])
    c2 = np.array([0.05, 1.0])
    v = np.array([2.0, 2.0])
    cs = st.build_structure([[0, 1], [0, 1]], [], [1, 1])
    ops = op.OperatorBank(
        monotone=(
            op.HalfspaceNormalCone(-c1, -v[0]),
            op.HalfspaceNormalCone(-c2, -v[1]),
        ),
        cocoercive=(),
    )
    Z, W = mp.uniform_family(2)
    params = {
        "uniform": mp.derive(cs, [Z, Z], [W, W]),
        "scaled": mp.derive(cs, [0.0025 * Z, Z], [0.0025 * W, W]),
    }
    return ProblemInstance(
        name="toy2d", kind="feasibility", cs=cs, ops=ops, params=params,
        alpha=2.0, gamma=2.0,
        meta={"c": np.stack([c1, c2]), "v": v, "direction": "ge"},
    )


def _near_parallel_halfspaces(rng, n, p):
    """Normals c +/- small noise, constants in [0, 1]; feasible set is the
    narrow wedge {c_i^T x >= v_i}."""
    c = rng.uniform(0.0, 2.0, size=p)
    half = n // 2
    cs_rows = np.empty((n, p))
    for i in range(half):
        cs_rows[i] = c + rng.uniform(0.0, 0.1, size=p)
    for i in range(half, n):
        cs_rows[i] = rng.uniform(0.0, 0.1, size=p) - c
    v = rng.uniform(0.0, 1.0, size=n)
    return cs_rows, v


def gen_halfspace_scaled(seed: int = 0, n: int = 30, p: int = 200,
                         scale: float = 1.0) -> ProblemInstance:
    """Scalar blocks, every operator reads all of them; m = 0."""
    rng = np.random.default_rng(seed)
    p_eff = max(2, int(round(p * scale)))
    c_rows, v = _near_parallel_halfspaces(rng, n, p_eff)
    cs = st.build_structure([list(range(p_eff))] * n, [], [1] * p_eff)
    ops = op.OperatorBank(
        monotone=tuple(op.HalfspaceNormalCone(-c_rows[i], -v[i]) for i in range(n)),
        cocoercive=(),
    )
    Zu, Wu = mp.uniform_family(n)
    params = {"uniform": mp.derive(cs, [Zu] * p_eff, [Wu] * p_eff)}
    Zs, Ws = [], []
    for k in range(p_eff):
        d_k = c_rows[:, k] ** 2
        Zk, Wk = mp.sinkhorn_scale(d_k, tol=1e-10, maxit=10000)
        Zs.append(Zk)
        Ws.append(Wk)
    params["sinkhorn"] = mp.derive(cs, Zs, Ws)
    return ProblemInstance(
        name="halfspace_scaled", kind="feasibility", cs=cs, ops=ops, params=params,
        alpha=2.0, gamma=0.95, seed=seed,
        meta={"c": c_rows, "v": v, "direction": "ge"},
    )


def gen_quadratic_scaled(seed: int = 0, n: int = 20, p: int = 100,
                         scale: float = 1.0) -> ProblemInstance:
    """Affine monotone operators (quadratic gradients); m = 0."""
    rng = np.random.default_rng(seed)
    p_eff = max(2, int(round(p * scale)))
    Hs, hs = [], []
    centre = rng.uniform(0.0, 1.0, size=p_eff)
    for _ in range(n):
        X = rng.uniform(0.0, 1.0, size=(p_eff, p_eff))
        Hs.append(X.T @ X)
        hs.append(centre + rng.uniform(-0.5, 0.5, size=p_eff))
    cs = st.build_structure([list(range(p_eff))] * n, [], [1] * p_eff)
    ops = op.OperatorBank(
        monotone=tuple(op.AffineMonotone(H, h) for H, h in zip(Hs, hs)),
        cocoercive=(),
    )
    Zu, Wu = mp.uniform_family(n)
    params = {"uniform": mp.derive(cs, [Zu] * p_eff, [Wu] * p_eff)}
    Zs, Ws = [], []
    for k in range(p_eff):
        d_k = np.array([Hs[i][k, k] + abs(hs[i][k]) for i in range(n)])
        Zk, Wk = mp.sinkhorn_scale(d_k, tol=1e-10, maxit=10000)
        Zs.append(Zk)
        Ws.append(Wk)
    params["sinkhorn"] = mp.derive(cs, Zs, Ws)
    return ProblemInstance(
        name="quadratic_scaled", kind="quadratic", cs=cs, ops=ops, params=params,
        alpha=0.5, gamma=1.75, seed=seed,
        meta={"H": Hs, "h": hs},
    )


def _haar_orthogonal(rng, d):
    """QR of a Gaussian matrix with the sign fix that makes it Haar."""
    X = rng.standard_normal((d, d))
    Qm, R = np.linalg.qr(X)
    return Qm * np.sign(np.diag(R))


def _illustrative_sets():
    KA = [[2, 3, 4], [1, 2], [0, 1, 4], [0, 3, 4]]
    KB = [[3, 4], [2, 4], [0, 3, 4]]
    istar = [2, 0, 2]
    return KA, KB, istar


_DESIGN_CACHE: dict = {}


def _solve_design(spec: dz.DesignSpec, tol=1e-9, maxit=20000) -> dz.DesignResult:
    key = (spec, tol, maxit)
    if key not in _DESIGN_CACHE:
        _DESIGN_CACHE[key] = dz.design_solve(spec, tol=tol, maxit=maxit)
    return _DESIGN_CACHE[key]


def _designed_params(cs, beta_bound, tol=1e-9, maxit=20000):
    """Per-block least-spread design with W = Z; identical blocks share one solve."""
    Zs, Ws, Ks, Qs = [], [], [], []
    for k in range(cs.p):
        n_k, m_k = cs.nk[k], cs.mk[k]
        spec = dz.DesignSpec(
            n=n_k, m=m_k,
            beta=tuple(beta_bound[j] for j in cs.Jk[k]),
            c=2.0 * (1.0 - np.cos(np.pi / n_k)),
            objective="lambda_max", w_equals_z=True,
            skj=tuple(cs.skj[(k, j)] for j in cs.Jk[k]),
        )
        r = _solve_design(spec, tol=tol, maxit=maxit)
        Zs.append(r.Z)
        Ws.append(r.W)
        Ks.append(r.K if m_k else None)
        Qs.append(r.Q if m_k else None)
    return Zs, Ws, Ks, Qs


def gen_illustrative(seed: int = 0, scale: float = 1.0) -> ProblemInstance:
    """Five coupled blocks, four halfspace projections, three quadratics.

    ``meta["uncoupled"]`` holds the same problem expanded onto a single
    block with identity selections, for comparison runs.
    """
    rng = np.random.default_rng(seed)
    d = max(1, int(round(200 * scale)))
    KA, KB, istar = _illustrative_sets()
    cs = st.build_structure(KA, KB, [d] * 5, istar_choice=istar)

    mono = []
    for i in range(4):
        dim = len(KA[i]) * d
        c_i = rng.uniform(-0.5, 0.5, size=dim)
        v_i = rng.uniform(0.0, 10.0)
        mono.append(op.HalfspaceNormalCone(c_i, v_i))
    coco = []
    for j in range(3):
        dim = len(KB[j]) * d
        lam = rng.uniform(0.0, 1.0, size=dim)
        Qm = _haar_orthogonal(rng, dim)
        H = (Qm * lam) @ Qm.T
        H = 0.5 * (H + H.T)
        h = rng.uniform(-0.5, 0.5, size=dim)
        coco.append(op.AffineCocoercive(H, h, beta=1.0 / max(lam)))
    ops = op.OperatorBank(monotone=tuple(mono), cocoercive=tuple(coco))

    Zs, Ws, Ks, Qs = _designed_params(cs, beta_bound=(1.0, 1.0, 1.0))
    beta = np.array([o.beta for o in coco])
    params = {"designed": mp.derive(cs, Zs, Ws, Ks, Qs, beta=beta)}

    # identity-selection expansion onto one block of dimension 5 d
    cs1 = st.build_structure([[0]] * 4, [[0]] * 3, [5 * d], istar_choice=[0, 1, 2])
    offs = {k: k * d for k in range(5)}
    mono1 = []
    for i in range(4):
        c_full = np.zeros(5 * d)
        for a, k in enumerate(KA[i]):
            c_full[offs[k]:offs[k] + d] = mono[i].c[a * d:(a + 1) * d]
        mono1.append(op.HalfspaceNormalCone(c_full, mono[i].v))
    coco1 = []
    for j in range(3):
        H_full = np.zeros((5 * d, 5 * d))
        h_full = np.zeros(5 * d)
        for a, k in enumerate(KB[j]):
            h_full[offs[k]:offs[k] + d] = coco[j].h[a * d:(a + 1) * d]
            for b, k2 in enumerate(KB[j]):
                H_full[offs[k]:offs[k] + d, offs[k2]:offs[k2] + d] = \
                    coco[j].H[a * d:(a + 1) * d, b * d:(b + 1) * d]
        coco1.append(op.AffineCocoercive(H_full, h_full, beta=coco[j].beta))
    ops1 = op.OperatorBank(monotone=tuple(mono1), cocoercive=tuple(coco1))
    Z1, W1, K1, Q1 = _designed_params(cs1, beta_bound=(1.0, 1.0, 1.0))
    params1 = {"designed": mp.derive(cs1, Z1, W1, K1, Q1, beta=beta)}

    return ProblemInstance(
        name="illustrative", kind="composite", cs=cs, ops=ops, params=params,
        alpha=2.0, gamma=0.95, seed=seed,
        meta={
            "uncoupled": ProblemInstance(
                name="illustrative_uncoupled", kind="composite", cs=cs1, ops=ops1,
                params=params1, alpha=2.0, gamma=0.95, seed=seed,
            ),
        },
    )


def gen_halfquad(seed: int = 0, n: int = 16, m: int = 15, p: int = 10,
                 scale: float = 1.0, design_tol: float = 1e-9,
                 design_maxit: int = 20000) -> ProblemInstance:
    """Near-parallel halfspace projections plus quadratic cocoercives."""
    rng = np.random.default_rng(seed)
    p_eff = max(2, int(round(p * scale)))
    alpha = 0.25
    c_rows, v = _near_parallel_halfspaces(rng, n, p_eff)
    centre = rng.uniform(0.0, 1.0, size=p_eff)
    Hs, hs = [], []
    for _ in range(m):
        X = rng.uniform(0.0, 1.0, size=(p_eff, p_eff))
        H = X.T @ X
        H /= np.linalg.eigvalsh(H)[-1]
        Hs.append(0.5 * (H + H.T))
        hs.append(centre + rng.uniform(-0.5, 0.5, size=p_eff))
    cs = st.build_structure(
        [list(range(p_eff))] * n, [list(range(p_eff))] * m, [1] * p_eff,
        istar_choice=list(range(m)),
    )
    ops = op.OperatorBank(
        monotone=tuple(op.HalfspaceNormalCone(-c_rows[i], -v[i]) for i in range(n)),
        cocoercive=tuple(op.AffineCocoercive(H, h, beta=1.0) for H, h in zip(Hs, hs)),
    )
    beta = np.ones(m)
    # the data-independent baseline: same spread-minimizing design the
    # coupled example uses (a plain complete-graph Z cannot dominate U here)
    Zu, Wu, Ku, Qu = _designed_params(cs, beta_bound=beta)
    params = {"uniform": mp.derive(cs, Zu, Wu, Ku, Qu, beta=beta)}

    c_conn = 2.0 * (1.0 - np.cos(np.pi / n))
    Zs, Ws, Ks, Qs = [], [], [], []
    for k in range(p_eff):
        d_a = 15.0 * alpha * c_rows[:, k] ** 2
        d_b = alpha * np.array([abs(hs[j][k]) + Hs[j][k, k] for j in range(m)])
        spec = dz.DesignSpec(
            n=n, m=m, beta=tuple(beta), c=c_conn,
            objective=dz.DiagMatch(d_a=d_a, d_b=d_b, weight=0.1),
            skj=tuple(range(m)),
        )
        r = dz.design_solve(spec, tol=design_tol, maxit=design_maxit)
        Zs.append(r.Z); Ws.append(r.W); Ks.append(r.K); Qs.append(r.Q)
    params["designed"] = mp.derive(cs, Zs, Ws, Ks, Qs, beta=beta)
    return ProblemInstance(
        name="halfquad", kind="composite", cs=cs, ops=ops, params=params,
        alpha=alpha, gamma=1.85, seed=seed,
        meta={"c": c_rows, "v": v, "H": Hs, "h": hs, "direction": "ge"},
    )


def gen_block_parallel(seed: int = 0, dim: int = 4, scale: float = 1.0) -> ProblemInstance:
    """Six identity-coupled operators, two cocoercives, block-parallel design."""
    rng = np.random.default_rng(seed)
    d = max(1, int(round(dim * scale)))
    cs = st.build_structure([[0]] * 6, [[0]] * 2, [d], istar_choice=[2, 2])
    mono = []
    for _ in range(6):
        mono.append(op.HalfspaceNormalCone(rng.uniform(-0.5, 0.5, size=d),
                                           rng.uniform(0.0, 10.0)))
    coco = []
    for _ in range(2):
        X = rng.uniform(0.0, 1.0, size=(d, d))
        H = X.T @ X
        top = np.linalg.eigvalsh(H)[-1]
        if top > 0:
            H /= top
        coco.append(op.AffineCocoercive(0.5 * (H + H.T), rng.uniform(-0.5, 0.5, size=d), beta=1.0))
    ops = op.OperatorBank(monotone=tuple(mono), cocoercive=tuple(coco))
    res = dz.feasibility_solve(dz.block_parallel_spec())
    params = {"designed": mp.derive(cs, [res.Z], [res.W], [res.K], [res.Q],
                                    beta=np.ones(2))}
    return ProblemInstance(
        name="block_parallel", kind="composite", cs=cs, ops=ops, params=params,
        alpha=2.0, gamma=0.95, seed=seed,
    )


@dataclass(frozen=True)
class WtaSpec:
    weapons: int = 2
    targets: int = 2
    scenarios: int = 2
    stages: int = 1
    seed: int = 0
    branching: tuple | None = None  # branches per stage; default 2^t capped


def gen_wta(spec: WtaSpec) -> ProblemInstance:
    """Multi-stage stochastic assignment relaxation split over platforms."""
    rng = np.random.default_rng(spec.seed)
    nW, nE, nS, nT = spec.weapons, spec.targets, spec.scenarios, spec.stages
    branching = spec.branching or tuple(min(2 ** t, nS) for t in range(nT))

    branch_of = np.zeros((nS, nT), dtype=int)
    branches = []  # per stage: list of scenario tuples
    for t in range(nT):
        nb = max(1, min(branching[t], nS))
        splits = np.array_split(np.arange(nS), nb)
        branches.append([tuple(int(s) for s in grp) for grp in splits if len(grp)])
        for b, grp in enumerate(branches[t]):
            for s in grp:
                branch_of[s, t] = b

    w = rng.uniform(0.2, 1.0, size=nS)
    w /= w.sum()
    V = rng.uniform(0.2, 0.9, size=nE)
    p_dam = rng.uniform(0.1, 0.9, size=(nW, nE, nS, nT))
    q = -np.log(1.0 - p_dam)

    pair_w, pair_V, pair_q = [], [], []
    coco_keys = []
    for j in range(nE):
        for s in range(nS):
            coco_keys.append((j, s))
            pair_w.append(w[s])
            pair_V.append(V[j])
            pair_q.append(q[:, j, s, :].ravel())
    tau = op.wta_tau(pair_w, pair_V, pair_q)

    blocks = []
    block_index = {}
    for i in range(nW):
        for j in range(nE):
            for t in range(nT):
                for b in range(len(branches[t])):
                    block_index[(i, j, t, b)] = len(blocks)
                    blocks.append((i, j, t, b))
    p_blocks = len(blocks)

    mono_keys = [("N0",)] + [("N1", i, s) for i in range(nW) for s in range(nS)]
    KA = [list(range(p_blocks))]
    for i in range(nW):
        for s in range(nS):
            ks = sorted(block_index[(i, j, t, branch_of[s, t])]
                        for j in range(nE) for t in range(nT))
            KA.append(ks)
    KB = []
    for j, s in coco_keys:
        ks = sorted(block_index[(i, j, t, branch_of[s, t])]
                    for i in range(nW) for t in range(nT))
        KB.append(ks)
    cs = st.build_structure(KA, KB, [1] * p_blocks, istar_choice=[0] * len(KB))

    mono = [op.NonnegativeCone(p_blocks)]
    for i in range(nW):
        for s in range(nS):
            dim = nE * nT
            mono.append(op.HalfspaceNormalCone(np.ones(dim), 1.0))
    coco = []
    beta_linear = []
    for (j, s), kb in zip(coco_keys, KB):
        qvec = np.array([
            q[blocks[k][0], j, s, blocks[k][2]] for k in kb
        ])
        a = tau * w[s] * V[j]
        coco.append(op.WtaGradient(a, qvec))
        beta_linear.append(1.0 / (a * np.linalg.norm(qvec)))
    ops = op.OperatorBank(monotone=tuple(mono), cocoercive=tuple(coco))

    Zs, Ws, Ks, Qs = [], [], [], []
    for k, (i, j, t, b) in enumerate(blocks):
        fam = mp.wta_family(len(branches[t][b]))
        Zs.append(fam.Z); Ws.append(fam.W); Ks.append(fam.K); Qs.append(fam.Q)
    params = {"wta": mp.derive(cs, Zs, Ws, Ks, Qs, beta=np.array(beta_linear))}

    return ProblemInstance(
        name="wta", kind="wta", cs=cs, ops=ops, params=params,
        alpha=2.0, gamma=0.95, seed=spec.seed,
        meta={
            "w": w, "V": V, "p": p_dam, "q": q, "tau": tau,
            "branch_of": branch_of, "branches": branches,
            "blocks": blocks, "block_index": block_index,
            "coco_keys": coco_keys, "mono_keys": mono_keys,
            "weapons": nW, "targets": nE, "scenarios": nS, "stages": nT,
            "beta_linear": np.array(beta_linear),
            "beta_conservative": np.array([c.beta for c in coco]),
        },
    )


# ---------------------------------------------------------------------------
# reference oracles


def _dykstra_halfspaces(y0, constraints, tol=1e-12, maxit=20000, nonneg=False):
    """Dykstra projection of y0 onto {a^T y <= b} for all rows (optionally
    intersected with the nonnegative orthant)."""
    y = y0.copy()
    sets = list(range(len(constraints))) + ([-1] if nonneg else [])
    incs = {s: np.zeros_like(y0) for s in sets}
    for _ in range(maxit):
        worst = 0.0
        for s in sets:
            z = y + incs[s]
            if s == -1:
                proj = np.maximum(z, 0.0)
            else:
                a, b = constraints[s]
                gap = a @ z - b
                proj = z - (gap / (a @ a)) * a if gap > 0 else z
            incs[s] = z - proj
            y = proj
        for s in sets:
            if s == -1:
                worst = max(worst, float(np.max(np.maximum(-y, 0.0), initial=0.0)))
            else:
                a, b = constraints[s]
                worst = max(worst, max(0.0, float(a @ y - b)))
        if worst <= tol:
            break
    return y


def _constraints_in_gy(inst: ProblemInstance):
    """Halfspace rows lifted to the base space: a^T y <= b per projection op."""
    cs = inst.cs
    rows = []
    for i, o in enumerate(inst.ops.monotone):
        if not isinstance(o, op.HalfspaceNormalCone):
            continue
        a = np.zeros(cs.gy_dim)
        off = 0
        for k in cs.KA[i]:
            w = cs.dims[k]
            a[cs.gy_slices[k]] += o.c[off:off + w]
            off += w
        rows.append((a, float(o.v)))
    return rows


def reference_solution(inst: ProblemInstance, tol: float = 1e-10) -> np.ndarray:
    """Independent first-order oracle for the instance's solution.

    quadratic: dense linear solve.  feasibility: Dykstra projection of the
    origin onto the constraint set.  composite: projected gradient on the
    smooth sum, projections by Dykstra.  wta: projected gradient on the
    expected-survival objective over the budget polytope.
    """
    cs = inst.cs
    if inst.kind == "quadratic":
        Hsum = np.zeros((cs.gy_dim, cs.gy_dim))
        hsum = np.zeros(cs.gy_dim)
        for o in inst.ops.monotone:
            Hsum += o.H
            hsum += o.h
        return np.linalg.solve(Hsum, hsum)

    if inst.kind == "feasibility":
        rows = _constraints_in_gy(inst)
        return _dykstra_halfspaces(np.zeros(cs.gy_dim), rows, tol=tol)

    if inst.kind == "composite":
        rows = _constraints_in_gy(inst)
        Hsum = np.zeros((cs.gy_dim, cs.gy_dim))
        hsum = np.zeros(cs.gy_dim)
        for j, o in enumerate(inst.ops.cocoercive):
            emb = np.zeros((o.dim, cs.gy_dim))
            off = 0
            for k in cs.KB[j]:
                w = cs.dims[k]
                emb[off:off + w, cs.gy_slices[k]] = np.eye(w)
                off += w
            Hsum += emb.T @ o.H @ emb
            hsum += emb.T @ o.h
        L = max(np.linalg.eigvalsh(Hsum)[-1], 1e-12)
        y = np.zeros(cs.gy_dim)
        step = 1.0 / L
        for _ in range(200000):
            grad = Hsum @ y - hsum
            y_new = _dykstra_halfspaces(y - step * grad, rows, tol=tol * 0.01)
            if np.linalg.norm(y_new - y) <= tol * max(1.0, np.linalg.norm(y)):
                return y_new
            y = y_new
        return y

    if inst.kind == "wta":
        meta = inst.meta
        q, w, V = meta["q"], meta["w"], meta["V"]
        branch_of, block_index = meta["branch_of"], meta["block_index"]
        nW, nE, nS, nT = q.shape
        rows = []
        for i in range(nW):
            for s in range(nS):
                a = np.zeros(cs.gy_dim)
                for j in range(nE):
                    for t in range(nT):
                        a[block_index[(i, j, t, branch_of[s, t])]] = 1.0
                rows.append((a, 1.0))

        def grad(y):
            g = np.zeros(cs.gy_dim)
            for s in range(nS):
                for j in range(nE):
                    dot = sum(
                        q[i, j, s, t] * y[block_index[(i, j, t, branch_of[s, t])]]
                        for i in range(nW) for t in range(nT)
                    )
                    coef = w[s] * V[j] * np.exp(-dot)
                    for i in range(nW):
                        for t in range(nT):
                            g[block_index[(i, j, t, branch_of[s, t])]] -= coef * q[i, j, s, t]
            return g

        L = sum(w[s] * V[j] * np.linalg.norm(q[:, j, s, :]) ** 2
                for s in range(nS) for j in range(nE))
        y = np.full(cs.gy_dim, 0.1)
        step = 1.0 / L
        for _ in range(200000):
            y_new = _dykstra_halfspaces(y - step * grad(y), rows, tol=tol * 0.01, nonneg=True)
            if np.linalg.norm(y_new - y) <= tol * max(1.0, np.linalg.norm(y)):
                return y_new
            y = y_new
        return y

    raise ValueError(f"no oracle for kind {inst.kind!r}")


# ---------------------------------------------------------------------------
# experiment runner


@dataclass
class ExperimentSpec:
    name: str
    seed: int = 0
    trials: int = 1
    scale: float = 1.0
    max_iterations: int = 500
    alpha: float | None = None
    gamma: float | None = None

    def __post_init__(self):
        if self.name not in EXPERIMENT_NAMES:
            raise ValueError(f"unknown experiment {self.name!r}; choose from {EXPERIMENT_NAMES}")


def _generate(spec: ExperimentSpec, trial: int) -> ProblemInstance:
    seed = spec.seed + trial
    if spec.name == "toy2d":
        return gen_toy2d()
    if spec.name == "illustrative":
        return gen_illustrative(seed=seed, scale=spec.scale)
    if spec.name == "halfspace_scaled":
        return gen_halfspace_scaled(seed=seed, scale=spec.scale)
    if spec.name == "quadratic_scaled":
        return gen_quadratic_scaled(seed=seed, scale=spec.scale)
    if spec.name == "halfquad":
        return gen_halfquad(seed=seed, scale=spec.scale)
    if spec.name == "block_parallel":
        return gen_block_parallel(seed=seed, scale=spec.scale)
    if spec.name == "wta":
        return gen_wta(WtaSpec(seed=seed))
    raise ValueError(spec.name)


def _variants(inst: ProblemInstance):
    """(label, instance, strategy) runs compared within one experiment."""
    if inst.name == "illustrative":
        return [
            ("coupled", inst, "designed"),
            ("uncoupled", inst.meta["uncoupled"], "designed"),
        ]
    order = {"uniform": 0, "sinkhorn": 1, "designed": 1, "scaled": 1, "wta": 0}
    labels = sorted(inst.params, key=lambda s: (order.get(s, 9), s))
    return [(label, inst, label) for label in labels]


def run_experiment(spec: ExperimentSpec, out_dir) -> dict:
    """Run all trials and variants; write trace CSVs and a manifest JSON.

    Runs use a fixed iteration budget (tol = 0) so curves across trials
    align; the manifest carries per-variant mean curves, padding converged
    runs with their final value.
    """
    import os

    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "schema_version": files.SCHEMA_VERSION,
        "name": spec.name,
        "seed": spec.seed,
        "trials": spec.trials,
        "scale": spec.scale,
        "max_iterations": spec.max_iterations,
        "instances": [],
        "variants": [],
        "traces": {},
        "configs": {},
        "mean": {},
    }
    collected: dict[str, list] = {}
    for trial in range(spec.trials):
        inst = _generate(spec, trial)
        manifest["instances"].append(instance_hash(inst))
        try:
            reference = reference_solution(inst, tol=1e-10)
        except ValueError:
            reference = None
        for label, variant_inst, strategy in _variants(inst):
            metrics = make_metrics(variant_inst, reference)
            alpha = spec.alpha if spec.alpha is not None else variant_inst.alpha
            gamma = spec.gamma if spec.gamma is not None else variant_inst.gamma
            config = sv.SolverConfig(
                alpha=alpha, gamma=gamma,
                max_iterations=spec.max_iterations, tol=0.0,
            )
            result = sv.run_cabra(
                variant_inst.cs, variant_inst.params[strategy], variant_inst.ops,
                config, mode="v", metrics=metrics,
            )
            fname = f"trace_{label}_t{trial}.csv"
            files.write_trace_csv(result.trace, os.path.join(out_dir, fname))
            manifest["traces"].setdefault(label, []).append(fname)
            manifest["configs"][label] = {"alpha": alpha, "gamma": gamma}
            collected.setdefault(label, []).append(result.trace)
            if label not in manifest["variants"]:
                manifest["variants"].append(label)
        if trial == 0:
            files.save_problem(
                os.path.join(out_dir, "problem_t0.json"),
                inst.cs, inst.ops,
                defaults={"alpha": inst.alpha, "gamma": inst.gamma},
                params=inst.params[_variants(inst)[0][2]],
            )

    for label, traces in collected.items():
        manifest["mean"][label] = mean_curves(traces)

    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh)
        fh.write("\n")
    return manifest


def mean_curves(traces) -> dict:
    """Arithmetic mean of each numeric trace column, padding with last value."""
    out = {}
    length = max(len(t.iters) for t in traces)
    out["iter"] = list(range(1, length + 1))
    for col in ("fp_residual", "consensus_residual", "inclusion_residual",
                "objective_gap", "violation"):
        series = []
        for t in traces:
            vals = getattr(t, col)
            if not vals or vals[0] is None:
                series = None
                break
            padded = list(vals) + [vals[-1]] * (length - len(vals))
            series.append(padded)
        if series:
            out[col] = [float(np.mean(col_vals)) for col_vals in zip(*series)]
    return out
