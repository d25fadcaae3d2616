import numpy as np
import pytest

from cabra import design_sdp as dz
from cabra import matparams as mp
from cabra import operators as op
from cabra import structure as st


@pytest.fixture
def illustrative_cs():
    """The five-block coupled example structure (0-based index sets)."""
    KA = [[2, 3, 4], [1, 2], [0, 1, 4], [0, 3, 4]]
    KB = [[3, 4], [2, 4], [0, 3, 4]]
    return st.build_structure(KA, KB, [1] * 5, istar_choice=[2, 0, 2])


def illustrative_structure(dims=1):
    KA = [[2, 3, 4], [1, 2], [0, 1, 4], [0, 3, 4]]
    KB = [[3, 4], [2, 4], [0, 3, 4]]
    return st.build_structure(KA, KB, [dims] * 5, istar_choice=[2, 0, 2])


def random_structure(rng, p=4, n=5, m=2, max_dim=3):
    """Random admissible coupling structure (every block in >= 2 KA sets)."""
    while True:
        KA = []
        for _ in range(n):
            size = rng.integers(1, p + 1)
            KA.append(sorted(rng.choice(p, size=size, replace=False).tolist()))
        counts = [sum(k in ka for ka in KA) for k in range(p)]
        if any(c < 2 for c in counts):
            continue
        KB = []
        ok = True
        for _ in range(m):
            size = rng.integers(1, p + 1)
            kb = sorted(rng.choice(p, size=size, replace=False).tolist())
            Ik = lambda k: [i for i, ka in enumerate(KA) if k in ka]
            ibar = max(min(Ik(k)) for k in kb)
            iunder = min(max(Ik(k)) for k in kb)
            if ibar >= iunder:
                ok = False
                break
            KB.append(kb)
        if not ok:
            continue
        dims = rng.integers(1, max_dim + 1, size=p).tolist()
        return st.build_structure(KA, KB, dims)


def valid_params_for(cs, beta=None, tol=1e-9):
    """Parameters passing the full assumption set, via the projection solver."""
    beta = np.ones(cs.m) if beta is None else np.asarray(beta, float)
    Zs, Ws, Ks, Qs = [], [], [], []
    for k in range(cs.p):
        spec = dz.DesignSpec(
            n=cs.nk[k], m=cs.mk[k],
            beta=tuple(beta[j] for j in cs.Jk[k]),
            c=1.0,
            skj=tuple(cs.skj[(k, j)] for j in cs.Jk[k]),
        )
        r = dz.feasibility_solve(spec, tol=tol)
        Zs.append(r.Z)
        Ws.append(r.W)
        Ks.append(r.K if cs.mk[k] else None)
        Qs.append(r.Q if cs.mk[k] else None)
    return mp.derive(cs, Zs, Ws, Ks, Qs, beta=beta)


def random_operator_bank(rng, cs, monotone_kinds=("halfspace", "affine")):
    """Random halfspace/affine monotone blocks and affine cocoercives."""
    mono = []
    for i in range(cs.n):
        dim = cs.hx_op_slices[i].stop - cs.hx_op_slices[i].start
        kind = monotone_kinds[rng.integers(len(monotone_kinds))]
        if kind == "halfspace":
            mono.append(op.HalfspaceNormalCone(rng.normal(size=dim), float(rng.uniform(-1, 1))))
        else:
            X = rng.normal(size=(dim, dim))
            H = X.T @ X / dim
            mono.append(op.AffineMonotone(H, rng.normal(size=dim)))
    coco = []
    for j in range(cs.m):
        dim = cs.bx_op_slices[j].stop - cs.bx_op_slices[j].start
        X = rng.normal(size=(dim, dim))
        H = X.T @ X
        H /= np.linalg.eigvalsh(H)[-1]
        coco.append(op.AffineCocoercive(0.5 * (H + H.T), rng.normal(size=dim), beta=1.0))
    return op.OperatorBank(monotone=tuple(mono), cocoercive=tuple(coco))


def dense_lifted(cs, params, which):
    """Dense oracle for the lifted operators, built from the permutation maps
    and explicit Kronecker products (independent of the sparse assembly)."""
    blocks = []
    for k in range(cs.p):
        mat = {
            "Z_A": params.Z, "W_A": params.W, "U_A": params.U,
        }[which][k]
        blocks.append(np.kron(mat, np.eye(cs.dims[k])))
    hy_dense = np.zeros((cs.hy_dim, cs.hy_dim))
    off = 0
    for b in blocks:
        w = b.shape[0]
        hy_dense[off:off + w, off:off + w] = b
        off += w
    P = np.zeros((cs.hx_dim, cs.hy_dim))
    P[np.arange(cs.hx_dim), cs.idx_hx_from_hy] = 1.0
    return P @ hy_dense @ P.T
