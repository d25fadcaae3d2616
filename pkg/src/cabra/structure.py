"""Coupling combinatorics for block-structured monotone inclusions.

A problem couples ``p`` subvector blocks (block ``k`` lives in R^{dims[k]})
through ``n`` maximal monotone operators and ``m`` cocoercive operators.
Operator ``A_i`` reads the blocks listed in ``KA[i]``; operator ``B_j`` reads
``KB[j]``.  From these sets the structure derives, per block, the ordered
incidence lists ``I_k``/``J_k``, the position maps s(i,k)/t(j,k), and the
cutoff machinery that makes the forward-substitution sweep well defined.

All indices are 0-based in code.  The JSON interchange format is 1-based.

Spaces and flat layouts
-----------------------
``gy``  the base space, one copy of each block (dimension sum(dims)).
``hx``  operator-grouped lift: for each i, the blocks of KA[i] concatenated.
``hy``  block-grouped lift: for each k, the n_k copies ordered by s.
``bx``  cocoercive-operator-grouped lift over KB[j].
``hz``  reduced lift: n_k - 1 copies of block k.

Vectors in these spaces are stored flat; `CouplingStructure` precomputes the
index arrays that move between them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import BlockUnderCovered, CutoffInfeasible, SchemaError, ShapeMismatch

SPACE_KINDS = ("gy", "hx", "hy", "bx", "by", "hz")


def _slices_from_dims(dims) -> tuple[slice, ...]:
    out = []
    off = 0
    for d in dims:
        out.append(slice(off, off + d))
        off += d
    return tuple(out)


@dataclass(frozen=True)
class CouplingStructure:
    p: int
    dims: tuple[int, ...]
    KA: tuple[tuple[int, ...], ...]
    KB: tuple[tuple[int, ...], ...]
    Ik: tuple[tuple[int, ...], ...]
    Jk: tuple[tuple[int, ...], ...]
    nk: tuple[int, ...]
    mk: tuple[int, ...]
    istar: tuple[int, ...]
    ibar: tuple[int, ...]
    iunder: tuple[int, ...]

    @property
    def n(self) -> int:
        return len(self.KA)

    @property
    def m(self) -> int:
        return len(self.KB)

    # position maps -------------------------------------------------------

    @cached_property
    def s_of(self) -> dict[tuple[int, int], int]:
        """(i, k) -> position of operator i in I_k."""
        return {(i, k): s for k in range(self.p) for s, i in enumerate(self.Ik[k])}

    @cached_property
    def t_of(self) -> dict[tuple[int, int], int]:
        """(j, k) -> position of operator j in J_k."""
        return {(j, k): t for k in range(self.p) for t, j in enumerate(self.Jk[k])}

    @cached_property
    def ind(self) -> dict[tuple[int, int], int]:
        """(i, k) -> global slot of block k within the operator-grouped lift."""
        out = {}
        slot = 0
        for i, ka in enumerate(self.KA):
            for k in ka:
                out[(i, k)] = slot
                slot += 1
        return out

    @cached_property
    def skj(self) -> dict[tuple[int, int], int]:
        """(k, j) -> position in I_k of the last operator <= istar[j]."""
        out = {}
        for j in range(self.m):
            for k in self.KB[j]:
                pos = -1
                for s, i in enumerate(self.Ik[k]):
                    if i <= self.istar[j]:
                        pos = s
                out[(k, j)] = pos
        return out

    # flat layouts ---------------------------------------------------------

    @cached_property
    def gy_slices(self) -> tuple[slice, ...]:
        return _slices_from_dims(self.dims)

    @property
    def gy_dim(self) -> int:
        return sum(self.dims)

    @cached_property
    def hx_block_slices(self) -> dict[tuple[int, int], slice]:
        """(i, k) -> slice of block k inside the flat hx vector."""
        out = {}
        off = 0
        for i, ka in enumerate(self.KA):
            for k in ka:
                out[(i, k)] = slice(off, off + self.dims[k])
                off += self.dims[k]
        return out

    @cached_property
    def hx_op_slices(self) -> tuple[slice, ...]:
        out = []
        off = 0
        for ka in self.KA:
            w = sum(self.dims[k] for k in ka)
            out.append(slice(off, off + w))
            off += w
        return tuple(out)

    @property
    def hx_dim(self) -> int:
        return self.hx_op_slices[-1].stop if self.KA else 0

    @cached_property
    def bx_block_slices(self) -> dict[tuple[int, int], slice]:
        out = {}
        off = 0
        for j, kb in enumerate(self.KB):
            for k in kb:
                out[(j, k)] = slice(off, off + self.dims[k])
                off += self.dims[k]
        return out

    @cached_property
    def bx_op_slices(self) -> tuple[slice, ...]:
        out = []
        off = 0
        for kb in self.KB:
            w = sum(self.dims[k] for k in kb)
            out.append(slice(off, off + w))
            off += w
        return tuple(out)

    @property
    def bx_dim(self) -> int:
        return self.bx_op_slices[-1].stop if self.KB else 0

    @cached_property
    def hy_slices(self) -> dict[tuple[int, int], slice]:
        """(k, s) -> slice of copy s of block k in the block-grouped lift."""
        out = {}
        off = 0
        for k in range(self.p):
            for s in range(self.nk[k]):
                out[(k, s)] = slice(off, off + self.dims[k])
                off += self.dims[k]
        return out

    @property
    def hy_dim(self) -> int:
        return sum(self.nk[k] * self.dims[k] for k in range(self.p))

    @cached_property
    def hz_slices(self) -> dict[tuple[int, int], slice]:
        out = {}
        off = 0
        for k in range(self.p):
            for c in range(self.nk[k] - 1):
                out[(k, c)] = slice(off, off + self.dims[k])
                off += self.dims[k]
        return out

    @property
    def hz_dim(self) -> int:
        return sum((self.nk[k] - 1) * self.dims[k] for k in range(self.p))

    def dim_of(self, kind: str) -> int:
        return {
            "gy": self.gy_dim,
            "hx": self.hx_dim,
            "hy": self.hy_dim,
            "bx": self.bx_dim,
            "hz": self.hz_dim,
        }[kind]

    # index maps between spaces --------------------------------------------

    @cached_property
    def idx_hx_from_gy(self) -> np.ndarray:
        """x_flat = y_flat[idx] realizes the selection lift gy -> hx."""
        idx = np.empty(self.hx_dim, dtype=np.intp)
        for (i, k), sl in self.hx_block_slices.items():
            idx[sl] = np.arange(self.gy_slices[k].start, self.gy_slices[k].stop)
        return idx

    @cached_property
    def idx_bx_from_gy(self) -> np.ndarray:
        idx = np.empty(self.bx_dim, dtype=np.intp)
        for (j, k), sl in self.bx_block_slices.items():
            idx[sl] = np.arange(self.gy_slices[k].start, self.gy_slices[k].stop)
        return idx

    @cached_property
    def idx_hx_from_hy(self) -> np.ndarray:
        """x_flat = yv_flat[idx] realizes the permutation hy -> hx."""
        idx = np.empty(self.hx_dim, dtype=np.intp)
        for (i, k), sl in self.hx_block_slices.items():
            src = self.hy_slices[(k, self.s_of[(i, k)])]
            idx[sl] = np.arange(src.start, src.stop)
        return idx

    @cached_property
    def idx_hy_from_hx(self) -> np.ndarray:
        inv = np.empty(self.hy_dim, dtype=np.intp)
        inv[self.idx_hx_from_hy] = np.arange(self.hx_dim)
        return inv

    @cached_property
    def idx_bx_from_by(self) -> np.ndarray:
        """bx = by[idx]; the by layout groups copies of block k by t."""
        idx = np.empty(self.bx_dim, dtype=np.intp)
        for (j, k), sl in self.bx_block_slices.items():
            src = self.by_slices[(k, self.t_of[(j, k)])]
            idx[sl] = np.arange(src.start, src.stop)
        return idx

    @cached_property
    def by_slices(self) -> dict[tuple[int, int], slice]:
        out = {}
        off = 0
        for k in range(self.p):
            for t in range(self.mk[k]):
                out[(k, t)] = slice(off, off + self.dims[k])
                off += self.dims[k]
        return out

    @cached_property
    def copy_counts_gy(self) -> np.ndarray:
        """Per gy coordinate, the number n_k of hx copies of that coordinate."""
        out = np.empty(self.gy_dim)
        for k in range(self.p):
            out[self.gy_slices[k]] = self.nk[k]
        return out


@dataclass
class LiftedVector:
    """A flat vector tagged with the lifted space it lives in."""

    kind: str
    data: np.ndarray
    cs: CouplingStructure

    def __post_init__(self):
        if self.kind not in SPACE_KINDS:
            raise ValueError(f"unknown space kind {self.kind!r}")
        self.data = np.asarray(self.data, dtype=float)
        expected = self.cs.dim_of(self.kind)
        if self.data.shape != (expected,):
            raise ShapeMismatch(
                f"{self.kind} vector has shape {self.data.shape}, expected ({expected},)"
            )

    @classmethod
    def zeros(cls, cs: CouplingStructure, kind: str) -> "LiftedVector":
        return cls(kind, np.zeros(cs.dim_of(kind)), cs)

    def block(self, *key) -> np.ndarray:
        """View of one block: (i, k) for hx, (j, k) for bx, (k, c) for hz/hy, k for gy."""
        if self.kind == "hx":
            return self.data[self.cs.hx_block_slices[key]]
        if self.kind == "bx":
            return self.data[self.cs.bx_block_slices[key]]
        if self.kind == "hz":
            return self.data[self.cs.hz_slices[key]]
        if self.kind == "hy":
            return self.data[self.cs.hy_slices[key]]
        return self.data[self.cs.gy_slices[key[0]]]

    def copy(self) -> "LiftedVector":
        return LiftedVector(self.kind, self.data.copy(), self.cs)


def build_structure(KA, KB, dims, istar_choice="default-earliest") -> CouplingStructure:
    """Derive the full coupling structure from the operator index sets.

    Parameters
    ----------
    KA, KB : sequences of strictly increasing 0-based block index tuples.
    dims : per-block dimensions.
    istar_choice : "default-earliest" picks the earliest legal cutoff
        istar[j] = ibar[j]; otherwise a sequence of explicit cutoffs.

    Raises
    ------
    BlockUnderCovered : some block is read by fewer than two monotone operators.
    CutoffInfeasible : ibar[j] >= iunder[j], or an explicit cutoff is illegal.
    """
    KA = tuple(tuple(int(k) for k in ka) for ka in KA)
    KB = tuple(tuple(int(k) for k in kb) for kb in KB)
    dims = tuple(int(d) for d in dims)
    p = len(dims)
    if any(d <= 0 for d in dims):
        raise ValueError("block dimensions must be positive")
    for name, groups in (("KA", KA), ("KB", KB)):
        for idx, g in enumerate(groups):
            if any(k < 0 or k >= p for k in g):
                raise ValueError(f"{name}[{idx}] references a block outside 0..{p - 1}")
            if any(a >= b for a, b in zip(g, g[1:])):
                raise ValueError(f"{name}[{idx}] must be strictly increasing")
    if any(len(kb) == 0 for kb in KB):
        raise ValueError("every KB[j] must be nonempty")

    Ik = tuple(tuple(i for i, ka in enumerate(KA) if k in ka) for k in range(p))
    Jk = tuple(tuple(j for j, kb in enumerate(KB) if k in kb) for k in range(p))
    nk = tuple(len(s) for s in Ik)
    mk = tuple(len(s) for s in Jk)
    for k, count in enumerate(nk):
        if count < 2:
            raise BlockUnderCovered(k, count)

    m = len(KB)
    ibar = tuple(max(min(Ik[k]) for k in KB[j]) for j in range(m))
    iunder = tuple(min(max(Ik[k]) for k in KB[j]) for j in range(m))
    for j in range(m):
        if ibar[j] >= iunder[j]:
            raise CutoffInfeasible(j, f"ibar={ibar[j]} >= iunder={iunder[j]}")
    if istar_choice == "default-earliest":
        istar = ibar
    else:
        istar = tuple(int(v) for v in istar_choice)
        if len(istar) != m:
            raise CutoffInfeasible(-1, f"expected {m} cutoff values, got {len(istar)}")
        for j in range(m):
            if not (ibar[j] <= istar[j] < iunder[j]):
                raise CutoffInfeasible(
                    j, f"istar={istar[j]} outside [{ibar[j]}, {iunder[j]})"
                )

    return CouplingStructure(
        p=p, dims=dims, KA=KA, KB=KB, Ik=Ik, Jk=Jk, nk=nk, mk=mk,
        istar=istar, ibar=ibar, iunder=iunder,
    )


# ---------------------------------------------------------------------------
# selection, permutation, consensus


def _as_flat(v, cs, kind):
    if isinstance(v, LiftedVector):
        if v.kind != kind:
            raise ShapeMismatch(f"expected a {kind} vector, got {v.kind}")
        return v.data
    v = np.asarray(v, dtype=float)
    if v.shape != (cs.dim_of(kind),):
        raise ShapeMismatch(f"expected flat {kind} of length {cs.dim_of(kind)}, got {v.shape}")
    return v


def select_A(cs: CouplingStructure, y) -> LiftedVector:
    """Copy each block y_k into every (i, k) slot with k in KA[i]."""
    y = _as_flat(y, cs, "gy")
    return LiftedVector("hx", y[cs.idx_hx_from_gy], cs)


def adjoint_A(cs: CouplingStructure, x) -> np.ndarray:
    """Sum all (i, k) copies back into block k (adjoint of select_A)."""
    x = _as_flat(x, cs, "hx")
    out = np.zeros(cs.gy_dim)
    np.add.at(out, cs.idx_hx_from_gy, x)
    return out


def select_B(cs: CouplingStructure, y) -> LiftedVector:
    y = _as_flat(y, cs, "gy")
    return LiftedVector("bx", y[cs.idx_bx_from_gy], cs)


def adjoint_B(cs: CouplingStructure, xb) -> np.ndarray:
    xb = _as_flat(xb, cs, "bx")
    out = np.zeros(cs.gy_dim)
    np.add.at(out, cs.idx_bx_from_gy, xb)
    return out


def permute_A(cs: CouplingStructure, yv) -> LiftedVector:
    """Regroup a block-grouped (hy) vector by operator (hx)."""
    yv = _as_flat(yv, cs, "hy")
    return LiftedVector("hx", yv[cs.idx_hx_from_hy], cs)


def permute_A_inv(cs: CouplingStructure, x) -> LiftedVector:
    x = _as_flat(x, cs, "hx")
    return LiftedVector("hy", x[cs.idx_hy_from_hx], cs)


def permute_B(cs: CouplingStructure, yb) -> LiftedVector:
    """Regroup a block-grouped (by) vector by cocoercive operator (bx)."""
    yb = np.asarray(yb, dtype=float)
    if yb.shape != (cs.bx_dim,):
        raise ShapeMismatch(f"expected flat by of length {cs.bx_dim}, got {yb.shape}")
    return LiftedVector("bx", yb[cs.idx_bx_from_by], cs)


def permute_B_inv(cs: CouplingStructure, xb) -> np.ndarray:
    xb = _as_flat(xb, cs, "bx")
    out = np.empty(cs.bx_dim)
    out[cs.idx_bx_from_by] = xb
    return out


def mean_estimate(cs: CouplingStructure, x) -> np.ndarray:
    """Per block k, the average of its n_k copies."""
    x = _as_flat(x, cs, "hx")
    return adjoint_A(cs, x) / cs.copy_counts_gy


def project_consensus(cs: CouplingStructure, x) -> tuple[LiftedVector, LiftedVector]:
    """Split x into its consensus part (all copies equal) and the residual.

    The parts are orthogonal and sum to x; the residual's copies of each
    block sum to zero.
    """
    x = _as_flat(x, cs, "hx")
    cons = select_A(cs, mean_estimate(cs, x))
    resid = LiftedVector("hx", x - cons.data, cs)
    return cons, resid


# ---------------------------------------------------------------------------
# JSON interchange (1-based block/operator indices in the file)


def to_json_dict(cs: CouplingStructure) -> dict:
    return {
        "schema_version": 1,
        "p": cs.p,
        "dims": list(cs.dims),
        "KA": [[k + 1 for k in ka] for ka in cs.KA],
        "KB": [[k + 1 for k in kb] for kb in cs.KB],
        "istar": [i + 1 for i in cs.istar],
    }


def from_json_dict(doc: dict) -> CouplingStructure:
    try:
        dims = doc["dims"]
        KA = [[k - 1 for k in ka] for ka in doc["KA"]]
        KB = [[k - 1 for k in kb] for kb in doc["KB"]]
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"structure document missing field: {exc}") from exc
    if "p" in doc and doc["p"] != len(dims):
        raise SchemaError(f"p={doc['p']} does not match len(dims)={len(dims)}")
    istar = doc.get("istar")
    choice = "default-earliest" if istar is None else [i - 1 for i in istar]
    return build_structure(KA, KB, dims, istar_choice=choice)


def save_structure(cs: CouplingStructure, path) -> None:
    with open(path, "w") as fh:
        json.dump(to_json_dict(cs), fh, indent=1)
        fh.write("\n")


def load_structure(path) -> CouplingStructure:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: invalid JSON at line {exc.lineno} col {exc.colno}: {exc.msg}") from exc
    return from_json_dict(doc)
