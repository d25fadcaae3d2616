"""JSON and CSV interchange: parameter bundles, problem files, traces.

Block and operator indices are 1-based in the files (matching the common
notation for these problems); everything is 0-based in memory.  Floats are
written with 17 significant digits so files round-trip exactly.
"""

from __future__ import annotations

import json

import numpy as np

from . import matparams, operators, structure
from .errors import SchemaError

SCHEMA_VERSION = 1


def _mat(a) -> list:
    return [[float(v) for v in row] for row in np.atleast_2d(np.asarray(a, dtype=float))]


def _vec(a) -> list:
    return [float(v) for v in np.asarray(a, dtype=float).ravel()]


# ---------------------------------------------------------------------------
# parameter bundles


def params_to_dict(params: matparams.BlockMatrixSet) -> dict:
    blocks = []
    for k in range(params.p):
        blocks.append({
            "k": k + 1,
            "Z": _mat(params.Z[k]),
            "W": _mat(params.W[k]),
            "K": _mat(params.K[k]) if params.K[k].size else [],
            "Q": _mat(params.Q[k]) if params.Q[k].size else [],
            "beta": _vec(params.beta[k]),
            "skj": [s + 1 for s in params.skj[k]] if params.skj is not None else None,
        })
    return {"schema_version": SCHEMA_VERSION, "blocks": blocks}


def params_from_dict(doc: dict) -> matparams.BlockMatrixSet:
    try:
        blocks = sorted(doc["blocks"], key=lambda b: b["k"])
        Zs = [np.array(b["Z"], dtype=float) for b in blocks]
        Ws = [np.array(b["W"], dtype=float) for b in blocks]
        betas = [np.array(b.get("beta", []), dtype=float) for b in blocks]
        Ks, Qs, skj = [], [], []
        for b, beta in zip(blocks, betas):
            n = len(b["Z"])
            m = beta.size
            Ks.append(np.array(b["K"], dtype=float).reshape(m, n) if m else None)
            Qs.append(np.array(b["Q"], dtype=float).reshape(n, m) if m else None)
            row = b.get("skj")
            skj.append(tuple(s - 1 for s in row) if row is not None else ())
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"bad parameter document: {exc}") from exc
    return matparams.from_blocks(Zs, Ws, Ks, Qs, betas, tuple(skj))


def save_params(params, path) -> None:
    with open(path, "w") as fh:
        json.dump(params_to_dict(params), fh)
        fh.write("\n")


def load_params(path) -> matparams.BlockMatrixSet:
    return params_from_dict(_load_json(path))


# ---------------------------------------------------------------------------
# operator declarations


def operator_to_dict(op) -> dict:
    if isinstance(op, operators.HalfspaceNormalCone):
        return {"kind": "halfspace", "c": _vec(op.c), "v": float(op.v)}
    if isinstance(op, operators.NonnegativeCone):
        return {"kind": "nonnegative", "dim": op.dim}
    if isinstance(op, operators.AffineMonotone):
        return {"kind": "affine", "H": _mat(op.H), "h": _vec(op.h)}
    if isinstance(op, operators.ZeroOperator):
        return {"kind": "zero", "dim": op.dim}
    if isinstance(op, operators.AffineCocoercive):
        return {"kind": "affine", "H": _mat(op.H), "h": _vec(op.h), "beta": float(op.beta)}
    if isinstance(op, operators.WtaGradient):
        return {"kind": "wta_gradient", "a": float(op.a), "q": _vec(op.q)}
    raise SchemaError(f"cannot serialize operator {type(op).__name__}")


def monotone_from_dict(doc: dict):
    kind = doc.get("kind")
    try:
        if kind == "halfspace":
            return operators.HalfspaceNormalCone(np.array(doc["c"], float), float(doc["v"]))
        if kind == "nonnegative":
            return operators.NonnegativeCone(int(doc["dim"]))
        if kind == "affine":
            return operators.AffineMonotone(np.array(doc["H"], float), np.array(doc["h"], float))
        if kind == "zero":
            return operators.ZeroOperator(int(doc["dim"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"bad monotone operator: {exc}") from exc
    raise SchemaError(f"unknown monotone operator kind {kind!r}")


def cocoercive_from_dict(doc: dict):
    kind = doc.get("kind")
    try:
        if kind == "affine":
            return operators.AffineCocoercive(
                np.array(doc["H"], float), np.array(doc["h"], float),
                beta=doc.get("beta"),
            )
        if kind == "wta_gradient":
            return operators.WtaGradient(float(doc["a"]), np.array(doc["q"], float))
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"bad cocoercive operator: {exc}") from exc
    raise SchemaError(f"unknown cocoercive operator kind {kind!r}")


# ---------------------------------------------------------------------------
# problem files


def problem_to_dict(cs, ops, defaults=None, params=None) -> dict:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "structure": structure.to_json_dict(cs),
        "monotone": [operator_to_dict(op) for op in ops.monotone],
        "cocoercive": [operator_to_dict(op) for op in ops.cocoercive],
    }
    if defaults:
        doc["defaults"] = dict(defaults)
    if params is not None:
        doc["params"] = params_to_dict(params)
    return doc


def save_problem(path, cs, ops, defaults=None, params=None) -> None:
    with open(path, "w") as fh:
        json.dump(problem_to_dict(cs, ops, defaults, params), fh)
        fh.write("\n")


def load_problem(path):
    """Returns (cs, ops, defaults, params-or-None)."""
    doc = _load_json(path)
    try:
        cs = structure.from_json_dict(doc["structure"])
        mono = tuple(monotone_from_dict(d) for d in doc["monotone"])
        coco = tuple(cocoercive_from_dict(d) for d in doc.get("cocoercive", []))
    except KeyError as exc:
        raise SchemaError(f"{path}: missing field {exc}") from exc
    bank = operators.OperatorBank(monotone=mono, cocoercive=coco)
    defaults = doc.get("defaults", {})
    params = params_from_dict(doc["params"]) if "params" in doc else None
    _check_shapes(cs, bank)
    return cs, bank, defaults, params


def _check_shapes(cs, bank) -> None:
    if len(bank.monotone) != cs.n:
        raise SchemaError(f"expected {cs.n} monotone operators, got {len(bank.monotone)}")
    if len(bank.cocoercive) != cs.m:
        raise SchemaError(f"expected {cs.m} cocoercive operators, got {len(bank.cocoercive)}")
    for i, op in enumerate(bank.monotone):
        want = cs.hx_op_slices[i].stop - cs.hx_op_slices[i].start
        if op.dim != want:
            raise SchemaError(f"monotone operator {i} has dim {op.dim}, expected {want}")
    for j, op in enumerate(bank.cocoercive):
        want = cs.bx_op_slices[j].stop - cs.bx_op_slices[j].start
        if op.dim != want:
            raise SchemaError(f"cocoercive operator {j} has dim {op.dim}, expected {want}")


def _load_json(path) -> dict:
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(
                f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}"
            ) from exc


# ---------------------------------------------------------------------------
# trace CSV


def _cell(v) -> str:
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.17g}"


def write_trace_csv(trace, path) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(trace.COLUMNS) + "\n")
        for row in trace.rows():
            fh.write(",".join(_cell(v) for v in row) + "\n")


def read_trace_csv(path) -> dict[str, list]:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        cols: dict[str, list] = {name: [] for name in header}
        for line in fh:
            vals = line.rstrip("\n").split(",")
            for name, val in zip(header, vals):
                cols[name].append(float(val) if val else None)
    return cols


def write_message_csv(log, path) -> None:
    with open(path, "w") as fh:
        fh.write("iter,sender,receiver,kind,block,scalars\n")
        for msg in log.entries:
            fh.write(
                f"{msg.iteration},{msg.sender},{msg.receiver},{msg.kind},{msg.block},{msg.scalars}\n"
            )
