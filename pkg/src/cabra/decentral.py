"""Message-passing simulation of the decentralized expanded iteration.

Every monotone operator and every cocoercive operator is a node that owns
only its slice of the state.  Within one iteration a monotone node i

  1. receives (x_d)_k from earlier nodes d on blocks where the lower factor
     or W couples them, and cached outputs b_j from cocoercive nodes whose
     cutoff lies before i,
  2. runs its resolvent and sends its block values to later monotone nodes,
     to the cocoercive nodes it feeds, and back to earlier nodes that need
     them for their W update,
  3. receives the late W-coupled blocks from later nodes and updates its
     local v slice.

A cocoercive node j fires once the nodes up to its cutoff have sent their
blocks.  The scheduler is a deterministic event loop: it repeatedly advances
every node whose required messages have arrived (in a configurable ready
order, which cannot change any value because each step is a pure function of
delivered messages).  A node that can never fire raises `Deadlock`.

The simulation reproduces the centralized expanded iteration exactly up to
floating-point reduction order; `simulate` asserts nothing itself but
returns per-iteration states so tests can compare against the solver.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import structure as st
from .errors import Deadlock
from .matparams import lifted_maps
from .solver import SolverConfig, SolveTrace, inclusion_residual

X_SHARE = "x-share"
B_SHARE = "b-share"
B_AGGREGATE = "b-aggregate"


@dataclass(frozen=True)
class Message:
    iteration: int
    sender: str
    receiver: str
    kind: str
    block: int
    scalars: int


@dataclass
class MessageLog:
    entries: list = field(default_factory=list)

    def add(self, iteration, sender, receiver, kind, block, scalars):
        self.entries.append(Message(iteration, sender, receiver, kind, block, scalars))

    def per_iteration(self) -> dict[int, list[Message]]:
        out: dict[int, list[Message]] = {}
        for msg in self.entries:
            out.setdefault(msg.iteration, []).append(msg)
        return out


@dataclass
class MessageSummary:
    iterations: int
    messages_per_iteration: int
    scalars_per_iteration: int
    per_edge: dict

    @property
    def total_messages(self) -> int:
        return self.iterations * self.messages_per_iteration


def count_messages(log: MessageLog) -> MessageSummary:
    """Summarize a log; the per-iteration multiset is pattern-determined."""
    by_iter = log.per_iteration()
    if not by_iter:
        return MessageSummary(0, 0, 0, {})
    counts = {it: len(msgs) for it, msgs in by_iter.items()}
    scalars = {it: sum(m.scalars for m in msgs) for it, msgs in by_iter.items()}
    first = min(by_iter)
    per_edge: dict = {}
    for msg in log.entries:
        key = (msg.sender, msg.receiver)
        per_edge[key] = per_edge.get(key, 0) + msg.scalars
    if len(set(counts.values())) != 1 or len(set(scalars.values())) != 1:
        raise AssertionError("message schedule varied across iterations")
    return MessageSummary(
        iterations=len(by_iter),
        messages_per_iteration=counts[first],
        scalars_per_iteration=scalars[first],
        per_edge=per_edge,
    )


def _schedule(cs, params):
    """Static per-iteration message lists derived from the sparsity patterns."""
    early, late, to_coco, from_coco = [], [], [], []
    for k in range(cs.p):
        L, W = params.L[k], params.W[k]
        K, Q = params.K[k], params.Q[k]
        ops_k = cs.Ik[k]
        for sr, i in enumerate(ops_k):
            for sc, d in enumerate(ops_k):
                if d >= i:
                    continue
                if L[sr, sc] != 0.0 or W[sr, sc] != 0.0:
                    early.append((d, i, k))
                if W[sc, sr] != 0.0:
                    late.append((i, d, k))
        for t, j in enumerate(cs.Jk[k]):
            for s, i in enumerate(ops_k):
                if K[t, s] != 0.0:
                    to_coco.append((i, j, k))
            for s, i in enumerate(ops_k):
                if Q[s, t] != 0.0:
                    from_coco.append((j, i, k))
    return early, late, to_coco, from_coco


@dataclass
class SimResult:
    y: np.ndarray
    x: np.ndarray
    iterations: int
    converged: bool
    converged_iteration: int | None
    trace: SolveTrace
    x_history: list


def simulate(cs, params, ops, config: SolverConfig, iterations: int | None = None,
             ready_order: str = "ascending"):
    """Run the node simulation; returns (SimResult, MessageLog).

    ``iterations`` forces a fixed number of sweeps (otherwise the solver's
    stopping rule applies).  ``ready_order`` picks which ready nodes fire
    first and must not affect any computed value.
    """
    maps = lifted_maps(cs, params)
    early, late, to_coco, from_coco = _schedule(cs, params)

    need_early: dict[int, set] = {i: set() for i in range(cs.n)}
    for d, i, k in early:
        need_early[i].add((d, k))
    need_b: dict[int, set] = {i: set() for i in range(cs.n)}
    for j, i, k in from_coco:
        need_b[i].add((j, k))
    need_k: dict[int, set] = {j: set() for j in range(cs.m)}
    for i, j, k in to_coco:
        need_k[j].add((i, k))
    need_late: dict[int, set] = {i: set() for i in range(cs.n)}
    for i_sender, d, k in late:
        need_late[d].add((i_sender, k))

    sends_x = {i: [(ii, kk) for d, ii, kk in early if d == i] for i in range(cs.n)}
    sends_late = {i: [(dd, kk) for ii, dd, kk in late if ii == i] for i in range(cs.n)}
    sends_k = {i: [(jj, kk) for ii, jj, kk in to_coco if ii == i] for i in range(cs.n)}
    sends_b = {j: [(ii, kk) for jj, ii, kk in from_coco if jj == j] for j in range(cs.m)}

    # local state: v and x per (operator, block)
    v = {(i, k): np.zeros(cs.dims[k]) for i in range(cs.n) for k in cs.KA[i]}
    log = MessageLog()
    trace = SolveTrace()
    x_history = []
    target = iterations if iterations is not None else config.max_iterations
    converged_at = None

    if ready_order == "descending":
        order_key = lambda lst: sorted(lst, reverse=True)
    else:
        order_key = sorted

    nu = 0
    for nu in range(1, target + 1):
        inbox_x = {}   # (receiver, sender, k) -> value
        inbox_b = {}   # (receiver, j, k) -> value
        x_done: dict[int, dict[int, np.ndarray]] = {}
        w_done: dict[int, np.ndarray] = {}
        b_done: dict[int, dict[int, np.ndarray]] = {}
        v_updated: set = set()

        def mono_ready(i):
            if i in x_done:
                return False
            for d, k in need_early[i]:
                if (i, d, k) not in inbox_x:
                    return False
            for j, k in need_b[i]:
                if (i, j, k) not in inbox_b:
                    return False
            return True

        def coco_ready(j):
            if j in b_done:
                return False
            return all((j, i, k) in inbox_x for i, k in need_k[j])

        def fire_mono(i):
            blocks = cs.KA[i]
            arg = np.empty(sum(cs.dims[k] for k in blocks))
            d_diag = np.empty_like(arg)
            off = 0
            for k in blocks:
                s_i = cs.s_of[(i, k)]
                val = v[(i, k)].copy()
                Lrow = params.L[k][s_i]
                for s_d, d in enumerate(cs.Ik[k]):
                    if d != i and Lrow[s_d] != 0.0:
                        if (i, d, k) not in inbox_x:
                            raise Deadlock(f"node {i} missing x from {d} on block {k}")
                        val += 2.0 * Lrow[s_d] * inbox_x[(i, d, k)]
                Qrow = params.Q[k][s_i]
                for t, j in enumerate(cs.Jk[k]):
                    if Qrow[t] != 0.0:
                        if (i, j, k) not in inbox_b:
                            raise Deadlock(f"node {i} missing b from {j} on block {k}")
                        val -= config.alpha * Qrow[t] * inbox_b[(i, j, k)]
                w = cs.dims[k]
                arg[off:off + w] = val / params.D[k][s_i]
                d_diag[off:off + w] = params.D[k][s_i]
                off += w
            xi, wi = ops.monotone[i].resolve(arg, config.alpha, d_diag)
            w_done[i] = wi
            pieces = {}
            off = 0
            for k in blocks:
                pieces[k] = xi[off:off + cs.dims[k]]
                off += cs.dims[k]
            x_done[i] = pieces
            for receiver, k in sends_x[i]:
                inbox_x[(receiver, i, k)] = pieces[k]
                log.add(nu, f"A{i}", f"A{receiver}", X_SHARE, k, cs.dims[k])
            for j, k in sends_k[i]:
                inbox_x[(j, i, k)] = pieces[k]
                log.add(nu, f"A{i}", f"B{j}", X_SHARE, k, cs.dims[k])
            for receiver, k in sends_late[i]:
                inbox_x[(receiver, i, k)] = pieces[k]
                log.add(nu, f"A{i}", f"A{receiver}", X_SHARE, k, cs.dims[k])

        def fire_coco(j):
            blocks = cs.KB[j]
            xb = np.empty(sum(cs.dims[k] for k in blocks))
            off = 0
            for k in blocks:
                t = cs.t_of[(j, k)]
                Krow = params.K[k][t]
                val = np.zeros(cs.dims[k])
                for s, i in enumerate(cs.Ik[k]):
                    if Krow[s] != 0.0:
                        if (j, i, k) not in inbox_x:
                            raise Deadlock(f"cocoercive {j} missing x from {i} on block {k}")
                        val += Krow[s] * inbox_x[(j, i, k)]
                xb[off:off + cs.dims[k]] = val
                off += cs.dims[k]
            bj = ops.cocoercive[j].forward(xb)
            pieces = {}
            off = 0
            for k in blocks:
                pieces[k] = bj[off:off + cs.dims[k]]
                off += cs.dims[k]
            b_done[j] = pieces
            for receiver, k in sends_b[j]:
                inbox_b[(receiver, j, k)] = pieces[k]
                log.add(nu, f"B{j}", f"A{receiver}", B_SHARE, k, cs.dims[k])

        def update_ready(i):
            if i in v_updated or i not in x_done:
                return False
            return all((i, s, k) in inbox_x for s, k in need_late[i] | need_early[i])

        def fire_update(i):
            g = config.gamma(nu)
            for k in cs.KA[i]:
                s_i = cs.s_of[(i, k)]
                Wrow = params.W[k][s_i]
                acc = np.zeros(cs.dims[k])
                for s_d, d in enumerate(cs.Ik[k]):
                    if Wrow[s_d] == 0.0:
                        continue
                    if d == i:
                        acc += Wrow[s_d] * x_done[i][k]
                    else:
                        acc += Wrow[s_d] * inbox_x[(i, d, k)]
                v[(i, k)] -= g * acc
            v_updated.add(i)

        progress = True
        while progress and (len(v_updated) < cs.n or len(b_done) < cs.m):
            progress = False
            for j in order_key([j for j in range(cs.m) if coco_ready(j)]):
                fire_coco(j)
                progress = True
            for i in order_key([i for i in range(cs.n) if mono_ready(i)]):
                fire_mono(i)
                progress = True
            for i in order_key([i for i in range(cs.n) if update_ready(i)]):
                fire_update(i)
                progress = True
        if len(v_updated) < cs.n or len(b_done) < cs.m:
            stuck = [f"A{i}" for i in range(cs.n) if i not in x_done]
            stuck += [f"B{j}" for j in range(cs.m) if j not in b_done]
            raise Deadlock(f"no progress; waiting nodes: {', '.join(stuck)}")

        x = np.zeros(cs.hx_dim)
        w = np.zeros(cs.hx_dim)
        for i in range(cs.n):
            w[cs.hx_op_slices[i]] = w_done[i]
            for k in cs.KA[i]:
                x[cs.hx_block_slices[(i, k)]] = x_done[i][k]
        u = np.zeros(cs.bx_dim)
        for j in range(cs.m):
            for k in cs.KB[j]:
                u[cs.bx_block_slices[(j, k)]] = b_done[j][k]
        x_history.append(x.copy())

        fp = float(np.linalg.norm(maps.M_A @ x))
        incl = inclusion_residual(cs, w, u)
        trace.iters.append(nu)
        trace.fp_residual.append(fp)
        cons = float(np.linalg.norm(st.project_consensus(cs, x)[1].data))
        trace.consensus_residual.append(cons)
        trace.inclusion_residual.append(incl)
        trace.objective_gap.append(None)
        trace.violation.append(None)
        trace.elapsed_s.append(0.0)

        if iterations is None and fp <= config.tol and incl <= 10.0 * config.tol:
            converged_at = nu
            break

    return SimResult(
        y=st.mean_estimate(cs, x),
        x=x,
        iterations=nu,
        converged=converged_at is not None,
        converged_iteration=converged_at,
        trace=trace,
        x_history=x_history,
    ), log


def simulate_wta(inst, config: SolverConfig, iterations: int | None = None):
    """Platform-level simulation of the stochastic assignment splitting.

    Each weapon platform owns its slice of the separable nonnegativity
    operator, its own budget projections, and a replica of every smooth
    term.  The only inter-platform traffic per iteration is one broadcast
    per platform carrying the per-(target, scenario) partial exposure sums:
    targets x scenarios scalars.  Returns (SimResult, MessageLog) with the
    log at platform granularity.
    """
    cs, params, meta = inst.cs, inst.params["wta"], inst.meta
    ops = inst.ops
    q, w_prob, V, tau = meta["q"], meta["w"], meta["V"], meta["tau"]
    blocks, block_index = meta["blocks"], meta["block_index"]
    branch_of = meta["branch_of"]
    branches = meta["branches"]
    nW, nE, nS, nT = q.shape
    alpha = config.alpha

    def n1_op(i, s):
        return 1 + i * nS + s

    # local v state: (operator, block) -> scalar; all owned by platform i(block)
    v = {}
    for opi in range(cs.n):
        for k in cs.KA[opi]:
            v[(opi, k)] = 0.0

    log = MessageLog()
    trace = SolveTrace()
    x_history = []
    target = iterations if iterations is not None else config.max_iterations
    converged_at = None
    a_js = {(j, s): tau * w_prob[s] * V[j] for j in range(nE) for s in range(nS)}

    nu = 0
    for nu in range(1, target + 1):
        # phase 1: separable nonnegativity resolvent, local per platform
        x0 = {}
        w0 = {}
        for k, (i, j, t, b) in enumerate(blocks):
            d0 = params.D[k][0]
            arg = v[(0, k)] / d0
            xk = max(arg, 0.0)
            x0[k] = xk
            w0[k] = d0 * (arg - xk) / alpha

        # phase 2: one broadcast per platform of its partial exposure sums
        partials = np.zeros((nW, nE, nS))
        for i in range(nW):
            for j in range(nE):
                for s in range(nS):
                    partials[i, j, s] = sum(
                        q[i, j, s, t] * x0[block_index[(i, j, t, branch_of[s, t])]]
                        for t in range(nT)
                    )
            log.add(nu, f"P{i}", "*", B_AGGREGATE, -1, nE * nS)
        dots = partials.sum(axis=0)  # replicated on every platform

        # phase 3: replicate smooth-term outputs, run budget resolvents locally
        u_comp = {}
        for j in range(nE):
            for s in range(nS):
                e = min(-dots[j, s], 700.0)
                coef = -a_js[(j, s)] * np.exp(e)
                for i in range(nW):
                    for t in range(nT):
                        k = block_index[(i, j, t, branch_of[s, t])]
                        u_comp[(j, s, k)] = coef * q[i, j, s, t]

        x1 = {}
        w1 = {}
        for i in range(nW):
            for s in range(nS):
                opi = n1_op(i, s)
                ks = cs.KA[opi]
                arg = np.empty(len(ks))
                dvec = np.empty(len(ks))
                for a, k in enumerate(ks):
                    s_pos = cs.s_of[(opi, k)]
                    drive = v[(opi, k)] + 2.0 * params.L[k][s_pos, 0] * x0[k]
                    acc = 0.0
                    for t_pos, j2 in enumerate(cs.Jk[k]):
                        jj, ss = meta["coco_keys"][j2]
                        acc += params.Q[k][s_pos, t_pos] * u_comp[(jj, ss, k)]
                    drive -= alpha * acc
                    dvec[a] = params.D[k][s_pos]
                    arg[a] = drive / dvec[a]
                xi, wi = ops.monotone[opi].resolve(arg, alpha, dvec)
                for a, k in enumerate(ks):
                    x1[(opi, k)] = xi[a]
                    w1[(opi, k)] = wi[a]

        # phase 4: local v updates (all copies of a block live on one platform)
        for k, (i, j, t, b) in enumerate(blocks):
            copies = [x0[k]] + [x1[(iop, k)] for iop in cs.Ik[k][1:]]
            Wk = params.W[k]
            for s_pos, iop in enumerate(cs.Ik[k]):
                acc = float(Wk[s_pos] @ np.asarray(copies))
                v[(iop, k)] -= config.gamma(nu) * acc

        x = np.zeros(cs.hx_dim)
        w_full = np.zeros(cs.hx_dim)
        for k in range(cs.p):
            x[cs.hx_block_slices[(0, k)]] = x0[k]
            w_full[cs.hx_block_slices[(0, k)]] = w0[k]
        for opi in range(1, cs.n):
            for k in cs.KA[opi]:
                x[cs.hx_block_slices[(opi, k)]] = x1[(opi, k)]
                w_full[cs.hx_block_slices[(opi, k)]] = w1[(opi, k)]
        u = np.zeros(cs.bx_dim)
        for j2, (j, s) in enumerate(meta["coco_keys"]):
            for k in cs.KB[j2]:
                u[cs.bx_block_slices[(j2, k)]] = u_comp[(j, s, k)]
        x_history.append(x.copy())

        maps = lifted_maps(cs, params)
        fp = float(np.linalg.norm(maps.M_A @ x))
        incl = inclusion_residual(cs, w_full, u)
        trace.iters.append(nu)
        trace.fp_residual.append(fp)
        trace.consensus_residual.append(float(np.linalg.norm(st.project_consensus(cs, x)[1].data)))
        trace.inclusion_residual.append(incl)
        trace.objective_gap.append(None)
        trace.violation.append(None)
        trace.elapsed_s.append(0.0)
        if iterations is None and fp <= config.tol and incl <= 10.0 * config.tol:
            converged_at = nu
            break

    return SimResult(
        y=st.mean_estimate(cs, x),
        x=x,
        iterations=nu,
        converged=converged_at is not None,
        converged_iteration=converged_at,
        trace=trace,
        x_history=x_history,
    ), log
