import io

import numpy as np
import pytest
import scipy.sparse as sp

from cabra import design_sdp as dz
from cabra import matparams as mp
from cabra import structure as st
from cabra.errors import Infeasible, PatternConflict

from conftest import valid_params_for


def validate_design(result, n, m, beta=None, skj=None, tol=1e-8):
    """Run the full assumption validator on a one-block design result."""
    beta = np.ones(m) if beta is None else np.asarray(beta, float)
    skj = tuple(range(m)) if skj is None else tuple(skj)
    istar = list(skj) if m else []
    cs = st.build_structure([[0]] * n, [[0]] * m, [2], istar_choice=istar)
    params = mp.derive(cs, [result.Z], [result.W],
                       [result.K if m else None], [result.Q if m else None], beta=beta)
    return mp.validate(cs, params, tol=tol), cs, params


class TestSpecs:
    def test_pattern_conflict_empty_k_row(self):
        with pytest.raises(PatternConflict):
            dz.DesignSpec(n=3, m=1, beta=(1.0,), c=1.0, skj=(0,),
                          zero_K=frozenset({(0, 0)}))

    def test_diagonal_zero_rejected(self):
        with pytest.raises(PatternConflict):
            dz.DesignSpec(n=3, m=0, c=1.0, zero_Z=frozenset({(1, 1)}))

    def test_block_parallel_pattern(self):
        spec = dz.block_parallel_spec()
        assert {(0, 1), (2, 3), (4, 5)} <= spec.zero_Z
        assert (0, 4) in spec.zero_W and (1, 5) in spec.zero_W
        for t in range(2):
            assert spec.k_allowed(t) == [0, 1]
            assert spec.q_allowed(t) == [3, 4, 5]


class TestBuild:
    def test_counts_single_block_feasibility(self):
        prob = dz.build_sdp(dz.DesignSpec(n=2, m=0, c=1.0))
        # variables: 3 Z + 3 W; equalities: Z1=0 (2) + W1=0 (2)
        assert prob.n_theta == 6
        assert prob.n_equalities == 4
        assert prob.block_names() == ["Z_minus_W", "schur", "fiedler"]

    def test_counts_with_objective(self):
        c = 2 * (1 - np.cos(np.pi / 4))
        spec = dz.DesignSpec(n=4, m=3, beta=(1.0,) * 3, c=c,
                             objective="lambda_max", w_equals_z=True, skj=(0, 1, 2))
        prob = dz.build_sdp(spec)
        # W eliminated; K row t has t+1 free columns, Q column t has 3-t free rows
        n_z = 10
        n_k = 1 + 2 + 3
        n_q = 3 + 2 + 1
        assert prob.n_theta == n_z + n_k + n_q + 1  # + tau
        assert prob.block_names() == ["schur", "fiedler", "obj_cap"]
        assert prob.n_equalities == 4 + 3 + 3
        assert float(np.sum(prob.objective)) == 1.0

    def test_w_equals_z_drops_difference_block(self):
        spec = dz.DesignSpec(n=3, m=1, beta=(1.0,), c=1.0, w_equals_z=True, skj=(0,))
        prob = dz.build_sdp(spec)
        assert prob.block_names() == ["schur", "fiedler"]


class TestSdpaFormat:
    def test_minimal_one_by_one_block(self):
        # feasibility problem "x >= 0" hand-assembled
        prob = dz.SdpProblem(
            spec=dz.DesignSpec(n=2, m=0, c=1.0),
            var_names=[("x",)], var_index={("x",): 0},
            eq_rows=sp.csr_matrix((0, 1)), eq_rhs=np.zeros(0),
            blocks=[dz.ConeBlock("x_nonneg", "psd", 1, np.zeros(1),
                                 sp.csr_matrix(([1.0], ([0], [0])), shape=(1, 1)))],
            objective=np.zeros(1),
        )
        buf = io.StringIO()
        dz.emit_sdpa(prob, buf)
        text = buf.getvalue().splitlines()
        assert text[0] == "1" and text[1] == "1" and text[2] == "1"
        assert text[4] == "1 1 1 1 1"
        assert dz.sdpa_roundtrip_ok(prob)

    def test_roundtrip_feasibility(self):
        prob = dz.build_sdp(dz.DesignSpec(n=2, m=0, c=1.0))
        assert dz.sdpa_roundtrip_ok(prob)

    def test_block_structure_with_schur(self):
        spec = dz.DesignSpec(n=3, m=1, beta=(1.0,), c=1.0, w_equals_z=True, skj=(0,))
        prob = dz.build_sdp(spec)
        nv, blockstruct, c, entries = dz.sdpa_data(prob)
        psd = [b for b in blockstruct if b > 0]
        lp = [b for b in blockstruct if b < 0]
        assert len(psd) == 2 and psd == [4, 3]
        assert len(lp) == 1
        assert dz.sdpa_roundtrip_ok(prob)

    def test_file_roundtrip(self, tmp_path):
        prob = dz.build_sdp(dz.DesignSpec(n=3, m=0, c=0.7))
        path = tmp_path / "prob.dat-s"
        dz.emit_sdpa(prob, path)
        assert dz.parse_sdpa(path) == dz.sdpa_data(prob)


class TestFeasibility:
    def test_pair_block(self):
        res = dz.feasibility_solve(dz.DesignSpec(n=2, m=0, c=1.0), tol=1e-9)
        assert dz.check_fiedler(res.W) >= 1.0 - 1e-7
        rep, _, _ = validate_design(res, 2, 0)
        assert rep.ok

    def test_uniform_start_is_fixed_point(self):
        res = dz.feasibility_solve(dz.DesignSpec(n=5, m=0, c=1.0), tol=1e-9)
        assert res.iterations == 0
        assert res.residual <= 1e-12

    def test_disconnected_pattern_infeasible(self):
        zero = frozenset({(0, 2), (0, 3), (1, 2), (1, 3)})
        spec = dz.DesignSpec(n=4, m=0, c=0.5, zero_Z=zero, zero_W=zero)
        with pytest.raises(Infeasible) as err:
            dz.feasibility_solve(spec, tol=1e-9, maxit=1200)
        assert err.value.residual > 1e-3

    def test_random_specs_validate(self):
        rng = np.random.default_rng(0)
        for trial in range(6):
            n = int(rng.integers(2, 6))
            m = int(rng.integers(0, min(3, n - 1) + 1))
            skj = tuple(int(rng.integers(0, n - 1)) for _ in range(m))
            beta = tuple(float(b) for b in rng.uniform(0.8, 2.0, size=m))
            spec = dz.DesignSpec(n=n, m=m, beta=beta, c=float(rng.uniform(0.3, 1.0)), skj=skj)
            res = dz.feasibility_solve(spec, tol=1e-9)
            rep, _, _ = validate_design(res, n, m, beta=beta, skj=skj, tol=1e-7)
            assert rep.ok, rep.as_table()
            assert dz.check_fiedler(res.W) >= spec.c - 1e-7

    def test_schur_implies_z_dominates_u(self):
        spec = dz.DesignSpec(n=4, m=2, beta=(1.0, 1.5), c=0.8, skj=(0, 1))
        res = dz.feasibility_solve(spec, tol=1e-9)
        R = res.Q.T - res.K
        U = R.T @ np.diag(1.0 / np.array([1.0, 1.5])) @ R
        assert np.linalg.eigvalsh(res.Z - U)[0] >= -1e-7


class TestObjectives:
    def test_lambda_max_reduces_spread(self):
        c = 2 * (1 - np.cos(np.pi / 4))
        spec = dz.DesignSpec(n=4, m=0, c=c, objective="lambda_max", w_equals_z=True)
        base = dz.feasibility_solve(spec, tol=1e-9)
        tuned = dz.design_solve(spec, tol=1e-9, maxit=6000)
        assert np.linalg.eigvalsh(tuned.Z)[-1] <= np.linalg.eigvalsh(base.Z)[-1] + 1e-9
        assert dz.check_fiedler(tuned.W) >= c - 1e-7

    def test_diag_match_tracks_targets(self):
        rng = np.random.default_rng(1)
        d_a = rng.uniform(0.8, 2.5, size=4)
        spec = dz.DesignSpec(
            n=4, m=0, c=0.5,
            objective=dz.DiagMatch(d_a=d_a, d_b=(), weight=0.1),
        )
        res = dz.design_solve(spec, tol=1e-8, maxit=6000)
        gap = np.linalg.norm(np.diag(res.Z) - d_a)
        uniform_gap = np.linalg.norm(np.diag(mp.uniform_family(4)[0]) - d_a)
        assert gap < uniform_gap
        rep, _, _ = validate_design(res, 4, 0, tol=1e-7)
        assert rep.ok


class TestFiedler:
    def test_pair(self):
        Z, W = mp.uniform_family(2)
        assert abs(dz.check_fiedler(W) - 2.0) <= 1e-12

    @pytest.mark.parametrize("n", [3, 5, 9])
    def test_uniform_value(self, n):
        _, W = mp.uniform_family(n)
        assert abs(dz.check_fiedler(W) - n / (n - 1)) <= 1e-12

    def test_zero_matrix(self):
        assert dz.check_fiedler(np.zeros((4, 4))) == 0.0


class TestBlockParallel:
    def test_design_and_schedule(self):
        res = dz.feasibility_solve(dz.block_parallel_spec(), tol=1e-9)
        assert res.Z[0, 1] == 0.0 and res.Z[2, 3] == 0.0 and res.Z[4, 5] == 0.0
        for i in (0, 1):
            for ip in (4, 5):
                assert res.W[i, ip] == 0.0
        assert np.max(np.abs(res.K[:, 2:])) == 0.0
        assert np.max(np.abs(res.Q[:3, :])) == 0.0
        assert dz.check_fiedler(res.W) >= 1.0 - 1e-7
        rep, cs, params = validate_design(res, 6, 2, skj=(2, 2), tol=1e-7)
        assert rep.ok, rep.as_table()
        # the pair (0, 1) decouples: operator 1 does not wait on operator 0
        maps = mp.lifted_maps(cs, params)
        assert 0 not in maps.op_preds[1]
        assert maps.op_b_preds[1] == frozenset()
