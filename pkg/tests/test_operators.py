import numpy as np
import pytest

from cabra import operators as op
from cabra.errors import EmptyProblem


def kkt_projection_oracle(u, c, v, d):
    """Weighted projection onto {c^T x <= v} by explicit KKT enumeration:
    either the constraint is inactive, or solve the equality-constrained
    system [[D, c], [c^T, 0]] [x; lam] = [D u; v] directly."""
    if c @ u <= v:
        return u.copy()
    n = u.size
    Kmat = np.zeros((n + 1, n + 1))
    Kmat[:n, :n] = np.diag(d)
    Kmat[:n, n] = c
    Kmat[n, :n] = c
    rhs = np.concatenate([d * u, [v]])
    sol = np.linalg.solve(Kmat, rhs)
    return sol[:n]


class TestResolvents:
    def test_halfspace_euclidean(self):
        o = op.HalfspaceNormalCone([1.0, 0.0], 0.0)
        x, w = o.resolve(np.array([1.0, 1.0]), alpha=1.0, d=np.ones(2))
        assert np.array_equal(x, [0.0, 1.0])
        assert np.array_equal(w, [1.0, 0.0])

    def test_halfspace_interior_passthrough(self):
        # at the origin the constraint c^T x <= v with v = 2 is slack
        o = op.HalfspaceNormalCone([0.05, -1.0], 2.0)
        x, w = o.resolve(np.zeros(2), alpha=2.0, d=np.ones(2))
        assert np.array_equal(x, np.zeros(2))
        assert np.array_equal(w, np.zeros(2))

    def test_affine_scalar(self):
        o = op.AffineMonotone([[1.0]], [0.0])
        x, w = o.resolve(np.array([2.0]), alpha=1.0, d=np.ones(1))
        assert np.allclose(x, 1.0)
        assert np.allclose(w, 1.0)

    def test_weighted_halfspace_matches_kkt_oracle(self):
        c = np.array([0.05, -1.0])
        d = np.array([0.0025, 1.0])
        o = op.HalfspaceNormalCone(-c, -2.0)  # projection onto c^T x >= 2
        u = np.zeros(2)
        x, _ = o.resolve(u, alpha=2.0, d=d)
        expect = kkt_projection_oracle(u, -c, -2.0, d)
        assert np.max(np.abs(x - expect)) <= 1e-10

    @pytest.mark.parametrize("seed", range(4))
    def test_weighted_projection_random(self, seed):
        rng = np.random.default_rng(seed)
        n = rng.integers(2, 6)
        c = rng.normal(size=n)
        v = float(rng.normal())
        d = rng.uniform(0.1, 3.0, size=n)
        o = op.HalfspaceNormalCone(c, v)
        u = rng.normal(size=n) * 3
        x, w = o.resolve(u, alpha=1.7, d=d)
        assert np.max(np.abs(x - kkt_projection_oracle(u, c, v, d))) <= 1e-10
        # recovery identity
        assert np.max(np.abs(x + 1.7 * w / d - u)) <= 1e-10

    def test_orthant(self):
        o = op.NonnegativeCone(3)
        x, w = o.resolve(np.array([-1.0, 0.5, 0.0]), alpha=2.0, d=np.array([2.0, 1.0, 1.0]))
        assert np.array_equal(x, [0.0, 0.5, 0.0])
        assert np.array_equal(w, [-1.0, 0.0, 0.0])

    @pytest.mark.parametrize("kind", ["halfspace", "orthant", "affine", "zero"])
    def test_firm_nonexpansive_in_weighted_norm(self, kind):
        rng = np.random.default_rng(hash(kind) % 2**32)
        n = 4
        d = rng.uniform(0.2, 2.0, size=n)
        if kind == "halfspace":
            o = op.HalfspaceNormalCone(rng.normal(size=n), 0.3)
        elif kind == "orthant":
            o = op.NonnegativeCone(n)
        elif kind == "affine":
            X = rng.normal(size=(n, n))
            o = op.AffineMonotone(X.T @ X / n, rng.normal(size=n))
        else:
            o = op.ZeroOperator(n)
        for _ in range(200):
            u1, u2 = rng.normal(size=n) * 2, rng.normal(size=n) * 2
            x1, _ = o.resolve(u1, 1.3, d)
            x2, _ = o.resolve(u2, 1.3, d)
            dx = x1 - x2
            lhs = dx @ (d * dx)
            rhs = dx @ (d * (u1 - u2))
            assert lhs <= rhs + 1e-9

    def test_recovery_identity_all_kinds(self):
        rng = np.random.default_rng(5)
        n = 3
        d = rng.uniform(0.5, 2.0, size=n)
        ops = [
            op.HalfspaceNormalCone(rng.normal(size=n), 0.1),
            op.NonnegativeCone(n),
            op.AffineMonotone(np.eye(n) * 0.7, rng.normal(size=n)),
            op.ZeroOperator(n),
        ]
        for o in ops:
            u = rng.normal(size=n) * 2
            x, w = o.resolve(u, 0.8, d)
            assert np.max(np.abs(x + 0.8 * w / d - u)) <= 1e-10


class TestForward:
    def test_affine_identity(self):
        o = op.AffineCocoercive(np.eye(3), np.zeros(3), beta=1.0)
        x = np.array([1.0, -2.0, 0.5])
        assert np.array_equal(o.forward(x), x)

    def test_wta_gradient_at_zero(self):
        o = op.WtaGradient(1.0, [1.0])
        assert np.array_equal(o.forward(np.zeros(1)), [-1.0])

    def test_cocoercivity_sampling(self):
        rng = np.random.default_rng(9)
        n = 5
        X = rng.normal(size=(n, n))
        H = X.T @ X
        H /= np.linalg.eigvalsh(H)[-1]
        H = 0.5 * (H + H.T)
        o = op.AffineCocoercive(H, rng.normal(size=n), beta=1.0)
        for _ in range(1000):
            x1, x2 = rng.normal(size=n) * 3, rng.normal(size=n) * 3
            db = o.forward(x1) - o.forward(x2)
            assert (x1 - x2) @ db >= o.beta * (db @ db) - 1e-9

    def test_wta_gradient_finite_difference(self):
        rng = np.random.default_rng(10)
        q = rng.uniform(0.2, 1.5, size=4)
        a = 0.7
        o = op.WtaGradient(a, q)
        x = rng.uniform(0.0, 1.0, size=4)
        f = lambda z: a * np.exp(-(q @ z))
        g = o.forward(x)
        for idx in range(4):
            e = np.zeros(4)
            e[idx] = 1e-6
            fd = (f(x + e) - f(x - e)) / 2e-6
            assert abs(fd - g[idx]) <= 1e-6 * max(1.0, abs(g[idx]))

    def test_exponent_clamp(self):
        o = op.WtaGradient(1.0, [1.0])
        out = o.forward(np.array([-1e6]))
        assert np.isfinite(out).all()
        assert o.clamp_events == 1


class TestWtaConstants:
    def test_tau_single_pair(self):
        assert op.wta_tau([1.0], [1.0], [np.array([2.0])]) == 0.5

    def test_tau_empty(self):
        with pytest.raises(EmptyProblem):
            op.wta_tau([1.0], [1.0], [np.zeros(2)])

    def test_beta_conservative_value(self):
        # |q| = 2 > 1, so the conservative constant uses |q|^2
        assert op.wta_beta(1.0, [2.0]) == 1.0 / 4.0
        # |q| = 0.5 < 1: the linear bound is smaller
        assert op.wta_beta(1.0, [0.5]) == 2.0

    def test_scaled_instance_betas_at_least_one(self):
        rng = np.random.default_rng(11)
        pairs = 12
        w = rng.uniform(0.1, 1.0, size=pairs)
        V = rng.uniform(0.1, 1.0, size=pairs)
        qs = [rng.uniform(0.1, 2.0, size=rng.integers(2, 5)) for _ in range(pairs)]
        tau = op.wta_tau(w, V, qs)
        betas_linear = [1.0 / (tau * w[i] * V[i] * np.linalg.norm(qs[i])) for i in range(pairs)]
        assert min(betas_linear) >= 1.0 - 1e-12
        grads = [op.WtaGradient(tau * w[i] * V[i], qs[i]) for i in range(pairs)]
        assert all(g.beta_linear >= 1.0 - 1e-12 for g in grads)
