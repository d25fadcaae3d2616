"""Monotone operator blocks (resolvent-capable) and cocoercive blocks.

Resolvents are taken under a positive diagonal scaling: ``resolve(u, alpha,
d)`` returns the x solving x + alpha d^{-1} A(x) ∋ u together with the
recovered element w = d (u - x) / alpha ∈ A(x).  Cocoercive blocks are
evaluated forward and carry their cocoercivity constant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyProblem, ShapeMismatch, SingularSystem

_EXP_CLAMP = 700.0


def _check_dim(x, dim, what):
    x = np.asarray(x, dtype=float)
    if x.shape != (dim,):
        raise ShapeMismatch(f"{what}: expected shape ({dim},), got {x.shape}")
    return x


def _as_diag(d, dim):
    d = np.asarray(d, dtype=float)
    if d.ndim == 0:
        d = np.full(dim, float(d))
    if d.shape != (dim,):
        raise ShapeMismatch(f"diagonal scaling: expected shape ({dim},), got {d.shape}")
    if np.any(d <= 0):
        raise ValueError("diagonal scaling must be positive")
    return d


@dataclass(frozen=True)
class HalfspaceNormalCone:
    """Normal cone of the halfspace {x : c^T x <= v}; resolvent is the
    d-weighted projection onto it.  Use (-c, -v) for a >= constraint."""

    c: np.ndarray
    v: float

    def __post_init__(self):
        object.__setattr__(self, "c", np.asarray(self.c, dtype=float))
        if np.linalg.norm(self.c) == 0:
            raise ValueError("halfspace normal must be nonzero")

    @property
    def dim(self) -> int:
        return self.c.size

    def resolve(self, u, alpha, d):
        u = _check_dim(u, self.dim, "halfspace resolvent input")
        d = _as_diag(d, self.dim)
        cd = self.c / d
        gap = self.c @ u - self.v
        if gap > 0:
            x = u - (gap / (self.c @ cd)) * cd
        else:
            x = u.copy()
        w = d * (u - x) / alpha
        return x, w


@dataclass(frozen=True)
class NonnegativeCone:
    """Normal cone of the nonnegative orthant; resolvent clips at zero."""

    dim: int

    def resolve(self, u, alpha, d):
        u = _check_dim(u, self.dim, "orthant resolvent input")
        d = _as_diag(d, self.dim)
        x = np.maximum(u, 0.0)
        w = d * (u - x) / alpha
        return x, w


@dataclass(frozen=True)
class AffineMonotone:
    """x -> H x - h with H symmetric PSD; resolvent solves a linear system."""

    H: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "H", np.asarray(self.H, dtype=float))
        object.__setattr__(self, "h", np.asarray(self.h, dtype=float))
        if self.H.shape != (self.h.size, self.h.size):
            raise ShapeMismatch("AffineMonotone: H and h shapes disagree")

    @property
    def dim(self) -> int:
        return self.h.size

    def resolve(self, u, alpha, d):
        u = _check_dim(u, self.dim, "affine resolvent input")
        d = _as_diag(d, self.dim)
        A = np.diag(d) + alpha * self.H
        try:
            x = np.linalg.solve(A, d * u + alpha * self.h)
        except np.linalg.LinAlgError as exc:  # PSD H keeps A positive definite
            raise SingularSystem(str(exc)) from exc
        w = d * (u - x) / alpha
        return x, w


@dataclass(frozen=True)
class ZeroOperator:
    """The zero map; its resolvent is the identity."""

    dim: int

    def resolve(self, u, alpha, d):
        u = _check_dim(u, self.dim, "zero resolvent input")
        _as_diag(d, self.dim)
        return u.copy(), np.zeros(self.dim)


@dataclass(frozen=True)
class AffineCocoercive:
    """x -> H x - h with H symmetric PSD; 1/lambda_max(H)-cocoercive."""

    H: np.ndarray
    h: np.ndarray
    beta: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "H", np.asarray(self.H, dtype=float))
        object.__setattr__(self, "h", np.asarray(self.h, dtype=float))
        if self.beta is None:
            lam_max = float(np.linalg.eigvalsh(self.H)[-1])
            if lam_max <= 0:
                raise ValueError("H must have a positive largest eigenvalue")
            object.__setattr__(self, "beta", 1.0 / lam_max)
        if self.beta <= 0:
            raise ValueError("beta must be positive")

    @property
    def dim(self) -> int:
        return self.h.size

    def forward(self, x):
        x = _check_dim(x, self.dim, "affine forward input")
        return self.H @ x - self.h


@dataclass(eq=False)
class WtaGradient:
    """Gradient of x -> a exp(-<q, x>): forward(x) = -a exp(-<q, x>) q.

    ``beta`` is the conservative cocoercivity constant
    1 / (a max(|q|, |q|^2)); the two candidate constants (linear in |q| on
    the nonnegative orthant, quadratic from the Lipschitz bound) are kept as
    attributes.  The exponent is clamped at 700 to avoid overflow;
    ``clamp_events`` counts how often that engaged.
    """

    a: float
    q: np.ndarray
    beta: float = field(init=False)
    beta_linear: float = field(init=False)
    beta_quadratic: float = field(init=False)
    clamp_events: int = field(default=0, init=False)

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        if self.a <= 0:
            raise ValueError("scale a must be positive")
        qn = np.linalg.norm(self.q)
        if qn == 0:
            raise EmptyProblem("WtaGradient with zero q")
        self.beta_linear = 1.0 / (self.a * qn)
        self.beta_quadratic = 1.0 / (self.a * qn**2)
        self.beta = wta_beta(self.a, self.q)

    @property
    def dim(self) -> int:
        return self.q.size

    def forward(self, x):
        x = _check_dim(x, self.dim, "wta forward input")
        e = -float(self.q @ x)
        if e > _EXP_CLAMP:
            e = _EXP_CLAMP
            self.clamp_events += 1
        return (-self.a * np.exp(e)) * self.q


def wta_beta(a: float, q) -> float:
    """Conservative cocoercivity constant 1 / (a max(|q|, |q|^2))."""
    q = np.asarray(q, dtype=float)
    qn = np.linalg.norm(q)
    if a <= 0 or qn == 0:
        raise EmptyProblem("wta_beta needs a > 0 and q != 0")
    return 1.0 / (a * max(qn, qn**2))


def wta_tau(w_s, V_j, q_js) -> float:
    """Problem rescaling 1 / max_{js} (w_s V_j |q_js|) over all (j, s) pairs.

    ``q_js`` iterates in the same (j, s) order as the outer product of
    ``V_j`` and ``w_s`` pairs supplied; all three must align elementwise.
    """
    w_s = np.asarray(w_s, dtype=float)
    V_j = np.asarray(V_j, dtype=float)
    norms = np.array([np.linalg.norm(np.asarray(q, dtype=float)) for q in q_js])
    if w_s.shape != V_j.shape or norms.shape != w_s.shape:
        raise ShapeMismatch("wta_tau: w_s, V_j, q_js must align elementwise")
    peak = np.max(w_s * V_j * norms) if norms.size else 0.0
    if peak <= 0:
        raise EmptyProblem("all scenario gradients are trivial")
    return 1.0 / peak


MONOTONE_KINDS = {
    "halfspace": HalfspaceNormalCone,
    "nonnegative": NonnegativeCone,
    "affine": AffineMonotone,
    "zero": ZeroOperator,
}

COCOERCIVE_KINDS = {
    "affine": AffineCocoercive,
    "wta_gradient": WtaGradient,
}


@dataclass(frozen=True)
class OperatorBank:
    """The n monotone and m cocoercive operator blocks of one problem."""

    monotone: tuple
    cocoercive: tuple

    @property
    def beta(self) -> np.ndarray:
        return np.array([b.beta for b in self.cocoercive])
