"""Geometry of (T*S^2)^k as a homogeneous space of SE(3)^k.

Vectors are stored in ambient coordinates with the 3-vector on the last
axis; a k-fold product is just an extra ``k`` axis in front of it, and all
operations act componentwise. Covectors are plain 3-vectors as well.

Functions that take part in training (:func:`exp_action`,
:func:`lift_f_of_h`, :func:`infinitesimal_generator`) are written with
:mod:`hamlearn.diffcore` ops so they accept graph nodes too.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import factorial
from typing import Callable

import numpy as np

from . import diffcore as dc

MANIFOLD_TOL = 1e-8


@dataclass(frozen=True)
class SE3AlgebraElement:
    """(xi, eta) in se(3): rotational and translational parts."""

    xi: object
    eta: object

    def __add__(self, other):
        return SE3AlgebraElement(self.xi + other.xi, self.eta + other.eta)

    def __sub__(self, other):
        return SE3AlgebraElement(self.xi - other.xi, self.eta - other.eta)

    def __neg__(self):
        return SE3AlgebraElement(-self.xi, -self.eta)

    def scale(self, c):
        return SE3AlgebraElement(self.xi * c, self.eta * c)


@dataclass(frozen=True)
class SE3GroupElement:
    R: np.ndarray
    r: np.ndarray

    def compose(self, other: "SE3GroupElement") -> "SE3GroupElement":
        """Group product (R1, r1)(R2, r2) = (R1 R2, r1 + R1 r2)."""
        return SE3GroupElement(self.R @ other.R, self.r + np.einsum("...ij,...j->...i", self.R, other.r))


@dataclass(frozen=True)
class SpherePhasePoint:
    """A point of (T*S^2)^k: q and p have shape (..., k, 3) or (..., 3)."""

    q: object
    p: object

    def violation(self) -> float:
        q, p = dc.value(self.q), dc.value(self.p)
        return manifold_violation(q, p)

    def check(self, tol: float = MANIFOLD_TOL) -> "SpherePhasePoint":
        v = self.violation()
        if not v <= tol:
            raise ValueError(f"point is off T*S^2 (violation {v:.3e} > {tol:.1e})")
        return self


def manifold_violation(q, p) -> float:
    """max over components of max(| |q_i| - 1 |, |q_i . p_i|)."""
    q = np.asarray(q)
    p = np.asarray(p)
    if q.size == 0:
        return 0.0
    norm_err = np.abs(np.sqrt(np.einsum("...i,...i->...", q, q)) - 1.0)
    tang_err = np.abs(np.einsum("...i,...i->...", q, p))
    return float(max(norm_err.max(), tang_err.max()))


def hat(v):
    """3x3 skew matrix with hat(v) @ w == cross(v, w)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


# projections ----------------------------------------------------------------

def _require_unit(q, tol=MANIFOLD_TOL):
    err = np.max(np.abs(np.linalg.norm(q, axis=-1) - 1.0))
    if err > tol:
        raise ValueError(f"q is not a unit vector (| |q| - 1 | = {err:.3e})")


def project_tangent(q, v):
    """(I - q q^T) v for unit q."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    _require_unit(q)
    return v - q * np.sum(q * v, axis=-1, keepdims=True)


def projection_matrix_general(G, cond_max: float = 1e12):
    """Orthogonal projector I - G (G^T G)^{-1} G^T onto ker G^T.

    G is the n x m Jacobian of the constraints (one column per constraint).
    """
    G = np.atleast_2d(np.asarray(G, dtype=float))
    if G.shape[0] == 1 and G.shape[1] > 1:
        G = G.T
    gram = G.T @ G
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > cond_max:
        raise np.linalg.LinAlgError(
            f"constraint Jacobian is rank deficient (cond(G^T G) ~ {cond:.3e})")
    n = G.shape[0]
    return np.eye(n) - G @ np.linalg.solve(gram, G.T)


def w_matrix_sphere(q, p):
    """W(q, p) = p q^T - q p^T."""
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    return p[..., :, None] * q[..., None, :] - q[..., :, None] * p[..., None, :]


def w_matrix_general(constraint_jacobian: Callable, q, p, step: float = 1e-6):
    """W(q,p) = P^T L^T P + L P - P^T L^T with L = d(P(q)^T p)/dq.

    L is formed by central differences of the projector built from
    ``constraint_jacobian(q)``; this is a cross-check, not a production path.
    """
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)

    def proj(x):
        return projection_matrix_general(constraint_jacobian(x))

    n = q.size
    L = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = step
        L[:, j] = (proj(q + e).T @ p - proj(q - e).T @ p) / (2 * step)
    P = proj(q)
    return P.T @ L.T @ P + L @ P - P.T @ L.T


# SE(3) exponential ---------------------------------------------------------

_SERIES_X = 1.0
_NTERMS = 12


def _series(offset):
    c = np.array([(-1.0) ** n / factorial(2 * n + offset) for n in range(_NTERMS)])
    dc_ = np.array([n * c[n] for n in range(1, _NTERMS)])
    return c, dc_


_SER = {j: _series(j) for j in (1, 2, 3)}


def _poly(coeffs, x):
    out = np.zeros_like(x)
    for c in coeffs[::-1]:
        out = out * x + c
    return out


def _coeff(offset, closed, dclosed):
    c, dcoef = _SER[offset]

    def f(x):
        x = np.asarray(x, dtype=float)
        small = x < _SERIES_X
        xs = np.where(small, x, 0.0)
        xl = np.where(small, 1.0, x)
        return np.where(small, _poly(c, xs), closed(np.sqrt(xl)))

    def df(x):
        x = np.asarray(x, dtype=float)
        small = x < _SERIES_X
        xs = np.where(small, x, 0.0)
        xl = np.where(small, 1.0, x)
        return np.where(small, _poly(dcoef, xs), dclosed(np.sqrt(xl)))

    return f, df


# functions of x = theta^2, with their x-derivatives
_alpha = _coeff(1, lambda t: np.sin(t) / t,
                lambda t: (t * np.cos(t) - np.sin(t)) / (2 * t**3))
_beta = _coeff(2, lambda t: (1 - np.cos(t)) / t**2,
               lambda t: (t * np.sin(t) - 2 * (1 - np.cos(t))) / (2 * t**4))
_gamma = _coeff(3, lambda t: (t - np.sin(t)) / t**3,
                lambda t: ((1 - np.cos(t)) * t - 3 * (t - np.sin(t))) / (2 * t**5))


_SER_MAT = np.stack([_SER[j][0] for j in (1, 2, 3)], axis=1)
_POW = np.arange(_NTERMS)


def _coefficients_np(x):
    """(alpha, beta, gamma) at x on plain arrays, stacked on a new last axis."""
    if x.size == 0 or x.max() < _SERIES_X:
        return (x[..., None] ** _POW) @ _SER_MAT
    ser = (np.minimum(x, _SERIES_X)[..., None] ** _POW) @ _SER_MAT
    xl = np.maximum(x, _SERIES_X)
    t = np.sqrt(xl)
    sn = np.sin(t)
    closed = np.stack((sn / t, (1 - np.cos(t)) / xl, (t - sn) / (xl * t)), -1)
    return np.where((x < _SERIES_X)[..., None], ser, closed)


def rodrigues_coefficients(x):
    """sin(t)/t, (1-cos t)/t^2, (t - sin t)/t^3 at t = sqrt(x), differentiable in x."""
    return (dc.unary(x, *_alpha, kind="rodrigues_a"),
            dc.unary(x, *_beta, kind="rodrigues_b"),
            dc.unary(x, *_gamma, kind="rodrigues_c"))


def se3_exp(a: SE3AlgebraElement) -> SE3GroupElement:
    """exp(xi, eta) = (R, V(xi) eta) with R from Rodrigues' formula."""
    xi = np.asarray(a.xi, dtype=float)
    eta = np.asarray(a.eta, dtype=float)
    x = np.sum(xi * xi, axis=-1)
    al, be, ga = (f(x)[..., None, None] for f, _ in (_alpha, _beta, _gamma))
    K = hat(xi)
    K2 = K @ K
    eye = np.eye(3)
    R = eye + al * K + be * K2
    V = eye + be * K + ga * K2
    return SE3GroupElement(R, np.einsum("...ij,...j->...i", V, eta))


def group_action(g: SE3GroupElement, y: SpherePhasePoint) -> SpherePhasePoint:
    """((R, r), (q, p)) -> (R q, R p + r x R q)."""
    Rq = np.einsum("...ij,...j->...i", g.R, np.asarray(y.q, dtype=float))
    Rp = np.einsum("...ij,...j->...i", g.R, np.asarray(y.p, dtype=float))
    return SpherePhasePoint(Rq, Rp + np.cross(g.r, Rq))


def exp_action(a: SE3AlgebraElement, y: SpherePhasePoint) -> SpherePhasePoint:
    """group_action(se3_exp(a), y) evaluated on vectors, without forming R.

    Written with diffcore ops so gradients flow through both the algebra
    element and the point; plain arrays take a shorter numpy path.
    """
    xi, eta = a.xi, a.eta
    if not _any_node(xi, eta, y.q, y.p):
        return _exp_action_np(np.asarray(xi, dtype=float), np.asarray(eta, dtype=float),
                              np.asarray(y.q, dtype=float), np.asarray(y.p, dtype=float))
    alpha, beta, gamma = rodrigues_coefficients(dc.dot(xi, xi))

    def rotate(v):
        xv = dc.cross(xi, v)
        return v + alpha * xv + beta * dc.cross(xi, xv)

    xe = dc.cross(xi, eta)
    r = eta + beta * xe + gamma * dc.cross(xi, xe)
    q_new = rotate(y.q)
    p_new = rotate(y.p) + dc.cross(r, q_new)
    return SpherePhasePoint(q_new, p_new)


_HAT_IDX = [0, 2, 1, 2, 0, 0, 1, 0, 0]
_HAT_SGN = np.array([0.0, -1.0, 1.0, 1.0, 0.0, -1.0, -1.0, 1.0, 0.0])
_EYE3 = np.eye(3)


def _any_node(a, b, c, d):
    Node = dc.Node
    return isinstance(a, Node) or isinstance(b, Node) or isinstance(c, Node) or isinstance(d, Node)


def _exp_action_np(xi, eta, q, p):
    # build R and V once and apply them with matmuls; far fewer numpy calls
    # than the vector form, which matters for long rollouts of small batches
    c = _coefficients_np(np.einsum("...i,...i->...", xi, xi))[..., None, None]
    K = (xi.take(_HAT_IDX, -1) * _HAT_SGN).reshape(xi.shape[:-1] + (1, 3, 3))
    # R = I + alpha K + beta K^2 and V = I + beta K + gamma K^2 in one stack
    RV = _EYE3 + c[..., :2, :, :] * K + c[..., 1:, :, :] * (K @ K)
    R = RV[..., 0, :, :]
    r = (RV[..., 1, :, :] @ eta[..., None])[..., 0]
    # separate products keep the outputs contiguous, which later steps rely on for speed
    q_new = (R @ q[..., None])[..., 0]
    p_rot = (R @ p[..., None])[..., 0]
    return SpherePhasePoint(q_new, p_rot + dc._cross3(r, q_new))


def infinitesimal_generator(a: SE3AlgebraElement, y: SpherePhasePoint):
    """psi_*(xi, eta)(q, p) = (xi x q, xi x p + eta x q)."""
    return dc.cross(a.xi, y.q), dc.cross(a.xi, y.p) + dc.cross(a.eta, y.q)


def lift_f_of_h(dH_dq, dH_dp, y: SpherePhasePoint) -> SE3AlgebraElement:
    """Algebra element whose generator reproduces the constrained Hamiltonian field.

    xi = q x dH/dp,  eta = dH/dq x q + dH/dp x p.
    """
    q, p = y.q, y.p
    if not _any_node(dH_dq, dH_dp, q, p):
        q, p, gq, gp = (np.asarray(v, dtype=float) for v in (q, p, dH_dq, dH_dp))
        # the three cross products share their rotated copies of q and dH/dp
        r1, r2 = dc._ROT1, dc._ROT2
        q1, q2, g1, g2 = q.take(r1, -1), q.take(r2, -1), gp.take(r1, -1), gp.take(r2, -1)
        eta = (gq.take(r1, -1) * q2 - gq.take(r2, -1) * q1) + (g1 * p.take(r2, -1) - g2 * p.take(r1, -1))
        return SE3AlgebraElement(q1 * g2 - q2 * g1, eta)
    return SE3AlgebraElement(dc.cross(q, dH_dp), dc.cross(dH_dq, q) + dc.cross(dH_dp, p))


def sphere_field(dH_dq, dH_dp, q, p):
    """Constrained Hamilton equations on (T*S^2)^k in ambient coordinates.

    q' = (I - q q^T) dH/dp,  p' = -(I - q q^T) dH/dq + dH/dp x (p x q).
    """
    dq = dH_dp - q * dc.dot(q, dH_dp)
    dp = q * dc.dot(q, dH_dq) - dH_dq + dc.cross(dH_dp, dc.cross(p, q))
    return dq, dp


def random_sphere_points(rng: np.random.Generator, shape) -> tuple[np.ndarray, np.ndarray]:
    """q uniform on S^2 and p = (I - q q^T) v with v uniform in [-1, 1]^3."""
    shape = tuple(np.atleast_1d(shape))
    g = rng.standard_normal(shape + (3,))
    q = g / np.linalg.norm(g, axis=-1, keepdims=True)
    v = rng.uniform(-1.0, 1.0, shape + (3,))
    p = v - q * np.sum(q * v, axis=-1, keepdims=True)
    return q, p
