"""Ground-truth Hamiltonian systems used to generate data and score models.

All systems work on batches: unconstrained states are (B, n) arrays, chain
states are (B, k, 3) arrays. Every system exposes ``gradients(q, p)``
returning (dH/dq, dH/dp); separable ones also expose ``grad_potential`` and
``grad_kinetic`` for Stormer-Verlet.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import manifold_violation, random_sphere_points, sphere_field

GRAVITY = 9.81


@dataclass(frozen=True)
class UnconstrainedSystem:
    """Separable H = 1/2 p^T Minv p + V(q) with a closed-form polynomial V.

    V(q) = sum_i c2_i q_i^2 / 2 + c4_i q_i^4 / 4 with per-coordinate c2, c4.
    """

    name: str
    Minv: np.ndarray
    c2: np.ndarray
    c4: np.ndarray
    manifold: str = field(default="flat", init=False)

    def __post_init__(self):
        Minv = np.asarray(self.Minv, dtype=float)
        if np.max(np.abs(Minv - Minv.T)) > 1e-14:
            raise ValueError("Minv must be symmetric")
        np.linalg.cholesky(Minv)

    @property
    def n(self) -> int:
        return len(self.c2)

    @property
    def phase_dim(self) -> int:
        return 2 * self.n

    def potential(self, q):
        q = np.asarray(q, dtype=float)
        return np.sum(self.c2 * q**2 / 2 + self.c4 * q**4 / 4, axis=-1)

    def kinetic(self, p):
        p = np.asarray(p, dtype=float)
        return 0.5 * np.einsum("...i,ij,...j->...", p, self.Minv, p)

    def hamiltonian(self, q, p):
        return self.kinetic(p) + self.potential(q)

    def grad_potential(self, q):
        q = np.asarray(q, dtype=float)
        return self.c2 * q + self.c4 * q**3

    def grad_kinetic(self, p):
        return np.asarray(p, dtype=float) @ self.Minv

    def gradients(self, q, p):
        return self.grad_potential(q), self.grad_kinetic(p)

    def field(self, q, p):
        gq, gp = self.gradients(q, p)
        return gp, -gq

    def sample(self, rng: np.random.Generator, count: int):
        x = rng.uniform(-1.0, 1.0, (count, 2 * self.n))
        return x[:, : self.n], x[:, self.n:]


def quartic_system() -> UnconstrainedSystem:
    """H = 1/2 p^T [[5,-1],[-1,5]] p + (q1^4 + q2^4)/4 + (q1^2 + q2^2)/2."""
    return UnconstrainedSystem("quartic", np.array([[5.0, -1.0], [-1.0, 5.0]]),
                               np.array([1.0, 1.0]), np.array([1.0, 1.0]))


def decoupled_system() -> UnconstrainedSystem:
    """H = (q1^2 + p1^2)/2 + p2^2/2 + q2^2/2 + q2^4/4."""
    return UnconstrainedSystem("decoupled", np.eye(2),
                               np.array([1.0, 1.0]), np.array([0.0, 1.0]))


def quartic_hamiltonian(x):
    """Value and exact gradient of the quartic Hamiltonian at x = (q1, q2, p1, p2)."""
    x = np.asarray(x, dtype=float)
    sys_ = quartic_system()
    q, p = x[..., :2], x[..., 2:]
    gq, gp = sys_.gradients(q, p)
    return sys_.hamiltonian(q, p), np.concatenate([gq, gp], axis=-1)


def decoupled_first_integral(q, p):
    """G = h1(q1, p1) = (q1^2 + p1^2)/2; accepts graph nodes."""
    q1 = q[..., 0:1]
    p1 = p[..., 0:1]
    return (q1 * q1 + p1 * p1) * 0.5


def decoupled_hamiltonian_and_G(x):
    """(H, G, dH, dG) for the decoupled system at x = (q1, q2, p1, p2)."""
    x = np.asarray(x, dtype=float)
    sys_ = decoupled_system()
    q, p = x[..., :2], x[..., 2:]
    gq, gp = sys_.gradients(q, p)
    G = decoupled_first_integral(q, p)[..., 0]
    dG = np.zeros_like(x)
    dG[..., 0] = x[..., 0]
    dG[..., 2] = x[..., 2]
    return sys_.hamiltonian(q, p), G, np.concatenate([gq, gp], axis=-1), dG


FIRST_INTEGRALS = {"decoupled-h1": decoupled_first_integral}


def first_integral(name: str):
    try:
        return FIRST_INTEGRALS[name]
    except KeyError:
        raise KeyError(f"unknown first integral {name!r}; known: {sorted(FIRST_INTEGRALS)}") from None


# pendulum chains -----------------------------------------------------------

@dataclass(frozen=True)
class PendulumChainSystem:
    """k spherical pendula: H = 1/2 p^T M(q)^{-1} p + sum_i c_i . q_i."""

    scalar_mass: np.ndarray
    potential_coeffs: np.ndarray
    name: str = "pendulum"
    manifold: str = field(default="sphere", init=False)

    def __post_init__(self):
        m = np.asarray(self.scalar_mass, dtype=float)
        if np.max(np.abs(m - m.T)) > 1e-14:
            raise ValueError("scalar mass matrix must be symmetric")
        np.linalg.cholesky(m)

    @property
    def k(self) -> int:
        return self.scalar_mass.shape[0]

    @property
    def phase_dim(self) -> int:
        return 6 * self.k

    def mass_matrix(self, q):
        q = np.asarray(q, dtype=float)
        err = np.max(np.abs(np.linalg.norm(q, axis=-1) - 1.0))
        if err > 1e-8:
            raise ValueError(f"q_i must be unit vectors (| |q| - 1 | = {err:.3e})")
        return _assemble_mass(self.scalar_mass, q)

    def hamiltonian(self, q, p):
        q = np.asarray(q, dtype=float)
        p = np.asarray(p, dtype=float)
        M = _assemble_mass(self.scalar_mass, q)
        flat = p.reshape(p.shape[:-2] + (-1,))
        y = np.linalg.solve(M, flat[..., None])[..., 0]
        V = np.sum(self.potential_coeffs * q, axis=(-1, -2))
        return 0.5 * np.sum(flat * y, axis=-1) + V

    def gradients(self, q, p):
        q = np.asarray(q, dtype=float)
        p = np.asarray(p, dtype=float)
        if self.k == 1:
            # M = m I, so the kinetic energy does not depend on q
            return np.zeros_like(q) + self.potential_coeffs, p / self.scalar_mass[0, 0]
        M = _assemble_mass(self.scalar_mass, q)
        try:
            Minv = np.linalg.inv(M)
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError("singular chain mass matrix") from exc
        flat = p.reshape(p.shape[:-2] + (-1,))
        # H_kin = 1/2 p^T Minv p, so dH/dp = 1/2 (Minv + Minv^T) p
        y = np.einsum("...ij,...j->...i", Minv, flat).reshape(p.shape)
        z = np.einsum("...ji,...j->...i", Minv, flat).reshape(p.shape)
        gp = 0.5 * (y + z)
        # dH/dq_i = -1/2 z^T (dM/dq_i) y, with only off-diagonal row i blocks depending on q_i
        gq = np.broadcast_to(self.potential_coeffs, q.shape).copy()
        m = self.scalar_mass
        for i in range(self.k):
            qi = q[..., i, :]
            for j in range(self.k):
                if i == j:
                    continue
                qy = np.sum(qi * y[..., j, :], axis=-1, keepdims=True)
                qz = np.sum(qi * z[..., i, :], axis=-1, keepdims=True)
                gq[..., i, :] += 0.5 * m[i, j] * (qy * z[..., i, :] + qz * y[..., j, :])
        return gq, gp

    def field(self, q, p):
        gq, gp = self.gradients(q, p)
        return sphere_field(gq, gp, np.asarray(q, dtype=float), np.asarray(p, dtype=float))

    def sample(self, rng: np.random.Generator, count: int):
        return random_sphere_points(rng, (count, self.k))

    def violation(self, q, p) -> float:
        return manifold_violation(q, p)


def _assemble_mass(m, q):
    k = m.shape[0]
    batch = q.shape[:-2]
    M = np.zeros(batch + (3 * k, 3 * k))
    eye = np.eye(3)
    for i in range(k):
        proj = eye - q[..., i, :, None] * q[..., i, None, :]
        for j in range(k):
            M[..., 3 * i:3 * i + 3, 3 * j:3 * j + 3] = m[i, i] * eye if i == j else m[i, j] * proj
    return M


def pendulum_mass_matrix(sys_: PendulumChainSystem, q):
    return sys_.mass_matrix(q)


def true_pendulum_field(sys_: PendulumChainSystem, q, p):
    """(q', p') of the constrained equations for the true chain Hamiltonian."""
    return sys_.field(q, p)


def pendulum_k1() -> PendulumChainSystem:
    return PendulumChainSystem(np.array([[1.0]]), np.array([[0.0, 0.0, GRAVITY]]), "pendulum-k1")


def pendulum_k2() -> PendulumChainSystem:
    return PendulumChainSystem(np.array([[3.0, 1.0], [1.0, 1.0]]),
                               np.array([[0.0, 0.0, 2 * GRAVITY], [0.0, 0.0, GRAVITY]]),
                               "pendulum-k2")


SYSTEMS = {
    "quartic": quartic_system,
    "decoupled": decoupled_system,
    "pendulum-k1": pendulum_k1,
    "pendulum-k2": pendulum_k2,
}


def get_system(name: str):
    try:
        return SYSTEMS[name]()
    except KeyError:
        raise KeyError(f"unknown system {name!r}; known: {sorted(SYSTEMS)}") from None
