"""One-step methods, rollouts and the adaptive reference integrator.

States are tuples ``(q, p)`` (arrays or graph nodes), or a single array for
the plain-field helpers. The fixed-step methods only use diffcore-aware
arithmetic, so a rollout under a model whose parameters are nodes records
the whole computation for training.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffcore as dc
from .geometry import (MANIFOLD_TOL, SpherePhasePoint, exp_action, lift_f_of_h,
                       manifold_violation)


class IntegrationError(RuntimeError):
    pass


def _axpy(x, h, v):
    """x + h v on arrays or on tuples of arrays."""
    if isinstance(x, tuple):
        return tuple(xi + vi * h for xi, vi in zip(x, v))
    return x + v * h


def _lincomb(x, terms):
    out = x
    for c, v in terms:
        out = _axpy(out, c, v)
    return out


# ambient one-step maps -------------------------------------------------------

def step_explicit_euler(field: Callable, x, h: float):
    """x + h f(x)."""
    return _axpy(x, h, field(x))


def step_rk4(field: Callable, x, h: float):
    """Classical four-stage Runge-Kutta step."""
    k1 = field(x)
    k2 = field(_axpy(x, h / 2, k1))
    k3 = field(_axpy(x, h / 2, k2))
    k4 = field(_axpy(x, h, k3))
    return _lincomb(x, [(h / 6, k1), (h / 3, k2), (h / 3, k3), (h / 6, k4)])


def step_stormer_verlet(grad_potential: Callable, grad_kinetic, x, h: float):
    """Leapfrog for separable H = K(p) + V(q).

    ``grad_kinetic`` is either a callable p -> dK/dp or a constant inverse
    mass matrix.
    """
    if not callable(grad_kinetic):
        Minv = np.asarray(grad_kinetic, dtype=float)
        grad_kinetic = lambda p: dc.matmul(p, Minv)  # noqa: E731 - Minv is symmetric
    q, p = x
    p_half = p - grad_potential(q) * (h / 2)
    q_new = q + grad_kinetic(p_half) * h
    p_new = p_half - grad_potential(q_new) * (h / 2)
    return q_new, p_new


# Lie group one-step maps ---------------------------------------------------

def _as_point(y) -> SpherePhasePoint:
    return y if isinstance(y, SpherePhasePoint) else SpherePhasePoint(*y)


def _check_manifold(y: SpherePhasePoint):
    v = manifold_violation(dc.value(y.q), dc.value(y.p))
    if not v <= MANIFOLD_TOL:
        raise IntegrationError(f"Lie group step needs a point on T*S^2 (violation {v:.3e})")


def step_lie_euler(lift: Callable, y, h: float):
    """y' = psi(exp(h f(y)), y)."""
    y = _as_point(y)
    _check_manifold(y)
    return exp_action(lift(y).scale(h), y)


def step_cf4(lift: Callable, y, h: float):
    """Fourth-order commutator-free Lie group step with two exponentials per output."""
    y = _as_point(y)
    _check_manifold(y)
    K1 = lift(y)
    Y2 = exp_action(K1.scale(h / 2), y)
    K2 = lift(Y2)
    Y3 = exp_action(K2.scale(h / 2), y)
    K3 = lift(Y3)
    Y4 = exp_action(K3.scale(h) - K1.scale(h / 2), Y2)
    K4 = lift(Y4)
    # (h/12)(3K1 + 2K2 + 2K3 - K4), then (h/12)(-K1 + 2K2 + 2K3 + 3K4)
    mid = (K2 + K3).scale(2.0)
    a = (K1.scale(3.0) + mid - K4).scale(h / 12)
    b = (K4.scale(3.0) + mid - K1).scale(h / 12)
    return exp_action(b, exp_action(a, y))


# steppers bound to a Hamiltonian system -------------------------------------------

@dataclass(frozen=True)
class Stepper:
    id: str
    order: int
    geometry: str  # "ambient" or "lie-group"
    stages: int

    def step(self, system, x, h: float):
        """Advance the state ``x = (q, p)`` of ``system`` by one step of size h."""
        if self.id in ("ee", "rk4"):
            fn = step_explicit_euler if self.id == "ee" else step_rk4
            return fn(lambda s: system.field(*s), tuple(x), h)
        if self.id == "sv":
            if system.manifold != "flat":
                raise IntegrationError("Stormer-Verlet needs a separable unconstrained system")
            return step_stormer_verlet(system.grad_potential, system.grad_kinetic, tuple(x), h)
        if system.manifold != "sphere":
            raise IntegrationError(f"{self.id} needs a system on (T*S^2)^k")

        def lift(y):
            gq, gp = system.gradients(y.q, y.p)
            return lift_f_of_h(gq, gp, y)

        fn = step_lie_euler if self.id == "le" else step_cf4
        y = fn(lift, SpherePhasePoint(*x), h)
        return y.q, y.p


STEPPERS = {
    "ee": Stepper("ee", 1, "ambient", 1),
    "rk4": Stepper("rk4", 4, "ambient", 4),
    "sv": Stepper("sv", 2, "ambient", 2),
    "le": Stepper("le", 1, "lie-group", 1),
    "cf4": Stepper("cf4", 4, "lie-group", 4),
}

# which steppers each model variant accepts
COMPATIBLE = {
    "separable": ("ee", "rk4", "sv"),
    "chain": ("ee", "rk4", "le", "cf4"),
}


def get_stepper(name: str) -> Stepper:
    try:
        return STEPPERS[name]
    except KeyError:
        raise KeyError(f"unknown integrator {name!r}; known: {sorted(STEPPERS)}") from None


@dataclass(frozen=True)
class Trajectory:
    """States at uniformly spaced times; q and p carry the time axis first."""

    times: np.ndarray
    q: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times)
        if t.size > 1:
            d = np.diff(t)
            if np.any(d <= 0) or np.max(np.abs(d - d[0])) > 1e-12 * max(1.0, abs(t[-1])):
                raise ValueError("trajectory times must be strictly increasing and uniform")


def rollout_states(stepper: Stepper | str, system, x0, h: float, M: int) -> list:
    """[x0, step(x0), ...] with M states; works with graph nodes."""
    if M < 2:
        raise ValueError("a rollout needs M >= 2")
    if h <= 0:
        raise ValueError("step size must be positive")
    if isinstance(stepper, str):
        stepper = get_stepper(stepper)
    states = [tuple(x0)]
    for j in range(1, M):
        try:
            nxt = stepper.step(system, states[-1], h)
        except (IntegrationError, np.linalg.LinAlgError) as exc:
            raise IntegrationError(f"{stepper.id} failed at step {j}: {exc}") from exc
        if not np.isfinite(sum(float(np.sum(dc.value(c))) for c in nxt)):
            raise IntegrationError(f"{stepper.id} produced non-finite values at step {j}")
        states.append(nxt)
    return states


def rollout(stepper: Stepper | str, system, x0, h: float, M: int) -> Trajectory:
    states = rollout_states(stepper, system, x0, h, M)
    q = np.stack([np.asarray(dc.value(s[0])) for s in states])
    p = np.stack([np.asarray(dc.value(s[1])) for s in states])
    return Trajectory(h * np.arange(M), q, p)


# Dormand-Prince 5(4) ------------------------------------------------------------

_C = np.array([0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
]
_B = np.array([35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84])
# difference between the 5th and embedded 4th order weights (7 stages, FSAL)
_E = np.array([-71 / 57600, 0, 71 / 16695, -71 / 1920, 17253 / 339200, -22 / 525, 1 / 40])
# continuous extension: y(t + s h) = y + h sum_i K_i (P_i . [s, s^2, s^3, s^4])
_P = np.array([
    [1, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0, 0, 0, 0],
    [0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])


def _rms(x):
    return float(np.sqrt(np.mean(x * x)))


def _rms_rows(x):
    # one RMS per batch row
    return np.sqrt(np.mean((x * x).reshape(x.shape[0], -1), axis=1))


def _worst_rms(x):
    return float(np.max(_rms_rows(x)))


def _initial_step(field, y0, f0, rtol, atol, span, _rms=_rms):
    scale = atol + np.abs(y0) * rtol
    d0, d1 = _rms(y0 / scale), _rms(f0 / scale)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, span)
    f1 = field(y0 + h0 * f0)
    d2 = _rms((f1 - f0) / scale) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1, span)


def integrate_reference(field: Callable, x0, times, rtol: float = 1e-10, atol: float = 1e-12,
                        max_steps: int = 1_000_000, batched: bool = False) -> np.ndarray:
    """Adaptive Dormand-Prince 5(4) solution of x' = field(x) sampled at ``times``.

    ``x0`` may have any shape and is integrated as one system with a shared
    step size. With ``batched`` the first axis indexes independent states and
    the error norm is the worst per-row RMS, so every row meets the tolerance
    it would meet on its own. Returns an array of shape (len(times),) + x0.shape;
    output between accepted steps uses the 4th-order continuous extension.
    """
    norm = _worst_rms if batched else _rms
    if rtol <= 0 or atol <= 0:
        raise ValueError("tolerances must be positive")
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size < 1 or np.any(np.diff(times) < 0):
        raise ValueError("times must be a non-decreasing 1-D grid")
    y = np.array(x0, dtype=float)
    out = np.empty((times.size,) + y.shape)
    out[0] = y
    t, t_end = times[0], times[-1]
    span = t_end - t
    if span == 0:
        out[:] = y
        return out
    f = np.asarray(field(y), dtype=float)
    h = _initial_step(field, y, f, rtol, atol, span, norm)
    h_min = 1e-14 * span
    K = np.empty((7,) + y.shape)
    idx = 1
    while idx < times.size and times[idx] <= t:
        out[idx] = y
        idx += 1
    steps = 0
    while idx < times.size:
        if steps >= max_steps:
            raise IntegrationError(f"DOPRI5 exceeded {max_steps} steps at t={t:.6g}")
        h = min(h, t_end - t)
        K[0] = f
        for s in range(1, 6):
            dy = np.tensordot(_A[s], K[:s], axes=1)
            K[s] = field(y + h * dy)
        y_new = y + h * np.tensordot(_B, K[:6], axes=1)
        f_new = np.asarray(field(y_new), dtype=float)
        K[6] = f_new
        err = h * np.tensordot(_E, K, axes=1)
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        err_norm = norm(err / scale)
        if not np.isfinite(err_norm):
            where = ""
            if batched:
                bad = ~np.isfinite(_rms_rows(err / scale))
                where = f" (row {int(np.argmax(bad))})"
            raise IntegrationError(f"DOPRI5 produced non-finite values at t={t:.6g}{where}")
        steps += 1
        if err_norm <= 1.0:
            t_new = t + h if t_end - (t + h) > h_min else t_end
            while idx < times.size and times[idx] <= t_new:
                if times[idx] == t_new:
                    out[idx] = y_new
                else:
                    s = (times[idx] - t) / h
                    coef = _P @ np.array([s, s * s, s ** 3, s ** 4])
                    out[idx] = y + h * np.tensordot(coef, K, axes=1)
                idx += 1
            t, y, f = t_new, y_new, f_new
            factor = 10.0 if err_norm == 0 else min(10.0, 0.9 * err_norm ** -0.2)
        else:
            factor = max(0.2, 0.9 * err_norm ** -0.2)
        h *= factor
        if h < h_min and idx < times.size:
            where = f" (worst row {int(np.argmax(_rms_rows(err / scale)))})" if batched else ""
            raise IntegrationError(f"DOPRI5 step size underflow (h={h:.3e}) at t={t:.6g}{where}")
    return out


def system_flow(system, q0, p0, times, rtol: float = 1e-10, atol: float = 1e-12):
    """Reference trajectories of a batch of initial states under ``system``.

    The first axis of ``q0``/``p0`` indexes trajectories; each one is held to
    the tolerances individually. Returns (q, p) of shape (len(times), *q0.shape).
    """
    q0 = np.asarray(q0, dtype=float)
    p0 = np.asarray(p0, dtype=float)
    B = q0.shape[0]
    nq = q0[0].size

    def field(y):
        dq, dp = system.field(y[:, :nq].reshape(q0.shape), y[:, nq:].reshape(p0.shape))
        return np.concatenate([np.reshape(dc.value(dq), (B, nq)), np.reshape(dc.value(dp), (B, nq))], axis=1)

    y0 = np.concatenate([q0.reshape(B, nq), p0.reshape(B, nq)], axis=1)
    ys = integrate_reference(field, y0, times, rtol, atol, batched=True)
    shape = (len(times),) + q0.shape
    return ys[:, :, :nq].reshape(shape), ys[:, :, nq:].reshape(shape)
