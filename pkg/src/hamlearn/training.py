"""Datasets, the recurrent rollout loss, Adam and the training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .geometry import manifold_violation
from .integrators import COMPATIBLE, IntegrationError, get_stepper, integrate_reference, rollout_states
from .models import HamiltonianModel, ModelParams
from .systems import first_integral

log = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    def __init__(self, epoch: int, batch: int, loss: float, detail: str = ""):
        msg = f"non-finite loss {loss} at epoch {epoch}, batch {batch}"
        super().__init__(f"{msg} ({detail})" if detail else msg)
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class TrajectoryDataset:
    """N trajectory segments of M states with uniform spacing dt.

    ``q`` and ``p`` have shape (N, M, ...); index 0 along the second axis
    holds the initial conditions x_i, the rest are the targets y_i^j.
    """

    q: np.ndarray
    p: np.ndarray
    dt: float
    provenance: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return self.q.shape[0]

    @property
    def M(self) -> int:
        return self.q.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.M)

    @property
    def phase_dim(self) -> int:
        return 2 * int(np.prod(self.q.shape[2:]))

    def subset(self, idx) -> "TrajectoryDataset":
        return replace(self, q=self.q[idx], p=self.p[idx])


def generate_dataset(system, N: int, M: int, dt: float, rtol: float = 1e-10, atol: float = 1e-12,
                     seed: int = 0, sampler: Callable | None = None,
                     system_id: str | None = None) -> TrajectoryDataset:
    """Sample N initial conditions and integrate them with DOPRI5 to times (j-1) dt.

    All trajectories share one step sequence; the controller uses the worst
    per-trajectory error, so each one is at least as accurate as on its own.
    """
    if N < 1 or M < 2:
        raise ValueError(f"need N >= 1 and M >= 2 (got N={N}, M={M})")
    if not dt > 0:
        raise ValueError("dt must be positive")
    rng = np.random.default_rng(seed)
    q0, p0 = (sampler or system.sample)(rng, N)
    times = dt * np.arange(M)
    shape = q0.shape[1:]
    nq = int(np.prod(shape))

    def field_(y):
        dq, dp = system.field(y[:, :nq].reshape((N,) + shape), y[:, nq:].reshape((N,) + shape))
        return np.concatenate([np.reshape(dc.value(dq), (N, nq)), np.reshape(dc.value(dp), (N, nq))], axis=1)

    y0 = np.concatenate([q0.reshape(N, nq), p0.reshape(N, nq)], axis=1)
    try:
        ys = integrate_reference(field_, y0, times, rtol, atol, batched=True)
    except IntegrationError as exc:
        raise IntegrationError(f"reference integration failed: {exc}") from exc
    qs = np.swapaxes(ys[:, :, :nq], 0, 1).reshape((N, M) + shape)
    ps = np.swapaxes(ys[:, :, nq:], 0, 1).reshape((N, M) + shape)
    prov = {
        "system": system_id or getattr(system, "name", "unknown"),
        "integrator": "dopri54",
        "rtol": rtol,
        "atol": atol,
        "seed": int(seed),
        "N": int(N),
        "M": int(M),
        "dt": float(dt),
        "eps": 0.0,
    }
    return TrajectoryDataset(qs, ps, float(dt), prov)


def add_noise(ds: TrajectoryDataset, eps: float, seed: int = 0, reproject: bool = False) -> TrajectoryDataset:
    """Add eps * N(0, 1) to every target coordinate; initial conditions stay clean.

    With ``reproject`` the noisy chain targets are mapped back onto T*S^2
    (normalize q_i, project p_i); by default they are left as they are.
    """
    if eps < 0:
        raise ValueError("noise level must be non-negative")
    prov = dict(ds.provenance, eps=float(eps), noise_seed=int(seed), reproject=bool(reproject))
    if eps == 0:
        return replace(ds, provenance=prov)
    rng = np.random.default_rng(seed)
    q = ds.q.copy()
    p = ds.p.copy()
    q[:, 1:] += eps * rng.standard_normal(q[:, 1:].shape)
    p[:, 1:] += eps * rng.standard_normal(p[:, 1:].shape)
    if reproject:
        if q.ndim < 4 or q.shape[-1] != 3:
            raise ValueError("reprojection only applies to chain datasets")
        q[:, 1:] /= np.linalg.norm(q[:, 1:], axis=-1, keepdims=True)
        p[:, 1:] -= q[:, 1:] * np.sum(q[:, 1:] * p[:, 1:], axis=-1, keepdims=True)
    return replace(ds, q=q, p=p, provenance=prov)


# loss -----------------------------------------------------------------------

def _sqnorm_sum(x):
    return dc.sum(x * x)


def rollout_loss(params: ModelParams, q0, p0, targets_q, targets_p, integrator: str, dt: float,
                 model: HamiltonianModel | None = None):
    """Mean squared rollout mismatch: 1/(2n N M) sum_i sum_j |y_hat_i^j - y_i^j|^2.

    ``targets_*`` have shape (B, M, ...) and include the initial states at
    j = 1, whose (zero) contribution is kept in the normalization.
    Returns (loss, predicted states).
    """
    model = model or HamiltonianModel(params)
    B, M = np.shape(targets_q)[:2]
    states = rollout_states(integrator, model, (q0, p0), dt, M)
    total = 0.0
    for j in range(1, M):
        qh, ph = states[j]
        total = total + _sqnorm_sum(qh - targets_q[:, j]) + _sqnorm_sum(ph - targets_p[:, j])
    width = 2 * int(np.prod(np.shape(targets_q)[2:]))
    return total * (1.0 / (width * B * M)), states


def regularization_term(states, G: Callable, mu: float, index_set: Sequence[int] | None = None):
    """mu * mean_k sum_{j in I} (G(y_hat_k^j) - G(x_k))^2 with 1-based indices I."""
    if mu < 0:
        raise ValueError("mu must be non-negative")
    if mu == 0:
        return 0.0
    M = len(states)
    idx = range(2, M + 1) if index_set is None else index_set
    q0, p0 = states[0]
    g0 = G(q0, p0)
    B = np.shape(dc.value(q0))[0]
    total = 0.0
    for j in idx:
        if not 1 <= j <= M:
            raise ValueError(f"regularization index {j} outside 1..{M}")
        qh, ph = states[j - 1]
        d = G(qh, ph) - g0
        total = total + dc.sum(d * d)
    return total * (mu / B)


# optimizer ------------------------------------------------------------------

@dataclass(frozen=True)
class AdamState:
    t: int
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def fresh(cls, size: int) -> "AdamState":
        return cls(0, np.zeros(size), np.zeros(size))


def adam_step(theta, grad, state: AdamState, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; returns (theta', state')."""
    theta = np.asarray(theta, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if theta.shape != grad.shape or state.m.shape != theta.shape:
        raise ValueError("parameter, gradient and optimizer state shapes differ")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    return theta - lr * m_hat / (np.sqrt(v_hat) + eps), AdamState(t, m, v)


# training loop ---------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    integrator: str = "rk4"
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    mu: float = 0.0
    first_integral: str | None = None
    reg_indices: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        get_stepper(self.integrator)
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.mu < 0:
            raise ValueError("mu must be non-negative")
        if self.mu > 0 and self.first_integral is None:
            raise ValueError("regularization needs a first integral id")
        if self.first_integral is not None:
            first_integral(self.first_integral)


@dataclass
class TrainResult:
    params: ModelParams
    history: list
    stage_violation: float = 0.0

    @property
    def final_loss(self) -> float:
        return self.history[-1] if self.history else float("nan")


class _ProbedModel(HamiltonianModel):
    """Model that records the manifold violation of every evaluation point."""

    def __post_init__(self):
        super().__post_init__()
        self.worst = 0.0

    def gradients(self, q, p):
        if self.manifold == "sphere":
            self.worst = max(self.worst, manifold_violation(dc.value(q), dc.value(p)))
        return super().gradients(q, p)


def batch_loss_and_grad(params: ModelParams, ds: TrajectoryDataset, idx, cfg: TrainConfig,
                        probe: bool = False):
    """Loss value, flat parameter gradient and worst stage violation on one batch."""
    nodes = params.as_nodes()
    model = _ProbedModel(nodes) if probe else HamiltonianModel(nodes)
    tq, tp = ds.q[idx], ds.p[idx]
    loss, states = rollout_loss(nodes, tq[:, 0], tp[:, 0], tq, tp, cfg.integrator, ds.dt, model)
    if cfg.mu > 0:
        G = first_integral(cfg.first_integral)
        loss = loss + regularization_term(states, G, cfg.mu, cfg.reg_indices)
    grad = dc.loss_param_gradient(loss, nodes)
    return float(np.sum(dc.value(loss))), grad, (model.worst if probe else 0.0)


def train(ds: TrajectoryDataset, cfg: TrainConfig, params: ModelParams, probe: bool = False,
          callback: Callable | None = None) -> TrainResult:
    """Minimize the rollout loss with Adam over shuffled whole-trajectory batches.

    History holds the size-weighted mean batch loss of every epoch. With
    ``probe`` the worst manifold violation over all points where H_theta was
    evaluated is recorded.
    """
    if cfg.integrator not in COMPATIBLE[params.variant]:
        raise ValueError(f"integrator {cfg.integrator!r} cannot train a {params.variant} model")
    if cfg.batch_size > ds.N:
        raise ValueError(f"batch size {cfg.batch_size} exceeds dataset size {ds.N}")
    rng = np.random.default_rng(cfg.seed)
    theta = params.flatten()
    state = AdamState.fresh(theta.size)
    history = []
    worst = 0.0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(ds.N)
        total = 0.0
        for b, start in enumerate(range(0, ds.N, cfg.batch_size)):
            idx = perm[start:start + cfg.batch_size]
            try:
                loss, grad, viol = batch_loss_and_grad(params, ds, idx, cfg, probe)
            except IntegrationError as exc:
                raise TrainingDivergence(epoch, b, float("nan"), str(exc)) from exc
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise TrainingDivergence(epoch, b, loss)
            worst = max(worst, viol)
            total += loss * len(idx)
            theta, state = adam_step(theta, grad, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps_adam)
            params = params.unflatten(theta)
        history.append(total / ds.N)
        log.debug("epoch %d loss %.6e", epoch, history[-1])
        if callback is not None:
            callback(epoch, history[-1], params)
    return TrainResult(params, history, worst)
