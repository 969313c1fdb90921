"""Error measures E1 and E2, constraint drift, and the sweep harness."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .geometry import manifold_violation
from .integrators import IntegrationError, system_flow
from .models import HamiltonianModel, ModelParams, init_model
from .systems import get_system
from .training import TrainConfig, TrainingDivergence, add_noise, generate_dataset, train

log = logging.getLogger(__name__)


def _as_system(s):
    return HamiltonianModel(s) if isinstance(s, ModelParams) else s


def _hamiltonian_fn(h):
    h = _as_system(h)
    return h.hamiltonian if hasattr(h, "hamiltonian") else h


def sample_points(system, count: int, seed: int):
    """Initial conditions drawn from the system's own sampler."""
    return system.sample(np.random.default_rng(seed), count)


def flows(true_system, learned, z, times, rtol: float = 1e-10, atol: float = 1e-12):
    """(u, v): reference flows of both systems from the shared points z = (q, p)."""
    u, v = [], []
    for s, out in ((true_system, u), (_as_system(learned), v)):
        try:
            out.extend(system_flow(s, z[0], z[1], times, rtol, atol))
        except IntegrationError as exc:
            name = "true" if s is true_system else "learned"
            raise IntegrationError(f"{name} system: {exc}") from exc
    return u, v


def e1_from_flows(u, v) -> float:
    """mean_{i,j} |u_i^j - v_i^j|^2 / 2n, with time on axis 0 and batch on axis 1."""
    (uq, up), (vq, vp) = u, v
    per_point = (np.sum((uq - vq).reshape(uq.shape[:2] + (-1,)) ** 2, axis=-1)
                 + np.sum((up - vp).reshape(up.shape[:2] + (-1,)) ** 2, axis=-1))
    width = 2 * int(np.prod(uq.shape[2:]))
    return float(np.mean(per_point) / width)


def metric_e1(true_system, learned, n_test: int = 100, m_test: int = 20, t_test: float = 1.0,
              seed: int = 0, rtol: float = 1e-10, atol: float = 1e-12) -> float:
    """E1 over n_test trajectories sampled at m_test uniform times in [0, t_test].

    Both systems are integrated with the same DOPRI5 settings from shared
    initial conditions; either argument may be a system or a ModelParams.
    """
    if n_test < 1 or m_test < 1:
        raise ValueError("need at least one test trajectory and one time point")
    z = sample_points(true_system, n_test, seed)
    times = np.linspace(0.0, t_test, m_test)
    return e1_from_flows(*flows(true_system, learned, z, times, rtol, atol))


def metric_e2(true_h, learned_h, z) -> float:
    """E2 = mean_i |d_i - mean(d)| with d_i = H(z_i) - H_theta(z_i)."""
    q, p = z
    if np.shape(q)[0] < 2:
        raise ValueError("E2 needs at least two sample points")
    d = np.asarray(_hamiltonian_fn(true_h)(q, p), dtype=float) - np.asarray(_hamiltonian_fn(learned_h)(q, p), dtype=float)
    return float(np.mean(np.abs(d - np.mean(d))))


def constraint_drift(q, p) -> float:
    """max over points and components of max(| |q_i| - 1 |, |q_i . p_i|)."""
    return manifold_violation(q, p)


@dataclass
class EvalReport:
    e1: float | None
    e2: float | None
    drift: float | None
    n_test: int
    m_test: int
    t_test: float
    seed: int
    rtol: float
    atol: float

    def as_dict(self) -> dict:
        return asdict(self)


def evaluate(true_system, params: ModelParams, n_test: int = 100, m_test: int = 20, t_test: float = 1.0,
             seed: int = 0, rtol: float = 1e-10, atol: float = 1e-12,
             metrics=("e1", "e2", "drift")) -> EvalReport:
    """E1 on fresh test trajectories, E2 on separate fresh samples, and the
    constraint drift of the learned flow (chain systems only)."""
    unknown = set(metrics) - {"e1", "e2", "drift"}
    if unknown:
        raise ValueError(f"unknown metrics {sorted(unknown)}")
    s1, s2 = np.random.SeedSequence(seed).spawn(2)
    e1 = e2 = drift = None
    if "e1" in metrics or "drift" in metrics:
        z = sample_points(true_system, n_test, s1.generate_state(1)[0])
        times = np.linspace(0.0, t_test, m_test)
        u, v = flows(true_system, params, z, times, rtol, atol)
        if "e1" in metrics:
            e1 = e1_from_flows(u, v)
        if "drift" in metrics and getattr(true_system, "manifold", "flat") == "sphere":
            drift = constraint_drift(*v)
    if "e2" in metrics:
        e2 = metric_e2(true_system, params, sample_points(true_system, n_test, s2.generate_state(1)[0]))
    return EvalReport(e1, e2, drift, n_test, m_test, t_test, int(seed), rtol, atol)


# sweep ----------------------------------------------------------------------

@dataclass(frozen=True)
class SweepGrid:
    """Cells (N, M, eps, integrator) plus the settings shared by every run."""

    N: tuple = (50, 500, 1000, 1500)
    M: tuple = (2, 3, 5)
    eps: tuple = (0.0, 0.001, 0.01, 0.1)
    integrators: tuple = ("ee", "le", "rk4", "cf4")
    system: str = "pendulum-k1"
    t_final: float = 0.1
    hidden: tuple = (100, 100, 100)
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    n_test: int = 100
    m_test: int = 20
    t_test: float = 1.0

    def __post_init__(self):
        for name in ("N", "M", "eps", "integrators"):
            if len(getattr(self, name)) == 0:
                raise ValueError(f"sweep grid has no {name} values")

    def cells(self):
        return [(n, m, e, i) for n in self.N for m in self.M for e in self.eps for i in self.integrators]


@dataclass
class SweepRecord:
    N: int
    M: int
    eps: float
    integrator: str
    repeat: int
    e1: float = float("nan")
    e2: float = float("nan")
    final_loss: float = float("nan")
    seed: int = 0
    status: str = "ok"

    @property
    def key(self):
        return (self.N, self.M, self.eps, self.integrator, self.repeat)


RESULT_FIELDS = ("N", "M", "eps", "integrator", "repeat", "e1", "e2", "final_loss", "seed", "status")


def run_seeds(base_seed: int, N: int, M: int, eps: float, repeat: int) -> dict:
    """Seeds for one run. The integrator is deliberately not an input, so all
    integrators of a cell see the same data, noise, initial weights, shuffles
    and test points."""
    ss = np.random.SeedSequence(base_seed, spawn_key=(int(N), int(M), int(round(eps * 1e12)), int(repeat)))
    names = ("data", "noise", "init", "shuffle", "test")
    return {k: int(s.generate_state(1)[0]) for k, s in zip(names, ss.spawn(len(names)))}


def run_one(grid: SweepGrid, N: int, M: int, eps: float, integrator: str, repeat: int,
            base_seed: int) -> SweepRecord:
    seeds = run_seeds(base_seed, N, M, eps, repeat)
    rec = SweepRecord(N, M, eps, integrator, repeat, seed=seeds["data"])
    system = get_system(grid.system)
    try:
        dt = grid.t_final / (M - 1)
        ds = generate_dataset(system, N, M, dt, seed=seeds["data"], system_id=grid.system)
        ds = add_noise(ds, eps, seeds["noise"])
        variant = "chain" if system.manifold == "sphere" else "separable"
        size = system.k if variant == "chain" else system.n
        params = init_model(variant, size, grid.hidden, seed=seeds["init"])
        cfg = TrainConfig(integrator=integrator, epochs=grid.epochs, batch_size=min(grid.batch_size, N),
                          lr=grid.lr, seed=seeds["shuffle"])
        result = train(ds, cfg, params)
        rep = evaluate(system, result.params, grid.n_test, grid.m_test, grid.t_test, seed=seeds["test"],
                       metrics=("e1", "e2"))
        rec.e1, rec.e2, rec.final_loss = rep.e1, rep.e2, result.final_loss
    except (IntegrationError, TrainingDivergence, np.linalg.LinAlgError, ValueError) as exc:
        rec.status = f"failed: {type(exc).__name__}: {exc}".replace(",", ";").replace("\n", " ")
        log.warning("run %s failed: %s", rec.key, exc)
    return rec


def _run_task(args):
    return run_one(*args)


def run_sweep(grid: SweepGrid, repeats: int = 5, base_seed: int = 0, jobs: int = 1,
              progress=None) -> list[SweepRecord]:
    """Every cell `repeats` times; records come back sorted by (cell, repeat)."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    tasks = [(grid, n, m, e, i, r, base_seed) for (n, m, e, i) in grid.cells() for r in range(1, repeats + 1)]
    records = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for rec in pool.map(_run_task, tasks):
                records.append(rec)
                if progress:
                    progress(rec)
    else:
        for t in tasks:
            records.append(_run_task(t))
            if progress:
                progress(records[-1])
    records.sort(key=lambda r: r.key)
    return records


def geometric_mean(values) -> float:
    v = np.asarray([x for x in values if np.isfinite(x)], dtype=float)
    if v.size == 0:
        return float("nan")
    if np.any(v <= 0):
        return 0.0 if np.all(v >= 0) else float("nan")
    return float(np.exp(np.mean(np.log(v))))


def _median(values) -> float:
    v = [x for x in values if np.isfinite(x)]
    return float(np.median(v)) if v else float("nan")


AGG_STATS = ("median_e1", "geomean_e1", "median_e2", "geomean_e2", "geomean_loss")


def aggregate(records, keys=("N", "M", "eps", "integrator")) -> list[dict]:
    """Medians and geometric means of successful runs grouped by ``keys``."""
    groups: dict = {}
    for r in records:
        if r.status != "ok":
            continue
        groups.setdefault(tuple(getattr(r, k) for k in keys), []).append(r)
    rows = []
    for g in sorted(groups):
        rs = groups[g]
        row = dict(zip(keys, g))
        row.update(
            median_e1=_median([r.e1 for r in rs]),
            geomean_e1=geometric_mean([r.e1 for r in rs]),
            median_e2=_median([r.e2 for r in rs]),
            geomean_e2=geometric_mean([r.e2 for r in rs]),
            geomean_loss=geometric_mean([r.final_loss for r in rs]),
            runs=len(rs),
        )
        rows.append(row)
    return rows


ORDER = {"ee": 1, "le": 1, "sv": 2, "rk4": 4, "cf4": 4}


def order_geomeans(records, stat: str = "e1") -> dict:
    """Geometric mean of a metric over all successful runs per integrator order."""
    out: dict = {}
    for order in sorted(set(ORDER.values())):
        vals = [getattr(r, stat) for r in records if r.status == "ok" and ORDER[r.integrator] == order]
        if vals:
            out[order] = geometric_mean(vals)
    return out


def fmt_float(x) -> str:
    if x is None:
        return ""
    x = float(x)
    return repr(x) if math.isfinite(x) else str(x)
