import numpy as np
import pytest

from hamlearn import evaluation as E
from hamlearn.integrators import rollout
from hamlearn.models import init_model, true_chain_params
from hamlearn.systems import pendulum_k1, pendulum_k2, quartic_system


def true_params(s):
    return true_chain_params(s.scalar_mass, s.potential_coeffs)


@pytest.mark.parametrize("factory", [pendulum_k1, pendulum_k2])
def test_e1_of_true_model_vanishes(factory):
    s = factory()
    assert E.metric_e1(s, true_params(s), n_test=10, m_test=5, seed=1) <= 1e-16


def test_e1_is_symmetric():
    s = quartic_system()
    learned = init_model("separable", 2, (4,), seed=0)
    z = E.sample_points(s, 6, 2)
    t = np.linspace(0, 1, 5)
    u, v = E.flows(s, learned, z, t)
    assert E.e1_from_flows(u, v) == E.e1_from_flows(v, u) > 0


def test_e1_normalization():
    # one point, one time, difference (1, 0, 0, 0) in R^4 -> 1 / 4
    u = (np.zeros((1, 1, 2)), np.zeros((1, 1, 2)))
    v = (np.array([[[1.0, 0.0]]]), np.zeros((1, 1, 2)))
    assert E.e1_from_flows(u, v) == 0.25


def test_e2_identities():
    s = quartic_system()
    z = E.sample_points(s, 50, 3)
    assert E.metric_e2(s, s, z) == 0.0
    for c in (-10.0, 0.5, 1e6):
        assert E.metric_e2(s, lambda q, p, c=c: s.hamiltonian(q, p) + c, z) <= 1e-13
        assert E.metric_e2(lambda q, p, c=c: s.hamiltonian(q, p) + c, s, z) <= 1e-13


def test_e2_matches_brute_force():
    s = quartic_system()
    q, p = E.sample_points(s, 30, 4)
    lam = 0.37
    d = [s.hamiltonian(q[i], p[i]) - (s.hamiltonian(q[i], p[i]) + lam * q[i, 0]) for i in range(30)]
    mean = sum(d) / 30
    expected = sum(abs(x - mean) for x in d) / 30
    got = E.metric_e2(s, lambda a, b: s.hamiltonian(a, b) + lam * a[..., 0], (q, p))
    assert got == pytest.approx(expected, rel=1e-12)
    with pytest.raises(ValueError):
        E.metric_e2(s, s, (q[:1], p[:1]))


def test_constraint_drift():
    s = pendulum_k2()
    q, p = s.sample(np.random.default_rng(0), 20)
    assert E.constraint_drift(q, p) <= 1e-12
    tr = rollout("rk4", pendulum_k1(), pendulum_k1().sample(np.random.default_rng(1), 2), 0.05, 200)
    assert E.constraint_drift(tr.q, tr.p) > 1e-12
    assert E.constraint_drift(np.array([[[0.0, 0.0, 1.5]]]), np.array([[[0.0, 0.2, 0.0]]])) == pytest.approx(0.5)


def test_evaluate_report():
    s = pendulum_k1()
    rep = E.evaluate(s, true_params(s), n_test=5, m_test=4, seed=2)
    assert rep.e1 <= 1e-16 and rep.e2 <= 1e-14 and rep.drift <= 1e-8
    only = E.evaluate(s, true_params(s), n_test=5, m_test=4, seed=2, metrics=("e2",))
    assert only.e1 is None and only.drift is None and only.e2 == rep.e2
    with pytest.raises(ValueError, match="unknown metrics"):
        E.evaluate(s, true_params(s), metrics=("e3",))


def test_geometric_mean():
    assert E.geometric_mean([1e-4, 1e-6]) == pytest.approx(1e-5, rel=1e-12)
    assert E.geometric_mean([2.0, float("nan"), 8.0]) == pytest.approx(4.0)
    assert np.isnan(E.geometric_mean([]))


def tiny_grid(**kw):
    base = dict(N=(6,), M=(2,), eps=(0.0,), integrators=("cf4",), hidden=(4,), epochs=2,
                batch_size=3, n_test=3, m_test=3, t_test=0.2)
    base.update(kw)
    return E.SweepGrid(**base)


def test_one_cell_sweep():
    recs = E.run_sweep(tiny_grid(), repeats=1, base_seed=3)
    assert len(recs) == 1 and recs[0].status == "ok"
    assert recs[0].e1 > 0 and recs[0].final_loss > 0


def test_sweep_rerun_is_identical_and_sorted():
    g = tiny_grid(integrators=("rk4", "cf4"), M=(2, 3))
    a = E.run_sweep(g, repeats=2, base_seed=7)
    b = E.run_sweep(g, repeats=2, base_seed=7)
    assert len(a) == 8
    assert [r.key for r in a] == sorted(r.key for r in a)
    assert [vars(r) for r in a] == [vars(r) for r in b]


def test_sweep_parallel_matches_serial():
    g = tiny_grid(integrators=("ee", "le"))
    assert [vars(r) for r in E.run_sweep(g, 2, 5, jobs=2)] == [vars(r) for r in E.run_sweep(g, 2, 5)]


def test_integrators_of_a_cell_share_seeds():
    assert E.run_seeds(0, 500, 2, 0.01, 1) == E.run_seeds(0, 500, 2, 0.01, 1)
    assert E.run_seeds(0, 500, 2, 0.01, 1) != E.run_seeds(0, 500, 2, 0.01, 2)


def test_failed_runs_are_recorded():
    recs = E.run_sweep(tiny_grid(integrators=("sv", "cf4")), repeats=1, base_seed=0)
    status = {r.integrator: r.status for r in recs}
    assert status["cf4"] == "ok"
    assert status["sv"].startswith("failed") and "," not in status["sv"]
    agg = E.aggregate(recs)
    assert [row["integrator"] for row in agg] == ["cf4"]


def test_full_grid_size():
    assert len(E.SweepGrid().cells()) * 5 == 960
    with pytest.raises(ValueError):
        E.SweepGrid(N=())
    with pytest.raises(ValueError):
        E.run_sweep(tiny_grid(), repeats=0)


def test_aggregates():
    recs = [E.SweepRecord(10, 2, 0.0, i, r, e1=v, e2=v, final_loss=v)
            for i, vals in (("ee", (1e-4, 1e-6)), ("rk4", (1e-8, 1e-6))) for r, v in enumerate(vals, 1)]
    rows = E.aggregate(recs)
    assert [r["integrator"] for r in rows] == ["ee", "rk4"]
    assert rows[0]["geomean_e1"] == pytest.approx(1e-5, rel=1e-12)
    assert rows[1]["median_e1"] == pytest.approx(5.05e-7, rel=1e-12)
    by_order = E.order_geomeans(recs)
    assert by_order[4] < by_order[1]
