import numpy as np
import pytest

from hamlearn import integrators as I
from hamlearn.geometry import SE3AlgebraElement, SpherePhasePoint, lift_f_of_h, manifold_violation
from hamlearn.systems import UnconstrainedSystem, pendulum_k1, pendulum_k2, quartic_system

E1, E2, E3 = np.eye(3)


def oscillator():
    # H = p^2/2 + q^2/2
    return UnconstrainedSystem("osc", np.eye(1), np.ones(1), np.zeros(1))


def zero_lift(y):
    return SE3AlgebraElement(np.zeros(3), np.zeros(3))


def test_euler_examples():
    assert I.step_explicit_euler(lambda x: np.zeros_like(x), np.array([2.0]), 0.3) == 2.0
    assert I.step_explicit_euler(lambda x: x, np.array([1.0]), 0.1) == pytest.approx(1.1, abs=1e-15)


def test_rk4_examples():
    assert I.step_rk4(lambda x: np.zeros_like(x), np.array([2.0]), 0.3) == 2.0
    h = 0.1
    taylor = 1 + h + h**2 / 2 + h**3 / 6 + h**4 / 24
    assert I.step_rk4(lambda x: x, np.array([1.0]), h) == pytest.approx(taylor, abs=1e-15)


def test_stormer_verlet_examples():
    q, p = I.step_stormer_verlet(lambda q: np.zeros_like(q), np.eye(2), (np.array([1.0, 2.0]), np.array([0.5, -1.0])), 0.2)
    assert np.allclose(q, [1.1, 1.8]) and np.allclose(p, [0.5, -1.0])
    q, p = I.step_stormer_verlet(lambda q: q, np.eye(1), (np.array([1.0]), np.array([0.0])), 0.1)
    assert q[0] == pytest.approx(0.995, abs=1e-15)
    assert p[0] == pytest.approx(-0.09975, abs=1e-15)


def test_stormer_verlet_bounded_energy_error():
    s = quartic_system()
    q, p = np.array([[0.8, -0.3]]), np.array([[0.2, 0.5]])
    H0 = s.hamiltonian(q, p)[0]
    n = 100_000
    err = np.empty(n)
    step = I.get_stepper("sv")
    for j in range(n):
        q, p = step.step(s, (q, p), 0.01)
        err[j] = abs(s.hamiltonian(q, p)[0] - H0)
    # O(h^2) oscillation without secular growth: the last tenth looks like the first
    assert err.max() <= 1e-3
    first, last = err[: n // 10].max(), err[-n // 10:].max()
    assert last <= 1.1 * first


def test_lie_steps_with_zero_lift():
    y = SpherePhasePoint(E1, 0.5 * E2)
    for fn in (I.step_lie_euler, I.step_cf4):
        out = fn(zero_lift, y, 0.3)
        assert np.array_equal(out.q, y.q) and np.array_equal(out.p, y.p)


@pytest.mark.parametrize("h", [0.1, 0.5, 1.0])
def test_lie_euler_keeps_unit_norm(h):
    s = pendulum_k1()
    q, p = s.sample(np.random.default_rng(0), 20)
    out = I.STEPPERS["le"].step(s, (q, p), h)
    assert np.max(np.abs(np.linalg.norm(out[0], axis=-1) - 1)) <= 1e-14


def test_lie_steps_reject_off_manifold():
    with pytest.raises(I.IntegrationError, match="T\\*S\\^2"):
        I.step_lie_euler(zero_lift, SpherePhasePoint(1.1 * E1, E2), 0.1)
    with pytest.raises(I.IntegrationError):
        I.step_cf4(zero_lift, SpherePhasePoint(E1, E1), 0.1)


def test_cf4_tableau_on_commuting_field():
    # a constant lift makes every exponential commute: one step is exp(h K)
    K = SE3AlgebraElement(np.array([0.1, -0.4, 0.3]), np.array([0.2, 0.0, -0.5]))
    y = SpherePhasePoint(E1, E2)
    a = I.step_cf4(lambda _: K, y, 0.7)
    b = I.step_lie_euler(lambda _: K, y, 0.7)
    assert np.allclose(a.q, b.q, atol=1e-15) and np.allclose(a.p, b.p, atol=1e-15)


def test_steppers_deterministic():
    s = pendulum_k2()
    x0 = s.sample(np.random.default_rng(4), 3)
    for name in ("ee", "rk4", "le", "cf4"):
        a = I.rollout(name, s, x0, 0.05, 6)
        b = I.rollout(name, s, x0, 0.05, 6)
        assert np.array_equal(a.q, b.q) and np.array_equal(a.p, b.p)


def test_stepper_registry():
    assert {k: v.order for k, v in I.STEPPERS.items()} == {"ee": 1, "rk4": 4, "sv": 2, "le": 1, "cf4": 4}
    with pytest.raises(KeyError, match="unknown integrator"):
        I.get_stepper("rk45")
    with pytest.raises(I.IntegrationError):
        I.STEPPERS["sv"].step(pendulum_k1(), pendulum_k1().sample(np.random.default_rng(0), 1), 0.1)
    with pytest.raises(I.IntegrationError):
        I.STEPPERS["le"].step(quartic_system(), (np.zeros((1, 2)), np.zeros((1, 2))), 0.1)


def test_rk4_pendulum_drifts():
    s = pendulum_k1()
    tr = I.rollout("rk4", s, (E1[None, None], 0.5 * E2[None, None]), 0.05, 1001)
    assert manifold_violation(tr.q, tr.p) > 1e-12


def test_rollout_examples():
    s = quartic_system()
    x0 = s.sample(np.random.default_rng(1), 4)
    tr = I.rollout("rk4", s, x0, 0.1, 2)
    q1, p1 = I.STEPPERS["rk4"].step(s, x0, 0.1)
    assert np.array_equal(tr.q[1], q1) and np.array_equal(tr.p[1], p1)
    assert np.array_equal(tr.q[0], x0[0])
    assert np.allclose(tr.times, [0.0, 0.1])
    free = UnconstrainedSystem("free", np.eye(2), np.zeros(2), np.zeros(2))
    tr = I.rollout("ee", free, (x0[0], np.zeros((4, 2))), 0.1, 5)
    assert np.all(tr.q == x0[0])


def test_rollout_rejects_bad_arguments():
    s = quartic_system()
    x0 = s.sample(np.random.default_rng(1), 1)
    with pytest.raises(ValueError):
        I.rollout("rk4", s, x0, 0.1, 1)
    with pytest.raises(ValueError):
        I.rollout("rk4", s, x0, 0.0, 3)


def test_rollout_reports_step_index():
    # q grows to -1e250 after two Euler steps, so the force overflows at step 3
    s = UnconstrainedSystem("stiff", np.eye(1), np.array([1e200]), np.zeros(1))
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(I.IntegrationError, match="step 3"):
        I.rollout("ee", s, (np.array([[1e50]]), np.array([[0.0]])), 1.0, 5)


def test_rk4_rollout_matches_reference_at_fourth_order():
    s = quartic_system()
    x0 = s.sample(np.random.default_rng(2), 5)
    errs = []
    for h in (0.1, 0.05):
        M = int(round(1.0 / h)) + 1
        tr = I.rollout("rk4", s, x0, h, M)
        ref = I.system_flow(s, x0[0], x0[1], tr.times, 1e-13, 1e-13)
        errs.append(max(np.max(np.abs(tr.q - ref[0])), np.max(np.abs(tr.p - ref[1]))))
    assert 3.5 <= np.log2(errs[0] / errs[1]) <= 4.5


def test_reference_exponential():
    out = I.integrate_reference(lambda x: x, np.array([1.0]), [0.0, 0.5, 1.0])
    assert out[-1, 0] == pytest.approx(np.e, abs=1e-9)
    assert out[1, 0] == pytest.approx(np.exp(0.5), abs=1e-9)


def test_reference_oscillator_period():
    s = oscillator()
    q, p = I.system_flow(s, np.array([[1.0]]), np.array([[0.0]]), [0.0, np.pi, 2 * np.pi])
    assert abs(q[-1, 0, 0] - 1) <= 1e-8 and abs(p[-1, 0, 0]) <= 1e-8
    assert abs(q[1, 0, 0] + 1) <= 1e-8


def test_reference_dense_output_matches_closed_form():
    s = oscillator()
    t = np.linspace(0, 3, 37)
    q, p = I.system_flow(s, np.array([[1.0]]), np.array([[0.0]]), t)
    assert np.max(np.abs(q[:, 0, 0] - np.cos(t))) <= 1e-8
    assert np.max(np.abs(p[:, 0, 0] + np.sin(t))) <= 1e-8


def test_reference_conserves_pendulum_energy():
    s = pendulum_k2()
    q0, p0 = s.sample(np.random.default_rng(3), 4)
    q, p = I.system_flow(s, q0, p0, [0.0, 1.0])
    assert np.max(np.abs(s.hamiltonian(q[-1], p[-1]) - s.hamiltonian(q0, p0))) <= 1e-8


def test_batched_reference_matches_individual_runs():
    s = pendulum_k1()
    q0, p0 = s.sample(np.random.default_rng(5), 3)
    t = [0.0, 0.4, 0.8]
    qb, pb = I.system_flow(s, q0, p0, t)
    for i in range(3):
        qi, pi = I.system_flow(s, q0[i:i + 1], p0[i:i + 1], t)
        assert np.max(np.abs(qb[:, i] - qi[:, 0])) <= 1e-9
        assert np.max(np.abs(pb[:, i] - pi[:, 0])) <= 1e-9


def test_reference_errors():
    with pytest.raises(ValueError):
        I.integrate_reference(lambda x: x, np.array([1.0]), [0.0, 1.0], rtol=0.0)
    with pytest.raises(ValueError):
        I.integrate_reference(lambda x: x, np.array([1.0]), [1.0, 0.0])
    with pytest.raises(I.IntegrationError, match="underflow|non-finite"):
        I.integrate_reference(lambda x: x**2, np.array([1.0]), [0.0, 2.0])
    with pytest.raises(I.IntegrationError, match="row 1"):
        I.integrate_reference(lambda x: x**2, np.array([[0.1], [1.0]]), [0.0, 2.0], batched=True)


def test_trajectory_requires_uniform_times():
    with pytest.raises(ValueError):
        I.Trajectory(np.array([0.0, 0.1, 0.3]), np.zeros((3, 1)), np.zeros((3, 1)))


def test_lift_based_step_matches_stepper():
    s = pendulum_k1()
    q, p = s.sample(np.random.default_rng(6), 2)

    def lift(y):
        gq, gp = s.gradients(y.q, y.p)
        return lift_f_of_h(gq, gp, y)

    y = I.step_cf4(lift, SpherePhasePoint(q, p), 0.05)
    q2, p2 = I.STEPPERS["cf4"].step(s, (q, p), 0.05)
    assert np.array_equal(y.q, q2) and np.array_equal(y.p, p2)
