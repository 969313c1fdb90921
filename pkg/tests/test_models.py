from pathlib import Path

import numpy as np
import pytest

from hamlearn import diffcore as dc
from hamlearn import models as Mo
from hamlearn.geometry import random_sphere_points
from hamlearn.systems import pendulum_k2, pendulum_mass_matrix

FIXTURES = Path(__file__).parent / "fixtures"


def straight_line_potential(layers, q):
    a = q
    for W, c in layers[:-1]:
        a = np.tanh(W @ a + c)
    W, c = layers[-1]
    return W @ a + c


def test_zero_weights_give_zero_potential():
    p = Mo.init_model("separable", 3, (4, 5), seed=0)
    zero = p.unflatten(np.zeros(p.n_params))
    q = np.random.default_rng(0).standard_normal((7, 3))
    assert not np.any(dc.value(Mo.potential_forward(zero.layers, q)))


def test_linear_potential():
    layers = ((np.array([[1.0, 2.0]]), np.zeros(1)),)
    V = Mo.potential_forward(layers, np.array([[0.5, -1.5]]))
    assert V[0, 0] == 0.5 - 3.0


def test_potential_matches_straight_line_version():
    params = Mo.init_model("separable", 3, (8, 6), seed=2)
    rng = np.random.default_rng(1)
    for q in rng.standard_normal((10, 3)):
        V = Mo.potential_forward(params.layers, q[None])[0]
        assert np.allclose(V, straight_line_potential(params.layers, q), rtol=0, atol=1e-14)


def test_potential_gradient_matches_fd():
    params = Mo.init_model("separable", 3, (8, 6), seed=3)
    q = np.array([0.2, -0.7, 0.4])
    _, g = Mo.potential_with_grad(params.layers, q[None])
    f = lambda x: float(straight_line_potential(params.layers, x)[0])  # noqa: E731
    assert dc.finite_difference_check(f, q, g[0]) <= 1e-8


def test_kinetic_separable_examples():
    p = np.array([[3.0, -4.0]])
    assert Mo.kinetic_separable(np.eye(2), p)[0, 0] == 12.5
    assert Mo.kinetic_separable(np.array([[2.0, 0.0], [0.0, 1.0]]), np.array([[1.0, 0.0]]))[0, 0] == 2.0
    rng = np.random.default_rng(0)
    A = rng.standard_normal((4, 4))
    assert np.all(Mo.kinetic_separable(A, rng.standard_normal((200, 4))) >= 0)


def test_chain_scalar_mass_examples():
    assert np.array_equal(Mo.chain_scalar_mass(np.zeros((3, 3)), np.ones(3)), np.eye(3))
    assert np.array_equal(Mo.chain_scalar_mass(np.eye(3), -5 * np.ones(3)), np.eye(3))
    rng = np.random.default_rng(1)
    A, b = rng.standard_normal((3, 3)), rng.standard_normal(3)
    m = Mo.chain_scalar_mass(A, b)
    assert np.allclose(m - A.T @ A, np.diag(np.maximum(0, b)), atol=1e-15)
    assert np.array_equal(m, m.T)


def test_chain_mass_matrix_matches_true_system_layout():
    s = pendulum_k2()
    q, _ = random_sphere_points(np.random.default_rng(2), 2)
    M = Mo.chain_mass_matrix(s.scalar_mass, q[None])[0]
    assert np.allclose(M, pendulum_mass_matrix(s, q), atol=1e-15)


def test_chain_k1_unit_model():
    params = Mo.ModelParams("chain", np.eye(1), np.zeros(1), ((np.zeros((1, 3)), np.zeros(1)),))
    q, p = random_sphere_points(np.random.default_rng(3), 1)
    r = Mo.hamiltonian_model_eval(params, np.concatenate([q.ravel(), p.ravel()]))
    assert r.value == pytest.approx(0.5 * np.sum(p**2), abs=1e-15)
    assert np.allclose(r.grad[3:], p.ravel(), atol=1e-15)


def test_chain_kinetic_q_gradient_matches_fd():
    rng = np.random.default_rng(4)
    base = Mo.init_model("chain", 2, (), seed=0)
    layers = ((np.zeros((1, 6)), np.zeros(1)),)
    for _ in range(5):
        params = Mo.ModelParams("chain", rng.standard_normal((2, 2)) + 2 * np.eye(2), rng.random(2), layers)
        assert base.n_params == params.n_params
        q, p = random_sphere_points(rng, 2)
        x = np.concatenate([q.ravel(), p.ravel()])
        r = Mo.hamiltonian_model_eval(params, x)
        f = lambda y: Mo.hamiltonian_model_eval(params, y).value  # noqa: E731
        assert dc.finite_difference_check(f, x, r.grad) <= 1e-6


@pytest.mark.parametrize("variant,size", [("separable", 2), ("chain", 2)])
def test_input_gradients_over_random_draws(variant, size):
    rng = np.random.default_rng(5)
    base = Mo.init_model(variant, size, (6, 4), seed=0)
    worst = 0.0
    # perturb around the initial model; fully random A can make the mass
    # matrix so ill-conditioned that central differences lose all accuracy
    for _ in range(100):
        params = base.unflatten(base.flatten() + rng.uniform(-0.5, 0.5, base.n_params))
        if variant == "chain":
            q, p = random_sphere_points(rng, size)
            x = np.concatenate([q.ravel(), p.ravel()])
        else:
            x = rng.uniform(-1, 1, 2 * size)
        r = Mo.hamiltonian_model_eval(params, x)
        f = lambda y: Mo.hamiltonian_model_eval(params, y).value  # noqa: E731
        worst = max(worst, dc.finite_difference_check(f, x, r.grad))
    assert worst <= 1e-6


def test_true_chain_params_reproduce_system():
    s = pendulum_k2()
    params = Mo.true_chain_params(s.scalar_mass, s.potential_coeffs)
    model = Mo.HamiltonianModel(params)
    q, p = s.sample(np.random.default_rng(6), 5)
    assert np.allclose(model.hamiltonian(q, p), s.hamiltonian(q, p), rtol=1e-14, atol=1e-13)
    for a, b in zip(model.gradients(q, p), s.gradients(q, p)):
        assert np.allclose(a, b, rtol=1e-13, atol=1e-13)


def test_singular_mass_reports_pivot():
    A = np.array([[1.0, 0.0], [0.0, 0.0]])
    params = Mo.ModelParams("chain", A, np.zeros(2), ((np.zeros((1, 6)), np.zeros(1)),))
    q, p = random_sphere_points(np.random.default_rng(7), 2)
    with pytest.raises(Mo.MassMatrixError, match="pivot 1"):
        Mo.hamiltonian_model_eval(params, np.concatenate([q.ravel(), p.ravel()]))


def test_evaluation_is_pure():
    params = Mo.init_model("chain", 2, (5,), seed=1)
    before = params.flatten().copy()
    q, p = random_sphere_points(np.random.default_rng(8), 2)
    x = np.concatenate([q.ravel(), p.ravel()])
    a = Mo.hamiltonian_model_eval(params, x)
    b = Mo.hamiltonian_model_eval(params, x)
    assert a.value == b.value and np.array_equal(a.grad, b.grad)
    assert np.array_equal(params.flatten(), before)


def test_param_count_and_flat_round_trip():
    params = Mo.init_model("chain", 2, (5, 4), seed=0)
    # A 2x2, b 2, (6->5), (5->4), (4->1)
    assert params.n_params == 4 + 2 + (30 + 5) + (20 + 4) + (4 + 1)
    v = params.flatten()
    assert np.array_equal(params.unflatten(v).flatten(), v)
    with pytest.raises(ValueError):
        params.unflatten(v[:-1])


def test_init_defaults():
    params = Mo.init_model("chain", 2, (10,), seed=3)
    assert np.array_equal(params.A, np.eye(2)) and not np.any(params.b)
    W, c = params.layers[0]
    assert np.all(np.abs(W) <= 1 / np.sqrt(6)) and np.all(np.abs(c) <= 1 / np.sqrt(6))
    assert np.array_equal(Mo.init_model("chain", 2, (10,), seed=3).flatten(), params.flatten())


def test_bad_layer_shapes_rejected():
    with pytest.raises(ValueError, match="chain"):
        Mo.ModelParams("separable", np.eye(2), np.zeros(0), ((np.zeros((3, 2)), np.zeros(3)), (np.zeros((1, 4)), np.zeros(1))))
    with pytest.raises(ValueError, match="single output"):
        Mo.ModelParams("separable", np.eye(2), np.zeros(0), ((np.zeros((2, 2)), np.zeros(2)),))
    with pytest.raises(ValueError, match="variant"):
        Mo.init_model("odd", 2, (), seed=0)


def test_serialization_round_trip_is_bit_exact():
    rng = np.random.default_rng(9)
    for variant in ("separable", "chain"):
        params = Mo.init_model(variant, 2, (7, 3), seed=4)
        params = params.unflatten(rng.standard_normal(params.n_params) * 10.0 ** rng.integers(-300, 300, params.n_params))
        back = Mo.deserialize_model(Mo.serialize_model(params))
        assert back.variant == variant
        assert np.array_equal(back.flatten(), params.flatten())


def test_truncated_file_fails_checksum():
    data = Mo.serialize_model(Mo.init_model("separable", 2, (3,), seed=0))
    with pytest.raises(Mo.ChecksumError):
        Mo.deserialize_model(data[: len(data) // 2])
    tampered = data.replace(b'"ridge": 0', b'"ridge": 1')
    with pytest.raises(Mo.ChecksumError):
        Mo.deserialize_model(tampered)


def test_old_version_file_is_rejected():
    with pytest.raises(Mo.VersionError, match="version 0"):
        Mo.deserialize_model((FIXTURES / "model_v0.txt").read_bytes())
