"""
Tests for the potential flow: derivatives of Φ, the RK4 integrator and its
accumulators, the training objective and sampling.
"""

import numpy as np
import pytest
from scipy.linalg import expm

from conftest import central_difference
from src import cot_flow
from src.config import FlowConfig, SampleConfig
from src.errors import ConfigError, DivergenceError, NonFiniteError
from src.gaussian_bench import default_spec, gaussian_bench
from src.training import value_and_grad

S = np.array([[1.5, 0.3], [0.3, 0.8]])


def _linear_flow():
    """Marginal potential ½ pᵀSp: the flow is p(1) = exp(−S)·p(0) for α₁ = 1."""
    params = cot_flow.init_phi(n=2, m=0, width=4, seed=0)
    arrays = params.numpy()
    A = np.zeros((3, 3))
    A[1:, :2] = np.linalg.cholesky(S)
    arrays["A"] = A
    return params.with_arrays(arrays)


def _random_phi(rng, n=2, m=1, width=4, seed=0, embed=None):
    params = cot_flow.init_phi(n=n, m=m, width=width, seed=seed, embed=embed)
    return params.with_arrays({k: v + 0.3 * rng.standard_normal(v.shape) for k, v in params.numpy().items()})


def test_init_zeroes_the_affine_terms():
    params = cot_flow.init_phi(n=2, m=3, width=5, seed=1)
    arrays = params.numpy()
    for key in ("a", "b", "c", "b0", "b1"):
        assert np.all(arrays[key] == 0.0)
    assert arrays["A"].shape == (6, 6)
    assert params.dims["rank"] == 6
    assert cot_flow.init_phi(n=2, m=3, width=5, seed=1).allclose(params)


def test_rank_defaults_to_at_most_ten():
    params = cot_flow.init_phi(n=8, m=6, width=4, seed=0)
    assert params.numpy()["A"].shape == (15, 10)


def test_phi_derivatives_of_a_quadratic(rng):
    x = rng.standard_normal((5, 2))
    out = cot_flow.phi_eval(_linear_flow(), 0.3, x)
    np.testing.assert_allclose(out.value[:, 0], 0.5 * np.sum((x @ S) * x, axis=1), rtol=1e-12)
    np.testing.assert_allclose(out.grad_x, x @ S, rtol=1e-12)
    np.testing.assert_allclose(out.laplacian[:, 0], np.trace(S), rtol=1e-12)
    np.testing.assert_allclose(out.dt, 0.0, atol=1e-15)


def test_laplacian_matches_finite_differences(rng):
    params = _random_phi(rng)
    x = rng.standard_normal((3, 2))
    y = rng.standard_normal((3, 1))
    lap = cot_flow.phi_eval(params, 0.4, x, y).laplacian[:, 0]
    eps = 1e-5
    fd = np.zeros(3)
    for j in range(2):
        e = np.zeros_like(x)
        e[:, j] = eps
        up = cot_flow.phi_eval(params, 0.4, x + e, y).grad_x[:, j]
        down = cot_flow.phi_eval(params, 0.4, x - e, y).grad_x[:, j]
        fd += (up - down) / (2 * eps)
    np.testing.assert_allclose(lap, fd, rtol=1e-6, atol=1e-8)


def test_rk4_converges_at_fourth_order(rng):
    params = _linear_flow()
    z = rng.standard_normal((10, 2))
    exact = z @ expm(-S)
    errors = [np.max(np.abs(cot_flow.sample_flow(params, None, z, nt, alpha1=1.0) - exact))
              for nt in (4, 8, 16, 32)]
    for coarse, fine in zip(errors, errors[1:]):
        assert 12.0 <= coarse / fine <= 20.0
    assert errors[-1] < 1e-6


def test_inverse_accumulators_of_a_quadratic(rng):
    x = rng.standard_normal((6, 2))
    state = cot_flow.integrate_inverse(_linear_flow(), x, nt=32, alpha1=1.0)
    np.testing.assert_allclose(state.p, x @ expm(S), rtol=1e-6, atol=1e-6)
    np.testing.assert_allclose(state.ell[:, 0], np.trace(S), rtol=1e-12)
    assert np.all(state.cost > 0.0)
    assert np.all(state.hjb > 0.0)


def test_flow_nll_of_the_identity(rng):
    params = cot_flow.init_phi(n=3, m=0, width=4, seed=2)
    arrays = params.numpy()
    arrays["A"] = np.zeros_like(arrays["A"])
    identity = params.with_arrays(arrays)
    x = rng.standard_normal((4, 3))
    expected = 0.5 * np.sum(x ** 2, axis=1) + 1.5 * np.log(2 * np.pi)
    np.testing.assert_allclose(cot_flow.flow_nll(identity, x, nt=3), expected, rtol=1e-12)


def test_constant_velocity_has_zero_variance(rng):
    params = cot_flow.init_phi(n=2, m=0, width=4, seed=3)
    arrays = params.numpy()
    arrays["A"] = np.zeros_like(arrays["A"])
    arrays["b"] = np.array([[0.0, 1.0, -2.0]])
    straight = params.with_arrays(arrays)
    x = rng.standard_normal((5, 2))
    assert cot_flow.velocity_variance(straight, x, nt=4) == pytest.approx(0.0, abs=1e-20)
    assert cot_flow.velocity_variance(_linear_flow(), x, nt=4, alpha1=1.0) > 0.0


def test_cot_loss_gradient_matches_finite_differences(rng):
    params = _random_phi(rng)
    x = rng.standard_normal((4, 2))
    y = rng.standard_normal((4, 1))
    config = FlowConfig(nt=2, alpha1=3.0, alpha2=2.0, width=4)
    _, grads = value_and_grad(lambda models, a, b: cot_flow.cot_loss(models["x"], a, b, config),
                              {"x": params}, x, y)
    arrays = params.numpy()

    def loss():
        return cot_flow.cot_loss(params.with_arrays(arrays), x, y, config).value[0, 0]

    for key, index in [("a", (0, 0)), ("A0", (1, 2)), ("b1", (0, 1)), ("A1", (2, 3)),
                       ("A", (2, 1)), ("b", (0, 3)), ("c", (0, 0))]:
        fd = central_difference(loss, arrays, key, index)
        assert grads[f"x/{key}"][index] == pytest.approx(fd, rel=1e-4, abs=1e-7), key


def test_clamp_only_touches_the_residual_network(rng):
    params = cot_flow.init_phi(n=2, m=1, width=4, seed=0)
    arrays = {k: 4.0 * np.ones_like(v) for k, v in params.numpy().items()}
    clamped = cot_flow.clamp_box(params.with_arrays(arrays)).numpy()
    for key in cot_flow.NETWORK_KEYS:
        assert np.all(clamped[key] == cot_flow.BOX)
    for key in ("A", "b", "c"):
        assert np.all(clamped[key] == 4.0)


def test_context_embedding(rng):
    params = _random_phi(rng, n=2, m=3, embed=(5, 2))
    assert params.dims["context"] == 2
    y = rng.standard_normal((4, 3))
    assert cot_flow.embed_context(params.embedding, y).shape == (4, 2)
    out = cot_flow.phi_eval(params, 0.5, rng.standard_normal((4, 2)), y)
    assert out.grad_x.shape == (4, 2)
    with pytest.raises(ConfigError):
        cot_flow.phi_eval(params, 0.5, rng.standard_normal((4, 2)), rng.standard_normal((4, 2)))
    with pytest.raises(ConfigError):
        cot_flow.init_phi(n=2, m=0, width=4, seed=0, embed=(5, 2))


def test_conditional_potential_needs_its_context(rng):
    params = cot_flow.init_phi(n=2, m=1, width=4, seed=0)
    with pytest.raises(ConfigError):
        cot_flow.sample_flow(params, None, rng.standard_normal((3, 2)))


def test_nt_consistency_shrinks_with_steps(rng):
    z = rng.standard_normal((20, 2))
    errors = cot_flow.nt_consistency(_linear_flow(), None, z, (1, 2, 4, 8), nt_ref=32, alpha1=1.0)
    values = [errors[nt] for nt in (1, 2, 4, 8)]
    assert all(a > b for a, b in zip(values, values[1:]))
    assert cot_flow.nt_consistency(_linear_flow(), None, z, (32,), nt_ref=32, alpha1=1.0)[32] == 0.0


def test_map_point_of_a_linear_flow_is_the_origin():
    model = cot_flow.FlowModel(phi_x=_linear_flow(), nt=8, alpha1=1.0)
    found = cot_flow.map_point(model, np.zeros(0), x0=np.array([0.7, -0.4]), cfg=SampleConfig(tol=1e-9))
    assert found.converged
    np.testing.assert_allclose(found.x, 0.0, atol=1e-7)


def test_joint_model(rng):
    model = cot_flow.init_model(FlowConfig(width=4, nt=2, joint=True), n=2, m=1)
    assert model.checkpoint_kind == "cot-joint"
    x, y = rng.standard_normal((3, 2)), rng.standard_normal((3, 1))
    expected = cot_flow.flow_nll(model.phi_x, x, y, 2, model.alpha1) + cot_flow.flow_nll(model.phi_y, y, None, 2,
                                                                                         model.alpha1)
    np.testing.assert_allclose(model.nll(x, y), expected, rtol=1e-12)
    y_samples, x_samples = cot_flow.sample_joint(model, 7, seed=1)
    assert y_samples.x.shape == (7, 1) and x_samples.x.shape == (7, 2)
    with pytest.raises(ConfigError):
        cot_flow.sample_joint(cot_flow.init_model(FlowConfig(width=4), n=2, m=1), 3)


def test_short_training_run_respects_the_box():
    dataset, _ = gaussian_bench(default_spec(), 100, seed=0)
    config = FlowConfig(nt=2, width=4, epochs=1, batch_size=40, val_interval=1, learning_rate=0.05, seed=2)
    model, record = cot_flow.train_flow(config, dataset, run_id="flow-smoke")
    assert record.ok
    assert record.flags["steps"] == 2
    arrays = model.phi_x.numpy()
    assert all(np.max(np.abs(arrays[k])) <= config.clamp for k in cot_flow.NETWORK_KEYS)
    assert np.all(np.isfinite(model.sample(dataset.test[1], seed=0).x))


def test_diverging_flow_keeps_the_initial_weights(monkeypatch):
    def exploding(params, x, y, config):
        raise NonFiniteError("cot_loss", 0)

    monkeypatch.setattr(cot_flow, "cot_loss", exploding)
    dataset, _ = gaussian_bench(default_spec(), 60, seed=0)
    config = FlowConfig(nt=2, width=4, epochs=1, batch_size=20, seed=4)
    with pytest.raises(DivergenceError) as info:
        cot_flow.train_flow(config, dataset)
    assert info.value.record.status == "diverged"
    start = cot_flow.init_model(config, dataset.n, dataset.m).phi_x.numpy()
    kept = info.value.last_good.phi_x.numpy()
    assert all(np.array_equal(kept[k], start[k]) for k in start)
