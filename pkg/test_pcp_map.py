"""
Tests for the convex-potential transport: objective, inversion, joint mode,
MAP search and a small end-to-end run.
"""

import numpy as np
import pytest

from conftest import central_difference
from src import pcp_map
from src.config import PcpTrainConfig, SampleConfig
from src.errors import ConfigError, DivergenceError, NonFiniteError
from src.gaussian_bench import default_spec, gaussian_bench
from src.potentials import PicnnDims, init_params, potential_grad_x
from src.training import value_and_grad

LOG_2PI = np.log(2.0 * np.pi)


def _random_potential(rng, n=2, m=3, width=6, depth=3, seed=0):
    params = init_params(PicnnDims(n=n, m=m, width=width, depth=depth), seed=seed)
    arrays = {}
    for key, value in params.numpy().items():
        noise = 0.3 * rng.standard_normal(value.shape)
        # keep the constrained blocks away from the relu kink
        arrays[key] = np.abs(value) + 0.1 if key.endswith(".L_w") else value + noise
    return params.with_arrays(arrays)


def test_nll_loss_gradient_matches_finite_differences(rng):
    params = _random_potential(rng)
    x = rng.standard_normal((5, 2))
    y = rng.standard_normal((5, 3))
    _, grads = value_and_grad(lambda models, a, b: pcp_map.nll_loss(models["x"], a, b), {"x": params}, x, y)
    arrays = params.numpy()

    def loss():
        return pcp_map.nll_loss(params.with_arrays(arrays), x, y).value[0, 0]

    probes = [("gamma1", (0, 0)), ("gamma3", (0, 0)), ("picnn.0.L_w", (1, 0)), ("picnn.1.L_wv", (0, 2)),
              ("picnn.1.L_x", (2, 1)), ("picnn.2.b_w", (0, 0)), ("picnn.0.L_vw", (3, 1))]
    for key, index in probes:
        fd = central_difference(loss, arrays, key, index)
        assert grads[f"x/{key}"][index] == pytest.approx(fd, rel=1e-5, abs=1e-8), key


def test_model_nll_adds_the_gaussian_constant(rng):
    params = _random_potential(rng)
    x, y = rng.standard_normal((4, 2)), rng.standard_normal((4, 3))
    model = pcp_map.PcpModel(pot_x=params)
    expected = pcp_map.nll_terms(params, x, y).value[:, 0] + LOG_2PI
    np.testing.assert_allclose(model.nll(x, y), expected, rtol=1e-12)


def test_invert_recovers_the_generating_point(rng):
    params = _random_potential(rng)
    x = rng.standard_normal((8, 2))
    y = rng.standard_normal((8, 3))
    z = potential_grad_x(params, x, y)
    samples = pcp_map.invert(params, z, y, SampleConfig(tol=1e-9, max_iter=500))
    assert samples.n_failed == 0
    np.testing.assert_allclose(samples.x, x, atol=1e-6)
    np.testing.assert_allclose(potential_grad_x(params, samples.x, y), z, atol=1e-8)


def test_iteration_cap_reports_non_converged_rows(rng, caplog):
    params = _random_potential(rng)
    z = 3.0 * rng.standard_normal((4, 2))
    y = rng.standard_normal((4, 3))
    with caplog.at_level("WARNING"):
        samples = pcp_map.invert(params, z, y, SampleConfig(tol=1e-12, max_iter=1))
    assert samples.n_failed > 0
    assert np.all(np.isfinite(samples.x))
    assert "did not reach" in caplog.text


def test_invert_rejects_mismatched_rows(rng):
    params = _random_potential(rng)
    with pytest.raises(ConfigError):
        pcp_map.invert(params, rng.standard_normal((4, 2)), rng.standard_normal((3, 3)))


def test_posterior_sampling_is_seeded(rng):
    params = _random_potential(rng)
    y = rng.standard_normal(3)
    a = pcp_map.sample_posterior(params, y, 10, seed=5)
    b = pcp_map.sample_posterior(params, y, 10, seed=5)
    c = pcp_map.sample_posterior(params, y, 10, seed=6)
    assert a.x.shape == (10, 2)
    np.testing.assert_array_equal(a.x, b.x)
    assert not np.allclose(a.x, c.x)


def test_joint_model_scores_both_blocks(rng):
    config = PcpTrainConfig(width=6, depth=2, joint=True, seed=3)
    model = pcp_map.init_model(config, n=2, m=1)
    assert model.joint and model.checkpoint_kind == "pcp-joint"
    x, y = rng.standard_normal((6, 2)), rng.standard_normal((6, 1))
    conditional = pcp_map.PcpModel(pot_x=model.pot_x).nll(x, y)
    marginal = pcp_map.ficnn_nll_terms(model.pot_y, y).value[:, 0] + 0.5 * LOG_2PI
    np.testing.assert_allclose(model.nll(x, y), conditional + marginal, rtol=1e-12)
    loss = pcp_map.joint_nll(model.pot_x, model.pot_y, x, y).value[0, 0]
    assert loss == pytest.approx(np.mean(conditional + marginal) - 1.5 * LOG_2PI, rel=1e-12)


def test_joint_sampling_shapes(rng):
    model = pcp_map.init_model(PcpTrainConfig(width=6, depth=2, joint=True), n=2, m=1)
    y_samples, x_samples = pcp_map.sample_joint(model, 12, seed=1)
    assert y_samples.x.shape == (12, 1)
    assert x_samples.x.shape == (12, 2)
    assert y_samples.n_failed == 0 and x_samples.n_failed == 0


def test_joint_sampling_needs_a_joint_model():
    model = pcp_map.init_model(PcpTrainConfig(width=4, depth=2), n=1, m=1)
    with pytest.raises(ConfigError):
        pcp_map.sample_joint(model, 3)


def test_map_point_improves_on_its_start(rng):
    params = _random_potential(rng)
    y = rng.standard_normal(3)
    x0 = pcp_map.sample_posterior(params, y, 50, seed=2).x.mean(axis=0)
    found = pcp_map.map_point(params, y, x0=x0, cfg=SampleConfig(tol=1e-6, max_iter=300))
    model = pcp_map.PcpModel(pot_x=params)
    start = model.nll(x0[None, :], y[None, :])[0]
    at_map = model.nll(found.x[None, :], y[None, :])[0]
    assert at_map <= start + 1e-8
    assert found.log_density == pytest.approx(-at_map, rel=1e-10)


def test_short_training_run_keeps_weights_feasible():
    dataset, _ = gaussian_bench(default_spec(), 200, seed=0)
    config = PcpTrainConfig(width=8, depth=2, epochs=1, batch_size=32, val_interval=2, seed=1)
    model, record = pcp_map.train(config, dataset, run_id="smoke")
    assert record.ok
    assert record.metrics["valid_nll"] is not None
    arrays = model.pot_x.numpy()
    assert all(np.all(arrays[k] >= 0.0) for k in model.pot_x.constrained_keys())
    assert record.flags["steps"] == 5


def test_training_rejects_a_model_of_other_dims():
    dataset, _ = gaussian_bench(default_spec(), 50, seed=0)
    config = PcpTrainConfig(width=4, depth=2, epochs=1)
    model = pcp_map.init_model(config, n=1, m=2)
    with pytest.raises(ConfigError):
        pcp_map.train(config, dataset, model=model)


@pytest.mark.slow
def test_gaussian_benchmark_approaches_the_oracle_entropy():
    dataset, oracle = gaussian_bench(default_spec(), 4000, seed=11)
    config = PcpTrainConfig(width=32, depth=3, epochs=40, batch_size=128, learning_rate=5e-3,
                            val_interval=25, patience=8, seed=11)
    model, record = pcp_map.train(config, dataset)
    assert record.ok
    X, Y = dataset.test
    gap = float(np.mean(model.nll(X, Y))) - oracle.entropy
    assert gap < 0.1


def test_divergence_raises_with_the_last_good_model(monkeypatch):
    def exploding(models, x, y):
        raise NonFiniteError("loss", 0)

    monkeypatch.setattr(pcp_map, "_training_loss", exploding)
    dataset, _ = gaussian_bench(default_spec(), 60, seed=0)
    config = PcpTrainConfig(width=4, depth=2, epochs=2, batch_size=16, seed=3)
    with pytest.raises(DivergenceError) as info:
        pcp_map.train(config, dataset, run_id="blowup")
    record = info.value.record
    assert record.status == "diverged"
    assert record.flags["diverged_at_step"] == 1
    assert info.value.exit_code == 3
    start = pcp_map.init_model(config, dataset.n, dataset.m).pot_x.numpy()
    kept = info.value.last_good.pot_x.numpy()
    assert all(np.array_equal(kept[k], start[k]) for k in start)
