"""
Tests for the input-convex networks and the strictly convex potential.
"""

import numpy as np
import pytest

from src.autodiff import min_eigenvalues
from src.errors import ConfigError, ShapeMismatchError
from src.potentials import (
    GAMMA_INIT,
    FicnnDims,
    PicnnDims,
    default_context_width,
    ficnn_forward,
    ficnn_grad_y,
    ficnn_potential,
    init_params,
    picnn_forward,
    potential_grad_x,
    potential_hessian_x,
    project_nonneg,
    quadratic_coefficient,
    strict_potential,
)


def _perturbed(params, rng, scale=0.5):
    arrays = {k: v + scale * rng.standard_normal(v.shape) for k, v in params.numpy().items()}
    return params.with_arrays(arrays)


def test_default_context_width():
    assert default_context_width(128, 3) == 4
    assert default_context_width(128, 4) == 4
    assert default_context_width(2, 30) == 2
    assert default_context_width(16, 1) == 1


def test_layer_shapes_of_picnn():
    dims = PicnnDims(n=3, m=2, width=8, depth=3)
    first, middle, last = (dims.layer_shapes(k) for k in range(3))
    assert first["L_w"] == (8, 3) and first["L_vw"] == (8, 2)
    assert "L_x" not in first and "L_v" in first
    assert middle["L_x"] == (8, 3) and middle["L_xv"] == (3, dims.context_width)
    assert last["L_x"] == (1, 3) and last["L_w"] == (1, 8)
    assert "L_v" not in last


def test_depth_below_two_is_rejected():
    with pytest.raises(ConfigError):
        PicnnDims(n=1, m=1, width=4, depth=1)
    with pytest.raises(ConfigError):
        FicnnDims(m=2, width=4, depth=1)


def test_init_is_deterministic_and_constrained():
    dims = PicnnDims(n=2, m=3, width=6, depth=3)
    a, b = init_params(dims, seed=7), init_params(dims, seed=7)
    assert a.allclose(b)
    assert not a.allclose(init_params(dims, seed=8))
    arrays = a.numpy()
    for key in a.constrained_keys():
        assert np.all(arrays[key] >= 0.0)
    for key in a.keys():
        if key.split(".")[-1].startswith("b"):
            assert np.all(arrays[key] == 0.0)
    assert tuple(float(arrays[k][0, 0]) for k in ("gamma1", "gamma2", "gamma3")) == GAMMA_INIT
    assert quadratic_coefficient(a) == pytest.approx(1.0, abs=1e-4)


def test_project_nonneg_only_touches_constrained_blocks(rng):
    params = _perturbed(init_params(PicnnDims(n=2, m=2, width=4, depth=2), seed=1), rng, scale=2.0)
    projected = project_nonneg(params)
    before, after = params.numpy(), projected.numpy()
    constrained = set(params.constrained_keys())
    assert constrained
    for key in before:
        if key in constrained:
            np.testing.assert_array_equal(after[key], np.maximum(before[key], 0.0))
        else:
            np.testing.assert_array_equal(after[key], before[key])


def test_potential_hessian_is_bounded_below(rng):
    params = _perturbed(init_params(PicnnDims(n=3, m=2, width=8, depth=3), seed=3), rng)
    x = rng.standard_normal((20, 3))
    y = rng.standard_normal((20, 2))
    hess = potential_hessian_x(params, x, y)
    np.testing.assert_allclose(hess, np.swapaxes(hess, 1, 2), atol=1e-10)
    lowest = min_eigenvalues(hess.reshape(20, 9), n=3)
    assert np.all(lowest >= quadratic_coefficient(params) - 1e-9)


def test_potential_gradient_matches_finite_differences(rng):
    params = _perturbed(init_params(PicnnDims(n=2, m=3, width=5, depth=3), seed=4), rng)
    x = rng.standard_normal((4, 2))
    y = rng.standard_normal((4, 3))
    grad = potential_grad_x(params, x, y)
    eps = 1e-6
    for j in range(2):
        e = np.zeros_like(x)
        e[:, j] = eps
        up = strict_potential(params, x + e, y).value[:, 0]
        down = strict_potential(params, x - e, y).value[:, 0]
        np.testing.assert_allclose(grad[:, j], (up - down) / (2 * eps), rtol=1e-6, atol=1e-8)


def test_potential_map_is_monotone(rng):
    params = _perturbed(init_params(PicnnDims(n=2, m=1, width=6, depth=2), seed=5), rng)
    y = np.repeat(rng.standard_normal((1, 1)), 30, axis=0)
    x1, x2 = rng.standard_normal((30, 2)), rng.standard_normal((30, 2))
    g1, g2 = potential_grad_x(params, x1, y), potential_grad_x(params, x2, y)
    assert np.all(np.sum((g1 - g2) * (x1 - x2), axis=1) > 0.0)


def test_ficnn_gradient_matches_finite_differences(rng):
    params = _perturbed(init_params(FicnnDims(m=3, width=6, depth=3), seed=6), rng)
    y = rng.standard_normal((5, 3))
    grad = ficnn_grad_y(params, y)
    eps = 1e-6
    for j in range(3):
        e = np.zeros_like(y)
        e[:, j] = eps
        fd = (ficnn_potential(params, y + e).value - ficnn_potential(params, y - e).value)[:, 0] / (2 * eps)
        np.testing.assert_allclose(grad[:, j], fd, rtol=1e-6, atol=1e-8)


def test_wrong_input_width_is_a_shape_error(rng):
    params = init_params(PicnnDims(n=2, m=3, width=4, depth=2), seed=0)
    with pytest.raises(ShapeMismatchError):
        strict_potential(params, rng.standard_normal((2, 3)), rng.standard_normal((2, 3)))


def _zeroed(params):
    return params.with_arrays({k: np.zeros_like(v) for k, v in params.numpy().items()})


@pytest.mark.parametrize("depth", [2, 4])
def test_zero_weights_give_the_softplus_chain(rng, depth):
    # every layer sees z = 0, so each stage is softplus(0) = ln 2
    picnn = _zeroed(init_params(PicnnDims(n=3, m=2, width=5, depth=depth), seed=0, strict=False))
    out = picnn_forward(picnn, rng.standard_normal((6, 3)), rng.standard_normal((6, 2))).value
    np.testing.assert_allclose(out, np.full((6, 1), np.log(2.0)), rtol=0, atol=1e-15)

    ficnn = _zeroed(init_params(FicnnDims(m=2, width=5, depth=depth), seed=0))
    np.testing.assert_allclose(ficnn_forward(ficnn, rng.standard_normal((6, 2))).value, np.log(2.0), atol=1e-15)


def test_zero_network_potential_is_shifted_quadratic(rng):
    params = _zeroed(init_params(PicnnDims(n=2, m=1, width=4, depth=2), seed=0))
    x = rng.standard_normal((5, 2))
    # softplus(0)·ln 2 + (relu(0) + softplus(0))·½‖x‖²
    expected = np.log(2.0) ** 2 + np.log(2.0) * 0.5 * np.sum(x * x, axis=1)
    np.testing.assert_allclose(strict_potential(params, x, rng.standard_normal((5, 1))).value[:, 0], expected,
                               rtol=1e-14)


def test_picnn_is_midpoint_convex_in_x(rng):
    draws, rows = 50, 20
    worst = -np.inf
    for seed in range(draws):
        dims = PicnnDims(n=3, m=2, width=6, depth=3)
        params = _perturbed(init_params(dims, seed=seed, strict=False), rng)
        x1, x2 = rng.standard_normal((rows, 3)), rng.standard_normal((rows, 3))
        y = rng.standard_normal((rows, 2))
        mid = picnn_forward(params, 0.5 * (x1 + x2), y).value
        chord = 0.5 * (picnn_forward(params, x1, y).value + picnn_forward(params, x2, y).value)
        worst = max(worst, float(np.max(mid - chord)))
    assert worst <= 1e-10


def test_ficnn_is_midpoint_convex(rng):
    draws, rows = 50, 20
    worst = -np.inf
    for seed in range(draws):
        params = _perturbed(init_params(FicnnDims(m=3, width=6, depth=3), seed=seed), rng)
        y1, y2 = rng.standard_normal((rows, 3)), rng.standard_normal((rows, 3))
        mid = ficnn_forward(params, 0.5 * (y1 + y2)).value
        chord = 0.5 * (ficnn_forward(params, y1).value + ficnn_forward(params, y2).value)
        worst = max(worst, float(np.max(mid - chord)))
    assert worst <= 1e-10


@pytest.mark.slow
def test_projected_potentials_have_spd_hessians(rng):
    draws, rows, n = 100, 100, 3
    for seed in range(draws):
        params = project_nonneg(_perturbed(init_params(PicnnDims(n=n, m=2, width=8, depth=3), seed=seed), rng))
        x, y = 2.0 * rng.standard_normal((rows, n)), rng.standard_normal((rows, 2))
        lowest = min_eigenvalues(potential_hessian_x(params, x, y).reshape(rows, n * n), n=n)
        assert np.all(lowest > 0.0), f"draw {seed}"
