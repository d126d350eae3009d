import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import modular_model, tiny_model
from oracles import central_difference, multilinear, multilinear_grad, multilinear_hessian, table
from setlearn.multilinear import (EstimatorConfig, ExactProblem, GradientScaler, GroundSetTooLarge,
                                  SampledProblem, ScalingConfig, all_masks, exact_grad, exact_hessian,
                                  exact_value, make_problem, mc_grad, mc_hessian, sample_uniforms,
                                  scale_gradient)


def card(masks):
    return masks.sum(axis=1)


def test_value_examples():
    assert exact_value(card, [0.5, 0.5]) == pytest.approx(1.0)
    assert exact_value(np.full(8, 3.5), [0.1, 0.7, 0.3]) == pytest.approx(3.5)
    F = np.arange(8.0) ** 2
    for s in range(8):
        vertex = [(s >> j) & 1 for j in range(3)]
        assert exact_value(F, vertex) == pytest.approx(F[s], abs=1e-12)


def test_grad_and_hessian_examples():
    sq = lambda m: card(m) ** 2  # noqa: E731
    assert exact_grad(sq, [0.5, 0.5])[0] == pytest.approx(2.0)
    H = exact_hessian(sq, [0.3, 0.9])
    assert H[0, 1] == pytest.approx(2.0) and H[1, 0] == pytest.approx(2.0)
    assert np.all(np.diag(H) == 0)
    w = np.array([0.3, -1.2, 2.0])
    modular = lambda m: m @ w  # noqa: E731
    np.testing.assert_allclose(exact_grad(modular, [0.2, 0.5, 0.9]), w, atol=1e-12)
    np.testing.assert_allclose(exact_hessian(modular, [0.2, 0.5, 0.9]), 0, atol=1e-12)
    np.testing.assert_array_equal(exact_grad(np.ones(4), [0.2, 0.4]), 0)


def test_enumeration_guard():
    with pytest.raises(GroundSetTooLarge):
        all_masks(21)
    with pytest.raises(GroundSetTooLarge):
        exact_value(lambda m: m.sum(1), np.full(21, 0.5))
    with pytest.raises(ValueError):
        exact_value(np.zeros(4), [0.5, 1.5])


@given(st.integers(1, 6), st.integers(0, 2 ** 32 - 1))
def test_exact_matches_loop_oracles(n, seed):
    rng = np.random.default_rng(seed)
    F = rng.normal(size=2 ** n)
    psi = rng.random(n)
    assert exact_value(F, psi) == pytest.approx(multilinear(F, psi), abs=1e-10)
    np.testing.assert_allclose(exact_grad(F, psi), multilinear_grad(F, psi), atol=1e-10)
    np.testing.assert_allclose(exact_hessian(F, psi), multilinear_hessian(F, psi), atol=1e-10)


def test_derivatives_match_finite_differences(rng):
    for n in (3, 6, 8):
        F = rng.normal(size=2 ** n)
        psi = rng.uniform(0.1, 0.9, n)
        np.testing.assert_allclose(exact_grad(F, psi), central_difference(lambda p: exact_value(F, p), psi),
                                   atol=1e-6)
        if n <= 6:
            fd = np.stack([central_difference(lambda p: exact_grad(F, p)[i], psi) for i in range(n)])
            np.testing.assert_allclose(exact_hessian(F, psi), fd, atol=1e-6)


def test_value_bounded_by_vertices(rng):
    n = 10
    F = rng.normal(size=2 ** n)
    bound = np.abs(F).max()
    for _ in range(200):
        assert abs(exact_value(F, rng.random(n))) <= bound + 1e-12


def test_model_table_matches_itemwise_values(rng):
    m = tiny_model(1)
    X = rng.normal(size=(4, 2))
    from oracles import naive_set_value
    want = table(lambda items: naive_set_value(m.params, 2, X, items), 4)
    np.testing.assert_allclose(ExactProblem(m, X).values, want, atol=1e-12)


def test_uniforms_reproducible_and_stream_dependent():
    cfg = EstimatorConfig(samples=4, seed=9)
    a = sample_uniforms(cfg, 5, 1, 2)
    assert np.array_equal(a, sample_uniforms(cfg, 5, 1, 2))
    assert not np.array_equal(a, sample_uniforms(cfg, 5, 1, 3))
    anti = sample_uniforms(EstimatorConfig(samples=4, antithetic=True), 5)
    np.testing.assert_allclose(anti[:2] + anti[2:], 1.0)
    with pytest.raises(ValueError):
        EstimatorConfig(samples=0)


def test_mc_on_modular_model_is_exact(rng):
    m = modular_model(2)
    X = rng.normal(size=(5, 2))
    psi = rng.random(5)
    exact = ExactProblem(m, X)
    for samples in (1, 3):
        cfg = EstimatorConfig(samples=samples, seed=samples)
        np.testing.assert_allclose(mc_grad(m, X, psi, cfg), exact.grad(psi), atol=1e-9)
        np.testing.assert_allclose(mc_hessian(m, X, psi, cfg), 0, atol=1e-9)


def test_mc_shapes_and_symmetry(rng):
    m = tiny_model(3)
    X = rng.normal(size=(6, 2))
    g = mc_grad(m, X, np.full(6, 0.5), EstimatorConfig(samples=1))
    assert g.shape == (6,) and np.all(np.isfinite(g))
    H = mc_hessian(m, X, rng.random(6), EstimatorConfig(samples=7))
    assert np.array_equal(H, H.T) and np.all(np.diag(H) == 0)


def test_mc_unbiased(rng):
    m = tiny_model(4, scale=2.0)
    X = rng.normal(size=(6, 2))
    psi = rng.uniform(0.2, 0.8, 6)
    exact = ExactProblem(m, X)
    draws = 2000
    gs = np.empty((draws, 6))
    hs = np.empty((draws, 6, 6))
    for s in range(draws):
        p = SampledProblem(m, X, sample_uniforms(EstimatorConfig(samples=1, seed=s), 6))
        gs[s], hs[s] = p.grad(psi), p.hessian(psi)
    for est, ref in ((gs, exact.grad(psi)), (hs, exact.hessian(psi))):
        se = est.std(axis=0, ddof=1) / np.sqrt(draws)
        dev = np.abs(est.mean(axis=0) - ref)
        # a handful of the 42 entries may sit past 3 SE by chance; none should be far out
        assert np.all(dev <= 4.5 * se + 1e-12)


def test_sampled_value_and_gradient_agree_with_subsets(rng):
    m = tiny_model(5)
    X = rng.normal(size=(5, 2))
    psi = rng.random(5)
    p = SampledProblem(m, X, sample_uniforms(EstimatorConfig(samples=3), 5))
    x = p.subsets(psi)
    assert p.value(psi) == pytest.approx(np.mean(m(X, x)))
    plus, minus = p.gain_masks(psi)
    want = (m(X, plus.reshape(-1, 5)) - m(X, minus.reshape(-1, 5))).reshape(3, 5).mean(axis=0)
    np.testing.assert_allclose(p.grad(psi), want, atol=1e-12)


@pytest.mark.parametrize("depth", [2, 3])
def test_fast_param_pullback_matches_engine(rng, depth):
    m = tiny_model(6, depth=depth)
    X = rng.normal(size=(5, 2))
    psi = rng.random(5)
    p = SampledProblem(m, X, sample_uniforms(EstimatorConfig(samples=4), 5))
    w = rng.normal(size=5)
    assert p.grad_param_vjp(psi, w).allclose(p.grad_param_vjp_reference(psi, w), atol=1e-12)
    stored = p.gain_preactivations(psi)
    assert p.grad_param_vjp(psi, w, stored).allclose(p.grad_param_vjp(psi, w), atol=1e-14)


def test_exact_param_pullback_matches_finite_differences(rng):
    m = tiny_model(7)
    X = rng.normal(size=(4, 2))
    psi = rng.random(4)
    w = rng.normal(size=4)
    g = ExactProblem(m, X).grad_param_vjp(psi, w).flatten()
    fd = central_difference(lambda t: w @ ExactProblem(m.with_params(m.params.unflatten(t)), X).grad(psi),
                            m.params.flatten())
    np.testing.assert_allclose(g, fd, atol=1e-6)


def test_make_problem_modes(rng):
    m = tiny_model(0)
    X = rng.normal(size=(3, 2))
    assert isinstance(make_problem(m, X, EstimatorConfig(exact=True)), ExactProblem)
    sp = make_problem(m, X, EstimatorConfig(samples=2, seed=3), 4, 5)
    assert np.array_equal(sp.uniforms, sample_uniforms(EstimatorConfig(samples=2, seed=3), 3, 4, 5))


def test_scaling_examples():
    np.testing.assert_allclose(scale_gradient([[1.0]], ScalingConfig("constant", 1.0), 2), [[1.0]])
    np.testing.assert_allclose(scale_gradient([[3.0, 4.0]], ScalingConfig("frobenius"), 2), [[0.6, 0.8]])
    rank1 = np.outer([1.0, -2.0, 0.5], [3.0, 1.0, 4.0, 1.0])
    np.testing.assert_allclose(scale_gradient(rank1, ScalingConfig("nuclear"), 4),
                               scale_gradient(rank1, ScalingConfig("frobenius"), 4), atol=1e-12)
    g = np.array([[1.0, -3.0]])
    assert np.array_equal(scale_gradient(g, ScalingConfig(), 2), g)
    with pytest.raises(ValueError):
        ScalingConfig("constant", 0.0)
    with pytest.raises(ValueError):
        ScalingConfig("spectral")


def test_zero_gradient_is_flagged_and_left_alone():
    with pytest.warns(RuntimeWarning):
        out = scale_gradient(np.zeros((2, 3)), ScalingConfig("frobenius"), 3)
    assert np.all(out == 0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        scale_gradient(np.zeros((2, 3)), ScalingConfig(), 3)


@pytest.mark.parametrize("mode", ["none", "constant", "frobenius", "nuclear"])
def test_scaler_derivatives(rng, mode):
    cfg = ScalingConfig(mode, 2.5)
    G = rng.normal(size=(3, 4))
    sc = GradientScaler(G, cfg, 4)
    f = lambda g: GradientScaler(g.reshape(3, 4), cfg, 4).apply().ravel()  # noqa: E731
    J = np.stack([central_difference(lambda g: f(g)[k], G.ravel()) for k in range(12)])
    d = rng.normal(size=(3, 4))
    np.testing.assert_allclose(sc.jvp(d).ravel(), J @ d.ravel(), atol=1e-7)
    np.testing.assert_allclose(sc.vjp(d).ravel(), J.T @ d.ravel(), atol=1e-7)
