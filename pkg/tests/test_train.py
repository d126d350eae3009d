import math
from dataclasses import replace

import numpy as np
import pytest

from conftest import tiny_model
from oracles import central_difference, log_partition
from setlearn.data import gen_gaussian
from setlearn.diffcore import ParamVector, ShapeError
from setlearn.fixedpoint import SolverConfig, contraction_check, solve_fixed_point
from setlearn.multilinear import EstimatorConfig, ScalingConfig, exact_grad
from setlearn.train import (OptimizerState, SolverDivergence, TrainConfig, batch_step, bernoulli_entropy,
                            elbo_exact, mean_field_loss, mean_field_loss_grad, optimizer_step, train)


def test_loss_examples():
    mask = np.array([1, 0, 1, 0, 0], dtype=bool)
    assert mean_field_loss(np.full(5, 0.5), mask) == pytest.approx(5 * math.log(2))
    assert mean_field_loss(mask.astype(float), mask) <= 5 * 1.1e-6
    psi = np.array([0.0, 0.0, 1.0, 0.0, 0.0])
    assert mean_field_loss(psi, mask) == pytest.approx(-math.log(1e-6), rel=1e-6)
    with pytest.raises(ShapeError):
        mean_field_loss(np.full(4, 0.5), mask)


def test_loss_gradient(rng):
    for _ in range(5):
        psi = rng.uniform(0.01, 0.99, 10)
        mask = rng.random(10) < 0.3
        fd = central_difference(lambda p: mean_field_loss(p, mask), psi, 1e-7)
        np.testing.assert_allclose(mean_field_loss_grad(psi, mask), fd, rtol=1e-6)
    clamped = mean_field_loss_grad(np.array([0.0, 1.0]), np.array([True, False]))
    np.testing.assert_array_equal(clamped, 0.0)


def test_entropy_and_elbo():
    assert bernoulli_entropy([0.0, 1.0]) == 0.0
    assert elbo_exact(np.zeros(8), np.full(3, 0.5)) == pytest.approx(3 * math.log(2))


def test_elbo_stationary_at_fixed_point_and_below_log_partition(rng):
    for n in (4, 6):
        F = rng.normal(size=2 ** n) * 0.3
        psi = solve_fixed_point(lambda p: exact_grad(F, p), np.full(n, 0.5), SolverConfig(tol=1e-12, max_iter=2000)).psi
        grad = central_difference(lambda p: elbo_exact(F, p), psi)
        assert np.abs(grad).max() <= 1e-4
        assert elbo_exact(F, psi) <= log_partition(F)
        for _ in range(20):
            assert elbo_exact(F, rng.random(n)) <= log_partition(F)


def test_optimizer_examples():
    p = ParamVector([("t", [1.0])])
    sgd = TrainConfig(lr=0.1, optimizer="sgd")
    out, state = optimizer_step(p, ParamVector([("t", [0.5])]), OptimizerState(), sgd)
    assert out["t"][0] == pytest.approx(0.95) and state.step == 1
    for opt in ("sgd", "adam"):
        cfg = TrainConfig(lr=0.1, optimizer=opt)
        assert optimizer_step(p, p.zeros_like(), OptimizerState(), cfg)[0].allclose(p)
        assert optimizer_step(p, p * 3.0, OptimizerState(), replace(cfg, lr=0.0))[0].allclose(p)
    with pytest.raises(ShapeError):
        optimizer_step(p, ParamVector([("t", [1.0, 2.0])]), OptimizerState(), sgd)


def test_adam_first_step_has_unit_magnitude():
    p = ParamVector([("t", [1.0, -2.0])])
    g = ParamVector([("t", [1e-3, -50.0])])
    out, state = optimizer_step(p, g, OptimizerState(), TrainConfig(lr=0.01))
    np.testing.assert_allclose(out["t"], [0.99, -1.99], atol=1e-6)
    out2, state2 = optimizer_step(out, g, state, TrainConfig(lr=0.01))
    assert state2.step == 2 and state2.m is not None


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(clamp=0.2)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(ValueError):
        TrainConfig(grad_mode="unrolled-3")


def small_cfg(**kw):
    base = dict(epochs=2, batch_size=8, init_width=8, hidden_width=8, estimator=EstimatorConfig(samples=2))
    base.update(kw)
    return TrainConfig(**base)


def test_two_epoch_miniset():
    data = gen_gaussian(32, 12, 3, seed=1)
    model, hist = train(data, small_cfg())
    assert len(hist.loss) == len(hist.wall_time) == len(hist.iterations) == 2
    assert all(np.isfinite(hist.loss))
    assert model.params.shapes() == dict(small_cfg().arch(2).layer_shapes())


def test_training_is_deterministic():
    data = gen_gaussian(16, 8, 2, seed=2)
    a, ha = train(data, small_cfg(seed=5))
    b, hb = train(data, small_cfg(seed=5))
    assert np.array_equal(a.params.flatten(), b.params.flatten())
    assert ha.loss == hb.loss
    c, _ = train(data, small_cfg(seed=6))
    assert not np.array_equal(a.params.flatten(), c.params.flatten())


def test_unrolled_mode_trains():
    data = gen_gaussian(16, 8, 2, seed=3)
    _, hist = train(data, small_cfg(grad_mode="unrolled", unroll_k=3))
    assert hist.iterations == [3.0, 3.0]


def test_gradient_modes_agree_on_contracting_instances(rng):
    X = [rng.normal(size=(5, 2)) for _ in range(2)]
    masks = np.array([[1, 0, 0, 1, 0], [0, 1, 1, 0, 0]], dtype=bool)
    base = dict(estimator=EstimatorConfig(exact=True), scaling=ScalingConfig(), init_width=6, hidden_width=6,
                solver=SolverConfig(tol=1e-13, max_iter=5000))
    cfg_imp = TrainConfig(lr=1e-3, **base)
    cfg_unr = replace(cfg_imp, grad_mode="unrolled", unroll_k=100)
    model = tiny_model(21, scale=0.3)
    assert all(contraction_check(model, x, n_pairs=8).satisfied for x in X)
    state = OptimizerState()
    for _ in range(5):
        gi = batch_step(model, X, masks, cfg_imp).grad
        gu = batch_step(model, X, masks, cfg_unr).grad
        assert np.linalg.norm((gi - gu).flatten()) <= 1e-3 * np.linalg.norm(gi.flatten())
        params, state = optimizer_step(model.params, gi, state, cfg_imp)
        model = model.with_params(params)


def test_divergence_aborts_training():
    data = gen_gaussian(8, 6, 2, seed=4)
    cfg = small_cfg(solver=SolverConfig(tol=1e-12, max_iter=1), estimator=EstimatorConfig(exact=True),
                    scaling=ScalingConfig("constant", 1e-3))
    with pytest.raises(SolverDivergence) as exc:
        train(data, cfg)
    assert exc.value.rate > 0.5 and exc.value.epoch == 0


def test_mixed_ground_sizes_rejected():
    model = tiny_model(0)
    with pytest.raises(ShapeError):
        batch_step(model, [np.zeros((3, 2)), np.zeros((4, 2))], [np.ones(3, bool), np.ones(4, bool)],
                   TrainConfig())


@pytest.mark.slow
def test_loss_decreases_on_gaussian_sets():
    data = gen_gaussian(64, 100, 10, seed=7)
    _, hist = train(data, TrainConfig(epochs=20, batch_size=32, seed=0))
    assert hist.loss[-1] < hist.loss[0]
