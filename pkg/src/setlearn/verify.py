"""Registry of numerical self-checks run by ``setlearn verify``.

Each check compares an implementation against an independent oracle on small
random instances and reports the measured error next to its threshold.
"""
from __future__ import annotations

import itertools
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import fixedpoint
from .diffcore import finite_diff_grad, param_vjp
from .evaluation import brute_force_oracle, jaccard
from .fixedpoint import SolverConfig, contraction_check, solve_fixed_point
from .implicit import (LinearSolveConfig, UnrolledTape, a_matvec, a_rmatvec, build_workspace,
                       implicit_vjp, linear_solve)
from .multilinear import (EstimatorConfig, ExactProblem, ScalingConfig, SampledProblem,
                          exact_grad, exact_hessian, exact_value, sample_uniforms)
from .setfn import Arch, SetFunctionModel, model_init
from .train import batch_grad_fn, elbo_exact, mean_field_loss, mean_field_loss_grad


@dataclass
class CheckResult:
    name: str
    measured: float
    threshold: float
    passed: bool
    seconds: float = 0.0
    detail: str = ""


CHECKS = {}


def check(name, threshold):
    def deco(fn):
        CHECKS[name] = (fn, threshold)
        return fn
    return deco


def _tiny_model(seed, d_f=2, width=6, depth=2, scale=1.0):
    m = model_init(Arch(d_f, depth, width, width), seed)
    return m.with_params(m.params * scale) if scale != 1.0 else m


def _naive_multilinear(F_table, psi):
    n = psi.size
    total = 0.0
    for s in range(2 ** n):
        w = 1.0
        for j in range(n):
            w *= psi[j] if s >> j & 1 else 1.0 - psi[j]
        total += F_table[s] * w
    return total


def _rel(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


@check("engine_param_vjp_vs_finite_differences", 1e-6)
def _engine(rng):
    worst = 0.0
    for seed in range(3):
        m = _tiny_model(seed, depth=2 + seed % 2)
        X = rng.normal(size=(4, 2))
        M = (rng.random((5, 4)) < 0.5).astype(float)
        w = rng.normal(size=5)
        g = param_vjp(m.record, m.params, [X, M], w).flatten()
        fd = finite_diff_grad(lambda t: w @ m.with_params(m.params.unflatten(t))(X, M), m.params.flatten(), 1e-6)
        worst = max(worst, _rel(g, fd))
    return worst


@check("multilinear_exact_vs_enumeration", 1e-10)
def _multilinear(rng):
    worst = 0.0
    for n in (1, 3, 5):
        F = rng.normal(size=2 ** n)
        psi = rng.random(n)
        worst = max(worst, abs(exact_value(F, psi) - _naive_multilinear(F, psi)))
        g = exact_grad(F, psi)
        fd = finite_diff_grad(lambda p: _naive_multilinear(F, p), psi, 1e-6)
        worst = max(worst, float(np.abs(g - fd).max()) * 1e-4)
        H = exact_hessian(F, psi)
        worst = max(worst, float(np.abs(np.diag(H)).max()))
    return worst


@check("estimator_unbiasedness_zscore", 4.0)
def _unbiased(rng):
    m = _tiny_model(1, scale=2.0)
    X = rng.normal(size=(5, 2))
    psi = rng.uniform(0.2, 0.8, 5)
    exact = ExactProblem(m, X)
    gs, hs = [], []
    for s in range(2000):
        sp = SampledProblem(m, X, sample_uniforms(EstimatorConfig(samples=1, seed=s), 5))
        gs.append(sp.grad(psi))
        hs.append(sp.hessian(psi))
    z = 0.0
    for est, ref in ((np.array(gs), exact.grad(psi)), (np.array(hs), exact.hessian(psi))):
        se = est.std(axis=0, ddof=1) / np.sqrt(len(est))
        mask = se > 0
        z = max(z, float(np.max(np.abs(est.mean(axis=0) - ref)[mask] / se[mask])))
    return z


def _contracting_instance(rng, n):
    for attempt in range(100):
        m = _tiny_model(int(rng.integers(1 << 30)), scale=0.3)
        X = rng.normal(size=(n, 2))
        rep = contraction_check(m, X, n_pairs=8)
        if rep.satisfied:
            return m, X, rep
    raise RuntimeError("no contracting instance found")


@check("contraction_unique_fixed_point", 1e-5)
def _uniqueness(rng):
    worst = 0.0
    cfg = SolverConfig(tol=1e-6, max_iter=500)
    for _ in range(3):
        m, X, _ = _contracting_instance(rng, 5)
        prob = ExactProblem(m, X)
        sols = [solve_fixed_point(batch_grad_fn([prob], ScalingConfig()), rng.random((1, 5)), cfg).psi
                for _ in range(5)]
        worst = max(worst, max(float(np.abs(s - sols[0]).max()) for s in sols))
    return worst


def _pipeline(m, X, scaling, cfg):
    def solve(params):
        prob = ExactProblem(m.with_params(params), X)
        return solve_fixed_point(batch_grad_fn([prob], scaling), np.full((1, X.shape[0]), 0.5), cfg).psi
    return solve


@check("implicit_gradient_vs_pipeline_finite_differences", 1e-3)
def _implicit(rng):
    cfg = SolverConfig(tol=1e-13, max_iter=5000)
    worst = 0.0
    for scaling in (ScalingConfig(), ScalingConfig("frobenius")):
        m = _tiny_model(int(rng.integers(1 << 30)))
        X = rng.normal(size=(4, 2))
        solve = _pipeline(m, X, scaling, cfg)
        psi = solve(m.params)
        v = rng.normal(size=psi.shape)
        g = implicit_vjp(v, build_workspace([ExactProblem(m, X)], psi, scaling)).flatten()
        fd = finite_diff_grad(lambda t: float(np.sum(v * solve(m.params.unflatten(t)))), m.params.flatten(), 1e-6)
        worst = max(worst, _rel(g, fd))
    return worst


@check("implicit_vs_unrolled_100", 1e-3)
def _cross(rng):
    m, X, _ = _contracting_instance(rng, 5)
    prob = ExactProblem(m, X)
    psi = solve_fixed_point(batch_grad_fn([prob], ScalingConfig()), np.full((1, 5), 0.5),
                            SolverConfig(tol=1e-14, max_iter=5000)).psi
    v = rng.normal(size=psi.shape)
    g_imp = implicit_vjp(v, build_workspace([prob], psi)).flatten()
    g_unr = UnrolledTape([prob], np.full((1, 5), 0.5), 100).vjp(v).flatten()
    return _rel(g_unr, g_imp)


@check("adjoint_solvers_agree", 1e-6)
def _solvers(rng):
    m = _tiny_model(3)
    X = rng.normal(size=(6, 2))
    prob = ExactProblem(m, X)
    ws = build_workspace([prob], rng.random((1, 6)))
    v = rng.normal(size=6)
    u1 = linear_solve(lambda y: a_rmatvec(ws, y), v, LinearSolveConfig("gmres"), lambda x: a_matvec(ws, x))
    u2 = linear_solve(lambda y: a_rmatvec(ws, y), v, LinearSolveConfig("normal_cg"), lambda x: a_matvec(ws, x))
    return float(np.abs(u1 - u2).max())


@check("elbo_stationarity_at_fixed_point", 1e-4)
def _stationarity(rng):
    worst = 0.0
    for n in (3, 6):
        F = rng.normal(size=2 ** n) * 0.3
        grad_fn = lambda P: exact_grad(F, P[0])[None]  # noqa: E731
        psi = solve_fixed_point(grad_fn, np.full((1, n), 0.5), SolverConfig(tol=1e-12, max_iter=5000)).psi[0]
        g = finite_diff_grad(lambda p: elbo_exact(F, p), psi, 1e-6)
        worst = max(worst, float(np.abs(g).max()))
        if elbo_exact(F, psi) > np.logaddexp.reduce(F) + 1e-12:
            return float("inf")
    return worst


@check("loss_cotangent_vs_finite_differences", 1e-6)
def _loss(rng):
    psi = rng.uniform(0.05, 0.95, 8)
    mask = rng.random(8) < 0.5
    fd = finite_diff_grad(lambda p: mean_field_loss(p, mask), psi, 1e-7)
    return float(np.abs(fd - mean_field_loss_grad(psi, mask)).max() / np.abs(fd).max())


@check("oracle_argmax_temperature_invariance", 0.0)
def _temperature(rng):
    changed = 0
    for _ in range(10):
        F = rng.normal(size=2 ** 6)
        c = rng.uniform(0.1, 10.0)
        changed += brute_force_oracle(F)[0] != brute_force_oracle(c * F)[0]
    return float(changed)


@check("jaccard_axioms", 0.0)
def _jaccard(rng):
    bad = 0
    for _ in range(50):
        a = set(np.flatnonzero(rng.random(6) < 0.5).tolist())
        b = set(np.flatnonzero(rng.random(6) < 0.5).tolist())
        j = jaccard(a, b)
        bad += (j != jaccard(b, a)) + (not 0 <= j <= 1) + ((j == 1) != (a == b))
    return float(bad)


def run_checks(names=None, seed: int = 0) -> list[CheckResult]:
    out = []
    for name in names or CHECKS:
        fn, threshold = CHECKS[name]
        t0 = time.perf_counter()
        try:
            measured = float(fn(np.random.default_rng(seed)))
            passed = measured <= threshold
            detail = ""
        except Exception as exc:  # a crashing check is a failed check
            measured, passed, detail = float("inf"), False, f"{type(exc).__name__}: {exc}"
        out.append(CheckResult(name, measured, threshold, bool(passed), time.perf_counter() - t0, detail))
    return out


def report_records(results) -> list[dict]:
    return [asdict(r) for r in results]
