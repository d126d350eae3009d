"""Mean-field fixed point psi = sigmoid(grad F~(psi)).

``solve_fixed_point`` accepts any ``grad_fn`` returning the (already scaled)
argument of the sigmoid, for a single ground set (shape (n,)) or a batch of
ground sets solved jointly (shape (B, n)).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diffcore import NumericalError
from .multilinear import ExactProblem, GradientScaler, ScalingConfig, TableProblem, check_psi, subset_values
from .setfn import SetFunctionModel


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-np.logaddexp(0.0, -x))


def sigmoid_prime(x):
    s = sigmoid(x)
    return s * (1.0 - s)


@dataclass(frozen=True)
class SolverConfig:
    method: str = "fpi"
    tol: float = 1e-6
    max_iter: int = 200
    damping: float = 0.0
    memory: int = 5
    regularization: float = 1e-8

    def __post_init__(self):
        if self.method not in ("fpi", "anderson"):
            raise ValueError(f"unknown fixed-point method {self.method!r}")
        if not self.tol > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not 0.0 <= self.damping < 1.0:
            raise ValueError("damping must lie in [0, 1)")
        if self.memory < 1:
            raise ValueError("anderson memory must be >= 1")


@dataclass
class SolveReport:
    psi: np.ndarray
    iterations: int
    residual: float
    converged: bool
    per_sample_residual: np.ndarray | None = None


def residual(psi, grad_fn) -> float:
    """Sup-norm of ``psi - sigmoid(grad_fn(psi))``."""
    psi = np.asarray(psi, dtype=np.float64)
    return float(np.max(np.abs(psi - sigmoid(grad_fn(psi))), initial=0.0))


def _map(grad_fn, psi):
    g = np.asarray(grad_fn(psi), dtype=np.float64)
    if g.shape != psi.shape:
        raise ValueError(f"grad_fn returned shape {g.shape}, expected {psi.shape}")
    if not np.all(np.isfinite(g)):
        bad = np.argwhere(~np.isfinite(g))[:5].tolist()
        raise NumericalError(f"non-finite gradient at entries {bad}")
    return sigmoid(g)


def _sample_residuals(diff):
    d = np.abs(diff)
    return d.max(axis=-1) if d.ndim > 1 else np.array([d.max(initial=0.0)])


def solve_fixed_point(grad_fn, psi0, cfg: SolverConfig = SolverConfig()) -> SolveReport:
    psi = check_psi(psi0).copy()
    if cfg.method == "anderson":
        return _anderson(grad_fn, psi, cfg)
    lam = cfg.damping
    for k in range(cfg.max_iter + 1):
        t = _map(grad_fn, psi)
        diff = psi - t
        r = float(np.max(np.abs(diff), initial=0.0))
        if r <= cfg.tol or k == cfg.max_iter:
            return SolveReport(psi, k, r, r <= cfg.tol, _sample_residuals(diff))
        psi = (1.0 - lam) * t + lam * psi


def _anderson(grad_fn, psi, cfg):
    shape = psi.shape
    X, F = [], []  # recent iterates and their residuals g(x) - x, flattened
    G = []
    x = psi.ravel()
    for k in range(cfg.max_iter + 1):
        gx = _map(grad_fn, x.reshape(shape)).ravel()
        f = gx - x
        r = float(np.max(np.abs(f), initial=0.0))
        if r <= cfg.tol or k == cfg.max_iter:
            return SolveReport(x.reshape(shape), k, r, r <= cfg.tol,
                               _sample_residuals(-f.reshape(shape)))
        X.append(x)
        F.append(f)
        G.append(gx)
        if len(F) > cfg.memory + 1:
            X.pop(0)
            F.pop(0)
            G.pop(0)
        if len(F) == 1:
            x_new = gx
        else:
            dF = np.stack([F[i + 1] - F[i] for i in range(len(F) - 1)], axis=1)
            dG = np.stack([G[i + 1] - G[i] for i in range(len(G) - 1)], axis=1)
            lhs = dF.T @ dF
            lhs += cfg.regularization * np.eye(lhs.shape[0]) * max(1.0, np.trace(lhs))
            gamma = np.linalg.solve(lhs, dF.T @ f)
            x_new = gx - dG @ gamma
        if cfg.damping:
            x_new = (1.0 - cfg.damping) * x_new + cfg.damping * x
        x = np.clip(x_new, 0.0, 1.0)


# ---------------------------------------------------------------------------
# convergence diagnostics

@dataclass
class ContractionReport:
    sup_abs: float
    bound: float
    lipschitz: float
    satisfied: bool


def contraction_check(model, features, psi_samples=None, scaling: ScalingConfig = ScalingConfig(),
                      *, n_pairs: int = 64, seed: int = 0) -> ContractionReport:
    """Check ``|V| * sup |F~| < 1`` for the effective (scaled) set function.

    The multilinear extension is a convex combination of vertex values, so
    the sup over the cube equals the max of |F| over subsets; it is computed
    exactly by enumeration. The scale factor for norm-based scaling depends
    on psi, so the largest factor over ``psi_samples`` is used. The empirical
    Lipschitz estimate is the larger of the max ratio over random pairs and
    the max spectral norm of the map's Jacobian at the sampled points, both
    computed with exact gradients.
    """
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    if isinstance(model, SetFunctionModel):
        prob = ExactProblem(model, features)
    else:
        prob = TableProblem(subset_values(model, n))
    rng = np.random.default_rng(seed)
    if psi_samples is None:
        psi_samples = rng.random((n_pairs, n))
    psi_samples = np.atleast_2d(psi_samples)

    def scaler(psi):
        return GradientScaler(prob.grad(psi)[None, :], scaling, n)

    factors = [scaler(p).factor for p in psi_samples]
    factor = max(factors)
    sup_abs = factor * float(np.max(np.abs(prob.values)))
    bound = n * sup_abs

    def T(psi):
        return sigmoid(scaler(psi).apply()[0])

    q = 0.0
    for p in psi_samples:
        other = rng.random(n)
        d = np.linalg.norm(p - other)
        if d > 0:
            q = max(q, np.linalg.norm(T(p) - T(other)) / d)
        sc = scaler(p)
        H = prob.hessian(p)
        slope = sigmoid_prime(sc.apply()[0])
        J = np.stack([slope * sc.jvp(H[:, c][None, :])[0] for c in range(n)], axis=1)
        q = max(q, float(np.linalg.norm(J, 2)))
    return ContractionReport(sup_abs, bound, q, bound < 1.0)


def iteration_bound(q: float, eps: float, ground_set_size: int) -> float:
    """Iterations after which ``q^K / (1-q) * sqrt(|V|) <= eps``."""
    if not 0.0 < q < 1.0:
        raise ValueError("q must lie in (0, 1)")
    if not eps > 0:
        raise ValueError("eps must be positive")
    return math.log(eps * (1.0 - q) / math.sqrt(ground_set_size)) / math.log(q)
