"""Gradients of a loss at the mean-field fixed point with respect to the
set-function parameters.

Write the (batched) map as ``T(psi) = sigmoid(S(G(psi, theta)))`` where ``G``
stacks the per-set gradient estimates and ``S`` is the gradient scaling. At a
fixed point, with ``Sigma' = sigmoid'(S)``, ``L`` the linearization of ``S``
and ``H`` the per-set Hessians,

    A = I - Sigma' L H,        A^T u = v,        theta_bar = dG/dtheta^T L^T (Sigma' u).

The unrolled alternative records K explicit iterations and backpropagates
through each; its retained state grows with K while the implicit path keeps
one workspace.
"""
from __future__ import annotations

import math
import warnings
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg, gmres

from . import fixedpoint
from .diffcore import ParamVector, ShapeError
from .multilinear import GradientScaler, ScalingConfig

# ---------------------------------------------------------------------------
# retained-buffer accounting

_meters: list["RetentionMeter"] = []


class RetentionBudgetExceeded(MemoryError):
    pass


class RetentionMeter:
    """Counts bytes of arrays a backward pass keeps alive."""

    def __init__(self, cap: int | None = None):
        self.bytes = 0
        self.buffers = 0
        self.cap = cap

    def add(self, arrays):
        for a in arrays:
            self.bytes += int(np.asarray(a).nbytes)
            self.buffers += 1
        if self.cap is not None and self.bytes > self.cap:
            raise RetentionBudgetExceeded(f"retained {self.bytes} bytes, cap is {self.cap}")


@contextmanager
def retention_meter(cap: int | None = None):
    meter = RetentionMeter(cap)
    _meters.append(meter)
    try:
        yield meter
    finally:
        _meters.remove(meter)


def retain(*arrays):
    for meter in _meters:
        meter.add(arrays)


# ---------------------------------------------------------------------------
# workspace

def _batch_grad(problems, psi):
    return np.stack([p.grad(psi[b]) for b, p in enumerate(problems)])


def _batch_hessian(problems, psi):
    return np.stack([p.hessian(psi[b]) for b, p in enumerate(problems)])


@dataclass
class ImplicitWorkspace:
    problems: list
    psi: np.ndarray       # (B, n) fixed point
    grad: np.ndarray      # (B, n) unscaled gradient estimate at psi
    scaler: GradientScaler
    slope: np.ndarray     # (B, n) sigmoid' of the scaled gradient
    hessian: np.ndarray   # (B, n, n), zero diagonal

    @property
    def shape(self):
        return self.psi.shape


def build_workspace(problems, psi, scaling: ScalingConfig = ScalingConfig()) -> ImplicitWorkspace:
    """Linearize the fixed-point map at ``psi`` (shape (n,) or (B, n))."""
    psi = np.atleast_2d(np.asarray(psi, dtype=np.float64))
    if psi.shape[0] != len(problems):
        raise ShapeError(f"{len(problems)} problems for psi of shape {psi.shape}")
    G = _batch_grad(problems, psi)
    scaler = GradientScaler(G, scaling, psi.shape[1])
    slope = fixedpoint.sigmoid_prime(scaler.apply())
    H = _batch_hessian(problems, psi)
    retain(psi, G, slope, H)
    for p in problems:
        retain(*p.retained_arrays())
    return ImplicitWorkspace(list(problems), psi, G, scaler, slope, H)


def a_matvec(ws: ImplicitWorkspace, x) -> np.ndarray:
    """``x - Sigma' L (H x)`` without forming A."""
    x = np.asarray(x, dtype=np.float64)
    xb = x.reshape(ws.shape)
    Hx = np.einsum("bij,bj->bi", ws.hessian, xb)
    return (xb - ws.slope * ws.scaler.jvp(Hx)).reshape(x.shape)


def a_rmatvec(ws: ImplicitWorkspace, y) -> np.ndarray:
    """``A^T y = y - H L^T (Sigma' y)``; each H is symmetric."""
    y = np.asarray(y, dtype=np.float64)
    yb = y.reshape(ws.shape)
    w = ws.scaler.vjp(ws.slope * yb)
    return (yb - np.einsum("bij,bj->bi", ws.hessian, w)).reshape(y.shape)


def dense_a(ws: ImplicitWorkspace) -> np.ndarray:
    size = ws.psi.size
    return np.stack([a_matvec(ws, e) for e in np.eye(size)], axis=1)


# ---------------------------------------------------------------------------
# linear solves

SOLVE_METHODS = ("normal_cg", "gmres")
DENSE_FALLBACK_LIMIT = 4000


class LinearSolveError(RuntimeError):
    def __init__(self, msg, x=None, residual=math.inf):
        super().__init__(msg)
        self.x = x
        self.residual = residual


@dataclass(frozen=True)
class LinearSolveConfig:
    method: str = "normal_cg"
    tol: float = 1e-10
    max_iter: int = 1000
    restart: int = 50

    def __post_init__(self):
        if self.method not in SOLVE_METHODS:
            raise ValueError(f"unknown linear solver {self.method!r}")
        if not self.tol > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iter < 1 or self.restart < 1:
            raise ValueError("max_iter and restart must be >= 1")


def _target(rhs, tol):
    return tol * max(1.0, float(np.linalg.norm(rhs)))


def _operator(n, fn):
    # scipy reuses its work vectors, so never hand back an alias of the input
    return LinearOperator((n, n), matvec=lambda z: np.array(fn(z), dtype=np.float64), dtype=np.float64)


def _gmres(matvec, rhs, cfg):
    n = rhs.size
    op = _operator(n, matvec)
    restart = min(cfg.restart, n)
    cycles = max(1, math.ceil(cfg.max_iter / restart))
    x, info = gmres(op, rhs, rtol=cfg.tol, atol=cfg.tol, restart=restart, maxiter=cycles)
    return x, info


def _normal_cg(matvec, rmatvec, rhs, cfg):
    # CG on A^T A x = A^T b. Its stopping test is on the normal residual, so
    # tighten it until the true residual meets the target.
    n = rhs.size
    op = _operator(n, lambda z: rmatvec(matvec(z)))
    nrhs = rmatvec(rhs)
    target = _target(rhs, cfg.tol)
    x = np.zeros(n)
    atol = target
    info = 0
    for _ in range(4):
        x, info = cg(op, nrhs, x0=x, rtol=0.0, atol=atol, maxiter=cfg.max_iter)
        if np.linalg.norm(matvec(x) - rhs) <= target or info != 0:
            break
        atol *= 1e-2
    return x, info


def linear_solve(matvec, rhs, cfg: LinearSolveConfig = LinearSolveConfig(), rmatvec=None) -> np.ndarray:
    """Solve ``A x = rhs`` for a matrix-free ``A``.

    ``normal_cg`` needs ``rmatvec`` (the transpose product). Raises
    :class:`LinearSolveError` when the residual target
    ``tol * max(1, |rhs|)`` is not met.
    """
    rhs = np.asarray(rhs, dtype=np.float64).ravel()
    if not np.all(np.isfinite(rhs)):
        raise ValueError("right-hand side is not finite")
    if cfg.method == "normal_cg":
        if rmatvec is None:
            raise ValueError("normal_cg requires the transpose product rmatvec")
        x, info = _normal_cg(matvec, rmatvec, rhs, cfg)
    else:
        x, info = _gmres(matvec, rhs, cfg)
    res = float(np.linalg.norm(matvec(x) - rhs))
    if not np.all(np.isfinite(x)) or res > _target(rhs, cfg.tol):
        raise LinearSolveError(f"{cfg.method} stopped with residual {res:.3e} (info={info})", x, res)
    return x


def solve_with_fallback(matvec, rhs, cfg: LinearSolveConfig, rmatvec) -> np.ndarray:
    """Configured method, then the other Krylov method, then dense least squares."""
    order = [cfg.method] + [m for m in ("gmres", "normal_cg") if m != cfg.method]
    errors = []
    for method in order:
        try:
            return linear_solve(matvec, rhs, LinearSolveConfig(method, cfg.tol, cfg.max_iter, cfg.restart),
                                rmatvec)
        except LinearSolveError as exc:
            errors.append(str(exc))
    rhs = np.asarray(rhs, dtype=np.float64).ravel()
    if rhs.size > DENSE_FALLBACK_LIMIT:
        raise LinearSolveError("; ".join(errors))
    A = np.stack([matvec(e) for e in np.eye(rhs.size)], axis=1)
    warnings.warn("Krylov solves failed (" + "; ".join(errors) + "); using dense least squares",
                  RuntimeWarning, stacklevel=2)
    return np.linalg.lstsq(A, rhs, rcond=None)[0]


# ---------------------------------------------------------------------------
# gradients

def _param_pullback(problems, psi, gbar, stored=None) -> ParamVector:
    total = None
    for b, p in enumerate(problems):
        g = p.grad_param_vjp(psi[b], gbar[b], stored[b] if stored else None)
        total = g if total is None else total + g
    return total


def implicit_vjp(v, ws: ImplicitWorkspace, solve_cfg: LinearSolveConfig = LinearSolveConfig()) -> ParamVector:
    """Pull the loss cotangent ``v = dL/dpsi*`` back to the parameters."""
    v = np.asarray(v, dtype=np.float64).reshape(ws.shape)
    if not np.any(v):
        return ws.problems[0].model.params.zeros_like()
    u = solve_with_fallback(lambda y: a_rmatvec(ws, y), v.ravel(), solve_cfg,
                            lambda x: a_matvec(ws, x)).reshape(ws.shape)
    gbar = ws.scaler.vjp(ws.slope * u)
    return _param_pullback(ws.problems, ws.psi, gbar)


@dataclass
class _Layer:
    psi: np.ndarray
    scaler: GradientScaler
    slope: np.ndarray
    hessian: np.ndarray
    stored: list | None


def _layer_forward(problems, psi):
    """Gradients at ``psi`` plus whatever each problem's pullback can reuse."""
    if all(hasattr(p, "gain_preactivations") for p in problems):
        stored = [p.gain_preactivations(psi[b]) for b, p in enumerate(problems)]
        G = np.stack([(p.model.tail(w + p.keys[None]) - p.model.tail(w)).mean(axis=0)
                      for p, (_, w) in zip(problems, stored)])
        return G, stored
    return _batch_grad(problems, psi), None


class UnrolledTape:
    """K recorded fixed-point iterations from ``psi0``; ``psi`` is the last iterate.

    Each layer keeps its network pre-activations for the backward pass, as
    reverse-mode differentiation through the iterations would.
    """

    def __init__(self, problems, psi0, K: int, scaling: ScalingConfig = ScalingConfig()):
        if K < 1:
            raise ValueError("K must be >= 1")
        self.problems = list(problems)
        psi = np.atleast_2d(np.asarray(psi0, dtype=np.float64))
        if psi.shape[0] != len(self.problems):
            raise ShapeError(f"{len(self.problems)} problems for psi of shape {psi.shape}")
        for p in self.problems:
            retain(*p.retained_arrays())
        self.layers = []
        for _ in range(K):
            G, stored = _layer_forward(self.problems, psi)
            sc = GradientScaler(G, scaling, psi.shape[1])
            S = sc.apply()
            slope = fixedpoint.sigmoid_prime(S)
            H = _batch_hessian(self.problems, psi)
            retain(psi, G, S, slope, H, *(a for pair in stored or () for a in pair))
            self.layers.append(_Layer(psi, sc, slope, H, stored))
            psi = fixedpoint.sigmoid(S)
        self.psi = psi

    def vjp(self, v) -> ParamVector:
        pbar = np.asarray(v, dtype=np.float64).reshape(self.psi.shape)
        total = self.problems[0].model.params.zeros_like()
        for layer in reversed(self.layers):
            gbar = layer.scaler.vjp(layer.slope * pbar)
            total = total + _param_pullback(self.problems, layer.psi, gbar, layer.stored)
            pbar = np.einsum("bij,bj->bi", layer.hessian, gbar)
        return total


def unrolled_vjp(v, psi0, K: int, problems, scaling: ScalingConfig = ScalingConfig()) -> ParamVector:
    return UnrolledTape(problems, psi0, K, scaling).vjp(v)
