"""Multilinear extension of a set function: exact enumeration and sampling.

For a set function F on ground set V and inclusion probabilities psi,

    F~(psi) = sum_S F(S) prod_{j in S} psi_j prod_{j not in S} (1 - psi_j).

Its gradient and Hessian have pinned-coordinate forms, e.g.
``dF~/dpsi_i = E[F(S + i) - F(S - i)]`` with ``S ~ psi``. The exact routines
enumerate all 2^|V| subsets; the sampled routines draw Bernoulli subsets by
inverse CDF from frozen uniforms, so a single sample set can be reused by
every coordinate, every fixed-point iteration and the backward pass.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .diffcore import ParamVector, ShapeError
from .setfn import SetFunctionModel, SubsetBatch, eval_sets, pair_differences, param_grad_weighted

MAX_EXACT_ITEMS = 20


class GroundSetTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class EstimatorConfig:
    samples: int = 5
    seed: int = 0
    antithetic: bool = False
    exact: bool = False  # enumerate instead of sampling (small ground sets only)

    def __post_init__(self):
        if self.samples < 1:
            raise ValueError("samples must be >= 1")


SCALING_MODES = ("none", "constant", "frobenius", "nuclear")


@dataclass(frozen=True)
class ScalingConfig:
    mode: str = "none"
    constant: float = 1.0

    def __post_init__(self):
        if self.mode not in SCALING_MODES:
            raise ValueError(f"unknown scaling mode {self.mode!r}")
        if self.mode == "constant" and not self.constant > 0:
            raise ValueError("scaling constant must be positive")


def check_psi(psi) -> np.ndarray:
    psi = np.asarray(psi, dtype=np.float64)
    if np.any(psi < 0) or np.any(psi > 1) or not np.all(np.isfinite(psi)):
        raise ValueError("psi entries must lie in [0, 1]")
    return psi


# ---------------------------------------------------------------------------
# exact enumeration

def all_masks(n: int) -> np.ndarray:
    """All 2^n subsets as rows; row s contains item j iff bit j of s is set."""
    if n > MAX_EXACT_ITEMS:
        raise GroundSetTooLarge(f"|V|={n} exceeds enumeration limit {MAX_EXACT_ITEMS}")
    s = np.arange(2 ** n)[:, None]
    return ((s >> np.arange(n)[None, :]) & 1).astype(np.float64)


def subset_values(F_oracle, n: int) -> np.ndarray:
    """Table of F over all subsets, in :func:`all_masks` order.

    ``F_oracle`` is either such a table already or a callable mapping a
    (B, n) mask matrix to B values.
    """
    if n > MAX_EXACT_ITEMS:
        raise GroundSetTooLarge(f"|V|={n} exceeds enumeration limit {MAX_EXACT_ITEMS}")
    if callable(F_oracle):
        vals = np.asarray(F_oracle(all_masks(n)), dtype=np.float64)
    else:
        vals = np.asarray(F_oracle, dtype=np.float64)
    if vals.shape != (2 ** n,):
        raise ShapeError(f"expected {2 ** n} subset values, got shape {vals.shape}")
    return vals


def _cube(values, n):
    # axis j <-> item j
    return values.reshape((2,) * n).transpose(tuple(range(n - 1, -1, -1))) if n else values.reshape(())


def _contract(cube, psi, keep=()):
    out = cube
    for j in range(len(psi) - 1, -1, -1):
        if j in keep:
            continue
        out = np.tensordot(out, np.array([1.0 - psi[j], psi[j]]), axes=([j], [0]))
    return out


def exact_value(F_oracle, psi) -> float:
    psi = check_psi(psi)
    n = psi.size
    return float(_contract(_cube(subset_values(F_oracle, n), n), psi))


def exact_grad(F_oracle, psi) -> np.ndarray:
    psi = check_psi(psi)
    n = psi.size
    cube = _cube(subset_values(F_oracle, n), n)
    g = np.empty(n)
    for i in range(n):
        v = _contract(cube, psi, keep=(i,))
        g[i] = v[1] - v[0]
    return g


def exact_hessian(F_oracle, psi) -> np.ndarray:
    psi = check_psi(psi)
    n = psi.size
    cube = _cube(subset_values(F_oracle, n), n)
    H = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            v = _contract(cube, psi, keep=(i, j))
            H[i, j] = H[j, i] = v[1, 1] - v[0, 1] - v[1, 0] + v[0, 0]
    return H


def _subset_weight_jacobian(psi, masks) -> np.ndarray:
    """(n, 2^n) matrix of d/dpsi_j of each subset's probability."""
    n = psi.size
    fac = np.where(masks > 0, psi, 1.0 - psi)
    out = np.empty((n, masks.shape[0]))
    for j in range(n):
        f = fac.copy()
        f[:, j] = np.where(masks[:, j] > 0, 1.0, -1.0)
        out[j] = np.prod(f, axis=1)
    return out


# ---------------------------------------------------------------------------
# sampling

def sample_uniforms(cfg: EstimatorConfig, n: int, *stream: int) -> np.ndarray:
    """Frozen (m, n) uniforms for one estimator instance.

    Drawn from a counter-based Philox stream keyed by ``(cfg.seed, *stream)``,
    so any (step, sample) pair can be regenerated independently.
    """
    ss = np.random.SeedSequence([int(cfg.seed) & 0xFFFFFFFFFFFFFFFF, *[int(s) for s in stream]])
    rng = np.random.Generator(np.random.Philox(ss))
    m = cfg.samples
    if cfg.antithetic:
        half = (m + 1) // 2
        u = rng.random((half, n))
        return np.concatenate([u, 1.0 - u], axis=0)[:m]
    return rng.random((m, n))


class TableProblem:
    """Exact value/gradient/Hessian of a tabulated set function."""

    def __init__(self, values):
        self.values = np.asarray(values, dtype=np.float64)
        self.n = int(np.log2(self.values.size))

    def value(self, psi) -> float:
        return exact_value(self.values, psi)

    def grad(self, psi) -> np.ndarray:
        return exact_grad(self.values, psi)

    def hessian(self, psi) -> np.ndarray:
        return exact_hessian(self.values, psi)


class ExactProblem(TableProblem):
    """Gradient/Hessian oracle for one ground set of a model, by enumeration."""

    def __init__(self, model: SetFunctionModel, features):
        self.model = model
        self.features = np.asarray(features, dtype=np.float64)
        self.masks = all_masks(self.features.shape[0])
        super().__init__(eval_sets(model, SubsetBatch(self.features, self.masks)))

    def grad_param_vjp(self, psi, w, preactivations=None) -> ParamVector:
        """Gradient in theta of ``sum_j w_j dF~/dpsi_j`` at fixed ``psi``."""
        coef = _subset_weight_jacobian(check_psi(psi), self.masks)
        return param_grad_weighted(self.model, SubsetBatch(self.features, self.masks), coef.T @ w)

    def retained_arrays(self):
        return [self.values]


class SampledProblem:
    """Monte Carlo gradient/Hessian oracle with a frozen uniform sample set.

    Subsets are ``S_l = {j : U[l, j] < psi_j}``. Coordinate ``j`` uses
    ``S_l - j`` and ``S_l + j``, which is distributed as a draw with
    ``psi_j`` pinned to 0 plus/minus item ``j``; pairs (i, j) likewise pin
    both coordinates.
    """

    def __init__(self, model: SetFunctionModel, features, uniforms):
        self.model = model
        self.features = np.asarray(features, dtype=np.float64)
        self.uniforms = np.asarray(uniforms, dtype=np.float64)
        self.n = self.features.shape[0]
        if self.uniforms.ndim != 2 or self.uniforms.shape[1] != self.n:
            raise ShapeError(f"uniforms {self.uniforms.shape} do not match {self.n} items")
        self.m = self.uniforms.shape[0]
        self.keys = model.item_keys(self.features)

    def subsets(self, psi) -> np.ndarray:
        psi = check_psi(psi)
        return (self.uniforms < psi).astype(np.float64)

    def _base(self, x):
        return x @ self.keys + self.model.first_bias

    def value(self, psi) -> float:
        x = self.subsets(psi)
        return float(np.mean(self.model.tail(self._base(x))))

    def gain_preactivations(self, psi):
        """Subsets ``x`` (m, n) and pre-activations of each ``S_l - j``, shape (m, n, H).

        Adding ``keys[j]`` to row (l, j) gives the pre-activation of ``S_l + j``.
        """
        x = self.subsets(psi)
        base = self._base(x)
        return x, base[:, None, :] - x[:, :, None] * self.keys[None]

    def grad(self, psi) -> np.ndarray:
        _, without = self.gain_preactivations(psi)
        gains = self.model.tail(without + self.keys[None]) - self.model.tail(without)
        return gains.mean(axis=0)

    def hessian(self, psi) -> np.ndarray:
        x = self.subsets(psi)
        upper = pair_differences(self.model, self._base(x), x, self.keys) / self.m
        return upper + upper.T

    def gain_masks(self, psi):
        """Masks for S_l + j and S_l - j, each shaped (m, n, n)."""
        x = self.subsets(psi)
        eye = np.eye(self.n)
        plus = np.maximum(x[:, None, :], eye[None])
        minus = x[:, None, :] * (1.0 - eye[None])
        return plus, minus

    def grad_param_vjp(self, psi, w, preactivations=None) -> ParamVector:
        """Gradient in theta of ``sum_j w_j g_j`` with the subsets held fixed.

        ``preactivations`` is a stored :meth:`gain_preactivations` result for
        ``psi``; without it they are recomputed.
        """
        w = np.asarray(w, dtype=np.float64)
        x, without = preactivations if preactivations is not None else self.gain_preactivations(psi)
        m, n = x.shape
        gy = np.broadcast_to(w[None, :] / m, (m, n))
        gp, dzp = self.model.tail_vjp(without + self.keys[None], gy)
        gm, dzm = self.model.tail_vjp(without, -gy)
        # S_l + j contains item i iff x[l, i] or i == j; S_l - j iff x[l, i] and i != j
        dkeys = x.T @ (dzp.sum(axis=1) + dzm.sum(axis=1))
        dkeys += np.einsum("li,lih->ih", 1.0 - x, dzp) - np.einsum("li,lih->ih", x, dzm)
        grads = {k: gp[k] + gm[k] for k in gp}
        grads["rho0.b"] = dzp.sum(axis=(0, 1)) + dzm.sum(axis=(0, 1))
        grads.update(self.model.keys_vjp(self.features, dkeys))
        return ParamVector((k, grads[k]) for k in self.model.params)

    def grad_param_vjp_reference(self, psi, w) -> ParamVector:
        """Same as :meth:`grad_param_vjp`, via the generic differentiation engine."""
        w = np.asarray(w, dtype=np.float64)
        plus, minus = self.gain_masks(psi)
        masks = np.concatenate([plus.reshape(-1, self.n), minus.reshape(-1, self.n)])
        wl = np.broadcast_to(w[None, :] / self.m, (self.m, self.n)).reshape(-1)
        weights = np.concatenate([wl, -wl])
        return param_grad_weighted(self.model, SubsetBatch(self.features, masks), weights)

    def retained_arrays(self):
        return [self.uniforms, self.keys]


def make_problem(model, features, cfg: EstimatorConfig, *stream):
    if cfg.exact:
        return ExactProblem(model, features)
    n = np.shape(features)[0]
    return SampledProblem(model, features, sample_uniforms(cfg, n, *stream))


def mc_grad(model: SetFunctionModel, features, psi, cfg: EstimatorConfig) -> np.ndarray:
    n = np.shape(features)[0]
    return SampledProblem(model, features, sample_uniforms(cfg, n)).grad(psi)


def mc_hessian(model: SetFunctionModel, features, psi, cfg: EstimatorConfig) -> np.ndarray:
    n = np.shape(features)[0]
    return SampledProblem(model, features, sample_uniforms(cfg, n)).hessian(psi)


# ---------------------------------------------------------------------------
# gradient scaling

class GradientScaler:
    """Scaling ``S = 2 G / (|V| Q)`` of a (batch, |V|) gradient matrix.

    ``Q`` is the configured constant, or the Frobenius / nuclear norm of
    ``G`` itself. Mode ``none`` is the identity. The norm modes depend on
    ``G``, so :meth:`jvp` and :meth:`vjp` include the derivative of ``Q``.
    """

    def __init__(self, G, cfg: ScalingConfig, ground_set_size: int):
        self.G = np.atleast_2d(np.asarray(G, dtype=np.float64))
        self.cfg = cfg
        self.n = int(ground_set_size)
        self.degenerate = False
        self.dQ = None
        mode = cfg.mode
        if mode == "none":
            self.Q = 1.0
            self.factor = 1.0
            return
        if mode == "constant":
            self.Q = float(cfg.constant)
        elif mode == "frobenius":
            self.Q = float(np.linalg.norm(self.G))
            if self.Q > 0:
                self.dQ = self.G / self.Q
        else:
            U, s, Vt = np.linalg.svd(self.G, full_matrices=False)
            self.Q = float(s.sum())
            if self.Q > 0:
                r = int(np.sum(s > s[0] * 1e-12))
                self.dQ = U[:, :r] @ Vt[:r]
        if self.Q == 0:
            self.degenerate = True
            self.factor = 1.0
            self.dQ = None
            return
        self.factor = 2.0 / (self.n * self.Q)

    def apply(self) -> np.ndarray:
        return self.factor * self.G

    def jvp(self, dG) -> np.ndarray:
        dG = np.asarray(dG).reshape(self.G.shape)
        if self.dQ is None:
            return self.factor * dG
        return self.factor * (dG - self.G * (np.sum(self.dQ * dG) / self.Q))

    def vjp(self, dS) -> np.ndarray:
        dS = np.asarray(dS).reshape(self.G.shape)
        if self.dQ is None:
            return self.factor * dS
        return self.factor * (dS - self.dQ * (np.sum(self.G * dS) / self.Q))


def scale_gradient(grad_batch, cfg: ScalingConfig, ground_set_size: int) -> np.ndarray:
    """Return ``2 g / (|V| Q)``; an all-zero batch is returned unchanged with a warning."""
    g = np.asarray(grad_batch, dtype=np.float64)
    sc = GradientScaler(g, cfg, ground_set_size)
    if sc.degenerate:
        warnings.warn("gradient norm is zero; scaling skipped", RuntimeWarning, stacklevel=2)
    return sc.apply().reshape(g.shape)
