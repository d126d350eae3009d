"""Training loop: solve the mean-field fixed point per batch, score it against
the optimal subsets with a cross-entropy loss, and step the parameters using
either the implicit gradient or backpropagation through K unrolled
iterations."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .diffcore import ParamVector, ShapeError
from .fixedpoint import SolverConfig, solve_fixed_point
from .implicit import LinearSolveConfig, UnrolledTape, build_workspace, implicit_vjp
from .multilinear import EstimatorConfig, GradientScaler, ScalingConfig, exact_value, make_problem
from .setfn import Arch, SetFunctionModel, model_init

log = logging.getLogger(__name__)

GRAD_MODES = ("implicit", "unrolled")


class SolverDivergence(RuntimeError):
    """Too many fixed-point solves in an epoch missed the tolerance."""

    def __init__(self, msg, epoch, rate, residuals):
        super().__init__(msg)
        self.epoch = epoch
        self.rate = rate
        self.residuals = residuals


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    batch_size: int = 128
    epochs: int = 50
    depth: int = 2
    init_width: int = 256
    hidden_width: int = 500
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    scaling: ScalingConfig = field(default_factory=lambda: ScalingConfig("frobenius"))
    linear: LinearSolveConfig = field(default_factory=LinearSolveConfig)
    grad_mode: str = "implicit"
    unroll_k: int = 5
    clamp: float = 1e-6
    seed: int = 0
    max_divergence_rate: float = 0.5

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("learning rate must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not 0.0 < self.clamp < 0.1:
            raise ValueError("clamp must lie in (0, 0.1)")
        if self.grad_mode not in GRAD_MODES:
            raise ValueError(f"unknown gradient mode {self.grad_mode!r}")
        if self.batch_size < 1 or self.epochs < 0 or self.unroll_k < 1:
            raise ValueError("batch_size and unroll_k must be >= 1, epochs >= 0")

    def arch(self, d_f: int) -> Arch:
        return Arch(d_f, self.depth, self.init_width, self.hidden_width)


@dataclass
class TrainHistory:
    loss: list = field(default_factory=list)
    residual: list = field(default_factory=list)
    iterations: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)
    divergence_rate: list = field(default_factory=list)

    def append(self, **kw):
        for k, v in kw.items():
            getattr(self, k).append(v)

    def to_dict(self) -> dict:
        return {k: list(getattr(self, k)) for k in
                ("loss", "residual", "iterations", "wall_time", "divergence_rate")}


# ---------------------------------------------------------------------------
# objectives

def mean_field_loss(psi, optimal_mask, clamp: float = 1e-6) -> float:
    psi = np.asarray(psi, dtype=np.float64)
    mask = np.asarray(optimal_mask)
    if mask.shape != psi.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match psi {psi.shape}")
    mask = mask.astype(bool)
    p = np.clip(psi, clamp, 1.0 - clamp)
    return float(-np.sum(np.log(p[mask])) - np.sum(np.log1p(-p[~mask])))


def mean_field_loss_grad(psi, optimal_mask, clamp: float = 1e-6) -> np.ndarray:
    """Derivative of :func:`mean_field_loss`; zero where the clamp is active."""
    psi = np.asarray(psi, dtype=np.float64)
    mask = np.asarray(optimal_mask).astype(bool)
    if mask.shape != psi.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match psi {psi.shape}")
    p = np.clip(psi, clamp, 1.0 - clamp)
    g = np.where(mask, -1.0 / p, 1.0 / (1.0 - p))
    return np.where((psi < clamp) | (psi > 1.0 - clamp), 0.0, g)


def bernoulli_entropy(psi) -> float:
    psi = np.asarray(psi, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(psi > 0, psi * np.log(psi), 0.0) - np.where(psi < 1, (1 - psi) * np.log1p(-psi), 0.0)
    return float(np.sum(h))


def elbo_exact(F_oracle, psi) -> float:
    """Multilinear extension plus the entropy of independent Bernoullis."""
    return exact_value(F_oracle, psi) + bernoulli_entropy(psi)


# ---------------------------------------------------------------------------
# optimizers

@dataclass
class OptimizerState:
    step: int = 0
    m: ParamVector | None = None
    v: ParamVector | None = None


def optimizer_step(params: ParamVector, grad: ParamVector, state: OptimizerState,
                   cfg: TrainConfig) -> tuple[ParamVector, OptimizerState]:
    if params.shapes() != grad.shapes():
        raise ShapeError("gradient layout does not match parameters")
    if cfg.optimizer == "sgd":
        return params - cfg.lr * grad, OptimizerState(state.step + 1)
    t = state.step + 1
    m = grad * (1 - cfg.beta1) if state.m is None else state.m * cfg.beta1 + grad * (1 - cfg.beta1)
    g2 = grad.map(np.square)
    v = g2 * (1 - cfg.beta2) if state.v is None else state.v * cfg.beta2 + g2 * (1 - cfg.beta2)
    c1 = 1 - cfg.beta1 ** t
    c2 = 1 - cfg.beta2 ** t
    step = ParamVector((k, (m[k] / c1) / (np.sqrt(v[k] / c2) + cfg.eps_adam)) for k in params)
    return params - cfg.lr * step, OptimizerState(t, m, v)


# ---------------------------------------------------------------------------
# batch solve and gradient

@dataclass
class BatchResult:
    loss: float
    grad: ParamVector
    psi: np.ndarray
    residuals: np.ndarray
    iterations: int


def batch_grad_fn(problems, scaling: ScalingConfig):
    """The scaled batch gradient map ``psi (B, n) -> 2 G / (|V| Q)``."""
    n = problems[0].n

    def fn(psi):
        G = np.stack([p.grad(psi[b]) for b, p in enumerate(problems)])
        return GradientScaler(G, scaling, n).apply()
    return fn


def batch_step(model: SetFunctionModel, features: list, masks: np.ndarray, cfg: TrainConfig,
               stream: tuple = ()) -> BatchResult:
    """Loss (batch mean) and its parameter gradient for one batch."""
    n = features[0].shape[0]
    if any(f.shape[0] != n for f in features):
        raise ShapeError("all ground sets in a batch must have the same size")
    problems = [make_problem(model, f, cfg.estimator, *stream, b) for b, f in enumerate(features)]
    B = len(problems)
    psi0 = np.full((B, n), 0.5)
    if cfg.grad_mode == "implicit":
        rep = solve_fixed_point(batch_grad_fn(problems, cfg.scaling), psi0, cfg.solver)
        psi, residuals, iters = rep.psi, rep.per_sample_residual, rep.iterations
    else:
        tape = UnrolledTape(problems, psi0, cfg.unroll_k, cfg.scaling)
        psi = tape.psi
        residuals = np.abs(psi - tape.layers[-1].psi).max(axis=1)
        iters = cfg.unroll_k
    loss = np.mean([mean_field_loss(psi[b], masks[b], cfg.clamp) for b in range(B)])
    v = np.stack([mean_field_loss_grad(psi[b], masks[b], cfg.clamp) for b in range(B)]) / B
    if cfg.grad_mode == "implicit":
        grad = implicit_vjp(v, build_workspace(problems, psi, cfg.scaling), cfg.linear)
    else:
        grad = tape.vjp(v)
    return BatchResult(float(loss), grad, psi, residuals, iters)


def _masks(dataset, idx):
    out = []
    for i in idx:
        s = dataset.samples[i]
        m = np.zeros(s.features.shape[0], dtype=bool)
        m[list(s.optimal)] = True
        out.append(m)
    return out


def train(dataset, cfg: TrainConfig = TrainConfig(), model: SetFunctionModel | None = None,
          callback=None) -> tuple[SetFunctionModel, TrainHistory]:
    """Fit a set-function model to ``dataset``; deterministic given ``cfg.seed``.

    ``callback(epoch, model, history)`` runs after each epoch.
    """
    samples = dataset.samples
    if not samples:
        raise ValueError("dataset is empty")
    d_f = samples[0].features.shape[1]
    if model is None:
        model = model_init(cfg.arch(d_f), cfg.seed)
    estimator = replace(cfg.estimator, seed=cfg.estimator.seed ^ cfg.seed)
    cfg = replace(cfg, estimator=estimator)
    state = OptimizerState()
    hist = TrainHistory()
    N = len(samples)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(N)
        losses, residuals, iters = [], [], []
        for step, start in enumerate(range(0, N, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            feats = [samples[i].features for i in idx]
            res = batch_step(model, feats, _masks(dataset, idx), cfg, stream=(epoch, step))
            params, state = optimizer_step(model.params, res.grad, state, cfg)
            model = model.with_params(params)
            losses.append(res.loss * len(idx))
            residuals.extend(res.residuals.tolist())
            iters.append(res.iterations)
        residuals = np.asarray(residuals)
        tol = cfg.solver.tol if cfg.grad_mode == "implicit" else np.inf
        rate = float(np.mean(residuals > tol))
        hist.append(loss=float(np.sum(losses) / N), residual=float(residuals.mean()),
                    iterations=float(np.mean(iters)), wall_time=time.perf_counter() - t0,
                    divergence_rate=rate)
        log.info("epoch %d loss %.4f residual %.2e iters %.1f (%.1fs)", epoch + 1, hist.loss[-1],
                 hist.residual[-1], hist.iterations[-1], hist.wall_time[-1])
        if rate > cfg.max_divergence_rate:
            raise SolverDivergence(
                f"epoch {epoch + 1}: {rate:.0%} of fixed-point solves missed tolerance {tol:g} "
                f"(max residual {residuals.max():.3e})", epoch, rate, residuals)
        if callback is not None:
            callback(epoch, model, hist)
    return model, hist
