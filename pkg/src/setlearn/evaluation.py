"""Subset inference, Jaccard scoring, enumeration oracles for tiny ground sets,
and retained-memory profiling of the two gradient modes."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .fixedpoint import SolverConfig, sigmoid, solve_fixed_point
from .implicit import UnrolledTape, build_workspace, implicit_vjp, retention_meter
from .multilinear import (EstimatorConfig, GradientScaler, GroundSetTooLarge, ScalingConfig,
                          make_problem, subset_values)
from .setfn import SetFunctionModel, model_init
from .train import mean_field_loss_grad

INFERENCE_MODES = ("one-step", "converge")
MAX_ORACLE_ITEMS = 15
WORKERS_ENV = "SETLEARN_WORKERS"


@dataclass
class Metrics:
    mean_jc: float
    per_sample: list
    mode: str

    def __post_init__(self):
        if any(not 0.0 <= j <= 1.0 for j in self.per_sample):
            raise ValueError("Jaccard values must lie in [0, 1]")


def top_k(psi, k: int) -> list:
    """Indices of the k largest entries, ties to the lowest index, sorted."""
    psi = np.asarray(psi, dtype=np.float64)
    if not 1 <= k <= psi.size:
        raise ValueError(f"k={k} outside [1, {psi.size}]")
    return sorted(np.argsort(-psi, kind="stable")[:k].tolist())


def infer_psi(model: SetFunctionModel, features, mode: str = "converge",
              solver_cfg: SolverConfig = SolverConfig(),
              estimator_cfg: EstimatorConfig = EstimatorConfig(),
              scaling: ScalingConfig = ScalingConfig("frobenius"), stream=()) -> np.ndarray:
    if mode not in INFERENCE_MODES:
        raise ValueError(f"unknown inference mode {mode!r}")
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    prob = make_problem(model, features, estimator_cfg, *stream)

    def grad_fn(psi):
        return GradientScaler(prob.grad(psi[0])[None], scaling, n).apply()

    psi0 = np.full((1, n), 0.5)
    if mode == "one-step":
        return sigmoid(grad_fn(psi0))[0]
    return solve_fixed_point(grad_fn, psi0, solver_cfg).psi[0]


def infer_subset(model: SetFunctionModel, features, k: int, mode: str = "converge",
                 solver_cfg: SolverConfig = SolverConfig(), **kw) -> list:
    n = np.shape(features)[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside [1, {n}]")
    return top_k(infer_psi(model, features, mode, solver_cfg, **kw), k)


def jaccard(a, b) -> float:
    a, b = set(a), set(b)
    union = a | b
    if not union:
        return 1.0
    return len(a & b) / len(union)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def mean_jc(model: SetFunctionModel, dataset, mode: str = "converge",
            solver_cfg: SolverConfig = SolverConfig(), **kw) -> Metrics:
    """Mean Jaccard of top-|S*| predictions; sample i uses estimator stream (i,)."""

    def score(i):
        s = dataset.samples[i]
        pred = infer_subset(model, s.features, len(s.optimal), mode, solver_cfg, stream=(i,), **kw)
        return jaccard(pred, s.optimal)

    idx = range(len(dataset.samples))
    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            jcs = list(pool.map(score, idx))
    else:
        jcs = [score(i) for i in idx]
    return Metrics(float(np.mean(jcs)), jcs, mode)


def brute_force_oracle(F_oracle, features=None):
    """Maximizing subset (as an item list) and the Boltzmann table ``exp F / Z``.

    ``F_oracle`` is a model (with ``features``), a callable on mask matrices,
    or a table of subset values in bit order (bit j <-> item j). Among tied
    maxima the one with the lexicographically smallest mask string (item 0
    first) wins.
    """
    if isinstance(F_oracle, SetFunctionModel):
        features = np.asarray(features, dtype=np.float64)
        n = features.shape[0]
        if n > MAX_ORACLE_ITEMS:
            raise GroundSetTooLarge(f"|V|={n} exceeds oracle limit {MAX_ORACLE_ITEMS}")
        values = subset_values(lambda M: F_oracle(features, M), n)
    else:
        if callable(F_oracle):
            n = np.shape(features)[0] if features is not None else None
            if n is None:
                raise ValueError("ground set size needed for a callable oracle")
        else:
            n = int(np.log2(np.size(F_oracle)))
        if n > MAX_ORACLE_ITEMS:
            raise GroundSetTooLarge(f"|V|={n} exceeds oracle limit {MAX_ORACLE_ITEMS}")
        values = subset_values(F_oracle, n)
    best = np.flatnonzero(values == values.max())
    # mask string for subset s is bits 0..n-1 of s; lexicographic order on it
    # is numeric order on the bit-reversed integer
    rev = [int(format(s, f"0{n}b")[::-1], 2) if n else 0 for s in best]
    s = int(best[int(np.argmin(rev))])
    subset = [j for j in range(n) if s >> j & 1]
    logz = np.logaddexp.reduce(values)
    return subset, np.exp(values - logz)


# ---------------------------------------------------------------------------
# memory profile

@dataclass
class RetentionProfile:
    K: list
    bytes: dict = field(default_factory=dict)  # mode -> list of (min, mean, max) per K

    def __post_init__(self):
        if list(self.K) != sorted(set(self.K)):
            raise ValueError("K list must be strictly increasing")

    def series(self, mode: str, stat: str = "mean") -> list:
        i = ("min", "mean", "max").index(stat)
        return [row[i] for row in self.bytes[mode]]

    def to_records(self) -> list:
        return [{"mode": mode, "K": K, "min": lo, "mean": mid, "max": hi}
                for mode, rows in self.bytes.items() for K, (lo, mid, hi) in zip(self.K, rows)]


def _one_step_bytes(model, features, masks, cfg, K, mode, repeat):
    """Bytes retained for the backward of one training step."""
    n = features[0].shape[0]
    problems = [make_problem(model, f, cfg.estimator, repeat, b) for b, f in enumerate(features)]
    psi0 = np.full((len(problems), n), 0.5)
    with retention_meter() as meter:
        if mode == "unrolled":
            tape = UnrolledTape(problems, psi0, K, cfg.scaling)
            v = np.stack([mean_field_loss_grad(p, m, cfg.clamp) for p, m in zip(tape.psi, masks)])
            tape.vjp(v)
        else:
            solver = replace(cfg.solver, max_iter=K, tol=min(cfg.solver.tol, 1e-300))

            def grad_fn(psi):
                G = np.stack([p.grad(psi[b]) for b, p in enumerate(problems)])
                return GradientScaler(G, cfg.scaling, n).apply()

            psi = solve_fixed_point(grad_fn, psi0, solver).psi
            v = np.stack([mean_field_loss_grad(p, m, cfg.clamp) for p, m in zip(psi, masks)])
            implicit_vjp(v, build_workspace(problems, psi, cfg.scaling), cfg.linear)
    return meter.bytes


def retention_profile(dataset_slice, cfg, K_list, repeats: int = 1,
                      modes=("unrolled", "implicit")) -> RetentionProfile:
    """Retained backward-pass bytes of one training step per K and gradient mode.

    In unrolled mode K is the number of recorded iterations; in implicit
    mode the forward runs exactly K iterations without recording.
    """
    K_list = [int(k) for k in K_list]
    if not K_list:
        raise ValueError("K list is empty")
    if any(k < 1 for k in K_list):
        raise ValueError("K values must be >= 1")
    prof = RetentionProfile(K_list)
    samples = list(dataset_slice.samples if hasattr(dataset_slice, "samples") else dataset_slice)
    model = model_init(cfg.arch(samples[0].features.shape[1]), cfg.seed)
    features = [s.features for s in samples]
    masks = [s.mask() for s in samples]
    for mode in modes:
        rows = []
        for K in K_list:
            b = [_one_step_bytes(model, features, masks, cfg, K, mode, r) for r in range(repeats)]
            rows.append((min(b), float(np.mean(b)), max(b)))
        prof.bytes[mode] = rows
    return prof
