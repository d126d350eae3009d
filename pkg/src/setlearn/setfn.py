"""Permutation-invariant set utility F(S, V) = rho(sum_{i in S} phi(x_i)).

``phi`` is a single affine init layer (d_f -> init_width). ``rho`` is an MLP
with ``depth - 1`` ReLU hidden layers of ``hidden_width`` units followed by a
scalar output layer.

The first layer of ``rho`` is linear, so it is applied per item before
pooling: ``W1 (sum_i h_i) + b1 == sum_i (W1 h_i) + b1``. The network is the
same; only the evaluation order changes. Each subset then costs one masked
row sum of the per-item keys ``k_i = W1 h_i`` plus the tail of the MLP, and
the Monte Carlo estimators exploit this directly.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .diffcore import (ComputationRecord, ParamVector, ShapeError, forward_eval,
                       param_vjp, tensor)

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

MODEL_FORMAT_VERSION = 1


@dataclass(frozen=True)
class Arch:
    d_f: int
    depth: int = 2
    init_width: int = 256
    hidden_width: int = 500

    def __post_init__(self):
        if self.d_f < 1:
            raise ValueError("d_f must be >= 1")
        if self.depth not in (2, 3):
            raise ValueError(f"unsupported depth {self.depth}; expected 2 or 3")
        if self.init_width < 1 or self.hidden_width < 1:
            raise ValueError("layer widths must be positive")

    def layer_shapes(self) -> list[tuple[str, tuple]]:
        shapes = [("phi.W", (self.d_f, self.init_width)), ("phi.b", (self.init_width,)),
                  ("rho0.W", (self.init_width, self.hidden_width)), ("rho0.b", (self.hidden_width,))]
        if self.depth == 3:
            shapes += [("rho1.W", (self.hidden_width, self.hidden_width)),
                       ("rho1.b", (self.hidden_width,))]
        shapes += [("out.W", (self.hidden_width, 1)), ("out.b", (1,))]
        return shapes


def build_record(arch: Arch) -> ComputationRecord:
    rec = ComputationRecord(n_inputs=2, input_names=("features", "masks"))
    h = rec.add("affine", 0, names=("phi.W", "phi.b"))
    k = rec.add("affine", h, names=("rho0.W",))
    p = rec.add("sum_pool", 1, k)
    z = rec.add("add_param", p, names=("rho0.b",))
    a = rec.add("relu", z)
    if arch.depth == 3:
        z = rec.add("affine", a, names=("rho1.W", "rho1.b"))
        a = rec.add("relu", z)
    o = rec.add("affine", a, names=("out.W", "out.b"))
    rec.add("sum", o, axis=1)
    return rec


@dataclass
class SubsetBatch:
    features: np.ndarray
    masks: np.ndarray

    def __post_init__(self):
        self.features = tensor(self.features)
        masks = np.asarray(self.masks)
        if masks.ndim == 1:
            masks = masks[None, :]
        if self.features.ndim != 2:
            raise ShapeError("features must be an (n_items, d_f) matrix")
        if masks.ndim != 2 or masks.shape[1] != self.features.shape[0]:
            raise ShapeError(f"masks {masks.shape} do not match {self.features.shape[0]} items")
        if not np.all((masks == 0) | (masks == 1)):
            raise ValueError("mask entries must be 0 or 1")
        self.masks = masks.astype(np.float64)


class SetFunctionModel:
    def __init__(self, arch: Arch, params: ParamVector):
        expected = dict(arch.layer_shapes())
        if params.shapes() != expected or params.names() != list(expected):
            raise ShapeError(f"parameters {params.shapes()} do not match architecture {expected}")
        self.arch = arch
        self.params = params
        self.record = build_record(arch)

    def with_params(self, params: ParamVector) -> "SetFunctionModel":
        return SetFunctionModel(self.arch, params)

    # fast-path pieces used by the estimators -----------------------------

    def item_keys(self, features) -> np.ndarray:
        """Per-item first-hidden-layer contributions ``(x W_phi + b_phi) W_rho0``."""
        p = self.params
        return (np.asarray(features, dtype=np.float64) @ p["phi.W"] + p["phi.b"]) @ p["rho0.W"]

    @property
    def first_bias(self) -> np.ndarray:
        return self.params["rho0.b"]

    def tail(self, z) -> np.ndarray:
        """Map first-hidden-layer pre-activations (..., H) to set values (...)."""
        p = self.params
        a = np.maximum(z, 0.0)
        if self.arch.depth == 3:
            a = np.maximum(a @ p["rho1.W"] + p["rho1.b"], 0.0)
        return a @ p["out.W"][:, 0] + p["out.b"][0]

    def tail_vjp(self, z, gy) -> tuple[dict, np.ndarray]:
        """Pull ``gy`` (...) back through :meth:`tail` at pre-activations ``z`` (..., H).

        Returns the tail-layer parameter gradients and the cotangent of ``z``.
        """
        p = self.params
        z2 = z.reshape(-1, z.shape[-1])
        g = np.asarray(gy, dtype=np.float64).reshape(-1)
        a = np.maximum(z2, 0.0)
        grads = {}
        if self.arch.depth == 3:
            z1 = a @ p["rho1.W"] + p["rho1.b"]
            a1 = np.maximum(z1, 0.0)
            grads["out.W"] = (a1.T @ g)[:, None]
            grads["out.b"] = np.array([g.sum()])
            d1 = np.outer(g, p["out.W"][:, 0]) * (z1 > 0.0)
            grads["rho1.W"] = a.T @ d1
            grads["rho1.b"] = d1.sum(axis=0)
            da = d1 @ p["rho1.W"].T
        else:
            grads["out.W"] = (a.T @ g)[:, None]
            grads["out.b"] = np.array([g.sum()])
            da = np.outer(g, p["out.W"][:, 0])
        return grads, (da * (z2 > 0.0)).reshape(z.shape)

    def keys_vjp(self, features, dkeys) -> dict:
        """Gradients of ``sum(dkeys * item_keys(features))`` for the layers before pooling."""
        p = self.params
        x = np.asarray(features, dtype=np.float64)
        h = x @ p["phi.W"] + p["phi.b"]
        dh = dkeys @ p["rho0.W"].T
        return {"phi.W": x.T @ dh, "phi.b": dh.sum(axis=0), "rho0.W": h.T @ dkeys}

    def __call__(self, features, masks) -> np.ndarray:
        return eval_sets(self, SubsetBatch(features, masks))

    # serialization ---------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format_version": MODEL_FORMAT_VERSION,
            "arch": asdict(self.arch),
            "segments": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                         for k, v in self.params.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SetFunctionModel":
        if d.get("format_version") != MODEL_FORMAT_VERSION:
            raise ValueError(f"unsupported model format version {d.get('format_version')!r}")
        arch = Arch(**d["arch"])
        segs = d.get("segments", {})
        out = []
        for name, shape in arch.layer_shapes():
            if name not in segs:
                raise ValueError(f"model file is missing segment {name!r}")
            seg = segs[name]
            try:
                data = np.asarray(seg["data"], dtype=np.float64)
                if tuple(seg["shape"]) != shape or data.size != int(np.prod(shape)):
                    raise ValueError("shape mismatch")
                out.append((name, tensor(data, shape)))
            except Exception as exc:
                raise ValueError(f"corrupted model segment {name!r}: {exc}") from None
        return cls(arch, ParamVector(out))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "SetFunctionModel":
        with open(path) as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValueError(f"model file is not valid JSON: {exc}") from None
        return cls.from_dict(d)


def model_init(arch: Arch, seed: int) -> SetFunctionModel:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
    rng = np.random.default_rng(seed)
    segs = []
    fan_in = None
    for name, shape in arch.layer_shapes():
        if name.endswith(".W"):
            fan_in = shape[0]
        bound = 1.0 / np.sqrt(fan_in)
        segs.append((name, rng.uniform(-bound, bound, size=shape)))
    return SetFunctionModel(arch, ParamVector(segs))


def eval_sets(model: SetFunctionModel, batch: SubsetBatch) -> np.ndarray:
    if batch.features.shape[1] != model.arch.d_f:
        raise ShapeError(f"features have d_f={batch.features.shape[1]}, model expects {model.arch.d_f}")
    return forward_eval(model.record, model.params, [batch.features, batch.masks])


def param_grad_weighted(model: SetFunctionModel, batch: SubsetBatch, weights) -> ParamVector:
    """Gradient of ``sum_k weights[k] * F(S_k)`` with respect to the parameters."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (batch.masks.shape[0],):
        raise ShapeError(f"weights shape {w.shape} vs {batch.masks.shape[0]} subsets")
    return param_vjp(model.record, model.params, [batch.features, batch.masks], w)


# ---------------------------------------------------------------------------
# pinned-pair second differences

def _pair_differences_numpy(model, base_pre, x, keys):
    m, n = x.shape
    H = np.zeros((n, n))
    for l in range(m):
        for i in range(n - 1):
            bi = base_pre[l] - x[l, i] * keys[i]
            js = slice(i + 1, n)
            z00 = bi[None, :] - x[l, js, None] * keys[js]
            z10 = z00 + keys[i]
            z01 = z00 + keys[js]
            z11 = z10 + keys[js]
            H[i, js] += (model.tail(z11) - model.tail(z10) - model.tail(z01) + model.tail(z00))
    return H


if numba is not None:
    @numba.njit(cache=True, fastmath=True)
    def _pair_differences_depth2(base_pre, x, keys, w):  # pragma: no cover - jitted
        m, n = x.shape
        width = keys.shape[1]
        H = np.zeros((n, n))
        bi = np.empty(width)
        for l in range(m):
            for i in range(n - 1):
                xi = x[l, i]
                for h in range(width):
                    bi[h] = base_pre[l, h] - xi * keys[i, h]
                for j in range(i + 1, n):
                    xj = x[l, j]
                    s = 0.0
                    for h in range(width):
                        z00 = bi[h] - xj * keys[j, h]
                        z10 = z00 + keys[i, h]
                        z01 = z00 + keys[j, h]
                        z11 = z10 + keys[j, h]
                        s += w[h] * (max(z11, 0.0) - max(z10, 0.0) - max(z01, 0.0) + max(z00, 0.0))
                    H[i, j] += s
        return H


def pair_differences(model: SetFunctionModel, base_pre, x, keys) -> np.ndarray:
    """Sum over base subsets of F(S+i+j) - F(S+i-j) - F(S-i+j) + F(S-i-j).

    ``x`` is the (m, n) 0/1 matrix of base subsets, ``base_pre`` their
    first-layer pre-activations ``x @ keys + b``. Returns the strict upper
    triangle (i < j); the output bias cancels in the four-term difference.
    """
    if numba is not None and model.arch.depth == 2:
        return _pair_differences_depth2(np.ascontiguousarray(base_pre), np.ascontiguousarray(x),
                                        np.ascontiguousarray(keys),
                                        np.ascontiguousarray(model.params["out.W"][:, 0]))
    return _pair_differences_numpy(model, base_pre, x, keys)
