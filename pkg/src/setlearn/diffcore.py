"""Small reverse-mode differentiation engine over dense float64 arrays.

A network is described by a :class:`ComputationRecord`: a topologically
ordered list of primitive ops that read and write numbered slots. Slots
``0..len(inputs)-1`` hold the record's inputs; each op writes one new slot.
Parameters are referenced by segment name and live in a :class:`ParamVector`.

Only gradients with respect to parameters are produced. Inputs (features,
subset masks) are treated as constants.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

__all__ = [
    "ShapeError",
    "NumericalError",
    "tensor",
    "ParamVector",
    "Op",
    "ComputationRecord",
    "forward_eval",
    "param_vjp",
    "finite_diff_grad",
]


class ShapeError(ValueError):
    pass


class NumericalError(FloatingPointError):
    """Raised when a value becomes NaN or infinite."""


def tensor(data, shape=None) -> np.ndarray:
    """Validate ``data`` as a finite float64 array (optionally reshaped)."""
    arr = np.array(data, dtype=np.float64)
    if shape is not None:
        shape = tuple(shape)
        if int(np.prod(shape)) != arr.size:
            raise ShapeError(f"cannot view {arr.size} values as shape {shape}")
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise NumericalError("tensor contains NaN or Inf")
    return arr


class ParamVector:
    """Named parameter segments with a flat-vector view.

    Segment order is insertion order; :meth:`flatten` and :meth:`unflatten`
    use it, so the two are inverse to each other.
    """

    def __init__(self, segments: Mapping[str, np.ndarray] | Iterable = ()):
        self._seg: OrderedDict[str, np.ndarray] = OrderedDict()
        items = segments.items() if isinstance(segments, Mapping) else segments
        for name, value in items:
            if name in self._seg:
                raise ValueError(f"duplicate segment name {name!r}")
            self._seg[name] = tensor(value)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._seg[name]

    def __contains__(self, name) -> bool:
        return name in self._seg

    def __iter__(self):
        return iter(self._seg)

    def __len__(self) -> int:
        return len(self._seg)

    def items(self):
        return self._seg.items()

    def names(self) -> list[str]:
        return list(self._seg)

    @property
    def size(self) -> int:
        return sum(v.size for v in self._seg.values())

    def shapes(self) -> dict[str, tuple]:
        return {k: v.shape for k, v in self._seg.items()}

    def flatten(self) -> np.ndarray:
        if not self._seg:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._seg.values()])

    def unflatten(self, flat) -> "ParamVector":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.size,):
            raise ShapeError(f"expected flat vector of length {self.size}, got {flat.shape}")
        out, pos = [], 0
        for name, v in self._seg.items():
            out.append((name, flat[pos:pos + v.size].reshape(v.shape)))
            pos += v.size
        return ParamVector(out)

    def zeros_like(self) -> "ParamVector":
        return ParamVector((k, np.zeros_like(v)) for k, v in self._seg.items())

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "ParamVector":
        return ParamVector((k, fn(v)) for k, v in self._seg.items())

    def __add__(self, other: "ParamVector") -> "ParamVector":
        self._check_compatible(other)
        return ParamVector((k, v + other[k]) for k, v in self._seg.items())

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        self._check_compatible(other)
        return ParamVector((k, v - other[k]) for k, v in self._seg.items())

    def __mul__(self, alpha: float) -> "ParamVector":
        return ParamVector((k, v * float(alpha)) for k, v in self._seg.items())

    __rmul__ = __mul__

    def _check_compatible(self, other):
        if self.shapes() != other.shapes():
            raise ShapeError("parameter vectors have different segment layouts")

    def allclose(self, other: "ParamVector", **kw) -> bool:
        return self.shapes() == other.shapes() and all(
            np.allclose(v, other[k], **kw) for k, v in self._seg.items())

    def __repr__(self):
        inner = ", ".join(f"{k}{tuple(v.shape)}" for k, v in self._seg.items())
        return f"ParamVector({inner})"


# ---------------------------------------------------------------------------
# ops

OP_KINDS = ("affine", "relu", "sum_pool", "add", "mul", "add_param", "sum")


@dataclass(frozen=True)
class Op:
    """One primitive.

    kind        args (slot indices)   names (parameter segments)
    ---------   -------------------   --------------------------
    affine      (x,)                  (W,) or (W, b): x @ W [+ b]
    relu        (x,)                  ()
    sum_pool    (mask, x)             (): mask @ x, mask is constant
    add, mul    (a, b)                (): elementwise, equal shapes
    add_param   (x,)                  (b,): x + b, b broadcast on rows
    sum         (x,)                  (): sum over ``axis``
    """
    kind: str
    args: tuple
    names: tuple = ()
    axis: int | None = None

    def __post_init__(self):
        if self.kind not in OP_KINDS:
            raise ValueError(f"unknown op kind {self.kind!r}")


@dataclass
class ComputationRecord:
    n_inputs: int
    ops: list = field(default_factory=list)
    input_names: tuple = ()

    def __post_init__(self):
        written = set(range(self.n_inputs))
        for k, op in enumerate(self.ops):
            for a in op.args:
                if a not in written:
                    raise ValueError(f"op {k} ({op.kind}) reads slot {a} before it is written")
            written.add(self.n_inputs + k)

    @property
    def output_slot(self) -> int:
        return self.n_inputs + len(self.ops) - 1

    def add(self, kind, *args, names=(), axis=None) -> int:
        """Append an op and return the slot it writes."""
        op = Op(kind, tuple(args), tuple(names), axis)
        written = self.n_inputs + len(self.ops)
        for a in op.args:
            if not 0 <= a < written:
                raise ValueError(f"slot {a} not yet written")
        self.ops.append(op)
        return written

    def param_names(self) -> set:
        return {n for op in self.ops for n in op.names}


def _as_input_list(record: ComputationRecord, inputs) -> list:
    if isinstance(inputs, Mapping):
        if not record.input_names:
            raise ShapeError("record has no named inputs")
        vals = [inputs[n] for n in record.input_names]
    elif isinstance(inputs, (list, tuple)):
        vals = list(inputs)
    else:
        vals = [inputs]
    if len(vals) != record.n_inputs:
        raise ShapeError(f"record expects {record.n_inputs} inputs, got {len(vals)}")
    return [tensor(v) for v in vals]


def _forward(record: ComputationRecord, params: ParamVector, inputs) -> list:
    slots = _as_input_list(record, inputs)
    for k, op in enumerate(record.ops):
        a = [slots[i] for i in op.args]
        if op.kind == "affine":
            W = params[op.names[0]]
            x = a[0]
            if x.shape[-1] != W.shape[0]:
                raise ShapeError(f"op {k}: affine input width {x.shape[-1]} vs weight {W.shape}")
            y = x @ W
            if len(op.names) > 1:
                y = y + params[op.names[1]]
        elif op.kind == "relu":
            y = np.maximum(a[0], 0.0)
        elif op.kind == "sum_pool":
            mask, x = a
            if mask.shape[-1] != x.shape[0]:
                raise ShapeError(f"op {k}: mask width {mask.shape[-1]} vs {x.shape[0]} items")
            y = mask @ x
        elif op.kind in ("add", "mul"):
            if a[0].shape != a[1].shape:
                raise ShapeError(f"op {k}: {op.kind} of shapes {a[0].shape} and {a[1].shape}")
            y = a[0] + a[1] if op.kind == "add" else a[0] * a[1]
        elif op.kind == "add_param":
            b = params[op.names[0]]
            if a[0].shape[-1] != b.shape[-1]:
                raise ShapeError(f"op {k}: bias {b.shape} vs input {a[0].shape}")
            y = a[0] + b
        else:  # sum
            y = np.sum(a[0], axis=op.axis)
        if not np.all(np.isfinite(y)):
            raise NumericalError(f"non-finite value produced by op {k} ({op.kind})")
        slots.append(y)
    return slots


def forward_eval(record: ComputationRecord, params: ParamVector, inputs) -> np.ndarray:
    """Evaluate ``record``; returns the value of its last slot."""
    return _forward(record, params, inputs)[-1]


def param_vjp(record: ComputationRecord, params: ParamVector, inputs, cotangent) -> ParamVector:
    """Gradient of ``<cotangent, forward_eval(...)>`` with respect to ``params``."""
    slots = _forward(record, params, inputs)
    out = slots[-1]
    cot = np.asarray(cotangent, dtype=np.float64)
    if cot.shape != np.shape(out):
        raise ShapeError(f"cotangent shape {cot.shape} does not match output {np.shape(out)}")

    grads = {name: np.zeros_like(params[name]) for name in record.param_names()}
    adj: dict[int, np.ndarray] = {len(slots) - 1: cot}

    def acc(slot, g):
        if slot < record.n_inputs:
            return
        adj[slot] = adj[slot] + g if slot in adj else g

    for k in range(len(record.ops) - 1, -1, -1):
        op = record.ops[k]
        g = adj.pop(record.n_inputs + k, None)
        if g is None:
            continue
        a = [slots[i] for i in op.args]
        if op.kind == "affine":
            x = a[0]
            W = params[op.names[0]]
            x2 = x.reshape(-1, x.shape[-1])
            g2 = g.reshape(-1, g.shape[-1])
            grads[op.names[0]] += x2.T @ g2
            if len(op.names) > 1:
                grads[op.names[1]] += g2.sum(axis=0)
            acc(op.args[0], g @ W.T)
        elif op.kind == "relu":
            # subgradient 0 at the kink
            acc(op.args[0], g * (a[0] > 0.0))
        elif op.kind == "sum_pool":
            acc(op.args[1], a[0].T @ g)
        elif op.kind == "add":
            acc(op.args[0], g)
            acc(op.args[1], g)
        elif op.kind == "mul":
            acc(op.args[0], g * a[1])
            acc(op.args[1], g * a[0])
        elif op.kind == "add_param":
            grads[op.names[0]] += g.reshape(-1, g.shape[-1]).sum(axis=0)
            acc(op.args[0], g)
        else:  # sum
            x = a[0]
            gx = np.expand_dims(g, op.axis) if op.axis is not None else g
            acc(op.args[0], np.broadcast_to(gx, x.shape).copy())

    return ParamVector((name, grads.get(name, np.zeros_like(v))) for name, v in params.items())


def finite_diff_grad(scalar_fn: Callable[[np.ndarray], float], point, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``scalar_fn`` at ``point``."""
    if not step > 0:
        raise ValueError("step must be positive")
    x = np.array(point, dtype=np.float64)
    grad = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + step
        fp = float(scalar_fn(x))
        flat_x[i] = orig - step
        fm = float(scalar_fn(x))
        flat_x[i] = orig
        flat_g[i] = (fp - fm) / (2.0 * step)
    return grad
