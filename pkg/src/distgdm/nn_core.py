"""Minimal reverse-mode autodiff over numpy arrays, plus MLP building blocks.

A ``Graph`` is a tape.  Every primitive appends one node holding its value and
the indices of its parents; ``backward`` walks the tape in reverse and
accumulates gradients, so a node used several times (fan-out) receives the sum
of its contributions.  The primitive set is deliberately small:

    matmul, add, tanh, relu, scale, sum, mse

Everything else (sigmoid squash, concatenation, subtraction) is composed from
these.  All values are float64.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, GraphStateError, NumericError

ACTIVATIONS = ("tanh", "relu", "identity")


def _as_f64(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError("tensor values must be finite")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """Handle to one node of a Graph."""

    __slots__ = ("graph", "index")

    def __init__(self, graph: "Graph", index: int):
        self.graph = graph
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.graph.values[self.index]

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def grad(self) -> np.ndarray:
        return self.graph.grad(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, node={self.index})"


class Graph:
    """Tape of operations with per-node gradient slots."""

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.ops: list[str] = []
        self.parents: list[tuple] = []
        self.extra: list = []
        self.grads: list | None = None
        self.output: Tensor | None = None
        self._bindings: dict[int, tuple] = {}

    def __len__(self):
        return len(self.values)

    def _push(self, op, value, parents=(), extra=None) -> Tensor:
        self.values.append(value)
        self.ops.append(op)
        self.parents.append(tuple(p.index for p in parents))
        self.extra.append(extra)
        self.grads = None
        return Tensor(self, len(self.values) - 1)

    def _check(self, *tensors):
        for t in tensors:
            if t.graph is not self:
                raise GraphStateError("tensor belongs to another graph")

    # leaves -------------------------------------------------------------
    def leaf(self, array) -> Tensor:
        """Differentiable input (parameter or variable)."""
        return self._push("leaf", _as_f64(array).copy())

    def const(self, array) -> Tensor:
        """Non-differentiable input; gradients are still tracked but unused."""
        return self._push("const", _as_f64(array))

    # primitives ---------------------------------------------------------
    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        self._check(a, b)
        if a.value.ndim > 2 or b.value.ndim != 2 or a.shape[-1] != b.shape[0]:
            raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not compose")
        return self._push("matmul", a.value @ b.value, (a, b))

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        self._check(a, b)
        try:
            out = a.value + b.value
        except ValueError as exc:
            raise DimensionError(f"add shapes {a.shape} and {b.shape} do not broadcast") from exc
        return self._push("add", out, (a, b))

    def tanh(self, a: Tensor) -> Tensor:
        self._check(a)
        return self._push("tanh", np.tanh(a.value), (a,))

    def relu(self, a: Tensor) -> Tensor:
        self._check(a)
        return self._push("relu", np.maximum(a.value, 0.0), (a,))

    def scale(self, a: Tensor, c: float) -> Tensor:
        self._check(a)
        c = float(c)
        return self._push("scale", c * a.value, (a,), c)

    def sum(self, a: Tensor) -> Tensor:
        self._check(a)
        return self._push("sum", np.asarray(a.value.sum()), (a,))

    def mse(self, a: Tensor, b: Tensor) -> Tensor:
        self._check(a, b)
        if a.shape != b.shape:
            raise DimensionError(f"mse shapes {a.shape} and {b.shape} differ")
        diff = a.value - b.value
        return self._push("mse", np.asarray(np.mean(diff * diff)), (a, b))

    # composites ---------------------------------------------------------
    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        return self.add(a, self.scale(b, -1.0))

    def add_const(self, a: Tensor, c) -> Tensor:
        return self.add(a, self.const(np.asarray(c, dtype=np.float64)))

    def sigmoid(self, a: Tensor) -> Tensor:
        """Logistic squash written as 0.5 * tanh(x / 2) + 0.5."""
        return self.add_const(self.scale(self.tanh(self.scale(a, 0.5)), 0.5), 0.5)

    def concat(self, parts: Sequence[Tensor]) -> Tensor:
        """Concatenate along the last axis via constant injection matrices."""
        widths = [p.shape[-1] for p in parts]
        total = sum(widths)
        out = None
        offset = 0
        for p, w in zip(parts, widths):
            inj = np.zeros((w, total))
            inj[np.arange(w), offset + np.arange(w)] = 1.0
            piece = self.matmul(p, self.const(inj))
            out = piece if out is None else self.add(out, piece)
            offset += w
        return out

    # reverse pass -------------------------------------------------------
    def backward(self, output: Tensor | None = None, seed=None) -> None:
        output = output if output is not None else self.output
        if output is None or not self.values:
            raise GraphStateError("backward called before any forward pass")
        self._check(output)
        seed = np.ones_like(output.value) if seed is None else _as_f64(seed)
        if seed.shape != output.shape:
            raise DimensionError(f"seed shape {seed.shape} != output shape {output.shape}")
        grads: list = [None] * len(self.values)
        grads[output.index] = seed.copy()
        for i in range(output.index, -1, -1):
            g = grads[i]
            if g is None:
                continue
            op = self.ops[i]
            if op in ("leaf", "const"):
                continue
            par = self.parents[i]
            vals = [self.values[p] for p in par]
            if op == "matmul":
                a, b = vals
                if a.ndim == 1:
                    contrib = (g @ b.T, np.outer(a, g))
                else:
                    contrib = (g @ b.T, a.T @ g)
            elif op == "add":
                contrib = (_unbroadcast(g, vals[0].shape), _unbroadcast(g, vals[1].shape))
            elif op == "tanh":
                y = self.values[i]
                contrib = (g * (1.0 - y * y),)
            elif op == "relu":
                contrib = (g * (vals[0] > 0.0),)
            elif op == "scale":
                contrib = (g * self.extra[i],)
            elif op == "sum":
                contrib = (np.broadcast_to(g, vals[0].shape).copy(),)
            elif op == "mse":
                diff = vals[0] - vals[1]
                ga = g * 2.0 * diff / diff.size
                contrib = (ga, -ga)
            else:  # pragma: no cover - guarded by construction
                raise GraphStateError(f"unknown op {op}")
            for p, c in zip(par, contrib):
                grads[p] = c if grads[p] is None else grads[p] + c
        self.grads = grads

    def grad(self, t: Tensor) -> np.ndarray:
        if self.grads is None:
            raise GraphStateError("gradients are only defined after backward")
        g = self.grads[t.index]
        return np.zeros_like(self.values[t.index]) if g is None else g

    # parameter binding ----------------------------------------------------
    def bind(self, params: "MlpParams") -> list:
        """Leaf nodes for ``params``; reused on repeated calls (fan-out)."""
        key = id(params)
        if key not in self._bindings:
            nodes = [(self.leaf(w), self.leaf(b)) for w, b in zip(params.weights, params.biases)]
            self._bindings[key] = (params, nodes)
        return self._bindings[key][1]

    def param_grads(self, params: "MlpParams") -> "Gradients":
        if id(params) not in self._bindings:
            raise GraphStateError("parameters were not used in this graph")
        nodes = self._bindings[id(params)][1]
        return Gradients([self.grad(w) for w, _ in nodes], [self.grad(b) for _, b in nodes])


@dataclass
class Gradients:
    """Gradients aligned with an MlpParams layer list."""

    weights: list
    biases: list

    def arrays(self):
        for w, b in zip(self.weights, self.biases):
            yield w
            yield b


@dataclass
class MlpParams:
    """Weights, biases and per-layer activation tags of a feed-forward net."""

    weights: list
    biases: list
    activations: list = field(default_factory=list)

    def __post_init__(self):
        if not self.activations:
            self.activations = ["tanh"] * (len(self.weights) - 1) + ["identity"]
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise DimensionError("weights, biases and activations must have equal length")
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise DimensionError(f"layer {i}: weight {w.shape} and bias {b.shape} mismatch")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise DimensionError(f"layer {i} input {w.shape[0]} != previous output "
                                     f"{self.weights[i - 1].shape[1]}")
            if act not in ACTIVATIONS:
                raise DimensionError(f"unknown activation {act!r}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def arrays(self):
        for w, b in zip(self.weights, self.biases):
            yield w
            yield b

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                         list(self.activations))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec: np.ndarray) -> "MlpParams":
        vec = np.asarray(vec, dtype=np.float64)
        out, pos = [], 0
        for a in self.arrays():
            out.append(vec[pos:pos + a.size].reshape(a.shape).copy())
            pos += a.size
        return MlpParams(out[0::2], out[1::2], list(self.activations))


def init_mlp(sizes: Sequence[int], activations: Sequence[str] | None, rng,
             out_scale: float = 1.0) -> MlpParams:
    """Glorot-uniform weights, zero biases.  ``out_scale`` shrinks the last layer."""
    weights, biases = [], []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        lim = np.sqrt(6.0 / (n_in + n_out))
        w = rng.uniform(-lim, lim, size=(n_in, n_out))
        if i == len(sizes) - 2:
            w = w * out_scale
        weights.append(w)
        biases.append(np.zeros(n_out))
    return MlpParams(weights, biases, list(activations) if activations else [])


def _activate(g: Graph, x: Tensor, act: str) -> Tensor:
    if act == "tanh":
        return g.tanh(x)
    if act == "relu":
        return g.relu(x)
    return x


def mlp_apply(graph: Graph, params: MlpParams, x: Tensor) -> Tensor:
    """Record the layer stack on ``graph`` and return the output node."""
    if x.shape[-1] != params.in_dim:
        raise DimensionError(f"input width {x.shape[-1]} != first layer input {params.in_dim}")
    h = x
    for (wn, bn), act in zip(graph.bind(params), params.activations):
        h = _activate(graph, graph.add(graph.matmul(h, wn), bn), act)
    graph.output = h
    return h


def forward(params: MlpParams, input, graph: Graph | None = None) -> Tensor:
    """Run the MLP on ``input`` (array or Tensor) and record the graph."""
    if isinstance(input, Tensor):
        graph = input.graph
        x = input
    else:
        graph = graph if graph is not None else Graph()
        x = graph.const(input)
    return mlp_apply(graph, params, x)


def predict(params: MlpParams, x) -> np.ndarray:
    """Plain numpy forward pass without recording a graph."""
    h = np.asarray(x, dtype=np.float64)
    if h.shape[-1] != params.in_dim:
        raise DimensionError(f"input width {h.shape[-1]} != first layer input {params.in_dim}")
    for w, b, act in zip(params.weights, params.biases, params.activations):
        h = h @ w + b
        if act == "tanh":
            h = np.tanh(h)
        elif act == "relu":
            h = np.maximum(h, 0.0)
    return h


def backward(graph: Graph, seed, params: MlpParams | None = None,
             output: Tensor | None = None) -> Gradients | None:
    """Reverse pass; returns gradients for ``params`` (or the only bound net)."""
    graph.backward(output, seed)
    if params is None:
        if len(graph._bindings) != 1:
            return None
        params = next(iter(graph._bindings.values()))[0]
    return graph.param_grads(params)


# optimisers ---------------------------------------------------------------

def _check_grads(params: MlpParams, grads: Gradients):
    for p, g in zip(params.arrays(), grads.arrays()):
        if p.shape != g.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient; step rejected")


def sgd_step(params: MlpParams, grads: Gradients, learning_rate: float) -> MlpParams:
    """Plain gradient descent: p <- p - lr * g."""
    _check_grads(params, grads)
    new = [p - learning_rate * g for p, g in zip(params.arrays(), grads.arrays())]
    return MlpParams(new[0::2], new[1::2], list(params.activations))


class Adam:
    """Adam optimiser state for one MlpParams instance."""

    def __init__(self, learning_rate=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = learning_rate, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, params: MlpParams, grads: Gradients) -> MlpParams:
        _check_grads(params, grads)
        g = list(grads.arrays())
        if self.m is None:
            self.m = [np.zeros_like(a) for a in g]
            self.v = [np.zeros_like(a) for a in g]
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        new = []
        for i, (p, gi) in enumerate(zip(params.arrays(), g)):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * gi
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * gi * gi
            new.append(p - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps))
        return MlpParams(new[0::2], new[1::2], list(params.activations))


class SGD:
    """Stateless optimiser wrapper around :func:`sgd_step`."""

    def __init__(self, learning_rate=1e-4):
        self.lr = learning_rate

    def step(self, params: MlpParams, grads: Gradients) -> MlpParams:
        return sgd_step(params, grads, self.lr)


def make_optimizer(name: str, learning_rate: float):
    if name == "sgd":
        return SGD(learning_rate)
    if name == "adam":
        return Adam(learning_rate)
    raise ValueError(f"unknown optimizer {name!r}")


def soft_update(target: MlpParams, online: MlpParams, tau: float) -> MlpParams:
    """Return tau * online + (1 - tau) * target, layer by layer."""
    new = [tau * o + (1.0 - tau) * t for t, o in zip(target.arrays(), online.arrays())]
    return MlpParams(new[0::2], new[1::2], list(target.activations))


# finite differences -------------------------------------------------------

def numeric_grad(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of a scalar function."""
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat, gflat = x.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = fn(x)
        flat[i] = old - h
        fm = fn(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * h)
    return out


def relative_error(a, b, floor: float = 1e-8) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


# checkpoint format --------------------------------------------------------
#   magic  b"NNCK" | u32 version | u32 layer count
#   per layer: u32 rows | u32 cols | u32 activation code
#              rows*cols f64 weights (row-major) | cols f64 biases
# all integers and floats little-endian.

CKPT_MAGIC = b"NNCK"
CKPT_VERSION = 1


def save_checkpoint(params: MlpParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_checkpoint(params))


def dumps_checkpoint(params: MlpParams) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(params.weights))]
    for w, b, act in zip(params.weights, params.biases, params.activations):
        parts.append(struct.pack("<III", w.shape[0], w.shape[1], ACTIVATIONS.index(act)))
        parts.append(w.astype("<f8").tobytes(order="C"))
        parts.append(b.astype("<f8").tobytes())
    return b"".join(parts)


def loads_checkpoint(blob: bytes) -> MlpParams:
    if blob[:4] != CKPT_MAGIC:
        raise ValueError("not a parameter checkpoint (bad magic)")
    version, n_layers = struct.unpack_from("<II", blob, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 12
    weights, biases, acts = [], [], []
    for _ in range(n_layers):
        rows, cols, code = struct.unpack_from("<III", blob, pos)
        pos += 12
        w = np.frombuffer(blob, "<f8", rows * cols, pos).reshape(rows, cols).astype(np.float64)
        pos += 8 * rows * cols
        b = np.frombuffer(blob, "<f8", cols, pos).astype(np.float64)
        pos += 8 * cols
        weights.append(w)
        biases.append(b)
        acts.append(ACTIVATIONS[code])
    if pos != len(blob):
        raise ValueError("trailing bytes in checkpoint")
    return MlpParams(weights, biases, acts)


def load_checkpoint(path) -> MlpParams:
    with open(path, "rb") as fh:
        return loads_checkpoint(fh.read())
