"""Small dense-tensor kernel: a gradient tape, MLP stacks and Adam.

Tensors are plain 2-D float64 numpy arrays. A :class:`Tape` records every
primitive applied during a forward pass so that :func:`backward` can replay
them in reverse order and return one gradient per named parameter.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import sparse

MAGIC = b"FHF1"
FORMAT_VERSION = 1


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class SerializationError(ValueError):
    pass


@dataclass(eq=False)
class Node:
    """A value recorded on a tape."""

    tape: "Tape"
    index: int
    value: np.ndarray

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


@dataclass
class _Op:
    name: str
    inputs: tuple[int, ...]
    output: int
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive ops for reverse-mode differentiation."""

    def __init__(self) -> None:
        self._values: list[np.ndarray] = []
        self._ops: list[_Op] = []
        self._params: dict[str, int] = {}
        self._consumed = False

    def __len__(self) -> int:
        return len(self._ops)

    @property
    def op_names(self) -> list[str]:
        return [op.name for op in self._ops]

    def _new(self, value: np.ndarray) -> Node:
        if self._consumed:
            raise TapeError("tape already consumed by backward()")
        value = np.asarray(value, dtype=np.float64)
        self._values.append(value)
        return Node(self, len(self._values) - 1, value)

    def param(self, name: str, value: np.ndarray) -> Node:
        """Register a trainable parameter; the same name maps to one node."""
        if name in self._params:
            idx = self._params[name]
            return Node(self, idx, self._values[idx])
        node = self._new(value)
        self._params[name] = node.index
        return node

    def const(self, value: np.ndarray) -> Node:
        return self._new(value)

    def record(self, name: str, value: np.ndarray, inputs: Sequence[Node],
               backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Node:
        for node in inputs:
            if node.tape is not self:
                raise TapeError(f"{name}: input recorded on a different tape")
        out = self._new(value)
        self._ops.append(_Op(name, tuple(n.index for n in inputs), out.index, backward))
        return out

    def backward(self, loss_grad: np.ndarray) -> dict[str, np.ndarray]:
        """Seed the last recorded output with ``loss_grad`` and propagate."""
        if self._consumed:
            raise TapeError("backward() called on a consumed tape")
        if not self._ops:
            raise TapeError("backward() called on an empty tape")
        self._consumed = True
        last = self._ops[-1].output
        loss_grad = np.asarray(loss_grad, dtype=np.float64)
        if loss_grad.shape != self._values[last].shape:
            raise ShapeError(
                f"loss_grad shape {loss_grad.shape} != output shape {self._values[last].shape}")
        grads: dict[int, np.ndarray] = {last: loss_grad}
        for op in reversed(self._ops):
            g = grads.pop(op.output, None)
            if g is None:
                continue
            for idx, gi in zip(op.inputs, op.backward(g)):
                if gi is None:
                    continue
                if idx in grads:
                    grads[idx] = grads[idx] + gi
                else:
                    grads[idx] = gi
        out = {}
        for name, idx in self._params.items():
            g = grads.get(idx)
            out[name] = np.zeros_like(self._values[idx]) if g is None else g
        self._values.clear()
        return out


def backward(tape: Tape, loss_grad: np.ndarray) -> dict[str, np.ndarray]:
    return tape.backward(loss_grad)


# -- primitives ---------------------------------------------------------------

def matmul(a: Node, b: Node) -> Node:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: input cols {a.shape[1]} != weight rows {b.shape[0]}")
    av, bv = a.value, b.value
    return a.tape.record("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add_bias(x: Node, b: Node) -> Node:
    if b.shape != (1, x.shape[1]):
        raise ShapeError(f"add_bias: bias shape {b.shape} vs input cols {x.shape[1]}")
    return x.tape.record("add_bias", x.value + b.value, (x, b),
                         lambda g: (g, g.sum(axis=0, keepdims=True)))


def relu(x: Node) -> Node:
    active = x.value > 0
    return x.tape.record("relu", np.where(active, x.value, 0.0), (x,),
                         lambda g: (g * active,))


def add(a: Node, b: Node, scale: float = 1.0) -> Node:
    """a + scale * b."""
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return a.tape.record("scale_add", a.value + scale * b.value, (a, b),
                         lambda g: (g, scale * g))


def concat(nodes: Sequence[Node]) -> Node:
    rows = {n.shape[0] for n in nodes}
    if len(rows) != 1:
        raise ShapeError(f"concat: row counts differ {sorted(rows)}")
    widths = [n.shape[1] for n in nodes]
    splits = np.cumsum(widths)[:-1]
    value = np.concatenate([n.value for n in nodes], axis=1)
    return nodes[0].tape.record("concat", value, tuple(nodes),
                                lambda g: np.split(g, splits, axis=1))


def gather_rows(x: Node, index: np.ndarray) -> Node:
    index = np.asarray(index, dtype=np.intp)
    n = x.shape[0]
    collect = sparse.csr_matrix((np.ones(len(index)), (index, np.arange(len(index)))),
                                shape=(n, len(index)))
    return x.tape.record("gather", x.value[index], (x,), lambda g: (collect @ g,))


def edge_scatter(h: Node, src: np.ndarray, dst: np.ndarray, weight: np.ndarray,
                 n_blocks: int, n_nodes: int) -> Node:
    """Weighted neighbour sum per block: out[b, i] = sum_{j->i} w * h[b, j].

    ``h`` holds ``n_blocks * n_nodes`` rows, block-major.
    """
    if h.shape[0] != n_blocks * n_nodes:
        raise ShapeError(f"edge_scatter: {h.shape[0]} rows != {n_blocks} x {n_nodes}")
    d = h.shape[1]
    adj = sparse.csr_matrix((np.asarray(weight, dtype=np.float64), (dst, src)), shape=(n_nodes, n_nodes))

    def spread(values, mat):
        nodes_first = values.reshape(n_blocks, n_nodes, d).transpose(1, 0, 2).reshape(n_nodes, -1)
        out = np.asarray(mat @ nodes_first)
        return out.reshape(n_nodes, n_blocks, d).transpose(1, 0, 2).reshape(n_blocks * n_nodes, d)

    value = spread(h.value, adj)
    adj_t = adj.T.tocsr()
    return h.tape.record("scatter", value, (h,), lambda g: (spread(g, adj_t),))


# -- MLPs ---------------------------------------------------------------------

@dataclass
class Layer:
    weight: np.ndarray  # in_dim x out_dim
    bias: np.ndarray  # 1 x out_dim
    nonlinear: bool = True


@dataclass
class MlpParams:
    name: str
    layers: list[Layer] = field(default_factory=list)

    def __post_init__(self) -> None:
        for i in range(1, len(self.layers)):
            prev, cur = self.layers[i - 1].weight.shape[1], self.layers[i].weight.shape[0]
            if prev != cur:
                raise ShapeError(f"{self.name}: layer {i - 1} out_dim {prev} != layer {i} in_dim {cur}")

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    def named(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{self.name}.{i}.weight"] = layer.weight
            out[f"{self.name}.{i}.bias"] = layer.bias
        return out


def init_mlp(name: str, dims: Sequence[int], rng: np.random.Generator) -> MlpParams:
    """Glorot-uniform weights, zero biases, ReLU on all but the last layer."""
    layers = []
    for i, (n_in, n_out) in enumerate(zip(dims[:-1], dims[1:])):
        s = np.sqrt(6.0 / (n_in + n_out))
        layers.append(Layer(rng.uniform(-s, s, size=(n_in, n_out)),
                            np.zeros((1, n_out)),
                            nonlinear=i < len(dims) - 2))
    return MlpParams(name, layers)


def mlp_forward(params: MlpParams, x: Node, tape: Tape | None = None) -> Node:
    tape = tape or x.tape
    if x.shape[1] != params.in_dim:
        raise ShapeError(f"{params.name}: input cols {x.shape[1]} != first layer in_dim {params.in_dim}")
    h = x
    for i, layer in enumerate(params.layers):
        w = tape.param(f"{params.name}.{i}.weight", layer.weight)
        b = tape.param(f"{params.name}.{i}.bias", layer.bias)
        h = add_bias(matmul(h, w), b)
        if layer.nonlinear:
            h = relu(h)
    return h


# -- optimizer ----------------------------------------------------------------

@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Update ``params`` in place."""
        missing = [name for name in params if name not in grads]
        if missing:
            raise KeyError(f"no gradient for parameter {missing[0]!r}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def optimizer_step(state: Adam, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
    state.step(params, grads)


# -- serialization ------------------------------------------------------------

def serialize_params(params: dict[str, np.ndarray]) -> bytes:
    """Flat binary: b"FHF1", u16 version, then per tensor u16 name length,
    UTF-8 name, u32 rows, u32 cols, row-major little-endian float64."""
    parts = [MAGIC, struct.pack("<H", FORMAT_VERSION)]
    for name, arr in params.items():
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"{name}: expected a 2-D tensor, got {arr.ndim}-D")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<II", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def deserialize_params(data: bytes) -> dict[str, np.ndarray]:
    view = memoryview(data)
    if len(view) < 6 or bytes(view[:4]) != MAGIC:
        raise SerializationError("bad magic bytes")
    (version,) = struct.unpack_from("<H", view, 4)
    if version != FORMAT_VERSION:
        raise SerializationError(f"unsupported version {version}")
    pos = 6
    out: dict[str, np.ndarray] = {}
    while pos < len(view):
        if pos + 2 > len(view):
            raise SerializationError(f"truncated name length at offset {pos}")
        (n,) = struct.unpack_from("<H", view, pos)
        pos += 2
        if pos + n + 8 > len(view):
            raise SerializationError(f"truncated tensor header at offset {pos}")
        try:
            name = bytes(view[pos:pos + n]).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise SerializationError(f"bad tensor name at offset {pos}") from exc
        pos += n
        rows, cols = struct.unpack_from("<II", view, pos)
        pos += 8
        size = rows * cols * 8
        if pos + size > len(view):
            raise SerializationError(f"truncated data for {name!r} at offset {pos}")
        if name in out:
            raise SerializationError(f"duplicate tensor {name!r}")
        arr = np.frombuffer(view[pos:pos + size], dtype="<f8").astype(np.float64).reshape(rows, cols)
        out[name] = arr
        pos += size
    return out
