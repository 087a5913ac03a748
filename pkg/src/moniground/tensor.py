"""Minimal reverse-mode autodiff core with an Adam optimizer.

Tensors hold float64 numpy arrays. Every op builds a node in an implicit
graph (parent links + a backward closure); `backward` walks the graph once
in reverse topological order and accumulates gradients additively into the
`grad` buffers of tensors that require them. The op set is exactly what the
grounding model needs, nothing more; each op's gradient is checked against
central finite differences in the test suite.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Raised when operands of an op have incompatible shapes."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64)
        else:
            self.grad += grad

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _node(value: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(value)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into t.grad for every tensor requiring grad.

    The loss must be scalar. Gradients add to whatever is already in the
    buffers; zero them between backward passes to avoid mixing.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    # Iterative post-order topological sort (graphs can be deep: GRU chains).
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grads(tensors) -> None:
    it = tensors.values() if isinstance(tensors, dict) else tensors
    for t in it:
        t.zero_grad()


def constant(data) -> Tensor:
    return Tensor(data)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape))


def uniform_init(shape, fan_in: int, rng: np.random.Generator) -> Tensor:
    """U(-k, k) parameter with k = fan_in^-1/2."""
    k = fan_in ** -0.5
    return Tensor(rng.uniform(-k, k, size=shape), requires_grad=True)


# ---------------------------------------------------------------------------
# Forward ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul mismatch: {a.data.shape} @ {b.data.shape}")

    def bwd(grad):
        if a.requires_grad:
            a._accumulate(grad @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ grad)

    return _node(a.data @ b.data, (a, b), bwd)


def _check_addlike(a: Tensor, b: Tensor, op: str) -> bool:
    """Returns True when b is a row vector broadcast over a's rows."""
    if a.data.shape == b.data.shape:
        return False
    if a.data.ndim == 2 and b.data.ndim == 2 and b.data.shape == (1, a.data.shape[1]):
        return True
    raise ShapeError(f"{op} mismatch: {a.data.shape} vs {b.data.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    row_broadcast = _check_addlike(a, b, "add")

    def bwd(grad):
        if a.requires_grad:
            a._accumulate(grad)
        if b.requires_grad:
            b._accumulate(grad.sum(axis=0, keepdims=True) if row_broadcast else grad)

    return _node(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    row_broadcast = _check_addlike(a, b, "sub")

    def bwd(grad):
        if a.requires_grad:
            a._accumulate(grad)
        if b.requires_grad:
            b._accumulate(-(grad.sum(axis=0, keepdims=True) if row_broadcast else grad))

    return _node(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul mismatch: {a.data.shape} vs {b.data.shape}")

    def bwd(grad):
        if a.requires_grad:
            a._accumulate(grad * b.data)
        if b.requires_grad:
            b._accumulate(grad * a.data)

    return _node(a.data * b.data, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    def bwd(grad):
        a._accumulate(grad * s)

    return _node(a.data * s, (a,), bwd)


def concat(tensors: list[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    if not tensors:
        raise ShapeError("concat of empty list")
    lead = tensors[0].data.shape[:-1]
    for t in tensors:
        if t.data.shape[:-1] != lead:
            raise ShapeError(f"concat mismatch: {[t.data.shape for t in tensors]}")
    widths = [t.data.shape[-1] for t in tensors]
    offsets = np.cumsum([0] + widths)

    def bwd(grad):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                t._accumulate(grad[..., lo:hi])

    return _node(np.concatenate([t.data for t in tensors], axis=-1), tuple(tensors), bwd)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def bwd(grad):
        a._accumulate(grad * (out > 0))

    return _node(out, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    out[~pos] = ez / (1.0 + ez)

    def bwd(grad):
        a._accumulate(grad * out * (1.0 - out))

    return _node(out, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bwd(grad):
        a._accumulate(grad * (1.0 - out * out))

    return _node(out, (a,), bwd)


def row_softmax(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"row_softmax needs a matrix, got {a.data.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def bwd(grad):
        dot = (grad * out).sum(axis=1, keepdims=True)
        a._accumulate(out * (grad - dot))

    return _node(out, (a,), bwd)


def row_log_softmax(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"row_log_softmax needs a matrix, got {a.data.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bwd(grad):
        a._accumulate(grad - soft * grad.sum(axis=1, keepdims=True))

    return _node(out, (a,), bwd)


def mean(a: Tensor) -> Tensor:
    n = a.data.size

    def bwd(grad):
        a._accumulate(np.full_like(a.data, float(grad) / n))

    return _node(np.asarray(a.data.mean()), (a,), bwd)


def tensor_sum(a: Tensor) -> Tensor:
    def bwd(grad):
        a._accumulate(np.full_like(a.data, float(grad)))

    return _node(np.asarray(a.data.sum()), (a,), bwd)


def smooth_l1(pred: Tensor, target: Tensor, beta: float = 1.0) -> Tensor:
    """Elementwise smooth L1: 0.5 d^2 / beta for |d| < beta, else |d| - beta/2."""
    if pred.data.shape != target.data.shape:
        raise ShapeError(f"smooth_l1 mismatch: {pred.data.shape} vs {target.data.shape}")
    if beta <= 0:
        raise ValueError("smooth_l1 beta must be positive")
    d = pred.data - target.data
    absd = np.abs(d)
    quad = absd < beta
    out = np.where(quad, 0.5 * d * d / beta, absd - 0.5 * beta)

    def bwd(grad):
        g = grad * np.where(quad, d / beta, np.sign(d))
        if pred.requires_grad:
            pred._accumulate(g)
        if target.requires_grad:
            target._accumulate(-g)

    return _node(out, (pred, target), bwd)


def cross_entropy(logits: Tensor, target_index: int) -> Tensor:
    """Negative log softmax probability of the target class.

    Logits are a single row (1, K) or a vector (K,).
    """
    row = logits.data.reshape(-1)
    k = row.size
    if not 0 <= target_index < k:
        raise ShapeError(f"cross_entropy target {target_index} out of range for {k} classes")
    shifted = row - row.max()
    lse = np.log(np.exp(shifted).sum())
    loss = lse - shifted[target_index]
    soft = np.exp(shifted - lse)

    def bwd(grad):
        g = soft.copy()
        g[target_index] -= 1.0
        logits._accumulate(float(grad) * g.reshape(logits.data.shape))

    return _node(np.asarray(loss), (logits,), bwd)


def bce_with_logits(logits: Tensor, targets: Tensor) -> Tensor:
    """Elementwise binary cross-entropy on raw logits (numerically stable)."""
    if logits.data.shape != targets.data.shape:
        raise ShapeError(f"bce mismatch: {logits.data.shape} vs {targets.data.shape}")
    x, t = logits.data, targets.data
    out = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))

    def bwd(grad):
        sig = np.empty_like(x)
        pos = x >= 0
        sig[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ez = np.exp(x[~pos])
        sig[~pos] = ez / (1.0 + ez)
        logits._accumulate(grad * (sig - t))

    return _node(out, (logits,), bwd)


def gather_rows(a: Tensor, indices: np.ndarray) -> Tensor:
    """Select rows of a matrix by integer index (repeats allowed)."""
    idx = np.asarray(indices, dtype=np.intp).reshape(-1)
    if a.data.ndim != 2:
        raise ShapeError(f"gather_rows needs a matrix, got {a.data.shape}")

    def bwd(grad):
        # per-column bincount is ~3x faster than np.add.at for these shapes
        rows, cols = a.data.shape
        acc = np.empty((rows, cols))
        for j in range(cols):
            acc[:, j] = np.bincount(idx, weights=grad[:, j], minlength=rows)
        a._accumulate(acc)

    return _node(a.data[idx], (a,), bwd)


def repeat_rows(a: Tensor, k: int) -> Tensor:
    """Repeat each row k times consecutively: (M, C) -> (M*k, C)."""
    if a.data.ndim != 2:
        raise ShapeError(f"repeat_rows needs a matrix, got {a.data.shape}")
    m, c = a.data.shape

    def bwd(grad):
        a._accumulate(grad.reshape(m, k, c).sum(axis=1))

    return _node(np.repeat(a.data, k, axis=0), (a,), bwd)


def max_pool_rows(a: Tensor, group: int) -> Tensor:
    """Max over consecutive row blocks: (G*group, C) -> (G, C).

    Ties route the gradient to the first row of the block, so duplicated
    rows (e.g. a repeated fallback neighbor) are not double-counted.
    """
    if a.data.ndim != 2 or a.data.shape[0] % group != 0:
        raise ShapeError(f"max_pool_rows: shape {a.data.shape} not divisible into groups of {group}")
    g = a.data.shape[0] // group
    c = a.data.shape[1]
    blocks = a.data.reshape(g, group, c)
    arg = blocks.argmax(axis=1)

    def bwd(grad):
        acc = np.zeros((g, group, c))
        np.put_along_axis(acc, arg[:, None, :], grad[:, None, :], axis=1)
        a._accumulate(acc.reshape(g * group, c))

    return _node(blocks.max(axis=1), (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"reshape {a.data.shape} -> {shape} changes size")

    def bwd(grad):
        a._accumulate(grad.reshape(a.data.shape))

    return _node(a.data.reshape(shape), (a,), bwd)


# ---------------------------------------------------------------------------
# Adam with decoupled weight decay
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState) -> dict[str, Tensor]:
    """One Adam update (bias-corrected, decoupled weight decay), in place."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} != param shape {p.data.shape} for {name!r}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay:
            p.data -= state.learning_rate * state.weight_decay * p.data
    return params


# ---------------------------------------------------------------------------
# Checkpoint serialization
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"MGCK"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


def checkpoint_save(named: dict[str, Tensor | np.ndarray]) -> bytes:
    """Serialize named arrays bit-exactly.

    Layout: magic 'MGCK', version u32 LE, count u32 LE; per entry: name
    length u16 LE + UTF-8 name, rank u8, dims u32 LE, values f64 LE
    row-major.
    """
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(named))]
    for name, value in named.items():
        arr = np.asarray(value.data if isinstance(value, Tensor) else value, dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    return b"".join(chunks)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(
                f"checkpoint truncated: wanted {n} bytes at offset {self.pos}, have {len(self.buf) - self.pos}"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out


def checkpoint_load(buf: bytes) -> dict[str, np.ndarray]:
    r = _Reader(buf)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise BadMagicError("bad checkpoint magic")
    version, count = struct.unpack("<II", r.take(8))
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", r.take(2))
        name = r.take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", r.take(1))
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank)) if rank else ()
        size = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(dims)
        out[name] = values.astype(np.float64).copy()
    return out
