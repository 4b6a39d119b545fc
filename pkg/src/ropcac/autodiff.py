"""Minimal reverse-mode differentiation on numpy arrays.

The codec uses a small closed set of operations, each with a hand-written
backward rule recorded on a tape.  Ops accept ``Node`` inputs (tracked) or
plain ndarrays (constants, gradient zero).  Passing ``tape=None`` runs the
forward pass without recording, which is how the finite-difference oracle
and the evaluation paths reuse the same code.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
GRAD_CLIP_NORM = 10.0

CHECKPOINT_MAGIC = b"ROPW"
CHECKPOINT_VERSION = 1


class TapeError(RuntimeError):
    pass


class Node:
    """A value in the computation, with a lazily allocated gradient buffer."""

    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = np.asarray(value)
        self.grad: np.ndarray | None = None

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    @property
    def shape(self):
        return self.value.shape


class Param(Node):
    """A learnable Node carrying Adam moment buffers and a step counter."""

    __slots__ = ("m", "v", "t")

    def __init__(self, value: np.ndarray):
        super().__init__(np.asarray(value, dtype=np.float32))
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)
        self.t = 0


class Tape:
    """Ordered record of operations; replaying in reverse accumulates grads."""

    def __init__(self):
        self._records: list[tuple[Node, Callable[[], None]]] = []
        self._spent = False

    def record(self, out: Node, backward_fn: Callable[[], None]) -> None:
        self._records.append((out, backward_fn))

    def backward(self, loss: Node | None = None, seed: float = 1.0) -> None:
        if self._spent:
            raise TapeError("tape already replayed; build a new tape per forward pass")
        if loss is None:
            if not self._records:
                raise TapeError("empty tape")
            loss = self._records[-1][0]
        if loss.value.size != 1:
            raise TapeError(f"backward seed must be scalar, got shape {loss.value.shape}")
        loss.accumulate(np.full_like(loss.value, seed))
        for out, fn in reversed(self._records):
            if out.grad is not None:  # dead branch: nothing downstream used it
                fn()
        self._spent = True


def backward(tape: Tape, loss: Node | None = None, seed: float = 1.0) -> None:
    tape.backward(loss, seed)


# ---------------------------------------------------------------------------
# generic ops


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else np.asarray(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _acc(x, g: np.ndarray) -> None:
    if isinstance(x, Node):
        x.accumulate(_unbroadcast(g, x.value.shape))


def add(tape, a, b) -> Node:
    out = Node(value_of(a) + value_of(b))
    if tape is not None:
        def bw():
            _acc(a, out.grad)
            _acc(b, out.grad)
        tape.record(out, bw)
    return out


def sub(tape, a, b) -> Node:
    out = Node(value_of(a) - value_of(b))
    if tape is not None:
        def bw():
            _acc(a, out.grad)
            _acc(b, -out.grad)
        tape.record(out, bw)
    return out


def mul(tape, a, b) -> Node:
    av, bv = value_of(a), value_of(b)
    out = Node(av * bv)
    if tape is not None:
        def bw():
            _acc(a, out.grad * bv)
            _acc(b, out.grad * av)
        tape.record(out, bw)
    return out


def div(tape, a, b) -> Node:
    av, bv = value_of(a), value_of(b)
    out = Node(av / bv)
    if tape is not None:
        def bw():
            _acc(a, out.grad / bv)
            _acc(b, -out.grad * av / (bv * bv))
        tape.record(out, bw)
    return out


def smul(tape, a, s: float) -> Node:
    out = Node(value_of(a) * s)
    if tape is not None:
        def bw():
            _acc(a, out.grad * s)
        tape.record(out, bw)
    return out


def sadd(tape, a, s: float) -> Node:
    out = Node(value_of(a) + s)
    if tape is not None:
        def bw():
            _acc(a, out.grad)
        tape.record(out, bw)
    return out


def relu(tape, a) -> Node:
    av = value_of(a)
    out = Node(np.maximum(av, 0))
    if tape is not None:
        mask = av > 0
        def bw():
            _acc(a, out.grad * mask)
        tape.record(out, bw)
    return out


def clip_min(tape, a, lo: float) -> Node:
    """Elementwise max(a, lo); gradient is zero where the floor is active."""
    av = value_of(a)
    out = Node(np.maximum(av, lo))
    if tape is not None:
        mask = av > lo
        def bw():
            _acc(a, out.grad * mask)
        tape.record(out, bw)
    return out


def tanh(tape, a) -> Node:
    t = np.tanh(value_of(a))
    out = Node(t)
    if tape is not None:
        def bw():
            _acc(a, out.grad * (1.0 - t * t))
        tape.record(out, bw)
    return out


def sigmoid(tape, a) -> Node:
    av = value_of(a)
    s = np.where(av >= 0, 1.0 / (1.0 + np.exp(-np.abs(av))),
                 np.exp(-np.abs(av)) / (1.0 + np.exp(-np.abs(av))))
    s = s.astype(av.dtype)
    out = Node(s)
    if tape is not None:
        def bw():
            _acc(a, out.grad * s * (1.0 - s))
        tape.record(out, bw)
    return out


def softplus(tape, a) -> Node:
    av = value_of(a)
    v = np.logaddexp(0.0, av).astype(av.dtype)
    out = Node(v)
    if tape is not None:
        sig = np.where(av >= 0, 1.0 / (1.0 + np.exp(-np.abs(av))),
                       np.exp(-np.abs(av)) / (1.0 + np.exp(-np.abs(av)))).astype(av.dtype)
        def bw():
            _acc(a, out.grad * sig)
        tape.record(out, bw)
    return out


def log(tape, a) -> Node:
    av = value_of(a)
    out = Node(np.log(av))
    if tape is not None:
        def bw():
            _acc(a, out.grad / av)
        tape.record(out, bw)
    return out


def pow_const(tape, a, p: float) -> Node:
    av = value_of(a)
    out = Node(av ** p)
    if tape is not None:
        def bw():
            _acc(a, out.grad * p * av ** (p - 1.0))
        tape.record(out, bw)
    return out


def matmul(tape, x, w) -> Node:
    xv, wv = value_of(x), value_of(w)
    out = Node(xv @ wv)
    if tape is not None:
        def bw():
            _acc(x, out.grad @ wv.T)
            _acc(w, xv.T @ out.grad)
        tape.record(out, bw)
    return out


def sum_all(tape, a) -> Node:
    av = value_of(a)
    out = Node(np.asarray(av.sum(), dtype=av.dtype))
    if tape is not None:
        def bw():
            _acc(a, np.broadcast_to(out.grad, av.shape))
        tape.record(out, bw)
    return out


def mean_all(tape, a) -> Node:
    av = value_of(a)
    out = Node(np.asarray(av.mean(), dtype=av.dtype))
    if tape is not None:
        inv_n = 1.0 / av.size
        def bw():
            _acc(a, np.broadcast_to(out.grad * inv_n, av.shape))
        tape.record(out, bw)
    return out


def sum_axis(tape, a, axis: int) -> Node:
    av = value_of(a)
    out = Node(av.sum(axis=axis))
    if tape is not None:
        def bw():
            _acc(a, np.broadcast_to(np.expand_dims(out.grad, axis), av.shape))
        tape.record(out, bw)
    return out


def gather_rows(tape, a, idx: np.ndarray) -> Node:
    av = value_of(a)
    out = Node(av[idx])
    if tape is not None:
        def bw():
            if isinstance(a, Node):
                if a.grad is None:
                    a.grad = np.zeros_like(av)
                np.add.at(a.grad, idx, out.grad)
        tape.record(out, bw)
    return out


def reshape(tape, a, shape: tuple[int, ...]) -> Node:
    av = value_of(a)
    out = Node(av.reshape(shape))
    if tape is not None:
        def bw():
            _acc(a, out.grad.reshape(av.shape))
        tape.record(out, bw)
    return out


def slice_cols(tape, a, start: int, stop: int) -> Node:
    av = value_of(a)
    out = Node(av[:, start:stop])
    if tape is not None:
        def bw():
            if isinstance(a, Node):
                if a.grad is None:
                    a.grad = np.zeros_like(av)
                a.grad[:, start:stop] += out.grad
        tape.record(out, bw)
    return out


def affine(tape, x, w, b) -> Node:
    return add(tape, matmul(tape, x, w), b)


# ---------------------------------------------------------------------------
# parameter store / optimizer


class ParamStore:
    """Named parameters with gradients and Adam state; single writer."""

    def __init__(self):
        self._params: dict[str, Param] = {}

    def create(self, name: str, value: np.ndarray) -> Param:
        if name in self._params:
            raise ValueError(f"duplicate parameter name '{name}'")
        p = Param(value)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> Iterable[tuple[str, Param]]:
        for name in self.names():
            yield name, self._params[name]

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad = None

    def grad_norm(self) -> float:
        total = 0.0
        for _, p in self.items():
            if p.grad is not None:
                total += float(np.square(p.grad.astype(np.float64)).sum())
        return float(np.sqrt(total))

    def adam_step(self, lr: float, clip_norm: float | None = GRAD_CLIP_NORM) -> None:
        """One Adam update over all parameters; clears gradients afterwards."""
        for name, p in self.items():
            g = p.grad
            if g is not None and not np.isfinite(g).all():
                raise ValueError(f"non-finite gradient for parameter '{name}'")
        scale = 1.0
        if clip_norm is not None:
            norm = self.grad_norm()
            if norm > clip_norm:
                scale = clip_norm / norm
        for _, p in self.items():
            g = (p.grad * scale) if p.grad is not None else np.zeros_like(p.value)
            p.t += 1
            p.m = ADAM_BETA1 * p.m + (1.0 - ADAM_BETA1) * g
            p.v = ADAM_BETA2 * p.v + (1.0 - ADAM_BETA2) * g * g
            m_hat = p.m / (1.0 - ADAM_BETA1 ** p.t)
            v_hat = p.v / (1.0 - ADAM_BETA2 ** p.t)
            p.value -= (lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)).astype(p.value.dtype)
        self.zero_grads()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.value for name, p in self.items()}

    def load_arrays(self, tensors: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(tensors)
        extra = set(tensors) - set(self._params)
        if missing or extra:
            raise ValueError(f"checkpoint mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, p in self.items():
            arr = np.asarray(tensors[name], dtype=np.float32)
            if arr.shape != p.value.shape:
                raise ValueError(f"shape mismatch for '{name}': {arr.shape} vs {p.value.shape}")
            p.value[...] = arr


def lr_schedule(epoch: int) -> float:
    """Learning rate at a given epoch: 1e-4 decayed by 3/4 every 15 epochs, floored at 1e-6."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return max(1e-4 * 0.75 ** (epoch // 15), 1e-6)


# ---------------------------------------------------------------------------
# checkpoint file (magic ROPW)


def save_checkpoint(path: str, store: ParamStore, header: dict[str, str] | None = None) -> None:
    header_text = "".join(f"{k}={v}\n" for k, v in (header or {}).items())
    header_bytes = header_text.encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<B", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for name, p in store.items():
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            arr = np.ascontiguousarray(p.value, dtype=np.float32)
            f.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.astype("<f4").tobytes())


def load_checkpoint(path: str) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    version = data[4]
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<I", data, 5)
    pos = 9
    header_text = data[pos:pos + hlen].decode("utf-8")
    pos += hlen
    header = {}
    for line in header_text.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            header[k] = v
    tensors: dict[str, np.ndarray] = {}
    while pos < len(data):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        rank = data[pos]
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims)
        pos += 4 * count
        tensors[name] = arr.copy()
    return header, tensors


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_difference_check(
    eval_loss: Callable[[Tape | None], Node],
    wiggle: dict[str, Node],
    rng: np.random.Generator | None = None,
    max_probes: int = 25,
    h_scale: float = 1e-3,
    fd_eval: Callable[[Tape | None], Node] | None = None,
    fd_wiggle: dict[str, Node] | None = None,
) -> float:
    """Compare analytic gradients against central finite differences.

    ``eval_loss(tape)`` must rebuild the scalar loss from the current values
    of the nodes in ``wiggle``.  When ``fd_eval``/``fd_wiggle`` are given the
    difference quotient is evaluated on that (typically float64) mirror while
    the analytic gradient comes from the primary path.  Returns the maximum
    relative error over all probed entries.
    """
    rng = rng or np.random.default_rng(0)
    for node in wiggle.values():
        node.grad = None  # stale buffers from earlier tapes would accumulate
    tape = Tape()
    loss = eval_loss(tape)
    tape.backward(loss)
    analytic = {}
    for key, node in wiggle.items():
        analytic[key] = np.zeros_like(node.value) if node.grad is None else node.grad.copy()

    fd_eval = fd_eval or eval_loss
    fd_wiggle = fd_wiggle or wiggle

    worst = 0.0
    for key, node in fd_wiggle.items():
        flat = node.value.reshape(-1)
        n = flat.size
        if n <= max_probes:
            picks = np.arange(n)
        else:
            picks = rng.choice(n, size=max_probes, replace=False)
        a_flat = analytic[key].reshape(-1)
        for i in picks:
            x0 = flat[i]
            h = h_scale * max(1.0, abs(float(x0)))
            flat[i] = x0 + h
            f_plus = float(fd_eval(None).value)
            flat[i] = x0 - h
            f_minus = float(fd_eval(None).value)
            flat[i] = x0
            fd = (f_plus - f_minus) / (2.0 * h)
            a = float(a_flat[i])
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-3)
            worst = max(worst, rel)
    return worst
