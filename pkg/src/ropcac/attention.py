"""Windowed cosine-similarity self-attention over sparse tensors.

Each point attends to the occupied sites inside an odd-size cube window.
The weight of a pair is the cosine between the query projection of the
center feature and the key projection of the neighbor feature plus a
relative-position term; values are summed without normalization, so a
lone neighbor keeps its raw cosine weight instead of being forced to 1.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape, value_of
from .sparse import SparseTensor, window_pairs

COSINE_NORM_EPS = 1e-12


def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int,
                   scale: float = 1.0) -> np.ndarray:
    bound = scale / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class MLP:
    """Two affine layers with a ReLU between."""

    def __init__(self, w1, b1, w2, b2):
        self.w1, self.b1, self.w2, self.b2 = w1, b1, w2, b2

    @classmethod
    def create(cls, store: ad.ParamStore, prefix: str, c_in: int, c_hidden: int,
               c_out: int, rng: np.random.Generator) -> "MLP":
        # biases share the fan-in uniform init; a zero bias would pin the
        # delta encoder's hidden layer on the ReLU kink at offset (0,0,0)
        return cls(
            store.create(f"{prefix}.w1", fan_in_uniform(rng, (c_in, c_hidden), c_in)),
            store.create(f"{prefix}.b1", fan_in_uniform(rng, (c_hidden,), c_in)),
            store.create(f"{prefix}.w2", fan_in_uniform(rng, (c_hidden, c_out), c_hidden)),
            store.create(f"{prefix}.b2", fan_in_uniform(rng, (c_out,), c_hidden)),
        )

    def apply(self, tape: Tape | None, x) -> Node:
        h = ad.relu(tape, ad.affine(tape, x, self.w1, self.b1))
        return ad.affine(tape, h, self.w2, self.b2)


class AttentionParams:
    """Query/key/value projections plus the relative-position encoder."""

    def __init__(self, theta: MLP, alpha: MLP, lam: MLP, delta: MLP, window: int = 5):
        if window < 1 or window % 2 == 0:
            raise ValueError("window must be odd and >= 1")
        self.theta = theta
        self.alpha = alpha
        self.lam = lam
        self.delta = delta
        self.window = window


def create_attention_params(store: ad.ParamStore, prefix: str, channels: int,
                            rng: np.random.Generator, window: int = 5) -> AttentionParams:
    return AttentionParams(
        MLP.create(store, f"{prefix}.theta", channels, channels, channels, rng),
        MLP.create(store, f"{prefix}.alpha", channels, channels, channels, rng),
        MLP.create(store, f"{prefix}.lam", channels, channels, channels, rng),
        MLP.create(store, f"{prefix}.delta", 3, channels, channels, rng),
        window,
    )


def cosine_rows(tape: Tape | None, q, k) -> Node:
    """Row-wise cosine similarity; rows with tiny norm get weight 0."""
    qv, kv = value_of(q), value_of(k)
    qn = np.sqrt((qv * qv).sum(axis=1))
    kn = np.sqrt((kv * kv).sum(axis=1))
    ok = (qn >= COSINE_NORM_EPS) & (kn >= COSINE_NORM_EPS)
    denom = np.where(ok, qn * kn, 1.0)
    dots = (qv * kv).sum(axis=1)
    w = np.where(ok, dots / denom, 0.0).astype(qv.dtype)
    out = Node(w)
    if tape is not None:
        def bw():
            g = np.where(ok, out.grad, 0.0)[:, None]
            inv = (1.0 / denom)[:, None]
            c = w[:, None]
            if isinstance(q, Node):
                q.accumulate((g * (kv * inv - c * qv / np.where(ok, qn * qn, 1.0)[:, None])
                              ).astype(qv.dtype))
            if isinstance(k, Node):
                k.accumulate((g * (qv * inv - c * kv / np.where(ok, kn * kn, 1.0)[:, None])
                              ).astype(kv.dtype))
        tape.record(out, bw)
    return out


def scatter_weighted(tape: Tape | None, w, v, rows: np.ndarray, n: int) -> Node:
    """out[r] = sum over pairs p with rows[p]=r of w[p] * v[p]."""
    wv, vv = value_of(w), value_of(v)
    out_val = np.zeros((n, vv.shape[1]), dtype=np.result_type(wv, vv))
    np.add.at(out_val, rows, wv[:, None] * vv)
    out = Node(out_val)
    if tape is not None:
        def bw():
            g = out.grad[rows]
            if isinstance(w, Node):
                w.accumulate((g * vv).sum(axis=1).astype(wv.dtype))
            if isinstance(v, Node):
                v.accumulate(g * wv[:, None])
        tape.record(out, bw)
    return out


def attention_apply(tape: Tape | None, feats, p: AttentionParams, pairs) -> Node:
    """Planned local attention; ``pairs`` comes from sparse.window_pairs."""
    I, J, O, offsets = pairs
    fv = value_of(feats)
    q = p.theta.apply(tape, feats)
    k = p.alpha.apply(tape, feats)
    v = p.lam.apply(tape, feats)
    d = p.delta.apply(tape, offsets.astype(fv.dtype))
    q_pair = ad.gather_rows(tape, q, I)
    k_pair = ad.add(tape, ad.gather_rows(tape, k, J), ad.gather_rows(tape, d, O))
    v_pair = ad.gather_rows(tape, v, J)
    w_pair = cosine_rows(tape, q_pair, k_pair)
    return scatter_weighted(tape, w_pair, v_pair, I, len(fv))


def sp_trans_apply(tape: Tape | None, feats, p: AttentionParams, pairs) -> Node:
    return ad.add(tape, feats, attention_apply(tape, feats, p, pairs))


def local_attention(t: SparseTensor, p: AttentionParams) -> SparseTensor:
    pairs = window_pairs(t.coords, t.index, t.stride, p.window)
    node = attention_apply(None, t.feats, p, pairs)
    return SparseTensor(t.coords, node.value, t.stride, presorted=True)


def sp_trans_block(t: SparseTensor, p: AttentionParams) -> SparseTensor:
    att = local_attention(t, p)
    return SparseTensor(t.coords, t.feats + att.feats, t.stride, presorted=True)


def attention_weights(t: SparseTensor, p: AttentionParams):
    """Evaluation helper: pair rows (I, J) and their cosine weights."""
    pairs = window_pairs(t.coords, t.index, t.stride, p.window)
    I, J, O, offsets = pairs
    q = p.theta.apply(None, t.feats).value
    k = p.alpha.apply(None, t.feats).value
    d = p.delta.apply(None, offsets.astype(t.feats.dtype)).value
    w = cosine_rows(None, Node(q[I]), Node(k[J] + d[O])).value
    return I, J, w
