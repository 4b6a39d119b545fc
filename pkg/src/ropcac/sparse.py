"""Hash-indexed sparse tensors over an integer voxel grid.

Coordinates are canonically sorted lexicographically on construction so that
every downstream result is invariant to input point order.  Neighbor queries
go through an open-addressed hash table on packed coordinate keys, which
keeps window search linear in the number of points.
"""

from __future__ import annotations

import itertools

import numpy as np

from .autodiff import Node, value_of

_COORD_BIAS = np.uint64(1 << 20)
_COORD_SPAN = 1 << 21
_EMPTY_KEY = np.uint64(1) << np.uint64(63)
_HASH_MULT = np.uint64(0x9E3779B97F4A7C15)


def pack_coords(coords: np.ndarray) -> np.ndarray:
    """Pack int (x, y, z) rows into single uint64 keys (21 bits per axis)."""
    c = np.asarray(coords, dtype=np.int64)
    if c.size and (c.min() < -(1 << 20) or c.max() >= (1 << 20)):
        raise ValueError("coordinates out of packable range [-2^20, 2^20)")
    b = c.astype(np.uint64) + _COORD_BIAS
    return (b[:, 0] << np.uint64(42)) | (b[:, 1] << np.uint64(21)) | b[:, 2]


class VoxelHash:
    """Open-addressed coordinate -> row index map, vectorized lookups."""

    def __init__(self, coords: np.ndarray):
        coords = np.asarray(coords, dtype=np.int32).reshape(-1, 3)
        keys = pack_coords(coords)
        if len(np.unique(keys)) != len(keys):
            raise ValueError("duplicate coordinate in index")
        self.n = len(keys)
        p = 3
        while (1 << p) < 2 * max(self.n, 1):
            p += 1
        self._shift = np.uint64(64 - p)
        self._mask = np.uint64((1 << p) - 1)
        self._keys = np.full(1 << p, _EMPTY_KEY, dtype=np.uint64)
        self._rows = np.zeros(1 << p, dtype=np.int64)
        self._insert(keys)

    def _slot(self, keys: np.ndarray) -> np.ndarray:
        return (keys * _HASH_MULT) >> self._shift

    def _insert(self, keys: np.ndarray) -> None:
        rows = np.arange(len(keys), dtype=np.int64)
        slot = self._slot(keys)
        pending = np.arange(len(keys))
        while pending.size:
            s = slot[pending]
            free = self._keys[s] == _EMPTY_KEY
            placed = np.zeros(pending.size, dtype=bool)
            if free.any():
                cand = pending[free]
                cs = s[free]
                # first pending entry wins each free slot, rest re-probe
                uniq, first = np.unique(cs, return_index=True)
                winners = cand[first]
                self._keys[uniq] = keys[winners]
                self._rows[uniq] = rows[winners]
                placed[np.flatnonzero(free)[first]] = True
            pending = pending[~placed]
            slot[pending] = (slot[pending] + np.uint64(1)) & self._mask

    def lookup(self, coords: np.ndarray) -> np.ndarray:
        """Row index per query coordinate, -1 where absent."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        if np.any(coords < -(1 << 20)) or np.any(coords >= (1 << 20)):
            out = np.full(len(coords), -1, dtype=np.int64)
            inside = np.all((coords >= -(1 << 20)) & (coords < (1 << 20)), axis=1)
            if inside.any():
                out[inside] = self.lookup(coords[inside])
            return out
        keys = pack_coords(coords)
        out = np.full(len(keys), -1, dtype=np.int64)
        slot = self._slot(keys)
        active = np.arange(len(keys))
        while active.size:
            s = slot[active]
            found_keys = self._keys[s]
            hit = found_keys == keys[active]
            out[active[hit]] = self._rows[s[hit]]
            miss_done = found_keys == _EMPTY_KEY
            keep = ~(hit | miss_done)
            active = active[keep]
            slot[active] = (slot[active] + np.uint64(1)) & self._mask
        return out

    def contains(self, coords: np.ndarray) -> np.ndarray:
        return self.lookup(coords) >= 0


def build_index(coords: np.ndarray) -> VoxelHash:
    return VoxelHash(coords)


def lex_order(coords: np.ndarray) -> np.ndarray:
    c = np.asarray(coords)
    return np.lexsort((c[:, 2], c[:, 1], c[:, 0]))


class SparseTensor:
    """Coordinate set + aligned feature rows at a given stride."""

    def __init__(self, coords: np.ndarray, feats: np.ndarray, stride: int = 1,
                 *, presorted: bool = False):
        coords = np.asarray(coords, dtype=np.int32).reshape(-1, 3)
        feats = np.asarray(feats)
        if feats.ndim != 2 or len(feats) != len(coords):
            raise ValueError("feats must be N x C aligned with coords")
        if stride < 1:
            raise ValueError("stride must be positive")
        if coords.size and np.any(coords % stride != 0):
            raise ValueError(f"coordinates not divisible by stride {stride}")
        if not presorted:
            order = lex_order(coords)
            coords = coords[order]
            feats = feats[order]
        self.coords = coords
        self.feats = feats
        self.stride = int(stride)
        self.index = VoxelHash(coords)

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def channels(self) -> int:
        return self.feats.shape[1]


def downsample_coords(coords: np.ndarray, stride: int = 2) -> np.ndarray:
    """Unique floor-quotient coordinates on the ``stride`` grid, lex-sorted."""
    c = np.asarray(coords, dtype=np.int64)
    q = (c // stride) * stride
    q = np.unique(q, axis=0)  # unique on rows sorts lexicographically
    return q.astype(np.int32)


class GeometryPyramid:
    """Known coordinate sets per scale plus cached convolution index plans.

    Level 0 is the full-resolution geometry; level l+1 holds the stride-2**
    (l+1) quotients of level l.  Since geometry is transmitted losslessly,
    both encoder and decoder rebuild identical pyramids.
    """

    def __init__(self, coords: np.ndarray, depth: int):
        coords = np.asarray(coords, dtype=np.int32).reshape(-1, 3)
        order = lex_order(coords)
        self.levels: list[np.ndarray] = [coords[order]]
        self.strides: list[int] = [1]
        for lvl in range(1, depth + 1):
            stride = 1 << lvl
            self.levels.append(downsample_coords(self.levels[-1], stride))
            self.strides.append(stride)
        self.indexes = [VoxelHash(c) for c in self.levels]
        self._plans: dict[tuple, list] = {}

    @property
    def depth(self) -> int:
        return len(self.levels) - 1

    def counts(self) -> list[int]:
        return [len(c) for c in self.levels]

    def plan_same(self, level: int, ksize: int) -> list:
        key = ("same", level, ksize)
        if key not in self._plans:
            self._plans[key] = _plan_gather(
                self.levels[level], self.levels[level], self.indexes[level],
                self.strides[level], ksize)
        return self._plans[key]

    def plan_down(self, level: int, ksize: int) -> list:
        key = ("down", level, ksize)
        if key not in self._plans:
            self._plans[key] = _plan_gather(
                self.levels[level + 1], self.levels[level], self.indexes[level],
                self.strides[level], ksize)
        return self._plans[key]

    def plan_up(self, level: int, ksize: int) -> list:
        """Transposed plan: fine level ``level`` rows fed from level ``level+1``."""
        key = ("up", level, ksize)
        if key not in self._plans:
            fine = self.levels[level].astype(np.int64)
            coarse_stride = self.strides[level + 1]
            anchor = (fine // coarse_stride) * coarse_stride
            self._plans[key] = _plan_gather(
                anchor, self.levels[level + 1], self.indexes[level + 1],
                coarse_stride, ksize)
        return self._plans[key]

    def window_pairs(self, level: int, window: int):
        key = ("win", level, window)
        if key not in self._plans:
            self._plans[key] = window_pairs(
                self.levels[level], self.indexes[level], self.strides[level], window)
        return self._plans[key]


def kernel_offsets(ksize: int) -> np.ndarray:
    """Full cube of kernel offsets for odd K, z varying fastest."""
    if ksize < 1 or ksize % 2 == 0:
        raise ValueError("kernel size must be odd and >= 1")
    h = (ksize - 1) // 2
    return np.array(list(itertools.product(range(-h, h + 1), repeat=3)), dtype=np.int64)


def _plan_gather(out_coords, in_coords, in_index: VoxelHash, in_stride: int,
                 ksize: int) -> list:
    """Per-offset (out_rows, in_rows, in_rows_unique) triples for one convolution.

    ``in_rows_unique`` tells the backward pass whether a fast fancy-index
    scatter is safe; transposed plans repeat the shared parent row.
    """
    out64 = np.asarray(out_coords, dtype=np.int64)
    plan = []
    for m in kernel_offsets(ksize):
        rows = in_index.lookup(out64 + m * in_stride)
        valid = rows >= 0
        irows = rows[valid]
        unique = len(np.unique(irows)) == len(irows)
        plan.append((np.flatnonzero(valid), irows, unique))
    return plan


class ConvLayer:
    """Sparse convolution weights: one C_in x C_out matrix per cube offset."""

    def __init__(self, weight, bias, ksize: int, stride: int = 1):
        w = value_of(weight)
        if w.ndim != 3 or w.shape[0] != ksize ** 3:
            raise ValueError("weight must have shape (K^3, C_in, C_out)")
        if stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        self.weight = weight
        self.bias = bias
        self.ksize = ksize
        self.stride = stride

    @property
    def c_in(self) -> int:
        return value_of(self.weight).shape[1]

    @property
    def c_out(self) -> int:
        return value_of(self.weight).shape[2]


def conv_apply(tape, feats, weight, bias, plan: list, n_out: int) -> Node:
    """Apply a planned sparse convolution; differentiable in feats and weights."""
    X = value_of(feats)
    W = value_of(weight)
    b = value_of(bias)
    dtype = np.result_type(X, W)
    out = np.zeros((n_out, W.shape[2]), dtype=dtype)
    for m, (orows, irows, _) in enumerate(plan):
        if len(orows):
            out[orows] += X[irows] @ W[m]
    out += b
    node = Node(out)
    if tape is not None:
        def bw():
            g = node.grad
            if isinstance(bias, Node):
                bias.accumulate(g.sum(axis=0))
            feats_is_node = isinstance(feats, Node)
            weight_is_node = isinstance(weight, Node)
            if feats_is_node and feats.grad is None:
                feats.grad = np.zeros_like(X)
            if weight_is_node and weight.grad is None:
                weight.grad = np.zeros_like(W)
            for m, (orows, irows, unique) in enumerate(plan):
                if not len(orows):
                    continue
                gm = g[orows]
                if feats_is_node:
                    if unique:
                        feats.grad[irows] += gm @ W[m].T
                    else:
                        np.add.at(feats.grad, irows, gm @ W[m].T)
                if weight_is_node:
                    weight.grad[m] += X[irows].T @ gm
        tape.record(node, bw)
    return node


def sparse_conv(t: SparseTensor, layer: ConvLayer) -> SparseTensor:
    """Sparse convolution over occupied sites (evaluation path)."""
    if t.channels != layer.c_in:
        raise ValueError(f"feature width {t.channels} != layer C_in {layer.c_in}")
    if layer.stride == 1:
        out_coords = t.coords
        plan = _plan_gather(out_coords, t.coords, t.index, t.stride, layer.ksize)
        out_stride = t.stride
    else:
        out_stride = t.stride * 2
        out_coords = downsample_coords(t.coords, out_stride)
        plan = _plan_gather(out_coords, t.coords, t.index, t.stride, layer.ksize)
    node = conv_apply(None, t.feats, layer.weight, layer.bias, plan, len(out_coords))
    return SparseTensor(out_coords, node.value, out_stride, presorted=True)


def sparse_conv_up(t: SparseTensor, layer: ConvLayer, target_coords: np.ndarray) -> SparseTensor:
    """Transposed convolution onto the next finer pyramid level.

    Each target site anchors at its floor-parent and gathers the coarse
    sites within the kernel footprint around that parent.
    """
    if t.channels != layer.c_in:
        raise ValueError(f"feature width {t.channels} != layer C_in {layer.c_in}")
    target_coords = np.asarray(target_coords, dtype=np.int32).reshape(-1, 3)
    fine_stride = t.stride // 2
    if fine_stride < 1 or not np.array_equal(
            downsample_coords(target_coords, t.stride), t.coords):
        raise ValueError("target_coords is not the next finer level of this tensor")
    order = lex_order(target_coords)
    target_coords = target_coords[order]
    anchor = (target_coords.astype(np.int64) // t.stride) * t.stride
    plan = _plan_gather(anchor, t.coords, t.index, t.stride, layer.ksize)
    node = conv_apply(None, t.feats, layer.weight, layer.bias, plan, len(target_coords))
    return SparseTensor(target_coords, node.value, fine_stride, presorted=True)


def window_pairs(coords: np.ndarray, index: VoxelHash, stride: int, window: int):
    """All (i, j) pairs with chebyshev(c_i, c_j) <= stride*(window-1)/2.

    Returns (I, J, off_idx, offsets) where ``offsets[off_idx[p]]`` is the
    voxel-unit relative position c_i - c_j of pair p.  Pairs are sorted by
    (i, j) so accumulation order is deterministic.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be odd and >= 1")
    coords64 = np.asarray(coords, dtype=np.int64)
    offs = kernel_offsets(window)
    I_parts, J_parts, O_parts = [], [], []
    for k, m in enumerate(offs):
        rows = index.lookup(coords64 + m * stride)
        valid = rows >= 0
        i = np.flatnonzero(valid)
        I_parts.append(i)
        J_parts.append(rows[valid])
        O_parts.append(np.full(len(i), k, dtype=np.int64))
    I = np.concatenate(I_parts) if I_parts else np.zeros(0, dtype=np.int64)
    J = np.concatenate(J_parts) if J_parts else np.zeros(0, dtype=np.int64)
    O = np.concatenate(O_parts) if O_parts else np.zeros(0, dtype=np.int64)
    order = np.lexsort((J, I))
    # reported offset is c_i - c_j = -m * stride for a neighbor found at +m
    offsets = (-offs * stride).astype(np.int64)
    return I[order], J[order], O[order], offsets


def window_neighbors(t: SparseTensor, i: int, window: int):
    """Occupied neighbors of row ``i`` within the odd-size window, itself included."""
    if not 0 <= i < len(t):
        raise IndexError(f"row {i} out of range for {len(t)} points")
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be odd and >= 1")
    ci = t.coords[i].astype(np.int64)
    offs = kernel_offsets(window)
    rows = t.index.lookup(ci + offs * t.stride)
    valid = rows >= 0
    found = rows[valid]
    rel = (-offs[valid] * t.stride)
    order = np.argsort(found, kind="stable")
    return [(int(found[k]), tuple(int(v) for v in rel[k])) for k in order]
