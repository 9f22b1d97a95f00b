"""3D convolution layers (dense, sparse, submanifold), pooling and Adam.

Dense feature maps are channels-last tensors shaped (X, Y, Z, C).  Sparse
maps keep a sorted unique list of active voxel coordinates with one feature
row per site.  Kernels are shaped (k, k, k, C_in, C_out) and are applied as
cross-correlation: output site ``o`` reads input ``stride * o + d - pad`` for
kernel offset ``d``.  All sums over kernel offsets run in a fixed order.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Parameter, Tensor, gather_rows, make
from .grid import ravel


class ShapeError(ValueError):
    pass


# im2col buffers above this many elements lose to per-offset accumulation
IM2COL_MAX_ELEMENTS = 1 << 21


def conv_out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _offsets(k: int):
    return list(itertools.product(range(k), repeat=3))


# ---------------------------------------------------------------------------
# dense


def dense_conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
                 padding: int | None = None) -> Tensor:
    k = w.shape[0]
    if w.ndim != 5 or w.shape[:3] != (k, k, k):
        raise ShapeError(f"kernel must be (k,k,k,Cin,Cout), got {w.shape}")
    if x.ndim != 4 or x.shape[3] != w.shape[3]:
        raise ShapeError(f"input {x.shape} does not match kernel {w.shape}")
    if stride not in (1, 2):
        raise ShapeError("stride must be 1 or 2")
    p = k // 2 if padding is None else padding
    X, Y, Z, cin = x.shape
    cout = w.shape[4]
    O = [conv_out_size(n, k, stride, p) for n in (X, Y, Z)]
    xp = np.zeros((X + 2 * p, Y + 2 * p, Z + 2 * p, cin), dtype=x.dtype)
    xp[p:p + X, p:p + Y, p:p + Z] = x.value
    wv = w.value
    span = [stride * (o - 1) + 1 for o in O]
    offs = _offsets(k)
    n_out = O[0] * O[1] * O[2]

    def window(arr, d):
        return arr[d[0]:d[0] + span[0]:stride, d[1]:d[1] + span[1]:stride,
                   d[2]:d[2] + span[2]:stride]

    if n_out * len(offs) * cin <= IM2COL_MAX_ELEMENTS:
        # im2col with (offset, channel) as the minor axes so the kernel reshapes in place
        cols = np.empty(O + [len(offs), cin], dtype=x.dtype)
        for j, d in enumerate(offs):
            cols[..., j, :] = window(xp, d)
        cols = cols.reshape(n_out, -1)
        out = cols @ wv.reshape(-1, cout)
    else:
        cols = None
        out = np.zeros((n_out, cout), dtype=x.dtype)
        for d in offs:
            out += window(xp, d).reshape(-1, cin) @ wv[d]
    if b is not None:
        out += b.value
    out = out.reshape(O + [cout])

    def back(g):
        g2 = g.reshape(-1, cout)
        gx = np.zeros_like(xp) if x.requires_grad else None
        gw = None
        if cols is not None:
            if w.requires_grad:
                gw = (cols.T @ g2).reshape(wv.shape)
            if gx is not None:
                gcols = (g2 @ wv.reshape(-1, cout).T).reshape(O + [len(offs), cin])
                for j, d in enumerate(offs):
                    window(gx, d)[...] += gcols[..., j, :]
        else:
            gw = np.zeros_like(wv) if w.requires_grad else None
            for d in offs:
                if gw is not None:
                    gw[d] = window(xp, d).reshape(-1, cin).T @ g2
                if gx is not None:
                    window(gx, d)[...] += (g2 @ wv[d].T).reshape(O + [cin])
        if gx is not None:
            gx = gx[p:p + X, p:p + Y, p:p + Z]
        gb = g2.sum(axis=0) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return make(out, parents, back, "dense_conv3d")


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    v = x.value
    for a in range(3):
        v = np.repeat(v, factor, axis=a)
    X, Y, Z, C = x.shape

    def back(g):
        return (g.reshape(X, factor, Y, factor, Z, factor, C).sum(axis=(1, 3, 5)),)

    return make(v, (x,), back, "upsample_nearest")


def upsample_conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling followed by a stride-1 dense convolution."""
    return dense_conv3d(upsample_nearest(x, factor), w, b)


def avg_pool3d(x: Tensor, factor: int = 2) -> Tensor:
    X, Y, Z, C = x.shape
    if X % factor or Y % factor or Z % factor:
        raise ShapeError(f"pool factor {factor} does not divide {x.shape[:3]}")
    f = factor
    out = x.value.reshape(X // f, f, Y // f, f, Z // f, f, C).mean(axis=(1, 3, 5))

    def back(g):
        g = g[:, None, :, None, :, None, :] / (f ** 3)
        return (np.broadcast_to(g, (X // f, f, Y // f, f, Z // f, f, C))
                .reshape(X, Y, Z, C).astype(x.dtype),)

    return make(out.astype(x.dtype), (x,), back, "avg_pool3d")


# ---------------------------------------------------------------------------
# sparse


@dataclass
class SparseFeatureMap:
    coords: np.ndarray
    features: Tensor
    dims: tuple[int, int, int]
    resolution: float = 1.0
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        self.dims = tuple(int(d) for d in self.dims)

    def __len__(self):
        return len(self.coords)

    def keys(self) -> np.ndarray:
        return ravel(self.coords, self.dims)

    def to_dense(self) -> Tensor:
        return scatter_dense(self.features, self.coords, self.dims)

    def with_features(self, feats: Tensor) -> "SparseFeatureMap":
        return SparseFeatureMap(self.coords, feats, self.dims, self.resolution, self.origin)


def _lookup(sorted_keys: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Index of each query key in ``sorted_keys`` or -1."""
    if len(sorted_keys) == 0:
        return np.full(len(query), -1, dtype=np.int64)
    pos = np.searchsorted(sorted_keys, query)
    pos = np.minimum(pos, len(sorted_keys) - 1)
    return np.where(sorted_keys[pos] == query, pos, -1)


@dataclass
class Rulebook:
    """Per kernel offset, the (input row, output row) pairs it connects."""

    out_coords: np.ndarray
    out_dims: tuple[int, int, int]
    pairs: list  # (offset, in_idx, out_idx)


def sparse_rulebook(coords: np.ndarray, dims, k: int, stride: int) -> Rulebook:
    p = k // 2
    odims = tuple(conv_out_size(n, k, stride, p) for n in dims)
    cand = []
    for d in _offsets(k):
        num = coords + p - np.array(d)
        ok = np.all((num % stride == 0) & (num >= 0), axis=1)
        o = num[ok] // stride
        ok2 = np.all(o < np.array(odims), axis=1)
        cand.append((d, np.nonzero(ok)[0][ok2], o[ok2]))
    if coords.size:
        all_keys = np.concatenate([ravel(o, odims) for _, _, o in cand])
        out_keys = np.unique(all_keys)
    else:
        out_keys = np.zeros(0, dtype=np.int64)
    pairs = []
    for d, in_idx, o in cand:
        if len(in_idx):
            pairs.append((d, in_idx, np.searchsorted(out_keys, ravel(o, odims))))
    out_coords = np.stack(np.unravel_index(out_keys, odims), axis=1).astype(np.int64) \
        if len(out_keys) else np.zeros((0, 3), np.int64)
    return Rulebook(out_coords, odims, pairs)


def submanifold_rulebook(coords: np.ndarray, dims, k: int) -> Rulebook:
    p = k // 2
    keys = ravel(coords, dims)
    dims_a = np.array(dims)
    pairs = []
    for d in _offsets(k):
        nb = coords + np.array(d) - p
        inside = np.all((nb >= 0) & (nb < dims_a), axis=1)
        idx = np.full(len(coords), -1, dtype=np.int64)
        idx[inside] = _lookup(keys, ravel(nb[inside], dims))
        hit = idx >= 0
        if hit.any():
            pairs.append((d, idx[hit], np.nonzero(hit)[0]))
    return Rulebook(coords, tuple(dims), pairs)


def apply_rulebook(feats: Tensor, rb: Rulebook, w: Tensor, b: Tensor | None) -> Tensor:
    """Gather-matmul-scatter over the rulebook.

    Small problems gather every (output, offset) row into one matrix, with
    missing neighbours reading an appended zero row; large ones loop over
    offsets. Rows are unique per offset so plain fancy adds suffice.
    """
    fv, wv = feats.value, w.value
    if fv.shape[1] != w.shape[3]:
        raise ShapeError(f"features have {fv.shape[1]} channels, kernel expects {w.shape[3]}")
    k, cin, cout = w.shape[0], w.shape[3], w.shape[4]
    n_in, n_out = len(fv), len(rb.out_coords)
    table = cols = None
    if n_out * k ** 3 * cin <= IM2COL_MAX_ELEMENTS:
        table = np.full((n_out, k ** 3), n_in, dtype=np.int64)
        for d, i_in, i_out in rb.pairs:
            table[i_out, (d[0] * k + d[1]) * k + d[2]] = i_in
        cols = np.concatenate([fv, np.zeros((1, cin), dtype=fv.dtype)])[table].reshape(n_out, k ** 3 * cin)
        out = cols @ wv.reshape(-1, cout)
    else:
        out = np.zeros((n_out, cout), dtype=fv.dtype)
        for d, i_in, i_out in rb.pairs:
            out[i_out] += fv[i_in] @ wv[d]
    if b is not None:
        out += b.value

    def back(g):
        gf = gw = None
        if table is not None:
            if w.requires_grad:
                gw = (cols.T @ g).reshape(wv.shape)
            if feats.requires_grad:
                gpad = np.zeros((n_in + 1, cin), dtype=fv.dtype)
                gcols = (g @ wv.reshape(-1, cout).T).reshape(n_out, k ** 3, cin)
                for j in range(k ** 3):
                    gpad[table[:, j]] += gcols[:, j]
                gf = gpad[:n_in]
        else:
            gf = np.zeros_like(fv) if feats.requires_grad else None
            gw = np.zeros_like(wv) if w.requires_grad else None
            for d, i_in, i_out in rb.pairs:
                gsub = g[i_out]
                if gw is not None:
                    gw[d] = fv[i_in].T @ gsub
                if gf is not None:
                    gf[i_in] += gsub @ wv[d].T
        gb = g.sum(axis=0) if b is not None else None
        return (gf, gw, gb) if b is not None else (gf, gw)

    parents = (feats, w, b) if b is not None else (feats, w)
    return make(out, parents, back, "sparse_conv")


def sparse_conv3d(x: SparseFeatureMap, w: Tensor, b: Tensor | None = None, stride: int = 1,
                  rulebook: Rulebook | None = None) -> SparseFeatureMap:
    """Sparse convolution; output sites are all lattice sites touched by an input."""
    if stride not in (1, 2):
        raise ShapeError("stride must be 1 or 2")
    rb = rulebook or sparse_rulebook(x.coords, x.dims, w.shape[0], stride)
    feats = apply_rulebook(x.features, rb, w, b)
    return SparseFeatureMap(rb.out_coords, feats, rb.out_dims, x.resolution * stride, x.origin)


def submanifold_conv3d(x: SparseFeatureMap, w: Tensor, b: Tensor | None = None, stride: int = 1,
                       rulebook: Rulebook | None = None) -> SparseFeatureMap:
    """Convolution evaluated only at (and reading only from) the input active set."""
    if stride != 1:
        raise ShapeError("submanifold convolution requires stride 1")
    rb = rulebook or submanifold_rulebook(x.coords, x.dims, w.shape[0])
    return x.with_features(apply_rulebook(x.features, rb, w, b))


def scatter_dense(feats: Tensor, coords: np.ndarray, dims) -> Tensor:
    """Place sparse rows into a zero dense (X, Y, Z, C) tensor."""
    C = feats.shape[1]
    keys = ravel(coords, dims)
    out = np.zeros((int(np.prod(dims)), C), dtype=feats.dtype)
    out[keys] = feats.value

    def back(g):
        return (g.reshape(-1, C)[keys],)

    return make(out.reshape(tuple(dims) + (C,)), (feats,), back, "scatter_dense")


def sparse_upsample_to(x: SparseFeatureMap, target_coords: np.ndarray, target_dims,
                       factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of ``x`` evaluated at target sites only.

    Each target site copies its parent coarse site; parents that are inactive
    give zero rows.
    """
    parents = np.asarray(target_coords) // factor
    idx = _lookup(x.keys(), ravel(parents, x.dims))
    valid = idx >= 0
    return gather_rows(x.features, np.where(valid, idx, 0), valid)


# ---------------------------------------------------------------------------
# parameters and optimizer


def init_conv(rng: np.random.Generator, k: int, cin: int, cout: int, name: str,
              dtype=np.float32) -> tuple[Tensor, Tensor]:
    """He-style uniform init for leaky-ReLU fans."""
    fan_in = k ** 3 * cin
    bound = math.sqrt(6.0 / fan_in)
    w = rng.uniform(-bound, bound, size=(k, k, k, cin, cout)).astype(dtype)
    b = np.zeros(cout, dtype=dtype)
    return Parameter(w, name + ".weight"), Parameter(b, name + ".bias")


class Adam:
    """Bias-corrected Adam over a dict of named parameter tensors."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, beta1: float = 0.5,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m = {n: np.zeros_like(p.value) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.value) for n, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1 - self.beta1 ** t
        c2 = 1 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.value)
            m = self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            upd = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.value = (p.value - upd).astype(p.value.dtype)

    def state(self) -> dict:
        return {"step": self.step_count, "m": self.m, "v": self.v}

    def load_state(self, state: dict) -> None:
        self.step_count = int(state["step"])
        for name, p in self.params.items():
            if name in state["m"]:
                self.m[name] = np.asarray(state["m"][name], dtype=p.value.dtype).reshape(p.shape)
                self.v[name] = np.asarray(state["v"][name], dtype=p.value.dtype).reshape(p.shape)


def adam_step(params: np.ndarray, grads: np.ndarray, state: dict, lr: float, beta1: float = 0.5,
              beta2: float = 0.999, eps: float = 1e-8) -> tuple[np.ndarray, dict]:
    """Functional single-array Adam update; ``state`` holds ``t``, ``m``, ``v``."""
    t = state.get("t", 0) + 1
    m = beta1 * state.get("m", 0.0) + (1 - beta1) * grads
    v = beta2 * state.get("v", 0.0) + (1 - beta2) * grads * grads
    mhat = m / (1 - beta1 ** t)
    vhat = v / (1 - beta2 ** t)
    return params - lr * mhat / (np.sqrt(vhat) + eps), {"t": t, "m": m, "v": v}
