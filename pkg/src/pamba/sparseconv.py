"""Submanifold sparse convolution on a hashed voxel grid."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DomainError
from .nn import LayerNorm, Module, parameter

OFFSETS = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.int64)
# OFFSETS[26 - k] == -OFFSETS[k]
FLIPPED = np.arange(len(OFFSETS))[::-1].copy()
CENTER = 13

_PACK_BITS = 21


def pack_coords(coords: np.ndarray) -> np.ndarray:
    """Injective int64 key for integer coordinates in ``[0, 2^21)`` per axis."""
    c = np.asarray(coords, dtype=np.int64)
    return (c[:, 0] << (2 * _PACK_BITS)) | (c[:, 1] << _PACK_BITS) | c[:, 2]


def unique_first_occurrence(coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Distinct rows of ``coords`` in first-occurrence order, plus the row->site map."""
    coords = np.asarray(coords, dtype=np.int64)
    if len(coords) == 0:
        return coords.reshape(0, 3), np.zeros(0, dtype=np.int64)
    keys = pack_coords(coords - coords.min(axis=0))
    _, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    return coords[first[order]], rank[inverse.reshape(-1)]


class SparseTensor:
    """Active voxel coordinates with one feature row each.

    The neighbor table used by convolutions depends only on the coordinates,
    so tensors derived with :meth:`with_feats` share it.
    """

    def __init__(self, coords: np.ndarray, feats: Union[Tensor, np.ndarray],
                 point_to_site: Optional[np.ndarray] = None, _cache: Optional[dict] = None):
        self.coords = np.asarray(coords, dtype=np.int64)
        self.feats = feats if isinstance(feats, Tensor) else Tensor(feats)
        if len(self.coords) != self.feats.shape[0]:
            raise DomainError("coords and feats must have the same number of rows")
        self.point_to_site = point_to_site
        self._cache = _cache if _cache is not None else {}

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def channels(self) -> int:
        return self.feats.shape[1]

    def with_feats(self, feats: Tensor) -> "SparseTensor":
        return SparseTensor(self.coords, feats, self.point_to_site, self._cache)

    @property
    def index(self) -> dict:
        """Map from coordinate tuple to feature row."""
        if "index" not in self._cache:
            self._cache["index"] = {tuple(int(v) for v in c): i for i, c in enumerate(self.coords)}
        return self._cache["index"]

    def neighbors(self) -> np.ndarray:
        """``(M, 27)`` row index of the site at each offset, ``-1`` if inactive."""
        if "nbr" not in self._cache:
            self._cache["nbr"] = neighbor_table(self.coords)
        return self._cache["nbr"]


def neighbor_table(coords: np.ndarray) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.int64)
    m = len(coords)
    if m == 0:
        return np.zeros((0, len(OFFSETS)), dtype=np.int64)
    base = coords - coords.min(axis=0) + 1
    keys = pack_coords(base)
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    table = np.full((m, len(OFFSETS)), -1, dtype=np.int64)
    for k, off in enumerate(OFFSETS):
        q = pack_coords(base + off)
        pos = np.searchsorted(sorted_keys, q)
        pos = np.minimum(pos, m - 1)
        hit = sorted_keys[pos] == q
        table[hit, k] = order[pos[hit]]
    return table


def build_sparse(coords: np.ndarray, feats: Union[Tensor, np.ndarray]) -> SparseTensor:
    """Merge points sharing a voxel (feature mean); rows in first-occurrence order."""
    coords = np.asarray(coords, dtype=np.int64)
    feats = feats if isinstance(feats, Tensor) else Tensor(feats)
    sites, point_to_site = unique_first_occurrence(coords)
    pooled = ad.segment_mean(feats, point_to_site, len(sites))
    return SparseTensor(sites, pooled, point_to_site)


@dataclass
class ConvKernel:
    weights: Tensor  # (3, 3, 3, C_in, C_out)
    bias: Tensor     # (C_out,)

    @classmethod
    def random(cls, c_in: int, c_out: int, rng: np.random.Generator, scale: float = 1.0):
        std = scale / np.sqrt(27 * c_in)
        return cls(parameter(rng.normal(0, std, (3, 3, 3, c_in, c_out))),
                   parameter(np.zeros(c_out)))

    @classmethod
    def zeros(cls, c_in: int, c_out: int):
        return cls(parameter(np.zeros((3, 3, 3, c_in, c_out))), parameter(np.zeros(c_out)))

    @property
    def c_in(self) -> int:
        return self.weights.shape[3]

    @property
    def c_out(self) -> int:
        return self.weights.shape[4]


def submanifold_conv(t: SparseTensor, k: ConvKernel) -> SparseTensor:
    """3x3x3 convolution evaluated only at, and reading only from, active sites."""
    if t.channels != k.c_in:
        raise DomainError(f"channel mismatch: tensor has {t.channels}, kernel expects {k.c_in}")
    w = ad.reshape(k.weights, (len(OFFSETS), k.c_in, k.c_out))
    out = ad.gather_conv(t.feats, t.neighbors(), w, k.bias, flipped=FLIPPED)
    return t.with_feats(out)


class SparseConv(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        k = ConvKernel.random(c_in, c_out, rng)
        self.weights, self.bias = k.weights, k.bias

    @property
    def kernel(self) -> ConvKernel:
        return ConvKernel(self.weights, self.bias)

    def __call__(self, t: SparseTensor) -> SparseTensor:
        return submanifold_conv(t, self.kernel)


class LocalAggregation(Module):
    """Pre-norm stack of ``depth`` submanifold convolutions with a residual.

    ``depth == 0`` is the identity.
    """

    def __init__(self, channels: int, rng: np.random.Generator, depth: int = 2):
        if not 0 <= depth <= 4:
            raise DomainError("local aggregation depth must be in [0, 4]")
        self.depth = depth
        self.norm = LayerNorm(channels) if depth else None
        self.convs = [SparseConv(channels, channels, rng) for _ in range(depth)]

    def __call__(self, t: SparseTensor) -> SparseTensor:
        if not self.depth:
            return t
        h = t.with_feats(self.norm(t.feats))
        for i, conv in enumerate(self.convs):
            if i:
                h = h.with_feats(ad.silu(h.feats))
            h = conv(h)
        return t.with_feats(ad.add(t.feats, h.feats))


def local_aggregation(t: SparseTensor, kernels: Sequence[ConvKernel],
                      norm: Optional[LayerNorm] = None) -> SparseTensor:
    """Functional form of :class:`LocalAggregation` for explicit kernels."""
    if not kernels:
        return t
    feats = norm(t.feats) if norm is not None else ad.layer_norm(
        t.feats, np.ones(t.channels), np.zeros(t.channels))
    h = t.with_feats(feats)
    for i, k in enumerate(kernels):
        if i:
            h = h.with_feats(ad.silu(h.feats))
        h = submanifold_conv(h, k)
    return t.with_feats(ad.add(t.feats, h.feats))
