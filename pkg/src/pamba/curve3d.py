"""Encode/decode between 3D grid cells and 1D space-filling-curve keys.

Six patterns are supported: Hilbert, Z (Morton), the hybrid ``hz`` curve and
the axis-swapped variant of each.  Every function accepts either a single
``(u, v, w)`` coordinate or an ``(N, 3)`` integer array and is vectorized over
the array case.  Keys are ``int64`` and occupy exactly ``3 * bits`` bits.
"""
from __future__ import annotations

import enum
from typing import Union

import numpy as np

from .errors import DomainError

MAX_BITS = 20

ArrayLike = Union[np.ndarray, tuple, list]


class CurvePattern(str, enum.Enum):
    HILBERT = "hilbert"
    HILBERT_SWAP = "hilbert-swap"
    Z = "z"
    Z_SWAP = "z-swap"
    HZ = "hz"
    HZ_SWAP = "hz-swap"

    @property
    def is_swap(self) -> bool:
        return self.value.endswith("-swap")

    @property
    def base(self) -> "CurvePattern":
        return CurvePattern(self.value.replace("-swap", ""))

    @classmethod
    def parse(cls, name: Union[str, "CurvePattern"]) -> "CurvePattern":
        if isinstance(name, CurvePattern):
            return name
        key = str(name).strip().lower().replace("_", "-")
        aliases = {"zswap": "z-swap", "hilbertswap": "hilbert-swap", "hzswap": "hz-swap",
                   "morton": "z", "z-order": "z"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            choices = ", ".join(p.value for p in cls)
            raise DomainError(f"unknown curve pattern {name!r} (choose from {choices})") from None


def _check_bits(bits: int) -> int:
    if not isinstance(bits, (int, np.integer)) or not 1 <= int(bits) <= MAX_BITS:
        raise DomainError(f"bits must be an integer in [1, {MAX_BITS}], got {bits!r}")
    return int(bits)


def _as_coords(coord: ArrayLike, bits: int) -> tuple[np.ndarray, bool]:
    arr = np.asarray(coord)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[-1] != 3 or arr.ndim != 2:
        raise DomainError(f"coordinates must have shape (3,) or (N, 3), got {np.shape(coord)}")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.equal(np.floor(arr), arr)):
            raise DomainError("coordinates must be integers")
    arr = arr.astype(np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= (1 << bits)):
        raise DomainError(f"coordinate component out of range [0, 2^{bits})")
    return arr, single


def _as_keys(key: ArrayLike, bits: int) -> tuple[np.ndarray, bool]:
    arr = np.asarray(key)
    single = arr.ndim == 0
    arr = np.atleast_1d(arr).astype(np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= (1 << (3 * bits))):
        raise DomainError(f"key out of range [0, 2^{3 * bits})")
    return arr, single


# -- Z order ------------------------------------------------------------------

def _z_encode(c: np.ndarray, bits: int) -> np.ndarray:
    key = np.zeros(len(c), dtype=np.int64)
    for i in range(bits):
        for axis in range(3):
            key |= ((c[:, axis] >> i) & 1) << (3 * i + axis)
    return key


def _z_decode(key: np.ndarray, bits: int) -> np.ndarray:
    c = np.zeros((len(key), 3), dtype=np.int64)
    for i in range(bits):
        for axis in range(3):
            c[:, axis] |= ((key >> (3 * i + axis)) & 1) << i
    return c


# -- Hilbert (Skilling's transpose construction) -------------------------------

def _hilbert_encode(c: np.ndarray, bits: int) -> np.ndarray:
    x = [c[:, 0].copy(), c[:, 1].copy(), c[:, 2].copy()]
    q = 1 << (bits - 1)
    while q > 1:
        p = q - 1
        for i in range(3):
            hit = (x[i] & q) != 0
            t = (x[0] ^ x[i]) & p
            x[0] = np.where(hit, x[0] ^ p, x[0] ^ t)
            x[i] = np.where(hit, x[i], x[i] ^ t)
        q >>= 1
    for i in range(1, 3):
        x[i] ^= x[i - 1]
    t = np.zeros_like(x[0])
    q = 1 << (bits - 1)
    while q > 1:
        t = np.where((x[2] & q) != 0, t ^ (q - 1), t)
        q >>= 1
    for i in range(3):
        x[i] ^= t
    key = np.zeros(len(c), dtype=np.int64)
    for level in range(bits - 1, -1, -1):
        for i in range(3):
            key = (key << 1) | ((x[i] >> level) & 1)
    return key


def _hilbert_decode(key: np.ndarray, bits: int) -> np.ndarray:
    x = [np.zeros_like(key) for _ in range(3)]
    shift = 3 * bits
    for level in range(bits - 1, -1, -1):
        for i in range(3):
            shift -= 1
            x[i] |= ((key >> shift) & 1) << level
    t = x[2] >> 1
    for i in range(2, 0, -1):
        x[i] ^= x[i - 1]
    x[0] ^= t
    q = 2
    while q != (1 << bits):
        p = q - 1
        for i in range(2, -1, -1):
            hit = (x[i] & q) != 0
            t = (x[0] ^ x[i]) & p
            x[0] = np.where(hit, x[0] ^ p, x[0] ^ t)
            x[i] = np.where(hit, x[i], x[i] ^ t)
        q <<= 1
    return np.stack(x, axis=1)


# -- hz: Hilbert over coarse cells, Z inside each coarse cell ------------------

def hz_split(bits: int) -> tuple[int, int]:
    """Return ``(coarse_bits, fine_bits)``; the coarse half takes the odd bit."""
    coarse = (bits + 1) // 2
    return coarse, bits - coarse


def _hz_encode(c: np.ndarray, bits: int) -> np.ndarray:
    b_h, b_l = hz_split(bits)
    coarse = _hilbert_encode(c >> b_l, b_h)
    if b_l == 0:
        return coarse
    fine = _z_encode(c & ((1 << b_l) - 1), b_l)
    return (coarse << (3 * b_l)) | fine


def _hz_decode(key: np.ndarray, bits: int) -> np.ndarray:
    b_h, b_l = hz_split(bits)
    coarse = _hilbert_decode(key >> (3 * b_l), b_h)
    if b_l == 0:
        return coarse
    fine = _z_decode(key & ((1 << (3 * b_l)) - 1), b_l)
    return (coarse << b_l) | fine


_ENCODERS = {CurvePattern.HILBERT: _hilbert_encode, CurvePattern.Z: _z_encode, CurvePattern.HZ: _hz_encode}
_DECODERS = {CurvePattern.HILBERT: _hilbert_decode, CurvePattern.Z: _z_decode, CurvePattern.HZ: _hz_decode}

_SWAP = [1, 0, 2]


def encode(pattern: Union[str, CurvePattern], coord: ArrayLike, bits: int):
    """Rank of ``coord`` along the curve ``pattern`` at ``bits`` bits per axis.

    Returns a Python ``int`` for a single coordinate and an ``int64`` array
    for an ``(N, 3)`` input.
    """
    pattern = CurvePattern.parse(pattern)
    bits = _check_bits(bits)
    c, single = _as_coords(coord, bits)
    if pattern.is_swap:
        c = c[:, _SWAP]
    key = _ENCODERS[pattern.base](c, bits)
    return int(key[0]) if single else key


def decode(pattern: Union[str, CurvePattern], key: ArrayLike, bits: int):
    """Inverse of :func:`encode`."""
    pattern = CurvePattern.parse(pattern)
    bits = _check_bits(bits)
    k, single = _as_keys(key, bits)
    c = _DECODERS[pattern.base](k, bits)
    if pattern.is_swap:
        c = c[:, _SWAP]
    return tuple(int(v) for v in c[0]) if single else c


def hz_encode(coord: ArrayLike, bits: int):
    return encode(CurvePattern.HZ, coord, bits)


def hilbert_encode(coord: ArrayLike, bits: int):
    return encode(CurvePattern.HILBERT, coord, bits)


def z_encode(coord: ArrayLike, bits: int):
    return encode(CurvePattern.Z, coord, bits)


def full_cube(bits: int) -> np.ndarray:
    """All ``2^(3*bits)`` cells of the cube as an ``(M, 3)`` array."""
    side = np.arange(1 << bits, dtype=np.int64)
    u, v, w = np.meshgrid(side, side, side, indexing="ij")
    return np.stack([u.ravel(), v.ravel(), w.ravel()], axis=1)
