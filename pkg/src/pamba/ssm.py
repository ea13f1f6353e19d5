"""Selective state-space scans.

Plain-numpy forms (``discretize``, ``scan_sequential``, ``scan_parallel``,
``scan_kernel``, ``bidirectional``) serve as reference implementations; the
:class:`MambaMixer` builds the same computation out of differentiable
operators so it can be trained.

Shape conventions: sequences are ``(L, D)``; the state is ``(D, S)`` per
step; the selective projections map a step's ``D`` channels to ``S`` values
(``B``, ``C``) or ``D`` values (``delta``).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numba
import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DomainError, NumericError
from .nn import Module, parameter

TAYLOR_THRESHOLD = 1e-8


@dataclass
class SsmParams:
    """Diagonal continuous-time state matrix, one row of ``S`` entries per channel."""

    A: np.ndarray  # (D, S), negative

    @classmethod
    def default(cls, d_inner: int, d_state: int) -> "SsmParams":
        return cls(-np.tile(np.arange(1, d_state + 1, dtype=np.float64), (d_inner, 1)))


@dataclass
class SelectiveProjections:
    W_B: np.ndarray      # (D, S)
    W_C: np.ndarray      # (D, S)
    W_delta: np.ndarray  # (D, D)
    b_delta: np.ndarray  # (D,)

    @classmethod
    def random(cls, d_inner: int, d_state: int, rng: np.random.Generator,
               dt_min: float = 1e-3, dt_max: float = 1e-1) -> "SelectiveProjections":
        scale = 1.0 / np.sqrt(d_inner)
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=d_inner))
        return cls(
            W_B=rng.normal(0, scale, (d_inner, d_state)),
            W_C=rng.normal(0, scale, (d_inner, d_state)),
            W_delta=rng.normal(0, scale, (d_inner, d_inner)),
            b_delta=inverse_softplus(dt),
        )


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0, x)


def inverse_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


def _check_finite(*arrays: np.ndarray) -> None:
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise NumericError("non-finite value in state-space computation")


def discretize(A: np.ndarray, B: np.ndarray, delta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order-hold discretization of a diagonal SSM.

    ``A``, ``B`` are ``(D, S)`` (or broadcastable), ``delta`` is ``(D,)``.
    Returns ``(A_bar, B_bar)``.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    delta = np.asarray(delta, dtype=float)
    _check_finite(A, B, delta)
    if np.any(delta < 0):
        raise DomainError("delta must be non-negative")
    d = delta[..., None] if delta.ndim and delta.ndim == A.ndim - 1 else delta
    z = d * A
    a_bar = np.exp(z)
    small = np.abs(z) < TAYLOR_THRESHOLD
    safe_a = np.where(small, 1.0, A)
    b_bar = np.where(small, d * B, np.expm1(z) / safe_a * B)
    return a_bar, b_bar


# -- linear recurrences h_t = a_t * h_{t-1} + u_t -----------------------------------

def compose_affine(first: tuple, second: tuple) -> tuple:
    """Apply ``first`` then ``second``; maps are ``h -> a * h + b``."""
    a1, b1 = first
    a2, b2 = second
    return a2 * a1, a2 * b1 + b2


@numba.njit(cache=True)
def _recurrence_kernel(a, u, h):
    length, width = u.shape
    state = np.zeros(width, dtype=u.dtype)
    for t in range(length):
        for j in range(width):
            state[j] = a[t, j] * state[j] + u[t, j]
            h[t, j] = state[j]


def _recurrence_sequential(a: np.ndarray, u: np.ndarray) -> np.ndarray:
    flat_u = np.ascontiguousarray(u).reshape(len(u), -1)
    flat_a = np.ascontiguousarray(a, dtype=u.dtype).reshape(len(u), -1)
    h = np.empty_like(flat_u)
    _recurrence_kernel(flat_a, flat_u, h)
    return h.reshape(u.shape)


def _recurrence_blelloch(a: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Work-efficient (up-sweep / down-sweep) prefix scan over affine maps."""
    length = len(u)
    n = 1 << max(0, (length - 1).bit_length())
    ca = np.ones((n,) + u.shape[1:], dtype=u.dtype)
    cb = np.zeros((n,) + u.shape[1:], dtype=u.dtype)
    ca[:length] = a
    cb[:length] = u
    step = 1
    while step < n:
        left = slice(step - 1, n, 2 * step)
        right = slice(2 * step - 1, n, 2 * step)
        cb[right] = ca[right] * cb[left] + cb[right]
        ca[right] = ca[right] * ca[left]
        step *= 2
    ca[n - 1] = 1
    cb[n - 1] = 0
    step = n // 2
    while step >= 1:
        left = slice(step - 1, n, 2 * step)
        right = slice(2 * step - 1, n, 2 * step)
        ta = ca[left].copy()
        tb = cb[left].copy()
        ca[left] = ca[right]
        cb[left] = cb[right]
        cb[right] = ta * cb[right] + tb
        ca[right] = ta * ca[right]
        step //= 2
    # exclusive prefix applied to h_0 = 0 leaves cb; fold in each step's own map
    return a * cb[:length] + u


def linear_recurrence(a: np.ndarray, u: np.ndarray, method: str = "parallel") -> np.ndarray:
    """All states of ``h_t = a_t * h_{t-1} + u_t`` (``h_0 = 0``) along axis 0."""
    a = np.broadcast_to(a, u.shape)
    if len(u) == 0:
        return np.empty_like(u)
    if method == "sequential":
        return _recurrence_sequential(a, u)
    if method == "parallel":
        return _recurrence_blelloch(a, u)
    raise DomainError(f"unknown scan method {method!r}")


# -- selective scans -----------------------------------------------------------------

def selective_coefficients(x: np.ndarray, params: SsmParams, proj: SelectiveProjections):
    """Per-step ``(A_bar, B_bar, C)`` of shapes ``(L, D, S)``, ``(L, D, S)``, ``(L, S)``."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or len(x) < 1:
        raise DomainError("x must be an (L, D) array with L >= 1")
    B = x @ proj.W_B
    C = x @ proj.W_C
    delta = softplus(x @ proj.W_delta + proj.b_delta)
    a_bar, b_bar = discretize(params.A[None], B[:, None, :], delta)
    return a_bar, b_bar, C


def _selective(x, params, proj, method):
    a_bar, b_bar, C = selective_coefficients(x, params, proj)
    h = linear_recurrence(a_bar, b_bar * np.asarray(x, dtype=float)[:, :, None], method)
    y = np.einsum("lds,ls->ld", h, C)
    _check_finite(y)
    return y


def scan_sequential(x: np.ndarray, params: SsmParams, proj: SelectiveProjections) -> np.ndarray:
    """Step-by-step selective scan; the reference every other form is checked against."""
    a_bar, b_bar, C = selective_coefficients(x, params, proj)
    x = np.asarray(x, dtype=float)
    h = np.zeros_like(a_bar[0])
    y = np.empty_like(x)
    for t in range(len(x)):
        h = a_bar[t] * h + b_bar[t] * x[t][:, None]
        y[t] = h @ C[t]
    _check_finite(y)
    return y


def scan_parallel(x: np.ndarray, params: SsmParams, proj: SelectiveProjections) -> np.ndarray:
    """Selective scan evaluated with the associative prefix scan."""
    return _selective(x, params, proj, "parallel")


def lti_scan(x: np.ndarray, a_bar, b_bar, c, method: str = "sequential") -> np.ndarray:
    """Time-invariant recurrence with frozen scalar (or per-state) coefficients.

    ``x`` is ``(L,)`` or ``(L, 1)``; ``a_bar``, ``b_bar``, ``c`` are scalars or
    ``(S,)`` vectors.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    a_bar, b_bar, c = (np.atleast_1d(np.asarray(v, dtype=float)) for v in (a_bar, b_bar, c))
    u = x[:, None] * b_bar[None, :]
    h = linear_recurrence(np.broadcast_to(a_bar, u.shape), u, method)
    return h @ c


def lti_kernel(a_bar, b_bar, c, k: int) -> np.ndarray:
    """``(C B_bar, C A_bar B_bar, ..., C A_bar^(k-1) B_bar)``."""
    a_bar, b_bar, c = (np.atleast_1d(np.asarray(v, dtype=float)) for v in (a_bar, b_bar, c))
    powers = a_bar[None, :] ** np.arange(k)[:, None]
    return powers @ (c * b_bar)


def scan_kernel(x: np.ndarray, a_bar, b_bar, c, k: int) -> np.ndarray:
    """Time-invariant scan as a causal convolution with a ``k``-tap kernel."""
    x = np.asarray(x, dtype=float)
    flat = x.reshape(-1)
    if k > len(flat):
        raise DomainError(f"kernel length {k} exceeds sequence length {len(flat)}")
    if k < 1:
        raise DomainError("kernel length must be >= 1")
    kern = lti_kernel(a_bar, b_bar, c, k)
    y = np.convolve(flat, kern)[: len(flat)]
    return y.reshape(x.shape)


def bidirectional(x: np.ndarray, params: SsmParams, proj: SelectiveProjections,
                  scan: Optional[Callable] = None) -> np.ndarray:
    """Mean of the forward scan and the re-reversed scan of the reversed input.

    Both directions use the same ``params`` and ``proj``.
    """
    scan = scan or scan_parallel
    x = np.asarray(x, dtype=float)
    return 0.5 * (scan(x, params, proj) + scan(x[::-1], params, proj)[::-1])


# -- differentiable mixer ----------------------------------------------------------------

def selective_scan(x: Tensor, A_log: Tensor, W_B: Tensor, W_C: Tensor, W_delta: Tensor,
                   b_delta: Tensor, method: str = "parallel") -> Tensor:
    """Differentiable selective scan with ``A = -exp(A_log)``."""
    B = ad.matmul(x, W_B)                                          # (L, S)
    C = ad.matmul(x, W_C)                                          # (L, S)
    delta = ad.softplus(ad.add(ad.matmul(x, W_delta), b_delta))    # (L, D)
    A = ad.neg(ad.exp(A_log))                                      # (D, S)
    length, d_inner = x.shape
    d_state = A.shape[1]
    delta3 = ad.reshape(delta, (length, d_inner, 1))
    z = ad.mul(delta3, A)                                          # (L, D, S)
    a_bar = ad.exp(z)
    phi = ad.mul(delta3, ad.exprel(z))                             # (exp(z)-1)/A
    bx = ad.mul(ad.reshape(B, (length, 1, d_state)), ad.reshape(x, (length, d_inner, 1)))
    h = ad.affine_scan(a_bar, ad.mul(phi, bx), method=method)
    y = ad.mul(h, ad.reshape(C, (length, 1, d_state)))
    return ad.tsum(y, axis=2)


class MambaMixer(Module):
    """Gated Mamba mixer with a bidirectional, parameter-shared selective scan.

    ``direction`` is ``"bi"`` (default) or ``"uni"`` (forward only).
    """

    def __init__(self, d_model: int, rng: np.random.Generator, d_state: int = 8,
                 expand: int = 2, conv_width: int = 4, direction: str = "bi",
                 scan_method: str = "sequential"):
        if direction not in ("bi", "uni"):
            raise DomainError(f"direction must be 'bi' or 'uni', got {direction!r}")
        d_inner = expand * d_model
        self.d_model, self.d_inner, self.d_state = d_model, d_inner, d_state
        self.direction = direction
        self.scan_method = scan_method
        proj = SelectiveProjections.random(d_inner, d_state, rng)
        self.in_proj = parameter(rng.normal(0, 1 / np.sqrt(d_model), (d_model, 2 * d_inner)))
        self.in_bias = parameter(np.zeros(2 * d_inner))
        self.conv_weight = parameter(rng.normal(0, 1 / np.sqrt(conv_width), (conv_width, d_inner)))
        self.conv_bias = parameter(np.zeros(d_inner))
        self.W_B = parameter(proj.W_B)
        self.W_C = parameter(proj.W_C)
        self.W_delta = parameter(proj.W_delta)
        self.b_delta = parameter(proj.b_delta)
        self.A_log = parameter(np.log(-SsmParams.default(d_inner, d_state).A))
        self.out_proj = parameter(rng.normal(0, 1 / np.sqrt(d_inner), (d_inner, d_model)))
        self.out_bias = parameter(np.zeros(d_model))

    def ssm_params(self) -> tuple[SsmParams, SelectiveProjections]:
        """Current scan parameters as plain arrays (for the numpy reference forms)."""
        return (SsmParams(-np.exp(self.A_log.data)),
                SelectiveProjections(self.W_B.data, self.W_C.data, self.W_delta.data,
                                     self.b_delta.data))

    def _one_direction(self, u: Tensor) -> Tensor:
        u = ad.silu(ad.causal_conv1d(u, self.conv_weight, self.conv_bias))
        return selective_scan(u, self.A_log, self.W_B, self.W_C, self.W_delta, self.b_delta,
                              method=self.scan_method)

    def scan(self, u: Tensor) -> Tensor:
        """Conv + selective scan over the inner channels, in the configured direction(s)."""
        forward = self._one_direction(u)
        if self.direction == "uni":
            return forward
        backward = ad.flip(self._one_direction(ad.flip(u, 0)), 0)
        return ad.mul(ad.add(forward, backward), 0.5)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.d_model:
            raise DomainError(f"mixer expects (L, {self.d_model}) input, got {x.shape}")
        xz = ad.linear(x, self.in_proj, self.in_bias)
        u = ad.getitem(xz, (slice(None), slice(0, self.d_inner)))
        gate = ad.getitem(xz, (slice(None), slice(self.d_inner, None)))
        y = ad.mul(self.scan(u), ad.silu(gate))
        return ad.linear(y, self.out_proj, self.out_bias)
