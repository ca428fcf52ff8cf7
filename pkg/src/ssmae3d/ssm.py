"""Diagonal state-space kernels: ZOH discretization, recurrent scan,
convolution-kernel form, and the selective (input-dependent) scan.

Shapes follow ``x[B, L, D]`` for inputs and ``[D, N]`` for a diagonal state
matrix with ``N`` states per channel.  Per-step (selective) parameters carry
the full ``[B, L, D, N]`` extent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import DomainError, Module, Tensor


class ModeError(ValueError):
    """A time-invariant evaluation was requested for time-varying parameters."""


@dataclass
class DiscreteSsm:
    A_bar: Tensor
    B_bar: Tensor

    @property
    def time_varying(self) -> bool:
        return self.A_bar.ndim > 2 or self.B_bar.ndim > 2


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def discretize_zoh(A, B, delta) -> DiscreteSsm:
    """Zero-order hold for a diagonal ``A``.

    ``A_bar = exp(delta * a)`` and ``B_bar = (exp(delta * a) - 1) / a * b``,
    written as ``delta * exprel(delta * a) * b`` so the ``a -> 0`` limit
    ``delta * b`` needs no special case.  All three operands broadcast.
    """
    A, B, delta = _t(A), _t(B), _t(delta)
    if np.any(delta.data <= 0):
        raise DomainError("discretization step must be positive")
    z = delta * A
    return DiscreteSsm(nc.exp(z), delta * nc.exprel(z) * B)


def _state_input(disc: DiscreteSsm, x: Tensor) -> Tensor:
    B, L, D = x.shape
    return disc.B_bar * nc.reshape(x, (B, L, D, 1))


def _readout(h: Tensor, C) -> Tensor:
    return nc.sum(h * C, axis=-1)


def scan_recurrent(disc: DiscreteSsm, C, x, method: str = "sequential") -> Tensor:
    """``h[t] = A_bar h[t-1] + B_bar x[t]``, ``y[t] = C . h[t]`` with ``h[-1] = 0``.

    ``disc`` may be time-invariant (``[D, N]``) or per-step
    (``[B, L, D, N]``); ``C`` broadcasts against the state.
    """
    x = _t(x)
    h = nc.linear_scan(disc.A_bar, _state_input(disc, x), method=method)
    return _readout(h, C)


def parallel_prefix_scan(disc: DiscreteSsm, C, x) -> Tensor:
    """Same recurrence as :func:`scan_recurrent`, evaluated with a work-efficient
    up-sweep/down-sweep over associative pairs."""
    return scan_recurrent(disc, C, x, method="blelloch")


def conv_kernel(disc: DiscreteSsm, C, L: int) -> Tensor:
    """``K[j, d] = sum_n C[n] * A_bar[d, n]**j * B_bar[d, n]`` for ``j < L``."""
    if disc.time_varying:
        raise ModeError("convolution kernel needs time-invariant parameters")
    powers = nc.power(nc.reshape(disc.A_bar, (1,) + disc.A_bar.shape),
                      np.arange(L, dtype=np.float64)[:, None, None])
    return nc.sum(powers * (disc.B_bar * C), axis=-1)


def kernel_convolution(disc: DiscreteSsm, C, x) -> Tensor:
    """Causal convolution of ``x`` with the unrolled kernel.

    Direct O(L^2) accumulation through a lower-triangular Toeplitz matrix
    per channel; agrees with :func:`scan_recurrent` for LTI parameters.
    """
    x = _t(x)
    B, L, D = x.shape
    K = conv_kernel(disc, C, L)  # [L, D]
    t = np.arange(L)
    lag = t[:, None] - t[None, :]
    toeplitz = nc.take(K, np.where(lag >= 0, lag, 0), axis=0) * (lag >= 0)[:, :, None]
    mats = nc.transpose(toeplitz, (2, 0, 1))  # [D, L, L]
    cols = nc.reshape(nc.transpose(x, (0, 2, 1)), (B, D, L, 1))
    y = nc.reshape(nc.matmul(mats, cols), (B, D, L))
    return nc.transpose(y, (0, 2, 1))


class SsmParams(Module):
    """Selective SSM weights for ``d_inner`` channels and ``d_state`` states.

    ``A = -exp(A_log)`` keeps every diagonal entry negative.  ``x_proj`` maps
    each step to ``[dt_low | B | C]``; ``dt = softplus(dt_low @ dt_w + dt_b)``.
    """

    def __init__(self, d_inner: int, d_state: int = 16, dt_rank: int | None = None,
                 rng: np.random.Generator | None = None,
                 dt_min: float = 1e-3, dt_max: float = 1e-1):
        rng = np.random.default_rng(0) if rng is None else rng
        self.d_inner = d_inner
        self.d_state = d_state
        self.dt_rank = dt_rank or math.ceil(d_inner / 16)
        r, N, D = self.dt_rank, d_state, d_inner
        self.A_log = nc.parameter(np.tile(np.log(np.arange(1, N + 1, dtype=np.float64)), (D, 1)))
        bound = 1.0 / math.sqrt(D)
        self.x_proj = nc.parameter(rng.uniform(-bound, bound, (D, r + 2 * N)))
        self.dt_w = nc.parameter(rng.uniform(-r ** -0.5, r ** -0.5, (r, D)))
        dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), D))
        self.dt_b = nc.parameter(dt + np.log(-np.expm1(-dt)))  # softplus^-1(dt)

    @property
    def A(self) -> Tensor:
        return nc.neg(nc.exp(self.A_log))

    def project(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Per-step ``delta[B, L, D]``, ``B[B, L, N]``, ``C[B, L, N]``."""
        r, N = self.dt_rank, self.d_state
        dbc = x @ self.x_proj
        dt_low = dbc[..., :r]
        Bm = dbc[..., r:r + N]
        Cm = dbc[..., r + N:]
        delta = nc.softplus(dt_low @ self.dt_w + self.dt_b)
        return delta, Bm, Cm


def selective_scan(params: SsmParams, x, method: str = "sequential", fused: bool = True) -> Tensor:
    """Discretize with input-dependent ``delta``, ``B``, ``C`` at every step,
    then run the recurrence.

    ``fused=False`` composes the same computation from :func:`discretize_zoh`
    and :func:`scan_recurrent` (slower, used as a cross-check).
    """
    x = _t(x)
    Bsz, L, D = x.shape
    N = params.d_state
    delta, Bm, Cm = params.project(x)
    if fused:
        return nc.selective_scan_fused(x, delta, params.A, Bm, Cm, method=method)
    disc = discretize_zoh(params.A,
                          nc.reshape(Bm, (Bsz, L, 1, N)),
                          nc.reshape(delta, (Bsz, L, D, 1)))
    return scan_recurrent(disc, nc.reshape(Cm, (Bsz, L, 1, N)), x, method=method)
