"""Volume <-> token-sequence conversion, 3D positional embeddings, random masking.

Token layout: tokens run over the patch grid in ``(l, h, w)`` raster order and
each token holds its patch voxels channel-major, then ``z, y, x``::

    element = c * p**3 + (z * p + y) * p + x
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import Tensor


class GeometryError(ValueError):
    """Volume, patch size and token counts do not describe the same grid."""


@dataclass(frozen=True)
class PatchGeometry:
    grid: tuple[int, int, int]
    patch: int
    channels: int

    @property
    def tokens(self) -> int:
        l, h, w = self.grid
        return l * h * w

    @property
    def token_dim(self) -> int:
        return self.channels * self.patch ** 3

    @property
    def volume_shape(self) -> tuple[int, int, int]:
        return tuple(g * self.patch for g in self.grid)

    @classmethod
    def for_volume(cls, dims, patch: int, channels: int) -> "PatchGeometry":
        dims = tuple(int(d) for d in dims)
        if patch < 1 or any(d % patch for d in dims):
            raise GeometryError(f"volume dims {dims} are not multiples of patch size {patch}")
        return cls(tuple(d // patch for d in dims), patch, channels)


def patchify(volume: np.ndarray, p: int) -> tuple[np.ndarray, PatchGeometry]:
    """``volume[N, C, H, W, L] -> tokens[N, T, C * p**3]``."""
    volume = np.asarray(volume)
    if volume.ndim != 5:
        raise GeometryError(f"expected volume[N, C, H, W, L], got shape {volume.shape}")
    N, C = volume.shape[:2]
    geom = PatchGeometry.for_volume(volume.shape[2:], p, C)
    l, h, w = geom.grid
    x = volume.reshape(N, C, l, p, h, p, w, p).transpose(0, 2, 4, 6, 1, 3, 5, 7)
    return x.reshape(N, geom.tokens, geom.token_dim), geom


def unpatchify(tokens: np.ndarray, geom: PatchGeometry) -> np.ndarray:
    """Exact inverse of :func:`patchify`."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 3 or tokens.shape[1] != geom.tokens or tokens.shape[2] != geom.token_dim:
        raise GeometryError(
            f"tokens {tokens.shape} inconsistent with grid {geom.grid}, "
            f"patch {geom.patch}, channels {geom.channels}")
    N = tokens.shape[0]
    l, h, w = geom.grid
    p, C = geom.patch, geom.channels
    x = tokens.reshape(N, l, h, w, C, p, p, p).transpose(0, 4, 1, 5, 2, 6, 3, 7)
    return x.reshape(N, C, l * p, h * p, w * p)


def positional_embedding_3d(geom: PatchGeometry, dim: int, base: float = 10000.0) -> np.ndarray:
    """Fixed sin/cos embedding of the ``(l, h, w)`` grid position, ``[T, dim]``.

    Each axis gets ``dim // 6`` frequencies laid out as ``[sin..., cos...]``;
    axes are concatenated in ``l, h, w`` order and any remainder columns are
    zero.
    """
    f = dim // 6
    l, h, w = geom.grid
    pos = np.stack(np.meshgrid(np.arange(l), np.arange(h), np.arange(w), indexing="ij"), -1)
    pos = pos.reshape(-1, 3).astype(np.float64)
    out = np.zeros((geom.tokens, dim))
    if f == 0:
        return out
    omega = 1.0 / base ** (np.arange(f) / f)
    parts = []
    for axis in range(3):
        ang = pos[:, axis:axis + 1] * omega
        parts += [np.sin(ang), np.cos(ang)]
    out[:, :6 * f] = np.concatenate(parts, axis=1)
    return out


@dataclass(frozen=True)
class MaskPlan:
    ratio: float
    masked_idx: np.ndarray
    visible_idx: np.ndarray
    seed: int | None

    @property
    def tokens(self) -> int:
        return self.masked_idx.size + self.visible_idx.size

    @property
    def restore_idx(self) -> np.ndarray:
        """Position of each original token in ``concat(visible, masked)``."""
        order = np.concatenate([self.visible_idx, self.masked_idx])
        inv = np.empty_like(order)
        inv[order] = np.arange(order.size)
        return inv

    def mask(self) -> np.ndarray:
        m = np.zeros(self.tokens, dtype=bool)
        m[self.masked_idx] = True
        return m


def mask_count(T: int, ratio: float) -> int:
    # round half up
    return int(np.floor(ratio * T + 0.5))


def sample_mask(T: int, ratio: float = 0.75, seed=None) -> MaskPlan:
    """Mask ``round(ratio * T)`` tokens drawn uniformly without replacement.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"mask ratio must lie in (0, 1), got {ratio}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    M = mask_count(T, ratio)
    perm = rng.permutation(T)
    return MaskPlan(ratio, np.sort(perm[:M]), np.sort(perm[M:]),
                    seed if isinstance(seed, (int, np.integer)) else None)


def gather_visible(tokens, plan: MaskPlan) -> Tensor:
    """Visible tokens ``[N, V, dim]`` in their original relative order."""
    t = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
    if t.ndim != 3 or t.shape[1] != plan.tokens:
        raise GeometryError(f"plan covers {plan.tokens} tokens, input has shape {t.shape}")
    return nc.take(t, plan.visible_idx, axis=1)


def scatter_with_mask_tokens(encoded, plan: MaskPlan, mask_token) -> Tensor:
    """Return ``[N, T, dim]`` with ``encoded`` at visible slots and the shared
    ``mask_token`` at every masked slot."""
    enc = encoded if isinstance(encoded, Tensor) else Tensor(encoded)
    mt = mask_token if isinstance(mask_token, Tensor) else Tensor(mask_token)
    if enc.ndim != 3 or enc.shape[1] != plan.visible_idx.size:
        raise GeometryError(f"plan has {plan.visible_idx.size} visible tokens, got {enc.shape}")
    N, _, dim = enc.shape
    fill = nc.reshape(mt, (1, 1, dim)) + np.zeros((N, plan.masked_idx.size, dim))
    full = nc.concat([enc, fill], axis=1)
    return nc.take(full, plan.restore_idx, axis=1)
