"""Latent-to-spatial mapping: one saliency value per token (the max over its
embedding), painted over that token's patch block in input space."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numcore import Tensor
from .volume3d import PatchGeometry, unpatchify


@dataclass(frozen=True)
class SaliencyVolume:
    values: np.ndarray  # [N, 1, l*p, h*p, w*p]
    geometry: PatchGeometry
    vmin: float
    vmax: float


def latent_to_spatial(Z, p: int, geom: PatchGeometry | None = None) -> SaliencyVolume:
    """Map latent tokens ``Z[N, T, E]`` to a block-constant saliency volume.

    Without ``geom`` the grid is taken as a cube of side ``round(T ** (1/3))``.
    A token count that does not fill the grid raises ``AssertionError``.
    """
    Z = Z.data if isinstance(Z, Tensor) else np.asarray(Z, dtype=np.float64)
    if Z.ndim != 3:
        raise ValueError(f"expected Z[N, T, E], got shape {Z.shape}")
    N, T, _ = Z.shape
    if geom is None:
        side = int(round(T ** (1.0 / 3.0)))
        grid = (side, side, side)
    else:
        grid = geom.grid
    if grid[0] * grid[1] * grid[2] != T:
        raise AssertionError(f"token count {T} != l*h*w = {grid[0] * grid[1] * grid[2]} for grid {grid}")
    g = PatchGeometry(grid, p, 1)
    s = Z.max(axis=-1)
    blocks = np.repeat(s[:, :, None], p ** 3, axis=2)
    values = unpatchify(blocks, g)
    return SaliencyVolume(values, g, float(values.min()), float(values.max()))


def normalize_for_display(vol) -> np.ndarray:
    """Min-max scale to ``[0, 1]`` over the whole volume; constant maps to 0."""
    v = vol.values if isinstance(vol, SaliencyVolume) else np.asarray(vol, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros_like(v, dtype=np.float64)
    return (v - lo) / (hi - lo)


def _slice(v: np.ndarray, axis: int, index: int) -> np.ndarray:
    if not 0 <= axis < 3:
        raise ValueError(f"axis must be 0, 1 or 2, got {axis}")
    if not 0 <= index < v.shape[axis]:
        raise IndexError(f"slice {index} out of range for axis {axis} of length {v.shape[axis]}")
    return np.take(v, index, axis=axis)


def export_slices(vol, axis: int, indices, anatomy=None, alpha: float = 0.5,
                  out_dir=None, stem: str = "slice") -> list[np.ndarray]:
    """8-bit grayscale slices of a 3D volume (or the first map of a
    :class:`SaliencyVolume`), optionally blended over an anatomy volume.

    Both volumes are min-max scaled as a whole before slicing; the overlay is
    ``(1 - alpha) * anatomy + alpha * saliency``.  With ``out_dir`` each slice
    is also written as a binary PGM.
    """
    v = vol.values[0, 0] if isinstance(vol, SaliencyVolume) else np.asarray(vol, dtype=np.float64)
    if v.ndim != 3:
        raise ValueError(f"expected a 3D volume, got shape {v.shape}")
    indices = [indices] if np.isscalar(indices) else list(indices)
    sal = normalize_for_display(v)
    anat = None
    if anatomy is not None:
        anatomy = np.asarray(anatomy, dtype=np.float64)
        if anatomy.shape != v.shape:
            raise ValueError(f"anatomy shape {anatomy.shape} != saliency shape {v.shape}")
        anat = normalize_for_display(anatomy)
    images = []
    for idx in indices:
        img = _slice(sal, axis, idx)
        if anat is not None:
            img = (1.0 - alpha) * _slice(anat, axis, idx) + alpha * img
        img8 = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
        images.append(img8)
        if out_dir is not None:
            write_pgm(Path(out_dir) / f"{stem}_ax{axis}_{idx:03d}.pgm", img8)
    return images


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim != 2:
        raise ValueError("PGM images are 2D")
    h, w = image.shape
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + image.tobytes())


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    parts = buf.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    # payload bytes may themselves be whitespace, so index from the end
    return np.frombuffer(buf[len(buf) - w * h:], np.uint8).reshape(h, w)
