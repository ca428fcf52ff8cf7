"""Volume files, preprocessing, augmentation, test-time perturbations and a
seeded synthetic lesion dataset.

Volumes are ``[C, Z, Y, X]`` arrays.  On disk (``.mv3d``), little-endian::

    offset  size  field
    0       4     magic b"MV3D"
    4       2     version (u16, = 1)
    6       2     dtype code (u16, 1 = float32)
    8       16    C, Z, Y, X (u32 each)
    24      4*n   payload, float32, C-major then z, y, x
    24+4n   ...   optional footer: b"LBLS", count (u32), then per entry
                  name_len (u16), UTF-8 name, label (i32)
"""

from __future__ import annotations

import itertools
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

MAGIC = b"MV3D"
VERSION = 1
DTYPE_F32 = 1
HEADER = struct.Struct("<4sHH4I")
FOOTER_MAGIC = b"LBLS"


class VolumeFormatError(ValueError):
    pass


@dataclass
class VolumeFile:
    data: np.ndarray  # float32 [C, Z, Y, X]
    labels: dict[str, int] = field(default_factory=dict)

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return tuple(int(d) for d in self.data.shape)


def write_volume(path, vol) -> None:
    if not isinstance(vol, VolumeFile):
        vol = VolumeFile(np.asarray(vol))
    data = np.ascontiguousarray(vol.data, dtype="<f4")
    if data.ndim != 4:
        raise VolumeFormatError(f"volume must be [C, Z, Y, X], got shape {data.shape}")
    parts = [HEADER.pack(MAGIC, VERSION, DTYPE_F32, *data.shape), data.tobytes()]
    if vol.labels:
        parts.append(FOOTER_MAGIC + struct.pack("<I", len(vol.labels)))
        for name, label in sorted(vol.labels.items()):
            nb = name.encode()
            parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<i", int(label)))
    Path(path).write_bytes(b"".join(parts))


def _parse_header(buf: bytes, path) -> tuple[int, int, int, int]:
    if len(buf) < HEADER.size:
        raise VolumeFormatError(f"{path}: header truncated ({len(buf)} of {HEADER.size} bytes)")
    magic, version, dtype, *dims = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {magic!r} at byte offset 0")
    if version != VERSION:
        raise VolumeFormatError(f"{path}: unsupported version {version} at byte offset 4")
    if dtype != DTYPE_F32:
        raise VolumeFormatError(f"{path}: unsupported dtype code {dtype} at byte offset 6")
    if any(d == 0 for d in dims):
        raise VolumeFormatError(f"{path}: zero dimension in {tuple(dims)} at byte offset 8")
    return tuple(dims)


def read_header(path) -> tuple[int, int, int, int]:
    """``(C, Z, Y, X)`` from the first 24 bytes, without touching the payload."""
    with open(path, "rb") as fh:
        return _parse_header(fh.read(HEADER.size), path)


def read_volume(path) -> VolumeFile:
    buf = Path(path).read_bytes()
    dims = _parse_header(buf, path)
    n = int(np.prod(dims)) * 4
    have = len(buf) - HEADER.size
    if have < n:
        raise VolumeFormatError(
            f"{path}: payload truncated, expected {n} bytes, found {have} (from byte offset {HEADER.size})")
    data = np.frombuffer(buf, "<f4", n // 4, HEADER.size).reshape(dims).astype(np.float32)
    labels = {}
    off = HEADER.size + n
    if off < len(buf):
        if buf[off:off + 4] != FOOTER_MAGIC:
            raise VolumeFormatError(f"{path}: unexpected bytes at offset {off}")
        (count,) = struct.unpack_from("<I", buf, off + 4)
        off += 8
        try:
            for _ in range(count):
                (ln,) = struct.unpack_from("<H", buf, off)
                name = buf[off + 2:off + 2 + ln].decode()
                (label,) = struct.unpack_from("<i", buf, off + 2 + ln)
                labels[name] = label
                off += 6 + ln
        except struct.error as exc:
            raise VolumeFormatError(f"{path}: label footer truncated at offset {off}") from exc
    return VolumeFile(data, labels)


def write_manifest(path, rows) -> None:
    """Rows of ``(path, task, label)`` as tab-separated lines."""
    Path(path).write_text("".join(f"{p}\t{t}\t{int(y)}\n" for p, t, y in rows))


def read_manifest(path, task: str | None = None) -> list[tuple[str, str, int]]:
    rows = []
    base = Path(path).parent
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise VolumeFormatError(f"{path}:{lineno}: expected path<TAB>task<TAB>label")
        p, t, y = parts
        if task is None or t == task:
            rows.append((str(base / p), t, int(y)))
    return rows


# --------------------------------------------------------------------------
# preprocessing
# --------------------------------------------------------------------------


def center_of_mass(volume: np.ndarray) -> np.ndarray:
    """Intensity-weighted centre over all channels; geometric centre if empty."""
    w = np.asarray(volume, dtype=np.float64).sum(axis=0)
    total = w.sum()
    if total == 0:
        return (np.array(w.shape) - 1) / 2.0
    return np.array(ndimage.center_of_mass(w))


def crop_box(com, shape, target) -> list[tuple[int, int, int, int]]:
    """Per axis ``(src_start, src_stop, dst_start, dst_stop)``."""
    boxes = []
    for c, n, t in zip(com, shape, target):
        if n >= t:
            s = int(np.clip(int(np.floor(c + 0.5)) - t // 2, 0, n - t))
            boxes.append((s, s + t, 0, t))
        else:
            d = (t - n) // 2
            boxes.append((0, n, d, d + n))
    return boxes


def normalize_intensity(volume: np.ndarray, hi: float = 255.0) -> np.ndarray:
    v = np.asarray(volume, dtype=np.float64)
    lo_v, hi_v = v.min(), v.max()
    if hi_v == lo_v:
        return np.zeros_like(v)
    # clip guards the one-ulp overshoot of the scaled maximum
    return np.clip((v - lo_v) / (hi_v - lo_v) * hi, 0.0, hi)


def preprocess(volume: np.ndarray, target=(160, 160, 160)) -> np.ndarray:
    """Crop a target-sized box around the centre of mass (zero padding where
    the volume is smaller), then min-max scale all channels jointly to
    ``[0, 255]``."""
    v = np.asarray(volume, dtype=np.float64)
    if v.ndim != 4:
        raise ValueError(f"expected [C, Z, Y, X], got shape {v.shape}")
    boxes = crop_box(center_of_mass(v), v.shape[1:], target)
    out = np.zeros((v.shape[0],) + tuple(target))
    src = tuple(slice(a, b) for a, b, _, _ in boxes)
    dst = tuple(slice(c, d) for _, _, c, d in boxes)
    out[(slice(None),) + dst] = v[(slice(None),) + src]
    return normalize_intensity(out)


# --------------------------------------------------------------------------
# augmentation and perturbation
# --------------------------------------------------------------------------


def rotation_matrix(angles_deg) -> np.ndarray:
    """Rotation composed about axes 0, 1, 2 (in that order) of a ``[Z, Y, X]`` grid."""
    R = np.eye(3)
    for axis, deg in enumerate(angles_deg):
        a = math.radians(deg)
        c, s = math.cos(a), math.sin(a)
        i, j = [k for k in range(3) if k != axis]
        G = np.eye(3)
        G[i, i], G[i, j], G[j, i], G[j, j] = c, -s, s, c
        R = G @ R
    # exact quarter turns keep the grid aligned
    snapped = np.round(R)
    return np.where(np.abs(R - snapped) < 1e-12, snapped, R)


def _resample(volume: np.ndarray, forward: np.ndarray) -> np.ndarray:
    """Apply the linear map ``forward`` about the grid centre, trilinear, zero fill."""
    if np.array_equal(forward, np.eye(3)):
        return volume.copy()
    inv = np.linalg.inv(forward)
    centre = (np.array(volume.shape[1:]) - 1) / 2.0
    offset = centre - inv @ centre
    return np.stack([ndimage.affine_transform(ch, inv, offset=offset, order=1,
                                              mode="constant", cval=0.0) for ch in volume])


@dataclass(frozen=True)
class AugmentConfig:
    p_affine: float = 0.5
    max_deg: float = 10.0
    scale: float = 0.1
    p_noise: float = 0.5
    noise_std: float = 5.0
    p_gamma: float = 0.5
    gamma_range: tuple[float, float] = (0.7, 1.5)


def gamma_transform(volume: np.ndarray, gamma: float) -> np.ndarray:
    v = np.clip(np.asarray(volume, dtype=np.float64), 0.0, 255.0)
    return 255.0 * (v / 255.0) ** gamma


def augment(volume: np.ndarray, cfg: AugmentConfig, seed) -> np.ndarray:
    """Random affine, additive Gaussian noise, then gamma, each applied with
    its configured probability.  A pure function of ``(volume, cfg, seed)``."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    v = np.asarray(volume, dtype=np.float64)
    # draw every random quantity up front so the stream does not depend on branches
    do_aff, do_noise, do_gamma = rng.random(3)
    angles = rng.uniform(-cfg.max_deg, cfg.max_deg, 3)
    zoom = rng.uniform(1.0 - cfg.scale, 1.0 + cfg.scale)
    gamma = rng.uniform(*cfg.gamma_range)
    noise_seed = int(rng.integers(2 ** 63))
    if do_aff < cfg.p_affine:
        v = _resample(v, rotation_matrix(angles) * zoom)
    if do_noise < cfg.p_noise and cfg.noise_std > 0:
        v = v + np.random.default_rng(noise_seed).normal(0.0, cfg.noise_std, v.shape)
    if do_gamma < cfg.p_gamma and gamma != 1.0:
        v = gamma_transform(v, gamma)
    return v


def rotate(volume: np.ndarray, deg: float, axis: int = 0) -> np.ndarray:
    """Rotate every channel by ``deg`` about spatial ``axis`` (trilinear)."""
    angles = [0.0, 0.0, 0.0]
    angles[axis] = deg
    return _resample(np.asarray(volume, dtype=np.float64), rotation_matrix(angles))


def bias_field(shape, coef: float, order: int = 3, seed=0) -> np.ndarray:
    """``exp(P(z, y, x))`` with ``P`` a polynomial of total degree ``order``
    over coordinates in ``[-1, 1]`` and coefficients uniform in ``[-coef, coef]``."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    axes = [np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1) for n in shape]
    z, y, x = np.meshgrid(*axes, indexing="ij")
    P = np.zeros(tuple(shape))
    for i, j, k in itertools.product(range(order + 1), repeat=3):
        if i + j + k <= order:
            P += rng.uniform(-coef, coef) * z ** i * y ** j * x ** k
    return np.exp(P)


def perturb(volume: np.ndarray, kind: str, amount: float, seed=0, axis: int = 0) -> np.ndarray:
    """Test-time perturbation: ``rotation`` by ``amount`` degrees about ``axis``
    or a multiplicative ``bias_field`` with coefficient bound ``amount``."""
    v = np.asarray(volume, dtype=np.float64)
    if kind == "rotation":
        return rotate(v, amount, axis)
    if kind == "bias_field":
        if amount == 0:
            return v.copy()
        return v * bias_field(v.shape[1:], amount, seed=seed)
    raise ValueError(f"unknown perturbation {kind!r}")


# --------------------------------------------------------------------------
# synthetic data
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Ellipsoidal 'brain' with a spherical lesion whose per-channel intensity
    offsets depend on the class label.

    ``shared_texture`` gives every channel the same tissue texture, as
    co-registered modalities of one anatomy would have.
    """

    n: int = 400
    dims: tuple[int, int, int] = (32, 32, 32)
    channels: int = 2
    proportions: tuple[float, ...] = (0.5, 0.5)
    tissue: tuple[float, ...] = (100.0, 100.0)
    texture: float = 10.0
    shared_texture: bool = True
    brain_jitter: float = 0.1
    radius: tuple[float, float] = (5.0, 8.0)
    offsets: tuple[tuple[float, ...], ...] = ((80.0, 0.0), (0.0, 80.0))
    lesion_texture: tuple[float, ...] = (0.0, 0.0)
    class_tissue: tuple[tuple[float, ...], ...] | None = None
    gain_jitter: float = 0.0
    noise: float = 5.0
    task: str = "lesion"
    seed: int = 0

    @classmethod
    def harder(cls, **overrides) -> "SyntheticSpec":
        """Low-separability task: near-identical lesions; the label mostly
        rides on a small inter-channel tissue contrast blurred by per-volume
        channel gains."""
        base = dict(offsets=((55.0, 45.0), (45.0, 55.0)), class_tissue=((100.0, 104.0), (104.0, 100.0)),
                    gain_jitter=0.03)
        base.update(overrides)
        return cls(**base)

    def __post_init__(self):
        if len(self.offsets) != len(self.proportions):
            raise ValueError("one offset vector per class is required")
        if any(len(o) != self.channels for o in self.offsets) or len(self.tissue) != self.channels:
            raise ValueError("offsets and tissue need one entry per channel")
        if self.class_tissue is not None and (len(self.class_tissue) != len(self.proportions)
                                              or any(len(t) != self.channels for t in self.class_tissue)):
            raise ValueError("class_tissue needs one per-channel vector per class")


def class_counts(n: int, proportions) -> list[int]:
    """Largest-remainder split of ``n`` into the requested proportions."""
    p = np.asarray(proportions, dtype=np.float64)
    p = p / p.sum()
    raw = n * p
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def _smooth_texture(rng, shape, amplitude, n_waves: int = 4) -> np.ndarray:
    grids = np.meshgrid(*[np.arange(s) / s for s in shape], indexing="ij")
    out = np.zeros(shape)
    for _ in range(n_waves):
        k = rng.uniform(0.5, 2.5, 3)
        phase = rng.uniform(0, 2 * np.pi)
        out += np.cos(2 * np.pi * sum(ki * g for ki, g in zip(k, grids)) + phase)
    return amplitude * out / math.sqrt(n_waves)


def synth_volume(spec: SyntheticSpec, label: int, rng: np.random.Generator) -> np.ndarray:
    dims = np.array(spec.dims)
    grids = np.meshgrid(*[np.arange(s, dtype=np.float64) for s in spec.dims], indexing="ij")
    centre = (dims - 1) / 2.0 + rng.uniform(-1.0, 1.0, 3)
    radii = 0.4 * dims * (1.0 + rng.uniform(-spec.brain_jitter, spec.brain_jitter, 3))
    rho = np.sqrt(sum(((g - c) / r) ** 2 for g, c, r in zip(grids, centre, radii)))
    brain = np.clip((1.0 - rho) * 4.0, 0.0, 1.0)  # soft-edged mask

    rad = rng.uniform(*spec.radius)
    # lesion centre well inside the brain
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    reach = rng.uniform(0.0, 0.5) * (radii.min() - rad)
    lc = centre + direction * max(reach, 0.0)
    dist = np.sqrt(sum((g - c) ** 2 for g, c in zip(grids, lc)))
    lesion = np.clip(rad + 0.5 - dist, 0.0, 1.0)

    vol = np.empty((spec.channels,) + tuple(spec.dims))
    checker = ((np.floor(grids[0]) + np.floor(grids[1]) + np.floor(grids[2])) % 2) * 2 - 1
    shared = _smooth_texture(rng, spec.dims, spec.texture) if spec.shared_texture else None
    base = spec.tissue if spec.class_tissue is None else spec.class_tissue[label]
    gain = 1.0 + rng.normal(0.0, spec.gain_jitter, spec.channels) if spec.gain_jitter else np.ones(spec.channels)
    for c in range(spec.channels):
        tex = shared if shared is not None else _smooth_texture(rng, spec.dims, spec.texture)
        tissue = base[c] + tex
        les = spec.offsets[label][c] + spec.lesion_texture[c] * checker * (label == 1)
        vol[c] = gain[c] * brain * (tissue + lesion * les)
    if spec.noise > 0:
        vol += brain * rng.normal(0.0, spec.noise, vol.shape)
    return np.clip(vol, 0.0, 255.0).astype(np.float32)


def generate_synthetic(spec: SyntheticSpec) -> list[tuple[VolumeFile, int]]:
    """Deterministic labelled dataset with exactly ``class_counts`` per class,
    in a seeded random order."""
    rng = np.random.default_rng(spec.seed)
    labels = np.concatenate([np.full(k, c) for c, k in enumerate(class_counts(spec.n, spec.proportions))])
    labels = rng.permutation(labels)
    seeds = rng.integers(2 ** 63, size=spec.n)
    out = []
    for y, s in zip(labels, seeds):
        v = synth_volume(spec, int(y), np.random.default_rng(int(s)))
        out.append((VolumeFile(v, {spec.task: int(y)}), int(y)))
    return out


def write_dataset(out_dir, items: list[tuple[VolumeFile, int]], task: str = "lesion") -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (vf, y) in enumerate(items):
        name = f"vol_{i:04d}.mv3d"
        write_volume(out_dir / name, vf)
        rows.append((name, task, y))
    manifest = out_dir / "manifest.tsv"
    write_manifest(manifest, rows)
    return manifest


def load_dataset(data_dir, task: str | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Stacked volumes ``[n, C, Z, Y, X]`` (float64) and labels from a manifest."""
    rows = read_manifest(Path(data_dir) / "manifest.tsv", task)
    if not rows:
        raise VolumeFormatError(f"{data_dir}: manifest lists no volumes")
    vols = np.stack([read_volume(p).data for p, _, _ in rows]).astype(np.float64)
    return vols, np.array([y for _, _, y in rows], dtype=np.int64)
