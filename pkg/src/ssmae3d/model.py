"""Masked autoencoder built from bidirectional scan blocks, plus the
mean-pooled classifier used for fine-tuning and the checkpoint container."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import numcore as nc
from .numcore import Module, Tensor
from .vim import VimConfig, VimStack
from .volume3d import (GeometryError, MaskPlan, PatchGeometry, gather_visible,
                       patchify, positional_embedding_3d, scatter_with_mask_tokens)


@dataclass
class MaeConfig:
    volume: tuple[int, int, int] = (160, 160, 160)
    channels: int = 4
    patch: int = 16
    enc_depth: int = 12
    enc_dim: int = 384
    dec_depth: int = 8
    dec_dim: int = 192
    mask_ratio: float = 0.75
    norm_targets: bool = False
    d_state: int = 16
    expand: int = 2
    d_conv: int = 4
    num_classes: int = 2
    standardize: bool = True
    scan_method: str = "sequential"

    def __post_init__(self):
        self.volume = tuple(int(v) for v in self.volume)
        self.geometry()

    @classmethod
    def full(cls, **overrides) -> "MaeConfig":
        return cls(**overrides)

    @classmethod
    def desk(cls, **overrides) -> "MaeConfig":
        """Laptop-sized preset used by the demos and the acceptance run."""
        base = dict(volume=(32, 32, 32), channels=2, patch=8, enc_depth=2, enc_dim=32,
                    dec_depth=1, dec_dim=32, d_state=8)
        base.update(overrides)
        return cls(**base)

    def geometry(self) -> PatchGeometry:
        return PatchGeometry.for_volume(self.volume, self.patch, self.channels)

    def encoder_vim(self) -> VimConfig:
        return VimConfig(self.enc_dim, self.d_state, self.expand, self.d_conv,
                         scan_method=self.scan_method)

    def decoder_vim(self) -> VimConfig:
        return VimConfig(self.dec_dim, self.d_state, self.expand, self.d_conv,
                         scan_method=self.scan_method)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["volume"] = list(self.volume)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MaeConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def standardize_tokens(tokens: np.ndarray, idx: np.ndarray | None = None) -> np.ndarray:
    """Standardize ``tokens[N, T, td]`` per sample with statistics taken from
    the tokens at ``idx`` only (all tokens when ``None``)."""
    ref = tokens if idx is None else tokens[:, idx]
    mu = ref.mean(axis=(1, 2), keepdims=True)
    sd = ref.std(axis=(1, 2), keepdims=True)
    return (tokens - mu) / np.where(sd > 0, sd, 1.0)


def _uniform(rng, fan_in, shape):
    b = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-b, b, shape)


class MaeEncoder(Module):
    """Linear patch embedding + fixed 3D positions + a block stack.

    Masked tokens are dropped before embedding, so encoder work scales with
    the number of visible tokens.
    """

    def __init__(self, cfg: MaeConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.geom = cfg.geometry()
        td = self.geom.token_dim
        self.patch_w = nc.parameter(_uniform(rng, td, (td, cfg.enc_dim)))
        self.patch_b = nc.parameter(np.zeros(cfg.enc_dim))
        self.pos = positional_embedding_3d(self.geom, cfg.enc_dim)
        self.stack = VimStack(cfg.encoder_vim(), cfg.enc_depth, rng)

    def tokens(self, volume: np.ndarray, visible_idx: np.ndarray | None = None) -> np.ndarray:
        """Patch tokens, standardized from the visible tokens so that masked
        content cannot reach the encoder through the statistics."""
        volume = np.asarray(volume, dtype=np.float64)
        if volume.ndim == 4:
            volume = volume[None]
        if volume.shape[1:] != (self.cfg.channels,) + self.cfg.volume:
            raise GeometryError(
                f"volume shape {volume.shape[1:]} does not match config "
                f"{(self.cfg.channels,) + self.cfg.volume}")
        tok = patchify(volume, self.cfg.patch)[0]
        return standardize_tokens(tok, visible_idx) if self.cfg.standardize else tok

    def encode_tokens(self, tokens: np.ndarray, idx: np.ndarray | None = None) -> Tensor:
        """Run the encoder on ``tokens[N, V, td]`` located at grid indices ``idx``."""
        pos = self.pos if idx is None else self.pos[idx]
        x = Tensor(tokens) @ self.patch_w + self.patch_b + pos
        return self.stack(x)

    def encode_visible(self, volume: np.ndarray, plan: MaskPlan) -> Tensor:
        if plan.tokens != self.geom.tokens:
            raise GeometryError(f"plan covers {plan.tokens} tokens, volume has {self.geom.tokens}")
        tok = self.tokens(volume, plan.visible_idx)
        return self.encode_tokens(tok[:, plan.visible_idx], plan.visible_idx)

    def encode_all(self, volume: np.ndarray) -> Tensor:
        return self.encode_tokens(self.tokens(volume))


class MaeModel(Module):
    def __init__(self, cfg: MaeConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.encoder = MaeEncoder(cfg, rng)
        td = self.encoder.geom.token_dim
        self.enc_to_dec_w = nc.parameter(_uniform(rng, cfg.enc_dim, (cfg.enc_dim, cfg.dec_dim)))
        self.enc_to_dec_b = nc.parameter(np.zeros(cfg.dec_dim))
        self.mask_token = nc.parameter(rng.normal(0.0, 0.02, cfg.dec_dim))
        self.dec_pos = positional_embedding_3d(self.encoder.geom, cfg.dec_dim)
        self.decoder = VimStack(cfg.decoder_vim(), cfg.dec_depth, rng)
        self.head_w = nc.parameter(_uniform(rng, cfg.dec_dim, (cfg.dec_dim, td)))
        self.head_b = nc.parameter(np.zeros(td))


def mae_forward(model: MaeModel, volume: np.ndarray, plan: MaskPlan) -> tuple[Tensor, np.ndarray]:
    """Predicted and target tokens, both ``[N, T, C * p**3]`` in scaled units.

    Only visible patches reach the encoder; the decoder sees the full sequence
    with the shared mask token at masked slots.
    """
    enc = model.encoder
    if plan.tokens != enc.geom.tokens:
        raise GeometryError(f"plan covers {plan.tokens} tokens, volume has {enc.geom.tokens}")
    target = enc.tokens(volume, plan.visible_idx)
    latent = enc.encode_tokens(target[:, plan.visible_idx], plan.visible_idx)
    x = latent @ model.enc_to_dec_w + model.enc_to_dec_b
    x = scatter_with_mask_tokens(x, plan, model.mask_token) + model.dec_pos
    x = model.decoder(x)
    return x @ model.head_w + model.head_b, target


def normalize_tokens(target: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    mu = target.mean(axis=-1, keepdims=True)
    var = target.var(axis=-1, keepdims=True)
    return (target - mu) / np.sqrt(var + eps)


def reconstruction_loss(pred: Tensor, target: np.ndarray, plan: MaskPlan,
                        norm_targets: bool = False) -> Tensor:
    """Mean squared error over the masked tokens only."""
    if plan.masked_idx.size == 0:
        raise ValueError("reconstruction loss needs at least one masked token")
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    if pred.shape != np.shape(target):
        raise nc.ShapeError(f"pred {pred.shape} vs target {np.shape(target)}")
    tgt = np.asarray(target)[:, plan.masked_idx]
    if norm_targets:
        tgt = normalize_tokens(tgt)
    diff = nc.take(pred, plan.masked_idx, axis=1) - tgt
    return nc.mean(diff * diff)


class ClassifierHead(Module):
    def __init__(self, dim: int, num_classes: int = 2, rng: np.random.Generator | None = None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.w = nc.parameter(rng.normal(0.0, 0.02, (dim, num_classes)))
        self.b = nc.parameter(np.zeros(num_classes))

    def __call__(self, features: Tensor) -> Tensor:
        return nc.mean(features, axis=1) @ self.w + self.b


def classify(encoder: MaeEncoder, head: ClassifierHead, volume: np.ndarray) -> Tensor:
    """Logits ``[N, num_classes]`` from the mean of all final encoder tokens."""
    return head(encoder.encode_all(volume))


class Classifier(Module):
    """Encoder plus mean-pool head; the decoder is not part of fine-tuning."""

    def __init__(self, cfg: MaeConfig, seed: int = 0, encoder: MaeEncoder | None = None):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.encoder = encoder if encoder is not None else MaeEncoder(cfg, rng)
        self.head = ClassifierHead(cfg.enc_dim, cfg.num_classes, np.random.default_rng(seed + 1))

    def __call__(self, volume: np.ndarray) -> Tensor:
        return classify(self.encoder, self.head, volume)

    @classmethod
    def from_pretrained(cls, mae: MaeModel, seed: int = 0) -> "Classifier":
        fresh = MaeEncoder(mae.cfg, np.random.default_rng(seed))
        fresh.load_state_dict(mae.encoder.state_dict())
        return cls(mae.cfg, seed, encoder=fresh)


# --------------------------------------------------------------------------
# checkpoint container
# --------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"SSMAECK\x00"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    """Write named float64 tensors and a JSON metadata block.

    Layout, all little-endian::

        magic     8 bytes  b"SSMAECK\\0"
        version   u16
        meta_len  u32, then meta_len bytes of UTF-8 JSON (sorted keys)
        count     u32
        count x { name_len u16, name UTF-8, ndim u8, dims u32 x ndim,
                  payload f64 x prod(dims) }
    """
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(meta_bytes)),
             meta_bytes, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic at offset 0")
    version, meta_len = struct.unpack_from("<HI", buf, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version} at offset 8")
    off = 14
    meta = json.loads(buf[off:off + meta_len].decode())
    off += meta_len
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", buf, off)
        dims = struct.unpack_from(f"<{ndim}I", buf, off + 1)
        off += 1 + 4 * ndim
        n = int(np.prod(dims)) if ndim else 1
        if off + 8 * n > len(buf):
            raise CheckpointError(f"{path}: tensor {name!r} truncated at offset {off}")
        tensors[name] = np.frombuffer(buf, "<f8", n, off).reshape(dims).astype(np.float64)
        off += 8 * n
    return tensors, meta


def save_model(path, model: Module, kind: str, cfg: MaeConfig, **extra) -> None:
    save_checkpoint(path, model.state_dict(), {"kind": kind, "config": cfg.to_dict(), **extra})


def load_model(path) -> tuple[Module, dict]:
    """Rebuild an :class:`MaeModel` or :class:`Classifier` from a checkpoint."""
    tensors, meta = load_checkpoint(path)
    cfg = MaeConfig.from_dict(meta["config"])
    kind = meta.get("kind")
    if kind == "mae":
        model: Module = MaeModel(cfg)
    elif kind == "classifier":
        model = Classifier(cfg)
    else:
        raise CheckpointError(f"{path}: unknown checkpoint kind {kind!r}")
    model.load_state_dict(tensors)
    return model, meta
