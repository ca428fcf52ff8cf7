"""Closed-form cost accounting for scan-block and self-attention encoders,
empirical operation counting, and the sequence-length scaling report.

Convention: one multiply-add is 2 FLOPs; every other elementwise evaluation,
normalization step and reduction input is counted the way ``numcore`` tallies
it, so analytic and counted totals can be compared directly.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace

import numpy as np

from . import numcore as nc
from .numcore import Module, Tensor
from .vim import VimConfig, VimStack

# reference rows for the 224x224 2D setting: (backbone, patch, seq) -> (GFLOPs, Mparams)
REFERENCE_2D = {
    ("ssm", 4, 3136): (534.98, 13.75),
    ("ssm", 16, 196): (34.46, 12.89),
    ("attention", 4, 3136): (2520.17, 22.52),
    ("attention", 16, 196): (73.73, 21.67),
}


@dataclass(frozen=True)
class EncoderSpec:
    """Shape parameters shared by both backbones.

    ``spatial`` is the input extent (2 or 3 axes); the token count is the
    product of ``spatial // patch``.  Attention fields are ignored by the
    scan-block formulas and vice versa.
    """

    dim: int = 384
    depth: int = 12
    spatial: tuple[int, ...] = (224, 224)
    patch: int = 16
    channels: int = 3
    d_state: int = 16
    expand: int = 2
    d_conv: int = 4
    dt_rank: int | None = None
    heads: int = 6
    mlp_ratio: int = 4
    cls_token: bool = True

    @property
    def tokens(self) -> int:
        return math.prod(s // self.patch for s in self.spatial)

    @property
    def token_dim(self) -> int:
        return self.channels * self.patch ** len(self.spatial)

    @property
    def d_inner(self) -> int:
        return self.expand * self.dim

    @property
    def rank(self) -> int:
        return self.dt_rank or math.ceil(self.dim / 16)

    def vim(self) -> VimConfig:
        return VimConfig(self.dim, self.d_state, self.expand, self.d_conv, self.dt_rank)

    @classmethod
    def image224(cls, patch: int, **overrides) -> "EncoderSpec":
        """The 224x224 RGB setting with a 384-wide, 12-deep encoder."""
        return cls(patch=patch, **overrides)

    @classmethod
    def from_mae(cls, cfg) -> "EncoderSpec":
        return cls(dim=cfg.enc_dim, depth=cfg.enc_depth, spatial=tuple(cfg.volume),
                   patch=cfg.patch, channels=cfg.channels, d_state=cfg.d_state,
                   expand=cfg.expand, d_conv=cfg.d_conv, cls_token=False)


def _spec(cfg) -> EncoderSpec:
    return cfg if isinstance(cfg, EncoderSpec) else EncoderSpec.from_mae(cfg)


# --------------------------------------------------------------------------
# scan-block encoder
# --------------------------------------------------------------------------


def ssm_cost_terms(cfg) -> tuple[int, int]:
    """``(per_token, constant)`` with ``flops = per_token * T + constant``.

    Per token and block: RMS norm (5D), in/gate projections (2 x 2DE), SiLU
    gate (E), two branches, branch sum (E), gating (E), output projection
    (2ED) and residual (D).  Per branch: conv (2Ek + E), SiLU (E), step
    projection (2E(r+2N)), dt projection (2rE + E + E), fused scan (10EN),
    skip (2E).  The constant is the per-call ``A = -exp(A_log)`` (2EN per
    branch).  Embedding adds ``2 * token_dim * D + 2D`` per token, the final
    norm ``5D``.
    """
    s = _spec(cfg)
    D, E, N, k, r = s.dim, s.d_inner, s.d_state, s.d_conv, s.rank
    branch = (2 * E * k + E) + E + 2 * E * (r + 2 * N) + (2 * r * E + 2 * E) + 10 * E * N + 2 * E
    block = 5 * D + 4 * D * E + E + 2 * branch + E + E + 2 * E * D + D
    per_token = 2 * s.token_dim * D + 2 * D + s.depth * block + 5 * D
    constant = s.depth * 2 * (2 * E * N)
    return per_token, constant


def flops_ssm_encoder(cfg, T: int | None = None) -> int:
    """Forward FLOPs of the scan-block encoder on ``T`` tokens (one sample)."""
    a, c = ssm_cost_terms(cfg)
    T = _spec(cfg).tokens if T is None else T
    return a * T + c


def params_ssm_encoder(cfg, T: int | None = None, learned_pos: bool = True) -> int:
    """Trainable parameters; ``learned_pos`` counts a ``T x D`` position table."""
    s = _spec(cfg)
    D, E, N, k, r = s.dim, s.d_inner, s.d_state, s.d_conv, s.rank
    T = s.tokens if T is None else T
    branch = E * k + E + E * (r + 2 * N) + r * E + E + E * N + E
    block = D + 2 * D * E + 2 * branch + E * D
    total = s.token_dim * D + D + s.depth * block + D
    return total + (T * D if learned_pos else 0)


# --------------------------------------------------------------------------
# self-attention encoder
# --------------------------------------------------------------------------


def attn_cost_terms(cfg) -> tuple[int, int, int]:
    """``(c2, c1, c0)`` with ``flops = c2 * S**2 + c1 * S + c0`` where ``S``
    counts the sequence including any class token.

    Quadratic part per block: ``Q K^T`` and ``A V`` at ``2 S^2 D`` each, plus
    the softmax (max, shift, exp, sum, divide) at 5 per score and head.
    """
    s = _spec(cfg)
    D, H, M = s.dim, s.heads, s.mlp_ratio * s.dim
    c2 = s.depth * (4 * D + 5 * H)
    block = (8 * D                       # layer norm
             + 6 * D * D + 3 * D         # qkv + bias
             + D                         # query scaling
             + 2 * D * D + D + D         # output projection, bias, residual
             + 8 * D                     # layer norm
             + 2 * D * M + M + 3 * M     # fc1, bias, gelu
             + 2 * M * D + D + D)        # fc2, bias, residual
    c1 = s.depth * block + D + 8 * D     # position add, final norm
    return c2, c1, 0


def flops_attn_encoder(cfg, T: int | None = None) -> int:
    """Forward FLOPs of a pre-norm attention encoder on ``T`` patch tokens."""
    s = _spec(cfg)
    T = s.tokens if T is None else T
    S = T + int(s.cls_token)
    c2, c1, c0 = attn_cost_terms(s)
    return c2 * S * S + c1 * S + c0 + (2 * s.token_dim * s.dim + s.dim) * T


def params_attn_encoder(cfg, T: int | None = None) -> int:
    s = _spec(cfg)
    D, M = s.dim, s.mlp_ratio * s.dim
    T = s.tokens if T is None else T
    S = T + int(s.cls_token)
    block = 2 * D + 3 * D * D + 3 * D + D * D + D + 2 * D + D * M + M + M * D + D
    return s.token_dim * D + D + int(s.cls_token) * D + S * D + s.depth * block + 2 * D


def attention_score_bytes(T: int, heads: int = 6, bytes_per: int = 4, depth: int = 1) -> int:
    """Memory held by the ``T x T`` score matrices of ``depth`` layers."""
    return depth * heads * T * T * bytes_per


# --------------------------------------------------------------------------
# executable encoders for counting
# --------------------------------------------------------------------------


def patchify_2d(images: np.ndarray, p: int) -> np.ndarray:
    """``[N, C, H, W]`` to row-major tokens ``[N, (H/p)(W/p), C p p]``."""
    N, C, H, W = images.shape
    if H % p or W % p:
        raise ValueError(f"image {H}x{W} not divisible by patch {p}")
    x = images.reshape(N, C, H // p, p, W // p, p).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(N, (H // p) * (W // p), C * p * p)


class SsmEncoder(Module):
    """Patch embedding, learned positions and a scan-block stack on tokens."""

    def __init__(self, spec: EncoderSpec, rng: np.random.Generator | None = None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.spec = spec
        td, D = spec.token_dim, spec.dim
        self.patch_w = nc.parameter(rng.uniform(-td ** -0.5, td ** -0.5, (td, D)))
        self.patch_b = nc.parameter(np.zeros(D))
        self.pos = nc.parameter(rng.normal(0.0, 0.02, (spec.tokens, D)))
        self.stack = VimStack(spec.vim(), spec.depth, rng)

    def __call__(self, tokens) -> Tensor:
        return self.stack(Tensor(tokens) @ self.patch_w + self.patch_b + self.pos)


def _gelu(x: Tensor) -> Tensor:
    return x * nc.sigmoid(x * 1.702)


class _AttnBlock(Module):
    def __init__(self, D: int, M: int, heads: int, init):
        self.heads = heads
        self.ln1_w, self.ln1_b = nc.parameter(np.ones(D)), nc.parameter(np.zeros(D))
        self.qkv_w, self.qkv_b = init(D, 3 * D), nc.parameter(np.zeros(3 * D))
        self.proj_w, self.proj_b = init(D, D), nc.parameter(np.zeros(D))
        self.ln2_w, self.ln2_b = nc.parameter(np.ones(D)), nc.parameter(np.zeros(D))
        self.fc1_w, self.fc1_b = init(D, M), nc.parameter(np.zeros(M))
        self.fc2_w, self.fc2_b = init(M, D), nc.parameter(np.zeros(D))

    def attention(self, x: Tensor) -> Tensor:
        B, S, D = x.shape
        H = self.heads
        dh = D // H
        qkv = nc.transpose(nc.reshape(x @ self.qkv_w + self.qkv_b, (B, S, 3, H, dh)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0] * dh ** -0.5, qkv[1], qkv[2]
        scores = q @ nc.transpose(k, (0, 1, 3, 2))
        scores = scores - nc.max(scores, axis=-1, keepdims=True)
        e = nc.exp(scores)
        att = e / nc.sum(e, axis=-1, keepdims=True)
        out = nc.reshape(nc.transpose(att @ v, (0, 2, 1, 3)), (B, S, D))
        return out @ self.proj_w + self.proj_b

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attention(nc.layer_norm(x, self.ln1_w, self.ln1_b))
        h = _gelu(nc.layer_norm(x, self.ln2_w, self.ln2_b) @ self.fc1_w + self.fc1_b)
        return x + (h @ self.fc2_w + self.fc2_b)


class AttentionEncoder(Module):
    """Pre-norm encoder with multi-head self-attention and a GELU MLP."""

    def __init__(self, spec: EncoderSpec, rng: np.random.Generator | None = None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.spec = spec
        td, D, M = spec.token_dim, spec.dim, spec.mlp_ratio * spec.dim
        if D % spec.heads:
            raise ValueError(f"dim {D} not divisible by {spec.heads} heads")

        def init(*shape):
            return nc.parameter(rng.normal(0.0, 0.02, shape))

        self.patch_w = init(td, D)
        self.patch_b = nc.parameter(np.zeros(D))
        self.cls = init(1, 1, D) if spec.cls_token else None
        self.pos = init(spec.tokens + int(spec.cls_token), D)
        self.blocks = [_AttnBlock(D, M, spec.heads, init) for _ in range(spec.depth)]
        self.norm_w = nc.parameter(np.ones(D))
        self.norm_b = nc.parameter(np.zeros(D))

    def __call__(self, tokens) -> Tensor:
        x = Tensor(tokens) @ self.patch_w + self.patch_b
        if self.cls is not None:
            cls = nc.take(self.cls, np.zeros(x.shape[0], dtype=np.int64), axis=0)
            x = nc.concat([cls, x], axis=1)
        x = x + self.pos
        for blk in self.blocks:
            x = blk(x)
        return nc.layer_norm(x, self.norm_w, self.norm_b)


def count_empirical_flops(model, inputs) -> nc.FlopCounter:
    """Tally every counted operation of one forward call ``model(inputs)``."""
    with nc.no_grad(), nc.count_flops() as counter:
        model(inputs)
    return counter


# --------------------------------------------------------------------------
# scaling report
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ScalingRow:
    backbone: str
    patch: int
    seq_len: int
    flops: int
    params: int
    ratio: float
    ref_gflops: float | None
    ref_mparams: float | None


def patch_for_seq(T: int, side: int = 224) -> int:
    g = math.isqrt(T)
    if g * g != T or side % g:
        raise ValueError(f"sequence length {T} is not a square grid dividing {side}")
    return side // g


def scaling_rows(seqs, spec: EncoderSpec | None = None) -> list[ScalingRow]:
    """Both backbones at each sequence length of the square 2D setting; the
    ratio column is relative to the shortest sequence of the same backbone."""
    base = EncoderSpec.image224(16) if spec is None else spec
    side = base.spatial[0]
    seqs = sorted(int(t) for t in seqs)
    rows = []
    for backbone, fl, pa in (("ssm", flops_ssm_encoder, params_ssm_encoder),
                             ("attention", flops_attn_encoder, params_attn_encoder)):
        first = None
        for T in seqs:
            s = replace(base, patch=patch_for_seq(T, side))
            f = fl(s)
            first = f if first is None else first
            ref = REFERENCE_2D.get((backbone, s.patch, T), (None, None))
            rows.append(ScalingRow(backbone, s.patch, T, f, pa(s), f / first, *ref))
    return rows


_HEADER = ("backbone", "patch", "seq_len", "gflops", "params_m", "ratio", "ref_gflops", "ref_params_m")


def _cells(r: ScalingRow) -> list[str]:
    opt = lambda v: "-" if v is None else f"{v:.2f}"  # noqa: E731
    return [r.backbone, str(r.patch), str(r.seq_len), f"{r.flops / 1e9:.2f}",
            f"{r.params / 1e6:.2f}", f"{r.ratio:.2f}", opt(r.ref_gflops), opt(r.ref_mparams)]


def format_scaling_table(rows) -> str:
    body = [list(_HEADER)] + [_cells(r) for r in rows]
    widths = [max(len(line[i]) for line in body) for i in range(len(_HEADER))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(line, widths)) for line in body) + "\n"


def scaling_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(_HEADER)
    for r in rows:
        w.writerow([r.backbone, r.patch, r.seq_len, r.flops, r.params, f"{r.ratio:.6f}",
                    "" if r.ref_gflops is None else r.ref_gflops,
                    "" if r.ref_mparams is None else r.ref_mparams])
    return buf.getvalue()


def fit_quadratic(T, flops) -> tuple[np.ndarray, float]:
    """Least-squares ``c + b T + a T^2``; returns ``([a, b, c], R^2)``."""
    T = np.asarray(T, dtype=np.float64)
    y = np.asarray(flops, dtype=np.float64)
    coef = np.polyfit(T, y, 2)
    resid = y - np.polyval(coef, T)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    return coef, 1.0 - float((resid ** 2).sum()) / ss_tot if ss_tot else 1.0
