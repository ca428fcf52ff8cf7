"""Bidirectional selective-scan block and block stacks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import Module, Tensor
from .ssm import SsmParams, selective_scan


@dataclass(frozen=True)
class VimConfig:
    d_model: int
    d_state: int = 16
    expand: int = 2
    d_conv: int = 4
    dt_rank: int | None = None
    scan_method: str = "sequential"
    eps: float = 1e-5

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    @property
    def rank(self) -> int:
        return self.dt_rank or math.ceil(self.d_model / 16)


class ScanBranch(Module):
    """Causal depthwise conv -> SiLU -> selective scan, plus a learned skip."""

    def __init__(self, cfg: VimConfig, rng: np.random.Generator):
        E, k = cfg.d_inner, cfg.d_conv
        self.cfg = cfg
        self.conv_w = nc.parameter(rng.uniform(-k ** -0.5, k ** -0.5, (E, k)))
        self.conv_b = nc.parameter(rng.uniform(-k ** -0.5, k ** -0.5, E))
        self.ssm = SsmParams(E, cfg.d_state, cfg.rank, rng)
        self.skip = nc.parameter(np.ones(E))

    def __call__(self, z: Tensor) -> Tensor:
        xc = nc.silu(nc.depthwise_conv1d(z, self.conv_w, self.conv_b, causal=True))
        return selective_scan(self.ssm, xc, method=self.cfg.scan_method) + xc * self.skip


class VimBlock(Module):
    """Pre-norm residual block scanning the token sequence in both directions.

    ``out = x + out_proj(silu(gate_proj(u)) * (fwd(z) + rev(bwd(rev(z)))))``
    with ``u = rms_norm(x)`` and ``z = in_proj(u)``.  The two branches own
    independent conv and SSM weights.
    """

    def __init__(self, cfg: VimConfig, rng: np.random.Generator | None = None,
                 zero_out: bool = False):
        rng = np.random.default_rng(0) if rng is None else rng
        D, E = cfg.d_model, cfg.d_inner
        self.cfg = cfg
        self.norm_w = nc.parameter(np.ones(D))
        b = 1.0 / math.sqrt(D)
        self.in_proj = nc.parameter(rng.uniform(-b, b, (D, E)))
        self.gate_proj = nc.parameter(rng.uniform(-b, b, (D, E)))
        self.fwd = ScanBranch(cfg, rng)
        self.bwd = ScanBranch(cfg, rng)
        b = 1.0 / math.sqrt(E)
        self.out_proj = nc.parameter(np.zeros((E, D)) if zero_out else rng.uniform(-b, b, (E, D)))

    def __call__(self, tokens: Tensor) -> Tensor:
        return vim_block_forward(self, tokens)


def vim_block_forward(block: VimBlock, tokens) -> Tensor:
    tokens = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
    if tokens.ndim != 3 or tokens.shape[1] < 1:
        raise nc.ShapeError(f"expected tokens[B, T, D] with T >= 1, got {tokens.shape}")
    u = nc.rms_norm(tokens, block.norm_w, block.cfg.eps)
    z = u @ block.in_proj
    gate = nc.silu(u @ block.gate_proj)
    y = block.fwd(z) + nc.flip(block.bwd(nc.flip(z, 1)), 1)
    return tokens + (y * gate) @ block.out_proj


class VimStack(Module):
    """Blocks applied in order, followed by a final RMS norm."""

    def __init__(self, cfg: VimConfig, depth: int, rng: np.random.Generator | None = None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.cfg = cfg
        self.blocks = [VimBlock(cfg, rng) for _ in range(depth)]
        self.norm_w = nc.parameter(np.ones(cfg.d_model))

    def __call__(self, tokens: Tensor) -> Tensor:
        return stack_forward(self.blocks, tokens, self.norm_w, self.cfg.eps)


def stack_forward(blocks: list[VimBlock], tokens, norm_weight=None, eps: float = 1e-5) -> Tensor:
    x = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
    dims = {b.cfg.d_model for b in blocks}
    if len(dims) > 1 or (dims and x.shape[-1] not in dims):
        raise nc.ShapeError(f"inconsistent model widths {dims} for tokens {x.shape}")
    for block in blocks:
        x = vim_block_forward(block, x)
    return nc.rms_norm(x, norm_weight, eps)
