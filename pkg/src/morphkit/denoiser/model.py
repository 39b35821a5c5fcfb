"""Toy diffusion transformer over point tokens.

Each block runs self-attention over the M tokens, cross-attention to two
context tokens ``[condition, timestep embedding]`` and a GELU MLP, all
pre-norm with residuals. The q/k/v/out projections of both attentions accept
LoRA deltas, and every attention call is routed through an optional hooks
object so morphing code can record or replace keys and values.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch import nn

from .. import numerics
from ..numerics import attention, gelu

ATTN_KINDS = ("self", "cross")
LORA_TARGETS = ("to_q", "to_k", "to_v", "to_out")


@dataclass
class DenoiserConfig:
    M: int = 128
    d_model: int = 64
    n_blocks: int = 4
    n_heads: int = 4
    d_cond: int = 16
    steps: int = 250
    channels: int = 3
    mlp_ratio: int = 4
    n_time_freqs: int = 16

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.M < 2 or self.M & (self.M - 1):
            raise ValueError("M must be a power of two")
        if self.steps < 2:
            raise ValueError("steps must be >= 2")

    def to_dict(self) -> dict:
        return asdict(self)


class Hooks:
    """Default hook behaviour: plain attention, untouched residual stream.

    Subclasses override ``attend`` (receives per-head q, k, v shaped
    (B, H, L, dh)) and ``after_block`` (receives the (B, M, d) residual
    stream after block ``i``).
    """

    def attend(self, block: int, kind: str, q, k, v):
        return attention(q, k, v)

    def after_block(self, block: int, h):
        return h

    def finish(self, h):
        return h


class LoraMix:
    """A weighted sum of LoRA adapters applied per batch element.

    ``coefs`` has shape (B, n_adapters); the effective delta for element b is
    ``sum_a coefs[b, a] * delta_a``.
    """

    def __init__(self, adapters, coefs: torch.Tensor):
        self.adapters = list(adapters)
        self.coefs = coefs
        if coefs.shape[-1] != len(self.adapters):
            raise ValueError("one coefficient column per adapter")

    def delta_out(self, name: str, x: torch.Tensor) -> torch.Tensor | None:
        out = None
        for j, ad in enumerate(self.adapters):
            if name not in ad.A:
                continue
            y = (x @ ad.A[name].T) @ ad.B[name].T * ad.scaling
            c = self.coefs[:, j].to(y.dtype).reshape(-1, *([1] * (y.dim() - 1)))
            y = c * y
            out = y if out is None else out + y
        return out


class LoraLinear(nn.Linear):
    def forward(self, x, lora: LoraMix | None = None, name: str = ""):
        y = super().forward(x)
        if lora is not None:
            d = lora.delta_out(name, x)
            if d is not None:
                y = y + d
        return y


class Attention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.to_q = LoraLinear(d_model, d_model)
        self.to_k = LoraLinear(d_model, d_model)
        self.to_v = LoraLinear(d_model, d_model)
        self.to_out = LoraLinear(d_model, d_model)

    def _split(self, x):
        b, n, d = x.shape
        return x.reshape(b, n, self.n_heads, d // self.n_heads).transpose(1, 2)

    def forward(self, x, ctx, *, prefix, block, kind, lora=None, hooks=None):
        q = self._split(self.to_q(x, lora, prefix + ".to_q"))
        k = self._split(self.to_k(ctx, lora, prefix + ".to_k"))
        v = self._split(self.to_v(ctx, lora, prefix + ".to_v"))
        out = hooks.attend(block, kind, q, k, v) if hooks is not None else attention(q, k, v)
        b, h, n, dh = out.shape
        out = out.transpose(1, 2).reshape(b, n, h * dh)
        return self.to_out(out, lora, prefix + ".to_out")


class Block(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        d = cfg.d_model
        self.norm1 = nn.LayerNorm(d)
        self.self_attn = Attention(d, cfg.n_heads)
        self.norm2 = nn.LayerNorm(d)
        self.cross_attn = Attention(d, cfg.n_heads)
        self.norm3 = nn.LayerNorm(d)
        self.fc1 = nn.Linear(d, cfg.mlp_ratio * d)
        self.fc2 = nn.Linear(cfg.mlp_ratio * d, d)

    def forward(self, h, ctx, *, index, lora=None, hooks=None):
        p = f"blocks.{index}"
        x = self.norm1(h)
        h = h + self.self_attn(x, x, prefix=p + ".self_attn", block=index, kind="self", lora=lora, hooks=hooks)
        x = self.norm2(h)
        h = h + self.cross_attn(x, ctx, prefix=p + ".cross_attn", block=index, kind="cross", lora=lora, hooks=hooks)
        h = h + self.fc2(gelu(self.fc1(self.norm3(h))))
        return h


class Denoiser(nn.Module):
    """Velocity network v(z_t, t, c) for one stage of the cascade."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.in_proj = nn.Linear(cfg.channels, d)
        self.pos_embed = nn.Parameter(torch.randn(cfg.M, d) * 0.5)
        self.register_buffer("time_freqs", torch.exp(torch.linspace(0.0, math.log(1000.0), cfg.n_time_freqs)))
        self.time_proj = nn.Linear(2 * cfg.n_time_freqs, d)
        self.time_mlp = nn.Linear(d, d)
        self.cond_proj = nn.Linear(cfg.d_cond, d)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_blocks))
        self.norm_out = nn.LayerNorm(d)
        self.out_proj = nn.Linear(d, cfg.channels)
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def time_embedding(self, t: torch.Tensor) -> torch.Tensor:
        ang = t[:, None].to(self.time_freqs.dtype) * self.time_freqs[None]
        feats = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)
        return self.time_mlp(gelu(self.time_proj(feats)))

    def context(self, t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        return torch.stack([self.cond_proj(cond), self.time_embedding(t)], dim=1)

    def embed(self, z: torch.Tensor) -> torch.Tensor:
        return self.in_proj(z) + self.pos_embed

    def head(self, h: torch.Tensor) -> torch.Tensor:
        return self.out_proj(self.norm_out(h))

    def forward(self, z, t, cond, lora: LoraMix | None = None, hooks: Hooks | None = None):
        """z: (B, M, C); t: (B,) in [0, 1]; cond: (B, d_cond)."""
        if z.dim() != 3 or z.shape[1] != self.cfg.M or z.shape[2] != self.cfg.channels:
            raise ValueError(f"expected (B, {self.cfg.M}, {self.cfg.channels}) tokens, got {tuple(z.shape)}")
        ctx = self.context(t, cond)
        h = self.embed(z)
        for i, block in enumerate(self.blocks):
            h = block(h, ctx, index=i, lora=lora, hooks=hooks)
            if hooks is not None:
                h = hooks.after_block(i, h)
        if hooks is not None:
            h = hooks.finish(h)
        return self.head(h)

    def lora_shapes(self) -> dict[str, tuple[int, int]]:
        """(d_out, d_in) of every LoRA-targetable projection."""
        shapes = {}
        for i, block in enumerate(self.blocks):
            for kind, attn in (("self_attn", block.self_attn), ("cross_attn", block.cross_attn)):
                for t in LORA_TARGETS:
                    lin = getattr(attn, t)
                    shapes[f"blocks.{i}.{kind}.{t}"] = (lin.out_features, lin.in_features)
        return shapes


def velocity(model: Denoiser, z_t, t, cond, lora=None, hooks=None) -> torch.Tensor:
    """Predicted velocity for a single (M, C) state or a (B, M, C) batch."""
    single = z_t.dim() == 2
    if single:
        z_t = z_t[None]
    b = z_t.shape[0]
    t = torch.as_tensor(t, dtype=z_t.dtype)
    if t.dim() == 0:
        if not 0.0 <= float(t) <= 1.0:
            raise ValueError("t must lie in [0, 1]")
        t = t.expand(b)
    if cond.dim() == 1:
        cond = cond[None].expand(b, -1)
    out = model(z_t, t, cond, lora=lora, hooks=hooks)
    numerics.check_finite(out, "velocity")
    return out[0] if single else out
