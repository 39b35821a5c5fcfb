"""Low-rank adapters on the attention projections."""

from __future__ import annotations

import math

import torch

from .model import Denoiser


class LoraAdapter:
    """Per-target factors A (r x d_in) and B (d_out x r).

    The effective weight delta is ``(alpha / rank) * B @ A``. B starts at zero
    so a fresh adapter leaves the base model untouched.
    """

    def __init__(self, A: dict, B: dict, rank: int, alpha: float):
        if set(A) != set(B):
            raise ValueError("A and B must cover the same targets")
        self.A = A
        self.B = B
        self.rank = int(rank)
        self.alpha = float(alpha)

    @classmethod
    def init(cls, model: Denoiser, rank: int = 16, alpha: float = 20.0, seed: int = 0) -> "LoraAdapter":
        g = torch.Generator().manual_seed(seed)
        A, B = {}, {}
        for name, (d_out, d_in) in model.lora_shapes().items():
            bound = 1.0 / math.sqrt(d_in)
            A[name] = (torch.rand(rank, d_in, generator=g) * 2 - 1) * bound
            B[name] = torch.zeros(d_out, rank)
        return cls(A, B, rank, alpha)

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @property
    def targets(self) -> list[str]:
        return sorted(self.A)

    def parameters(self) -> list[torch.Tensor]:
        return [t for name in self.targets for t in (self.A[name], self.B[name])]

    def requires_grad_(self, flag: bool = True) -> "LoraAdapter":
        for p in self.parameters():
            p.requires_grad_(flag)
        return self

    def delta(self, name: str) -> torch.Tensor:
        return self.scaling * (self.B[name] @ self.A[name])

    def deltas(self) -> dict[str, torch.Tensor]:
        return {n: self.delta(n) for n in self.targets}

    def detach(self) -> "LoraAdapter":
        return LoraAdapter(
            {k: v.detach().clone() for k, v in self.A.items()},
            {k: v.detach().clone() for k, v in self.B.items()},
            self.rank,
            self.alpha,
        )

    def to(self, dtype) -> "LoraAdapter":
        return LoraAdapter(
            {k: v.to(dtype) for k, v in self.A.items()},
            {k: v.to(dtype) for k, v in self.B.items()},
            self.rank,
            self.alpha,
        )


def lora_interpolate(a: LoraAdapter, b: LoraAdapter, alpha: float) -> LoraAdapter:
    """Adapter whose delta is ``(1 - alpha) * delta_a + alpha * delta_b``.

    The factors are stacked (rank doubles, so does the LoRA alpha to keep the
    scaling), which makes the blend exact in the deltas rather than in A, B.
    """
    if a.rank != b.rank or a.targets != b.targets or a.scaling != b.scaling:
        raise ValueError("adapters differ in rank, scaling or targets")
    if alpha == 0.0:
        return a.detach()
    if alpha == 1.0:
        return b.detach()
    A, B = {}, {}
    for name in a.targets:
        A[name] = torch.cat([a.A[name], b.A[name]], dim=0).detach()
        B[name] = torch.cat([(1.0 - alpha) * a.B[name], alpha * b.B[name]], dim=1).detach()
    return LoraAdapter(A, B, 2 * a.rank, 2 * a.alpha)
