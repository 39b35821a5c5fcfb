"""Flow-matching training, Euler sampling/inversion, LoRA finetuning and the
geometry -> texture cascade."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import torch

from .. import numerics
from ..numerics import NonFiniteError
from .lora import LoraAdapter
from .model import Denoiser, LoraMix, velocity

log = logging.getLogger(__name__)


@dataclass
class TrainHyper:
    lr: float = 3e-4
    batches: int = 4000
    batch_size: int = 16
    seed: int = 0
    warmup: int = 100
    min_lr_frac: float = 0.05
    grad_clip: float = 1.0
    log_every: int = 100


@dataclass
class TrainResult:
    losses: list = field(default_factory=list)

    @property
    def initial(self) -> float:
        return sum(self.losses[:50]) / len(self.losses[:50])

    @property
    def final(self) -> float:
        return sum(self.losses[-50:]) / len(self.losses[-50:])


def _lr_at(step: int, hyper: TrainHyper) -> float:
    if step < hyper.warmup:
        return hyper.lr * (step + 1) / hyper.warmup
    frac = (step - hyper.warmup) / max(1, hyper.batches - hyper.warmup)
    cos = 0.5 * (1 + math.cos(math.pi * min(1.0, frac)))
    return hyper.lr * (hyper.min_lr_frac + (1 - hyper.min_lr_frac) * cos)


def flow_loss(model, x0, x1, t, cond, lora=None) -> torch.Tensor:
    """|| v(x_t, t, c) - (x1 - x0) ||^2 on the straight path x_t = (1-t) x0 + t x1."""
    tt = t[:, None, None]
    xt = (1 - tt) * x0 + tt * x1
    return numerics.mse(model(xt, t, cond, lora=lora), x1 - x0)


def train(model: Denoiser, batch_fn, hyper: TrainHyper, params=None, label: str = "model") -> TrainResult:
    """Adam with warmup + cosine decay on the flow-matching objective.

    ``batch_fn(gen, n)`` returns ``(x0, x1, cond)`` for a batch of n, drawing
    any randomness from the torch generator ``gen``. ``params`` defaults to the
    model parameters (pass extra modules' parameters to train them jointly).
    """
    params = list(model.parameters()) if params is None else list(params)
    gen = torch.Generator().manual_seed(hyper.seed)
    opt = torch.optim.Adam(params, lr=hyper.lr)
    result = TrainResult()
    for step in range(hyper.batches):
        lr = _lr_at(step, hyper)
        for g in opt.param_groups:
            g["lr"] = lr
        x0, x1, cond = batch_fn(gen, hyper.batch_size)
        t = torch.rand(hyper.batch_size, generator=gen)
        loss = flow_loss(model, x0, x1, t, cond)
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteError(f"{label}: loss diverged at step {step} (lr={lr:.2e})")
        opt.zero_grad()
        loss.backward()
        if hyper.grad_clip:
            torch.nn.utils.clip_grad_norm_(params, hyper.grad_clip)
        if lr > 0:
            opt.step()
        result.losses.append(value)
        if hyper.log_every and (step + 1) % hyper.log_every == 0:
            log.info("%s step %d loss %.5f lr %.2e", label, step + 1, sum(result.losses[-hyper.log_every:]) / hyper.log_every, lr)
    return result


# ---------------------------------------------------------------------------
# ODE integration


class Mechanisms:
    """Per-step callbacks used by ``sample``; the base class changes nothing.

    ``begin_step(k)`` returns the hooks for the forward pass at step k (or
    None), ``model_input(k, z)`` may rewrite the tokens fed to the network,
    ``model_output(k, v)`` the predicted velocity, ``update_state(k, z)`` the
    latent after the step.
    """

    def begin_step(self, k: int):
        return None

    def model_input(self, k: int, z: torch.Tensor) -> torch.Tensor:
        return z

    def model_output(self, k: int, v: torch.Tensor) -> torch.Tensor:
        return v

    def update_state(self, k: int, z: torch.Tensor) -> torch.Tensor:
        return z


def step_time(k: int, steps: int) -> float:
    """Flow time at the start of step k (k = 1 is the pure-noise end)."""
    return (k - 1) / steps


@torch.no_grad()
def sample(model, z0, cond, steps: int | None = None, mechanisms: Mechanisms | None = None, lora=None, callback=None):
    """Euler-integrate dz/dt = v from t=0 to t=1 in ``steps`` uniform steps."""
    steps = steps or model.cfg.steps
    z = z0.clone()
    dt = 1.0 / steps
    for k in range(1, steps + 1):
        hooks = mechanisms.begin_step(k) if mechanisms else None
        zin = mechanisms.model_input(k, z) if mechanisms else z
        v = velocity(model, zin, step_time(k, steps), cond, lora=lora, hooks=hooks)
        if mechanisms:
            v = mechanisms.model_output(k, v)
        z = z + dt * v
        if mechanisms:
            z = mechanisms.update_state(k, z)
        numerics.check_finite(z, f"sample state at step {k}")
        if callback is not None:
            callback(k, z, hooks)
    return z


@torch.no_grad()
def invert(model, x, cond, steps: int | None = None, lora=None):
    """Reverse Euler from t=1 back to t=0; exact inverse of ``sample`` for a
    constant velocity field."""
    steps = steps or model.cfg.steps
    z = x.clone()
    dt = 1.0 / steps
    for k in range(steps, 0, -1):
        v = velocity(model, z, k / steps, cond, lora=lora)
        z = z - dt * v
        numerics.check_finite(z, f"inversion state at step {k}")
    return z


# ---------------------------------------------------------------------------
# LoRA finetuning


def lora_finetune(
    model: Denoiser,
    x0_fn,
    x1: torch.Tensor,
    cond: torch.Tensor,
    steps: int = 500,
    rank: int = 16,
    alpha: float = 20.0,
    lr: float = 1e-3,
    batch_size: int = 8,
    seed: int = 0,
) -> tuple[LoraAdapter, list]:
    """Fit an adapter to a single datum with the base model frozen.

    ``x0_fn(gen, n)`` draws the source side of the path (noise for geometry,
    points + noise for texture).
    """
    adapter = LoraAdapter.init(model, rank, alpha, seed=seed).requires_grad_(True)
    gen = torch.Generator().manual_seed(seed + 1)
    base_state = [p.requires_grad for p in model.parameters()]
    for p in model.parameters():
        p.requires_grad_(False)
    opt = torch.optim.Adam(adapter.parameters(), lr=lr)
    losses = []
    mix = LoraMix([adapter], torch.ones(batch_size, 1))
    try:
        for step in range(steps):
            x0 = x0_fn(gen, batch_size)
            t = torch.rand(batch_size, generator=gen)
            loss = flow_loss(model, x0, x1.expand(batch_size, -1, -1), t, cond.expand(batch_size, -1), lora=mix)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteError(f"LoRA finetune diverged at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(value)
    finally:
        for p, flag in zip(model.parameters(), base_state):
            p.requires_grad_(flag)
    return adapter.detach().requires_grad_(False), losses


def single(adapter: LoraAdapter | None, batch: int = 1) -> LoraMix | None:
    return None if adapter is None else LoraMix([adapter], torch.ones(batch, 1))


# ---------------------------------------------------------------------------
# cascade


@dataclass
class NoisePair:
    z_G: torch.Tensor  # (M, 3)
    z_T: torch.Tensor  # (M, 3)

    def __post_init__(self):
        if self.z_G.shape != self.z_T.shape:
            raise ValueError("geometry and texture noise shapes differ")


def cascade_generate(geom, tex, noise: NoisePair, cond, mechanisms=None, lora_geom=None, lora_tex=None):
    """Points from the geometry stage, then colors from the texture stage
    started at ``points + z_T``. Accepts single (M, 3) noises or batches."""
    g_mech, t_mech = mechanisms if mechanisms is not None else (None, None)
    points = sample(geom, noise.z_G, cond, mechanisms=g_mech, lora=lora_geom)
    colors = sample(tex, points + noise.z_T, cond, mechanisms=t_mech, lora=lora_tex)
    return points, colors
