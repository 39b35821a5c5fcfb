"""Regenerative morphing: basic interpolation plus Attention Fusion, Token
Reordering and Low-Frequency Enhancement.

All frames of a morph are generated in one batch. When fusion or reordering
is active the batch holds three streams per frame, laid out as
``[src x F, tgt x F, alpha x F]``; every row of frame f runs through the same
LoRA-interpolated model eps^alpha_f, only the noise and condition differ.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import numerics
from .assignment import TokenPermutation, pairwise_l2, solve_assignment
from .denoiser import checkpoint
from .denoiser.flow import Mechanisms, NoisePair, invert, lora_finetune, sample, single
from .denoiser.lora import LoraAdapter
from .denoiser.model import Hooks, LoraMix
from .denoiser.prior import Prior
from .numerics import attention, rfft_array, irfft_array, slerp
from .shapes import ShapeSample

log = logging.getLogger(__name__)


class MorphError(RuntimeError):
    """A pipeline stage failed; the message names the stage and alpha."""


Window = tuple[int, int] | None
# which token sequence the low-frequency enhancement rewrites at a step:
# the predicted velocity, the network input, or the running latent itself
LFE_TARGETS = ("velocity", "input", "state")


@dataclass
class MorphConfig:
    n_frames: int = 10
    beta_a: float = 2.0
    beta_b: float = 2.0
    include_endpoints: bool = True
    af: bool = True
    tr: bool = True
    lfe: bool = True
    af_geom_window: Window = (1, 150)
    af_tex_window: Window = (1, 5)
    tr_window: Window = (80, 200)
    lfe_window: Window = (200, 230)
    lfe_scale: float = 5.0
    lfe_omega0: float = 0.1 * math.pi
    lfe_target: str = "velocity"
    reorder_greedy: bool = False
    lora_steps: int = 500
    lora_rank: int = 16
    lora_alpha: float = 20.0
    lora_lr: float = 1e-3
    lora_batch: int = 8

    def __post_init__(self):
        if self.n_frames < 2:
            raise ValueError("n_frames must be >= 2")
        if self.beta_a <= 0 or self.beta_b <= 0:
            raise ValueError("Beta parameters must be positive")
        if self.lfe_scale < 1:
            raise ValueError("lfe_scale must be >= 1")
        if not 0 < self.lfe_omega0 < math.pi:
            raise ValueError("lfe_omega0 must lie in (0, pi)")
        if self.lfe_target not in LFE_TARGETS:
            raise ValueError(f"lfe_target must be one of {LFE_TARGETS}")
        for name in ("af_geom_window", "af_tex_window", "tr_window", "lfe_window"):
            w = getattr(self, name)
            if w is not None:
                w = (int(w[0]), int(w[1]))
                if w[0] > w[1]:
                    raise ValueError(f"{name} start after end")
                setattr(self, name, w)

    def windows(self, stage: str) -> dict[str, Window]:
        af = self.af_geom_window if stage == "geom" else self.af_tex_window
        return {
            "af": af if self.af else None,
            "tr": self.tr_window if self.tr else None,
            "lfe": self.lfe_window if self.lfe else None,
        }

    def validate(self, steps: int) -> None:
        for name in ("af_geom_window", "af_tex_window", "tr_window", "lfe_window"):
            w = getattr(self, name)
            if w is not None and not (1 <= w[0] and w[1] <= steps):
                raise ValueError(f"{name}={w} not inside [1, {steps}]")

    @property
    def needs_streams(self) -> bool:
        return any(self.windows(s)[m] is not None for s in ("geom", "tex") for m in ("af", "tr"))

    # flat key=value form
    def to_kv(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = f"{v[0]}-{v[1]}"
            elif v is None:
                v = "none"
            elif isinstance(v, float):
                v = repr(v)
            out[f.name] = str(v).lower() if isinstance(v, bool) else str(v)
        return out

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "MorphConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for k, raw in kv.items():
            if k not in known:
                raise KeyError(f"unknown morph config key {k!r}")
            default = getattr(cls(), k)
            raw = str(raw).strip()
            if k.endswith("_window"):
                if raw.lower() == "none":
                    kwargs[k] = None
                else:
                    a, b = raw.split("-")
                    kwargs[k] = (int(a), int(b))
            elif isinstance(default, bool):
                if raw.lower() not in ("true", "false", "1", "0"):
                    raise ValueError(f"{k} expects true/false, got {raw!r}")
                kwargs[k] = raw.lower() in ("true", "1")
            elif isinstance(default, int):
                kwargs[k] = int(raw)
            elif isinstance(default, float):
                kwargs[k] = float(raw)
            else:
                kwargs[k] = raw
        return cls(**kwargs)

    def text(self) -> str:
        kv = self.to_kv()
        return "".join(f"{k}={kv[k]}\n" for k in sorted(kv))

    def hash(self) -> str:
        return hashlib.sha256(self.text().encode()).hexdigest()[:16]


def in_window(k: int, window: Window) -> bool:
    return window is not None and window[0] <= k <= window[1]


# ---------------------------------------------------------------------------
# basic interpolation


def alpha_schedule(n: int, beta_params=(2.0, 2.0), include_endpoints: bool = True, seed: int = 0) -> list[float]:
    """n sorted Beta(a, b) draws, with 0 and 1 added when requested."""
    a, b = beta_params
    if n < 2:
        raise ValueError("need at least 2 interpolation points")
    if not (a > 0 and b > 0 and math.isfinite(a) and math.isfinite(b)):
        raise ValueError(f"invalid Beta parameters ({a}, {b})")
    draws = sorted(float(x) for x in numerics.Rng(seed).beta(a, b, n))
    if include_endpoints:
        draws = [0.0] + draws + [1.0]
    return draws


def interpolate_noise(src: NoisePair, tgt: NoisePair, alpha: float) -> NoisePair:
    return NoisePair(slerp(src.z_G, tgt.z_G, alpha), slerp(src.z_T, tgt.z_T, alpha))


def interpolate_condition(c_src: torch.Tensor, c_tgt: torch.Tensor, alpha: float) -> torch.Tensor:
    if alpha == 0.0:
        return c_src.clone()
    if alpha == 1.0:
        return c_tgt.clone()
    return (1.0 - alpha) * c_src + alpha * c_tgt


# ---------------------------------------------------------------------------
# attention fusion


def fused_attention(q_a, k_src, v_src, k_tgt, v_tgt, k_a, v_a, alpha) -> torch.Tensor:
    """Attention of the alpha stream over [blended src/tgt keys, own keys].

    ``alpha`` may be a float or a tensor broadcastable against the leading
    (batch) axis of the keys.
    """
    if not (k_src.shape == k_tgt.shape and v_src.shape == v_tgt.shape):
        raise ValueError("source and target taps are misaligned")
    if torch.is_tensor(alpha):
        alpha = alpha.to(k_src.dtype).reshape(-1, *([1] * (k_src.dim() - 1)))
    k = torch.cat([(1 - alpha) * k_src + alpha * k_tgt, k_a], dim=-2)
    v = torch.cat([(1 - alpha) * v_src + alpha * v_tgt, v_a], dim=-2)
    return attention(q_a, k, v)


class AttentionTap(Hooks):
    """Records q/k/v of every attention call; optional one-shot k/v writes.

    Records and replacements belong to one forward pass: call ``clear``
    before the next timestep.
    """

    def __init__(self):
        self.records: dict[tuple[int, str], tuple] = {}
        self.replacements: dict[tuple[int, str], tuple] = {}

    def clear(self):
        self.records.clear()
        self.replacements.clear()

    def write(self, block: int, kind: str, k, v):
        self.replacements[(block, kind)] = (k, v)

    def attend(self, block, kind, q, k, v):
        if (block, kind) in self.replacements:
            k, v = self.replacements.pop((block, kind))
        self.records[(block, kind)] = (q, k, v)
        return attention(q, k, v)


# ---------------------------------------------------------------------------
# token reordering


def reorder_tokens(seq_src, seq_tgt, alpha: float, greedy: bool = False):
    """Align the two sequences by a minimum-cost assignment.

    For alpha < 0.5 the target is permuted to follow the source; otherwise the
    source is permuted to follow the target. Returns the two sequences and the
    permutation applied to the moved one.
    """
    if seq_src.shape != seq_tgt.shape:
        raise ValueError("token sequences differ in length or width")
    anchor, moved = (seq_src, seq_tgt) if alpha < 0.5 else (seq_tgt, seq_src)
    cost = pairwise_l2(anchor.detach().double().numpy(), moved.detach().double().numpy())
    perm = solve_assignment(cost, greedy=greedy)
    idx = torch.as_tensor(perm.sigma)
    if alpha < 0.5:
        return seq_src, seq_tgt[idx], perm
    return seq_src[idx], seq_tgt, perm


def alignment_cost(seq_src, seq_tgt) -> float:
    """sum_j ||h_j^src - h_j^tgt|| for sequences as they stand."""
    d = seq_src.detach().double() - seq_tgt.detach().double()
    return float(d.norm(dim=-1).sum())


# ---------------------------------------------------------------------------
# low-frequency enhancement


def low_band(M: int, omega0: float) -> np.ndarray:
    k = np.arange(M // 2 + 1)
    return 2.0 * np.pi * k / M < omega0


def low_freq_enhance(tokens: torch.Tensor, omega0: float = 0.1 * math.pi, scale: float = 5.0) -> torch.Tensor:
    """Scale every rfft bin with 2*pi*k/M < omega0 along the token axis (-2)."""
    if not 0 < omega0 < math.pi:
        raise ValueError("omega0 must lie in (0, pi)")
    if scale < 1:
        raise ValueError("scale must be >= 1")
    M = tokens.shape[-2]
    if M < 2 or M & (M - 1):
        raise ValueError("token count must be a power of two")
    x = tokens.detach().double().numpy()
    spec = rfft_array(np.swapaxes(x, -1, -2))
    spec[..., low_band(M, omega0)] *= scale
    out = np.swapaxes(irfft_array(spec, M), -1, -2)
    return torch.from_numpy(np.ascontiguousarray(out)).to(tokens.dtype)


# ---------------------------------------------------------------------------
# per-step mechanism plumbing


@dataclass
class Counters:
    fusion: int = 0
    reorder: int = 0
    lfe: int = 0

    def add(self, other: "Counters"):
        self.fusion += other.fusion
        self.reorder += other.reorder
        self.lfe += other.lfe


class StreamHooks(Hooks):
    """Hooks for one forward pass over the three-stream batch."""

    def __init__(self, alphas: torch.Tensor, n_blocks: int, fuse: bool, reorder: bool, counters: Counters, greedy: bool):
        self.alphas = alphas
        self.F = len(alphas)
        self.n_blocks = n_blocks
        self.fuse = fuse
        self.reorder = reorder
        self.counters = counters
        self.greedy = greedy
        self.perm = None  # (2F, M) current order of the src/tgt residual streams

    def attend(self, block, kind, q, k, v):
        if not self.fuse:
            return attention(q, k, v)
        F = self.F
        qs, qt, qa = q[:F], q[F : 2 * F], q[2 * F :]
        ks, kt, ka = k[:F], k[F : 2 * F], k[2 * F :]
        vs, vt, va = v[:F], v[F : 2 * F], v[2 * F :]
        out_a = fused_attention(qa, ks, vs, kt, vt, ka, va, self.alphas)
        self.counters.fusion += 1
        return torch.cat([attention(qs, ks, vs), attention(qt, kt, vt), out_a], dim=0)

    def after_block(self, block, h):
        if not self.reorder or block >= self.n_blocks - 1:
            return h
        F, M = self.F, h.shape[1]
        if self.perm is None:
            self.perm = torch.arange(M).repeat(2 * F, 1)
        h = h.clone()
        for f in range(F):
            a = float(self.alphas[f])
            src, tgt, p = reorder_tokens(h[f], h[F + f], a, greedy=self.greedy)
            row = F + f if a < 0.5 else f
            h[f], h[F + f] = src, tgt
            self.perm[row] = self.perm[row][torch.as_tensor(p.sigma)]
            self.counters.reorder += 1
        return h

    def finish(self, h):
        # restore each stream's own token order before the output head
        if self.perm is None:
            return h
        out = h.clone()
        for r in range(2 * self.F):
            out[r, self.perm[r]] = h[r]
        return out


class StageMechanisms(Mechanisms):
    def __init__(self, cfg: MorphConfig, stage: str, alphas: torch.Tensor, n_blocks: int, streams: bool):
        self.cfg = cfg
        self.win = cfg.windows(stage)
        self.alphas = alphas
        self.n_blocks = n_blocks
        self.streams = streams
        self.counters = Counters()

    def begin_step(self, k):
        fuse = self.streams and in_window(k, self.win["af"])
        reorder = self.streams and in_window(k, self.win["tr"])
        if not (fuse or reorder):
            return None
        return StreamHooks(self.alphas, self.n_blocks, fuse, reorder, self.counters, self.cfg.reorder_greedy)

    def _enhance(self, k, z):
        if not in_window(k, self.win["lfe"]):
            return z
        self.counters.lfe += 1
        return low_freq_enhance(z, self.cfg.lfe_omega0, self.cfg.lfe_scale)

    def model_input(self, k, z):
        return self._enhance(k, z) if self.cfg.lfe_target == "input" else z

    def model_output(self, k, v):
        return self._enhance(k, v) if self.cfg.lfe_target == "velocity" else v

    def update_state(self, k, z):
        # "state" mode rewrites the running latent after the step at k, so
        # the network sees it from step k + 1 on
        return self._enhance(k, z) if self.cfg.lfe_target == "state" else z


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class Endpoint:
    """A morph endpoint after finetuning and inversion."""

    sample: ShapeSample
    cond: torch.Tensor
    lora_geom: LoraAdapter
    lora_tex: LoraAdapter
    noise: NoisePair


@dataclass
class MorphFrame:
    alpha: float
    points: torch.Tensor
    colors: torch.Tensor


@dataclass
class MorphSequence:
    frames: list[MorphFrame]
    provenance: dict = field(default_factory=dict)
    counters: Counters = field(default_factory=Counters)

    @property
    def alphas(self) -> list[float]:
        return [f.alpha for f in self.frames]


def _finetune_stage(prior: Prior, stage: str, sample: ShapeSample, cond, cfg: MorphConfig, seed: int):
    model = prior.geom if stage == "geom" else prior.tex
    pts = sample.points[None]
    if stage == "geom":
        target = pts

        def x0_fn(gen, n):
            return torch.randn((n,) + tuple(pts.shape[1:]), generator=gen)

    else:
        target = sample.colors[None]

        def x0_fn(gen, n):
            return pts + torch.randn((n,) + tuple(pts.shape[1:]), generator=gen)

    adapter, _ = lora_finetune(
        model, x0_fn, target, cond[None], steps=cfg.lora_steps, rank=cfg.lora_rank,
        alpha=cfg.lora_alpha, lr=cfg.lora_lr, batch_size=cfg.lora_batch, seed=seed,
    )
    return adapter


def prepare_endpoint(prior: Prior, sample: ShapeSample, cfg: MorphConfig, seed: int = 0) -> Endpoint:
    """LoRA-finetune both stages on ``sample`` and invert it to its noises."""
    cond = prior.condition(sample)
    lg = _finetune_stage(prior, "geom", sample, cond, cfg, seed)
    lt = _finetune_stage(prior, "tex", sample, cond, cfg, seed + 7919)
    z_G = invert(prior.geom, sample.points, cond, lora=single(lg))
    z_T = invert(prior.tex, sample.colors, cond, lora=single(lt)) - sample.points
    return Endpoint(sample, cond, lg, lt, NoisePair(z_G, z_T))


def endpoint_key(sample: ShapeSample, cfg: MorphConfig, seed: int) -> str:
    text = f"{sample.family}|{sample.params}|{sample.seed}|{seed}|{cfg.lora_steps}|{cfg.lora_rank}|{cfg.lora_alpha}|{cfg.lora_lr}|{cfg.lora_batch}"
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def save_endpoint(path, ep: Endpoint) -> None:
    tensors = {"noise.z_G": ep.noise.z_G, "noise.z_T": ep.noise.z_T}
    for stage, ad in (("geom", ep.lora_geom), ("tex", ep.lora_tex)):
        for name in ad.targets:
            tensors[f"{stage}.{name}.A"] = ad.A[name]
            tensors[f"{stage}.{name}.B"] = ad.B[name]
    config = {"rank": ep.lora_geom.rank, "alpha": repr(ep.lora_geom.alpha)}
    checkpoint.write(path, checkpoint.LORA_MAGIC, config, tensors)


def load_endpoint(path, prior: Prior, sample: ShapeSample) -> Endpoint:
    config, tensors = checkpoint.read(path, checkpoint.LORA_MAGIC)
    rank, alpha = int(config["rank"]), float(config["alpha"])
    adapters = {}
    for stage in ("geom", "tex"):
        pre = stage + "."
        A = {k[len(pre) : -2]: v for k, v in tensors.items() if k.startswith(pre) and k.endswith(".A")}
        B = {k[len(pre) : -2]: v for k, v in tensors.items() if k.startswith(pre) and k.endswith(".B")}
        adapters[stage] = LoraAdapter(A, B, rank, alpha)
    noise = NoisePair(tensors["noise.z_G"], tensors["noise.z_T"])
    return Endpoint(sample, prior.condition(sample), adapters["geom"], adapters["tex"], noise)


def get_endpoint(prior: Prior, sample: ShapeSample, cfg: MorphConfig, seed: int = 0, cache_dir=None) -> Endpoint:
    if cache_dir is None:
        return prepare_endpoint(prior, sample, cfg, seed)
    path = Path(cache_dir) / f"endpoint_{endpoint_key(sample, cfg, seed)}.mrpl"
    if path.exists():
        return load_endpoint(path, prior, sample)
    ep = prepare_endpoint(prior, sample, cfg, seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_endpoint(path, ep)
    return ep


def morph_frames(prior: Prior, src: Endpoint, tgt: Endpoint, alphas: list[float], cfg: MorphConfig) -> tuple[list[MorphFrame], Counters]:
    """Generate one frame per alpha from prepared endpoints."""
    steps = prior.cfg.steps
    cfg.validate(steps)
    F = len(alphas)
    a = torch.tensor(alphas, dtype=torch.float32)
    streams = cfg.needs_streams

    stage = "noise interpolation"
    cur_alpha = None
    try:
        z_G, z_T, conds = [], [], []
        for al in alphas:
            cur_alpha = al
            nz = interpolate_noise(src.noise, tgt.noise, al)
            z_G.append(nz.z_G)
            z_T.append(nz.z_T)
            conds.append(interpolate_condition(src.cond, tgt.cond, al))
        cur_alpha = None
        z_G, z_T, conds = torch.stack(z_G), torch.stack(z_T), torch.stack(conds)
        coefs = torch.stack([1 - a, a], dim=1)
        if streams:
            rep = lambda x: x[None].expand(F, *x.shape)  # noqa: E731
            z_G = torch.cat([rep(src.noise.z_G), rep(tgt.noise.z_G), z_G])
            z_T = torch.cat([rep(src.noise.z_T), rep(tgt.noise.z_T), z_T])
            conds = torch.cat([rep(src.cond), rep(tgt.cond), conds])
            coefs = coefs.repeat(3, 1)
        counters = Counters()

        stage = "geometry sampling"
        mech = StageMechanisms(cfg, "geom", a, prior.cfg.n_blocks, streams)
        points = sample(prior.geom, z_G, conds, mechanisms=mech, lora=LoraMix([src.lora_geom, tgt.lora_geom], coefs))
        counters.add(mech.counters)

        stage = "texture sampling"
        mech = StageMechanisms(cfg, "tex", a, prior.cfg.n_blocks, streams)
        colors = sample(prior.tex, points + z_T, conds, mechanisms=mech, lora=LoraMix([src.lora_tex, tgt.lora_tex], coefs))
        counters.add(mech.counters)
    except Exception as exc:
        where = f" (alpha={cur_alpha})" if cur_alpha is not None else f" (alphas={alphas})"
        raise MorphError(f"{stage} failed{where}: {exc}") from exc

    if streams:
        points, colors = points[2 * F :], colors[2 * F :]
    frames = [MorphFrame(al, points[i].clone(), colors[i].clone()) for i, al in enumerate(alphas)]
    return frames, counters


def morph(prior: Prior, src: ShapeSample, tgt: ShapeSample, cfg: MorphConfig, seed: int = 0, cache_dir=None) -> MorphSequence:
    """Full pipeline: finetune + invert both endpoints, then regenerate every
    frame of the alpha schedule."""
    try:
        ep_src = get_endpoint(prior, src, cfg, seed, cache_dir)
    except Exception as exc:
        raise MorphError(f"source preparation failed (alpha=0): {exc}") from exc
    try:
        ep_tgt = get_endpoint(prior, tgt, cfg, seed, cache_dir)
    except Exception as exc:
        raise MorphError(f"target preparation failed (alpha=1): {exc}") from exc
    alphas = alpha_schedule(cfg.n_frames, (cfg.beta_a, cfg.beta_b), cfg.include_endpoints, seed)
    frames, counters = morph_frames(prior, ep_src, ep_tgt, alphas, cfg)
    provenance = {
        "config_hash": cfg.hash(),
        "seed": seed,
        "src": f"{src.family}:{','.join(map(repr, src.params))}:{src.seed}",
        "tgt": f"{tgt.family}:{','.join(map(repr, tgt.params))}:{tgt.seed}",
    }
    return MorphSequence(frames, provenance, counters)
