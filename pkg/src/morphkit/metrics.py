"""Smoothness metrics and the token/frequency diagnostics.

Perceptual distances between rendered frames are replaced by a chamfer
distance over colored points: each point is ``[x, y, z, 0.5 r, 0.5 g, 0.5 b]``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .denoiser.flow import step_time
from .denoiser.model import Hooks, velocity
from .morphing import MorphSequence, low_band
from .numerics import Rng, gaussian, rfft_array
from .shapes import COLOR_WEIGHT, chamfer, chamfer_batch, colored

REPORT_HEADER = "# distances: colored-point chamfer (xyz + 0.5*rgb) standing in for rendered perceptual loss"


def frame_distances(seq: MorphSequence, weight: float = COLOR_WEIGHT) -> list[float]:
    feats = [colored(f.points, f.colors, weight) for f in seq.frames]
    return [chamfer(feats[i], feats[i + 1]) for i in range(len(feats) - 1)]


def ppl_pdv(seq: MorphSequence, weight: float = COLOR_WEIGHT) -> tuple[float, float]:
    """Path length (sum) and population variance of consecutive-frame distances."""
    if len(seq.frames) < 2:
        raise ValueError("need at least two frames")
    d = np.array(frame_distances(seq, weight))
    return float(d.sum()), float(d.var())


def plausibility(points: torch.Tensor, colors: torch.Tensor, corpus_points: torch.Tensor, corpus_colors: torch.Tensor) -> float:
    """Colored chamfer to the closest corpus object."""
    if corpus_points.shape[0] == 0:
        raise ValueError("empty corpus")
    refs = torch.cat([corpus_points.double(), COLOR_WEIGHT * corpus_colors.double()], dim=-1)
    return float(chamfer_batch(colored(points, colors), refs).min())


@dataclass
class MetricReport:
    ppl: float
    pdv: float
    endpoint_src_chamfer: float
    endpoint_tgt_chamfer: float
    distances: list = field(default_factory=list)
    plausibility: list = field(default_factory=list)
    alphas: list = field(default_factory=list)
    config_hash: str = ""
    seeds: str = ""
    counters: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_text(self) -> str:
        rows = [
            ("frames", len(self.alphas)),
            ("ppl", _fmt(self.ppl)),
            ("pdv", _fmt(self.pdv)),
            ("endpoint_src_chamfer", _fmt(self.endpoint_src_chamfer)),
            ("endpoint_tgt_chamfer", _fmt(self.endpoint_tgt_chamfer)),
            ("alphas", ",".join(_fmt(a) for a in self.alphas)),
            ("distances", ",".join(_fmt(d) for d in self.distances)),
            ("plausibility", ",".join(_fmt(p) for p in self.plausibility)),
            ("config_hash", self.config_hash),
            ("seeds", self.seeds),
        ]
        rows += [(f"counter_{k}", v) for k, v in sorted(self.counters.items())]
        rows += sorted(self.extra.items())
        return REPORT_HEADER + "\n" + "".join(f"{k}={v}\n" for k, v in rows)


def _fmt(x: float) -> str:
    return f"{float(x):.9g}"


def report(seq: MorphSequence, src=None, tgt=None, corpus=None) -> MetricReport:
    ppl, pdv = ppl_pdv(seq)
    first, last = seq.frames[0], seq.frames[-1]
    e_src = chamfer(first.points, src.points) if src is not None else float("nan")
    e_tgt = chamfer(last.points, tgt.points) if tgt is not None else float("nan")
    plaus = []
    if corpus is not None:
        plaus = [plausibility(f.points, f.colors, corpus.points, corpus.colors) for f in seq.frames]
    return MetricReport(
        ppl=ppl,
        pdv=pdv,
        endpoint_src_chamfer=e_src,
        endpoint_tgt_chamfer=e_tgt,
        distances=frame_distances(seq),
        plausibility=plaus,
        alphas=seq.alphas,
        config_hash=str(seq.provenance.get("config_hash", "")),
        seeds=str(seq.provenance.get("seed", "")),
        counters=vars(seq.counters).copy(),
    )


# ---------------------------------------------------------------------------
# diagnostics


class _LastBlockTap(Hooks):
    """Keeps the residual stream leaving the final block."""

    def __init__(self, n_blocks: int):
        self.n_blocks = n_blocks
        self.h = None

    def after_block(self, block, h):
        if block == self.n_blocks - 1:
            self.h = h.detach().clone()
        return h


class _TraceSampler:
    def __init__(self, model):
        self.model = model

    @torch.no_grad()
    def run(self, z0, cond):
        """Euler sampling that returns the final state and per-step hidden tokens."""
        steps = self.model.cfg.steps
        tap = _LastBlockTap(self.model.cfg.n_blocks)
        z = z0.clone()
        hidden = []
        states = []
        for k in range(1, steps + 1):
            v = velocity(self.model, z, step_time(k, steps), cond, hooks=tap)
            hidden.append(tap.h)
            states.append(z)
            z = z + v / steps
        return z, hidden, states


def _csv(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([r[0]] + [_fmt(x) for x in r[1:]])
    return buf.getvalue()


def token_distance_trace(prior_a, prior_b, sample_a, sample_b, aligned: bool, seeds, seed_offset: int = 7777):
    """Per-step token distances between two generations.

    aligned=True: both generations use the same noise; the value is the mean
    ||h_j^A - h_j^B|| over token positions j (one curve per stage).
    aligned=False: B uses a different noise; each A token is paired with its
    nearest B token in hidden space and the value is the mean 3D distance
    between the paired tokens' final points.

    Returns (csv_text, rows) with rows ``[step, geom, tex]``.
    """
    if prior_a.cfg != prior_b.cfg:
        raise ValueError("the two priors have different configs")
    cfg = prior_a.cfg
    M, steps = cfg.M, cfg.steps
    acc = np.zeros((steps, 2))
    for s in seeds:
        za = gaussian(Rng(s), (2, M, 3))
        zb = za if aligned else gaussian(Rng(s + seed_offset), (2, M, 3))
        ca, cb = prior_a.condition(sample_a), prior_b.condition(sample_b)
        pa, ha_g, _ = _TraceSampler(prior_a.geom).run(za[0], ca)
        pb, hb_g, _ = _TraceSampler(prior_b.geom).run(zb[0], cb)
        _, ha_t, _ = _TraceSampler(prior_a.tex).run(pa + za[1], ca)
        _, hb_t, _ = _TraceSampler(prior_b.tex).run(pb + zb[1], cb)
        for k in range(steps):
            for col, (ha, hb) in enumerate(((ha_g[k], hb_g[k]), (ha_t[k], hb_t[k]))):
                ha_k, hb_k = ha[0].double(), hb[0].double()
                if aligned:
                    acc[k, col] += float((ha_k - hb_k).norm(dim=-1).mean())
                else:
                    nn = torch.cdist(ha_k, hb_k).argmin(dim=1)
                    acc[k, col] += float((pa.double() - pb.double()[nn]).norm(dim=-1).mean())
    acc /= max(1, len(seeds))
    rows = [[k + 1, acc[k, 0], acc[k, 1]] for k in range(steps)]
    return _csv(["step", "value_geom", "value_tex"], rows), rows


def band_magnitudes(z: torch.Tensor, omega0: float) -> tuple[float, float]:
    """Mean |coefficient| of the token-axis spectrum below / at-or-above omega0."""
    x = np.swapaxes(z.detach().double().numpy(), -1, -2)
    mag = np.abs(rfft_array(x))
    low = low_band(z.shape[-2], omega0)
    return float(mag[..., low].mean()), float(mag[..., ~low].mean())


def frequency_trace(model, cond, seeds, omega0: float = 0.1 * math.pi, velocity_fn=None):
    """Per-step low/high band magnitudes of the running latent during sampling.

    Returns (csv_text, rows, summary) where summary holds the fraction of steps
    whose low-band change is smaller than the high-band change.
    """
    cfg = model.cfg
    steps = cfg.steps
    acc = np.zeros((steps, 2))
    for s in seeds:
        z = gaussian(Rng(s), (cfg.M, cfg.channels))
        with torch.no_grad():
            for k in range(1, steps + 1):
                acc[k - 1] += band_magnitudes(z, omega0)
                if velocity_fn is None:
                    v = velocity(model, z, step_time(k, steps), cond)
                else:
                    v = velocity_fn(z, step_time(k, steps))
                z = z + v / steps
    acc /= max(1, len(seeds))
    rows = [[k + 1, acc[k, 0], acc[k, 1]] for k in range(steps)]
    d_low = np.abs(np.diff(acc[:, 0]))
    d_high = np.abs(np.diff(acc[:, 1]))
    summary = {
        "low_varies_less_fraction": float((d_low < d_high).mean()) if len(d_low) else 0.0,
        "low_total_variation": float(d_low.sum()),
        "high_total_variation": float(d_high.sum()),
    }
    return _csv(["step", "value_low", "value_high"], rows), rows, summary
