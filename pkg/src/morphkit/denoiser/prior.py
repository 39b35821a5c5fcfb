"""The two-stage prior: condition encoder, geometry model and texture model."""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields

import torch

from ..shapes import ConditionEncoder, ShapeSample, ShapeSpec, FAMILIES
from . import checkpoint
from .flow import TrainHyper, TrainResult, train
from .lora import LoraAdapter
from .model import Denoiser, DenoiserConfig

log = logging.getLogger(__name__)


@dataclass
class Corpus:
    points: torch.Tensor  # (N, M, 3)
    colors: torch.Tensor  # (N, M, 3)
    family_ids: torch.Tensor  # (N,)
    params: torch.Tensor  # (N, 3) normalised
    specs: list

    @classmethod
    def from_specs(cls, specs: list[ShapeSpec], M: int) -> "Corpus":
        if not specs:
            raise ValueError("empty corpus")
        samples = [s.build(M) for s in specs]
        return cls.from_samples(samples, specs)

    @classmethod
    def from_samples(cls, samples: list[ShapeSample], specs=None) -> "Corpus":
        return cls(
            points=torch.stack([s.points for s in samples]),
            colors=torch.stack([s.colors for s in samples]),
            family_ids=torch.tensor([s.family_id for s in samples]),
            params=torch.stack([s.param_vector() for s in samples]),
            specs=list(specs) if specs is not None else [None] * len(samples),
        )

    def __len__(self) -> int:
        return self.points.shape[0]


class Prior:
    def __init__(self, cfg: DenoiserConfig | None = None, seed: int = 0):
        self.cfg = cfg or DenoiserConfig()
        torch.manual_seed(seed)
        self.encoder = ConditionEncoder(self.cfg.d_cond, len(FAMILIES))
        self.geom = Denoiser(self.cfg)
        self.tex = Denoiser(self.cfg)
        self.eval()

    def eval(self) -> "Prior":
        for m in (self.encoder, self.geom, self.tex):
            m.eval()
            for p in m.parameters():
                p.requires_grad_(False)
        return self

    def condition(self, sample: ShapeSample) -> torch.Tensor:
        with torch.no_grad():
            return self.encoder(torch.tensor([sample.family_id]), sample.param_vector()[None])[0]

    # -- training ----------------------------------------------------------

    def fit(self, corpus: Corpus, geom_hyper: TrainHyper, tex_hyper: TrainHyper) -> tuple[TrainResult, TrainResult]:
        return self.fit_geometry(corpus, geom_hyper), self.fit_texture(corpus, tex_hyper)

    def fit_geometry(self, corpus: Corpus, hyper: TrainHyper) -> TrainResult:
        enc, model = self.encoder, self.geom

        def batch(gen, n):
            idx = torch.randint(0, len(corpus), (n,), generator=gen)
            x1 = corpus.points[idx]
            x0 = torch.randn(x1.shape, generator=gen)
            return x0, x1, enc(corpus.family_ids[idx], corpus.params[idx])

        params = list(model.parameters()) + list(enc.parameters())
        for m in (model, enc):
            m.train()
            for p in m.parameters():
                p.requires_grad_(True)
        try:
            return train(model, batch, hyper, params=params, label="geometry")
        finally:
            self.eval()

    def fit_texture(self, corpus: Corpus, hyper: TrainHyper) -> TrainResult:
        enc, model = self.encoder, self.tex

        def batch(gen, n):
            idx = torch.randint(0, len(corpus), (n,), generator=gen)
            pts = corpus.points[idx]
            x0 = pts + torch.randn(pts.shape, generator=gen)
            with torch.no_grad():
                cond = enc(corpus.family_ids[idx], corpus.params[idx])
            return x0, corpus.colors[idx], cond

        model.train()
        for p in model.parameters():
            p.requires_grad_(True)
        try:
            return train(model, batch, hyper, label="texture")
        finally:
            self.eval()

    # -- io ----------------------------------------------------------------

    def state(self) -> dict[str, torch.Tensor]:
        out = {}
        for prefix, m in (("encoder", self.encoder), ("geom", self.geom), ("tex", self.tex)):
            for k, v in m.state_dict().items():
                out[f"{prefix}.{k}"] = v
        return out

    def save(self, path) -> None:
        checkpoint.write(path, checkpoint.MODEL_MAGIC, self.cfg.to_dict(), self.state())

    @classmethod
    def load(cls, path) -> "Prior":
        config, tensors = checkpoint.read(path, checkpoint.MODEL_MAGIC)
        kwargs = {}
        for f in fields(DenoiserConfig):
            if f.name in config:
                kwargs[f.name] = int(config[f.name])
        prior = cls(DenoiserConfig(**kwargs))
        for prefix, m in (("encoder", prior.encoder), ("geom", prior.geom), ("tex", prior.tex)):
            sd = {k[len(prefix) + 1 :]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
            try:
                m.load_state_dict(sd)
            except RuntimeError as exc:
                raise checkpoint.CheckpointError(f"{path}: {exc}") from None
        return prior.eval()


def save_adapter(path, adapter: LoraAdapter, extra: dict | None = None) -> None:
    tensors = {}
    for name in adapter.targets:
        tensors[name + ".A"] = adapter.A[name]
        tensors[name + ".B"] = adapter.B[name]
    config = {"rank": adapter.rank, "alpha": repr(adapter.alpha)}
    config.update(extra or {})
    checkpoint.write(path, checkpoint.LORA_MAGIC, config, tensors)


def load_adapter(path) -> tuple[LoraAdapter, dict]:
    config, tensors = checkpoint.read(path, checkpoint.LORA_MAGIC)
    A = {k[:-2]: v for k, v in tensors.items() if k.endswith(".A")}
    B = {k[:-2]: v for k, v in tensors.items() if k.endswith(".B")}
    return LoraAdapter(A, B, int(config["rank"]), float(config["alpha"])), config
