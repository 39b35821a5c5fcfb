import math

import pytest
import torch

from morphkit.denoiser import checkpoint
from morphkit.denoiser.flow import (
    NoisePair,
    TrainHyper,
    cascade_generate,
    invert,
    lora_finetune,
    sample,
    single,
    train,
)
from morphkit.denoiser.lora import LoraAdapter, lora_interpolate
from morphkit.denoiser.model import Attention, Denoiser, DenoiserConfig, LoraMix, velocity
from morphkit.denoiser.prior import Prior, load_adapter, save_adapter
from morphkit.morphing import AttentionTap


class ConstantField(Denoiser):
    """Velocity that ignores its input."""

    def __init__(self, cfg, value):
        super().__init__(cfg)
        self.value = value

    def forward(self, z, t, cond, lora=None, hooks=None):
        return torch.zeros_like(z) + self.value


def _inputs(cfg, b=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    return (
        torch.randn(b, cfg.M, cfg.channels, generator=g),
        torch.rand(b, generator=g),
        torch.randn(b, cfg.d_cond, generator=g),
    )


def _randomize_head(model):
    torch.nn.init.normal_(model.out_proj.weight, std=0.5)


def test_config_validation():
    with pytest.raises(ValueError):
        DenoiserConfig(d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        DenoiserConfig(M=0)


def test_zero_head_gives_zero_velocity(tiny_cfg):
    torch.manual_seed(0)
    model = Denoiser(tiny_cfg)
    z = torch.randn(tiny_cfg.M, 3)
    v = velocity(model, z, 0.3, torch.randn(tiny_cfg.d_cond))
    assert v.shape == (tiny_cfg.M, 3) and torch.equal(v, torch.zeros_like(v))
    with pytest.raises(ValueError):
        velocity(model, z, 1.5, torch.randn(tiny_cfg.d_cond))


def test_zero_adapter_and_noop_tap_leave_output_unchanged(tiny_cfg):
    torch.manual_seed(1)
    model = Denoiser(tiny_cfg).double()
    _randomize_head(model)
    z, t, c = (x.double() for x in _inputs(tiny_cfg))
    ref = model(z, t, c)
    ad = LoraAdapter.init(model, rank=4, alpha=8, seed=0).to(torch.float64)
    for name in ad.targets:
        ad.A[name].zero_()
        ad.B[name].normal_()
    assert torch.equal(model(z, t, c, lora=LoraMix([ad], torch.ones(2, 1, dtype=torch.float64))), ref)

    class NoopWrite(AttentionTap):
        def attend(self, block, kind, q, k, v):
            self.write(block, kind, k, v)
            return super().attend(block, kind, q, k, v)

    assert (model(z, t, c, hooks=NoopWrite()) - ref).abs().max() < 1e-12


def test_single_head_attention_by_hand():
    attn = Attention(2, 1).double()
    with torch.no_grad():
        for lin in (attn.to_q, attn.to_k, attn.to_v, attn.to_out):
            lin.weight.copy_(torch.eye(2))
            lin.bias.zero_()
        attn.to_v.weight.copy_(torch.tensor([[2.0, 0.0], [1.0, 1.0]]))
    x = torch.tensor([[[1.0, 0.0], [0.0, 1.0]]], dtype=torch.float64)
    out = attn(x, x, prefix="p", block=0, kind="self")
    # scores are I/sqrt(2); value rows are [2, 1] and [0, 1]
    p = math.exp(1 / math.sqrt(2)) / (math.exp(1 / math.sqrt(2)) + 1)
    expect = torch.tensor([[p * 2, 1.0], [(1 - p) * 2, 1.0]], dtype=torch.float64)
    assert (out[0] - expect).abs().max() < 1e-10


def test_sample_and_invert_with_constant_fields(tiny_cfg):
    z0 = torch.randn(tiny_cfg.M, 3)
    c = torch.zeros(tiny_cfg.d_cond)
    zero = ConstantField(tiny_cfg, 0.0)
    assert torch.equal(sample(zero, z0, c), z0) and torch.equal(invert(zero, z0, c), z0)
    const = ConstantField(tiny_cfg, 0.75)
    assert (sample(const, z0, c) - (z0 + 0.75)).abs().max() < 1e-5
    assert (invert(const, z0, c) - (z0 - 0.75)).abs().max() < 1e-5


def test_cascade_with_zero_texture(tiny_cfg):
    torch.manual_seed(2)
    geom = Denoiser(tiny_cfg)
    _randomize_head(geom)
    tex = Denoiser(tiny_cfg)
    noise = NoisePair(torch.randn(tiny_cfg.M, 3), torch.randn(tiny_cfg.M, 3))
    c = torch.randn(tiny_cfg.d_cond)
    pts, cols = cascade_generate(geom, tex, noise, c)
    assert torch.equal(cols, pts + noise.z_T)
    pts2, cols2 = cascade_generate(geom, tex, noise, c)
    assert torch.equal(pts, pts2) and torch.equal(cols, cols2)


def _single_datum_batches(cfg, x_star):
    c = torch.zeros(cfg.d_cond)

    def batch(gen, n):
        return torch.randn(n, cfg.M, 3, generator=gen), x_star.expand(n, -1, -1), c.expand(n, -1)

    return batch


def test_train_lr_zero_and_determinism(tiny_cfg):
    x_star = torch.rand(tiny_cfg.M, 3)
    batch = _single_datum_batches(tiny_cfg, x_star)
    torch.manual_seed(0)
    m = Denoiser(tiny_cfg)
    before = {k: v.clone() for k, v in m.state_dict().items()}
    train(m, batch, TrainHyper(lr=0.0, batches=5, warmup=0, log_every=0))
    assert all(torch.equal(before[k], v) for k, v in m.state_dict().items())
    runs = []
    for _ in range(2):
        torch.manual_seed(0)
        runs.append(train(Denoiser(tiny_cfg), batch, TrainHyper(lr=1e-3, batches=20, log_every=0)).losses)
    assert runs[0] == runs[1]


@pytest.fixture(scope="module")
def single_datum():
    cfg = DenoiserConfig(M=16, d_model=32, n_blocks=2, n_heads=2, d_cond=8, steps=50, n_time_freqs=8)
    x_star = torch.rand(cfg.M, 3, generator=torch.Generator().manual_seed(9)) * 2 - 1
    torch.manual_seed(0)
    model = Denoiser(cfg)
    res = train(model, _single_datum_batches(cfg, x_star), TrainHyper(lr=1e-3, batches=2000, batch_size=16, log_every=0))
    model.eval().requires_grad_(False)
    return cfg, model, x_star, res


def test_single_datum_training_converges(single_datum):
    cfg, model, x_star, res = single_datum
    assert res.final < 0.1 * res.initial
    z = torch.randn(4000, cfg.M, 3, generator=torch.Generator().manual_seed(1))
    with torch.no_grad():
        v = velocity(model, z, 0.0, torch.zeros(cfg.d_cond))
    # E[x* - z] = x* for zero-mean z
    assert (v.mean(0) - x_star).abs().mean() < 0.1


def test_lora_finetune_properties(single_datum):
    cfg, model, x_star, _ = single_datum
    c = torch.zeros(cfg.d_cond)
    noise = lambda gen, n: torch.randn(n, cfg.M, 3, generator=gen)  # noqa: E731
    ad0, _ = lora_finetune(model, noise, x_star, c, steps=0, rank=4, alpha=8)
    assert all(torch.equal(d, torch.zeros_like(d)) for d in ad0.deltas().values())
    z = torch.randn(3, cfg.M, 3)
    ref = velocity(model, z, 0.4, c)
    target = torch.rand(cfg.M, 3) * 2 - 1
    ad, losses = lora_finetune(model, noise, target, c, steps=600, rank=4, alpha=8, lr=3e-3)
    assert torch.equal(velocity(model, z, 0.4, c), ref)
    assert all(not p.requires_grad for p in model.parameters())
    base = sample(model, z[0], c)
    tuned = sample(model, z[0], c, lora=single(ad))
    from morphkit.shapes import chamfer

    assert chamfer(tuned, target) < 0.5 * chamfer(base, target)


def test_lora_interpolate_by_hand(tiny_cfg):
    torch.manual_seed(3)
    model = Denoiser(tiny_cfg)
    a = LoraAdapter.init(model, rank=1, alpha=1, seed=0)
    b = LoraAdapter.init(model, rank=1, alpha=1, seed=1)
    for ad in (a, b):
        for n in ad.targets:
            ad.B[n].normal_()
    for al, ref in ((0.0, a), (1.0, b)):
        mixed = lora_interpolate(a, b, al)
        assert all(torch.equal(mixed.delta(n), ref.delta(n)) for n in a.targets)
    half = lora_interpolate(a, b, 0.5)
    n = a.targets[0]
    by_hand = 0.5 * (a.B[n] @ a.A[n]) + 0.5 * (b.B[n] @ b.A[n])
    assert (half.delta(n) - by_hand).abs().max() < 1e-6
    with pytest.raises(ValueError):
        lora_interpolate(a, LoraAdapter.init(model, rank=2), 0.5)


def test_lora_mix_matches_interpolated_adapter(tiny_cfg):
    torch.manual_seed(4)
    model = Denoiser(tiny_cfg).double()
    _randomize_head(model)
    a = LoraAdapter.init(model, rank=2, alpha=4, seed=0).to(torch.float64)
    b = LoraAdapter.init(model, rank=2, alpha=4, seed=1).to(torch.float64)
    for ad in (a, b):
        for n in ad.targets:
            ad.B[n].normal_(std=0.2)
    z, t, c = (x.double() for x in _inputs(tiny_cfg, b=1))
    mixed = model(z, t, c, lora=LoraMix([a, b], torch.tensor([[0.3, 0.7]], dtype=torch.float64)))
    via = model(z, t, c, lora=LoraMix([lora_interpolate(a, b, 0.7)], torch.ones(1, 1, dtype=torch.float64)))
    assert (mixed - via).abs().max() < 1e-12


def test_checkpoint_round_trip_and_errors(tmp_path, tiny_cfg):
    prior = Prior(tiny_cfg, seed=5)
    path = tmp_path / "p.mrph"
    prior.save(path)
    back = Prior.load(path)
    assert back.cfg == tiny_cfg
    assert all(torch.equal(v, back.state()[k]) for k, v in prior.state().items())
    prior.save(tmp_path / "q.mrph")
    assert path.read_bytes() == (tmp_path / "q.mrph").read_bytes()
    raw = bytearray(path.read_bytes())
    raw[4] = 9
    (tmp_path / "v.mrph").write_bytes(bytes(raw))
    with pytest.raises(checkpoint.CheckpointError, match="version"):
        Prior.load(tmp_path / "v.mrph")
    with pytest.raises(checkpoint.CheckpointError, match="magic"):
        checkpoint.read(path, checkpoint.LORA_MAGIC)
    (tmp_path / "t.mrph").write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(checkpoint.CheckpointError):
        Prior.load(tmp_path / "t.mrph")

    ad = LoraAdapter.init(prior.geom, rank=3, alpha=6, seed=2)
    save_adapter(tmp_path / "a.mrpl", ad)
    ad2, cfg = load_adapter(tmp_path / "a.mrpl")
    assert ad2.rank == 3 and ad2.alpha == 6.0
    assert all(torch.equal(ad.A[n], ad2.A[n]) for n in ad.targets)
