import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from morphkit import shapes
from morphkit.numerics import Rng


def test_sphere_radius_one():
    s = shapes.generate("sphere", (1.0, 1.0), M=128, seed=3)
    assert (s.points.double().norm(dim=1) - 1).abs().max() < 1e-6
    assert s.points.shape == (128, 3) and s.colors.shape == (128, 3)


def test_box_points_on_faces():
    s = shapes.generate("box", (0.5, 0.5, 0.5), M=128, seed=0)
    a = s.points.double().abs()
    assert a.max() <= 0.5 + 1e-6
    assert ((a - 0.5).abs().min(dim=1).values < 1e-6).all()


@pytest.mark.parametrize("family", shapes.FAMILIES)
def test_generate_is_deterministic(family):
    a, b = shapes.generate(family, M=64, seed=4), shapes.generate(family, M=64, seed=4)
    assert torch.equal(a.points, b.points) and torch.equal(a.colors, b.colors)
    assert a.colors.min() >= 0 and a.colors.max() <= 1


def test_params_out_of_range():
    with pytest.raises(ValueError):
        shapes.generate("torus", (2.0, 0.2))
    with pytest.raises(ValueError):
        shapes.generate("octahedron")


def test_seed_only_jitters_lattice():
    a = shapes.generate("sphere", M=128, seed=0)
    b = shapes.generate("sphere", M=128, seed=1)
    assert 0 < shapes.chamfer(a.points, b.points) < 0.02


def test_coloring_matches_generator():
    s = shapes.generate("cone", M=128, seed=2)
    assert (shapes.coloring("cone", s.params, s.points) - s.colors).abs().max() < 1e-6


def test_manifest_round_trip(tmp_path):
    specs = shapes.build_corpus_specs(3, seed=1)
    shapes.write_manifest(tmp_path / "c.txt", specs)
    back = shapes.read_manifest(tmp_path / "c.txt")
    assert len(back) == 18
    assert [(s.family, s.seed) for s in back] == [(s.family, s.seed) for s in specs]
    assert np.allclose([s.params for s in back if s.family == "box"], [s.params for s in specs if s.family == "box"])


def test_condition_embedding():
    enc = shapes.ConditionEncoder(d_cond=16)
    a, b = shapes.generate("torus", M=32), shapes.generate("torus", M=32)
    ca, cb = shapes.condition_of(a, enc), shapes.condition_of(b, enc)
    assert ca.shape == (16,) and torch.equal(ca, cb)


def test_chamfer_hand_and_identity():
    assert shapes.chamfer(torch.zeros(1, 3), torch.tensor([[1.0, 0, 0]])) == pytest.approx(2.0)
    x = torch.randn(20, 3)
    assert shapes.chamfer(x, x) == 0.0


@given(st.integers(0, 10_000))
def test_chamfer_accelerated_matches_brute(seed):
    g = np.random.default_rng(seed)
    a, b = torch.from_numpy(g.normal(size=(64, 3))), torch.from_numpy(g.normal(size=(64, 3)))
    d = shapes.chamfer(a, b, accelerated=True)
    assert abs(d - shapes.chamfer_brute(a, b)) < 1e-9
    assert d >= 0 and abs(d - shapes.chamfer(b, a)) < 1e-12


def test_chamfer_batch_matches_loop():
    refs = torch.randn(5, 16, 3)
    x = torch.randn(16, 3)
    batch = shapes.chamfer_batch(x, refs)
    assert np.allclose(batch.numpy(), [shapes.chamfer_brute(x, r) for r in refs], atol=1e-9)


def test_random_params_in_range():
    rng = Rng(0)
    for fam in shapes.FAMILIES:
        for _ in range(20):
            p = shapes.random_params(fam, rng)
            for v, (lo, hi) in zip(p, shapes.PARAM_RANGES[fam]):
                assert lo <= v <= hi
