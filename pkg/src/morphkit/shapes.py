"""Procedural corpus of colored point-cloud objects.

Every family is a parametric surface sampled on a fixed lattice over
(u, v) in [0, 1)^2: token ``i`` sits at ``u = (i + 0.5) / M`` and
``v = frac(i / phi + phase)``. The token order is therefore structured, so a
given index always lands on the same region of the surface. The per-sample
seed only shifts ``phase`` by a tiny amount (at most 0.004 of a turn).

Coloring functions (all map into [0, 1]^3 through a cosine hue wheel):

* sphere     -- hue follows height
* torus      -- hue follows the toroidal (major) angle
* box        -- one base hue per face, shaded by distance from the face center
* star_prism -- hue follows height, brightened toward the star tips
* cone       -- hue follows distance from the apex
* two_lobe   -- warm hues on the left lobe, cool hues on the right, shaded by height
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.spatial import cKDTree
from torch import nn

from .numerics import Rng

FAMILIES = ("sphere", "torus", "box", "star_prism", "cone", "two_lobe")
N_PARAMS = 3
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
COLOR_WEIGHT = 0.5

# (low, high) per parameter; unused slots are None and stay 0 in the vector
PARAM_RANGES: dict[str, tuple] = {
    "sphere": ((0.3, 1.0), (0.6, 1.0), None),  # radius, z-aspect
    "torus": ((0.45, 0.7), (0.12, 0.28), None),  # major radius, minor radius
    "box": ((0.3, 0.9), (0.3, 0.9), (0.3, 0.9)),  # half extents
    "star_prism": ((0.5, 0.9), (0.35, 0.7), (0.2, 0.8)),  # outer radius, inner ratio, half height
    "cone": ((0.4, 0.9), (0.6, 1.6), None),  # base radius, height
    "two_lobe": ((0.25, 0.45), (0.3, 0.55), None),  # lobe radius, center offset
}
DEFAULT_PARAMS: dict[str, tuple] = {
    "sphere": (0.7, 1.0),
    "torus": (0.6, 0.2),
    "box": (0.5, 0.5, 0.5),
    "star_prism": (0.8, 0.5, 0.5),
    "cone": (0.7, 1.2),
    "two_lobe": (0.35, 0.5),
}


@dataclass
class ShapeSample:
    points: torch.Tensor  # (M, 3) in [-1, 1]
    colors: torch.Tensor  # (M, 3) in [0, 1]
    family_id: int
    params: tuple
    seed: int

    @property
    def family(self) -> str:
        return FAMILIES[self.family_id]

    @property
    def M(self) -> int:
        return self.points.shape[0]

    def param_vector(self) -> torch.Tensor:
        return param_vector(self.family, self.params)


@dataclass
class ShapeSpec:
    """A corpus manifest record."""

    family: str
    params: tuple
    seed: int = 0
    extras: dict = field(default_factory=dict)

    def build(self, M: int) -> ShapeSample:
        return generate(self.family, self.params, M, self.seed)


def family_index(family: str) -> int:
    try:
        return FAMILIES.index(family)
    except ValueError:
        raise ValueError(f"unknown shape family {family!r}") from None


def _check_params(family: str, params) -> tuple:
    ranges = PARAM_RANGES[family]
    n = sum(r is not None for r in ranges)
    params = tuple(float(p) for p in params)
    if len(params) != n:
        raise ValueError(f"{family} takes {n} params, got {len(params)}")
    for p, r in zip(params, ranges):
        lo, hi = r
        if not lo - 1e-12 <= p <= hi + 1e-12:
            raise ValueError(f"{family} param {p} outside [{lo}, {hi}]")
    return params


def param_vector(family: str, params) -> torch.Tensor:
    """Params rescaled to [-1, 1], zero padded to ``N_PARAMS``."""
    out = torch.zeros(N_PARAMS, dtype=torch.float32)
    for i, (p, r) in enumerate(zip(params, PARAM_RANGES[family])):
        lo, hi = r
        out[i] = 2.0 * (p - lo) / (hi - lo) - 1.0
    return out


def _hue(h: np.ndarray, brightness: np.ndarray | float = 1.0) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)[:, None]
    rgb = 0.5 + 0.5 * np.cos(2.0 * np.pi * (h + np.array([0.0, 1.0 / 3.0, 2.0 / 3.0])))
    rgb = (0.15 + 0.7 * rgb) * np.reshape(brightness, (-1, 1))
    return np.clip(rgb, 0.0, 1.0)


def _sphere_dirs(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    z = 1.0 - 2.0 * u
    rho = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = 2.0 * np.pi * v
    return np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)


def _star_outline(outer: float, inner: float, s: np.ndarray):
    """Point on a closed 5-point star polygon at perimeter fraction ``s``."""
    k = 10
    ang = np.pi / 2 + 2 * np.pi * np.arange(k) / k
    rad = np.where(np.arange(k) % 2 == 0, outer, outer * inner)
    verts = np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)
    edges = np.roll(verts, -1, axis=0) - verts
    lens = np.linalg.norm(edges, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(lens)])
    pos = s * cum[-1]
    idx = np.clip(np.searchsorted(cum, pos, side="right") - 1, 0, k - 1)
    frac = (pos - cum[idx]) / lens[idx]
    xy = verts[idx] + frac[:, None] * edges[idx]
    tip = np.where(idx % 2 == 0, 1.0 - frac, frac)  # 1 at outer tips
    return xy, tip


def _surface(family: str, params: tuple, u: np.ndarray, v: np.ndarray):
    if family == "sphere":
        r, aspect = params
        d = _sphere_dirs(u, v)
        pts = r * d * np.array([1.0, 1.0, aspect])
        col = _hue(0.55 + 0.3 * d[:, 2])
    elif family == "torus":
        big, small = params
        phi = 2 * np.pi * u
        theta = 2 * np.pi * v
        ring = big + small * np.cos(theta)
        pts = np.stack([ring * np.cos(phi), ring * np.sin(phi), small * np.sin(theta)], axis=1)
        col = _hue(u)
    elif family == "box":
        ext = np.array(params)
        d = _sphere_dirs(u, v)
        scale = 1.0 / np.max(np.abs(d) / ext, axis=1)
        pts = d * scale[:, None]
        face = np.argmax(np.abs(pts) / ext, axis=1)
        sign = np.sign(pts[np.arange(len(pts)), face])
        face_id = face * 2 + (sign > 0)
        rel = np.abs(pts) / ext
        rel[np.arange(len(pts)), face] = 0.0
        shade = 1.0 - 0.3 * np.max(rel, axis=1)
        col = _hue(face_id / 6.0, shade)
    elif family == "star_prism":
        outer, inner, half_h = params
        z = half_h * (1.0 - 2.0 * u)
        xy, tip = _star_outline(outer, inner, v)
        pts = np.concatenate([xy, z[:, None]], axis=1)
        col = _hue(0.1 + 0.15 * z / half_h, 0.75 + 0.25 * tip)
    elif family == "cone":
        radius, height = params
        s = np.sqrt(u)
        phi = 2 * np.pi * v
        rho = s * radius
        z = height / 2.0 - s * height
        pts = np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)
        col = _hue(0.75 + 0.2 * s)
    elif family == "two_lobe":
        r, offset = params
        left = u < 0.5
        uu = np.where(left, u * 2.0, u * 2.0 - 1.0)
        d = _sphere_dirs(uu, v)
        cx = np.where(left, -offset, offset)
        pts = r * d + np.stack([cx, np.zeros_like(cx), np.zeros_like(cx)], axis=1)
        col = _hue(np.where(left, 0.0, 0.5) + 0.08 * d[:, 2])
    else:
        raise ValueError(f"unknown shape family {family!r}")
    return pts, col


def lattice(M: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    phase = 0.008 * (Rng(seed).uniform(1)[0] - 0.5)
    i = np.arange(M, dtype=np.float64)
    u = (i + 0.5) / M
    v = np.mod(i * GOLDEN + phase, 1.0)
    return u, v


def generate(family: str, params=None, M: int = 128, seed: int = 0) -> ShapeSample:
    fid = family_index(family)
    params = _check_params(family, DEFAULT_PARAMS[family] if params is None else params)
    if M < 2:
        raise ValueError("M must be at least 2")
    u, v = lattice(M, seed)
    pts, col = _surface(family, params, u, v)
    pts = np.clip(pts, -1.0, 1.0)
    col = np.clip(col, 0.0, 1.0)
    return ShapeSample(
        points=torch.from_numpy(pts).to(torch.float32),
        colors=torch.from_numpy(col).to(torch.float32),
        family_id=fid,
        params=params,
        seed=int(seed),
    )


def coloring(family: str, params, points: torch.Tensor, M: int | None = None) -> torch.Tensor:
    """Ground-truth colors at the lattice positions nearest to ``points``.

    Used to score generated colors: each generated point is matched to the
    closest point of the clean sample and inherits its color.
    """
    ref = generate(family, params, M or points.shape[0], 0)
    tree = cKDTree(ref.points.numpy().astype(np.float64))
    _, idx = tree.query(points.detach().numpy().astype(np.float64))
    return ref.colors[torch.as_tensor(idx)]


def random_params(family: str, rng: Rng) -> tuple:
    ranges = [r for r in PARAM_RANGES[family] if r is not None]
    u = rng.uniform(len(ranges))
    return tuple(float(round(lo + (hi - lo) * x, 6)) for (lo, hi), x in zip(ranges, u))


def build_corpus_specs(per_family: int = 256, seed: int = 0, families=FAMILIES) -> list[ShapeSpec]:
    rng = Rng(seed)
    specs = []
    for fam in families:
        for i in range(per_family):
            params = random_params(fam, rng)
            specs.append(ShapeSpec(fam, params, int(rng.integers(0, 2**31 - 1, 1)[0])))
    return specs


# ---------------------------------------------------------------------------
# manifest io


def write_manifest(path, specs: list[ShapeSpec]) -> None:
    lines = []
    for s in specs:
        lines.append(f"{s.family} {' '.join(repr(float(p)) for p in s.params)} {s.seed}")
    with open(path, "w") as fh:
        fh.write("# family params... seed\n")
        fh.write("\n".join(lines) + "\n")


def read_manifest(path) -> list[ShapeSpec]:
    specs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) < 2:
                raise ValueError(f"{path}:{lineno}: expected 'family params... seed'")
            fam = parts[0]
            family_index(fam)
            params = tuple(float(p) for p in parts[1:-1])
            spec = ShapeSpec(fam, _check_params(fam, params), int(parts[-1]))
            specs.append(spec)
    if not specs:
        raise ValueError(f"{path}: empty manifest")
    return specs


# ---------------------------------------------------------------------------
# conditioning


class ConditionEncoder(nn.Module):
    """Family table plus a linear projection of the normalised params."""

    def __init__(self, d_cond: int = 16, n_families: int = len(FAMILIES)):
        super().__init__()
        self.table = nn.Embedding(n_families, d_cond)
        self.proj = nn.Linear(N_PARAMS, d_cond, bias=False)
        nn.init.normal_(self.table.weight, std=1.0)
        nn.init.normal_(self.proj.weight, std=0.3)

    def forward(self, family_ids: torch.Tensor, params: torch.Tensor) -> torch.Tensor:
        return self.table(family_ids) + self.proj(params)


def condition_of(sample: ShapeSample, encoder: ConditionEncoder) -> torch.Tensor:
    if not 0 <= sample.family_id < encoder.table.num_embeddings:
        raise ValueError(f"family id {sample.family_id} unknown to the encoder")
    with torch.no_grad():
        fid = torch.tensor([sample.family_id])
        return encoder(fid, sample.param_vector()[None])[0]


# ---------------------------------------------------------------------------
# chamfer


def _as_f64(x) -> torch.Tensor:
    x = torch.as_tensor(x)
    return x.detach().to(torch.float64)


def colored(points: torch.Tensor, colors: torch.Tensor, weight: float = COLOR_WEIGHT) -> torch.Tensor:
    return torch.cat([_as_f64(points), weight * _as_f64(colors)], dim=-1)


def chamfer_brute(a, b) -> float:
    a, b = _as_f64(a), _as_f64(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("chamfer of an empty point set")
    d = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1).sqrt()
    return float(d.min(dim=1).values.mean() + d.min(dim=0).values.mean())


def chamfer(a, b, accelerated: bool = False) -> float:
    """Symmetric chamfer: mean nearest distance A->B plus B->A."""
    if not accelerated:
        return chamfer_brute(a, b)
    a, b = _as_f64(a).numpy(), _as_f64(b).numpy()
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer of an empty point set")
    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return float(da.mean() + db.mean())


def chamfer_batch(x: torch.Tensor, refs: torch.Tensor) -> torch.Tensor:
    """Chamfer of one set ``x`` (M, D) against a stack ``refs`` (N, M', D)."""
    x, refs = _as_f64(x), _as_f64(refs)
    d = torch.cdist(x[None].expand(refs.shape[0], -1, -1), refs, compute_mode="donot_use_mm_for_euclid_dist")
    return d.min(dim=2).values.mean(dim=1) + d.min(dim=1).values.mean(dim=1)
