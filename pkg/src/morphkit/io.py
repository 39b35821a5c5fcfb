"""PLY point clouds, key=value config files and shape spec strings."""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
import torch

from .shapes import ShapeSpec, _check_params, family_index


def write_ply(path, points: torch.Tensor, colors: torch.Tensor) -> None:
    """ASCII PLY: float x y z, uchar red green blue."""
    pts = np.asarray(points.detach().cpu().numpy(), dtype=np.float32)
    rgb = np.clip(np.rint(np.asarray(colors.detach().cpu().numpy(), dtype=np.float64) * 255.0), 0, 255).astype(int)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(pts)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    for p, c in zip(pts, rgb):
        lines.append(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {c[0]} {c[1]} {c[2]}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path) -> tuple[torch.Tensor, torch.Tensor]:
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n = None
    props = []
    body = None
    for i, line in enumerate(text[1:], 1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format" and parts[1] != "ascii":
            raise ValueError(f"{path}: only ASCII PLY is supported")
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts[0] == "property":
            props.append(parts[-1])
        elif parts[0] == "end_header":
            body = i + 1
            break
    if n is None or body is None:
        raise ValueError(f"{path}: malformed header")
    rows = np.array([[float(x) for x in text[body + j].split()] for j in range(n)], dtype=np.float64).reshape(n, -1)
    col = {name: rows[:, i] for i, name in enumerate(props)}
    pts = np.stack([col["x"], col["y"], col["z"]], axis=1)
    if all(k in col for k in ("red", "green", "blue")):
        rgb = np.stack([col["red"], col["green"], col["blue"]], axis=1) / 255.0
    else:
        rgb = np.zeros_like(pts)
    return torch.from_numpy(pts).to(torch.float32), torch.from_numpy(rgb).to(torch.float32)


def read_kv(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def kv_text(kv: dict) -> str:
    return "".join(f"{k}={kv[k]}\n" for k in sorted(kv))


def kv_hash(kv: dict) -> str:
    return hashlib.sha256(kv_text(kv).encode()).hexdigest()[:16]


def parse_shape(text: str) -> ShapeSpec:
    """``family[:p1,p2,...[:seed]]``, e.g. ``torus:0.6,0.2:0``."""
    parts = text.strip().split(":")
    family = parts[0]
    family_index(family)
    from .shapes import DEFAULT_PARAMS

    params = DEFAULT_PARAMS[family]
    if len(parts) > 1 and parts[1]:
        params = tuple(float(p) for p in parts[1].split(","))
    seed = int(parts[2]) if len(parts) > 2 and parts[2] else 0
    return ShapeSpec(family, _check_params(family, params), seed)


def format_shape(spec: ShapeSpec) -> str:
    return f"{spec.family}:{','.join(repr(float(p)) for p in spec.params)}:{spec.seed}"


def read_pairs(path) -> list[tuple[ShapeSpec, ShapeSpec]]:
    pairs = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            a, b = line.split()
            pairs.append((parse_shape(a), parse_shape(b)))
    return pairs
