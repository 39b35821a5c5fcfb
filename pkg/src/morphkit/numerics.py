"""Dense tensor helpers, seeded noise, radix-2 FFT and slerp.

Tensors are plain ``torch.Tensor`` objects; autograd provides the reverse
mode. The FFT, slerp and sampling helpers work in float64 and never carry
gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F


class NonFiniteError(FloatingPointError):
    """Raised when NaN or Inf shows up in a checked tensor."""


def check_finite(x: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not bool(torch.isfinite(x).all()):
        raise NonFiniteError(f"non-finite values in {what}")
    return x


# ---------------------------------------------------------------------------
# differentiable ops


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def softmax_rows(x: torch.Tensor) -> torch.Tensor:
    """Row-wise softmax over the last axis, stabilised by the row max."""
    check_finite(x, "softmax input")
    shifted = x - x.amax(dim=-1, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=-1, keepdim=True)


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    d = x.shape[-1]
    if d == 0:
        raise ValueError("layer_norm over an empty axis")
    if eps <= 0:
        raise ValueError("eps must be positive")
    return F.layer_norm(x, (d,), gain, bias, eps)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x, approximate="tanh")


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """softmax(q k^T / sqrt(d_k)) v over the last two axes."""
    scores = matmul(q, k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
    return matmul(softmax_rows(scores), v)


def mse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return ((pred - target) ** 2).mean()


def grad_check(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, h: float = 1e-5) -> float:
    """Max relative error between autograd and central differences.

    ``f`` must map a float64 tensor shaped like ``x`` to a scalar.
    """
    x = x.detach().to(torch.float64).clone()
    xr = x.clone().requires_grad_(True)
    out = f(xr)
    check_finite(out, "grad_check objective")
    (analytic,) = torch.autograd.grad(out, xr)
    analytic = analytic.reshape(-1)
    flat = x.reshape(-1)
    worst = 0.0
    with torch.no_grad():
        for i in range(flat.numel()):
            plus = flat.clone()
            plus[i] += h
            minus = flat.clone()
            minus[i] -= h
            fp = f(plus.reshape(x.shape))
            fm = f(minus.reshape(x.shape))
            check_finite(fp, "grad_check objective")
            check_finite(fm, "grad_check objective")
            numeric = (fp - fm).item() / (2 * h)
            a = analytic[i].item()
            err = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-8)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# seeded Gaussian noise


class Rng:
    """Counter-based generator (Philox) with Box-Muller normals.

    Philox produces the same stream on every platform for a given seed, and
    the transform below is plain float64 arithmetic, so identical seeds and
    call sequences give identical tensors.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(key=self.seed & (2**64 - 1)))
        self.counter = 0

    def uniform(self, n: int) -> np.ndarray:
        self.counter += n
        return self._gen.random(n)

    def normal(self, n: int) -> np.ndarray:
        half = (n + 1) // 2
        u = self.uniform(2 * half)
        u1 = 1.0 - u[:half]  # (0, 1], keeps log finite
        u2 = u[half:]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * half)
        z[0::2] = r * np.cos(2.0 * np.pi * u2)
        z[1::2] = r * np.sin(2.0 * np.pi * u2)
        return z[:n]

    def beta(self, a: float, b: float, n: int) -> np.ndarray:
        self.counter += n
        return self._gen.beta(a, b, n)

    def integers(self, low: int, high: int, n: int) -> np.ndarray:
        self.counter += n
        return self._gen.integers(low, high, n)


def gaussian(rng: Rng, shape: Sequence[int], dtype: torch.dtype = torch.float32) -> torch.Tensor:
    n = int(np.prod(shape)) if len(shape) else 1
    return torch.from_numpy(rng.normal(n).reshape(tuple(shape))).to(dtype)


# ---------------------------------------------------------------------------
# FFT


@dataclass
class Spectrum:
    """Non-redundant half of the DFT of a real signal of length ``n``."""

    re: np.ndarray
    im: np.ndarray
    n: int

    def __post_init__(self):
        expected = self.n // 2 + 1
        if self.re.shape[-1] != expected or self.im.shape[-1] != expected:
            raise ValueError(f"spectrum of length-{self.n} signal needs {expected} bins")

    @property
    def complex(self) -> np.ndarray:
        return self.re + 1j * self.im


def _is_pow2(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft(x: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Complex DFT along the last axis; iterative radix-2 for power-of-two
    lengths, direct O(n^2) sum otherwise. The inverse carries the 1/n."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    sign = 1.0 if inverse else -1.0
    if not _is_pow2(n):
        k = np.arange(n)
        w = np.exp(sign * 2j * np.pi * np.outer(k, k) / n)
        out = x @ w.T
    else:
        out = x[..., _bit_reverse(n)].copy()
        m = 2
        while m <= n:
            half = m // 2
            tw = np.exp(sign * 2j * np.pi * np.arange(half) / m)
            blocks = out.reshape(*out.shape[:-1], n // m, m)
            top = blocks[..., :half].copy()
            bot = blocks[..., half:] * tw
            blocks[..., :half] = top + bot
            blocks[..., half:] = top - bot
            out = blocks.reshape(out.shape)
            m *= 2
    if inverse:
        out = out / n
    return out


def rfft_array(x: np.ndarray) -> np.ndarray:
    """Half spectrum of real signals along the last axis (complex array)."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if n < 2:
        raise ValueError("rfft needs at least 2 samples")
    return fft(x)[..., : n // 2 + 1]


def irfft_array(spec: np.ndarray, n: int) -> np.ndarray:
    spec = np.asarray(spec, dtype=np.complex128)
    if n < 2:
        raise ValueError("irfft needs n >= 2")
    if spec.shape[-1] != n // 2 + 1:
        raise ValueError("half spectrum length does not match n")
    # rebuild the Hermitian-symmetric full spectrum
    tail = np.conj(spec[..., 1 : (n + 1) // 2][..., ::-1])
    full = np.concatenate([spec, tail], axis=-1)
    full[..., 0] = full[..., 0].real
    if n % 2 == 0:
        full[..., n // 2] = full[..., n // 2].real
    return fft(full, inverse=True).real


def rfft(signal: torch.Tensor) -> Spectrum:
    x = signal.detach().cpu().numpy().astype(np.float64)
    if x.ndim != 1:
        raise ValueError("rfft expects a 1-D signal")
    s = rfft_array(x)
    re, im = s.real.copy(), s.imag.copy()
    im[0] = 0.0
    if len(x) % 2 == 0:
        im[-1] = 0.0
    return Spectrum(re, im, len(x))


def irfft(s: Spectrum) -> torch.Tensor:
    return torch.from_numpy(irfft_array(s.complex, s.n))


# ---------------------------------------------------------------------------
# spherical interpolation


def slerp(u: torch.Tensor, v: torch.Tensor, t: float, eps: float = 1e-6) -> torch.Tensor:
    """Great-circle interpolation of two tensors treated as flat vectors."""
    if u.shape != v.shape:
        raise ValueError("slerp operands differ in shape")
    if not 0.0 <= t <= 1.0:
        raise ValueError("slerp weight must lie in [0, 1]")
    if t == 0.0:
        return u.clone()
    if t == 1.0:
        return v.clone()
    a = u.detach().to(torch.float64).reshape(-1)
    b = v.detach().to(torch.float64).reshape(-1)
    na, nb = a.norm().item(), b.norm().item()
    if na == 0.0 or nb == 0.0:
        raise ValueError("slerp of a zero-norm vector")
    cos = min(1.0, max(-1.0, (a @ b).item() / (na * nb)))
    theta = math.acos(cos)
    if theta < eps:
        out = (1.0 - t) * a + t * b
    else:
        s = math.sin(theta)
        out = (math.sin((1.0 - t) * theta) / s) * a + (math.sin(t * theta) / s) * b
    return out.reshape(u.shape).to(u.dtype)
