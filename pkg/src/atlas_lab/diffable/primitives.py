"""Differentiable building blocks used by the networks, plus a gradient checker.

Every primitive is a plain function on torch tensors; torch's autograd tape
records them and accumulates gradients. ``REGISTRY`` pairs each primitive
with a generator of small random inputs so :func:`grad_check_all` can compare
the recorded backward pass against central finite differences.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from ..grid import pad_indices


class NonFiniteError(FloatingPointError):
    pass


def assert_finite(t: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return t


def matmul(a, b):
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def linear(x, w, b=None):
    return F.linear(x, w, b)


def conv2d(x, w, b=None, stride=(1, 1)):
    """Strided 2-D convolution without padding (patch embedding)."""
    if x.shape[-3] != w.shape[1]:
        raise ValueError(f"conv2d expects {w.shape[1]} input channels, got {x.shape[-3]}")
    return F.conv2d(x, w, b, stride=stride)


def conv1x1(x, w, b=None):
    if w.shape[-2:] != (1, 1):
        raise ValueError("conv1x1 needs a 1x1 kernel")
    return conv2d(x, w, b)


def layer_norm(x, eps: float = 1e-6):
    return F.layer_norm(x, x.shape[-1:], eps=eps)


def softmax(x, dim: int = -1):
    return torch.softmax(x, dim=dim)


def silu(x):
    return F.silu(x)


def gelu(x):
    return F.gelu(x, approximate="tanh")


def add(a, b):
    return a + b


def mul(a, b):
    return a * b


def modulate(x, shift, scale):
    """Adaptive shift/scale: ``x * (1 + scale) + shift`` broadcast over tokens."""
    return x * (1.0 + scale.unsqueeze(-2)) + shift.unsqueeze(-2)


def gate(x, g):
    return g.unsqueeze(-2) * x


def mean(x, dim=None):
    return x.mean() if dim is None else x.mean(dim=dim)


def abs_sum(x, dim=None):
    return x.abs().sum() if dim is None else x.abs().sum(dim=dim)


def gather_pad(x, halo: int):
    """Spherical halo padding of the trailing two axes as an index gather."""
    r, c = pad_indices(x.shape[-2], x.shape[-1], halo)
    return x[..., torch.from_numpy(r.copy()), torch.from_numpy(c.copy())]


def attention(q, k, v, mask=None):
    """Scaled dot-product attention over ``(..., tokens, head_dim)``.

    ``mask`` is boolean (True = attend) or additive, broadcastable to the
    score matrix.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ValueError("attention shape mismatch")
    scores = (q @ k.transpose(-2, -1)) / math.sqrt(q.shape[-1])
    if mask is not None:
        if mask.dtype == torch.bool:
            scores = scores.masked_fill(~mask, float("-inf"))
        else:
            scores = scores + mask
    return softmax(scores, -1) @ v


def local_attention(q, k, v, neighbors):
    """Attention restricted to a fixed neighbour list.

    ``q, k, v``: ``(B, heads, N, d)``; ``neighbors``: ``(N, K)`` token indices.
    """
    kn = k[:, :, neighbors]  # (B, h, N, K, d)
    vn = v[:, :, neighbors]
    # broadcast-and-sum beats batched 1xd @ dxK matmuls by a wide margin on CPU
    scores = (q.unsqueeze(-2) * kn).sum(-1) / math.sqrt(q.shape[-1])
    return (softmax(scores, -1).unsqueeze(-1) * vn).sum(-2)


def neighbor_table(n_lat: int, n_lon: int, radius: int = 1) -> torch.Tensor:
    """Flat indices of the ``(2r+1)^2`` spherically padded neighbours of each cell."""
    r, c = pad_indices(n_lat, n_lon, radius)
    flat = r * n_lon + c
    w = 2 * radius + 1
    out = np.empty((n_lat * n_lon, w * w), dtype=np.int64)
    for i in range(n_lat):
        for j in range(n_lon):
            out[i * n_lon + j] = flat[i:i + w, j:j + w].ravel()
    return torch.from_numpy(out)


# -- registry & gradient checking ---------------------------------------------------

@dataclass(frozen=True)
class Primitive:
    name: str
    fn: Callable
    make_inputs: Callable[[torch.Generator], tuple]


def _r(g, *shape):
    return torch.randn(*shape, generator=g, dtype=torch.float64)


def _mask_inputs(g):
    q, k, v = _r(g, 2, 4, 3), _r(g, 2, 5, 3), _r(g, 2, 5, 3)
    mask = torch.ones(4, 5, dtype=torch.bool)
    mask[0, 3:] = False
    mask[2, :2] = False
    return (q, k, v, mask)


def _local_inputs(g):
    nb = neighbor_table(3, 4)
    return (_r(g, 1, 2, 12, 2), _r(g, 1, 2, 12, 2), _r(g, 1, 2, 12, 2), nb)


REGISTRY: dict[str, Primitive] = {
    p.name: p
    for p in [
        Primitive("matmul", matmul, lambda g: (_r(g, 4, 5), _r(g, 5, 3))),
        Primitive("linear", linear, lambda g: (_r(g, 3, 5), _r(g, 4, 5), _r(g, 4))),
        Primitive("conv2d_strided", lambda x, w, b: conv2d(x, w, b, (2, 3)),
                  lambda g: (_r(g, 1, 2, 4, 6), _r(g, 3, 2, 2, 3), _r(g, 3))),
        Primitive("conv1x1", conv1x1, lambda g: (_r(g, 1, 3, 2, 4), _r(g, 2, 3, 1, 1), _r(g, 2))),
        Primitive("layer_norm", layer_norm, lambda g: (_r(g, 3, 8),)),
        Primitive("softmax", softmax, lambda g: (_r(g, 3, 6),)),
        Primitive("attention", attention, lambda g: (_r(g, 2, 4, 3), _r(g, 2, 5, 3), _r(g, 2, 5, 3))),
        Primitive("attention_masked", attention, _mask_inputs),
        Primitive("local_attention", local_attention, _local_inputs),
        Primitive("silu", silu, lambda g: (_r(g, 16),)),
        Primitive("gelu", gelu, lambda g: (_r(g, 16),)),
        Primitive("add", add, lambda g: (_r(g, 3, 4), _r(g, 3, 4))),
        Primitive("mul", mul, lambda g: (_r(g, 3, 4), _r(g, 3, 4))),
        Primitive("modulate", modulate, lambda g: (_r(g, 2, 3, 4), _r(g, 2, 4), _r(g, 2, 4))),
        Primitive("gate", gate, lambda g: (_r(g, 2, 3, 4), _r(g, 2, 4))),
        Primitive("mean", mean, lambda g: (_r(g, 4, 5),)),
        Primitive("abs_sum", abs_sum, lambda g: (_r(g, 4, 5),)),
        Primitive("gather_pad", lambda x: gather_pad(x, 1), lambda g: (_r(g, 2, 5, 4),)),
    ]
}


def finite_difference_grad(fn: Callable[[], torch.Tensor], x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Central differences of the scalar ``fn()`` with respect to ``x`` (mutated in place)."""
    grad = torch.zeros_like(x)
    flat, gflat = x.data.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        up = fn().item()
        flat[i] = orig - eps
        down = fn().item()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(a.norm().item(), b.norm().item(), 1e-12)
    return (a - b).norm().item() / denom


def grad_check(fn: Callable, inputs: tuple, seed: int = 0, eps: float = 1e-5) -> float:
    """Worst relative error between autograd and finite differences over all float inputs.

    The output is contracted with a fixed random cotangent so every output
    element participates.
    """
    g = torch.Generator().manual_seed(seed + 7)
    leaves = [t.detach().clone().requires_grad_(True) if t.is_floating_point() else t for t in inputs]
    out = fn(*leaves)
    cot = torch.randn(out.shape, generator=g, dtype=out.dtype)

    def scalar():
        with torch.no_grad():
            return (fn(*leaves) * cot).sum()

    (out * cot).sum().backward()
    worst = 0.0
    for t in leaves:
        if not (t.is_floating_point() and t.requires_grad):
            continue
        fd = finite_difference_grad(scalar, t, eps)
        worst = max(worst, relative_error(t.grad, fd))
    return worst


def grad_check_all(seed: int = 0) -> dict[str, float]:
    """Relative gradient error for every registered primitive (float64)."""
    results = {}
    for name, prim in REGISTRY.items():
        g = torch.Generator().manual_seed(seed)
        results[name] = grad_check(prim.fn, prim.make_inputs(g), seed)
    return results
