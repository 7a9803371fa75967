"""SDE/ODE integrators used by the samplers."""
from __future__ import annotations

import math
from typing import Callable

import torch

from .streams import MemberStreams


def _check(x, what, step):
    if not torch.isfinite(x).all():
        raise FloatingPointError(f"non-finite state in {what} at step {step}")


def _per_member(v: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return v.reshape((-1,) + (1,) * (like.ndim - 1))


def srk_integrate(drift: Callable, diffusion: Callable, x0: torch.Tensor, n_steps: int,
                  streams: MemberStreams, t0: float = 0.0, t1: float = 1.0) -> torch.Tensor:
    """Integrate ``dX = drift(X, t) dt + diffusion(X, t) dW`` with the improved-Euler SRK scheme.

    Per step, with ``dW ~ N(0, h)`` and a random sign ``S``::

        K1 = h f(t, X)       + (dW - S sqrt(h)) g(t, X)
        K2 = h f(t+h, X+K1)  + (dW + S sqrt(h)) g(t+h, X+K1)
        X <- X + (K1 + K2) / 2

    Leading axis of ``x0`` indexes members of ``streams``.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if x0.shape[0] != len(streams):
        raise ValueError("one random stream per member required")
    h = (t1 - t0) / n_steps
    sh = math.sqrt(h)
    x = x0
    for k in range(n_steps):
        t = t0 + k * h
        dw = streams.normal(tuple(x.shape[1:])).to(x.dtype) * sh
        s = _per_member(streams.signs().to(x.dtype), x) * sh
        k1 = h * drift(x, t) + (dw - s) * diffusion(x, t)
        x1 = x + k1
        k2 = h * drift(x1, t + h) + (dw + s) * diffusion(x1, t + h)
        x = x + 0.5 * (k1 + k2)
        _check(x, "SRK integration", k)
    return x


def heun_integrate(score: Callable, levels, x: torch.Tensor, streams: MemberStreams | None = None,
                   s_churn: float = 0.0, s_noise: float = 1.0) -> torch.Tensor:
    """Integrate the reverse-time flow from ``levels[0]`` down to ``levels[-1] = 0``.

    ``score(x, sigma)`` approximates ``grad log p(x; sigma)``. The probability-flow
    drift is ``dx/dsigma = -sigma * score``; a second-order Heun correction is
    applied on every step except the last one, which lands on ``sigma = 0``.
    Optional churn re-injects noise before each step.
    """
    n = len(levels) - 1
    gamma = min(s_churn / n, math.sqrt(2.0) - 1.0) if s_churn > 0 else 0.0
    for i in range(n):
        s, s_next = float(levels[i]), float(levels[i + 1])
        if gamma > 0:
            s_hat = s * (1.0 + gamma)
            eps = streams.normal(tuple(x.shape[1:])).to(x.dtype)
            x = x + math.sqrt(s_hat**2 - s**2) * s_noise * eps
            s = s_hat
        d = -s * score(x, s)
        x_next = x + (s_next - s) * d
        if s_next > 0:
            d2 = -s_next * score(x_next, s_next)
            x_next = x + (s_next - s) * 0.5 * (d + d2)
        x = x_next
        _check(x, "Heun integration", i)
    return x
