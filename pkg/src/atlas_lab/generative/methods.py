"""The three conditional samplers of the latent residual and their training losses.

All methods model ``r_1 | (z_0, z_-1)`` on the latent grid and share the
predictive network signature ``net(x, z0, zm1, t[, xi])``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from ..diffable import assert_finite
from ..grid import GridSpec, area_weights
from ..harmonics import TorchAnalysis
from .integrators import heun_integrate, srk_integrate
from .schedules import EDMSchedule, InterpolantSchedule
from .streams import MemberStreams


def _bc(v: torch.Tensor, ndim: int) -> torch.Tensor:
    """Reshape a per-sample vector to broadcast against ``(B, C, h, w)``."""
    return v.reshape((-1,) + (1,) * (ndim - 1))


# -- stochastic interpolants -----------------------------------------------------------

@dataclass
class SIConfig:
    sigma_max: float = 0.5
    n_steps: int = 10
    schedule: str = "tent"


class SIMethod:
    """Drift regression for ``I_t = alpha z0 + beta r1 + sigma(t) W_t``.

    The network sees ``c_in(t) I_t`` and predicts the standardized remainder
    ``F`` of the drift::

        b_hat = alpha'(t) z0 + c_out(t) F,   c_out^2 = beta'^2 E[r^2] + sigma'^2 t,
        c_in^{-2} = alpha^2 E[z^2] + beta^2 E[r^2] + sigma^2 t,

    with per-channel second moments taken from the training data.
    """

    tag = "si"

    def __init__(self, cfg: SIConfig, m_z, m_r):
        self.cfg = cfg
        self.schedule = InterpolantSchedule(cfg.sigma_max, cfg.schedule)
        self.m_z = torch.as_tensor(np.asarray(m_z), dtype=torch.float32).reshape(1, -1, 1, 1)
        self.m_r = torch.as_tensor(np.asarray(m_r), dtype=torch.float32).reshape(1, -1, 1, 1)

    def _scales(self, t: torch.Tensor):
        sc = self.schedule
        t4 = _bc(t, 4)
        c_in = (sc.alpha(t4) ** 2 * self.m_z + sc.beta(t4) ** 2 * self.m_r + sc.sigma(t4) ** 2 * t4).rsqrt()
        c_out = (sc.dbeta(t4) ** 2 * self.m_r + sc.dsigma(t4) ** 2 * t4).sqrt()
        return c_in, c_out

    def drift(self, net, x, z0, zm1, t: torch.Tensor):
        c_in, c_out = self._scales(t)
        return self.schedule.dalpha(_bc(t, 4)) * z0 + c_out * net(c_in * x, z0, zm1, t)

    def loss(self, net, zm1, z0, r1, gen: torch.Generator, weights=None):
        sc = self.schedule
        B = z0.shape[0]
        t = torch.rand(B, generator=gen)
        xi = torch.randn(z0.shape, generator=gen)
        t4 = _bc(t, 4)
        w_t = t4.sqrt() * xi
        interp = sc.alpha(t4) * z0 + sc.beta(t4) * r1 + sc.sigma(t4) * w_t
        c_in, c_out = self._scales(t)
        target = (sc.dbeta(t4) * r1 + sc.dsigma(t4) * w_t) / c_out
        out = assert_finite(net(c_in * interp, z0, zm1, t), "interpolant drift")
        return ((out - target) ** 2).mean()

    @torch.no_grad()
    def sample(self, net, z0, zm1, streams: MemberStreams, n_steps: int | None = None):
        n = n_steps or self.cfg.n_steps
        if n < 2:
            raise ValueError("n_steps must be >= 2")
        B = z0.shape[0]

        def drift(x, t):
            return self.drift(net, x, z0, zm1, torch.full((B,), t))

        return srk_integrate(drift, lambda x, t: self.schedule.sigma(t), z0, n, streams)


# -- diffusion ---------------------------------------------------------------------------

@dataclass
class EDMConfig:
    sigma_max: float = 10.0
    sigma_min: float = 0.002
    rho: float = 7.0
    p_mean: float = -1.2
    p_std: float = 1.2
    n_steps: int = 25
    s_churn: float = 0.0

    def schedule(self) -> EDMSchedule:
        return EDMSchedule(self.sigma_max, self.sigma_min, self.rho, self.p_mean, self.p_std)


class EDMMethod:
    """Denoising score matching with preconditioned denoiser ``D``.

    The regression target is ``xi / sigma`` for inputs ``r1 + sigma xi``, so the
    fitted ``s_hat = (x - D) / sigma^2`` estimates the *negative* score; the
    sampler flips the sign once before integrating. Per-level weight
    ``sigma^4 / c_out^2`` makes the objective ``|D - r1|^2 / c_out^2``.
    """

    tag = "edm"

    def __init__(self, cfg: EDMConfig):
        self.cfg = cfg
        self.schedule = cfg.schedule()

    def denoise(self, net, x, z0, zm1, sigma: torch.Tensor):
        sc = self.schedule
        s4 = _bc(sigma, 4)
        return sc.c_skip(s4) * x + sc.c_out(s4) * net(sc.c_in(s4) * x, z0, zm1, sc.c_noise(sigma))

    def s_hat(self, net, x, z0, zm1, sigma: torch.Tensor):
        return (x - self.denoise(net, x, z0, zm1, sigma)) / _bc(sigma, 4) ** 2

    def loss(self, net, zm1, z0, r1, gen: torch.Generator, weights=None):
        sc = self.schedule
        B = z0.shape[0]
        sigma = torch.exp(sc.p_mean + sc.p_std * torch.randn(B, generator=gen))
        xi = torch.randn(r1.shape, generator=gen)
        s4 = _bc(sigma, 4)
        pred = assert_finite(self.s_hat(net, r1 + s4 * xi, z0, zm1, sigma), "score estimate")
        weight = s4**4 / sc.c_out(s4) ** 2
        return (weight * (pred - xi / s4) ** 2).mean()

    @torch.no_grad()
    def sample(self, net, z0, zm1, streams: MemberStreams, n_steps: int | None = None):
        levels = self.schedule.levels(n_steps or self.cfg.n_steps)
        B = z0.shape[0]
        x = streams.normal(tuple(z0.shape[1:])) * self.schedule.terminal_std

        def score(x, s):
            return -self.s_hat(net, x, z0, zm1, torch.full((B,), s))

        return heun_integrate(score, levels, x, streams, self.cfg.s_churn)


# -- CRPS direct map -------------------------------------------------------------------

@dataclass
class CRPSConfig:
    noise_dim: int = 96
    lambda_spec: float = 0.5
    lmax: int = 9


def two_sample_crps(f1, f2, y):
    """Pointwise ``|f1 - y| + |f2 - y| - |f1 - f2|`` (the two-draw estimator)."""
    return (f1 - y).abs() + (f2 - y).abs() - (f1 - f2).abs()


class CRPSMethod:
    """One-pass sampler ``f(z0, z-1, xi)`` trained with the two-draw CRPS plus a spectral term.

    The noisy-field stream of the network receives ``z0``; the noise vector
    enters only through the conditioning. Pixel terms are area-weighted sums
    per channel; spectral terms average over ``(l, m >= 0)`` per channel;
    channels are summed.
    """

    tag = "crps"

    def __init__(self, cfg: CRPSConfig, latent: GridSpec):
        self.cfg = cfg
        self.latent = latent
        self.weights = torch.from_numpy(area_weights(latent)).float()
        self.sht = TorchAnalysis(latent, cfg.lmax) if cfg.lambda_spec > 0 else None

    def forward(self, net, z0, zm1, xi):
        return net(z0, z0, zm1, torch.zeros(z0.shape[0]), xi)

    def loss(self, net, zm1, z0, r1, gen: torch.Generator, weights=None):
        B = z0.shape[0]
        xi = torch.randn((2 * B, self.cfg.noise_dim), generator=gen)
        out = assert_finite(
            self.forward(net, torch.cat([z0, z0]), torch.cat([zm1, zm1]), xi), "direct-map output"
        )
        f1, f2 = out[:B], out[B:]
        total = (two_sample_crps(f1, f2, r1) * self.weights).sum(dim=(-2, -1)).sum(-1).mean()
        if self.sht is not None:
            m1, m2, my = (self.sht.magnitudes(v) for v in (f1, f2, r1))
            total = total + self.cfg.lambda_spec * two_sample_crps(m1, m2, my).mean(-1).sum(-1).mean()
        return total

    @torch.no_grad()
    def sample(self, net, z0, zm1, streams: MemberStreams, n_steps: int | None = None):
        xi = streams.normal((self.cfg.noise_dim,))
        return self.forward(net, z0, zm1, xi)


METHOD_CONFIGS = {"si": SIConfig, "edm": EDMConfig, "crps": CRPSConfig}


def config_to_dict(cfg) -> dict:
    return asdict(cfg)
