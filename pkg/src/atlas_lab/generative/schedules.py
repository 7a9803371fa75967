"""Interpolant and noise-level schedules."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class InterpolantSchedule:
    """``alpha = 1 - t``, ``beta = t`` and a piecewise-linear noise amplitude.

    ``kind="tent"``: ``sigma = 2 sigma_max min(t, 1 - t)``, zero at both ends,
    apex at ``t = 1/2`` where the derivative is taken from the right.

    ``kind="decay"``: ``sigma = sigma_max (1 - t)``, nonzero at ``t = 0``. With
    ``sigma(0) = 0`` the exact drift behaves like ``(x - z0) / t`` near the
    start and the sampling SDE cannot recover the conditional spread; a
    positive initial amplitude keeps the drift regular.
    """

    sigma_max: float = 0.5
    kind: str = "tent"

    def __post_init__(self):
        if self.sigma_max < 0:
            raise ValueError("sigma_max must be >= 0")
        if self.kind not in ("tent", "decay"):
            raise ValueError(f"unknown interpolant schedule {self.kind!r}")

    def alpha(self, t):
        return 1.0 - t

    def beta(self, t):
        return t

    def sigma(self, t):
        if self.kind == "decay":
            return self.sigma_max * (1.0 - t)
        # 2 min(t, 1 - t), written so it works for floats, arrays and tensors alike
        return self.sigma_max * (1.0 - abs(1.0 - 2.0 * t))

    def dalpha(self, t):
        return -1.0 + 0.0 * t

    def dbeta(self, t):
        return 1.0 + 0.0 * t

    def dsigma(self, t):
        if self.kind == "decay":
            return -self.sigma_max + 0.0 * t
        return 2.0 * self.sigma_max * (1.0 - 2.0 * (t >= 0.5))


@dataclass(frozen=True)
class EDMSchedule:
    """``sigma(t) = t`` on ``[0, sigma_max]`` with preconditioning for unit-scale data."""

    sigma_max: float = 10.0
    sigma_min: float = 0.002
    rho: float = 7.0
    p_mean: float = -1.2
    p_std: float = 1.2
    sigma_data: float = 1.0

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")

    def c_skip(self, s):
        return self.sigma_data**2 / (s**2 + self.sigma_data**2)

    def c_out(self, s):
        return s * self.sigma_data / (s**2 + self.sigma_data**2) ** 0.5

    def c_in(self, s):
        return 1.0 / (s**2 + self.sigma_data**2) ** 0.5

    def c_noise(self, s):
        return s.log() / 4.0 if hasattr(s, "log") else math.log(s) / 4.0

    def levels(self, n_steps: int) -> np.ndarray:
        """Decreasing noise levels ``sigma_0 = sigma_max > ... > sigma_min`` followed by 0."""
        if n_steps < 2:
            raise ValueError("n_steps must be >= 2")
        i = np.arange(n_steps)
        inv = 1.0 / self.rho
        s = (self.sigma_max**inv + i / (n_steps - 1) * (self.sigma_min**inv - self.sigma_max**inv)) ** self.rho
        s[0], s[-1] = self.sigma_max, self.sigma_min
        return np.append(s, 0.0)

    @property
    def terminal_std(self) -> float:
        return math.sqrt(self.sigma_data**2 + self.sigma_max**2)
