"""AdamW with per-tensor update-RMS clipping, and the cyclic learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch


@dataclass
class AdamState:
    m: torch.Tensor
    v: torch.Tensor
    step: int = 0


def adamw_step(param: torch.Tensor, grad: torch.Tensor, state: AdamState, lr: float,
               betas=(0.9, 0.99), eps: float = 1e-6, weight_decay: float = 0.01,
               clip: float | None = 1.0) -> None:
    """One in-place update with decoupled weight decay.

    The bias-corrected Adam direction is rescaled so its RMS never exceeds
    ``clip``, which bounds the relative step of every tensor.
    """
    b1, b2 = betas
    state.step += 1
    state.m.mul_(b1).add_(grad, alpha=1 - b1)
    state.v.mul_(b2).addcmul_(grad, grad, value=1 - b2)
    m_hat = state.m / (1 - b1**state.step)
    v_hat = state.v / (1 - b2**state.step)
    update = m_hat / (v_hat.sqrt() + eps)
    if clip is not None:
        rms = update.pow(2).mean().sqrt().item()
        if rms > clip:
            update = update * (clip / rms)
    if weight_decay:
        param.mul_(1 - lr * weight_decay)
    param.add_(update, alpha=-lr)


@dataclass
class StableAdamW:
    """Optimizer over a fixed, ordered set of named parameters."""

    params: dict[str, torch.Tensor]
    betas: tuple[float, float] = (0.9, 0.99)
    eps: float = 1e-6
    weight_decay: float = 0.01
    clip: float | None = 1.0
    no_decay: tuple[str, ...] = ()
    state: dict[str, AdamState] = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            self.state.setdefault(name, AdamState(torch.zeros_like(p), torch.zeros_like(p)))

    @classmethod
    def for_module(cls, module: torch.nn.Module, **kw) -> "StableAdamW":
        params = dict(module.named_parameters())
        # biases, norms and embeddings are left undecayed
        no_decay = tuple(n for n, p in params.items() if p.ndim < 2)
        return cls(params, no_decay=no_decay, **kw)

    @property
    def step_count(self) -> int:
        return min((s.step for s in self.state.values()), default=0)

    def step(self, lr: float) -> None:
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        grads = {}
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            if not torch.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
            grads[name] = g
        with torch.no_grad():
            for name, p in self.params.items():
                wd = 0.0 if name in self.no_decay else self.weight_decay
                adamw_step(p.data, grads[name], self.state[name], lr, self.betas, self.eps, wd, self.clip)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for name, s in self.state.items():
            out[f"adam.m/{name}"] = s.m
            out[f"adam.v/{name}"] = s.v
            out[f"adam.step/{name}"] = torch.tensor([s.step], dtype=torch.int64)
        return out

    def load_state_tensors(self, tensors: dict[str, torch.Tensor]) -> None:
        for name, s in self.state.items():
            s.m.copy_(tensors[f"adam.m/{name}"])
            s.v.copy_(tensors[f"adam.v/{name}"])
            s.step = int(tensors[f"adam.step/{name}"][0])


@dataclass(frozen=True)
class LRSchedule:
    """Linear warmup then cosine decay, restarted each cycle at a reduced peak.

    Cycle ``k`` (0-based) peaks at ``base_lr * reset_factor**k``; only the
    first cycle ramps up, later cycles start directly at their peak.
    """

    base_lr: float = 1.28e-4
    warmup_steps: int = 2000
    cycle_steps: int = 102_000
    reset_factor: float = 0.8

    def __post_init__(self):
        if not 0 < self.reset_factor <= 1:
            raise ValueError("reset_factor must be in (0, 1]")
        if not 0 <= self.warmup_steps < self.cycle_steps:
            raise ValueError("warmup_steps must be smaller than cycle_steps")

    def lr_at(self, step: int) -> float:
        if step < 0:
            raise ValueError("step must be >= 0")
        cycle, pos = divmod(step, self.cycle_steps)
        peak = self.base_lr * self.reset_factor**cycle
        if cycle == 0:
            if pos < self.warmup_steps:
                return peak * pos / self.warmup_steps
            frac = (pos - self.warmup_steps) / (self.cycle_steps - self.warmup_steps)
        else:
            frac = pos / self.cycle_steps
        return 0.5 * peak * (1.0 + math.cos(math.pi * frac))
