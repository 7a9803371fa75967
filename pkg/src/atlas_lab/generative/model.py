"""Trained conditional samplers: construction, training loop and persistence."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from ..diffable import LRSchedule, StableAdamW, load_checkpoint, save_checkpoint
from ..grid import GridSpec
from ..nets import PredictiveNet, PredictiveNetConfig
from .methods import CRPSConfig, CRPSMethod, EDMConfig, EDMMethod, METHOD_CONFIGS, SIConfig, SIMethod
from .streams import MemberStreams

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int = 6000
    batch_size: int = 16
    base_lr: float = 1e-3
    warmup_steps: int = 200
    cycles: int = 3
    reset_factor: float = 0.8
    seed: int = 0
    log_every: int = 100

    def schedule(self) -> LRSchedule:
        return LRSchedule(self.base_lr, self.warmup_steps, self.steps // self.cycles, self.reset_factor)


class GenerativeModel:
    """A predictive network plus the method that turns it into a sampler."""

    def __init__(self, method: str, net_cfg: PredictiveNetConfig, method_cfg, latent: GridSpec,
                 m_z=None, m_r=None, seed: int = 0):
        if method not in METHOD_CONFIGS:
            raise ValueError(f"unknown method {method!r}; expected one of {sorted(METHOD_CONFIGS)}")
        if not isinstance(method_cfg, METHOD_CONFIGS[method]):
            raise TypeError(f"method {method!r} needs a {METHOD_CONFIGS[method].__name__}")
        C = net_cfg.channels
        self.m_z = np.ones(C) if m_z is None else np.asarray(m_z, dtype=float)
        self.m_r = np.ones(C) if m_r is None else np.asarray(m_r, dtype=float)
        if method == "crps":
            if net_cfg.noise_dim != method_cfg.noise_dim:
                raise ValueError("network noise_dim must equal the CRPS noise dimension")
            self.method = CRPSMethod(method_cfg, latent)
        elif method == "edm":
            self.method = EDMMethod(method_cfg)
        else:
            self.method = SIMethod(method_cfg, self.m_z, self.m_r)
        if method != "crps" and net_cfg.noise_dim:
            raise ValueError(f"{method} networks take no noise vector")
        self.tag, self.net_cfg, self.method_cfg, self.latent = method, net_cfg, method_cfg, latent
        torch.manual_seed(seed)
        self.net = PredictiveNet(net_cfg)

    def loss(self, zm1, z0, r1, gen: torch.Generator):
        return self.method.loss(self.net, zm1, z0, r1, gen)

    @torch.no_grad()
    def sample(self, z0: torch.Tensor, zm1: torch.Tensor, streams: MemberStreams,
               n_steps: int | None = None, chunk: int = 512) -> torch.Tensor:
        """One draw per member; ``z0``/``zm1`` have one row per member of ``streams``."""
        self.net.eval()
        out = []
        for i in range(0, z0.shape[0], chunk):
            sl = slice(i, i + chunk)
            out.append(self.method.sample(self.net, z0[sl], zm1[sl], streams.subset(sl), n_steps))
        return torch.cat(out)

    # -- persistence -------------------------------------------------------------------
    def describe(self) -> dict:
        return {
            "method": self.tag,
            "net": self.net_cfg.to_dict(),
            "method_config": asdict(self.method_cfg),
            "latent": list(self.latent.shape),
            "m_z": self.m_z.tolist(),
            "m_r": self.m_r.tolist(),
        }

    def save(self, path: str | Path) -> None:
        path = Path(path)
        save_checkpoint(path, {k: v for k, v in self.net.state_dict().items()})
        path.with_suffix(".json").write_text(json.dumps(self.describe(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "GenerativeModel":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        net_cfg = PredictiveNetConfig.from_dict(meta["net"])
        mcfg = METHOD_CONFIGS[meta["method"]](**meta["method_config"])
        model = cls(meta["method"], net_cfg, mcfg, GridSpec(*meta["latent"]), meta["m_z"], meta["m_r"])
        tensors = load_checkpoint(path)
        model.net.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
        model.net.eval()
        return model


def latent_moments(bank) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel second moments of latent states and residuals."""
    m_z = np.mean(bank.z.astype(np.float64) ** 2, axis=(0, 2, 3))
    m_r = np.mean(bank.r.astype(np.float64) ** 2, axis=(0, 2, 3))
    return m_z, m_r


def train_generative(model: GenerativeModel, bank, cfg: TrainConfig, indices=None, on_log=None) -> list[float]:
    """Stochastic optimization of the method's loss on latent training tuples."""
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    net = model.net
    net.train()
    opt = StableAdamW.for_module(net)
    sched = cfg.schedule()
    pool = np.arange(len(bank)) if indices is None else np.asarray(indices)
    curve = []
    for step in range(cfg.steps):
        idx = pool[rng.integers(0, len(pool), size=cfg.batch_size)]
        zm1, z0, r1 = (torch.from_numpy(a) for a in bank.latent_batch(idx))
        loss = model.loss(zm1, z0, r1, gen)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"{model.tag} loss became non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step(sched.lr_at(step))
        curve.append(loss.item())
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("%s step %d loss %.4f", model.tag, step, curve[-1])
            if on_log is not None:
                on_log(step, curve[-1])
    net.eval()
    return curve
