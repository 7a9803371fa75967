"""Normalization, bilinear latent encoding, decoder training and reconstruction."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .diffable import LRSchedule, StableAdamW, load_checkpoint, save_checkpoint
from .grid import GridSpec, area_weights, bilinear_downsample, bilinear_upsample
from .nets import DecoderNet, DecoderNetConfig
from .synthetic import diurnal_phase_field

log = logging.getLogger(__name__)


@dataclass
class NormStats:
    channel_names: list[str]
    state_mean: list[float]
    state_std: list[float]
    res_mean: list[float]
    res_std: list[float]

    def _arr(self, name):
        return np.asarray(getattr(self, name), dtype=np.float64)[:, None, None]

    def normalize(self, x):
        return (x - self._arr("state_mean")) / self._arr("state_std")

    def denormalize(self, x):
        return x * self._arr("state_std") + self._arr("state_mean")

    def normalize_res(self, dx):
        return (dx - self._arr("res_mean")) / self._arr("res_std")

    def denormalize_res(self, r):
        return r * self._arr("res_std") + self._arr("res_mean")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "NormStats":
        return cls(**json.loads(text))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "NormStats":
        return cls.from_json(Path(path).read_text())


def _pooled_moments(frames: np.ndarray, chunk: int = 512):
    """Per-channel mean and population std with two deterministic passes over chunks."""
    n = frames.shape[0] * frames.shape[2] * frames.shape[3]
    total = np.zeros(frames.shape[1])
    for i in range(0, frames.shape[0], chunk):
        total += frames[i:i + chunk].astype(np.float64).sum(axis=(0, 2, 3))
    mean = total / n
    sq = np.zeros_like(mean)
    for i in range(0, frames.shape[0], chunk):
        d = frames[i:i + chunk].astype(np.float64) - mean[:, None, None]
        sq += (d * d).sum(axis=(0, 2, 3))
    return mean, np.sqrt(sq / n)


def compute_norm_stats(frames: np.ndarray, channel_names: list[str]) -> NormStats:
    """Pixel-pooled statistics of states and of one-step differences (training split only)."""
    if frames.ndim != 4 or frames.shape[0] < 2:
        raise ValueError("need at least two consecutive frames of shape (N, C, H, W)")
    if len(channel_names) != frames.shape[1]:
        raise ValueError("one channel name per channel required")
    mean, std = _pooled_moments(frames)
    diffs = np.diff(frames.astype(np.float64), axis=0) if frames.nbytes < 2**28 else None
    if diffs is None:
        parts = [np.diff(frames[i:i + 513].astype(np.float64), axis=0) for i in range(0, frames.shape[0] - 1, 512)]
        diffs = np.concatenate(parts)
    rmean, rstd = _pooled_moments(diffs)
    for name, s, r in zip(channel_names, std, rstd):
        if not (s > 0 and r > 0):
            raise ValueError(f"channel {name!r} has zero variance")
    return NormStats(list(channel_names), mean.tolist(), std.tolist(), rmean.tolist(), rstd.tolist())


# -- encoder and auxiliary inputs --------------------------------------------------------

@dataclass(frozen=True)
class LatentSpace:
    full: GridSpec
    latent: GridSpec
    stats: NormStats

    @classmethod
    def from_factor(cls, full: GridSpec, factor: int, stats: NormStats) -> "LatentSpace":
        return cls(full, full.coarsen(factor), stats)

    def encode(self, x):
        """``z = B(normalize(x))``."""
        return bilinear_downsample(self.stats.normalize(x), self.full, self.latent)

    def encode_res(self, dx):
        """``r = B(normalize_res(dx))``."""
        return bilinear_downsample(self.stats.normalize_res(dx), self.full, self.latent)


def aux_channels(steps, grid: GridSpec, period: int) -> np.ndarray:
    """Auxiliary decoder inputs in [-1, 1]: diurnal zenith-like phase and a static latitude mask."""
    steps = np.asarray(steps)
    phase = diurnal_phase_field(steps, period, grid)
    static = np.broadcast_to(np.sin(np.deg2rad(grid.latitudes))[:, None], grid.shape)
    static = np.broadcast_to(static, phase.shape)
    return np.stack([phase, static], axis=-3)


N_AUX = 2


@dataclass
class TupleBank:
    """Consecutive training tuples kept in memory as float32 arrays.

    Index ``k`` refers to the tuple ``(x_{k}, x_{k+1}, x_{k+2})`` of the
    source frames, i.e. ``z_-1 = z[k], z_0 = z[k+1], r_1 = r[k+1]``.
    """

    z: np.ndarray  # (N, C, h, w) encoded states
    r: np.ndarray  # (N-1, C, h, w) encoded residuals, r[j] = B(norm_res(x_{j+1} - x_j))
    steps: np.ndarray  # (N,) generator step of each frame

    def __len__(self):
        return self.z.shape[0] - 2

    def latent_batch(self, idx):
        idx = np.asarray(idx)
        return self.z[idx], self.z[idx + 1], self.r[idx + 1]


def build_tuple_bank(frames: np.ndarray, space: LatentSpace, start_step: int = 0, chunk: int = 512) -> TupleBank:
    n = frames.shape[0]
    z = np.empty((n,) + (frames.shape[1],) + space.latent.shape, dtype=np.float32)
    for i in range(0, n, chunk):
        z[i:i + chunk] = space.encode(frames[i:i + chunk].astype(np.float64))
    r = np.empty((n - 1,) + z.shape[1:], dtype=np.float32)
    for i in range(0, n - 1, chunk):
        blk = frames[i:i + chunk + 1].astype(np.float64)
        r[i:i + blk.shape[0] - 1] = space.encode_res(np.diff(blk, axis=0))
    return TupleBank(z, r, start_step + np.arange(n))


# -- decoder ---------------------------------------------------------------------------

@dataclass
class DecoderTrainConfig:
    steps: int = 1500
    batch_size: int = 8
    base_lr: float = 1e-3
    warmup_steps: int = 100
    cycles: int = 1
    seed: int = 0
    log_every: int = 50

    def schedule(self) -> LRSchedule:
        return LRSchedule(self.base_lr, self.warmup_steps, self.steps // self.cycles, 0.8)


def decoder_inputs(x0: np.ndarray, steps, space: LatentSpace, period: int) -> np.ndarray:
    aux = aux_channels(steps, space.full, period)
    return np.concatenate([space.stats.normalize(x0), aux], axis=-3)


class Decoder:
    """A decoder network bound to its latent space and auxiliary-channel convention."""

    def __init__(self, net: DecoderNet, space: LatentSpace, period: int):
        self.net, self.space, self.period = net, space, period

    @torch.no_grad()
    def residual(self, x0: np.ndarray, r1: np.ndarray, steps) -> np.ndarray:
        """Denormalized full-resolution residual for latent residual ``r1``."""
        xa = torch.from_numpy(decoder_inputs(x0, steps, self.space, self.period).astype(np.float32))
        r = torch.from_numpy(np.asarray(r1, dtype=np.float32))
        squeeze = xa.ndim == 3
        if squeeze:
            xa, r = xa[None], r[None]
        out = self.net(r, xa).double().numpy()
        out = self.space.stats.denormalize_res(out)
        return out[0] if squeeze else out

    def reconstruct(self, x0: np.ndarray, r1: np.ndarray, steps) -> np.ndarray:
        """``x1_hat = x0 + denormalize_res(D(r1, x0_aug))``."""
        return x0 + self.residual(x0, r1, steps)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        save_checkpoint(path, dict(self.net.state_dict()))
        meta = {"net": self.net.cfg.to_dict(), "period": self.period, "full": list(self.space.full.shape),
                "latent": list(self.space.latent.shape)}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path, stats: NormStats) -> "Decoder":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        net = DecoderNet(DecoderNetConfig.from_dict(meta["net"]))
        net.load_state_dict({k: torch.from_numpy(v) for k, v in load_checkpoint(path).items()})
        net.eval()
        space = LatentSpace(GridSpec(*meta["full"]), GridSpec(*meta["latent"]), stats)
        return cls(net, space, meta["period"])


def bilinear_reconstruct(x0: np.ndarray, r1: np.ndarray, space: LatentSpace) -> np.ndarray:
    """Baseline: upsample the latent residual bilinearly and add it to the state."""
    return x0 + space.stats.denormalize_res(bilinear_upsample(r1, space.latent, space.full))


def train_decoder(frames: np.ndarray, bank: TupleBank, space: LatentSpace, net_cfg: DecoderNetConfig,
                  cfg: DecoderTrainConfig, period: int, on_checkpoint=None):
    """Fit the decoder by minimizing the mean absolute error to the normalized residual.

    ``frames`` is the training split; returns ``(Decoder, loss_curve)``.
    """
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    net = DecoderNet(net_cfg)
    opt = StableAdamW.for_module(net)
    sched = cfg.schedule()
    curve = []
    last_good = {k: v.detach().clone() for k, v in net.state_dict().items()}
    n = frames.shape[0] - 1
    for step in range(cfg.steps):
        j = rng.integers(0, n, size=cfg.batch_size)
        x0 = frames[j].astype(np.float64)
        x1 = frames[j + 1].astype(np.float64)
        xa = torch.from_numpy(decoder_inputs(x0, bank.steps[j], space, period).astype(np.float32))
        r1 = torch.from_numpy(bank.r[j])
        target = torch.from_numpy(space.stats.normalize_res(x1 - x0).astype(np.float32))
        loss = (net(r1, xa) - target).abs().mean()
        if not torch.isfinite(loss):
            net.load_state_dict(last_good)
            raise FloatingPointError(f"decoder loss became non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step(sched.lr_at(step))
        curve.append(loss.item())
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("decoder step %d loss %.4f", step, curve[-1])
        if on_checkpoint is not None and (step + 1) % 500 == 0:
            last_good = {k: v.detach().clone() for k, v in net.state_dict().items()}
            on_checkpoint(net, step + 1)
    net.eval()
    return Decoder(net, space, period), curve


def area_rmse(pred: np.ndarray, truth: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Per-channel area-weighted RMSE pooled over the leading (time) axis."""
    w = area_weights(grid)
    err = (pred - truth) ** 2
    return np.sqrt((err * w).sum(axis=(-2, -1)).reshape(-1, err.shape[-3]).mean(axis=0))
