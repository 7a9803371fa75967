"""Transformer backbones: the global-attention predictive network and the
local-attention decoder, both stacks of adaptively modulated DiT blocks."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .diffable import primitives as P


# -- configs ------------------------------------------------------------------------

@dataclass(frozen=True)
class PredictiveNetConfig:
    channels: int = 4
    latent_shape: tuple[int, int] = (19, 32)
    state_embed: int = 64  # e0, noisy-field stream
    history_embed: int = 32  # e1, (z0, z-1) stream
    depth: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0
    patch: tuple[int, int] = (2, 2)
    noise_dim: int = 0  # p; nonzero only for the direct CRPS map
    freq_dim: int = 64

    @property
    def embed_dim(self) -> int:
        return self.state_embed + self.history_embed

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PredictiveNetConfig":
        d = dict(d)
        for k in ("latent_shape", "patch"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass(frozen=True)
class DecoderNetConfig:
    channels: int = 4
    aux_channels: int = 2
    full_shape: tuple[int, int] = (73, 128)
    factor: int = 4
    hires_embed: int = 48
    residual_embed: int = 16
    depth: int = 3
    num_heads: int = 4
    mlp_ratio: float = 4.0
    freq_dim: int = 32

    @property
    def embed_dim(self) -> int:
        return self.hires_embed + self.residual_embed

    @property
    def latent_shape(self) -> tuple[int, int]:
        h, w = self.full_shape
        return ((h - 1) // self.factor + 1, w // self.factor)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DecoderNetConfig":
        d = dict(d)
        if "full_shape" in d:
            d["full_shape"] = tuple(d["full_shape"])
        return cls(**d)


# Paper-scale predictive configuration, representable but never instantiated here.
PAPER_SCALE = PredictiveNetConfig(
    channels=75, latent_shape=(181, 360), state_embed=2496, history_embed=832,
    depth=12, num_heads=13, patch=(2, 3), freq_dim=256,
)


# -- building blocks ----------------------------------------------------------------

def pole_pad_rows(n_rows: int, stride: int) -> tuple[int, int]:
    """Rows replicated (top, bottom) so ``n_rows`` becomes divisible by ``stride``."""
    extra = (-n_rows) % stride
    return extra // 2, extra - extra // 2


def replicate_rows(x: torch.Tensor, top: int, bottom: int) -> torch.Tensor:
    if top == 0 and bottom == 0:
        return x
    idx = torch.cat([
        torch.zeros(top, dtype=torch.long),
        torch.arange(x.shape[-2]),
        torch.full((bottom,), x.shape[-2] - 1, dtype=torch.long),
    ])
    return x[..., idx, :]


def posenc_sincos(h: int, w: int, dim: int) -> torch.Tensor:
    """2-D sine-cosine table ``(h*w, dim)``; first half encodes the row, second the column."""
    if dim % 4:
        raise ValueError("embedding dim must be divisible by 4 for 2-D sincos encoding")
    quarter = dim // 4
    omega = 1.0 / 10000 ** (np.arange(quarter, dtype=np.float64) / quarter)
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")

    def enc(pos):
        ang = np.outer(pos.ravel(), omega)
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    return torch.from_numpy(np.concatenate([enc(rows), enc(cols)], axis=1)).float()


class PatchEmbed(nn.Module):
    """Strided convolution after pole-row replication to a stride multiple."""

    def __init__(self, in_ch: int, out_dim: int, patch: tuple[int, int], shape: tuple[int, int]):
        super().__init__()
        self.patch = tuple(patch)
        self.shape = tuple(shape)
        if shape[1] % patch[1]:
            raise ValueError(f"n_lon={shape[1]} is not divisible by patch width {patch[1]}")
        self.pad = pole_pad_rows(shape[0], patch[0])
        self.proj = nn.Conv2d(in_ch, out_dim, kernel_size=self.patch, stride=self.patch)

    @property
    def token_shape(self) -> tuple[int, int]:
        return ((self.shape[0] + sum(self.pad)) // self.patch[0], self.shape[1] // self.patch[1])

    def forward(self, x):
        if tuple(x.shape[-2:]) != self.shape:
            raise ValueError(f"expected field shape {self.shape}, got {tuple(x.shape[-2:])}")
        x = replicate_rows(x, *self.pad)
        y = P.conv2d(x, self.proj.weight, self.proj.bias, self.patch)
        return y.flatten(2).transpose(1, 2)  # (B, tokens, dim)


class TimestepEmbedder(nn.Module):
    def __init__(self, dim: int, freq_dim: int):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t):
        half = self.freq_dim // 2
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / half)
        # t lives in [0, 1] (or a noise level); scale so low frequencies still resolve it
        ang = 1000.0 * t[:, None] * freqs[None]
        return self.mlp(torch.cat([torch.cos(ang), torch.sin(ang)], dim=-1))


class DiTBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 4.0, kind: str = "global",
                 token_shape: tuple[int, int] | None = None):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"embed dim {dim} not divisible by {num_heads} heads")
        if kind not in ("global", "local3x3"):
            raise ValueError(f"unknown attention kind {kind!r}")
        self.dim, self.heads, self.kind = dim, num_heads, kind
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        hidden = int(dim * mlp_ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        self.ada = nn.Linear(dim, 6 * dim)
        nn.init.zeros_(self.ada.weight)
        nn.init.zeros_(self.ada.bias)
        if kind == "local3x3":
            if token_shape is None:
                raise ValueError("local attention needs the token grid shape")
            self.register_buffer("neighbors", P.neighbor_table(*token_shape), persistent=False)

    def attend(self, x):
        B, N, E = x.shape
        q, k, v = self.qkv(x).view(B, N, 3, self.heads, E // self.heads).permute(2, 0, 3, 1, 4)
        if self.kind == "global":
            y = P.attention(q, k, v)
        else:
            y = P.local_attention(q, k, v, self.neighbors)
        return self.proj(y.transpose(1, 2).reshape(B, N, E))

    def forward(self, x, c):
        if x.shape[-1] != self.dim or c.shape[-1] != self.dim:
            raise ValueError(f"token/conditioning dim must be {self.dim}")
        sh1, sc1, g1, sh2, sc2, g2 = self.ada(P.silu(c)).chunk(6, dim=-1)
        x = x + P.gate(self.attend(P.modulate(P.layer_norm(x), sh1, sc1)), g1)
        h = self.fc2(P.gelu(self.fc1(P.modulate(P.layer_norm(x), sh2, sc2))))
        return x + P.gate(h, g2)


class FinalLayer(nn.Module):
    def __init__(self, dim: int, out_dim: int):
        super().__init__()
        self.ada = nn.Linear(dim, 2 * dim)
        self.linear = nn.Linear(dim, out_dim)
        for lin in (self.ada, self.linear):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(self, x, c):
        shift, scale = self.ada(P.silu(c)).chunk(2, dim=-1)
        return self.linear(P.modulate(P.layer_norm(x), shift, scale))


def unpatch(tokens, token_shape, patch, channels, crop):
    """``(B, th*tw, ph*pw*C)`` tokens to a ``(B, C, H, W)`` field, cropping replicated rows."""
    B = tokens.shape[0]
    th, tw = token_shape
    ph, pw = patch
    x = tokens.view(B, th, tw, ph, pw, channels).permute(0, 5, 1, 3, 2, 4)
    x = x.reshape(B, channels, th * ph, tw * pw)
    top, bottom = crop
    return x[:, :, top: x.shape[2] - bottom]


# -- networks -----------------------------------------------------------------------

class PredictiveNet(nn.Module):
    """Maps (field, z0, z-1, t[, xi]) on the latent grid to a latent field."""

    def __init__(self, cfg: PredictiveNetConfig):
        super().__init__()
        self.cfg = cfg
        e = cfg.embed_dim
        self.embed_state = PatchEmbed(cfg.channels, cfg.state_embed, cfg.patch, cfg.latent_shape)
        self.embed_hist = PatchEmbed(2 * cfg.channels, cfg.history_embed, cfg.patch, cfg.latent_shape)
        self.token_shape = self.embed_state.token_shape
        self.register_buffer("pos", posenc_sincos(*self.token_shape, e), persistent=False)
        self.t_embed = TimestepEmbedder(e, cfg.freq_dim)
        self.noise_mlp = (
            nn.Sequential(nn.Linear(cfg.noise_dim, e), nn.SiLU(), nn.Linear(e, e)) if cfg.noise_dim else None
        )
        self.blocks = nn.ModuleList(
            DiTBlock(e, cfg.num_heads, cfg.mlp_ratio, "global") for _ in range(cfg.depth)
        )
        self.final = FinalLayer(e, cfg.patch[0] * cfg.patch[1] * cfg.channels)

    def forward(self, x, z0, zm1, t, xi=None):
        cfg = self.cfg
        if not (x.shape == z0.shape == zm1.shape):
            raise ValueError("noisy field and history must share a shape")
        if x.shape[1] != cfg.channels:
            raise ValueError(f"expected {cfg.channels} channels, got {x.shape[1]}")
        tok = torch.cat([self.embed_state(x), self.embed_hist(torch.cat([z0, zm1], dim=1))], dim=-1)
        tok = tok + self.pos.to(tok.dtype)
        t = torch.as_tensor(t, dtype=x.dtype).reshape(-1).expand(x.shape[0])
        c = self.t_embed(t)
        if self.noise_mlp is not None:
            if xi is None or xi.shape != (x.shape[0], cfg.noise_dim):
                raise ValueError(f"noise vector of shape (B, {cfg.noise_dim}) required")
            c = c + self.noise_mlp(xi)
        for blk in self.blocks:
            tok = blk(tok, c)
        out = self.final(tok, c)
        return unpatch(out, self.token_shape, cfg.patch, cfg.channels, self.embed_state.pad)


class DecoderNet(nn.Module):
    """Maps a latent residual and the augmented full-resolution state to a full-resolution residual."""

    def __init__(self, cfg: DecoderNetConfig):
        super().__init__()
        self.cfg = cfg
        e = cfg.embed_dim
        f = cfg.factor
        self.embed_hires = PatchEmbed(cfg.channels + cfg.aux_channels, cfg.hires_embed, (f, f), cfg.full_shape)
        self.embed_res = PatchEmbed(cfg.channels, cfg.residual_embed, (1, 1), cfg.latent_shape)
        self.token_shape = self.embed_hires.token_shape
        if self.token_shape != self.embed_res.token_shape:
            raise ValueError(
                f"token grids differ: hires {self.token_shape} vs residual {self.embed_res.token_shape}"
            )
        self.register_buffer("pos", posenc_sincos(*self.token_shape, e), persistent=False)
        self.t_embed = TimestepEmbedder(e, cfg.freq_dim)
        self.blocks = nn.ModuleList(
            DiTBlock(e, cfg.num_heads, cfg.mlp_ratio, "local3x3", self.token_shape) for _ in range(cfg.depth)
        )
        self.final = FinalLayer(e, f * f * cfg.channels)

    def forward(self, r1, x0_aug, t=None):
        # t is accepted for interface symmetry and ignored: the decoder always runs at t = 1
        cfg = self.cfg
        if r1.shape[1] != cfg.channels or x0_aug.shape[1] != cfg.channels + cfg.aux_channels:
            raise ValueError("channel mismatch between decoder inputs and config")
        tok = torch.cat([self.embed_hires(x0_aug), self.embed_res(r1)], dim=-1)
        tok = tok + self.pos.to(tok.dtype)
        c = self.t_embed(torch.ones(r1.shape[0], dtype=r1.dtype))
        for blk in self.blocks:
            tok = blk(tok, c)
        out = self.final(tok, c)
        return unpatch(out, self.token_shape, (cfg.factor, cfg.factor), cfg.channels, self.embed_hires.pad)


# -- parameter accounting -----------------------------------------------------------

def _linear(i, o):
    return i * o + o


def _block_params(e, mlp_ratio):
    h = int(e * mlp_ratio)
    return _linear(e, 3 * e) + _linear(e, e) + _linear(e, h) + _linear(h, e) + _linear(e, 6 * e)


def count_parameters(cfg) -> int:
    """Analytic parameter count of a network built from ``cfg``."""
    e = cfg.embed_dim
    t_embed = _linear(cfg.freq_dim, e) + _linear(e, e)
    blocks = cfg.depth * _block_params(e, cfg.mlp_ratio)
    if isinstance(cfg, PredictiveNetConfig):
        ph, pw = cfg.patch
        embeds = (cfg.channels * ph * pw * cfg.state_embed + cfg.state_embed
                  + 2 * cfg.channels * ph * pw * cfg.history_embed + cfg.history_embed)
        noise = _linear(cfg.noise_dim, e) + _linear(e, e) if cfg.noise_dim else 0
        final = _linear(e, 2 * e) + _linear(e, ph * pw * cfg.channels)
        return embeds + t_embed + noise + blocks + final
    f = cfg.factor
    embeds = ((cfg.channels + cfg.aux_channels) * f * f * cfg.hires_embed + cfg.hires_embed
              + cfg.channels * cfg.residual_embed + cfg.residual_embed)
    final = _linear(e, 2 * e) + _linear(e, f * f * cfg.channels)
    return embeds + t_embed + blocks + final


def token_grid(cfg) -> tuple[int, int]:
    if isinstance(cfg, PredictiveNetConfig):
        (h, w), (ph, pw) = cfg.latent_shape, cfg.patch
    else:
        (h, w), ph = cfg.full_shape, cfg.factor
        pw = ph
    return ((h + sum(pole_pad_rows(h, ph))) // ph, w // pw)


def describe(cfg) -> dict:
    """Summary of an architecture without instantiating it."""
    th, tw = token_grid(cfg)
    return {
        "kind": "predictive" if isinstance(cfg, PredictiveNetConfig) else "decoder",
        "embed_dim": cfg.embed_dim,
        "depth": cfg.depth,
        "heads": cfg.num_heads,
        "token_grid": [th, tw],
        "sequence_length": th * tw,
        "parameters": count_parameters(cfg),
    }


# -- whole-network gradient checks --------------------------------------------------

MICRO_PREDICTIVE = PredictiveNetConfig(
    channels=2, latent_shape=(9, 16), state_embed=8, history_embed=8, depth=2, num_heads=2,
    mlp_ratio=2.0, noise_dim=4, freq_dim=8,
)
MICRO_DECODER = DecoderNetConfig(
    channels=2, aux_channels=2, full_shape=(17, 32), factor=4, hires_embed=8, residual_embed=8,
    depth=2, num_heads=2, mlp_ratio=2.0, freq_dim=8,
)


def _micro_setup(kind: str, g: torch.Generator):
    if kind not in ("predictive", "decoder"):
        raise ValueError(f"unknown network kind {kind!r}")
    # parameter init draws from the global RNG; pin it so results do not depend on what ran before
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(torch.randint(2**62, (1,), generator=g)))
        net = (PredictiveNet(MICRO_PREDICTIVE) if kind == "predictive" else DecoderNet(MICRO_DECODER)).double()
    if kind == "predictive":
        cfg = MICRO_PREDICTIVE
        shape = (2, cfg.channels) + cfg.latent_shape
        args = [torch.randn(shape, generator=g, dtype=torch.float64) for _ in range(3)]
        args += [torch.rand(2, generator=g, dtype=torch.float64),
                 torch.randn(2, cfg.noise_dim, generator=g, dtype=torch.float64)]
        return net, args, shape
    cfg = MICRO_DECODER
    r1 = torch.randn((2, cfg.channels) + cfg.latent_shape, generator=g, dtype=torch.float64)
    xa = torch.randn((2, cfg.channels + cfg.aux_channels) + cfg.full_shape, generator=g, dtype=torch.float64)
    return net, [r1, xa], (2, cfg.channels) + cfg.full_shape


def network_grad_check(kind: str, seed: int = 0, n_dirs: int = 4, n_coords: int = 3,
                       eps: float = 1e-6) -> float:
    """Worst relative error of whole-network loss gradients against central differences.

    The micro network runs in float64 with every parameter (including the
    zero-initialized modulation heads) perturbed, so all paths carry gradient.
    Checks ``n_dirs`` random directional derivatives over all parameters plus
    ``n_coords`` sampled coordinates of every parameter tensor.
    """
    g = torch.Generator().manual_seed(seed)
    net, args, out_shape = _micro_setup(kind, g)
    with torch.no_grad():
        for p in net.parameters():
            p.add_(0.3 * torch.randn(p.shape, generator=g, dtype=p.dtype))
    target = torch.randn(out_shape, generator=g, dtype=torch.float64)

    def loss():
        return ((net(*args) - target) ** 2).mean()

    net.zero_grad()
    loss().backward()
    params = [p for p in net.parameters()]
    grads = [p.grad.detach().clone() for p in params]

    def at(delta_fn, h):
        with torch.no_grad():
            delta_fn(h)
            val = loss().item()
            delta_fn(-h)
        return val

    worst = 0.0
    for _ in range(n_dirs):
        dirs = [torch.randn(p.shape, generator=g, dtype=p.dtype) for p in params]
        norm = math.sqrt(sum(float((d * d).sum()) for d in dirs))
        dirs = [d / norm for d in dirs]

        def shift(h):
            for p, d in zip(params, dirs):
                p.add_(h * d)

        fd = (at(shift, eps) - at(shift, -eps)) / (2 * eps)
        ad = sum(float((gr * d).sum()) for gr, d in zip(grads, dirs))
        worst = max(worst, abs(ad - fd) / max(abs(ad), abs(fd), 1e-12))
    ad_vec, fd_vec = [], []
    for p, gr in zip(params, grads):
        idx = torch.randint(p.numel(), (n_coords,), generator=g)
        for i in idx.tolist():
            flat = p.data.view(-1)

            def bump(h, flat=flat, i=i):
                flat[i] += h

            fd_vec.append((at(bump, eps) - at(bump, -eps)) / (2 * eps))
            ad_vec.append(float(gr.view(-1)[i]))
    a, b = torch.tensor(ad_vec), torch.tensor(fd_vec)
    worst = max(worst, P.relative_error(a, b))
    return worst
