"""Run configuration: TOML schema, validation, defaults and per-stage hashes.

A run config is one TOML file. Every key is optional except ``seed``; unknown
keys are rejected. Sections and their keys::

    seed = 0                      # required; every stage derives its streams from it
    out = "runs/desk"             # output directory (--out overrides)

    [data]        path | n_steps, train_fraction, and any OUProcessConfig field
    [latent]      factor
    [nets.predictive]  state_embed, history_embed, depth, num_heads, mlp_ratio, patch, freq_dim
    [nets.decoder]     hires_embed, residual_embed, depth, num_heads, mlp_ratio, freq_dim
    [method]      name = "si" | "edm" | "crps"
    [method.si]   sigma_max, n_steps, schedule
    [method.edm]  sigma_max, sigma_min, rho, p_mean, p_std, n_steps, s_churn
    [method.crps] lambda_spec, lmax            (noise_dim is the predictive embedding width)
    [training]    steps, batch_size, base_lr, warmup_steps, cycles, reset_factor
    [decoder_training]  steps, batch_size, base_lr, warmup_steps, cycles
    [evaluation]  members, init_times, leads, convention, sample_chunk, spectra_lmax
"""
from __future__ import annotations

import copy
import hashlib
import json
import sys
from dataclasses import dataclass, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .generative import CRPSConfig, EDMConfig, SIConfig, TrainConfig
from .generative.methods import METHOD_CONFIGS
from .harmonics import max_degree
from .latent import DecoderTrainConfig
from .nets import DecoderNetConfig, PredictiveNetConfig
from .synthetic import OUProcessConfig
from .verify import PRINTED, STANDARD


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "out": "runs/desk",
    "data": {"n_steps": 4000, "train_fraction": 0.9},
    "latent": {"factor": 4},
    "nets": {
        "predictive": {"state_embed": 64, "history_embed": 32, "depth": 4, "num_heads": 4},
        "decoder": {"hires_embed": 48, "residual_embed": 16, "depth": 3, "num_heads": 4},
    },
    "method": {"name": "crps", "si": {}, "edm": {}, "crps": {}},
    # 3 cycles x 2000 steps, 200-step warmup, batch 16
    "training": {"steps": 6000, "batch_size": 16, "base_lr": 1e-3, "warmup_steps": 200, "cycles": 3,
                 "reset_factor": 0.8},
    "decoder_training": {"steps": 1500, "batch_size": 8, "base_lr": 1e-3, "warmup_steps": 100, "cycles": 1},
    "evaluation": {"members": 56, "init_times": 28, "leads": [1, 2, 5, 10, 20, 30, 40, 50, 60],
                   "convention": PRINTED, "sample_chunk": 512, "spectra_lmax": 24},
}

_OU_KEYS = {f.name for f in fields(OUProcessConfig)} - {"seed"}
_PRED_KEYS = {"state_embed", "history_embed", "depth", "num_heads", "mlp_ratio", "patch", "freq_dim"}
_DEC_KEYS = {"hires_embed", "residual_embed", "depth", "num_heads", "mlp_ratio", "freq_dim"}
_SCHEMA = {
    "data": _OU_KEYS | {"path", "n_steps", "train_fraction"},
    "latent": {"factor"},
    "training": {f.name for f in fields(TrainConfig)} - {"seed", "log_every"},
    "decoder_training": {f.name for f in fields(DecoderTrainConfig)} - {"seed", "log_every"},
    "evaluation": {"members", "init_times", "leads", "convention", "sample_chunk", "spectra_lmax"},
}
_METHOD_KEYS = {
    "si": {f.name for f in fields(SIConfig)},
    "edm": {f.name for f in fields(EDMConfig)},
    "crps": {"lambda_spec", "lmax"},
}

# config sections each stage depends on (upstream stages included)
STAGE_SECTIONS = {
    "data": ["seed", "data"],
    "decoder": ["seed", "data", "latent", "nets.decoder", "decoder_training"],
    "train": ["seed", "data", "latent", "nets.predictive", "method", "training"],
    "evaluation": ["seed", "data", "latent", "nets", "method", "training", "decoder_training", "evaluation"],
    "oracle": ["seed", "data", "evaluation"],
}


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def _check_keys(section: dict, allowed: set, where: str):
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")


@dataclass
class EvalConfig:
    members: int
    init_times: int
    leads: list[int]
    convention: str
    sample_chunk: int
    spectra_lmax: int


class RunConfig:
    """A validated run configuration; ``raw`` is the fully resolved dict that gets hashed."""

    def __init__(self, raw: dict, base_dir: Path | None = None):
        if "seed" not in raw:
            raise ConfigError("config must set an explicit top-level 'seed'")
        _check_keys(raw, {"seed", "out"} | set(DEFAULTS), "top level")
        for name, allowed in _SCHEMA.items():
            _check_keys(raw.get(name, {}), allowed, name)
        _check_keys(raw.get("nets", {}), {"predictive", "decoder"}, "nets")
        _check_keys(raw.get("method", {}), {"name", "si", "edm", "crps"}, "method")
        self.raw = _merge(DEFAULTS, raw)
        self.base_dir = base_dir or Path.cwd()
        try:
            self._build()
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def load(cls, path: str | Path, seed: int | None = None, out: str | None = None,
             method: str | None = None) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        try:
            raw = tomllib.loads(path.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
        return cls.from_dict(raw, seed, out, method, path.parent)

    @classmethod
    def from_dict(cls, raw: dict, seed: int | None = None, out: str | None = None,
                  method: str | None = None, base_dir: Path | None = None) -> "RunConfig":
        raw = copy.deepcopy(raw)
        if seed is not None:
            raw["seed"] = seed
        if out is not None:
            raw["out"] = out
        if method is not None:
            raw.setdefault("method", {})["name"] = method
        return cls(raw, base_dir)

    def _build(self):
        r = self.raw
        seed = r["seed"]
        if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        self.seed = seed
        self.out = Path(r["out"])
        d = dict(r["data"])
        self.data_path = d.pop("path", None)
        if self.data_path is not None:
            p = Path(self.data_path)
            self.data_path = p if p.is_absolute() else self.base_dir / p
            if not self.data_path.is_file():
                raise ConfigError(f"data.path {self.data_path} does not exist")
        self.n_steps = int(d.pop("n_steps"))
        self.train_fraction = float(d.pop("train_fraction"))
        if not 0 < self.train_fraction < 1:
            raise ConfigError("data.train_fraction must be in (0, 1)")
        self.ou = OUProcessConfig(**d, seed=seed)
        self.factor = int(r["latent"]["factor"])
        full = self.ou.grid
        if (full.n_lat - 1) % self.factor or full.n_lon % self.factor:
            raise ConfigError(f"latent factor {self.factor} does not divide the {full.shape} grid")
        latent = full.coarsen(self.factor)
        C = self.ou.n_channels
        method = r["method"]["name"]
        if method not in METHOD_CONFIGS:
            raise ConfigError(f"method.name must be one of {sorted(METHOD_CONFIGS)}, got {method!r}")
        self.method = method
        for name, allowed in _METHOD_KEYS.items():
            _check_keys(r["method"].get(name, {}), allowed, f"method.{name}")
        pred = dict(r["nets"]["predictive"])
        _check_keys(pred, _PRED_KEYS, "nets.predictive")
        if "patch" in pred:
            pred["patch"] = tuple(pred["patch"])
        embed = pred.get("state_embed", 64) + pred.get("history_embed", 32)
        self.predictive = PredictiveNetConfig(channels=C, latent_shape=latent.shape,
                                              noise_dim=embed if method == "crps" else 0, **pred)
        dec = dict(r["nets"]["decoder"])
        _check_keys(dec, _DEC_KEYS, "nets.decoder")
        self.decoder = DecoderNetConfig(channels=C, full_shape=full.shape, factor=self.factor, **dec)
        mp = r["method"].get(method, {})
        if method == "crps":
            self.method_cfg = CRPSConfig(noise_dim=embed, **mp)
            c = self.method_cfg
            if c.lambda_spec > 0 and c.lmax > max_degree(latent):
                raise ConfigError(f"method.crps.lmax={c.lmax} exceeds {max_degree(latent)}, the largest degree "
                                  f"the {latent.shape} latent grid resolves; lower it or set lambda_spec = 0")
        else:
            self.method_cfg = METHOD_CONFIGS[method](**mp)
        self.training = TrainConfig(**r["training"], seed=seed, log_every=0)
        self.decoder_training = DecoderTrainConfig(**r["decoder_training"], seed=seed, log_every=0)
        for t in (self.training, self.decoder_training):
            if t.steps < 1 or t.batch_size < 1 or t.cycles < 1 or t.steps // t.cycles <= t.warmup_steps:
                raise ConfigError("training needs steps/cycles > warmup_steps and positive batch size")
        e = dict(r["evaluation"])
        self.evaluation = EvalConfig(**e)
        ev = self.evaluation
        if ev.convention not in (PRINTED, STANDARD):
            raise ConfigError(f"evaluation.convention must be '{PRINTED}' or '{STANDARD}'")
        if ev.members < 2 or ev.init_times < 2 or not ev.leads or min(ev.leads) < 1:
            raise ConfigError("evaluation needs members >= 2, init_times >= 2 and positive leads")
        self.evaluation.leads = sorted(int(v) for v in ev.leads)

    # -- hashing -----------------------------------------------------------------------
    def section(self, dotted: str):
        node = self.raw
        for part in dotted.split("."):
            node = node[part]
        if dotted == "data" and self.data_path is not None:
            node = dict(node, path=str(self.data_path))
        return node

    def hash(self, stage: str | None = None) -> str:
        if stage is None:
            payload = {k: v for k, v in self.raw.items() if k != "out"}
        else:
            payload = {s: self.section(s) for s in STAGE_SECTIONS[stage]}
            if stage == "train" or stage == "evaluation":
                # only the active method's parameters matter
                m = self.raw["method"]
                payload["method"] = {"name": m["name"], m["name"]: m.get(m["name"], {})}
        text = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]
