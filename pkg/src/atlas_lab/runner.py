"""Pipeline stages behind the command-line interface.

Every stage reads its inputs from, and writes its outputs to, the run's output
directory. Each output set is described by a ``manifest-<stage>.json`` that
records the stage hash (the config sections the stage depends on), upstream
hashes, the seed, library versions and a SHA-256 of every file written.
Nothing time- or host-dependent is recorded, so reruns are byte-identical.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import platform
from importlib import metadata
from pathlib import Path

import numpy as np
import torch

from . import harmonics
from .config import ConfigError, RunConfig
from .diffable import grad_check_all
from .forecast import LatentForecaster, OracleForecaster, evaluate, normalized_rms, rollout, stationary_normalized_rms
from .generative import GenerativeModel, train_generative
from .latent import (
    Decoder,
    LatentSpace,
    NormStats,
    area_rmse,
    bilinear_reconstruct,
    build_tuple_bank,
    compute_norm_stats,
    train_decoder,
)
from .nets import network_grad_check
from .synthetic import AnalyticOracle, generate, load_dataset, save_dataset
from .verify import MetricsReport, scorecard, scorecard_csv

log = logging.getLogger(__name__)

PRIMITIVE_TOL = 1e-5
NETWORK_TOL = 1e-3


class MissingArtifact(FileNotFoundError):
    pass


class HashMismatch(RuntimeError):
    pass


def _versions() -> dict:
    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return {"atlas_lab": pkg, "python": platform.python_version(), "numpy": np.__version__,
            "torch": torch.__version__}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Run:
    def __init__(self, cfg: RunConfig, override_hash_check: bool = False):
        self.cfg = cfg
        self.out = cfg.out
        self.override = override_hash_check
        self.out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.out / name

    # -- writing -----------------------------------------------------------------------
    def write_bytes(self, name: str, data: bytes) -> str:
        tmp = self.path(name + ".tmp")
        tmp.write_bytes(data)
        tmp.replace(self.path(name))
        return name

    def write_text(self, name: str, text: str) -> str:
        return self.write_bytes(name, text.encode("utf-8"))

    def write_csv(self, name: str, header: list[str], rows, stage_hash: str) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(header + ["config_hash"])
        for row in rows:
            wr.writerow([_cell(v) for v in row] + [stage_hash])
        return self.write_text(name, buf.getvalue())

    def write_manifest(self, stage: str, stage_hash: str, outputs: list[str], upstream: dict | None = None,
                       extra: dict | None = None) -> None:
        man = {
            "stage": stage,
            "stage_hash": stage_hash,
            "config_hash": self.cfg.hash(),
            "seed": self.cfg.seed,
            "upstream": upstream or {},
            "versions": _versions(),
            "outputs": {n: _sha256(self.path(n)) for n in sorted(outputs)},
            **(extra or {}),
        }
        self.write_text(f"manifest-{stage}.json", json.dumps(man, indent=2, sort_keys=True) + "\n")

    # -- reading -----------------------------------------------------------------------
    def require(self, stage: str, expected_hash: str) -> dict:
        """Load an upstream manifest, checking its files exist and its hash matches."""
        p = self.path(f"manifest-{stage}.json")
        if not p.is_file():
            raise MissingArtifact(f"missing stage '{stage}': {p} not found; run that stage first")
        man = json.loads(p.read_text(encoding="utf-8"))
        for name in man["outputs"]:
            if not self.path(name).is_file():
                raise MissingArtifact(f"missing stage '{stage}': output {name} not found")
        if man["stage_hash"] != expected_hash:
            msg = (f"stage '{stage}' was produced with config hash {man['stage_hash']}, "
                   f"current config gives {expected_hash}")
            if not self.override:
                raise HashMismatch(msg + " (pass --override-hash-check to proceed anyway)")
            log.warning("%s; continuing because of --override-hash-check", msg)
        return man

    # -- shared loaders ----------------------------------------------------------------
    def load_data(self):
        up = self.require("data", self.cfg.hash("data"))
        src = Path(up["dataset"])
        ds = load_dataset(src if src.is_absolute() else self.path(str(src)))
        stats = NormStats.load(self.path("norm.json"))
        return ds, stats, {"data": up["stage_hash"]}

    def space(self, stats: NormStats) -> LatentSpace:
        return LatentSpace.from_factor(self.cfg.ou.grid, self.cfg.factor, stats)

    def load_decoder(self, stats: NormStats):
        up = self.require("decoder", self.cfg.hash("decoder"))
        return Decoder.load(self.path("decoder.ckpt"), stats), up["stage_hash"]

    def load_model(self, method: str):
        up = self.require(f"train-{method}", self.cfg.hash("train"))
        return GenerativeModel.load(self.path(f"model-{method}.ckpt")), up["stage_hash"]


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return "nan" if not np.isfinite(v) else repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def _check_grid(cfg: RunConfig, ds):
    if ds.grid != cfg.ou.grid or ds.channel_names != cfg.ou.channel_names:
        raise ConfigError(f"dataset grid {ds.grid.shape} / channels {ds.channel_names} do not match the config")


# -- stages ----------------------------------------------------------------------------

def gen_data(run: Run) -> None:
    cfg = run.cfg
    h = cfg.hash("data")
    outputs = []
    if cfg.data_path is not None:
        ds = load_dataset(cfg.data_path)
        _check_grid(cfg, ds)
        dataset = str(cfg.data_path)
    else:
        ds = generate(cfg.ou, cfg.n_steps, cfg.seed, cfg.train_fraction)
        save_dataset(ds, run.path("data.atls"))
        outputs += ["data.atls", "data.json"]
        dataset = "data.atls"
    stats = compute_norm_stats(ds.train(), ds.channel_names)
    stats.save(run.path("norm.json"))
    outputs.append("norm.json")
    run.write_manifest("data", h, outputs, extra={"dataset": dataset, "train_end": ds.train_end,
                                                 "n_steps": ds.n_steps})


def train_decoder_stage(run: Run) -> None:
    cfg = run.cfg
    ds, stats, up = run.load_data()
    h = cfg.hash("decoder")
    space = run.space(stats)
    bank = build_tuple_bank(ds.frames, space, ds.start_step)
    torch.manual_seed(cfg.seed)
    dec, curve = train_decoder(ds.train(), bank, space, cfg.decoder, cfg.decoder_training,
                               cfg.ou.diurnal_period)
    dec.save(run.path("decoder.ckpt"))
    outs = ["decoder.ckpt", "decoder.json"]
    outs.append(run.write_csv("decoder-loss.csv", ["step", "loss"], enumerate(curve), h))
    # held-out reconstruction of x_{j+1} from (x_j, r_{j+1}) against the bilinear baseline
    idx = np.arange(ds.train_end, ds.n_steps - 1)
    se_dec = se_bil = 0.0
    for i in range(0, idx.size, 32):
        j = idx[i:i + 32]
        x0, x1 = ds.frames[j].astype(np.float64), ds.frames[j + 1].astype(np.float64)
        r = bank.r[j].astype(np.float64)
        se_dec = se_dec + area_rmse(dec.reconstruct(x0, r, bank.steps[j]), x1, space.full) ** 2 * j.size
        se_bil = se_bil + area_rmse(bilinear_reconstruct(x0, r, space), x1, space.full) ** 2 * j.size
    rm_dec, rm_bil = np.sqrt(se_dec / idx.size), np.sqrt(se_bil / idx.size)
    rows = [(n, a, b) for n, a, b in zip(ds.channel_names, rm_dec, rm_bil)]
    outs.append(run.write_csv("latent-fidelity.csv", ["channel", "decoder_rmse", "bilinear_rmse"], rows, h))
    run.write_manifest("decoder", h, outs, up)


def train_stage(run: Run) -> None:
    cfg = run.cfg
    ds, stats, up = run.load_data()
    _, dec_hash = run.load_decoder(stats)
    up["decoder"] = dec_hash
    h = cfg.hash("train")
    space = run.space(stats)
    bank = build_tuple_bank(ds.frames[: ds.train_end], space, ds.start_step)
    m_z = np.mean(bank.z.astype(np.float64) ** 2, axis=(0, 2, 3))
    m_r = np.mean(bank.r.astype(np.float64) ** 2, axis=(0, 2, 3))
    model = GenerativeModel(cfg.method, cfg.predictive, cfg.method_cfg, space.latent, m_z, m_r, seed=cfg.seed)
    curve = train_generative(model, bank, cfg.training)
    name = f"model-{cfg.method}.ckpt"
    model.save(run.path(name))
    outs = [name, name.replace(".ckpt", ".json")]
    outs.append(run.write_csv(f"train-loss-{cfg.method}.csv", ["step", "loss"], enumerate(curve), h))
    run.write_manifest(f"train-{cfg.method}", h, outs, up)


def _forecaster(run: Run, name: str, ds, stats):
    """``(forecaster, upstream hashes, stage hash)`` for a method name or ``oracle``."""
    cfg = run.cfg
    if name == "oracle":
        if ds.config is None:
            raise ConfigError("the analytic oracle needs a dataset generated from a known OU config")
        return OracleForecaster(AnalyticOracle(ds.config)), {}, cfg.hash("oracle")
    if name != cfg.method:
        raise ConfigError(f"model '{name}' differs from method.name '{cfg.method}'; pass --method {name}")
    model, train_hash = run.load_model(name)
    dec, dec_hash = run.load_decoder(stats)
    fc = LatentForecaster(model, dec, run.space(stats), chunk=cfg.evaluation.sample_chunk)
    return fc, {f"train-{name}": train_hash, "decoder": dec_hash}, cfg.hash("evaluation")


def init_indices(cfg: RunConfig, ds) -> np.ndarray:
    """Evenly spaced init times inside the test split, each with history and verifying truth."""
    lo, hi = ds.train_end + 1, ds.n_steps - 1 - max(cfg.evaluation.leads)
    T = cfg.evaluation.init_times
    if hi - lo + 1 < T:
        raise ConfigError(f"test split too short for {T} init times at lead {max(cfg.evaluation.leads)}")
    return np.unique(np.linspace(lo, hi, T).round().astype(int))


def forecast_stage(run: Run, name: str, init: int) -> None:
    cfg = run.cfg
    ds, stats, up = run.load_data()
    fc, more, h = _forecaster(run, name, ds, stats)
    up.update(more)
    inits = init_indices(cfg, ds)
    if not 0 <= init < inits.size:
        raise ConfigError(f"--init must be in [0, {inits.size})")
    k = int(inits[init])
    ev = cfg.evaluation
    res = rollout(fc, ds.frames[k - 1], ds.frames[k], ds.start_step + k, max(ev.leads), ev.members, cfg.seed)
    arr = f"forecast-{name}.npy"
    buf = io.BytesIO()
    np.save(buf, res.states.astype(np.float32))
    run.write_bytes(arr, buf.getvalue())
    space = run.space(stats)
    rms = normalized_rms(res.states, space)  # (M, L+1, C)
    ref = stationary_normalized_rms(AnalyticOracle(ds.config), space) if ds.config is not None else None
    rows = []
    for m in range(rms.shape[0]):
        for lead in range(rms.shape[1]):
            for c, ch in enumerate(ds.channel_names):
                ratio = rms[m, lead, c] / ref[c] if ref is not None else float("nan")
                rows.append((m, lead, ch, rms[m, lead, c], ratio))
    csv_name = run.write_csv(f"forecast-{name}.csv", ["member", "lead", "channel", "normalized_rms",
                                                     "stationary_ratio"], rows, h)
    run.write_manifest(f"forecast-{name}", h, [arr, csv_name], up,
                       {"init_index": k, "diverged": {str(m): l for m, l in res.failed.items()}})


def evaluate_stage(run: Run, name: str) -> None:
    cfg = run.cfg
    ds, stats, up = run.load_data()
    fc, more, h = _forecaster(run, name, ds, stats)
    up.update(more)
    ev = cfg.evaluation
    inits = init_indices(cfg, ds)
    rep = evaluate(fc, ds.frames, ds.start_step, inits, ev.leads, ev.members, cfg.seed, ds.channel_names,
                   ev.convention, ds.grid)
    rows = []
    for i, lead in enumerate(rep.leads):
        for c, ch in enumerate(rep.channel_names):
            rows.append((ch, lead, rep.crps[i, c], rep.ermse[i, c], rep.spread[i, c], rep.ssr[i, c]))
    outs = [run.write_csv(f"metrics-{name}.csv", ["channel", "lead", "crps", "ermse", "spread", "ssr"], rows, h)]
    per = []
    for t, k in enumerate(inits):
        for i, lead in enumerate(rep.leads):
            for c, ch in enumerate(rep.channel_names):
                per.append((int(k), ch, lead, rep.crps_per_init[t, i, c], rep.ermse_per_init[t, i, c]))
    outs.append(run.write_csv(f"metrics-{name}-per-init.csv", ["init", "channel", "lead", "crps", "ermse"], per, h))
    summary = rep.summary()
    summary.update({"model": name, "config_hash": h, "inits": inits.tolist()})
    outs.append(run.write_text(f"metrics-{name}.json", json.dumps(summary, indent=2, sort_keys=True) + "\n"))
    run.write_manifest(f"evaluate-{name}", h, outs, up)


def _load_report(run: Run, name: str) -> tuple[MetricsReport, dict]:
    p = run.path(f"metrics-{name}.json")
    per_p = run.path(f"metrics-{name}-per-init.csv")
    if not p.is_file() or not per_p.is_file():
        raise MissingArtifact(f"missing stage 'evaluate' for '{name}': run `evaluate --model {name}` first")
    meta = json.loads(p.read_text(encoding="utf-8"))
    names, leads, inits = meta["channels"], meta["leads"], meta["inits"]
    T, L, C = len(inits), len(leads), len(names)
    crps, ermse = np.zeros((T, L, C)), np.zeros((T, L, C))
    with open(per_p, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            t, i, c = inits.index(int(row["init"])), leads.index(int(row["lead"])), names.index(row["channel"])
            crps[t, i, c], ermse[t, i, c] = float(row["crps"]), float(row["ermse"])
    erm = np.sqrt((ermse**2).mean(axis=0))
    rep = MetricsReport(names, meta["members"], leads, crps.mean(axis=0), erm, erm * np.nan, erm * np.nan,
                        crps, ermse, meta["crps_convention"], {})
    return rep, meta


def compare_stage(run: Run, a: str, b: str) -> None:
    ra, ma = _load_report(run, a)
    rb, mb = _load_report(run, b)
    for key in ("grid", "channels", "leads", "inits", "crps_convention"):
        if ma[key] != mb[key]:
            raise ConfigError(f"cannot compare '{a}' and '{b}': {key} differs ({ma[key]} vs {mb[key]})")
    h = hashlib.sha256(f"{ma['config_hash']}:{mb['config_hash']}".encode()).hexdigest()[:16]
    rows = scorecard(ra, rb, "crps") + scorecard(ra, rb, "ermse")
    text = scorecard_csv(rows)
    lines = text.splitlines()
    body = [lines[0] + ",config_hash"] + [ln + "," + h for ln in lines[1:]]
    name = run.write_text(f"scorecard-{a}-vs-{b}.csv", "\n".join(body) + "\n")
    wins = [r for r in rows if r["metric"] == "crps" and r["significant"] and r["mean_diff"] < 0]
    if wins:
        log.warning("'%s' significantly beats '%s' on CRPS in %d cell(s)", a, b, len(wins))
    run.write_manifest(f"compare-{a}-vs-{b}", h, [name], {a: ma["config_hash"], b: mb["config_hash"]},
                       {"significant_crps_wins": len(wins)})


def grad_check_stage(run: Run) -> bool:
    rows = []
    for name, err in grad_check_all(run.cfg.seed).items():
        rows.append(("primitive", name, err, PRIMITIVE_TOL, err < PRIMITIVE_TOL))
    for kind in ("predictive", "decoder"):
        err = network_grad_check(kind, seed=run.cfg.seed)
        rows.append(("network", kind, err, NETWORK_TOL, err < NETWORK_TOL))
    h = hashlib.sha256(str(run.cfg.seed).encode()).hexdigest()[:16]
    name = run.write_csv("grad-check.csv", ["kind", "name", "rel_error", "tolerance", "passed"], rows, h)
    ok = all(r[-1] for r in rows)
    run.write_manifest("grad-check", h, [name], extra={"passed": ok})
    return ok


def spectra_stage(run: Run, name: str) -> None:
    cfg = run.cfg
    ds, stats, up = run.load_data()
    lmax = min(cfg.evaluation.spectra_lmax, harmonics.max_degree(ds.grid))
    fpath = run.path(f"forecast-{name}.npy")
    man = run.require(f"forecast-{name}", cfg.hash("oracle" if name == "oracle" else "evaluation"))
    states = np.load(fpath)
    rows = []
    truth = stats.normalize(ds.test().astype(np.float64))
    p_truth = harmonics.power_spectrum(truth, ds.grid, lmax).mean(axis=0)
    for c, ch in enumerate(ds.channel_names):
        for l in range(lmax + 1):
            rows.append(("truth", 0, ch, l, p_truth[c, l]))
    for lead in [0] + cfg.evaluation.leads:
        x = states[:, lead].astype(np.float64)
        x = x[np.isfinite(x).all(axis=(1, 2, 3))]
        p = harmonics.power_spectrum(stats.normalize(x), ds.grid, lmax).mean(axis=0)
        for c, ch in enumerate(ds.channel_names):
            for l in range(lmax + 1):
                rows.append((f"forecast-{name}", lead, ch, l, p[c, l]))
    h = man["stage_hash"]
    out = run.write_csv(f"spectra-{name}.csv", ["source", "lead", "channel", "l", "power"], rows, h)
    up[f"forecast-{name}"] = h
    run.write_manifest(f"spectra-{name}", h, [out], up)
