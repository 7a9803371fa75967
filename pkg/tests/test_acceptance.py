"""Acceptance suite; every test prints one PASS/FAIL line for its criterion.

The desk pipeline (data, decoder, the three generative models, evaluations and
oracle scorecards) runs once per session through the CLI on
configs/acceptance.toml. Set ATLAS_LAB_ACCEPT_DIR to keep its outputs between
sessions; stages whose manifest matches the current config hash and file
digests are then reused. Budget on one core: about three hours from scratch.
"""
import csv
import hashlib
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch
from scipy import integrate
from scipy.special import sph_harm_y

from atlas_lab import runner
from atlas_lab.cli import EXIT_OK, main
from atlas_lab.config import RunConfig
from atlas_lab.diffable import grad_check_all
from atlas_lab.forecast import LatentForecaster, latent_oracle_check, normalized_rms, rollout, \
    stationary_normalized_rms
from atlas_lab.generative import EDMConfig, EDMMethod, MemberStreams, srk_integrate
from atlas_lab.grid import GridSpec
from atlas_lab.harmonics import SphCoeffs, analyze, power_spectrum, spectral_magnitudes, synthesize
from atlas_lab.latent import build_tuple_bank
from atlas_lab.nets import network_grad_check
from atlas_lab.synthetic import AnalyticOracle, LatentGaussianOracle
from atlas_lab.verify import STANDARD, crps_ensemble, ensemble_mean_rmse, paired_ttest, spread, \
    spread_skill_ratio

ROOT = Path(__file__).resolve().parents[1]
ACCEPT = ROOT / "configs" / "acceptance.toml"
TINY = ROOT / "configs" / "tiny.toml"
METHODS = ("si", "edm", "crps")
# init times scored at 4096 members; iterative samplers cost 20-50 net passes per draw
ORACLE_INITS = {"crps": 4, "si": 2, "edm": 1}


def verdict(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}")
    assert ok, detail


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _fresh(out, stage, expected):
    p = out / f"manifest-{stage}.json"
    if not p.is_file():
        return False
    man = json.loads(p.read_text())
    return man["stage_hash"] == expected and all(
        (out / n).is_file() and _sha(out / n) == d for n, d in man["outputs"].items())


def _cli(out, *args):
    t = time.perf_counter()
    assert main([args[0], "--config", str(ACCEPT), "--out", str(out), *args[1:]]) == EXIT_OK, args
    return time.perf_counter() - t


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    out = Path(os.environ.get("ATLAS_LAB_ACCEPT_DIR") or tmp_path_factory.mktemp("desk"))
    out.mkdir(parents=True, exist_ok=True)
    timings = {}
    base = RunConfig.load(ACCEPT, out=str(out))
    for stage, cmd in (("data", ["gen-data"]), ("decoder", ["train-decoder"])):
        if not _fresh(out, stage, base.hash(stage)):
            timings[stage] = _cli(out, *cmd)
    for m in METHODS:
        cfg = RunConfig.load(ACCEPT, out=str(out), method=m)
        if not _fresh(out, f"train-{m}", cfg.hash("train")):
            timings[f"train-{m}"] = _cli(out, "train", "--method", m)
        if not _fresh(out, f"evaluate-{m}", cfg.hash("evaluation")):
            timings[f"evaluate-{m}"] = _cli(out, "evaluate", "--method", m)
    if not _fresh(out, "evaluate-oracle", base.hash("oracle")):
        timings["evaluate-oracle"] = _cli(out, "evaluate", "--model", "oracle")
    for m in METHODS:
        timings[f"compare-{m}"] = _cli(out, "compare", "--method", m, "--a", m, "--b", "oracle")
    run = runner.Run(base)
    ds, stats, _ = run.load_data()
    return {"out": out, "timings": timings, "ds": ds, "stats": stats, "space": run.space(stats)}


def _model_run(desk, method):
    return runner.Run(RunConfig.load(ACCEPT, out=str(desk["out"]), method=method))


def _fmt_time(desk, key):
    t = desk["timings"].get(key)
    return "reused" if t is None else f"{t / 60:.1f} min"


# -- 1 ---------------------------------------------------------------------------------

def test_gradient_integrity(capsys):
    t = time.perf_counter()
    prim = grad_check_all(0)
    nets = {k: network_grad_check(k, seed=0) for k in ("predictive", "decoder")}
    dt = time.perf_counter() - t
    worst = max(prim, key=prim.get)
    ok = max(prim.values()) < runner.PRIMITIVE_TOL and max(nets.values()) < runner.NETWORK_TOL and dt < 120
    verdict(capsys, 1, ok, f"{len(prim)} primitives, worst {worst} {prim[worst]:.1e} (< 1e-5); "
                           f"nets {', '.join(f'{k} {v:.1e}' for k, v in nets.items())} (< 1e-3); {dt:.1f} s")


# -- 2 ---------------------------------------------------------------------------------

def _random_coeffs(rng, lmax):
    a = rng.standard_normal((lmax + 1, lmax + 1)) + 1j * rng.standard_normal((lmax + 1, lmax + 1))
    a[:, 0] = a[:, 0].real
    return a * np.tri(lmax + 1)


def test_harmonics(capsys):
    t = time.perf_counter()
    rng = np.random.default_rng(0)
    rt = 0.0
    for shape in ((19, 32), (73, 128), (9, 20)):
        g = GridSpec(*shape)
        lmax = (g.n_lat - 1) // 2
        a = _random_coeffs(rng, lmax)
        x = synthesize(SphCoeffs(a), g)
        back = analyze(x, g, lmax).a
        rt = max(rt, np.abs(back - a).max(), np.abs(synthesize(SphCoeffs(back), g) - x).max())
    g, lmax = GridSpec(73, 128), 36
    a = _random_coeffs(rng, lmax)
    x = synthesize(SphCoeffs(a), g)
    spectral = power_spectrum(x, g, lmax).sum()
    # direct integral of x^2 with a product rule exact for degree 2*lmax, fields from scipy harmonics
    mu, w = np.polynomial.legendre.leggauss(2 * lmax + 2)
    phi = 2 * np.pi * np.arange(4 * lmax + 4) / (4 * lmax + 4)
    theta, ph = np.meshgrid(np.arccos(mu), phi, indexing="ij")
    vals = np.zeros(theta.shape, dtype=complex)
    for l in range(lmax + 1):
        for m in range(-l, l + 1):
            vals += (a[l, m] if m >= 0 else (-1) ** m * np.conj(a[l, -m])) * sph_harm_y(l, m, theta, ph)
    direct = float(((vals.real**2).mean(axis=1) * 2 * np.pi * w).sum())
    parseval = abs(spectral - direct) / direct
    base = spectral_magnitudes(x, g, lmax)
    rot = max(np.abs(spectral_magnitudes(np.roll(x, s, axis=-1), g, lmax) - base).max() for s in (1, 5, 37, 64))
    dt = time.perf_counter() - t
    ok = rt < 1e-8 and parseval < 1e-8 and rot < 1e-8 and dt < 60
    verdict(capsys, 2, ok, f"round trip {rt:.1e}, Parseval rel {parseval:.1e}, rotation {rot:.1e} "
                           f"(all < 1e-8); {dt:.1f} s")


# -- 3 ---------------------------------------------------------------------------------

def test_latent_fidelity(desk, capsys):
    with open(desk["out"] / "latent-fidelity.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    ok = bool(rows) and all(float(r["decoder_rmse"]) < float(r["bilinear_rmse"]) for r in rows)
    detail = ", ".join(f"{r['channel']} {float(r['decoder_rmse']):.4f}/{float(r['bilinear_rmse']):.4f}"
                       for r in rows)
    verdict(capsys, 3, ok, f"decoder/bilinear RMSE {detail}; decoder stage {_fmt_time(desk, 'decoder')}")


# -- 4 ---------------------------------------------------------------------------------

@pytest.mark.parametrize("method", METHODS)
def test_gaussian_oracle_equivalence(desk, method, capsys):
    run = _model_run(desk, method)
    ds, st, space = desk["ds"], desk["stats"], desk["space"]
    model, _ = run.load_model(method)
    oracle = LatentGaussianOracle(ds.config, space.latent, st.state_mean, st.state_std, st.res_mean, st.res_std)
    inits = runner.init_indices(run.cfg, ds)
    pick = inits[np.linspace(0, inits.size - 1, ORACLE_INITS[method]).round().astype(int)]
    bank = build_tuple_bank(ds.frames[pick.min() - 1: pick.max() + 2], space)
    zm1, z0, r1 = bank.latent_batch(pick - pick.min())
    t = time.perf_counter()
    chk = latent_oracle_check(model, oracle, zm1, z0, members=4096, seed=run.cfg.seed, r1=r1)
    dt = time.perf_counter() - t
    e, c, band = chk.ermse_ratio.max(), chk.crps_ratio.max(), chk.std_band_fraction
    ok = e <= 1.15 and band >= 0.9 and c <= 1.15
    verdict(capsys, 4, ok, f"{method}: ERMSE ratio {e:.3f} (<= 1.15), std in band {band:.1%} (>= 90%), "
                           f"CRPS ratio {c:.3f} (<= 1.15); {chk.inits} init(s) x 4096; realized truth "
                           f"ERMSE {chk.realized_ermse_ratio.max():.3f} CRPS {chk.realized_crps_ratio.max():.3f}; "
                           f"train {_fmt_time(desk, 'train-' + method)}, sampling {dt / 60:.1f} min")


# -- 5 ---------------------------------------------------------------------------------

class _CoarsenedIncrements:
    """Member streams replaying fixed fine Brownian paths at a coarser step."""

    def __init__(self, dw, n, rng):
        # dw: (n_fine, P) standard normals of the fine grid; sums give the coarse increments
        k = dw.shape[0] // n
        self.z = dw.reshape(n, k, -1).sum(axis=1) / math.sqrt(k)
        self.rng, self.i = rng, 0

    def __len__(self):
        return self.z.shape[1]

    def normal(self, shape):
        out = torch.from_numpy(self.z[self.i])
        self.i += 1
        return out

    def signs(self):
        return torch.from_numpy(self.rng.choice([-1.0, 1.0], self.z.shape[1]))


def _weak_errors(diffusion, steps, ref_steps=256, paths=2_000_000, chunk=100_000):
    """E[X_1^2] at each step count minus a fine reference, common random numbers."""
    rng = np.random.default_rng(0)
    acc = np.zeros(len(steps) + 1)
    for _ in range(paths // chunk):
        dw = rng.standard_normal((ref_steps, chunk))
        for i, n in enumerate(list(steps) + [ref_steps]):
            x0 = torch.full((chunk,), 0.5, dtype=torch.float64)
            x = srk_integrate(lambda x, t: -x, diffusion, x0, n, _CoarsenedIncrements(dw, n, rng))
            acc[i] += (x**2).sum().item()
    m = acc / paths
    return np.abs(m[:-1] - m[-1])


def test_sampler_numerics(capsys):
    t = time.perf_counter()
    steps = np.array([2, 4, 8, 16, 32])
    err = _weak_errors(lambda x, t: 0.5 * (1 + 0.5 * torch.sin(2 * x)), steps)
    slope = np.polyfit(np.log(1 / steps), np.log(err), 1)[0]
    add = _weak_errors(lambda x, t: torch.full_like(x, 0.5), steps, paths=400_000)
    add_slope = np.polyfit(np.log(1 / steps), np.log(add), 1)[0]
    dt_srk = time.perf_counter() - t

    # EDM sampler with the exact denoiser of N(0, I) data: D(x; sigma) = x / (1 + sigma^2)
    method = EDMMethod(EDMConfig())
    sc = method.schedule

    def net(u, z0, zm1, c_noise):
        sigma = torch.exp(4 * c_noise).reshape(-1, 1, 1, 1)
        x = u / sc.c_in(sigma)
        return (x / (1 + sigma**2) - sc.c_skip(sigma) * x) / sc.c_out(sigma)

    n = 4096
    z = torch.zeros(n, 1, 2, 2)
    draws = method.sample(net, z, z, MemberStreams(0, n)).double().reshape(n, -1).numpy()
    mean_z = np.abs(draws.mean(axis=0)) / (1 / math.sqrt(n))
    var_z = np.abs(draws.var(axis=0, ddof=1) - 1) / math.sqrt(2 / (n - 1))
    dt = time.perf_counter() - t
    ok = 0.8 <= slope <= 1.2 and mean_z.max() < 3 and var_z.max() < 3 and dt < 300
    verdict(capsys, 5, ok, f"SRK weak slope {slope:.2f} (0.8-1.2) on dX = -X dt + 0.5(1 + 0.5 sin 2X) dW "
                           f"[additive-noise slope {add_slope:.2f}, info]; EDM N(0, I) worst |mean| "
                           f"{mean_z.max():.2f} and |var - 1| {var_z.max():.2f} stderr (< 3); "
                           f"{dt:.0f} s (SRK {dt_srk:.0f} s)")


# -- 6 ---------------------------------------------------------------------------------

@pytest.mark.parametrize("method", METHODS)
def test_rollout_stability(desk, method, capsys):
    run = _model_run(desk, method)
    ds, st, space = desk["ds"], desk["stats"], desk["space"]
    model, _ = run.load_model(method)
    dec, _ = run.load_decoder(st)
    k = int(runner.init_indices(run.cfg, ds)[0])
    t = time.perf_counter()
    fc = rollout(LatentForecaster(model, dec, space), ds.frames[k - 1], ds.frames[k], ds.start_step + k, 60, 8,
                 seed=run.cfg.seed)
    dt = time.perf_counter() - t
    ratio = normalized_rms(fc.states[:, 1:], space) / stationary_normalized_rms(AnalyticOracle(ds.config), space)
    ok = not fc.failed and np.isfinite(ratio).all() and ratio.min() >= 0.3 and ratio.max() <= 3.0 and dt < 600
    verdict(capsys, 6, ok, f"{method}: RMS / stationary in [{np.nanmin(ratio):.2f}, {np.nanmax(ratio):.2f}] "
                           f"(within [0.3, 3]) over 60 leads x 8 members, diverged {len(fc.failed)}; {dt:.0f} s")


# -- 7 ---------------------------------------------------------------------------------

def _brier_integral(ens, y):
    """Integral of (F_M(x) - 1{x >= y})^2 over the real line, piecewise on the sorted knots."""
    knots = np.sort(np.append(ens, y))
    total = 0.0
    for a, b in zip(knots[:-1], knots[1:]):
        if b > a:
            mid = 0.5 * (a + b)
            total += integrate.quad(lambda x: ((ens <= x).mean() - float(x >= y)) ** 2, a, b, points=[mid])[0]
    return total


def test_metrics_exactness(capsys):
    t = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = 0.0
    for M in (2, 3, 5, 11, 32):
        for _ in range(5):
            ens, y = rng.standard_normal(M), rng.standard_normal()
            fair = crps_ensemble(ens[:, None], np.array([y]), STANDARD)[0]
            # fair = empirical-CDF CRPS minus the finite-ensemble term sum|xi - xj| / (2 M^2 (M - 1))
            ref = _brier_integral(ens, y) - np.abs(ens[:, None] - ens[None]).sum() / (2 * M * M * (M - 1))
            worst = max(worst, abs(fair - ref))
    two = np.array([0.0, 2.0]).reshape(2, 1, 1, 1, 1)
    zero = np.zeros((1, 1, 1, 1))
    hand = (crps_ensemble(np.array([[0.0], [2.0]]), np.array([1.0]), STANDARD)[0] == 0.0
            and ensemble_mean_rmse(two, zero)[0] == 1.0
            and abs(spread(two)[0] - math.sqrt(2.0)) < 1e-15
            and spread(np.ones((3, 1, 1, 1, 1)))[0] == 0.0
            and abs(spread_skill_ratio(1.0, 1.0, 56) - math.sqrt(57 / 56)) < 1e-15)
    M = 56
    ens = rng.standard_normal((M, 28, 1, 19, 32))
    truth = rng.standard_normal((28, 1, 19, 32))
    ssr = spread_skill_ratio(spread(ens), ensemble_mean_rmse(ens, truth), M)[0]
    r = paired_ttest([1, 2, 3], [0, 0, 0])
    dt = time.perf_counter() - t
    ok = (worst < 1e-9 and hand and 0.95 <= ssr <= 1.05 and abs(r.t - 2 * math.sqrt(3)) < 1e-12 and r.df == 2
          and abs(r.p - 0.0742) < 1e-3 and dt < 120)
    verdict(capsys, 7, ok, f"fair CRPS vs Brier integral {worst:.1e} (< 1e-9); hand cases {'ok' if hand else 'off'}; "
                           f"SSR(M=56) {ssr:.4f}; t-test t {r.t:.6f} df {r.df} p {r.p:.4f}; {dt:.1f} s")


# -- 8 ---------------------------------------------------------------------------------

@pytest.mark.parametrize("method", METHODS)
def test_propriety_guard(desk, method, capsys):
    with open(desk["out"] / f"scorecard-{method}-vs-oracle.csv", newline="") as f:
        rows = [r for r in csv.DictReader(f) if r["metric"] == "crps"]
    sig = [r for r in rows if r["significant"] == "True"]
    wins = [r for r in sig if float(r["mean_diff"]) < 0]
    ok = bool(rows) and not wins
    verdict(capsys, 8, ok, f"{method} vs oracle: {len(wins)} significant CRPS wins for the model, "
                           f"{len(sig) - len(wins)} for the oracle, {len(rows)} cells; "
                           f"evaluate {_fmt_time(desk, 'evaluate-' + method)}")


# -- 9 ---------------------------------------------------------------------------------

def _tiny_pipeline(out):
    cmds = [["gen-data"], ["train-decoder"], ["grad-check"]]
    for m in METHODS:
        cmds += [["train", "--method", m], ["evaluate", "--method", m], ["forecast", "--method", m, "--init", "1"],
                 ["spectra", "--method", m]]
    cmds += [["evaluate", "--model", "oracle"], ["forecast", "--model", "oracle"], ["compare", "--b", "oracle"],
             ["compare", "--method", "si", "--a", "si", "--b", "edm"]]
    for cmd in cmds:
        assert main([cmd[0], "--config", str(TINY), "--out", str(out), *cmd[1:]]) == EXIT_OK, cmd
    return {p.name: p.read_bytes() for p in sorted(out.iterdir()) if p.name != ".lock"}


def test_determinism(desk, tmp_path, capsys):
    a = _tiny_pipeline(tmp_path / "a")
    # advance the global RNGs so hidden dependence on them shows up as a difference
    torch.randn(17)
    np.random.rand(17)
    b = _tiny_pipeline(tmp_path / "b")
    differ = sorted(n for n in a.keys() | b.keys() if a.get(n) != b.get(n))
    out = desk["out"]
    before = {p.name: p.read_bytes() for p in out.glob("*crps*")}
    _cli(out, "evaluate", "--method", "crps")
    desk_differ = sorted(n for n, v in before.items() if (out / n).read_bytes() != v)
    ok = not differ and not desk_differ
    verdict(capsys, 9, ok, f"{len(a)} files from every command byte-identical across two runs "
                           f"(differing: {differ or 'none'}); desk evaluate rerun differing: {desk_differ or 'none'}")
