import numpy as np
import pytest
import torch

from atlas_lab.forecast import (
    LatentForecaster,
    OracleForecaster,
    evaluate,
    expected_fair_crps,
    latent_oracle_check,
    normalized_rms,
    rollout,
    stationary_normalized_rms,
)
from atlas_lab.latent import Decoder, LatentSpace, build_tuple_bank, compute_norm_stats
from atlas_lab.nets import MICRO_DECODER, DecoderNet
from atlas_lab.synthetic import AnalyticOracle, LatentGaussianOracle, OUProcessConfig, generate
from atlas_lab.verify import STANDARD

CFG = OUProcessConfig(n_lat=17, n_lon=32, lmax=8, nu=1.0 / 200.0, channel_names=["a", "b"])


@pytest.fixture(scope="module")
def data():
    ds = generate(CFG, 400, seed=2)
    stats = compute_norm_stats(ds.train(), ds.channel_names)
    space = LatentSpace.from_factor(CFG.grid, 4, stats)
    return ds, space


def test_zero_step_rollout_returns_initial_state(data):
    ds, _ = data
    fc = rollout(OracleForecaster(AnalyticOracle(CFG)), ds.frames[0], ds.frames[1], 1, 0, 3, seed=0)
    assert fc.states.shape == (3, 1) + ds.frames.shape[1:]
    np.testing.assert_array_equal(fc.states[:, 0], np.repeat(ds.frames[1][None].astype(np.float64), 3, axis=0))
    with pytest.raises(ValueError):
        rollout(OracleForecaster(AnalyticOracle(CFG)), ds.frames[0], ds.frames[1], 1, -1, 3, seed=0)


def test_oracle_rollout_is_stable_and_deterministic(data):
    ds, space = data
    fc_ = OracleForecaster(AnalyticOracle(CFG))
    a = rollout(fc_, ds.frames[9], ds.frames[10], 10, 60, 8, seed=4)
    assert a.failed == {} and a.leads == 60 and a.members == 8
    rms = normalized_rms(a.states, space)
    ref = stationary_normalized_rms(AnalyticOracle(CFG), space)
    ratio = rms / ref
    assert ratio.min() > 0.3 and ratio.max() < 3.0
    b = rollout(fc_, ds.frames[9], ds.frames[10], 10, 60, 8, seed=4)
    assert a.states.tobytes() == b.states.tobytes()
    # a member's trajectory does not depend on how many members run alongside it
    c = rollout(fc_, ds.frames[9], ds.frames[10], 10, 5, 3, seed=4)
    np.testing.assert_array_equal(c.states, a.states[:3, :6])
    d = rollout(fc_, ds.frames[9], ds.frames[10], 10, 5, 3, seed=5)
    assert not np.array_equal(d.states, c.states)


class FlakyForecaster:
    """Oracle steps, except member 2 blows up at lead 3."""

    def __init__(self):
        self.inner = OracleForecaster(AnalyticOracle(CFG))

    def advance(self, x_prev, x_cur, step, members, seed, key):
        out = self.inner.advance(x_prev, x_cur, step, members, seed, key)
        if key[1] == 3 and 2 in members:
            out[members.index(2)] = np.nan
        return out


def test_diverged_member_is_dropped(data):
    ds, _ = data
    fc = rollout(FlakyForecaster(), ds.frames[0], ds.frames[1], 1, 6, 4, seed=0)
    assert fc.failed == {2: 3}
    assert np.isnan(fc.states[2, 3:]).all() and np.isfinite(fc.states[2, :3]).all()
    assert np.isfinite(np.delete(fc.states, 2, axis=0)).all()
    clean = rollout(OracleForecaster(AnalyticOracle(CFG)), ds.frames[0], ds.frames[1], 1, 6, 4, seed=0)
    np.testing.assert_array_equal(np.delete(fc.states, 2, axis=0), np.delete(clean.states, 2, axis=0))


def test_evaluate_report(data):
    ds, _ = data
    frames = ds.frames
    fc = OracleForecaster(AnalyticOracle(CFG))
    rep = evaluate(fc, frames, 0, [5, 40, 80], [1, 4], 6, seed=1, channel_names=ds.channel_names,
                   convention=STANDARD, grid=CFG.grid)
    assert rep.leads == [1, 4] and rep.members == 6
    assert rep.crps_per_init.shape == (3, 2, 2)
    assert rep.meta["grid"] == [17, 32] and rep.meta["diverged"] == {}
    again = evaluate(fc, frames, 0, [5, 40, 80], [1, 4], 6, seed=1, channel_names=ds.channel_names,
                     convention=STANDARD, grid=CFG.grid)
    assert again.to_csv() == rep.to_csv()
    with pytest.raises(ValueError):
        evaluate(fc, frames, 0, [0], [1], 6, seed=1, channel_names=ds.channel_names)
    with pytest.raises(ValueError):
        evaluate(fc, frames, 0, [398], [4], 6, seed=1, channel_names=ds.channel_names)
    with pytest.raises(ValueError):
        evaluate(fc, frames, 0, [5], [1], 1, seed=1, channel_names=ds.channel_names)


class FragileModel:
    """Stands in for a sampler whose integration fails for member 1."""

    def sample(self, z0, zm1, streams, n_steps=None, chunk=512):
        if 1 in streams.members:
            raise FloatingPointError("boom")
        return torch.zeros_like(z0)


def test_latent_forecaster_isolates_failing_member(data):
    ds, space = data
    torch.manual_seed(0)
    dec = Decoder(DecoderNet(MICRO_DECODER), space, period=4)
    fc = LatentForecaster(FragileModel(), dec, space)
    x = np.repeat(ds.frames[5:7].astype(np.float64)[:, None], 3, axis=1)
    out = fc.advance(x[0], x[1], 6, [0, 1, 2], seed=0, key=(6, 1))
    assert np.isnan(out[1]).all()
    # zero-initialized decoder head: a zero latent residual maps to the mean residual
    expected = x[1][0] + np.asarray(space.stats.res_mean)[:, None, None]
    np.testing.assert_allclose(out[0], expected, atol=1e-6)
    np.testing.assert_allclose(out[2], expected, atol=1e-6)


class OracleSampler:
    """Draws from the exact latent conditional through the member streams."""

    def __init__(self, oracle):
        self.oracle = oracle
        w, v = np.linalg.eigh(oracle.cov)
        self.factor = v * np.sqrt(np.clip(w, 0, None))

    def sample(self, z0, zm1, streams, n_steps=None, chunk=512):
        mean = self.oracle.mean(z0.double().numpy(), zm1.double().numpy())
        eps = streams.normal((self.factor.shape[0],)).double().numpy() @ self.factor.T
        return torch.from_numpy(mean + eps.reshape(mean.shape))


def test_latent_oracle_check_scores_exact_sampler_as_optimal(data):
    ds, space = data
    st = space.stats
    oracle = LatentGaussianOracle(CFG, space.latent, st.state_mean, st.state_std, st.res_mean, st.res_std)
    bank = build_tuple_bank(ds.frames, space)
    zm1, z0, r1 = bank.latent_batch(np.array([300, 350]))
    chk = latent_oracle_check(OracleSampler(oracle), oracle, zm1, z0, members=512, seed=0, r1=r1)
    assert chk.inits == 2 and chk.members == 512
    # finite-M ensemble mean adds sigma^2 / M to the expected squared error
    np.testing.assert_allclose(chk.ermse_ratio, np.sqrt(1 + 1 / 512), atol=2e-3)
    np.testing.assert_allclose(chk.crps_ratio, 1.0, atol=5e-3)
    assert np.all(np.abs(chk.realized_ermse_ratio - 1) < 0.02)
    assert np.all(np.abs(chk.realized_crps_ratio - 1) < 0.05)
    assert chk.std_band_fraction > 0.99
    # a mean shifted by one conditional std scores sqrt(2) worse in expected RMSE
    shifted = OracleSampler(oracle)
    base = shifted.sample

    def sample_shifted(z0, zm1, streams, n_steps=None, chunk=512):
        return base(z0, zm1, streams) + torch.from_numpy(oracle.std)

    shifted.sample = sample_shifted
    off = latent_oracle_check(shifted, oracle, zm1, z0, members=512, seed=0)
    np.testing.assert_allclose(off.ermse_ratio, np.sqrt(2 + 1 / 512), atol=1e-2)
    assert np.all(off.crps_ratio > 1.2)


def test_expected_fair_crps_matches_monte_carlo():
    rng = np.random.default_rng(3)
    ens = rng.normal(0.3, 1.4, size=(9, 2))
    mu, sd = np.array([0.0, 1.0]), np.array([1.0, 0.5])
    y = mu + sd * rng.standard_normal((400_000, 2))
    exact = expected_fair_crps(ens, mu, sd)
    abs_part = np.abs(ens[:, None, :] - y[None]).mean(axis=(0, 1))
    pair = np.abs(ens[:, None] - ens[None]).sum(axis=(0, 1)) / (2 * 9 * 8)
    np.testing.assert_allclose(exact, abs_part - pair, rtol=3e-3)
