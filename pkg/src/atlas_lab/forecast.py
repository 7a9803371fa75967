"""Autoregressive ensemble rollout and forecast evaluation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .generative import GenerativeModel, MemberStreams
from .grid import GridSpec, area_weights
from .latent import Decoder, LatentSpace
from .synthetic import AnalyticOracle, LatentGaussianOracle, gaussian_crps
from .verify import PRINTED, STANDARD, MetricsAccumulator, MetricsReport, crps_ensemble, pairwise_abs_sum

log = logging.getLogger(__name__)


def member_rng(seed: int, key: tuple, member: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *key, int(member)])))


class LatentForecaster:
    """One step of the latent pipeline: encode, sample a latent residual, decode."""

    def __init__(self, model: GenerativeModel, decoder: Decoder, space: LatentSpace,
                 n_steps: int | None = None, chunk: int = 512):
        self.model, self.decoder, self.space = model, decoder, space
        self.n_steps, self.chunk = n_steps, chunk

    def _sample(self, z0, zm1, streams):
        return self.model.sample(torch.from_numpy(z0), torch.from_numpy(zm1), streams, self.n_steps, self.chunk)

    def advance(self, x_prev: np.ndarray, x_cur: np.ndarray, step: int, members: list[int],
                seed: int, key: tuple) -> np.ndarray:
        """Next full-resolution states ``(M, C, H, W)``; NaN rows mark members that failed."""
        z0 = self.space.encode(x_cur).astype(np.float32)
        zm1 = self.space.encode(x_prev).astype(np.float32)
        try:
            r = self._sample(z0, zm1, MemberStreams(seed, members, key)).double().numpy()
        except FloatingPointError:
            # retry one member at a time so a single divergence does not sink the others
            r = np.full(z0.shape, np.nan)
            for i, m in enumerate(members):
                try:
                    r[i] = self._sample(z0[i:i + 1], zm1[i:i + 1], MemberStreams(seed, [m], key))[0].double().numpy()
                except FloatingPointError:
                    pass
        steps = np.full(len(members), step)
        bad = ~np.isfinite(r).all(axis=(1, 2, 3))
        out = np.full(x_cur.shape, np.nan)
        if (~bad).any():
            out[~bad] = self.decoder.reconstruct(x_cur[~bad], r[~bad], steps[~bad])
        return out


class OracleForecaster:
    """Exact one-step conditional sampler of the synthetic process (full state is Markov)."""

    def __init__(self, oracle: AnalyticOracle):
        self.oracle = oracle

    def advance(self, x_prev, x_cur, step, members, seed, key):
        o = self.oracle
        a = o.field_to_modes(x_cur, step)
        eps = np.stack([o._innovation(member_rng(seed, key, m), ()) for m in members])
        return o.modes_to_field(o.phi * a + eps, step + 1)


@dataclass
class EnsembleForecast:
    """Rollout output: ``states[m, j]`` is member ``m`` at lead ``j`` (lead 0 is the initial state)."""

    init: int
    states: np.ndarray
    failed: dict[int, int] = field(default_factory=dict)

    @property
    def members(self) -> int:
        return self.states.shape[0]

    @property
    def leads(self) -> int:
        return self.states.shape[1] - 1


def rollout_iter(forecaster, x_prev: np.ndarray, x_cur: np.ndarray, init_step: int, n_steps: int,
                 members: int, seed: int):
    """Yield ``(lead, states (M, C, H, W), failed)`` for leads ``1..n_steps``.

    Each member keeps its own ``(x_{j-1}, x_j)`` pair and draws from the
    substream keyed by ``(seed, init_step, lead, member)``. A member whose
    state turns non-finite is dropped; ``failed`` maps it to the lead at
    which that happened and its later states are NaN.
    """
    if n_steps < 0:
        raise ValueError("n_steps must be >= 0")
    prev = np.repeat(np.asarray(x_prev, dtype=np.float64)[None], members, axis=0)
    cur = np.repeat(np.asarray(x_cur, dtype=np.float64)[None], members, axis=0)
    alive = np.ones(members, dtype=bool)
    failed: dict[int, int] = {}
    for lead in range(1, n_steps + 1):
        idx = np.flatnonzero(alive)
        nxt = np.full(cur.shape, np.nan)
        if idx.size:
            nxt[idx] = forecaster.advance(prev[idx], cur[idx], init_step + lead - 1, idx.tolist(),
                                          seed, (init_step, lead))
        for m in idx[~np.isfinite(nxt[idx]).all(axis=(1, 2, 3))]:
            alive[m] = False
            failed[int(m)] = lead
            log.warning("member %d diverged at lead %d (init %d)", m, lead, init_step)
        prev, cur = cur, nxt
        yield lead, cur, dict(failed)


def rollout(forecaster, x_prev, x_cur, init_step: int, n_steps: int, members: int, seed: int) -> EnsembleForecast:
    states = [np.repeat(np.asarray(x_cur, dtype=np.float64)[None], members, axis=0)]
    failed: dict[int, int] = {}
    for _, s, failed in rollout_iter(forecaster, x_prev, x_cur, init_step, n_steps, members, seed):
        states.append(s)
    return EnsembleForecast(init_step, np.stack(states, axis=1), failed)


def evaluate(forecaster, frames: np.ndarray, start_step: int, init_indices, leads, members: int,
             seed: int, channel_names, convention: str = PRINTED, grid=None) -> MetricsReport:
    """Roll out from each init index and score selected leads against the trajectory.

    ``frames[i]`` is the state at generator step ``start_step + i``; every
    init needs ``frames[i - 1]`` for history and ``frames[i + max(leads)]``
    as truth.
    """
    leads = sorted(int(l) for l in leads)
    if members < 2:
        raise ValueError("evaluation needs at least two members")
    n_max = leads[-1]
    grid = grid or GridSpec(*frames.shape[-2:])
    acc = MetricsAccumulator(channel_names, leads, area_weights(grid), convention)
    diverged = {}
    for init in init_indices:
        init = int(init)
        if init < 1 or init + n_max >= frames.shape[0]:
            raise ValueError(f"init index {init} lacks history or verifying truth")
        x_prev, x_cur = frames[init - 1].astype(np.float64), frames[init].astype(np.float64)
        for lead, ens, failed in rollout_iter(forecaster, x_prev, x_cur, start_step + init, n_max, members, seed):
            if lead in leads:
                ok = np.isfinite(ens).all(axis=(1, 2, 3))
                if ok.sum() < 2:
                    raise FloatingPointError(f"fewer than two members survive at lead {lead} (init {init})")
                acc.add(init, leads.index(lead), ens[ok], frames[init + lead].astype(np.float64))
        if failed:
            diverged[str(init)] = failed
    return acc.report({"seed": seed, "grid": list(grid.shape), "diverged": diverged})


def normalized_rms(states: np.ndarray, space: LatentSpace) -> np.ndarray:
    """Area-weighted RMS of normalized fields, per leading index and channel."""
    w = area_weights(space.full)
    z = space.stats.normalize(states)
    return np.sqrt((z**2 * w).sum(axis=(-2, -1)))


def stationary_normalized_rms(oracle: AnalyticOracle, space: LatentSpace) -> np.ndarray:
    """RMS of a normalized field under the stationary law, per channel."""
    st = space.stats
    var = oracle.stationary_pixel_variance()
    bias = oracle.offsets - np.asarray(st.state_mean)
    return np.sqrt(var + bias**2) / np.asarray(st.state_std)



# -- one-step check against the exact latent conditional ------------------------------

@dataclass
class OracleCheck:
    """Model ensembles against the exact Gaussian law of ``r_1 | (z_0, z_-1)``.

    Scores are expectations over the truth ``y ~ N(mu, sigma^2)`` given each
    init's inputs, evaluated in closed form per pixel, so they carry no
    sampling noise from a single realized truth.

    ``ermse_ratio``: expected ensemble-mean RMSE over that of the exact mean.
    ``crps_ratio``: expected fair CRPS (standard convention) over the Gaussian
    floor ``sigma / sqrt(pi)``. ``std_ratio``: per-pixel ensemble std over the
    exact conditional std, averaged over init times. ``realized_*`` hold the
    same ratios at supplied truths, when given.
    """

    ermse_ratio: np.ndarray
    crps_ratio: np.ndarray
    std_ratio: np.ndarray
    members: int
    inits: int
    realized_ermse_ratio: np.ndarray | None = None
    realized_crps_ratio: np.ndarray | None = None

    @property
    def std_band_fraction(self) -> float:
        r = self.std_ratio
        return float(np.mean((r >= 0.8) & (r <= 1.2)))


def expected_fair_crps(ens: np.ndarray, mu: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """``E_y`` of the standard fair CRPS for ``y ~ N(mu, sigma^2)`` per pixel."""
    M = ens.shape[0]
    # E|x - y| = gaussian_crps(sigma, d) + sigma / sqrt(pi) with d = (x - mu) / sigma
    abs_dev = (gaussian_crps(sigma, (ens - mu) / sigma) + sigma / np.sqrt(np.pi)).mean(axis=0)
    return abs_dev - pairwise_abs_sum(ens) / (2 * M * (M - 1))


def latent_oracle_check(model: GenerativeModel, oracle: LatentGaussianOracle, zm1: np.ndarray,
                        z0: np.ndarray, members: int, seed: int, r1: np.ndarray | None = None,
                        chunk: int = 512) -> OracleCheck:
    """Sample ``members`` draws per init (leading axis of ``zm1, z0``) and score them."""
    w = area_weights(oracle.grid)
    sd = oracle.std
    var_o = (sd**2 * w).sum(axis=(-2, -1))
    crps_o = (sd / np.sqrt(np.pi) * w).sum(axis=(-2, -1))
    se_m = cr_m = 0.0
    re_m = re_o = rc_m = rc_o = 0.0
    ratios = np.zeros_like(sd)
    T = z0.shape[0]
    for k in range(T):
        a0 = torch.from_numpy(np.ascontiguousarray(z0[k], dtype=np.float32))
        am1 = torch.from_numpy(np.ascontiguousarray(zm1[k], dtype=np.float32))
        ens = model.sample(a0.expand(members, *a0.shape).contiguous(), am1.expand(members, *a0.shape).contiguous(),
                           MemberStreams(seed, members, key=(k,)), chunk=chunk).double().numpy()
        mu = oracle.mean(z0[k].astype(np.float64), zm1[k].astype(np.float64))
        se_m = se_m + (((ens.mean(axis=0) - mu) ** 2 + sd**2) * w).sum(axis=(-2, -1))
        cr_m = cr_m + (expected_fair_crps(ens, mu, sd) * w).sum(axis=(-2, -1))
        ratios += ens.std(axis=0, ddof=1) / sd
        if r1 is not None:
            truth = r1[k].astype(np.float64)
            re_m = re_m + ((ens.mean(axis=0) - truth) ** 2 * w).sum(axis=(-2, -1))
            re_o = re_o + ((mu - truth) ** 2 * w).sum(axis=(-2, -1))
            rc_m = rc_m + (crps_ensemble(ens, truth, STANDARD) * w).sum(axis=(-2, -1))
            rc_o = rc_o + (gaussian_crps(sd, (truth - mu) / sd) * w).sum(axis=(-2, -1))
    out = OracleCheck(np.sqrt(se_m / (T * var_o)), cr_m / (T * crps_o), ratios / T, members, T)
    if r1 is not None:
        out.realized_ermse_ratio, out.realized_crps_ratio = np.sqrt(re_m / re_o), rc_m / rc_o
    return out
