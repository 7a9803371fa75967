"""Ensemble verification: fair CRPS, ensemble-mean RMSE, spread/SSR, paired t-tests, scorecards."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

PRINTED = "printed"
STANDARD = "standard"


def _pixel_weights(weights, shape):
    if weights is None:
        return np.full(shape, 1.0 / (shape[0] * shape[1]))
    return np.asarray(weights, dtype=np.float64)


def pairwise_abs_sum(ens: np.ndarray) -> np.ndarray:
    """``sum_{m != m'} |x_m - x_m'|`` over axis 0 in ``O(M log M)`` via order statistics."""
    M = ens.shape[0]
    s = np.sort(ens, axis=0)
    coef = (2.0 * np.arange(1, M + 1) - M - 1).reshape((M,) + (1,) * (ens.ndim - 1))
    return 2.0 * np.sum(coef * s, axis=0)


def crps_ensemble(ens: np.ndarray, truth: np.ndarray, convention: str = PRINTED) -> np.ndarray:
    """Pointwise fair CRPS of an ensemble (members on axis 0).

    ``printed``:  mean|x_m - y| - 1/(M(M-1)) sum_{m!=m'} |x_m - x_m'|
    ``standard``: the same with the diversity term halved (the unbiased estimator).
    """
    M = ens.shape[0]
    if M < 2:
        raise ValueError("fair CRPS needs at least two members")
    skill = np.mean(np.abs(ens - truth[None]), axis=0)
    div = pairwise_abs_sum(ens) / (M * (M - 1))
    if convention == STANDARD:
        div = 0.5 * div
    elif convention != PRINTED:
        raise ValueError(f"unknown CRPS convention {convention!r}")
    return skill - div


def fair_crps(ens: np.ndarray, truth: np.ndarray, weights=None, convention: str = PRINTED) -> np.ndarray:
    """Area-weighted, init-averaged fair CRPS per channel.

    ``ens``: ``(M, T, C, H, W)``; ``truth``: ``(T, C, H, W)``; returns ``(C,)``.
    """
    w = _pixel_weights(weights, ens.shape[-2:])
    return (crps_ensemble(ens, truth, convention) * w).sum(axis=(-2, -1)).mean(axis=0)


def ensemble_mean_rmse(ens: np.ndarray, truth: np.ndarray, weights=None) -> np.ndarray:
    w = _pixel_weights(weights, ens.shape[-2:])
    err = (ens.mean(axis=0) - truth) ** 2
    return np.sqrt((err * w).sum(axis=(-2, -1)).mean(axis=0))


def spread(ens: np.ndarray, weights=None) -> np.ndarray:
    M = ens.shape[0]
    if M < 2:
        raise ValueError("spread needs at least two members")
    w = _pixel_weights(weights, ens.shape[-2:])
    var = ens.var(axis=0, ddof=1)
    return np.sqrt((var * w).sum(axis=(-2, -1)).mean(axis=0))


def spread_skill_ratio(spread_v, ermse_v, M: int):
    """``sqrt((M+1)/M) * Spread / ERMSE``; NaN where ERMSE is zero."""
    spread_v, ermse_v = np.asarray(spread_v, float), np.asarray(ermse_v, float)
    out = np.full(np.broadcast(spread_v, ermse_v).shape, np.nan)
    ok = ermse_v > 0
    out[ok] = math.sqrt((M + 1) / M) * np.broadcast_to(spread_v, out.shape)[ok] / np.broadcast_to(ermse_v, out.shape)[ok]
    return out


# -- Student-t via the regularized incomplete beta -----------------------------------------

def _betacf(a: float, b: float, x: float, tol: float = 1e-15, max_iter: int = 10_000) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise RuntimeError("incomplete beta continued fraction did not converge")


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta ``I_x(a, b)``."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must be in [0, 1]")
    if x in (0.0, 1.0):
        return x
    lbt = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(lbt) * _betacf(a, b, x) / a
    return 1.0 - math.exp(lbt) * _betacf(b, a, 1.0 - x) / b


def student_t_sf2(t: float, df: float) -> float:
    """Two-sided tail probability ``P(|T| >= |t|)``."""
    if math.isinf(t):
        return 0.0
    return betainc_reg(0.5 * df, 0.5, df / (df + t * t))


@dataclass
class PairedTest:
    mean_diff: float
    std_diff: float
    t: float
    p: float
    df: int

    @property
    def significant(self) -> bool:
        return bool(self.p < 0.05)


def paired_ttest(scores_a, scores_b) -> PairedTest:
    """Two-sided paired t-test on ``d = A - B`` across initialization times."""
    a, b = np.asarray(scores_a, float), np.asarray(scores_b, float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired scores must be 1-D arrays over identical init times")
    T = a.size
    if T < 2:
        raise ValueError("need at least two init times")
    d = a - b
    dbar = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if dbar == 0.0:
            return PairedTest(0.0, 0.0, 0.0, 1.0, T - 1)
        return PairedTest(dbar, 0.0, math.nan, math.nan, T - 1)
    t = dbar / (sd / math.sqrt(T))
    return PairedTest(dbar, sd, t, student_t_sf2(t, T - 1), T - 1)


def percent_improvement(a, b):
    """``100 (B - A) / B`` (positive means A is better); NaN where ``B == 0``."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    out = np.full(np.broadcast(a, b).shape, np.nan)
    a, b = np.broadcast_to(a, out.shape), np.broadcast_to(b, out.shape)
    ok = b != 0
    out[ok] = 100.0 * (b[ok] - a[ok]) / b[ok]
    return out


# -- reports ---------------------------------------------------------------------------------

@dataclass
class MetricsReport:
    """Scores per lead x channel, plus per-init scores for paired tests."""

    channel_names: list[str]
    members: int
    leads: list[int]
    crps: np.ndarray  # (L, C)
    ermse: np.ndarray
    spread: np.ndarray
    ssr: np.ndarray
    crps_per_init: np.ndarray  # (T, L, C)
    ermse_per_init: np.ndarray  # (T, L, C) squared errors' root per init
    convention: str = PRINTED
    meta: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["channel", "lead", "crps", "ermse", "spread", "ssr"])
        for i, lead in enumerate(self.leads):
            for c, name in enumerate(self.channel_names):
                wr.writerow([name, lead] + [_fmt(v[i, c]) for v in (self.crps, self.ermse, self.spread, self.ssr)])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "channels": self.channel_names,
            "members": self.members,
            "init_times": int(self.crps_per_init.shape[0]),
            "leads": self.leads,
            "crps_convention": self.convention,
            "mean_crps": {n: _num(v) for n, v in zip(self.channel_names, self.crps.mean(axis=0))},
            "mean_ermse": {n: _num(v) for n, v in zip(self.channel_names, self.ermse.mean(axis=0))},
            "mean_ssr": {n: _num(v) for n, v in zip(self.channel_names, np.nanmean(self.ssr, axis=0))},
            **self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)

    def save_arrays(self) -> dict:
        return {"crps_per_init": self.crps_per_init, "ermse_per_init": self.ermse_per_init}


def _fmt(v) -> str:
    return "nan" if not np.isfinite(v) else repr(float(v))


def _num(v):
    v = float(v)
    return v if math.isfinite(v) else None


class MetricsAccumulator:
    """Collects per-(init, lead) ensembles and truths, reducing to a MetricsReport."""

    def __init__(self, channel_names, leads, weights, convention: str = PRINTED):
        self.names, self.leads, self.w, self.conv = list(channel_names), list(leads), weights, convention
        self._crps, self._se, self._var, self._members = {}, {}, {}, None

    def add(self, init: int, lead_idx: int, ens: np.ndarray, truth: np.ndarray):
        ens = np.asarray(ens, float)
        self._members = ens.shape[0]
        w = self.w
        self._crps[init, lead_idx] = (crps_ensemble(ens, truth, self.conv) * w).sum(axis=(-2, -1))
        self._se[init, lead_idx] = ((ens.mean(axis=0) - truth) ** 2 * w).sum(axis=(-2, -1))
        self._var[init, lead_idx] = (ens.var(axis=0, ddof=1) * w).sum(axis=(-2, -1))

    def report(self, meta=None) -> MetricsReport:
        inits = sorted({k[0] for k in self._crps})
        L = len(self.leads)

        def stack(d):
            return np.array([[d[t, i] for i in range(L)] for t in inits])

        crps_t, se_t, var_t = stack(self._crps), stack(self._se), stack(self._var)
        ermse = np.sqrt(se_t.mean(axis=0))
        spr = np.sqrt(var_t.mean(axis=0))
        return MetricsReport(self.names, self._members, self.leads, crps_t.mean(axis=0), ermse, spr,
                             spread_skill_ratio(spr, ermse, self._members), crps_t, np.sqrt(se_t),
                             self.conv, dict(meta or {}))


def scorecard(a: MetricsReport, b: MetricsReport, metric: str = "crps") -> list[dict]:
    """Percent improvement of A over B per lead x channel with paired-test flags."""
    if a.channel_names != b.channel_names or a.leads != b.leads:
        raise ValueError("reports must share channels and leads")
    if a.crps_per_init.shape != b.crps_per_init.shape:
        raise ValueError("reports must share init times")
    per_a = getattr(a, f"{metric}_per_init")
    per_b = getattr(b, f"{metric}_per_init")
    imp = percent_improvement(getattr(a, metric), getattr(b, metric))
    rows = []
    for i, lead in enumerate(a.leads):
        for c, name in enumerate(a.channel_names):
            test = paired_ttest(per_a[:, i, c], per_b[:, i, c])
            rows.append({
                "channel": name, "lead": lead, "metric": metric,
                "improvement_pct": float(imp[i, c]), "mean_diff": test.mean_diff,
                "t": test.t, "p": test.p, "significant": test.significant,
            })
    return rows


def scorecard_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    keys = ["channel", "lead", "metric", "improvement_pct", "mean_diff", "t", "p", "significant"]
    wr.writerow(keys)
    for r in rows:
        wr.writerow([_fmt(r[k]) if isinstance(r[k], float) else r[k] for k in keys])
    return buf.getvalue()
