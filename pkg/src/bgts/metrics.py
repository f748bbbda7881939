"""CRPS over binned forecasts, point/quantile metrics, PIT and residual diagnostics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad

DEFAULT_LEVELS = tuple(round(0.1 * i, 1) for i in range(1, 10))
UNDEFINED = math.nan  # sentinel for zero denominators


class ContractError(ValueError):
    pass


# ----------------------------------------------------------------------------
# CRPS


def crps_terms(p, h, y):
    """Return ``(term1, term2)`` with CRPS = term1 - term2.

    ``p`` has shape (..., K), ``y`` shape (...). ``term2`` uses the sorted-grid
    prefix sums: sum_ij p_i p_j |h_i - h_j| = 2 sum_i p_i (h_i F_{i-1} - G_{i-1}),
    with F and G the running sums of p and p*h.
    """
    p = np.asarray(p, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    term1 = (p * np.abs(h - y[..., None])).sum(axis=-1)
    F = np.cumsum(p, axis=-1) - p
    G = np.cumsum(p * h, axis=-1) - p * h
    term2 = (p * (h * F - G)).sum(axis=-1)
    return term1, term2


def pairwise_term_naive(p, h):
    """O(K^2) half expected pairwise distance, kept as a cross-check."""
    p = np.asarray(p, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    return 0.5 * float(p @ np.abs(h[:, None] - h[None, :]) @ p)


def crps_discrete(p, h, y, atol=1e-9):
    p = np.asarray(p, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if np.any(p < -atol) or np.any(np.abs(p.sum(axis=-1) - 1.0) > atol):
        raise ContractError("crps_discrete: p must be a probability vector")
    if np.any(np.diff(h) <= 0):
        raise ContractError("crps_discrete: bin centers must be strictly increasing")
    y = np.clip(y, h[0], h[-1])
    t1, t2 = crps_terms(p, h, y)
    return t1 - t2


def crps_loss(probs, h, y):
    """Differentiable per-element CRPS for a probability tensor ``probs`` (..., K).

    ``y`` is a constant array of shape ``probs.shape[:-1]``, already clamped.
    """
    p = probs.data
    h = np.asarray(h, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    absdiff = np.abs(h - y[..., None])
    t1, t2 = crps_terms(p, h, y)

    def backward(g):
        # d term2 / d p_k = sum_j p_j |h_k - h_j| = h_k (2F_k - 1) - 2G_k + G_tot,
        # with inclusive running sums F, G.
        F = np.cumsum(p, axis=-1)
        G = np.cumsum(p * h, axis=-1)
        Gt = G[..., -1:]
        Ft = F[..., -1:]
        dt2 = h * (2.0 * F - Ft) - 2.0 * G + Gt
        return (g[..., None] * (absdiff - dt2),)

    return ad.custom_op(t1 - t2, (probs,), backward)


def crps_by_integration(p, h, y, pad=1.0):
    """Trapezoid integral of (F(z) - 1{z >= y})^2 for the step CDF of (p, h).

    The grid holds every breakpoint (bin centers and y) twice, once with the
    integrand's left limit and once with its right limit, so the trapezoid
    rule is exact for this piecewise-constant integrand.
    """
    p = np.asarray(p, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    knots = np.unique(np.concatenate([h, [float(y)]]))
    knots = np.concatenate([[knots[0] - pad], knots, [knots[-1] + pad]])
    z = np.repeat(knots, 2)[1:-1]  # interval ends: (a0, a1), (a1, a2), ...
    mid = np.repeat(0.5 * (knots[1:] + knots[:-1]), 2)
    cdf = np.concatenate([[0.0], np.cumsum(p)])[np.searchsorted(h, mid, side="right")]
    ind = (mid >= y).astype(np.float64)
    return float(np.trapezoid((cdf - ind) ** 2, z))


# ----------------------------------------------------------------------------
# point and quantile metrics


def seasonal_error(history, m=1):
    history = np.asarray(history, dtype=np.float64)
    history = history[np.isfinite(history)]
    if len(history) <= m:
        return UNDEFINED
    d = np.mean(np.abs(history[m:] - history[:-m]))
    return UNDEFINED if d == 0 else float(d)


def mase(y_true, y_pred, history, m=1):
    scale = seasonal_error(history, m)
    if math.isnan(scale):
        return UNDEFINED
    return float(np.mean(np.abs(np.asarray(y_true) - np.asarray(y_pred))) / scale)


def wape(y_true, y_pred):
    y_true = np.asarray(y_true, dtype=np.float64)
    denom = np.abs(y_true).sum()
    if denom == 0:
        return UNDEFINED
    return float(np.abs(y_true - np.asarray(y_pred)).sum() / denom)


def pinball(y, f, tau):
    diff = np.asarray(y, dtype=np.float64) - np.asarray(f, dtype=np.float64)
    return np.maximum(tau * diff, (tau - 1.0) * diff)


def quantile_losses(y_true, quantiles, levels=DEFAULT_LEVELS, history=None, m=1):
    """Return ``(sql, wql)``.

    ``quantiles`` is (H, len(levels)). WQL = 2 sum_tau sum_t rho / (|levels| sum_t |y|),
    i.e. the level-averaged form; SQL = mean pinball over levels and steps divided by
    the seasonal-naive in-sample error (the MASE denominator).
    """
    y = np.asarray(y_true, dtype=np.float64)
    q = np.asarray(quantiles, dtype=np.float64).reshape(len(y), len(levels))
    losses = np.stack([pinball(y, q[:, i], tau) for i, tau in enumerate(levels)], axis=1)
    denom = np.abs(y).sum()
    wql = UNDEFINED if denom == 0 else float(2.0 * losses.sum() / (denom * len(levels)))
    if history is None:
        sql = UNDEFINED
    else:
        scale = seasonal_error(history, m)
        sql = UNDEFINED if math.isnan(scale) else float(2.0 * losses.mean() / scale)
    return sql, wql


# ----------------------------------------------------------------------------
# calibration and residual diagnostics


def pit_values(probs, centers, y):
    """CDF value at each observation with linear interpolation inside the bin.

    Bins are the uniform cells around ``centers``; mass is spread uniformly
    over each cell, so the CDF is piecewise linear.
    """
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    centers = np.asarray(centers, dtype=np.float64)
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    K = len(centers)
    width = (centers[-1] - centers[0]) / (K - 1) if K > 1 else 1.0
    left = centers[0] - 0.5 * width
    pos = (y - left) / width
    idx = np.clip(np.floor(pos).astype(int), 0, K - 1)
    frac = np.clip(pos - idx, 0.0, 1.0)
    cdf_before = np.cumsum(probs, axis=-1) - probs
    rows = np.arange(len(y))
    u = cdf_before[rows, idx] + frac * probs[rows, idx]
    u = np.where(pos < 0, 0.0, u)
    u = np.where(pos >= K, 1.0, u)
    return np.clip(u, 0.0, 1.0)


def pit_histogram(u, bins=10):
    u = np.asarray(u, dtype=np.float64).ravel()
    if u.size == 0:
        raise ContractError("pit_histogram: need at least one observation")
    counts = np.histogram(np.clip(u, 0.0, 1.0), bins=bins, range=(0.0, 1.0))[0]
    return counts / counts.sum()


def pit_deviation(freqs):
    freqs = np.asarray(freqs)
    return float(np.max(np.abs(freqs - 1.0 / len(freqs))))


def residual_correlation(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.size < 2:
        raise ContractError("residual_correlation: need equal lengths >= 2")
    a = a - a.mean()
    b = b - b.mean()
    denom = math.sqrt(float(a @ a) * float(b @ b))
    if denom == 0:
        return UNDEFINED
    return float(np.clip((a @ b) / denom, -1.0, 1.0))


# ----------------------------------------------------------------------------
# reports

METRICS = ("MASE", "WAPE", "SQL", "WQL", "CRPS")


@dataclass
class MetricReport:
    per_item: dict = field(default_factory=dict)  # item_id -> {metric: value}
    levels: tuple = DEFAULT_LEVELS
    pit: list | None = None

    def add(self, item_id, values):
        self.per_item[item_id] = dict(values)

    def macro(self):
        out, undefined = {}, {}
        for name in METRICS:
            vals = [v[name] for v in self.per_item.values() if name in v]
            good = [x for x in vals if not math.isnan(x)]
            undefined[name] = len(vals) - len(good)
            out[name] = float(np.mean(good)) if good else UNDEFINED
        return out, undefined

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["item_id", "metric", "value"])
            for item, vals in self.per_item.items():
                for name in METRICS:
                    if name in vals:
                        w.writerow([item, name, repr(float(vals[name]))])

    def summary(self):
        macro, undefined = self.macro()
        out = {
            "macro": {k: _json_num(v) for k, v in macro.items()},
            "undefined_counts": undefined,
            "n_items": len(self.per_item),
            "levels": list(self.levels),
        }
        if self.pit is not None:
            out["pit"] = [float(x) for x in self.pit]
        return out

    def write_json(self, path):
        Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


def _json_num(v):
    return None if math.isnan(v) else v


def score_forecast(y_true, point, quantiles, history, probs=None, centers=None,
                   norm=None, levels=DEFAULT_LEVELS, m=1):
    """All per-item metrics for one forecast; CRPS is taken in normalized units."""
    sql, wql = quantile_losses(y_true, quantiles, levels, history, m)
    out = {
        "MASE": mase(y_true, point, history, m),
        "WAPE": wape(y_true, point),
        "SQL": sql,
        "WQL": wql,
    }
    if probs is not None:
        mean, std = norm
        yn = (np.asarray(y_true) - mean) / (std + 1e-8)
        out["CRPS"] = float(np.mean(crps_discrete(probs, centers, yn, atol=1e-6)))
    return out
