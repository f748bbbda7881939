"""Adaptive inference: perturbed passes, 2D/3D ensembling and config selection.

A forecast for one series is built by retrieving K_ctx historical windows
that resemble the latest lookback, running the model in one or both modes
over a few perturbed copies of the episode, and averaging the bin
probabilities. Several such recipes are scored on rolled-back validation
windows and the best few are averaged.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import (NORM_EPS, EpisodeError, SplitError, WindowSpec,
                   build_episode, n_observed, rolling_split, window_instance)
from .datagen import add_time_index
from .metrics import DEFAULT_LEVELS, quantile_losses
from .model import BinnedForecast, forward, point_and_quantiles
from .retrieval import IndexError_, build_index, query, uniform_contexts

MODES = ("2d", "3d", "ensemble")
FEATURES = ("none", "blank", "running_index", "calendar")
SPACES = ("y", "x", "xy", "uniform")
N_SELECT_RANGE = (2, 9)


@dataclass(frozen=True)
class InferenceConfig:
    mode: str = "ensemble"
    c_mult: int = 4
    features: str = "none"
    revin: bool = False
    n_passes: int = 2
    shuffle_covariates: bool = True
    history_mask_frac: float = 0.2
    k_ctx: int = 4
    space: str = "y"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 2 <= self.c_mult <= 14:
            raise ValueError(f"c_mult={self.c_mult} outside [2, 14]")
        if self.features not in FEATURES:
            raise ValueError(f"features must be one of {FEATURES}, got {self.features!r}")
        if not 1 <= self.n_passes <= 4:
            raise ValueError(f"n_passes={self.n_passes} outside [1, 4]")
        if not 0.0 <= self.history_mask_frac < 1.0:
            raise ValueError("history_mask_frac must lie in [0, 1)")
        if not 0 <= self.k_ctx <= 50:
            raise ValueError(f"k_ctx={self.k_ctx} outside [0, 50]")
        if self.space not in SPACES:
            raise ValueError(f"space must be one of {SPACES}, got {self.space!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def default_candidates(k_ctx=4, space="y", mode="ensemble"):
    """A small grid over the context multiplier, features and RevIn."""
    out = []
    for c_mult in (2, 4, 8):
        for revin in (False, True):
            out.append(InferenceConfig(mode=mode, c_mult=c_mult, revin=revin,
                                       k_ctx=k_ctx, space=space))
    out.append(InferenceConfig(mode=mode, c_mult=4, features="running_index",
                               k_ctx=k_ctx, space=space))
    return out


def derive_rng(seed, *keys):
    """Philox stream keyed by a root seed and integer path."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, keys)])))


# ----------------------------------------------------------------------------
# perturbed passes


def perturb(episode, config, rng):
    """Shuffle covariate columns (ids travel with them) and hide lookback values."""
    ep = episode.copy()
    M, T, C = episode.M, episode.T, episode.C
    if config.shuffle_covariates and M > 1:
        perm = np.concatenate([rng.permutation(M), [M]])
        ep.values = ep.values[:, :, perm]
        ep.column_ids = ep.column_ids[perm]
    n_mask = int(round(config.history_mask_frac * T))
    if n_mask:
        pos = rng.choice(T, size=n_mask, replace=False)
        ep.mask[C, pos] = True
        ep.values[C, pos, M] = 0.0
    return ep


def stochastic_pass(episode, params, model_config, config, rng, mode=None):
    mode = mode or ("3d" if config.mode == "ensemble" else config.mode)
    return forward(perturb(episode, config, rng), params, model_config, mode)


def average_forecasts(forecasts):
    """Elementwise mean of same-grid forecasts, summed in the given order."""
    f0 = forecasts[0]
    total = np.zeros_like(f0.probs)
    for f in forecasts:
        if f.norm != f0.norm or f.probs.shape != f0.probs.shape:
            raise ValueError("average_forecasts: members must share grid and normalization")
        total = total + f.probs
    return BinnedForecast(total / len(forecasts), f0.centers, f0.mean, f0.std)


def mode_forecast(episode, params, model_config, config, rng, mode=None):
    """Mean of ``n_passes`` perturbed passes in one mode."""
    return average_forecasts([stochastic_pass(episode, params, model_config, config, rng, mode)
                              for _ in range(config.n_passes)])


def ensemble_2d3d(episode, params, model_config, config, rng):
    """Mean of the 2D and 3D mode forecasts, 2D first."""
    f2 = mode_forecast(episode, params, model_config, config, rng, "2d")
    f3 = mode_forecast(episode, params, model_config, config, rng, "3d")
    return average_forecasts([f2, f3])


def run_config(episode, params, model_config, config, rng):
    if config.mode == "ensemble":
        return ensemble_2d3d(episode, params, model_config, config, rng)
    return mode_forecast(episode, params, model_config, config, rng, config.mode)


def rebin(f, mean, std):
    """Re-express ``f`` on its own bin grid under different normalization stats.

    Each atom's mass is split linearly between the two nearest target bins,
    which keeps the mean unless mass falls outside the grid.
    """
    if (f.mean, f.std) == (mean, std):
        return f
    h = f.centers
    x = ((h * (f.std + NORM_EPS) + f.mean) - mean) / (std + NORM_EPS)
    width = (h[-1] - h[0]) / (len(h) - 1)
    pos = np.clip((x - h[0]) / width, 0.0, len(h) - 1)
    lo = np.minimum(np.floor(pos).astype(int), len(h) - 2)
    frac = pos - lo
    H = f.probs.shape[0]
    out = np.zeros_like(f.probs)
    rows = np.repeat(np.arange(H), len(h))
    np.add.at(out, (rows, np.tile(lo, H)), (f.probs * (1.0 - frac)).ravel())
    np.add.at(out, (rows, np.tile(lo + 1, H)), (f.probs * frac).ravel())
    return BinnedForecast(out, h, mean, std)


# ----------------------------------------------------------------------------
# episode assembly for one series


def calendar_features(timestamps):
    """Year, month, day and hour columns from epoch-second timestamps."""
    dt = np.asarray(timestamps, dtype="datetime64[s]")
    years = dt.astype("datetime64[Y]")
    months = dt.astype("datetime64[M]")
    days = dt.astype("datetime64[D]")
    hours = dt.astype("datetime64[h]")
    return np.stack([
        years.astype(np.int64) + 1970,
        (months - years).astype(np.int64) + 1,
        (days - months).astype(np.int64) + 1,
        (hours - days).astype(np.int64),
    ], axis=1).astype(np.float64)


def extend_record(record, cutoff, H):
    """History ``record[:cutoff]`` plus H horizon rows with the target hidden.

    Known-future covariates keep their values in the horizon; the others
    become NaN there. Missing rows and timestamps are extrapolated.
    """
    n = len(record)
    rows = min(n, cutoff + H)
    ts = record.timestamps[:rows]
    X = record.covariates[:rows].copy()
    if rows < cutoff + H:
        step = int(np.median(np.diff(ts))) if len(ts) > 1 else 1
        extra = ts[-1] + step * np.arange(1, cutoff + H - rows + 1)
        ts = np.concatenate([ts, extra])
        X = np.concatenate([X, np.full((cutoff + H - rows, X.shape[1]), np.nan)])
    unknown = [j for j in range(X.shape[1]) if j not in record.known_future_cols]
    X[cutoff:, unknown] = np.nan
    y = np.full(cutoff + H, np.nan)
    y[:cutoff] = record.target[:cutoff]
    return replace(record, timestamps=ts, target=y, covariates=X)


def apply_features(record, policy):
    if policy == "none":
        return record
    if policy == "running_index":
        return add_time_index(record)
    if policy == "blank":
        cols = np.zeros((len(record), 1))
        names = ["blank"]
    elif policy == "calendar":
        cols = calendar_features(record.timestamps)
        names = ["year", "month", "day", "hour"]
    else:
        raise ValueError(f"unknown feature policy {policy!r}")
    M = record.n_covariates
    return replace(record, covariates=np.concatenate([record.covariates, cols], axis=1),
                   covariate_names=[*record.covariate_names, *names],
                   known_future_cols=[*record.known_future_cols, *range(M, M + cols.shape[1])])


@dataclass
class EpisodePlan:
    episode: object
    context_starts: list
    flags: list


def plan_episode(record, cutoff, H, config, t_max):
    """Inference episode forecasting ``record[cutoff:cutoff+H]`` from its past."""
    T = min(config.c_mult * H, t_max)
    if cutoff < T:
        raise SplitError(f"{record.item_id}: history {cutoff} shorter than lookback {T}")
    ext = apply_features(extend_record(record, cutoff, H), config.features)
    target = window_instance(ext, cutoff - T, T, H, observe_future=False)
    flags = []
    contexts, starts = [], []
    query_start = cutoff - T
    if config.k_ctx > 0:
        space = config.space
        if space in ("x", "xy") and record.n_covariates == 0:
            flags.append("no_covariates_for_space")
            space = "y"
        if space == "uniform":
            if query_start - T - H + 1 >= 1:
                contexts = uniform_contexts(ext, T, H, config.k_ctx, limit=query_start)
        else:
            try:
                idx = build_index(ext, T, H, space, limit=cutoff)
                res = query(idx, config.k_ctx, query_start=query_start)
                contexts = res.instances
            except IndexError_:
                contexts = []
        if len(contexts) < config.k_ctx:
            flags.append("short_supply")
        starts = [c.start for c in contexts]
        # the raw target of a context's horizon must be observed
        keep = [i for i, c in enumerate(contexts) if np.isfinite(c.future).all()
                and np.isfinite(c.lookback).any()]
        contexts = [contexts[i] for i in keep]
        starts = [starts[i] for i in keep]
    if not contexts:
        flags.append("no_contexts")
    ep = build_episode(target, contexts, mode="infer", shared_norm=config.revin)
    return EpisodePlan(ep, starts, flags)


# ----------------------------------------------------------------------------
# selection and final forecast


@dataclass
class ForecastResult:
    item_id: str
    forecast: BinnedForecast
    point: np.ndarray
    quantiles: np.ndarray  # (H, n_levels)
    levels: tuple = DEFAULT_LEVELS
    flags: list = field(default_factory=list)


@dataclass
class EnsembleSelection:
    candidates: list
    sql: list  # validation SQL per candidate; inf when it could not run
    chosen: list  # candidate indices, best first
    flags: list = field(default_factory=list)

    @property
    def configs(self):
        return [self.candidates[i] for i in self.chosen]

    def to_dict(self):
        return {
            "candidates": [c.to_dict() for c in self.candidates],
            "validation_sql": [None if not math.isfinite(v) else v for v in self.sql],
            "chosen": list(self.chosen),
            "flags": list(self.flags),
        }


def forecast_binned(record, cutoff, H, params, model_config, configs, seed=0):
    """Uniform average of the configs' forecasts, on the first config's grid."""
    parts, flags = [], []
    for i, cfg in enumerate(configs):
        plan = plan_episode(record, cutoff, H, cfg, model_config.t_max)
        flags.extend(plan.flags)
        parts.append(run_config(plan.episode, params, model_config, cfg, derive_rng(seed, i)))
    ref = parts[0]
    total = np.zeros_like(ref.probs)
    for f in parts:
        total = total + rebin(f, ref.mean, ref.std).probs
    out = BinnedForecast(total / len(parts), ref.centers, ref.mean, ref.std)
    return out, sorted(set(flags))


def validation_sql(record, params, model_config, config, H, offsets=(2, 5), seed=0, m=1):
    """Mean SQL of ``config`` on windows rolled back by each offset."""
    n = n_observed(record)
    T = min(config.c_mult * H, model_config.t_max)
    rolling_split(replace(record, target=record.target[:n], timestamps=record.timestamps[:n],
                          covariates=record.covariates[:n]), WindowSpec(T, H), offsets)
    scores = []
    for k, o in enumerate(offsets):
        cutoff = n - o - H
        truth = record.target[cutoff:cutoff + H]
        f, _ = forecast_binned(record, cutoff, H, params, model_config, [config],
                               seed=seed * 1000 + k)
        _, q = point_and_quantiles(f, DEFAULT_LEVELS)
        sql, _ = quantile_losses(truth, q, DEFAULT_LEVELS, record.target[:cutoff], m)
        scores.append(sql)
    return float(np.mean(scores))


def select_configs(record, params, model_config, candidates, H, offsets=(2, 5),
                   n_select=3, seed=0):
    """Rank candidates by validation SQL and keep the best n (n within [2, 9])."""
    if not candidates:
        raise ValueError("select_configs: no candidates")
    n_select = int(np.clip(n_select, *N_SELECT_RANGE))
    sql = []
    for i, cfg in enumerate(candidates):
        try:
            v = validation_sql(record, params, model_config, cfg, H, offsets, seed=seed + i)
        except (SplitError, EpisodeError, ad.ShapeError, IndexError_):
            v = math.inf
        sql.append(v if math.isfinite(v) else math.inf)
    flags = []
    ok = [i for i in range(len(candidates)) if math.isfinite(sql[i])]
    if not ok:
        fallback = fallback_config(record, H, model_config)
        return EnsembleSelection([fallback], [math.inf], [0], ["fallback_default"])
    order = sorted(ok, key=lambda i: (sql[i], i))
    chosen = order[:n_select]
    if len(chosen) < N_SELECT_RANGE[0]:
        flags.append("degenerate_selection")
    return EnsembleSelection(list(candidates), sql, chosen, flags)


def fallback_config(record, H, model_config):
    """Single 3D config with the shortest lookback and no contexts."""
    return InferenceConfig(mode="3d", c_mult=2, n_passes=1, shuffle_covariates=False,
                           history_mask_frac=0.0, k_ctx=0)


def forecast(record, params, model_config, selection, H, levels=DEFAULT_LEVELS, seed=0):
    """Point and quantile forecast of the H steps after the observed history."""
    n = n_observed(record)
    configs = selection.configs
    flags = list(selection.flags)
    try:
        f, extra = forecast_binned(record, n, H, params, model_config, configs, seed)
    except (SplitError, EpisodeError, ad.ShapeError) as exc:
        fb = fallback_config(record, H, model_config)
        T = min(2 * H, model_config.t_max)
        if n < T:
            raise SplitError(f"{record.item_id}: {n} observed points, need {T}") from exc
        f, extra = forecast_binned(record, n, H, params, model_config, [fb], seed)
        extra = [*extra, "fallback_default"]
    point, q = point_and_quantiles(f, levels)
    return ForecastResult(record.item_id, f, point, q, tuple(levels), sorted(set(flags + extra)))


# ----------------------------------------------------------------------------
# output files


def write_forecasts(results, path):
    levels = results[0].levels if results else DEFAULT_LEVELS
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["item_id", "step", "point", *(f"q{lv:g}" for lv in levels)])
        for r in results:
            for t in range(len(r.point)):
                w.writerow([r.item_id, t + 1, repr(float(r.point[t])),
                            *(repr(float(v)) for v in r.quantiles[t])])


def write_selection(selections, path):
    doc = {item: sel.to_dict() for item, sel in selections.items()}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
