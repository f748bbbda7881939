"""Series records, windowing, normalization and episode assembly."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

T_MAX = 2048
H_MAX = 192
C_MAX = 50
M_MAX = 80
NORM_EPS = 1e-8


class IngestionError(ValueError):
    pass


class EpisodeError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass
class SeriesRecord:
    item_id: str
    timestamps: np.ndarray
    target: np.ndarray
    covariates: np.ndarray  # (N, M)
    known_future_cols: list = field(default_factory=list)
    covariate_names: list = field(default_factory=list)
    freq: str = ""

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.target = np.asarray(self.target, dtype=np.float64)
        cov = np.asarray(self.covariates, dtype=np.float64)
        if cov.ndim == 1 and cov.size == 0:
            cov = cov.reshape(len(self.target), 0)
        self.covariates = cov
        if self.covariates.shape[0] != len(self.target):
            raise IngestionError(
                f"{self.item_id}: {len(self.target)} targets but {self.covariates.shape[0]} covariate rows"
            )
        if not self.covariate_names:
            self.covariate_names = [f"cov{j}" for j in range(self.n_covariates)]

    def __len__(self):
        return len(self.target)

    @property
    def n_covariates(self):
        return self.covariates.shape[1]


@dataclass(frozen=True)
class WindowSpec:
    T: int
    H: int

    def __post_init__(self):
        if not 1 <= self.T <= T_MAX:
            raise ValueError(f"lookback T={self.T} outside [1, {T_MAX}]")
        if not 1 <= self.H <= H_MAX:
            raise ValueError(f"horizon H={self.H} outside [1, {H_MAX}]")


@dataclass
class Instance:
    """One (lookback, horizon) window in raw units.

    ``covariates`` has T+H rows. ``future`` is None when the horizon is
    unobserved.
    """

    lookback: np.ndarray
    future: np.ndarray | None
    covariates: np.ndarray
    start: int = 0
    item_id: str = ""

    def __post_init__(self):
        self.lookback = np.asarray(self.lookback, dtype=np.float64)
        if self.future is not None:
            self.future = np.asarray(self.future, dtype=np.float64)
        cov = np.asarray(self.covariates, dtype=np.float64)
        if cov.ndim == 1:
            cov = cov.reshape(-1, 0) if cov.size == 0 else cov.reshape(-1, 1)
        self.covariates = cov

    @property
    def T(self):
        return len(self.lookback)

    @property
    def H(self):
        return self.covariates.shape[0] - self.T

    @property
    def M(self):
        return self.covariates.shape[1]


@dataclass
class Episode:
    """Normalized (C+1) x (T+H) x (M+1) value tensor with masks.

    The target series sits in the last variable slot. ``mask`` is 1 where
    a target value is unknown to the model (masked horizon, missing or
    deliberately hidden history). ``supervision`` holds the normalized
    futures of ``target_slices`` when known.
    """

    values: np.ndarray
    mask: np.ndarray
    target_slices: tuple
    T: int
    H: int
    norm_mean: np.ndarray
    norm_std: np.ndarray
    supervision: np.ndarray | None = None
    column_ids: np.ndarray | None = None
    overfit: bool = False

    def __post_init__(self):
        if self.column_ids is None:
            M = self.values.shape[2] - 1
            self.column_ids = np.concatenate([np.arange(1, M + 1), [0]]).astype(np.int64)

    @property
    def C(self):
        return self.values.shape[0] - 1

    @property
    def M(self):
        return self.values.shape[2] - 1

    @property
    def future_mask(self):
        fm = np.zeros_like(self.mask)
        for s in self.target_slices:
            fm[s, self.T:] = True
        return fm

    def copy(self, **changes):
        ep = replace(self, **changes)
        for name in ("values", "mask", "norm_mean", "norm_std", "column_ids"):
            if name not in changes:
                setattr(ep, name, getattr(self, name).copy())
        if "supervision" not in changes and self.supervision is not None:
            ep.supervision = self.supervision.copy()
        return ep


# ----------------------------------------------------------------------------
# normalization


def znormalize(window, eps=NORM_EPS):
    """Return ``(normalized, (mean, std))`` using population std; NaNs ignored."""
    w = np.asarray(window, dtype=np.float64)
    if w.size == 0:
        raise ValueError("znormalize: empty window")
    finite = w[np.isfinite(w)]
    if finite.size == 0:
        mean, std = 0.0, 0.0
    else:
        mean = float(finite.mean())
        std = float(finite.std())
    return (w - mean) / (std + eps), (mean, std)


def denormalize(x, stats, eps=NORM_EPS):
    mean, std = stats
    return np.asarray(x) * (std + eps) + mean


# ----------------------------------------------------------------------------
# episodes


def _slice_block(inst, n_cov):
    """(T+H, M+1) raw block with NaN where the target is unknown."""
    T, H = inst.T, inst.H
    y = np.full(T + H, np.nan)
    y[:T] = inst.lookback
    if inst.future is not None:
        y[T:] = inst.future
    block = np.empty((T + H, n_cov + 1))
    block[:, :n_cov] = inst.covariates
    block[:, n_cov] = y
    return block


def build_episode(target, contexts, mode="infer", extra_targets=(), shared_norm=False):
    """Assemble the episode tensor with the target instance as the last slice.

    In ``train`` mode the futures are kept as supervision and the horizon of
    each designated slice is masked; ``extra_targets`` lists context indices
    that are designated as well. In ``infer`` mode only the last slice is
    masked and its future (if any) is carried as supervision for scoring.

    ``shared_norm`` scales every slice with the target slice's lookback
    statistics instead of its own (reversible instance normalization over
    the whole organized context).
    """
    if mode not in ("train", "infer"):
        raise EpisodeError(f"unknown mode {mode!r}")
    slices = list(contexts) + [target]
    T, H, M = target.T, target.H, target.M
    for k, inst in enumerate(slices):
        if (inst.T, inst.H, inst.M) != (T, H, M):
            raise EpisodeError(
                f"slice {k} has (T,H,M)={(inst.T, inst.H, inst.M)}, target has {(T, H, M)}"
            )
    if len(contexts) > C_MAX:
        raise EpisodeError(f"{len(contexts)} contexts exceed C_max={C_MAX}")
    C = len(contexts)
    if mode == "infer" and extra_targets:
        raise EpisodeError("extra targets are a training-mode feature")
    designated = tuple(sorted(set(extra_targets))) + (C,)
    for s in designated:
        if not 0 <= s <= C:
            raise EpisodeError(f"designated slice {s} out of range")

    values = np.zeros((C + 1, T + H, M + 1))
    mask = np.zeros((C + 1, T + H), dtype=bool)
    means = np.zeros(C + 1)
    stds = np.zeros(C + 1)
    sup = np.zeros((len(designated), H))
    have_sup = True
    ref = _slice_block(target, M)
    ref_stats = [znormalize(ref[:T, j])[1] for j in range(M + 1)]
    for k, inst in enumerate(slices):
        block = _slice_block(inst, M)
        if shared_norm:
            stats = ref_stats
        else:
            stats = [znormalize(block[:T, j])[1] for j in range(M + 1)]
        for j in range(M + 1):
            block[:, j] = (block[:, j] - stats[j][0]) / (stats[j][1] + NORM_EPS)
        means[k], stds[k] = stats[M]
        yn = block[:, M]
        missing = ~np.isfinite(yn)
        if k in designated:
            missing[T:] = True
            pos = designated.index(k)
            if inst.future is None:
                have_sup = False
            else:
                sup[pos] = yn[T:]
        elif mode == "infer" and inst.future is None:
            raise EpisodeError(f"context slice {k} has no observed future")
        values[k, :, M] = np.where(missing, 0.0, yn)
        values[k, :, :M] = np.nan_to_num(block[:, :M], nan=0.0)
        mask[k] = missing
    if have_sup and np.isfinite(sup).all():
        supervision = sup
    else:
        supervision = None
    if mode == "train" and supervision is None:
        raise EpisodeError("train mode requires observed futures for designated slices")
    return Episode(values, mask, designated, T, H, means, stds, supervision)


# ----------------------------------------------------------------------------
# windowing


def window_instance(record, start, T, H, observe_future=True):
    """Instance whose lookback starts at ``start``."""
    end = start + T + H
    if start < 0 or end > len(record):
        raise SplitError(f"{record.item_id}: window [{start}, {end}) outside series of length {len(record)}")
    y = record.target
    fut = y[start + T:end].copy() if observe_future else None
    return Instance(y[start:start + T].copy(), fut, record.covariates[start:end].copy(),
                    start=start, item_id=record.item_id)


def rolling_split(record, spec, offsets=(2, 5)):
    """Validation instances whose horizon ends ``offset`` points before the series end."""
    T, H = spec.T, spec.H
    need = max(offsets) + T + H
    if len(record) < need:
        raise SplitError(
            f"{record.item_id}: length {len(record)} < required {need} for offsets {list(offsets)}"
        )
    return [window_instance(record, len(record) - o - H - T, T, H) for o in offsets]


def n_observed(record):
    """Length of the observed prefix (trailing NaN targets mark the future)."""
    y = record.target
    finite = np.flatnonzero(np.isfinite(y))
    return 0 if finite.size == 0 else int(finite[-1]) + 1


def holdout(record, H):
    """Split a record into its history and the final H observed points."""
    n = n_observed(record)
    if n <= H:
        raise SplitError(f"{record.item_id}: {n} observed points cannot hold out {H}")
    return truncate(record, n - H), record.target[n - H:n].copy()


def truncate(record, n):
    return replace(record, timestamps=record.timestamps[:n], target=record.target[:n].copy(),
                   covariates=record.covariates[:n].copy())


# ----------------------------------------------------------------------------
# CSV + JSON metadata


def load_dataset(path, metadata_path=None):
    path = Path(path)
    if metadata_path is None:
        metadata_path = path.with_name("metadata.json")
    meta = {}
    if metadata_path is not None and Path(metadata_path).exists():
        meta = json.loads(Path(metadata_path).read_text())
    known = list(meta.get("known_future", []))
    freq = meta.get("freq", "")

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        for col in ("item_id", "timestamp", "target"):
            if col not in header:
                raise IngestionError(f"{path}: missing column {col!r}")
        i_id, i_ts, i_y = (header.index(c) for c in ("item_id", "timestamp", "target"))
        cov_cols = [i for i, h in enumerate(header) if i not in (i_id, i_ts, i_y)]
        cov_names = [header[i] for i in cov_cols]
        if len(cov_names) > M_MAX:
            raise IngestionError(f"{path}: {len(cov_names)} covariates exceed M_max={M_MAX}")
        for name in known:
            if name not in cov_names:
                raise IngestionError(f"{path}: known-future column {name!r} not in header")

        rows = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise IngestionError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}"
                )
            item = row[i_id]
            try:
                ts = int(row[i_ts])
            except ValueError:
                raise IngestionError(f"{path}:{lineno}: item {item}: bad timestamp {row[i_ts]!r}") from None
            bucket = rows.setdefault(item, [])
            if bucket:
                prev = bucket[-1][0]
                if ts == prev:
                    raise IngestionError(f"{path}:{lineno}: item {item}: duplicate timestamp {ts}")
                if ts < prev:
                    raise IngestionError(
                        f"{path}:{lineno}: item {item}: timestamp {ts} after {prev} is not increasing"
                    )
            y = _parse_float(row[i_y])
            covs = [_parse_float(row[i]) for i in cov_cols]
            bucket.append((ts, y, covs, lineno))

    kf_idx = [cov_names.index(n) for n in known]
    records = []
    for item, bucket in rows.items():
        ts = np.array([b[0] for b in bucket], dtype=np.int64)
        y = np.array([b[1] for b in bucket])
        X = np.array([b[2] for b in bucket], dtype=np.float64).reshape(len(bucket), len(cov_names))
        if kf_idx:
            bad = ~np.isfinite(X[:, kf_idx]).all(axis=1)
            if bad.any():
                line = bucket[int(np.flatnonzero(bad)[0])][3]
                raise IngestionError(f"{path}:{line}: item {item}: missing known-future covariate")
        records.append(SeriesRecord(item, ts, y, X, kf_idx, list(cov_names), freq))
    return records


def _parse_float(s):
    s = s.strip()
    if s == "" or s.lower() == "nan":
        return math.nan
    return float(s)


def write_dataset(records, out_dir, horizon=None, extra_meta=None):
    """Write ``data.csv`` and ``metadata.json``; returns both paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = records[0].covariate_names if records else []
    for r in records:
        if r.covariate_names != names:
            raise IngestionError("all records must share covariate columns")
    csv_path = out / "data.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["item_id", "timestamp", "target", *names])
        for r in records:
            for t in range(len(r)):
                w.writerow([r.item_id, int(r.timestamps[t]), _fmt(r.target[t]),
                            *(_fmt(v) for v in r.covariates[t])])
    meta = {
        "freq": records[0].freq if records else "",
        "known_future": [names[j] for j in (records[0].known_future_cols if records else [])],
        "horizon": horizon,
    }
    if extra_meta:
        meta.update(extra_meta)
    meta_path = out / "metadata.json"
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return csv_path, meta_path


def _fmt(v):
    return "" if not np.isfinite(v) else repr(float(v))
