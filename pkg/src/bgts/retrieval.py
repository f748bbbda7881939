"""Exact nearest-window retrieval over a series' own history.

Windows are z-normalized per channel; the distance is the average of a
cosine term and a length-scaled L2 term. Queries are exhaustive scans, so
results are exact and reproducible.
"""

from __future__ import annotations

import enum
import hashlib
import io
from dataclasses import dataclass

import numpy as np

from .data import NORM_EPS, SplitError, window_instance


class IndexError_(ValueError):
    """Series too short to index."""


class SpaceMode(str, enum.Enum):
    Y = "y"
    X = "x"
    XY = "xy"


def _znorm_channels(w):
    """z-normalize each channel (last axis) over the window axis (-2)."""
    mu = w.mean(axis=-2, keepdims=True)
    sd = w.std(axis=-2, keepdims=True)
    return (w - mu) / (sd + NORM_EPS)


def distance(a, b):
    """0.5 (1 - cos(a, b)) + 0.5 ||a - b|| / sqrt(n); zero-norm cosine counts as 1."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"distance: shapes {a.shape} and {b.shape} differ")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    cos = float(a @ b) / (na * nb) if na > 0 and nb > 0 else 0.0
    l2 = np.linalg.norm(a - b) / np.sqrt(a.size)
    return 0.5 * (1.0 - cos) + 0.5 * l2


def _distances(windows, q):
    """Vectorized ``distance`` of every row in ``windows`` (n, d) to ``q`` (d,)."""
    nw = np.linalg.norm(windows, axis=1)
    nq = np.linalg.norm(q)
    dots = windows @ q
    with np.errstate(divide="ignore", invalid="ignore"):
        cos = np.where((nw > 0) & (nq > 0), dots / (nw * nq), 0.0)
    l2 = np.linalg.norm(windows - q, axis=1) / np.sqrt(q.size)
    return 0.5 * (1.0 - cos) + 0.5 * l2


def channels(record, space):
    space = SpaceMode(space)
    y = np.nan_to_num(record.target, nan=0.0)[:, None]
    if space is SpaceMode.Y:
        return y
    X = np.nan_to_num(record.covariates, nan=0.0)
    if X.shape[1] == 0:
        raise IndexError_(f"{record.item_id}: {space.value}-space retrieval needs covariates")
    return X if space is SpaceMode.X else np.concatenate([X, y], axis=1)


@dataclass
class RetrievalIndex:
    record: object
    T: int
    H: int
    space: SpaceMode
    windows: np.ndarray  # (n_candidates, T * n_channels), z-normalized per channel
    limit: int  # history length the index covers

    @property
    def n_candidates(self):
        return len(self.windows)

    def key(self):
        return (self.record.item_id, self.T, self.H, self.space.value)

    def to_bytes(self):
        buf = io.BytesIO()
        np.savez(buf, windows=self.windows, meta=np.array([self.T, self.H, self.limit]),
                 space=np.array(self.space.value), item=np.array(self.record.item_id))
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data, record):
        z = np.load(io.BytesIO(data))
        T, H, limit = (int(v) for v in z["meta"])
        if str(z["item"]) != record.item_id:
            raise ValueError(f"index belongs to {z['item']}, not {record.item_id}")
        return cls(record, T, H, SpaceMode(str(z["space"])), z["windows"], limit)


def cache_name(item_id, T, H, space):
    h = hashlib.sha256(f"{item_id}|{T}|{H}|{SpaceMode(space).value}".encode()).hexdigest()[:16]
    return f"index-{h}.npz"


def build_index(record, T, H, space=SpaceMode.Y, limit=None):
    """Index every T-window whose following H points lie inside ``record[:limit]``."""
    space = SpaceMode(space)
    n = len(record) if limit is None else int(limit)
    need = 2 * (T + H)
    if n < need:
        raise IndexError_(f"{record.item_id}: history length {n} < minimum {need} for T={T}, H={H}")
    ch = channels(record, space)[:n]
    n_cand = n - T - H + 1
    idx = np.arange(n_cand)[:, None] + np.arange(T)[None, :]
    wins = _znorm_channels(ch[idx])  # (n_cand, T, c)
    return RetrievalIndex(record, T, H, space, wins.reshape(n_cand, -1), n)


def _query_vector(index, lookback_start=None, lookback=None, cov_lookback=None):
    if lookback_start is not None:
        ch = channels(index.record, index.space)
        w = ch[lookback_start:lookback_start + index.T]
    else:
        y = np.asarray(lookback, dtype=np.float64)[:, None]
        if index.space is SpaceMode.Y:
            w = y
        else:
            X = np.asarray(cov_lookback, dtype=np.float64)
            w = X if index.space is SpaceMode.X else np.concatenate([X, y], axis=1)
    if len(w) != index.T:
        raise ValueError(f"query length {len(w)} != index window {index.T}")
    return _znorm_channels(np.nan_to_num(w, nan=0.0)).ravel()


@dataclass
class QueryResult:
    starts: np.ndarray
    distances: np.ndarray
    short_supply: bool
    instances: list


def query(index, k, lookback=None, cov_lookback=None, query_start=None, exclude_until=None):
    """k nearest candidate windows, ties broken by earliest start.

    Candidates must end (lookback + horizon) no later than the query window's
    start, so no context sees past the query. With an explicit ``lookback``
    the query window is taken to be the last T points of the indexed history.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    T, H = index.T, index.H
    if query_start is None and lookback is not None:
        query_start = index.limit - T
    if lookback is None:
        if query_start is None:
            raise ValueError("query needs a lookback or a query_start")
        q = _query_vector(index, lookback_start=query_start)
    else:
        q = _query_vector(index, lookback=lookback, cov_lookback=cov_lookback)
    bound = query_start if exclude_until is None else exclude_until
    n_valid = max(0, min(index.n_candidates, bound - T - H + 1))
    d = _distances(index.windows[:n_valid], q)
    order = np.lexsort((np.arange(n_valid), d))[:k]
    insts = [window_instance(index.record, int(s), T, H) for s in order]
    return QueryResult(order.astype(np.int64), d[order], n_valid < k, insts)


def brute_force_query(record, T, H, space, k, query_start):
    """Reference scan with explicit loops and the scalar distance."""
    ch = channels(record, space)
    q = _znorm_channels(ch[query_start:query_start + T]).ravel()
    scored = []
    for s in range(0, query_start - T - H + 1):
        w = _znorm_channels(ch[s:s + T]).ravel()
        scored.append((distance(w, q), s))
    scored.sort()
    return [s for _, s in scored[:k]]


@dataclass
class TrainingPool:
    instances: list  # chosen slices, designated targets last
    n_targets: int
    short_supply: bool
    candidate_ids: list  # pool positions chosen; 0 is the reference


def training_pool(index, ref_start, k_ctx, rng, n_targets=1):
    """Sample k_ctx of the 2k_ctx + 1 pool (reference + its 2k_ctx neighbours).

    Neighbours exclude windows overlapping the reference. The last
    ``n_targets`` returned slices are the designated targets.
    """
    T, H = index.T, index.H
    q = _query_vector(index, lookback_start=ref_start)
    n = index.n_candidates
    starts = np.arange(n)
    ok = (starts + T + H <= ref_start) | (starts >= ref_start + T + H)
    cand = starts[ok]
    d = _distances(index.windows[cand], q)
    order = cand[np.lexsort((cand, d))][: 2 * k_ctx]
    pool = [ref_start] + [int(s) for s in order]
    short = len(pool) < 2 * k_ctx + 1
    take = min(k_ctx, len(pool))
    chosen = sorted(rng.choice(len(pool), size=take, replace=False).tolist())
    n_targets = max(1, min(n_targets, take))
    tgt = sorted(rng.choice(take, size=n_targets, replace=False).tolist())
    order_idx = [i for i in range(take) if i not in tgt] + tgt
    ids = [chosen[i] for i in order_idx]
    insts = [window_instance(index.record, pool[i], T, H) for i in ids]
    return TrainingPool(insts, n_targets, short, ids)


def uniform_contexts(record, T, H, C, limit=None):
    """C windows at equal strides over the valid starts of ``record[:limit]``."""
    n = len(record) if limit is None else int(limit)
    n_valid = n - T - H + 1
    if n_valid < 1 or C < 1:
        raise SplitError(f"{record.item_id}: length {n} too short for T={T}, H={H}")
    if C == 1:
        starts = [0]
    else:
        starts = [int(round(i * (n_valid - 1) / (C - 1))) for i in range(C)]
    return [window_instance(record, s, T, H) for s in starts]
