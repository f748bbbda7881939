"""Episode sampling, context-overfitting augmentation and the CRPS training loop."""

from __future__ import annotations

import collections
import csv
import hashlib
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import C_MAX, H_MAX, M_MAX, T_MAX, EpisodeError, build_episode
from .metrics import crps_loss
from .model import (Batch, as_tensors, bin_centers, forward_probs,
                    init_params, load_checkpoint, save_checkpoint)
from .retrieval import IndexError_, build_index, training_pool

LOG_COLUMNS = ("step", "loss", "grad_norm", "overfit_fraction", "wall_ms")


class NonFiniteLoss(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 8
    lr: float = 3e-4
    lr_min_frac: float = 0.1
    warmup: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip: float = 1.0
    p_overfit: float = 0.2
    n_targets: int = 1
    seed: int = 0
    c_range: tuple = (1, 4)
    t_range: tuple = (32, 192)
    h_range: tuple = (8, 48)
    m_range: tuple = (0, 0)
    modes: tuple = ("3d", "2d")

    def __post_init__(self):
        if not 0.0 <= self.p_overfit <= 1.0:
            raise ValueError("p_overfit must lie in [0, 1]")
        for name, hi in (("c_range", C_MAX), ("t_range", T_MAX), ("h_range", H_MAX),
                         ("m_range", M_MAX)):
            lo_v, hi_v = getattr(self, name)
            lo_min = 0 if name in ("m_range",) else 1
            if not lo_min <= lo_v <= hi_v <= hi:
                raise ValueError(f"{name}={getattr(self, name)} outside [{lo_min}, {hi}]")
            setattr(self, name, (int(lo_v), int(hi_v)))
        self.modes = tuple(self.modes)

    def to_dict(self):
        d = asdict(self)
        for k in ("c_range", "t_range", "h_range", "m_range", "modes"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: (tuple(v) if isinstance(v, list) else v)
                      for k, v in d.items() if k in names})


# ----------------------------------------------------------------------------
# batches


class IndexCache:
    """Y-space indexes keyed by (record position, T, H)."""

    def __init__(self, records):
        self.records = records
        self._cache = {}

    def get(self, i, T, H):
        key = (i, T, H)
        if key not in self._cache:
            self._cache[key] = build_index(self.records[i], T, H, "y")
        return self._cache[key]


@dataclass
class BatchInfo:
    skipped: int = 0
    overfit: int = 0
    shape: tuple = ()


def _draw(rng, lo_hi):
    lo, hi = lo_hi
    return int(rng.integers(lo, hi + 1))


def sample_shapes(config, rng, max_len=None, max_cov=M_MAX):
    """(C, T, H, M) for one batch."""
    C = _draw(rng, config.c_range)
    H = _draw(rng, config.h_range)
    T = _draw(rng, config.t_range)
    if max_len is not None and 2 * (T + H) > max_len:
        T = max(config.t_range[0], max_len // 2 - H)
    M = min(_draw(rng, config.m_range), max_cov)
    return C, T, H, M


def sample_batch(records, config, rng, cache=None, patch_len=8):
    """A list of training episodes sharing (C, T, H, M) plus bookkeeping."""
    cache = cache or IndexCache(records)
    lengths = np.array([len(r) for r in records])
    max_cov = min(r.n_covariates for r in records)
    C, T, H, M = sample_shapes(config, rng, int(lengths.max()), max_cov)
    eligible = np.flatnonzero(lengths >= 2 * (T + H))
    info = BatchInfo(shape=(C, T, H, M))
    episodes = []
    if eligible.size == 0:
        info.skipped = config.batch_size
        return episodes, info
    cols = None
    for _ in range(config.batch_size):
        i = int(eligible[rng.integers(eligible.size)])
        rec = records[i]
        ref = int(rng.integers(0, len(rec) - T - H + 1))
        try:
            pool = training_pool(cache.get(i, T, H), ref, C + 1, rng, config.n_targets)
        except IndexError_:
            info.skipped += 1
            continue
        if pool.short_supply or len(pool.instances) < C + 1:
            info.skipped += 1
            continue
        if cols is None:
            cols = np.sort(rng.choice(max_cov, size=M, replace=False)) if M else np.array([], int)
        insts = []
        for inst in pool.instances:
            inst.covariates = inst.covariates[:, cols]
            insts.append(inst)
        extra = tuple(range(C + 1 - pool.n_targets, C))
        try:
            ep = build_episode(insts[-1], insts[:-1], mode="train", extra_targets=extra)
        except EpisodeError:
            info.skipped += 1
            continue
        ep = apply_context_overfit(ep, rng, config.p_overfit, patch_len)
        info.overfit += int(ep.overfit)
        episodes.append(ep)
    return episodes, info


def apply_context_overfit(episode, rng, p_overfit, patch_len=8):
    """With probability ``p_overfit`` copy a context's lookback tail into the query.

    The query (last slice) then receives that context's future as its
    supervision. The draws are made whether or not the augmentation fires.
    """
    fire = rng.random() < p_overfit
    designated = set(episode.target_slices)
    ctx = [k for k in range(episode.C + 1) if k not in designated]
    T = episode.T
    hi = max(patch_len, T // 4)
    j_pos = int(rng.integers(len(ctx))) if ctx else 0
    ell = int(rng.integers(patch_len, hi + 1))
    if not fire or not ctx:
        return episode
    ell = min(ell, T)
    j = ctx[j_pos]
    q = episode.C
    ep = episode.copy(overfit=True)
    ep.values[q, T - ell:T, :] = episode.values[j, T - ell:T, :]
    ep.mask[q, T - ell:T] = episode.mask[j, T - ell:T]
    M = episode.M
    sup = ep.supervision
    sup[episode.target_slices.index(q)] = episode.values[j, T:, M]
    return ep


# ----------------------------------------------------------------------------
# optimisation


@dataclass
class TrainState:
    step: int
    params: dict
    m: dict
    v: dict
    rng: np.random.Generator
    loss_history: collections.deque
    clamped: int = 0

    @classmethod
    def fresh(cls, model_config, train_config, param_seed=None):
        seed = train_config.seed if param_seed is None else param_seed
        params = init_params(model_config, seed)
        zeros = {k: np.zeros_like(v) for k, v in params.items()}
        return cls(0, params, zeros, {k: np.zeros_like(v) for k, v in params.items()},
                   np.random.Generator(np.random.Philox([train_config.seed, 17])),
                   collections.deque(maxlen=1000))


def lr_at(step, config):
    if config.warmup and step < config.warmup:
        return config.lr * (step + 1) / config.warmup
    span = max(1, config.steps - config.warmup)
    frac = min(1.0, (step - config.warmup) / span)
    lo = config.lr * config.lr_min_frac
    return lo + 0.5 * (config.lr - lo) * (1.0 + math.cos(math.pi * frac))


def batch_fingerprint(episodes):
    h = hashlib.sha256()
    for e in episodes:
        h.update(e.values.tobytes())
        h.update(e.mask.tobytes())
    return h.hexdigest()[:16]


def batch_loss(episodes, leaves, model_config, mode="3d"):
    """Mean CRPS over designated-target horizon steps, plus the clamp count."""
    batch = Batch.from_episodes(episodes)
    probs = forward_probs(batch, leaves, model_config, mode)
    lo, hi = model_config.value_range
    h = bin_centers(model_config.K, model_config.value_range)
    y = batch.supervision
    clamped = int(np.sum((y < h[0]) | (y > h[-1])))
    y = np.clip(y, h[0], h[-1])
    return ad.reduce_mean(crps_loss(probs, h, y)), clamped


def clip_grads(grads, max_norm):
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


def train_step(state, episodes, model_config, train_config):
    """One Adam step on the batch; returns ``(loss, grad_norm)``.

    Raises ``NonFiniteLoss`` without touching ``state`` if the loss or any
    gradient is not finite.
    """
    leaves = as_tensors(state.params, requires_grad=True)
    total = None
    clamped = 0
    for mode in train_config.modes:
        loss, c = batch_loss(episodes, leaves, model_config, mode)
        clamped += c
        total = loss if total is None else ad.add(total, loss)
    total = ad.mul(total, 1.0 / len(train_config.modes))
    value = float(total.data)
    named = list(leaves.items())
    gmap = ad.backward(total, [t for _, t in named])
    grads = {name: gmap[t] for name, t in named}
    if not math.isfinite(value) or not all(np.isfinite(g).all() for g in grads.values()):
        raise NonFiniteLoss(f"non-finite loss at step {state.step} (batch {batch_fingerprint(episodes)})")
    grads, gnorm = clip_grads(grads, train_config.clip)

    t = state.step + 1
    lr = lr_at(state.step, train_config)
    b1, b2 = train_config.beta1, train_config.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, g in grads.items():
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        state.params[name] = state.params[name] - lr * (m / c1) / (np.sqrt(v / c2) + train_config.adam_eps)
    state.step = t
    state.clamped += clamped
    state.loss_history.append(value)
    return value, gnorm


def train(records, model_config, train_config, state=None, log_path=None, on_step=None,
          max_bad_streak=50, until=None):
    """Run to ``train_config.steps`` steps (continuing ``state`` if given).

    ``until`` stops early at that step; the learning-rate schedule still spans
    the full run, so stopping and resuming matches an uninterrupted run.
    """
    stop = train_config.steps if until is None else min(int(until), train_config.steps)
    state = state or TrainState.fresh(model_config, train_config)
    cache = IndexCache(records)
    log = None
    if log_path is not None:
        new = not Path(log_path).exists() or state.step == 0
        log = open(log_path, "w" if new else "a", newline="", encoding="utf-8")
        writer = csv.writer(log, lineterminator="\n")
        if new:
            writer.writerow(LOG_COLUMNS)
    bad = 0
    empty = 0
    try:
        while state.step < stop:
            t0 = time.perf_counter()
            episodes, info = sample_batch(records, train_config, state.rng, cache, model_config.P)
            if not episodes:
                empty += 1
                if empty > 1000:
                    raise EpisodeError("no trainable episodes: series too short for the window ranges")
                continue
            empty = 0
            try:
                loss, gnorm = train_step(state, episodes, model_config, train_config)
                bad = 0
            except NonFiniteLoss:
                bad += 1
                if bad > max_bad_streak:
                    raise
                continue
            wall = (time.perf_counter() - t0) * 1000.0
            frac = info.overfit / len(episodes)
            if log is not None:
                writer.writerow([state.step, repr(loss), repr(gnorm), repr(frac), f"{wall:.1f}"])
            if on_step is not None:
                on_step(state, loss, gnorm, frac)
    finally:
        if log is not None:
            log.close()
    return state


# ----------------------------------------------------------------------------
# checkpoints


def _rng_state_to_json(rng):
    st = rng.bit_generator.state

    def conv(x):
        if isinstance(x, dict):
            return {k: conv(v) for k, v in x.items()}
        if isinstance(x, np.ndarray):
            return {"__array__": [int(v) for v in x.ravel()], "dtype": str(x.dtype)}
        if isinstance(x, (np.integer,)):
            return int(x)
        return x

    return conv(st)


def _rng_from_json(doc):
    def conv(x):
        if isinstance(x, dict):
            if "__array__" in x:
                return np.array(x["__array__"], dtype=x["dtype"])
            return {k: conv(v) for k, v in x.items()}
        return x

    st = conv(doc)
    bg = getattr(np.random, st["bit_generator"])()
    bg.state = st
    return np.random.Generator(bg)


def save_state(path, state, model_config, train_config):
    records = dict(state.params)
    records.update({f"adam.m.{k}": v for k, v in state.m.items()})
    records.update({f"adam.v.{k}": v for k, v in state.v.items()})
    meta = {
        "kind": "train_state",
        "step": state.step,
        "rng": _rng_state_to_json(state.rng),
        "loss_history": list(state.loss_history),
        "clamped": state.clamped,
        "train_config": train_config.to_dict(),
    }
    save_checkpoint(path, model_config, records, meta, dtype="f8")


def load_state(path):
    """Return ``(state, model_config, train_config)``."""
    cfg, records, meta = load_checkpoint(path)
    params = {k: v for k, v in records.items() if not k.startswith("adam.")}
    m = {k[len("adam.m."):]: v for k, v in records.items() if k.startswith("adam.m.")}
    v = {k[len("adam.v."):]: v for k, v in records.items() if k.startswith("adam.v.")}
    if not m:
        m = {k: np.zeros_like(x) for k, x in params.items()}
        v = {k: np.zeros_like(x) for k, x in params.items()}
    tc = TrainConfig.from_dict(meta.get("train_config", {}))
    rng = _rng_from_json(meta["rng"]) if "rng" in meta else np.random.Generator(
        np.random.Philox([tc.seed, 17]))
    state = TrainState(int(meta.get("step", 0)), params, m, v, rng,
                       collections.deque(meta.get("loss_history", []), maxlen=1000),
                       int(meta.get("clamped", 0)))
    return state, cfg, tc


def export_params(path, state, model_config, dtype="f4"):
    save_checkpoint(path, model_config, state.params, {"kind": "model", "step": state.step}, dtype)


def model_from_checkpoint(path):
    """``(config, params)`` from either a model export or a training state."""
    cfg, records, meta = load_checkpoint(path)
    params = {k: v for k, v in records.items() if not k.startswith("adam.")}
    return cfg, params

