"""Stacked 3D attention model with a binned predictive head.

Token layout is (B, C+1, S, M+1, D): batch, slices, temporal patches,
variables (target last), embedding. Each block runs variable, temporal and
context attention, then a gated FFN, each followed by residual + post-norm.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import tokenizer as tk
from .data import M_MAX, NORM_EPS

AXES = ("variable", "temporal", "context")


@dataclass(frozen=True)
class ModelConfig:
    L: int = 2
    n_heads: int = 4
    D: int = 32
    d_ff: int = 128
    K: int = 201
    P: int = 8
    value_range: tuple = (-10.0, 10.0)
    mode: str = "3d"
    t_max: int = 512
    h_max: int = 64
    m_max: int = M_MAX
    rope_base: float = 10000.0
    profile: str = "desk"

    def __post_init__(self):
        if self.D % self.n_heads:
            raise ValueError(f"D={self.D} not divisible by n_heads={self.n_heads}")
        if (self.D // self.n_heads) % 2:
            raise ValueError("head dim must be even for rotary embeddings")
        if self.D % 2:
            raise ValueError("D must be even")
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if self.mode not in ("2d", "3d"):
            raise ValueError(f"mode must be 2d or 3d, got {self.mode!r}")
        object.__setattr__(self, "value_range", tuple(float(v) for v in self.value_range))

    @property
    def window_2d(self):
        return self.t_max + self.h_max

    def to_dict(self):
        d = asdict(self)
        d["value_range"] = list(self.value_range)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


PROFILES = {
    "paper": dict(L=12, n_heads=6, D=192, d_ff=768, K=5000, P=8, t_max=2048, h_max=192,
                  profile="paper"),
    "desk": dict(L=2, n_heads=4, D=32, d_ff=128, K=201, P=8, t_max=512, h_max=64,
                 profile="desk"),
}


def config_for(profile="desk", **overrides):
    return ModelConfig(**{**PROFILES[profile], **overrides})


def bin_centers(K, value_range=(-10.0, 10.0)):
    lo, hi = value_range
    return lo + (np.arange(K) + 0.5) * (hi - lo) / K


# ----------------------------------------------------------------------------
# parameters


def _dense(rng, fan_in, fan_out, scale=1.0):
    return rng.normal(0.0, scale / math.sqrt(fan_in), size=(fan_in, fan_out))


def init_params(config, seed=0):
    """Fresh parameter dict (name -> float64 array) in a fixed order."""
    rng = np.random.Generator(np.random.Philox(seed))
    D, F, P = config.D, config.d_ff, config.P
    p = {}
    p.update(tk.init_params(rng, P, D, "tok"))
    p.update(tk.init_params(rng, config.window_2d, D, "tok2d"))
    p["var_emb"] = rng.normal(0.0, 0.02, size=(config.m_max + 1, D))
    for i in range(config.L):
        for ax in AXES:
            pre = f"blocks.{i}.{ax}"
            p[f"{pre}.qkv_w"] = _dense(rng, D, 3 * D)
            p[f"{pre}.qkv_b"] = np.zeros(3 * D)
            p[f"{pre}.out_w"] = _dense(rng, D, D)
            p[f"{pre}.out_b"] = np.zeros(D)
            p[f"{pre}.ln_g"] = np.ones(D)
            p[f"{pre}.ln_b"] = np.zeros(D)
        pre = f"blocks.{i}.ffn"
        p[f"{pre}.w1"] = _dense(rng, D, F)
        p[f"{pre}.b1"] = np.zeros(F)
        p[f"{pre}.w3"] = _dense(rng, D, F)
        p[f"{pre}.b3"] = np.zeros(F)
        p[f"{pre}.w2"] = _dense(rng, F, D)
        p[f"{pre}.b2"] = np.zeros(D)
        p[f"{pre}.ln_g"] = np.ones(D)
        p[f"{pre}.ln_b"] = np.zeros(D)
    p["unpatch.w"] = _dense(rng, D, P * D)
    p["unpatch.b"] = np.zeros(P * D)
    p["unpatch2d.w"] = _dense(rng, D, config.h_max * D)
    p["unpatch2d.b"] = np.zeros(config.h_max * D)
    p["head.w1"] = _dense(rng, D, F)
    p["head.b1"] = np.zeros(F)
    p["head.w2"] = _dense(rng, F, config.K, scale=0.02)
    p["head.b2"] = np.zeros(config.K)
    return p


def param_shapes(config):
    """Shapes of every parameter without allocating them."""
    D, F, P, K = config.D, config.d_ff, config.P, config.K
    W2 = config.window_2d
    s = {
        "tok.W": (D // 2, P), "tok.b": (D // 2,), "tok.V": (D, P),
        "tok2d.W": (D // 2, W2), "tok2d.b": (D // 2,), "tok2d.V": (D, W2),
        "var_emb": (config.m_max + 1, D),
    }
    for i in range(config.L):
        for ax in AXES:
            pre = f"blocks.{i}.{ax}"
            s.update({f"{pre}.qkv_w": (D, 3 * D), f"{pre}.qkv_b": (3 * D,),
                      f"{pre}.out_w": (D, D), f"{pre}.out_b": (D,),
                      f"{pre}.ln_g": (D,), f"{pre}.ln_b": (D,)})
        pre = f"blocks.{i}.ffn"
        s.update({f"{pre}.w1": (D, F), f"{pre}.b1": (F,), f"{pre}.w3": (D, F),
                  f"{pre}.b3": (F,), f"{pre}.w2": (F, D), f"{pre}.b2": (D,),
                  f"{pre}.ln_g": (D,), f"{pre}.ln_b": (D,)})
    s.update({"unpatch.w": (D, P * D), "unpatch.b": (P * D,),
              "unpatch2d.w": (D, config.h_max * D), "unpatch2d.b": (config.h_max * D,),
              "head.w1": (D, F), "head.b1": (F,), "head.w2": (F, K), "head.b2": (K,)})
    return s


def count_params(config):
    return int(sum(math.prod(shape) for shape in param_shapes(config).values()))


# ----------------------------------------------------------------------------
# layers


class AttentionRecorder:
    """Collects softmaxed attention weights keyed by (layer, axis)."""

    def __init__(self):
        self.weights = {}

    def __call__(self, layer, axis, w):
        self.weights[(layer, axis)] = w


def mha(x, pr, n_heads, rope_tables=None):
    """Self-attention over the middle axis of x (N, L, D); returns (out, weights)."""
    N, L, D = x.shape
    dh = D // n_heads
    qkv = ad.add(ad.matmul(x, pr["qkv_w"]), pr["qkv_b"])
    qkv = ad.transpose(ad.reshape(qkv, (N, L, 3, n_heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    if rope_tables is not None:
        cos_t, sin_t = rope_tables
        q = ad.rope(q, cos_t, sin_t)
        k = ad.rope(k, cos_t, sin_t)
    logits = ad.mul(ad.matmul(q, ad.swap_last(k)), 1.0 / math.sqrt(dh))
    w = ad.softmax(logits, axis=-1)
    o = ad.matmul(w, v)
    o = ad.reshape(ad.transpose(o, (0, 2, 1, 3)), (N, L, D))
    return ad.add(ad.matmul(o, pr["out_w"]), pr["out_b"]), w


def _post_norm(x, delta, pr):
    return ad.layernorm(ad.add(x, delta), pr["ln_g"], pr["ln_b"])


def variable_attention(Z, pr, var_table, column_ids, n_heads, record=None):
    """Attention across the variable axis after adding per-column embeddings.

    ``column_ids`` is (V,) or (B, V); each slot reads its own embedding row.
    """
    B, C1, S, V, D = Z.shape
    ids = np.asarray(column_ids)
    if ids.ndim == 1:
        ids = np.broadcast_to(ids, (B, V))
    if ids.max(initial=0) >= var_table.shape[0] or ids.min(initial=0) < 0:
        raise IndexError(f"column id out of range for {var_table.shape[0]} embeddings")
    full = np.broadcast_to(ids[:, None, None, :], (B, C1, S, V))
    Zv = ad.add(Z, ad.gather(var_table, full))
    out, w = mha(ad.reshape(Zv, (B * C1 * S, V, D)), pr, n_heads)
    if record is not None:
        record(w.data.reshape(B, C1, S, n_heads, V, V))
    return _post_norm(Zv, ad.reshape(out, (B, C1, S, V, D)), pr)


def temporal_attention(Z, pr, n_heads, rope_base=10000.0, record=None, pos_offset=0):
    B, C1, S, V, D = Z.shape
    if S == 0:
        raise ad.ShapeError("temporal attention over zero patches")
    Zt = ad.transpose(Z, (0, 1, 3, 2, 4))
    tables = ad.rope_tables(S, D // n_heads, rope_base, offset=pos_offset)
    out, w = mha(ad.reshape(Zt, (B * C1 * V, S, D)), pr, n_heads, tables)
    if record is not None:
        record(w.data.reshape(B, C1, V, n_heads, S, S))
    out = ad.transpose(ad.reshape(out, (B, C1, V, S, D)), (0, 1, 3, 2, 4))
    return _post_norm(Z, out, pr)


def context_attention(Z, pr, n_heads, record=None):
    B, C1, S, V, D = Z.shape
    Zc = ad.transpose(Z, (0, 2, 3, 1, 4))
    out, w = mha(ad.reshape(Zc, (B * S * V, C1, D)), pr, n_heads)
    if record is not None:
        record(w.data.reshape(B, S, V, n_heads, C1, C1))
    out = ad.transpose(ad.reshape(out, (B, S, V, C1, D)), (0, 3, 1, 2, 4))
    return _post_norm(Z, out, pr)


def ffn(Z, pr):
    gate = ad.gelu(ad.add(ad.matmul(Z, pr["w1"]), pr["b1"]))
    lin = ad.add(ad.matmul(Z, pr["w3"]), pr["b3"])
    out = ad.add(ad.matmul(ad.mul(gate, lin), pr["w2"]), pr["b2"])
    return _post_norm(Z, out, pr)


def _sub(params, prefix):
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def block(Z, params, i, config, column_ids, recorder=None):
    rec = (lambda ax: (lambda w: recorder(i, ax, w))) if recorder else (lambda ax: None)
    Z = variable_attention(Z, _sub(params, f"blocks.{i}.variable"), params["var_emb"],
                           column_ids, config.n_heads, rec("variable"))
    Z = temporal_attention(Z, _sub(params, f"blocks.{i}.temporal"), config.n_heads,
                           config.rope_base, rec("temporal"))
    Z = context_attention(Z, _sub(params, f"blocks.{i}.context"), config.n_heads,
                          rec("context"))
    return ffn(Z, _sub(params, f"blocks.{i}.ffn"))


# ----------------------------------------------------------------------------
# forward


@dataclass
class Batch:
    """Stacked episodes sharing (C, T, H, M) and target-slice layout."""

    values: np.ndarray  # (B, C1, T+H, V)
    mask: np.ndarray  # (B, C1, T+H)
    column_ids: np.ndarray  # (B, V)
    target_slices: tuple
    T: int
    H: int
    supervision: np.ndarray | None = None  # (B, nt, H)

    @classmethod
    def from_episodes(cls, episodes):
        e0 = episodes[0]
        for e in episodes[1:]:
            if (e.values.shape != e0.values.shape or e.target_slices != e0.target_slices
                    or e.T != e0.T):
                raise ad.ShapeError("batch episodes must share shape and target layout")
        sup = None
        if all(e.supervision is not None for e in episodes):
            sup = np.stack([e.supervision for e in episodes])
        return cls(
            np.stack([e.values for e in episodes]),
            np.stack([e.mask for e in episodes]).astype(np.float64),
            np.stack([e.column_ids for e in episodes]),
            e0.target_slices, e0.T, e0.H, sup,
        )


def as_tensors(params, requires_grad=False):
    if requires_grad:
        return {k: ad.leaf(v) for k, v in params.items()}
    return {k: ad.Tensor(v) for k, v in params.items()}


def forward_logits(batch, params, config, mode=None, recorder=None):
    """Logits (B, n_targets, H, K) as a Tensor. ``params`` maps names to Tensors."""
    mode = mode or config.mode
    T, H = batch.T, batch.H
    V = batch.values.shape[-1]
    if mode == "3d":
        Z = tk.tokenize_arrays(batch.values, batch.mask, config.P,
                               params["tok.W"], params["tok.b"], params["tok.V"])
    elif mode == "2d":
        if T + H > config.window_2d or H > config.h_max:
            raise ad.ShapeError(
                f"2d mode window {config.window_2d} / h_max {config.h_max} too small for T={T}, H={H}"
            )
        Z = tk.tokenize_arrays(batch.values, batch.mask, config.window_2d,
                               params["tok2d.W"], params["tok2d.b"], params["tok2d.V"])
    else:
        raise ValueError(f"unknown mode {mode!r}")
    for i in range(config.L):
        Z = block(Z, params, i, config, batch.column_ids, recorder)

    B, C1, S, _, D = Z.shape
    lat = ad.concat([Z[:, s:s + 1, :, V - 1, :] for s in batch.target_slices], axis=1)
    nt = len(batch.target_slices)
    if mode == "3d":
        u = ad.add(ad.matmul(lat, params["unpatch.w"]), params["unpatch.b"])
        u = ad.reshape(u, (B, nt, S * config.P, D))
        steps = u[:, :, T:T + H, :]
    else:
        u = ad.add(ad.matmul(ad.reshape(lat, (B, nt, D)), params["unpatch2d.w"]),
                   params["unpatch2d.b"])
        u = ad.reshape(u, (B, nt, config.h_max, D))
        steps = u[:, :, :H, :]
    hid = ad.gelu(ad.add(ad.matmul(steps, params["head.w1"]), params["head.b1"]))
    return ad.add(ad.matmul(hid, params["head.w2"]), params["head.b2"])


def forward_probs(batch, params, config, mode=None, recorder=None):
    return ad.softmax(forward_logits(batch, params, config, mode, recorder), axis=-1)


@dataclass
class BinnedForecast:
    probs: np.ndarray  # (H, K)
    centers: np.ndarray  # (K,)
    mean: float = 0.0
    std: float = 1.0

    @property
    def norm(self):
        return self.mean, self.std


def canonical_episode(episode):
    """Reorder contexts by content and covariate columns by id.

    Attention is order-equivariant only up to float summation order; fixing
    the order makes permuted inputs produce bitwise-identical forecasts.
    Only episodes whose sole designated slice is the last one are reordered.
    """
    C, M = episode.C, episode.M
    if episode.target_slices != (C,):
        return episode
    cols = list(np.argsort(episode.column_ids[:M], kind="stable")) + [M]
    values = episode.values[:, :, cols]
    # keys use the column-sorted values so a column shuffle cannot reorder contexts
    keys = [values[k].tobytes() + episode.mask[k].tobytes() for k in range(C)]
    slices = sorted(range(C), key=lambda k: keys[k]) + [C]
    ep = episode.copy()
    ep.values = values[slices]
    ep.mask = episode.mask[slices]
    ep.norm_mean = episode.norm_mean[slices]
    ep.norm_std = episode.norm_std[slices]
    ep.column_ids = episode.column_ids[cols]
    return ep


def forward(episode, params, config, mode=None):
    """Binned forecast for the last slice of one episode (canonical order)."""
    episode = canonical_episode(episode)
    batch = Batch.from_episodes([episode])
    probs = forward_probs(batch, as_tensors(params), config, mode).data
    C = episode.C
    pos = batch.target_slices.index(C)
    return BinnedForecast(probs[0, pos].copy(), bin_centers(config.K, config.value_range),
                          float(episode.norm_mean[C]), float(episode.norm_std[C]))


def forward_2d(episode, params, config):
    return forward(episode, params, config, mode="2d")


def point_and_quantiles(f, levels, denormalize=True):
    """Expected value and CDF quantiles per step, optionally in raw units."""
    levels = np.asarray(levels, dtype=np.float64)
    if levels.size == 0:
        raise ValueError("point_and_quantiles: empty levels")
    if np.any(np.diff(levels) <= 0) or levels[0] <= 0 or levels[-1] >= 1:
        raise ValueError("levels must be strictly increasing inside (0, 1)")
    probs = np.atleast_2d(f.probs)
    h = np.asarray(f.centers)
    point = probs @ h
    cdf = np.cumsum(probs, axis=-1)
    idx = np.stack([[np.searchsorted(row, tau - 1e-12, side="left") for tau in levels]
                    for row in cdf])
    q = h[np.minimum(idx, len(h) - 1)]
    if denormalize:
        scale = f.std + NORM_EPS
        point = point * scale + f.mean
        q = q * scale + f.mean
    return point, q


def dump_attention(episode, params, config, layer, axis, query_position, mode=None):
    """Attention weights (n_heads, keys) for one query in the target slice/column.

    ``query_position`` indexes the temporal patch; for the temporal axis it is
    also the query token.
    """
    if not 0 <= layer < config.L:
        raise IndexError(f"layer {layer} outside [0, {config.L})")
    if axis not in AXES:
        raise ValueError(f"axis must be one of {AXES}")
    rec = AttentionRecorder()
    forward_logits(Batch.from_episodes([episode]), as_tensors(params), config, mode, rec)
    w = rec.weights[(layer, axis)]
    C, V = episode.C, episode.values.shape[-1]
    S = w.shape[4] if axis == "temporal" else w.shape[2 if axis == "variable" else 1]
    if not 0 <= query_position < S:
        raise IndexError(f"query position {query_position} outside [0, {S})")
    if axis == "temporal":
        return w[0, C, V - 1, :, query_position, :]
    if axis == "variable":
        return w[0, C, query_position, :, V - 1, :]
    return w[0, query_position, V - 1, :, C, :]


# ----------------------------------------------------------------------------
# checkpoint format

MAGIC = b"BGTS"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, config, records, meta=None, dtype="f4"):
    """Write ``records`` (name -> array) after a JSON header.

    Layout: magic, u32 version, u32 header length, header JSON, u32 record
    count, then per record: u32 name length, name, u8 dtype code (0 f32,
    1 f64), u32 ndim, u32 dims, little-endian data.
    """
    dt = np.dtype("<" + dtype)
    header = json.dumps({"config": config.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(header)), header,
             struct.pack("<I", len(records))]
    for name, arr in records.items():
        arr = np.asarray(arr)
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<BI", _CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path):
    """Return ``(config, records, meta)``; arrays come back as float64."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    try:
        version, hlen = struct.unpack_from("<II", buf, 4)
        if version > FORMAT_VERSION:
            raise CheckpointError(
                f"{path}: format version {version} is newer than supported version {FORMAT_VERSION}"
            )
        off = 12
        header = json.loads(buf[off:off + hlen].decode())
        off += hlen
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        records = {}
        for _ in range(n):
            (nl,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off:off + nl].decode("utf-8")
            off += nl
            code, ndim = struct.unpack_from("<BI", buf, off)
            off += 5
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            dt = _DTYPES[code]
            size = math.prod(shape) * dt.itemsize
            if off + size > len(buf):
                raise CheckpointError(f"{path}: truncated record {name!r}")
            records[name] = np.frombuffer(buf, dtype=dt, count=math.prod(shape),
                                          offset=off).astype(np.float64).reshape(shape)
            off += size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from None
    return ModelConfig.from_dict(header["config"]), records, header["meta"]


def check_compatible(config, params):
    want = param_shapes(config)
    for name, shape in want.items():
        if name not in params:
            raise CheckpointError(f"missing parameter {name}")
        if tuple(params[name].shape) != tuple(shape):
            raise CheckpointError(f"parameter {name} has shape {params[name].shape}, expected {shape}")
