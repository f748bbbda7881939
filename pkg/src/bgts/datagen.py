"""Synthetic series: SCM-style covariate tasks, spike toys, noise injection, augmentation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy.signal import lfilter

from .data import Instance, SeriesRecord, znormalize

KERNELS = ("rbf", "periodic", "linear", "rough")
KAPPA_GRID = (0.0, 0.05, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0)
NOISE_KINDS = ("gaussian", "random_walk", "periodic")
SPIKE_PERIOD = 50
_CHOL_MAX = 4096


class SpecError(ValueError):
    pass


def make_rng(seed):
    return np.random.Generator(np.random.Philox(seed))


# ----------------------------------------------------------------------------
# kernel dictionary


def kernel_gram(kind, n, lengthscale, period=24.0):
    t = np.arange(n, dtype=np.float64)
    d = np.abs(t[:, None] - t[None, :])
    if kind == "rbf":
        K = np.exp(-0.5 * (d / lengthscale) ** 2)
    elif kind == "periodic":
        # locally periodic: exact repeats decay over ~10 lengthscales
        K = np.exp(-2.0 * np.sin(np.pi * d / period) ** 2) * np.exp(-0.5 * (d / (10 * lengthscale)) ** 2)
    elif kind == "linear":
        tc = (t - t.mean()) / max(n, 1)
        K = 0.1 + np.outer(tc, tc) * 12.0
    elif kind == "rough":
        K = np.exp(-d / lengthscale)  # Matern-1/2
    else:
        raise SpecError(f"unknown kernel {kind!r}")
    return K + 1e-6 * np.eye(n)


def sample_kernel_path(kind, n, lengthscale, rng, period=24.0):
    """One zero-mean GP draw; long paths are stitched from overlapping blocks."""
    if n <= _CHOL_MAX:
        L = np.linalg.cholesky(kernel_gram(kind, n, lengthscale, period))
        return L @ rng.standard_normal(n)
    out = np.empty(n)
    pos = 0
    while pos < n:
        m = min(_CHOL_MAX, n - pos)
        L = np.linalg.cholesky(kernel_gram(kind, m, lengthscale, period))
        seg = L @ rng.standard_normal(m)
        if pos:
            seg = seg - seg[0] + out[pos - 1]
        out[pos:pos + m] = seg
        pos += m
    return out


# ----------------------------------------------------------------------------
# SCM tasks


@dataclass
class ScmTaskSpec:
    n_nodes: int = 5
    adjacency: list | None = None  # n x n, adjacency[i][j] = 1 means i -> j
    kernels: list | None = None  # per node: [kind, lengthscale, period]
    exposure: list | None = None  # observed covariate node indices
    target_node: int | None = None
    process_noise: float = 0.05
    measurement_noise: float = 0.05
    hidden: int = 16
    ar_coef: float | None = None
    regime_shift_prob: float = 0.0
    identity_mlp: bool = False
    seed: int = 0

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


def random_task(seed, n_nodes=5, n_exposed=2):
    """A random mechanism: DAG over ``n_nodes`` with the last node as target."""
    rng = make_rng(seed)
    adj = np.triu(rng.random((n_nodes, n_nodes)) < 0.5, k=1).astype(int)
    if adj[:-1, -1].sum() == 0:
        adj[0, -1] = 1
    kernels = []
    for _ in range(n_nodes):
        kind = KERNELS[int(rng.integers(len(KERNELS)))]
        ls = float(np.exp(rng.uniform(np.log(5.0), np.log(60.0))))
        kernels.append([kind, ls, float(rng.integers(12, 61))])
    exposure = sorted(rng.choice(n_nodes - 1, size=min(n_exposed, n_nodes - 1), replace=False).tolist())
    return ScmTaskSpec(
        n_nodes=n_nodes, adjacency=adj.tolist(), kernels=kernels, exposure=exposure,
        target_node=n_nodes - 1, ar_coef=float(rng.uniform(0.3, 0.95)), seed=seed,
    )


def validate_spec(spec):
    n = spec.n_nodes
    adj = np.asarray(spec.adjacency if spec.adjacency is not None else np.zeros((n, n)), dtype=int)
    if adj.shape != (n, n):
        raise SpecError(f"adjacency must be {n}x{n}")
    if np.any(np.diag(adj)):
        raise SpecError("adjacency has a self-loop")
    order = topological_order(adj)
    target = n - 1 if spec.target_node is None else spec.target_node
    exposure = list(spec.exposure if spec.exposure is not None else range(n - 1))
    if target in exposure:
        raise SpecError("the target node cannot be an exposed covariate")
    if len(set(exposure)) >= n:
        raise SpecError("exposure set must be a strict subset of nodes")
    return adj, order, target, exposure


def topological_order(adj):
    adj = np.asarray(adj, dtype=int)
    n = len(adj)
    indeg = adj.sum(axis=0).tolist()
    ready = [i for i in range(n) if indeg[i] == 0]
    order = []
    while ready:
        i = ready.pop(0)
        order.append(i)
        for j in range(n):
            if adj[i, j]:
                indeg[j] -= 1
                if indeg[j] == 0:
                    ready.append(j)
    if len(order) != n:
        raise SpecError("adjacency contains a cycle")
    return order


def _mechanism(spec, adj):
    """Per-node random MLP weights, fixed by the task seed."""
    rng = make_rng([spec.seed, 1])
    mech = {}
    for j in range(spec.n_nodes):
        parents = np.flatnonzero(adj[:, j])
        k = len(parents) + 1  # parents + own latent
        w1 = rng.normal(0.0, 1.0 / np.sqrt(k), size=(k, spec.hidden))
        b1 = rng.normal(0.0, 0.1, size=spec.hidden)
        w2 = rng.normal(0.0, 1.0 / np.sqrt(spec.hidden), size=spec.hidden)
        mech[j] = (parents, w1, b1, w2)
    shift = make_rng([spec.seed, 2])
    mech["shift"] = (shift.random() < spec.regime_shift_prob, shift.uniform(0.3, 0.7),
                     shift.normal(0.0, 1.0, size=spec.n_nodes))
    return mech


def generate_series(spec, length, latent_seed):
    """Node trajectories (length, n_nodes) for one latent realization."""
    adj, order, target, _ = validate_spec(spec)
    mech = _mechanism(spec, adj)
    rng = make_rng([spec.seed, 3, latent_seed])
    kernels = spec.kernels or [["rbf", 20.0, 24.0]] * spec.n_nodes
    latent = np.stack([sample_kernel_path(k[0], length, float(k[1]), rng, float(k[2]))
                       for k in kernels], axis=1)
    nodes = np.zeros((length, spec.n_nodes))
    do_shift, at, reweight = mech["shift"]
    t_shift = int(at * length)
    ar = 0.0 if spec.ar_coef is None else spec.ar_coef
    for j in order:
        parents, w1, b1, w2 = mech[j]
        if spec.identity_mlp:
            # linear pass-through: roots carry their latent, others sum parents
            val = nodes[:, parents].sum(axis=1) if len(parents) else latent[:, j].copy()
        else:
            inp = np.concatenate([nodes[:, parents], latent[:, j:j + 1]], axis=1)
            val = np.tanh(inp @ w1 + b1) @ w2
        if do_shift:
            val = val.copy()
            val[t_shift:] *= 1.0 + 0.5 * reweight[j]
        val = val + spec.process_noise * rng.standard_normal(length)
        if j == target and ar > 0:
            val = lfilter([3.0 * (1.0 - ar)], [1.0, -ar], val)
        nodes[:, j] = val
    nodes = nodes + spec.measurement_noise * rng.standard_normal(nodes.shape)
    return nodes


def generate_record(spec, length, latent_seed=0, item_id="scm", freq="H"):
    _, _, target, exposure = validate_spec(spec)
    nodes = generate_series(spec, length, latent_seed)
    names = [f"x{j}" for j in exposure]
    return SeriesRecord(item_id, np.arange(length) * 3600, nodes[:, target],
                        nodes[:, exposure], [], names, freq)


def generate_scm_task(spec, n_instances, T, H):
    """Instances sharing one mechanism with independent latent draws."""
    _, _, target, exposure = validate_spec(spec)
    out = []
    for i in range(n_instances):
        nodes = generate_series(spec, T + H, latent_seed=i)
        y = nodes[:, target]
        out.append(Instance(y[:T], y[T:], nodes[:, exposure], start=0, item_id=f"task{spec.seed}-{i}"))
    return out


# ----------------------------------------------------------------------------
# spikes


@dataclass
class SpikeSpec:
    k: float = 5.0
    length: int = 1000
    phase: int = 0

    def __post_init__(self):
        if self.k <= 0:
            raise SpecError("spike sharpness k must be positive")
        if self.length < 1:
            raise SpecError("spike length must be >= 1")


def spike_series(spec):
    t = np.arange(spec.length, dtype=np.float64) + spec.phase
    return np.exp(spec.k * (np.sin(2.0 * np.pi * t / SPIKE_PERIOD) - 1.0))


def spike_record(spec, item_id="spike", noise=0.0, seed=0):
    y = spike_series(spec)
    if noise:
        y = y + noise * make_rng(seed).standard_normal(len(y))
    return SeriesRecord(item_id, np.arange(spec.length) * 3600, y, np.zeros((spec.length, 0)),
                        freq="H")


# ----------------------------------------------------------------------------
# noise injection


@dataclass
class NoiseSpec:
    kind: str = "gaussian"
    kappa: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise SpecError(f"noise kind must be one of {NOISE_KINDS}")
        if self.kappa < 0:
            raise SpecError("kappa must be >= 0")


@dataclass
class NoiseDraw:
    noise: np.ndarray
    period: float | None = None
    phase: float | None = None


def draw_noise(n, sigma, spec):
    rng = make_rng(spec.seed)
    scale = sigma * spec.kappa
    if spec.kind == "gaussian":
        return NoiseDraw(rng.normal(0.0, 1.0, n) * scale)
    if spec.kind == "random_walk":
        return NoiseDraw(np.cumsum(rng.normal(0.0, 1.0, n) * scale))
    period = float(rng.uniform(12.0, 60.0))
    phase = float(rng.uniform(0.0, 2.0 * np.pi))
    t = np.arange(n, dtype=np.float64)
    wave = scale * np.sin(2.0 * np.pi * t / period + phase)
    return NoiseDraw(wave + rng.normal(0.0, 1.0, n) * 0.1 * scale, period, phase)


def inject_noise(series, spec, return_draw=False):
    """Add noise scaled by kappa times the clean series' standard deviation."""
    series = np.asarray(series, dtype=np.float64)
    if len(series) < 2:
        raise SpecError("noise injection needs at least two points")
    if spec.kappa == 0:
        out = series.copy()
        return (out, NoiseDraw(np.zeros_like(out))) if return_draw else out
    finite = series[np.isfinite(series)]
    draw = draw_noise(len(series), float(finite.std()), spec)
    out = series + draw.noise
    return (out, draw) if return_draw else out


def inject_record(record, spec):
    return replace(record, target=inject_noise(record.target, spec))


# ----------------------------------------------------------------------------
# real-data style augmentation


@dataclass
class ConcatSeries:
    record: SeriesRecord
    boundaries: list

    def sample(self, length, rng):
        n = len(self.record)
        if length > n:
            raise SpecError(f"subsequence length {length} exceeds series length {n}")
        start = int(rng.integers(0, n - length + 1))
        r = self.record
        return SeriesRecord(f"{r.item_id}@{start}", r.timestamps[start:start + length],
                            r.target[start:start + length], r.covariates[start:start + length],
                            list(r.known_future_cols), list(r.covariate_names), r.freq)


def concat_augment(records, rng=None, item_id="concat"):
    """z-normalize each record, then chain them; boundaries mark regime shifts.

    Records are taken in a random order when ``rng`` is given.
    """
    if len(records) < 2:
        raise SpecError("concatenation needs at least two records")
    order = list(range(len(records)))
    if rng is not None:
        order = rng.permutation(len(records)).tolist()
    names = records[0].covariate_names
    ys, xs, bounds, pos = [], [], [], 0
    for i in order:
        r = records[i]
        if r.covariate_names != names:
            raise SpecError("records must share covariate columns")
        ys.append(znormalize(r.target)[0])
        xs.append(r.covariates)
        pos += len(r)
        bounds.append(pos)
    y = np.concatenate(ys)
    X = np.concatenate(xs, axis=0)
    rec = SeriesRecord(item_id, np.arange(len(y)), y, X, list(records[0].known_future_cols),
                       list(names), records[0].freq)
    return ConcatSeries(rec, bounds[:-1])


TIME_INDEX = "time_index"


def add_time_index(record):
    if TIME_INDEX in record.covariate_names:
        raise SpecError(f"{record.item_id}: duplicate column {TIME_INDEX!r}")
    n = len(record)
    X = np.concatenate([record.covariates, np.arange(n, dtype=np.float64)[:, None]], axis=1)
    return replace(record, covariates=X, covariate_names=[*record.covariate_names, TIME_INDEX],
                   known_future_cols=[*record.known_future_cols, X.shape[1] - 1])


# ----------------------------------------------------------------------------
# JSON specs for the gen-data command


def records_from_spec(doc):
    """Build records from a gen-data JSON document.

    ``{"kind": "spike", "k": 5, "length": 1000, "n_items": 1, "noise": 0.0, "seed": 0}``
    or ``{"kind": "scm", "length": 600, "n_items": 4, "seed": 0, "n_nodes": 5,
    "n_exposed": 2, "time_index": false}``.
    """
    if not isinstance(doc, dict):
        raise SpecError("spec must be a JSON object")
    kind = doc.get("kind")
    seed = _int_field(doc, "seed", 0)
    n_items = _int_field(doc, "n_items", 1)
    length = _int_field(doc, "length", 1000)
    if kind == "spike":
        k = doc.get("k", 5.0)
        if not isinstance(k, (int, float)) or k <= 0:
            raise SpecError("k: must be a positive number")
        noise = float(doc.get("noise", 0.0))
        recs = [spike_record(SpikeSpec(float(k), length, phase=int(i * 7) % SPIKE_PERIOD),
                             f"spike{i}", noise, seed + i) for i in range(n_items)]
    elif kind == "scm":
        task = random_task(seed, _int_field(doc, "n_nodes", 5), _int_field(doc, "n_exposed", 2))
        recs = [generate_record(task, length, latent_seed=i, item_id=f"scm{i}")
                for i in range(n_items)]
    else:
        raise SpecError(f"kind: expected 'spike' or 'scm', got {kind!r}")
    if doc.get("time_index"):
        recs = [add_time_index(r) for r in recs]
    return recs


def _int_field(doc, name, default):
    v = doc.get(name, default)
    if not isinstance(v, int) or isinstance(v, bool) or v < 0:
        raise SpecError(f"{name}: must be a non-negative integer")
    return v
