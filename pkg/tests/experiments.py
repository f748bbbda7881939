"""Small training experiments shared by the acceptance suite."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from bgts.data import SeriesRecord
from bgts.datagen import ScmTaskSpec, SpikeSpec, generate_record, spike_record
from bgts.inference import InferenceConfig, mode_forecast, plan_episode
from bgts.model import config_for, point_and_quantiles
from bgts.training import TrainConfig, TrainState, train

SPIKE_T, SPIKE_H = 176, 44  # 220-step windows, T = 4H


def spike_records(n_items=4, length=1500, k=5.0, offset=0, noise=0.0):
    return [spike_record(SpikeSpec(k, length, phase=(7 * (i + offset)) % 50), f"s{i + offset}",
                         noise, seed=i + offset)
            for i in range(n_items)]


def train_spike(seed, p_overfit, steps=5000, batch_size=4, noise=0.1):
    mc = config_for("desk")
    tc = TrainConfig(steps=steps, batch_size=batch_size, lr=1e-3, warmup=100,
                     p_overfit=p_overfit, seed=seed, c_range=(1, 3),
                     t_range=(SPIKE_T, SPIKE_T), h_range=(SPIKE_H, SPIKE_H), modes=("3d",))
    state = train(spike_records(noise=noise), mc, tc, TrainState.fresh(mc, tc))
    return mc, state


def final_loss(state, window=200):
    hist = list(state.loss_history)
    return float(np.mean(hist[-window:]))


def spike_rmse(mc, params, n_origins=8, k_ctx=2):
    """RMSE at peak steps (truth > 0.5) for the model and a flat lookback-mean forecast."""
    cfg = InferenceConfig(mode="3d", c_mult=SPIKE_T // SPIKE_H, n_passes=1,
                          shuffle_covariates=False, history_mask_frac=0.0, k_ctx=k_ctx)
    rec = spike_records(1, length=1200, offset=3)[0]
    err_m, err_f = [], []
    rng = np.random.default_rng(0)
    for cutoff in 700 + np.arange(n_origins) * 53:
        plan = plan_episode(rec, int(cutoff), SPIKE_H, cfg, mc.t_max)
        f = mode_forecast(plan.episode, params, mc, cfg, rng, "3d")
        point, _ = point_and_quantiles(f, (0.5,))
        truth = rec.target[cutoff:cutoff + SPIKE_H]
        peak = truth > 0.5
        flat = rec.target[cutoff - SPIKE_T:cutoff].mean()
        err_m.append((point - truth)[peak])
        err_f.append((flat - truth)[peak])
    rmse = lambda e: float(np.sqrt(np.mean(np.concatenate(e) ** 2)))
    return rmse(err_m), rmse(err_f)


# ----------------------------------------------------------------------------
# SCM tasks whose target is dominated by its own (hidden-driver) periodicity

YT_H = 24


def strong_y_spec(seed):
    """Target driven by a hidden near-periodic node; the exposed covariate is weak."""
    rng = np.random.default_rng(seed)
    period = float(rng.integers(15, 40))
    return ScmTaskSpec(
        n_nodes=3, adjacency=[[0, 0, 1], [0, 0, 1], [0, 0, 0]],
        kernels=[["periodic", 200.0, period], ["rbf", 30.0, 24.0], ["rbf", 20.0, 24.0]],
        exposure=[1], target_node=2, process_noise=0.05, measurement_noise=0.05,
        ar_coef=float(rng.uniform(0.3, 0.6)), seed=seed)


def strong_y_records(task_seed, n_items, length=800, prefix="y"):
    spec = strong_y_spec(task_seed)
    return [generate_record(spec, length, latent_seed=i, item_id=f"{prefix}{task_seed}-{i}")
            for i in range(n_items)]


def train_strong_y(seed, steps=1500):
    """Desk model trained on four strong-Y mechanisms (both modes)."""
    recs = [r for j in range(4) for r in strong_y_records(1000 + 10 * seed + j, 2)]
    mc = config_for("desk")
    tc = TrainConfig(steps=steps, batch_size=4, lr=1e-3, warmup=100, seed=seed,
                     c_range=(1, 4), t_range=(48, 144), h_range=(16, 32), modes=("3d", "2d"))
    return mc, train(recs, mc, tc, TrainState.fresh(mc, tc))


def cli_evaluate(ckpt, data_dir, out_dir, *flags):
    """Run ``bgts evaluate`` and return the summary document."""
    from bgts.cli import main
    code = main(["evaluate", "--checkpoint", str(ckpt), "--data", str(data_dir),
                 "--out", str(out_dir), *map(str, flags)])
    if code != 0:
        raise RuntimeError(f"evaluate exited with {code}")
    return json.loads((Path(out_dir) / "summary.json").read_text())


def cli_pit(ckpt, data_dir, out_dir, *flags):
    from bgts.cli import main
    code = main(["pit", "--checkpoint", str(ckpt), "--data", str(data_dir),
                 "--out", str(out_dir), *map(str, flags)])
    if code != 0:
        raise RuntimeError(f"pit exited with {code}")
    return json.loads((Path(out_dir) / "pit.json").read_text())


# ----------------------------------------------------------------------------
# seasonal sines


def sine_record(period, length, item_id, phase=0.0, amp=1.0, level=0.0, noise=0.0, seed=0):
    t = np.arange(length)
    y = level + amp * np.sin(2 * np.pi * t / period + phase)
    y = y + noise * np.random.default_rng(seed).standard_normal(length)
    return SeriesRecord(item_id, t * 3600, y, np.zeros((length, 0)))


def train_sine(seed, steps=600):
    """Desk model trained on noisy sines with periods 10-40 (both modes)."""
    rng = np.random.default_rng(seed)
    recs = [sine_record(float(rng.uniform(10, 40)), 600, f"sin{i}", rng.uniform(0, 2 * np.pi),
                        rng.uniform(0.5, 3), rng.uniform(-2, 2), 0.05, seed=i)
            for i in range(8)]
    mc = config_for("desk")
    tc = TrainConfig(steps=steps, batch_size=4, lr=1e-3, warmup=50, seed=seed,
                     c_range=(1, 4), t_range=(48, 144), h_range=(16, 32), modes=("3d", "2d"))
    return mc, train(recs, mc, tc, TrainState.fresh(mc, tc))
