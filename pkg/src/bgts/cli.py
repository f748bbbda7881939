"""Command-line entry point: ``bgts <command> [options]``.

Every command takes ``--seed`` and writes a ``manifest.json`` next to its
outputs. Exit codes: 0 success, 2 config error, 3 training divergence,
4 checkpoint incompatibility, 1 anything else.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .data import IngestionError, SplitError, load_dataset, n_observed, write_dataset
from .datagen import KAPPA_GRID, NOISE_KINDS, NoiseSpec, SpecError, inject_record, records_from_spec
from .inference import (EnsembleSelection, InferenceConfig, default_candidates, forecast,
                        plan_episode, select_configs, write_forecasts, write_selection)
from .metrics import METRICS, MetricReport, pit_deviation, pit_histogram, pit_values, score_forecast
from .model import AXES, CheckpointError, check_compatible, config_for, dump_attention
from .retrieval import build_index, cache_name
from .training import (NonFiniteLoss, TrainConfig, TrainState, export_params, load_state,
                       model_from_checkpoint, save_state, train)

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_DIVERGED, EXIT_INCOMPATIBLE = 0, 1, 2, 3, 4


class ConfigError(ValueError):
    pass


# ----------------------------------------------------------------------------
# manifest


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def inputs_digest(paths):
    """Digest over the named input files, in a fixed order."""
    h = hashlib.sha256()
    for p in sorted(str(p) for p in paths if p is not None):
        h.update(Path(p).name.encode())
        h.update(file_digest(p).encode())
    return h.hexdigest()


def write_manifest(out_dir, command, config, seed, inputs, outputs, started):
    doc = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {Path(p).name: file_digest(p) for p in inputs if p is not None},
        "input_hash": inputs_digest(inputs),
        "outputs": [str(p) for p in outputs],
        "wall_seconds": round(time.time() - started, 3),
    }
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


# ----------------------------------------------------------------------------
# helpers


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def data_csv(path):
    p = Path(path)
    return p / "data.csv" if p.is_dir() else p


def dataset_horizon(path, override):
    if override is not None:
        return int(override)
    meta = data_csv(path).with_name("metadata.json")
    if meta.exists():
        h = json.loads(meta.read_text()).get("horizon")
        if h:
            return int(h)
    raise ConfigError("horizon: pass --horizon or set it in metadata.json")


def load_records(path):
    csv_path = data_csv(path)
    if not csv_path.exists():
        raise ConfigError(f"dataset not found: {csv_path}")
    return load_dataset(csv_path), csv_path


def load_model(path):
    try:
        cfg, params = model_from_checkpoint(path)
        check_compatible(cfg, params)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    return cfg, params


def train_settings(doc, args):
    """Model and training configs from a JSON document plus CLI overrides."""
    doc = dict(doc or {})
    profile = doc.get("profile", "desk")
    if profile not in ("paper", "desk"):
        raise ConfigError(f"profile: expected 'paper' or 'desk', got {profile!r}")
    try:
        mcfg = config_for(profile, **doc.get("model", {}))
        tdoc = dict(doc.get("train", {}))
        if args.steps is not None:
            tdoc["steps"] = args.steps
        if args.seed is not None:
            tdoc["seed"] = args.seed
        if args.no_context_overfit:
            tdoc["p_overfit"] = 0.0
        tcfg = TrainConfig.from_dict(tdoc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config: {exc}") from None
    return mcfg, tcfg


def inference_config(args):
    try:
        return InferenceConfig(mode=args.mode, c_mult=args.c_mult, k_ctx=args.k_ctx,
                               space=args.space, n_passes=args.n_passes,
                               features=args.features, revin=args.revin)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def mask_tail(record, H):
    """The record with its last H observed targets hidden (covariates kept)."""
    n = n_observed(record)
    if n <= H:
        raise SplitError(f"{record.item_id}: {n} observed points cannot hold out {H}")
    y = record.target.copy()
    truth = y[n - H:n].copy()
    y[n - H:] = np.nan
    return replace(record, target=y), truth, n - H


def choose(record, params, mcfg, args, H, seed):
    if args.select:
        cands = default_candidates(args.k_ctx, args.space, args.mode)
        return select_configs(record, params, mcfg, cands, H, seed=seed)
    return EnsembleSelection([inference_config(args)], [math.nan], [0])


def evaluate_records(records, params, mcfg, args, H, seed, with_pit=False):
    """Hold out the last H points of each series, forecast and score."""
    report = MetricReport()
    results, selections, pits = [], {}, []
    for i, rec in enumerate(records):
        masked, truth, cutoff = mask_tail(rec, H)
        sel = choose(masked, params, mcfg, args, H, seed + i)
        res = forecast(masked, params, mcfg, sel, H, seed=seed + i)
        history = rec.target[:cutoff]
        f = res.forecast
        report.add(rec.item_id, score_forecast(truth, res.point, res.quantiles, history,
                                               f.probs, f.centers, f.norm))
        if with_pit:
            pits.append(pit_values(f.probs, f.centers, (truth - f.mean) / (f.std + 1e-8)))
        results.append(res)
        selections[rec.item_id] = sel
    pit = pit_histogram(np.concatenate(pits)) if pits else None
    return report, results, selections, pit


# ----------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    doc = read_json(args.spec)
    if args.seed is not None:
        doc["seed"] = args.seed
    records = records_from_spec(doc)
    out = Path(args.out)
    paths = write_dataset(records, out, horizon=doc.get("horizon"),
                          extra_meta={"spec": doc})
    return out, doc, doc.get("seed", 0), [args.spec], list(paths)


def cmd_build_index(args):
    records, csv_path = load_records(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for rec in records:
        idx = build_index(rec, args.T, args.H, args.space, limit=n_observed(rec))
        p = out / cache_name(rec.item_id, args.T, args.H, args.space)
        p.write_bytes(idx.to_bytes())
        written.append(p)
    cfg = {"T": args.T, "H": args.H, "space": args.space}
    return out, cfg, args.seed, [csv_path], written


def cmd_train(args):
    records, csv_path = load_records(args.data)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    inputs = [csv_path]
    if args.resume:
        try:
            state, mcfg, tcfg = load_state(args.resume)
        except FileNotFoundError:
            raise CheckpointError(f"checkpoint not found: {args.resume}") from None
        check_compatible(mcfg, state.params)
        if args.steps is not None:
            tcfg = replace(tcfg, steps=args.steps)
        inputs.append(args.resume)
    else:
        doc = read_json(args.config) if args.config else {}
        mcfg, tcfg = train_settings(doc, args)
        state = TrainState.fresh(mcfg, tcfg)
        if args.config:
            inputs.append(args.config)
    log_path = out.with_suffix(".log.csv")
    train(records, mcfg, tcfg, state, log_path=log_path, until=args.until)
    save_state(out, state, mcfg, tcfg)
    outputs = [out, log_path]
    if args.export:
        Path(args.export).parent.mkdir(parents=True, exist_ok=True)
        export_params(args.export, state, mcfg)
        outputs.append(Path(args.export))
    cfg = {"model": mcfg.to_dict(), "train": tcfg.to_dict()}
    return out.parent, cfg, tcfg.seed, inputs, outputs


def cmd_forecast(args):
    mcfg, params = load_model(args.checkpoint)
    records, csv_path = load_records(args.data)
    H = dataset_horizon(args.data, args.horizon)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results, selections = [], {}
    for i, rec in enumerate(records):
        sel = choose(rec, params, mcfg, args, H, args.seed + i)
        results.append(forecast(rec, params, mcfg, sel, H, seed=args.seed + i))
        selections[rec.item_id] = sel
    write_forecasts(results, out / "forecasts.csv")
    write_selection(selections, out / "selection.json")
    cfg = {"inference": inference_config(args).to_dict(), "select": args.select, "horizon": H}
    return out, cfg, args.seed, [args.checkpoint, csv_path], [out / "forecasts.csv",
                                                               out / "selection.json"]


def cmd_evaluate(args):
    mcfg, params = load_model(args.checkpoint)
    records, csv_path = load_records(args.data)
    H = dataset_horizon(args.data, args.horizon)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report, results, selections, pit = evaluate_records(records, params, mcfg, args, H,
                                                        args.seed, args.pit)
    report.pit = pit
    report.write_csv(out / "metrics.csv")
    report.write_json(out / "summary.json")
    write_forecasts(results, out / "forecasts.csv")
    write_selection(selections, out / "selection.json")
    cfg = {"inference": inference_config(args).to_dict(), "select": args.select, "horizon": H}
    outputs = [out / n for n in ("metrics.csv", "summary.json", "forecasts.csv", "selection.json")]
    return out, cfg, args.seed, [args.checkpoint, csv_path], outputs


def cmd_ablate_noise(args):
    mcfg, params = load_model(args.checkpoint)
    records, csv_path = load_records(args.data)
    H = dataset_horizon(args.data, args.horizon)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    kappas = [float(k) for k in args.kappas.split(",")] if args.kappas else list(KAPPA_GRID)
    rows = []
    for ki, kind in enumerate(NOISE_KINDS):
        for kappa in kappas:
            noisy = [inject_record(r, NoiseSpec(kind, kappa, args.seed * 1000 + 97 * ki + j))
                     for j, r in enumerate(records)]
            report, _, _, _ = evaluate_records(noisy, params, mcfg, args, H, args.seed)
            macro, _ = report.macro()
            rows.append([kind, kappa, *(macro[m] for m in METRICS)])
    table = out / "noise_ablation.csv"
    with open(table, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "kappa", *METRICS])
        for r in rows:
            w.writerow([r[0], repr(r[1]), *(repr(float(v)) for v in r[2:])])
    cfg = {"inference": inference_config(args).to_dict(), "kappas": kappas, "horizon": H}
    return out, cfg, args.seed, [args.checkpoint, csv_path], [table]


def cmd_pit(args):
    mcfg, params = load_model(args.checkpoint)
    records, csv_path = load_records(args.data)
    H = dataset_horizon(args.data, args.horizon)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = {}
    for mode in ("2d", "3d", "ensemble"):
        margs = argparse.Namespace(**{**vars(args), "mode": mode})
        _, _, _, pit = evaluate_records(records, params, mcfg, margs, H, args.seed, True)
        doc[mode] = {"histogram": [float(x) for x in pit], "max_deviation": pit_deviation(pit)}
    path = out / "pit.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    cfg = {"inference": inference_config(args).to_dict(), "horizon": H}
    return out, cfg, args.seed, [args.checkpoint, csv_path], [path]


def cmd_dump_attention(args):
    mcfg, params = load_model(args.checkpoint)
    records, csv_path = load_records(args.data)
    H = dataset_horizon(args.data, args.horizon)
    rec = next((r for r in records if r.item_id == args.item), None) if args.item else records[0]
    if rec is None:
        raise ConfigError(f"item {args.item!r} not in dataset")
    cfg = inference_config(args)
    plan = plan_episode(rec, n_observed(rec), H, cfg, mcfg.t_max)
    mode = "3d" if args.mode == "ensemble" else args.mode
    w = dump_attention(plan.episode, params, mcfg, args.layer, args.axis,
                       args.query_position, mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "attention.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["head", "key", "weight"])
        for h in range(w.shape[0]):
            for k in range(w.shape[1]):
                wr.writerow([h, k, repr(float(w[h, k]))])
    doc = {"item": rec.item_id, "layer": args.layer, "axis": args.axis,
           "query_position": args.query_position, "mode": mode,
           "context_starts": plan.context_starts}
    return out, doc, args.seed, [args.checkpoint, csv_path], [path]


COMMANDS = {
    "gen-data": cmd_gen_data,
    "build-index": cmd_build_index,
    "train": cmd_train,
    "forecast": cmd_forecast,
    "evaluate": cmd_evaluate,
    "ablate-noise": cmd_ablate_noise,
    "pit": cmd_pit,
    "dump-attention": cmd_dump_attention,
}


# ----------------------------------------------------------------------------
# parser


def _inference_flags(p):
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory or data.csv")
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("2d", "3d", "ensemble"), default="ensemble")
    p.add_argument("--space", choices=("y", "x", "xy", "uniform"), default="y")
    p.add_argument("--k-ctx", type=int, default=4)
    p.add_argument("--c-mult", type=int, default=4)
    p.add_argument("--n-passes", type=int, default=2)
    p.add_argument("--features", choices=("none", "blank", "running_index", "calendar"),
                   default="none")
    p.add_argument("--revin", action="store_true")
    p.add_argument("--select", action="store_true",
                   help="pick configs by rolled-back validation SQL")


def build_parser():
    parser = argparse.ArgumentParser(prog="bgts", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset from a JSON spec")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("build-index", help="precompute retrieval indexes")
    p.add_argument("--data", required=True)
    p.add_argument("--T", type=int, required=True)
    p.add_argument("--H", type=int, required=True)
    p.add_argument("--space", choices=("y", "x", "xy"), default="y")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a model with the CRPS objective")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None, help="JSON with profile/model/train fields")
    p.add_argument("--out", required=True, help="training-state checkpoint path")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--resume", default=None, help="training-state checkpoint to continue")
    p.add_argument("--until", type=int, default=None,
                   help="stop after this step; the schedule still spans --steps")
    p.add_argument("--no-context-overfit", action="store_true")
    p.add_argument("--export", default=None, help="also write a float32 model checkpoint")

    for name, text in (("forecast", "forecast the steps after each series"),
                       ("evaluate", "hold out the last horizon and score forecasts"),
                       ("ablate-noise", "score forecasts under injected noise"),
                       ("pit", "PIT histograms for the 2d, 3d and ensemble modes"),
                       ("dump-attention", "attention weights for one query")):
        p = sub.add_parser(name, help=text)
        _inference_flags(p)
        if name == "evaluate":
            p.add_argument("--pit", action="store_true")
        if name == "ablate-noise":
            p.add_argument("--kappas", default=None, help="comma-separated kappa values")
        if name == "dump-attention":
            p.add_argument("--item", default=None)
            p.add_argument("--layer", type=int, default=0)
            p.add_argument("--axis", choices=AXES, default="temporal")
            p.add_argument("--query-position", type=int, default=0)

    for p in sub.choices.values():
        p.add_argument("--seed", type=int, default=None if p.prog.endswith(("train", "gen-data")) else 0)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    threads = int(os.environ.get("BGTS_THREADS", "1") or 1)
    started = time.time()
    try:
        with threadpool_limits(limits=max(1, threads)):
            out, cfg, seed, inputs, outputs = COMMANDS[args.command](args)
        write_manifest(out, args.command, cfg, seed, inputs, outputs, started)
    except (ConfigError, SpecError, IngestionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLoss as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except CheckpointError as exc:
        print(f"incompatible checkpoint: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except Exception as exc:  # noqa: BLE001 - map everything else to exit 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_OTHER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
