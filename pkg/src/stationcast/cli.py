"""Batch command-line interface.

Commands:
  gen       write a synthetic multi-station world (observations.csv,
            stations.csv, world.json)
  train     phase 'backbone' then phase 'transform'; each writes a
            checkpoint (.npz) and a JSONL training log
  eval      model comparison table, optional learning curve, and a
            prediction-vs-truth trace
  forecast  prediction-vs-truth trace for a chosen span from a checkpoint

Every command is non-interactive. Exit codes: 0 success, 1 usage error,
2 contract/assertion failure. Options may also be given in a config file
of `key = value` lines (# comments allowed); command-line flags win.
The STATIONCAST_DATA_DIR environment variable supplies a default --data.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .data import Normalizer, load_stations, split_zero_shot
from .evaluation import (
    LeakageError,
    emit_curve,
    emit_report,
    emit_trace,
    evaluate_pipeline,
    forecast_trace_rows,
    learning_curve,
    run_comparison,
    summarize,
    TrainedPipeline,
)
from .model import (
    ModelConfig,
    Seq2Seq,
    desk_config,
    load_checkpoint,
    restore_params,
    save_checkpoint,
)
from .synthetic import build_world, write_world
from .training import TrainConfig, desk_train_config, train_backbone, train_transform
from .transform import ZeroShotTransform

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONTRACT = 2


class UsageError(Exception):
    pass


class ContractError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's default 2
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# configuration


def load_config_file(path) -> dict:
    """Flat `key = value` file; '#' starts a comment."""
    out = {}
    for i, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{i}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _merge(args: argparse.Namespace, keys) -> dict:
    """File values fill in flags left at None; flags win."""
    file_values = load_config_file(args.config) if getattr(args, "config", None) else {}
    merged = {}
    for key, cast, default in keys:
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = flag
        elif key in file_values:
            try:
                merged[key] = cast(file_values[key])
            except ValueError as exc:
                raise UsageError(f"config key {key!r}: {exc}") from exc
        else:
            merged[key] = default
    return merged


EXPERIMENT_KEYS = (
    # (key, cast for config-file strings, default)
    ("target", str, ""),
    ("preset", str, "desk"),
    ("lx", int, 48),
    ("ly", int, 24),
    ("label_len", int, 24),
    ("d_model", int, None),
    ("d_inner", int, None),
    ("n_heads", int, None),
    ("enc_layers", int, None),
    ("dec_layers", int, None),
    ("dropout", float, None),
    ("batch_size", int, None),
    ("learning_rate", float, None),
    ("patience", int, None),
    ("max_epochs", int, None),
    ("anchors_per_target", int, None),
    ("seed", int, 0),
    ("seeds", int, 1),
    ("test_span_hours", int, 720),
    ("train_stride", int, 6),
    ("eval_stride", int, 3),
    ("val_fraction", float, 0.1),
    ("ar_max_lag", int, 48),
    ("models", str, "all"),
    ("scenario", str, "zero_shot"),
)


def resolve_model_config(cfg: dict, n_features: int) -> ModelConfig:
    if cfg["preset"] == "paper":
        base = ModelConfig(n_features=n_features, L_x=cfg["lx"], L_y=cfg["ly"],
                           label_len=cfg["label_len"])
    elif cfg["preset"] == "desk":
        base = desk_config(n_features=n_features, L_x=cfg["lx"], L_y=cfg["ly"])
    else:
        raise UsageError(f"unknown preset {cfg['preset']!r} (use desk or paper)")
    overrides = {
        k: cfg[k]
        for k in ("d_model", "d_inner", "n_heads", "enc_layers", "dec_layers", "dropout")
        if cfg[k] is not None
    }
    if cfg["label_len"] is not None:
        overrides["label_len"] = cfg["label_len"]
    return ModelConfig(**{**asdict(base), **overrides})


def resolve_train_config(cfg: dict, phase: str) -> TrainConfig:
    if cfg["preset"] == "paper":
        base = TrainConfig(phase=phase)
    else:
        base = desk_train_config(phase)
    overrides = {
        k: cfg[k]
        for k in ("batch_size", "learning_rate", "patience", "max_epochs",
                  "anchors_per_target")
        if cfg[k] is not None
    }
    return TrainConfig(**{**asdict(base), **overrides, "seed": cfg["seed"], "phase": phase})


def file_digest(*paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()


def experiment_digest(resolved: dict, data_digest: str) -> str:
    doc = json.dumps({"config": resolved, "data": data_digest}, sort_keys=True)
    return hashlib.sha256(doc.encode()).hexdigest()[:16]


def _data_paths(args) -> tuple:
    data_dir = args.data or os.environ.get("STATIONCAST_DATA_DIR")
    if not data_dir:
        raise UsageError("--data (or STATIONCAST_DATA_DIR) is required")
    data_dir = Path(data_dir)
    obs, meta = data_dir / "observations.csv", data_dir / "stations.csv"
    for p in (obs, meta):
        if not p.exists():
            raise ContractError(f"missing input file: {p}")
    return obs, meta


def _load_stations_or_fail(args):
    obs, meta = _data_paths(args)
    stations = load_stations(obs, meta)
    if not stations:
        raise ContractError(f"no station data found in {obs}")
    return stations, file_digest(obs, meta)


def _check_target(stations, target: str) -> None:
    ids = sorted(s.meta.station_id for s in stations)
    if not target:
        raise UsageError("--target is required")
    if target not in ids:
        raise ContractError(f"unknown station id {target!r}; available: {', '.join(ids)}")


# ---------------------------------------------------------------------------
# gen


def cmd_gen(args) -> int:
    if args.stations < 2:
        raise UsageError(f"--stations must be >= 2, got {args.stations}")
    if args.hours is not None:
        n_hours = args.hours
    else:
        n_hours = int(round(args.years * 365.25 * 24))
    if n_hours < 1:
        raise UsageError("the requested span contains no hours")
    resolved = {"stations": args.stations, "n_hours": n_hours, "seed": args.seed}
    digest = experiment_digest(resolved, "")
    world, stations = build_world(args.stations, n_hours, args.seed)
    meta = {"tool_version": __version__, "config_digest": digest}
    paths = write_world(world, stations, args.out, extra_meta=meta)
    for p in paths:
        print(p)
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _manifest_meta(cfg, digest, data_digest, split, normalizer, phase) -> dict:
    return {
        "tool_version": __version__,
        "config_digest": digest,
        "data_digest": data_digest,
        "target": split.target_id,
        "train_station_ids": list(split.train_station_ids),
        "test_span_hours": cfg["test_span_hours"],
        "seed": cfg["seed"],
        "phase": phase,
        "normalizer": normalizer.to_dict(),
        "train_config": asdict(resolve_train_config(cfg, phase)),
    }


def cmd_train(args) -> int:
    cfg = _merge(args, EXPERIMENT_KEYS)
    stations, data_digest = _load_stations_or_fail(args)
    _check_target(stations, cfg["target"])
    digest = experiment_digest({**cfg, "command": "train"}, data_digest)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    n_features = len(stations[0].channels)
    model_config = resolve_model_config(cfg, n_features)
    split = split_zero_shot(
        stations, cfg["target"], val_fraction=cfg["val_fraction"],
        test_span=cfg["test_span_hours"], L_x=model_config.L_x,
        L_y=model_config.L_y, train_stride=cfg["train_stride"],
    )
    from .data import fit_normalizer

    metas = [split.metas[sid] for sid in split.train_station_ids]
    normalizer = fit_normalizer(split.train, metas, split.channels, split.target_channel)

    if args.phase == "backbone":
        model = Seq2Seq(model_config, seed=cfg["seed"])
        _, log = train_backbone(model, split, normalizer,
                                resolve_train_config(cfg, "backbone"))
        meta = _manifest_meta(cfg, digest, data_digest, split, normalizer, "backbone")
        meta["model_config"] = asdict(model_config)
        ckpt = out_dir / "backbone.npz"
        params_hash = save_checkpoint(ckpt, model_config, model.params, meta)
        log.write_jsonl(out_dir / "trainlog_backbone.jsonl", meta={"config_digest": digest})
        print(f"{ckpt} params_digest={params_hash}")
        return EXIT_OK

    # phase transform
    if not args.checkpoint:
        raise ContractError("--phase transform requires --checkpoint with a "
                            "trained backbone")
    ck_config, arrays, manifest = load_checkpoint(args.checkpoint)
    problems = []
    if ck_config != model_config:
        problems.append(f"model config differs (checkpoint {asdict(ck_config)}, "
                        f"requested {asdict(model_config)})")
    if manifest.get("data_digest") != data_digest:
        problems.append("data files differ from the ones the backbone was trained on")
    if manifest.get("target") != cfg["target"]:
        problems.append(f"target differs (checkpoint {manifest.get('target')!r}, "
                        f"requested {cfg['target']!r})")
    if problems:
        raise ContractError("backbone checkpoint does not match this run: "
                            + "; ".join(problems))

    model = Seq2Seq(ck_config, seed=manifest.get("seed", cfg["seed"]))
    restore_params(model.params, arrays, prefix="backbone/")
    normalizer = Normalizer.from_dict(manifest["normalizer"])
    transform = ZeroShotTransform(ck_config.d_model, len(split.train_station_ids))
    _, log = train_transform(model, transform, split, normalizer,
                             resolve_train_config(cfg, "transform"))
    meta = _manifest_meta(cfg, digest, data_digest, split, normalizer, "transform")
    meta["model_config"] = asdict(ck_config)
    meta["backbone_params_digest"] = manifest["params_digest"]
    ckpt = out_dir / "zeroshot.npz"
    params_hash = save_checkpoint(ckpt, ck_config,
                                  {**model.params, **transform.params}, meta)
    log.write_jsonl(out_dir / "trainlog_transform.jsonl", meta={"config_digest": digest})
    print(f"{ckpt} params_digest={params_hash}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def pipeline_from_checkpoint(stations, checkpoint, test_span, eval_stride=1,
                             train_stride=6, val_fraction=0.1) -> TrainedPipeline:
    config, arrays, manifest = load_checkpoint(checkpoint)
    target = manifest["target"]
    split = split_zero_shot(stations, target, val_fraction=val_fraction,
                            test_span=test_span, L_x=config.L_x, L_y=config.L_y,
                            train_stride=train_stride, eval_stride=eval_stride)
    if list(split.train_station_ids) != list(manifest["train_station_ids"]):
        raise ContractError(
            "checkpoint was trained on different stations: "
            f"{manifest['train_station_ids']} vs {split.train_station_ids}"
        )
    model = Seq2Seq(config, seed=manifest.get("seed", 0))
    restore_params(model.params, arrays, prefix="backbone/")
    transform = None
    if any(k.startswith("transform/") for k in arrays):
        transform = ZeroShotTransform(config.d_model, len(split.train_station_ids))
        restore_params(transform.params, arrays, prefix="transform/")
    normalizer = Normalizer.from_dict(manifest["normalizer"])
    return TrainedPipeline("zero_shot", manifest.get("seed", 0), model, transform,
                           normalizer, split, None, None)


def _parse_models(text: str):
    return "all" if text == "all" else tuple(m.strip() for m in text.split(",") if m.strip())


def _parse_scenarios(text: str):
    if text == "both":
        return ("full_data", "zero_shot")
    if text in ("full_data", "zero_shot"):
        return (text,)
    raise UsageError(f"--scenario must be zero_shot, full_data, or both, got {text!r}")


def _eval_cell(payload):
    """One (scenario, seed) training-evaluation cell (process-pool friendly)."""
    (stations, target, models, scenario, seed, model_cfg, b_cfg, t_cfg,
     test_span, train_stride, eval_stride, val_fraction, digest) = payload
    reports, _ = run_comparison(
        stations, target, models=models, seeds=(seed,), scenarios=(scenario,),
        model_config=model_cfg, backbone_config=b_cfg, transform_config=t_cfg,
        test_span=test_span, train_stride=train_stride, eval_stride=eval_stride,
        val_fraction=val_fraction, config_digest=digest,
    )
    return reports


def cmd_eval(args) -> int:
    cfg = _merge(args, EXPERIMENT_KEYS)
    stations, data_digest = _load_stations_or_fail(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.checkpoint:
        pipe = pipeline_from_checkpoint(
            stations, args.checkpoint, cfg["test_span_hours"],
            eval_stride=cfg["eval_stride"], train_stride=cfg["train_stride"],
            val_fraction=cfg["val_fraction"],
        )
        digest = experiment_digest({**cfg, "command": "eval",
                                    "checkpoint": str(args.checkpoint)}, data_digest)
        models = ("backbone", "transform") if pipe.transform else ("backbone",)
        reports = evaluate_pipeline(stations, pipe, models, digest)
        emit_report(reports, out_dir, digest)
        emit_trace(forecast_trace_rows(stations, pipe, models[-1], config_digest=digest),
                   out_dir)
        _print_summary(reports)
        return EXIT_OK

    _check_target(stations, cfg["target"])
    digest = experiment_digest({**cfg, "command": "eval"}, data_digest)
    n_features = len(stations[0].channels)
    model_cfg = resolve_model_config(cfg, n_features)
    b_cfg = resolve_train_config(cfg, "backbone")
    t_cfg = resolve_train_config(cfg, "transform")
    seeds = tuple(cfg["seed"] + i for i in range(cfg["seeds"]))
    scenarios = _parse_scenarios(cfg["scenario"])
    models = _parse_models(cfg["models"])

    if args.curve:
        counts = tuple(int(c) for c in args.curve.split(","))
        points, reports = learning_curve(
            stations, cfg["target"], counts, seeds,
            model="transform", model_config=model_cfg, backbone_config=b_cfg,
            transform_config=t_cfg, test_span=cfg["test_span_hours"],
            train_stride=cfg["train_stride"], eval_stride=cfg["eval_stride"],
            config_digest=digest,
        )
        emit_curve(points, out_dir, digest)
        emit_report(reports, out_dir, digest)
        for p in points:
            print(f"stations={p.n_train_stations} mse={p.mse_mean:.4f} "
                  f"+/- {p.mse_std:.4f} ({p.n_seeds} seeds)")
        return EXIT_OK

    learned = [m for m in (models if models != "all" else
                           ("last_value", "moving_average", "persistence", "ar",
                            "backbone", "transform"))
               if m in ("backbone", "transform")]
    if args.jobs > 1 and learned and len(scenarios) * len(seeds) > 1:
        base = [m for m in (models if models != "all" else
                            ("last_value", "moving_average", "persistence", "ar"))
                if m not in ("backbone", "transform")]
        reports = []
        if base:
            reports, _ = run_comparison(
                stations, cfg["target"], models=tuple(base), seeds=(seeds[0],),
                scenarios=scenarios, model_config=model_cfg,
                backbone_config=b_cfg, transform_config=t_cfg,
                test_span=cfg["test_span_hours"], train_stride=cfg["train_stride"],
                eval_stride=cfg["eval_stride"], val_fraction=cfg["val_fraction"],
                ar_max_lag=cfg["ar_max_lag"], config_digest=digest,
            )
        payloads = [
            (stations, cfg["target"], tuple(learned), scenario, seed, model_cfg,
             b_cfg, t_cfg, cfg["test_span_hours"], cfg["train_stride"],
             cfg["eval_stride"], cfg["val_fraction"], digest)
            for scenario in scenarios for seed in seeds
        ]
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            for cell in pool.map(_eval_cell, payloads):
                reports.extend(cell)
        pipelines = []
    else:
        reports, pipelines = run_comparison(
            stations, cfg["target"], models=models, seeds=seeds,
            scenarios=scenarios, model_config=model_cfg, backbone_config=b_cfg,
            transform_config=t_cfg, test_span=cfg["test_span_hours"],
            train_stride=cfg["train_stride"], eval_stride=cfg["eval_stride"],
            val_fraction=cfg["val_fraction"], ar_max_lag=cfg["ar_max_lag"],
            config_digest=digest, keep_pipelines=True,
        )

    emit_report(reports, out_dir, digest)
    zero_pipes = [p for p in pipelines if p.scenario == "zero_shot"]
    if zero_pipes:
        name = "transform" if zero_pipes[0].transform is not None else "backbone"
        emit_trace(forecast_trace_rows(stations, zero_pipes[0], name,
                                       config_digest=digest), out_dir)
    _print_summary(reports)
    return EXIT_OK


def _print_summary(reports) -> None:
    table = summarize(reports)
    for (scenario, model), row in table.items():
        spread = f" +/- {row['mse_std']:.4f}" if row["n_runs"] > 1 else ""
        print(f"{scenario:10s} {model:15s} mse={row['mse_mean']:.4f}{spread} "
              f"({row['n_runs']} run{'s' if row['n_runs'] > 1 else ''})")


# ---------------------------------------------------------------------------
# forecast


def cmd_forecast(args) -> int:
    cfg = _merge(args, EXPERIMENT_KEYS)
    stations, data_digest = _load_stations_or_fail(args)
    if not args.checkpoint:
        raise ContractError("forecast requires --checkpoint")
    span = args.span_hours if args.span_hours is not None else 336
    pipe = pipeline_from_checkpoint(
        stations, args.checkpoint, span,
        eval_stride=cfg["eval_stride"], train_stride=cfg["train_stride"],
        val_fraction=cfg["val_fraction"],
    )
    if cfg["target"] and cfg["target"] != pipe.split.target_id:
        ids = sorted(s.meta.station_id for s in stations)
        raise ContractError(
            f"checkpoint was trained for target {pipe.split.target_id!r}, not "
            f"{cfg['target']!r}; available stations: {', '.join(ids)}"
        )
    digest = experiment_digest({**cfg, "command": "forecast", "span": span,
                                "checkpoint": str(args.checkpoint)}, data_digest)
    name = "transform" if pipe.transform is not None else "backbone"
    rows = forecast_trace_rows(stations, pipe, name, config_digest=digest)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = emit_trace(rows, out_dir, filename="forecast_trace.csv")
    print(path)
    return EXIT_OK


# ---------------------------------------------------------------------------
# wiring


def _add_common(p) -> None:
    p.add_argument("--data", help="directory with observations.csv and stations.csv")
    p.add_argument("--config", help="key = value config file; flags override")
    p.add_argument("--target", help="target station id")
    p.add_argument("--seed", type=int, help="base RNG seed")
    p.add_argument("--preset", choices=("desk", "paper"),
                   help="model/training size preset (default desk)")
    p.add_argument("--lx", type=int, help="input window length (hours)")
    p.add_argument("--ly", type=int, help="forecast horizon (hours)")
    p.add_argument("--label-len", dest="label_len", type=int,
                   help="decoder warm-start length (hours)")
    p.add_argument("--test-span-hours", dest="test_span_hours", type=int,
                   help="test span at the end of the data (hours)")
    p.add_argument("--train-stride", dest="train_stride", type=int)
    p.add_argument("--eval-stride", dest="eval_stride", type=int)
    p.add_argument("--val-fraction", dest="val_fraction", type=float)
    for key in ("d_model", "d_inner", "n_heads", "enc_layers", "dec_layers"):
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--anchors-per-target", dest="anchors_per_target", type=int)
    p.add_argument("--ar-max-lag", dest="ar_max_lag", type=int)


def build_parser() -> _Parser:
    parser = _Parser(prog="stationcast",
                     description="zero-shot forecasting for unmonitored stations")
    parser.add_argument("--version", action="version", version=f"stationcast {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic world")
    g.add_argument("--stations", type=int, required=True)
    g.add_argument("--years", type=float, default=2.0)
    g.add_argument("--hours", type=int, help="exact hour count (overrides --years)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="train one phase")
    t.add_argument("--phase", choices=("backbone", "transform"), required=True)
    t.add_argument("--checkpoint", help="backbone checkpoint (phase transform)")
    t.add_argument("--out", required=True)
    _add_common(t)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="model comparison / learning curve")
    e.add_argument("--models", help="'all' or comma list "
                                    "(last_value,moving_average,persistence,ar,"
                                    "backbone,transform)")
    e.add_argument("--scenario", help="zero_shot | full_data | both")
    e.add_argument("--seeds", type=int, help="number of seeds (base --seed upward)")
    e.add_argument("--curve", help="comma list of train-station counts, e.g. 2,4,6,8")
    e.add_argument("--checkpoint", help="evaluate this checkpoint instead of training")
    e.add_argument("--jobs", type=int, default=1,
                   help="parallel worker processes for training cells")
    e.add_argument("--out", required=True)
    _add_common(e)
    e.set_defaults(fn=cmd_eval)

    f = sub.add_parser("forecast", help="prediction-vs-truth trace")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--span-hours", dest="span_hours", type=int,
                   help="trace span at the end of the data (default 336)")
    f.add_argument("--out", required=True)
    _add_common(f)
    f.set_defaults(fn=cmd_forecast)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "jobs", 1) is not None and getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be >= 1")
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ContractError, LeakageError, AssertionError) as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
