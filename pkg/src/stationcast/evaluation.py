"""Evaluation protocol: per-hour metrics, model comparison tables,
learning curves over the number of training stations, and plot-ready
file exports.

All metrics are computed on denormalized values in original units. The
zero-shot leakage assertion (no target window in the training pool) runs
inside every zero-shot evaluation.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__ as TOOL_VERSION
from . import baselines as bl
from .data import (
    Normalizer,
    StationSeries,
    ZeroShotSplit,
    fit_normalizer,
    format_timestamp,
    split_full_data,
    split_zero_shot,
    window_at,
)
from .model import ModelConfig, Seq2Seq, desk_config
from .training import TrainConfig, desk_train_config, train_backbone, train_transform
from .transform import ZeroShotTransform, batched_zero_shot

SCHEMA_VERSION = 1

BASELINE_MODELS = ("last_value", "moving_average", "persistence", "ar")
LEARNED_MODELS = ("backbone", "transform")
ALL_MODELS = BASELINE_MODELS + LEARNED_MODELS

MOVING_AVERAGE_K = 24
PERSISTENCE_F = 24


class LeakageError(AssertionError):
    """A zero-shot evaluation saw target data in the training pool."""


# ---------------------------------------------------------------------------
# metrics


def mse_per_hour(forecasts: np.ndarray, truths: np.ndarray) -> np.ndarray:
    forecasts = np.asarray(forecasts, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if forecasts.shape != truths.shape:
        raise ValueError(f"shape mismatch: {forecasts.shape} vs {truths.shape}")
    return ((forecasts - truths) ** 2).mean(axis=0)


def mae_per_hour(forecasts: np.ndarray, truths: np.ndarray) -> np.ndarray:
    forecasts = np.asarray(forecasts, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if forecasts.shape != truths.shape:
        raise ValueError(f"shape mismatch: {forecasts.shape} vs {truths.shape}")
    return np.abs(forecasts - truths).mean(axis=0)


@dataclass(frozen=True)
class EvalReport:
    scenario: str
    model: str
    seed: Optional[int]
    mse_per_hour: tuple
    mae_per_hour: tuple
    mse_avg: float
    mae_avg: float
    n_windows: int
    config_digest: str
    row_type: str = "computed"


@dataclass(frozen=True)
class CurvePoint:
    n_train_stations: int
    mse_mean: float
    mse_std: float
    n_seeds: int

    def __post_init__(self):
        if self.n_seeds < 2:
            raise ValueError("curve points need at least 2 seeds")
        if self.mse_std < 0.0:
            raise ValueError("std must be non-negative")


def make_report(scenario, model, seed, forecasts, truths, config_digest="") -> EvalReport:
    mse = mse_per_hour(forecasts, truths)
    mae = mae_per_hour(forecasts, truths)
    return EvalReport(
        scenario=scenario,
        model=model,
        seed=seed,
        mse_per_hour=tuple(float(v) for v in mse),
        mae_per_hour=tuple(float(v) for v in mae),
        mse_avg=float(mse.mean()),
        mae_avg=float(mae.mean()),
        n_windows=int(np.asarray(forecasts).shape[0]),
        config_digest=config_digest,
    )


# ---------------------------------------------------------------------------
# evaluation batches


@dataclass(frozen=True)
class EvalBatch:
    """Aligned target and source windows over the test span."""

    anchors: np.ndarray  # (B,)
    target_x: np.ndarray  # (B, L_x, n) raw
    target_y: np.ndarray  # (B, L_y) raw
    source_x: np.ndarray  # (S, B, L_x, n) raw
    source_ids: list
    source_locs: np.ndarray  # (S, 3) raw


def build_eval_batch(stations, split: ZeroShotSplit, source_ids, L_x, L_y) -> EvalBatch:
    """Restrict test anchors to those where every source has a window, so all
    models are scored on an identical window set."""
    by_id = {s.meta.station_id: s for s in stations}
    sources = [by_id[sid] for sid in source_ids]
    anchors, tx, ty, sx = [], [], [], []
    for w in split.test:
        source_windows = [window_at(s, w.t, L_x, L_y) for s in sources]
        if any(sw is None for sw in source_windows):
            continue
        anchors.append(w.t)
        tx.append(w.x)
        ty.append(w.y)
        sx.append([sw.x for sw in source_windows])
    if not anchors:
        raise ValueError("no test anchors with windows available from every source")
    return EvalBatch(
        anchors=np.array(anchors, dtype=np.int64),
        target_x=np.stack(tx),
        target_y=np.stack(ty),
        source_x=np.stack(sx, axis=1),
        source_ids=list(source_ids),
        source_locs=np.stack([s.meta.location() for s in sources]),
    )


def forecast_backbone_batch(model: Seq2Seq, normalizer: Normalizer,
                            batch: EvalBatch) -> np.ndarray:
    """Denormalized backbone forecasts from the target's own windows."""
    cfg = model.config
    out = np.empty((len(batch.anchors), cfg.L_y))
    x = normalizer.normalize_x(batch.target_x)
    ctx = x[:, cfg.L_x - cfg.label_len :, normalizer.target_index]
    for lo in range(0, len(batch.anchors), 256):
        sl = slice(lo, lo + 256)
        pred = model.forecast(x[sl], batch.anchors[sl], ctx[sl])
        out[sl] = normalizer.denormalize_y(pred.data)
    return out


def forecast_transform_batch(model, transform, normalizer, batch: EvalBatch,
                             target_loc, source_indices) -> np.ndarray:
    """Denormalized zero-shot forecasts built from the source windows."""
    cfg = model.config
    ctx = batch.target_x[:, cfg.L_x - cfg.label_len :, normalizer.target_index]
    out = np.empty((len(batch.anchors), cfg.L_y))
    for lo in range(0, len(batch.anchors), 64):
        sl = slice(lo, lo + 64)
        pred = batched_zero_shot(
            model, transform, normalizer,
            batch.source_x[:, sl], batch.source_locs, list(source_indices),
            batch.anchors[sl], target_loc, ctx[sl],
        )
        out[sl] = normalizer.denormalize_y(pred.data)
    return out


# ---------------------------------------------------------------------------
# baselines over an EvalBatch


def _target_channel_windows(batch: EvalBatch, target_index: int) -> np.ndarray:
    return batch.target_x[:, :, target_index]


def forecast_baseline_batch(name, batch, target_index, L_y,
                            moving_average_k=MOVING_AVERAGE_K,
                            persistence_f=PERSISTENCE_F) -> np.ndarray:
    xs = _target_channel_windows(batch, target_index)
    if name == "last_value":
        return np.stack([bl.last_value(x, L_y) for x in xs])
    if name == "moving_average":
        return np.stack([bl.moving_average(x, L_y, k=moving_average_k) for x in xs])
    if name == "persistence":
        return np.stack([bl.persistence(x, L_y, F=persistence_f) for x in xs])
    raise ValueError(f"unknown baseline {name!r}")


def _pre_test_series(series: StationSeries, span_start: int) -> tuple:
    """Longest contiguous valid run strictly before the test span."""
    end = min(span_start, series.end_hour) - series.start_hour
    valid = series.valid[:end]
    best_lo, best_hi, lo = 0, 0, None
    for i, v in enumerate(valid):
        if v and lo is None:
            lo = i
        if (not v or i == end - 1) and lo is not None:
            hi = i + 1 if v else i
            if hi - lo > best_hi - best_lo:
                best_lo, best_hi = lo, hi
            lo = None
    values = series.target_values()[best_lo:best_hi]
    return values, series.start_hour + best_lo


def forecast_ar_batch(stations, split, scenario, normalizer, batch,
                      L_y, max_lag) -> np.ndarray:
    """AR forecasts for the target windows; coefficients fitted on the target's
    own history (full data) or on the nearest source station (zero-shot)."""
    by_id = {s.meta.station_id: s for s in stations}
    if scenario == "zero_shot":
        metas = [split.metas[sid] for sid in (*split.train_station_ids, split.target_id)]
        fit_id = bl.nearest_station_id(metas, split.target_id, normalizer)
    else:
        fit_id = split.target_id
    series, start_hour = _pre_test_series(by_id[fit_id], split.test_span[0])
    model = bl.fit_ar(series, max_lag=max_lag, try_trend=True, start_hour=start_hour)
    xs = _target_channel_windows(batch, normalizer.target_index)
    return np.stack([
        bl.forecast_ar(model, x, L_y, end_hour=int(t))
        for x, t in zip(xs, batch.anchors)
    ])


# ---------------------------------------------------------------------------
# the comparison harness


def _resolve_models(models) -> list:
    if models in ("all", None):
        return list(ALL_MODELS)
    unknown = set(models) - set(ALL_MODELS)
    if unknown:
        raise ValueError(f"unknown models {sorted(unknown)}; choose from {ALL_MODELS}")
    return list(models)


@dataclass
class TrainedPipeline:
    scenario: str
    seed: int
    model: Seq2Seq
    transform: Optional[ZeroShotTransform]
    normalizer: Normalizer
    split: ZeroShotSplit
    backbone_log: object
    transform_log: object


def train_pipeline(
    stations,
    target_id,
    scenario: str,
    seed: int,
    *,
    model_config: ModelConfig,
    backbone_config: TrainConfig,
    transform_config: Optional[TrainConfig],
    test_span,
    train_stride: int,
    val_fraction: float = 0.1,
) -> TrainedPipeline:
    """Phase-1 (and optionally phase-2) training for one scenario and seed."""
    splitter = split_zero_shot if scenario == "zero_shot" else split_full_data
    split = splitter(stations, target_id, val_fraction=val_fraction,
                     test_span=test_span, L_x=model_config.L_x, L_y=model_config.L_y,
                     train_stride=train_stride)
    metas = [split.metas[sid] for sid in split.train_station_ids]
    normalizer = fit_normalizer(split.train, metas, split.channels, split.target_channel)

    model = Seq2Seq(model_config, seed=seed)
    b_cfg = TrainConfig(**{**asdict(backbone_config), "seed": seed, "phase": "backbone"})
    _, backbone_log = train_backbone(model, split, normalizer, b_cfg)

    transform = None
    transform_log = None
    if transform_config is not None:
        transform = ZeroShotTransform(model_config.d_model, len(split.train_station_ids))
        t_cfg = TrainConfig(**{**asdict(transform_config), "seed": seed, "phase": "transform"})
        _, transform_log = train_transform(model, transform, split, normalizer, t_cfg)

    return TrainedPipeline(scenario, seed, model, transform, normalizer, split,
                           backbone_log, transform_log)


def evaluate_pipeline(stations, pipe: TrainedPipeline, models=LEARNED_MODELS,
                      config_digest: str = "") -> list:
    """Score a trained pipeline's learned models on the target's test windows."""
    split = pipe.split
    if pipe.scenario == "zero_shot":
        try:
            split.assert_no_leakage()
        except AssertionError as exc:
            raise LeakageError(str(exc)) from exc
    cfg = pipe.model.config
    source_ids = [sid for sid in split.train_station_ids if sid != split.target_id]
    batch = build_eval_batch(stations, split, source_ids, cfg.L_x, cfg.L_y)
    target_loc = split.metas[split.target_id].location()
    reports = []
    for name in models:
        if name == "backbone":
            fc = forecast_backbone_batch(pipe.model, pipe.normalizer, batch)
        elif name == "transform":
            if pipe.transform is None:
                raise ValueError("pipeline has no trained transform")
            indices = [split.train_station_ids.index(sid) for sid in source_ids]
            fc = forecast_transform_batch(pipe.model, pipe.transform, pipe.normalizer,
                                          batch, target_loc, indices)
        else:
            raise ValueError(f"not a learned model: {name!r}")
        reports.append(make_report(pipe.scenario, name, pipe.seed, fc, batch.target_y,
                                   config_digest))
    return reports


def run_comparison(
    stations,
    target_id,
    models="all",
    seeds: Sequence[int] = (0,),
    *,
    scenarios: Sequence[str] = ("full_data", "zero_shot"),
    model_config: Optional[ModelConfig] = None,
    backbone_config: Optional[TrainConfig] = None,
    transform_config: Optional[TrainConfig] = None,
    test_span=720,
    train_stride: int = 1,
    eval_stride: int = 1,
    val_fraction: float = 0.1,
    ar_max_lag: int = 48,
    moving_average_k: int = MOVING_AVERAGE_K,
    persistence_f: int = PERSISTENCE_F,
    config_digest: str = "",
    keep_pipelines: bool = False,
):
    """Evaluate every requested model under the requested scenarios.

    Deterministic baselines are computed once and reported with identical
    values in both scenarios; learned models are trained per (scenario,
    seed). Returns (reports, pipelines) where pipelines is empty unless
    keep_pipelines is set.
    """
    names = _resolve_models(models)
    for scenario in scenarios:
        if scenario not in ("full_data", "zero_shot"):
            raise ValueError(f"unknown scenario {scenario!r}")
    n_features = len(stations[0].channels)
    if model_config is None:
        model_config = desk_config(n_features=n_features)
    if backbone_config is None:
        backbone_config = desk_train_config("backbone")
    if transform_config is None:
        transform_config = desk_train_config("transform")

    # one reference zero-shot split defines the shared evaluation batch
    ref_split = split_zero_shot(stations, target_id, val_fraction=val_fraction,
                                test_span=test_span, L_x=model_config.L_x,
                                L_y=model_config.L_y, train_stride=train_stride,
                                eval_stride=eval_stride)
    ref_split.assert_no_leakage()
    source_ids = list(ref_split.train_station_ids)
    batch = build_eval_batch(stations, ref_split, source_ids,
                             model_config.L_x, model_config.L_y)
    ref_metas = [ref_split.metas[sid] for sid in source_ids]
    ref_norm = fit_normalizer(ref_split.train, ref_metas, ref_split.channels,
                              ref_split.target_channel)

    reports: list = []
    tgt_idx = ref_norm.target_index
    for name in names:
        if name in ("last_value", "moving_average", "persistence"):
            fc = forecast_baseline_batch(name, batch, tgt_idx, model_config.L_y,
                                         moving_average_k, persistence_f)
            for scenario in scenarios:
                reports.append(make_report(scenario, name, None, fc, batch.target_y,
                                           config_digest))
        elif name == "ar":
            for scenario in scenarios:
                fc = forecast_ar_batch(stations, ref_split, scenario, ref_norm,
                                       batch, model_config.L_y, ar_max_lag)
                reports.append(make_report(scenario, name, None, fc, batch.target_y,
                                           config_digest))

    learned = [n for n in names if n in LEARNED_MODELS]
    pipelines = []
    if learned:
        need_transform = "transform" in learned
        for scenario in scenarios:
            for seed in seeds:
                pipe = train_pipeline(
                    stations, target_id, scenario, seed,
                    model_config=model_config,
                    backbone_config=backbone_config,
                    transform_config=transform_config if need_transform else None,
                    test_span=test_span,
                    train_stride=train_stride,
                    val_fraction=val_fraction,
                )
                reports.extend(
                    evaluate_pipeline(stations, pipe, learned, config_digest)
                )
                if keep_pipelines:
                    pipelines.append(pipe)
    return reports, pipelines


def summarize(reports) -> dict:
    """(scenario, model) -> dict with mean/std of the seed-average MSE and MAE."""
    groups: dict = {}
    for r in reports:
        groups.setdefault((r.scenario, r.model), []).append(r)
    out = {}
    for key, rs in sorted(groups.items()):
        mses = np.array([r.mse_avg for r in rs])
        maes = np.array([r.mae_avg for r in rs])
        out[key] = {
            "mse_mean": float(mses.mean()),
            "mse_std": float(mses.std()),
            "mae_mean": float(maes.mean()),
            "mae_std": float(maes.std()),
            "n_runs": len(rs),
        }
    return out


def seed_mean_per_hour(reports, scenario, model) -> np.ndarray:
    rows = [r.mse_per_hour for r in reports if r.scenario == scenario and r.model == model]
    if not rows:
        raise ValueError(f"no reports for ({scenario}, {model})")
    return np.mean(rows, axis=0)


# ---------------------------------------------------------------------------
# learning curve


def nearest_k_station_ids(stations, target_id, k) -> list:
    """The k source stations closest to the target in normalized location space."""
    metas = [s.meta for s in stations]
    others = [m for m in metas if m.station_id != target_id]
    if k > len(others):
        raise ValueError(f"k={k} exceeds the {len(others)} available source stations")
    locs = np.stack([m.location() for m in others])
    mean, std = locs.mean(axis=0), np.maximum(locs.std(axis=0), 1e-8)
    target = next(m for m in metas if m.station_id == target_id)
    t = (target.location() - mean) / std
    d = np.linalg.norm((locs - mean) / std - t, axis=1)
    order = np.argsort(d, kind="stable")
    return [others[i].station_id for i in order[:k]]


def learning_curve(
    stations,
    target_id,
    station_counts: Sequence[int],
    seeds: Sequence[int],
    *,
    model: str = "transform",
    model_config: Optional[ModelConfig] = None,
    backbone_config: Optional[TrainConfig] = None,
    transform_config: Optional[TrainConfig] = None,
    test_span=720,
    train_stride: int = 1,
    eval_stride: int = 1,
    config_digest: str = "",
):
    """Zero-shot target MSE as the k nearest source stations join training."""
    by_id = {s.meta.station_id: s for s in stations}
    points, all_reports = [], []
    for k in station_counts:
        ids = nearest_k_station_ids(stations, target_id, k)
        subset = [by_id[sid] for sid in ids] + [by_id[target_id]]
        mses = []
        for seed in seeds:
            reports, _ = run_comparison(
                subset, target_id, models=(model,), seeds=(seed,),
                scenarios=("zero_shot",),
                model_config=model_config, backbone_config=backbone_config,
                transform_config=transform_config, test_span=test_span,
                train_stride=train_stride, eval_stride=eval_stride,
                config_digest=config_digest,
            )
            mses.append(reports[0].mse_avg)
            all_reports.extend(reports)
        points.append(CurvePoint(
            n_train_stations=k,
            mse_mean=float(np.mean(mses)),
            mse_std=float(np.std(mses)),
            n_seeds=len(seeds),
        ))
    return points, all_reports


# ---------------------------------------------------------------------------
# trace (prediction vs truth)


def forecast_trace_rows(stations, pipe: TrainedPipeline, model_name: str,
                        span=None, config_digest: str = "") -> list:
    """Hourly (timestamp, truth, prediction) rows over the test span, built
    from non-overlapping forecasts anchored every L_y hours."""
    cfg = pipe.model.config
    split = pipe.split
    source_ids = [sid for sid in split.train_station_ids if sid != split.target_id]
    batch = build_eval_batch(stations, split, source_ids, cfg.L_x, cfg.L_y)
    keep = [0]
    for i, t in enumerate(batch.anchors):
        if t >= batch.anchors[keep[-1]] + cfg.L_y:
            keep.append(i)
    sub = EvalBatch(
        anchors=batch.anchors[keep],
        target_x=batch.target_x[keep],
        target_y=batch.target_y[keep],
        source_x=batch.source_x[:, keep],
        source_ids=batch.source_ids,
        source_locs=batch.source_locs,
    )
    if model_name == "backbone":
        fc = forecast_backbone_batch(pipe.model, pipe.normalizer, sub)
    elif model_name == "transform":
        indices = [split.train_station_ids.index(sid) for sid in source_ids]
        fc = forecast_transform_batch(pipe.model, pipe.transform, pipe.normalizer,
                                      sub, split.metas[split.target_id].location(),
                                      indices)
    else:
        raise ValueError(f"trace supports learned models only, got {model_name!r}")
    rows = []
    for b, t in enumerate(sub.anchors):
        for h in range(cfg.L_y):
            rows.append({
                "timestamp": format_timestamp(int(t) + 1 + h),
                "truth": float(sub.target_y[b, h]),
                "prediction": float(fc[b, h]),
                "model": model_name,
                "station": split.target_id,
                "config_digest": config_digest,
            })
    return rows


# ---------------------------------------------------------------------------
# file emission


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow(row)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_report(reports, out_dir, config_digest: str = "") -> tuple:
    """report.csv (one row per evaluation cell) and report.json (full detail)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "report.csv"
    header = ["schema_version", "scenario", "model", "seed", "mse_avg", "mae_avg",
              "n_windows", "row_type", "config_digest"]
    rows = [
        [SCHEMA_VERSION, r.scenario, r.model, _fmt(r.seed), repr(r.mse_avg),
         repr(r.mae_avg), r.n_windows, r.row_type, r.config_digest]
        for r in reports
    ]
    _write_rows(csv_path, header, rows)

    json_path = out_dir / "report.json"
    doc = {
        "schema_version": SCHEMA_VERSION,
        "tool_version": TOOL_VERSION,
        "config_digest": config_digest,
        "reports": [asdict(r) for r in reports],
    }
    validate_report_json(doc)
    with open(json_path, "w") as f:
        json.dump(doc, f, indent=1)
    return csv_path, json_path


def load_report_csv(path) -> list:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    out = []
    for row in rows:
        out.append({
            "schema_version": int(row["schema_version"]),
            "scenario": row["scenario"],
            "model": row["model"],
            "seed": int(row["seed"]) if row["seed"] != "" else None,
            "mse_avg": float(row["mse_avg"]),
            "mae_avg": float(row["mae_avg"]),
            "n_windows": int(row["n_windows"]),
            "row_type": row["row_type"],
            "config_digest": row["config_digest"],
        })
    return out


def validate_report_json(doc) -> None:
    """Structural check of the versioned report schema; raises on violation."""
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema_version {doc.get('schema_version')}")
    for key in ("tool_version", "config_digest", "reports"):
        if key not in doc:
            raise ValueError(f"report document missing {key!r}")
    for i, r in enumerate(doc["reports"]):
        for key in ("scenario", "model", "seed", "mse_per_hour", "mae_per_hour",
                    "mse_avg", "mae_avg", "n_windows", "config_digest", "row_type"):
            if key not in r:
                raise ValueError(f"report {i} missing {key!r}")
        if len(r["mse_per_hour"]) != len(r["mae_per_hour"]):
            raise ValueError(f"report {i} per-hour arrays disagree in length")
        if r["row_type"] not in ("computed", "external_reference"):
            raise ValueError(f"report {i} has unknown row_type {r['row_type']!r}")
        avg = float(np.mean(r["mse_per_hour"])) if r["mse_per_hour"] else None
        if avg is not None and abs(avg - r["mse_avg"]) > 1e-9:
            raise ValueError(f"report {i}: mse_avg is not the mean of mse_per_hour")


def external_reference_report(scenario, model, mse_avg, mae_avg=float("nan"),
                              config_digest: str = "") -> EvalReport:
    """A published number displayed alongside computed rows, clearly labeled."""
    return EvalReport(
        scenario=scenario, model=model, seed=None,
        mse_per_hour=(), mae_per_hour=(),
        mse_avg=float(mse_avg), mae_avg=float(mae_avg),
        n_windows=0, config_digest=config_digest,
        row_type="external_reference",
    )


def emit_curve(points, out_dir, config_digest: str = "") -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "curve.csv"
    header = ["schema_version", "n_train_stations", "mse_mean", "mse_std",
              "n_seeds", "config_digest"]
    rows = [
        [SCHEMA_VERSION, p.n_train_stations, repr(p.mse_mean), repr(p.mse_std),
         p.n_seeds, config_digest]
        for p in points
    ]
    _write_rows(path, header, rows)
    return path


def emit_trace(rows, out_dir, filename: str = "trace.csv") -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / filename
    header = ["timestamp", "truth", "prediction", "model", "station", "config_digest"]
    _write_rows(path, header, [
        [r["timestamp"], repr(r["truth"]), repr(r["prediction"]), r["model"],
         r["station"], r["config_digest"]]
        for r in rows
    ])
    return path
