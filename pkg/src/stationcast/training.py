"""Two-phase training: fit the backbone on every source station, then
freeze it and fit only the transfer layer and combinator logits by
rotating through the source stations as pseudo-targets.

Freezing is an optimizer-side namespace filter; gradients still flow
through frozen backbone parameters to reach the transform layer.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .autodiff import GradientTape, Tensor
from .data import Normalizer, ZeroShotSplit
from .model import Seq2Seq
from .transform import ZeroShotTransform, batched_zero_shot

VAL_BATCH = 256


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; message carries the batch id and parameter norms."""


@dataclass
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-4
    loss: str = "mse"
    patience: int = 10
    max_epochs: int = 50
    seed: int = 0
    phase: str = "backbone"
    # phase-2 cost knob: anchors sampled per pseudo-target per epoch (0 = all)
    anchors_per_target: int = 0

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.loss != "mse":
            raise ValueError(f"unsupported loss {self.loss!r}")


def desk_train_config(phase: str, seed: int = 0) -> TrainConfig:
    """Training presets sized for single-core experiments."""
    if phase == "backbone":
        return TrainConfig(batch_size=96, learning_rate=1e-3, patience=2,
                           max_epochs=5, seed=seed, phase=phase)
    return TrainConfig(batch_size=12, learning_rate=1e-3, patience=2,
                       max_epochs=6, seed=seed, phase="transform",
                       anchors_per_target=150)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: Optional[float]
    val_loss: float
    seconds: float


@dataclass
class TrainLog:
    phase: str
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = np.inf
    stop_reason: str = ""

    @property
    def training_epochs(self) -> int:
        return sum(1 for e in self.epochs if e.epoch > 0)

    @property
    def initial_val_loss(self) -> float:
        return self.epochs[0].val_loss

    def validate(self) -> None:
        best = min(e.val_loss for e in self.epochs)
        if abs(self.best_val_loss - best) > 1e-12:
            raise AssertionError("best_val_loss is not the minimum over epochs")

    def write_jsonl(self, path, meta: Optional[dict] = None) -> None:
        with open(path, "w") as f:
            head = {"record": "meta", "phase": self.phase,
                    "best_epoch": self.best_epoch,
                    "best_val_loss": self.best_val_loss,
                    "stop_reason": self.stop_reason}
            if meta:
                head.update(meta)
            f.write(json.dumps(head, sort_keys=True) + "\n")
            for e in self.epochs:
                f.write(json.dumps({"record": "epoch", **asdict(e)}, sort_keys=True) + "\n")


class EarlyStopping:
    """Stop when validation fails to improve for `patience` consecutive epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best: Optional[float] = None
        self.counter = 0

    def update(self, val_loss: float) -> bool:
        if self.best is None or val_loss < self.best:
            self.best = val_loss
            self.counter = 0
            return False
        self.counter += 1
        return self.counter >= self.patience


class Adam:
    """Bias-corrected adaptive-moment update over a named parameter dict.

    Parameters whose name starts with a frozen prefix are never touched,
    whatever their gradients say.
    """

    def __init__(self, params: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 frozen_prefixes: tuple = ()):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.trainable = {
            name: p for name, p in params.items()
            if not any(name.startswith(pre) for pre in frozen_prefixes)
        }
        self.m = {name: np.zeros_like(p.data) for name, p in self.trainable.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.trainable.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, p in self.trainable.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def mse_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    return ((pred - target) ** 2.0).mean()


def snapshot_params(params: dict, prefix: str = "") -> dict:
    return {n: p.data.copy() for n, p in params.items() if n.startswith(prefix)}


def restore_snapshot(params: dict, snap: dict) -> None:
    for n, arr in snap.items():
        params[n].data = arr.copy()


def _param_norms(params: dict) -> str:
    worst = sorted(params, key=lambda n: -np.abs(params[n].data).max())[:5]
    return ", ".join(f"{n}: |max|={np.abs(params[n].data).max():.3g}" for n in worst)


# ---------------------------------------------------------------------------
# phase 1: backbone


class BackboneBatches:
    """Windows staged as normalized arrays for cheap batch slicing."""

    def __init__(self, windows, normalizer: Normalizer, config):
        if not windows:
            raise ValueError("no windows to stage")
        tgt = normalizer.target_index
        self.x = normalizer.normalize_x(np.stack([w.x for w in windows]))
        self.anchors = np.array([w.t for w in windows], dtype=np.int64)
        self.ctx = self.x[:, config.L_x - config.label_len :, tgt]
        self.y = normalizer.normalize_y(np.stack([w.y for w in windows]))

    def __len__(self) -> int:
        return len(self.anchors)


def backbone_validation_loss(model: Seq2Seq, val: BackboneBatches) -> float:
    total, count = 0.0, 0
    for lo in range(0, len(val), VAL_BATCH):
        sl = slice(lo, lo + VAL_BATCH)
        pred = model.forecast(val.x[sl], val.anchors[sl], val.ctx[sl])
        n = pred.shape[0]
        total += float(((pred.data - val.y[sl]) ** 2).mean()) * n
        count += n
    return total / count


def train_backbone(
    model: Seq2Seq,
    split: ZeroShotSplit,
    normalizer: Normalizer,
    config: TrainConfig,
):
    """Minimize forecast MSE over the pooled source-station windows.

    Returns (model, TrainLog); the model is left at its best-validation
    parameters, which include the untrained state as a candidate.
    """
    if len(split.train_station_ids) < 2:
        raise ValueError("backbone training needs at least 2 stations")
    data = BackboneBatches(split.train, normalizer, model.config)
    val = BackboneBatches(split.val, normalizer, model.config)

    shuffle_rng = np.random.default_rng([config.seed, 2])
    drop_rng = np.random.default_rng([config.seed, 3])
    optimizer = Adam(model.params, config.learning_rate)
    stopper = EarlyStopping(config.patience)
    log = TrainLog(phase="backbone")

    t0 = time.perf_counter()
    best_val = backbone_validation_loss(model, val)
    best_snap = snapshot_params(model.params)
    best_epoch = 0
    log.epochs.append(EpochRecord(0, None, best_val, time.perf_counter() - t0))

    stop_reason = "max_epochs"
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(len(data))
        losses = []
        for step, lo in enumerate(range(0, len(order), config.batch_size)):
            idx = order[lo : lo + config.batch_size]
            with GradientTape() as tape:
                pred = model.forecast(data.x[idx], data.anchors[idx], data.ctx[idx],
                                      rng=drop_rng)
                loss = mse_loss(pred, data.y[idx])
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {step}; "
                    f"parameter norms: {_param_norms(model.params)}"
                )
            tape.backward(loss)
            optimizer.step()
            optimizer.zero_grad()
            losses.append(value)

        val_loss = backbone_validation_loss(model, val)
        log.epochs.append(
            EpochRecord(epoch, float(np.mean(losses)), val_loss, time.perf_counter() - t0)
        )
        if val_loss < best_val:
            best_val = val_loss
            best_snap = snapshot_params(model.params)
            best_epoch = epoch
        if stopper.update(val_loss):
            stop_reason = "early_stopping"
            break

    restore_snapshot(model.params, best_snap)
    log.best_epoch = best_epoch
    log.best_val_loss = best_val
    log.stop_reason = stop_reason
    log.validate()
    return model, log


# ---------------------------------------------------------------------------
# phase 2: transform


class AlignedStations:
    """Per-station raw windows aligned on anchors shared by every station."""

    def __init__(self, windows, station_ids, metas):
        by_station = {sid: {} for sid in station_ids}
        for w in windows:
            by_station[w.station_id][w.t] = w
        common = set.intersection(*(set(d) for d in by_station.values())) if station_ids else set()
        self.anchors = np.array(sorted(common), dtype=np.int64)
        self.station_ids = list(station_ids)
        self.x = np.stack([
            np.stack([by_station[sid][t].x for t in self.anchors])
            for sid in station_ids
        ]) if len(self.anchors) else np.zeros((len(station_ids), 0, 0, 0))
        self.y = np.stack([
            np.stack([by_station[sid][t].y for t in self.anchors])
            for sid in station_ids
        ]) if len(self.anchors) else np.zeros((len(station_ids), 0, 0))
        self.locs = np.stack([metas[sid].location() for sid in station_ids])

    def __len__(self) -> int:
        return len(self.anchors)


def _pseudo_target_batch(model, transform, normalizer, aligned, tgt_idx, anchor_idx,
                         rng=None):
    """Forecast the pseudo-target from every other station at the given anchors."""
    cfg = model.config
    others = [s for s in range(len(aligned.station_ids)) if s != tgt_idx]
    source_x = aligned.x[others][:, anchor_idx]
    tgt_x = aligned.x[tgt_idx, anchor_idx]
    context = tgt_x[:, cfg.L_x - cfg.label_len :, normalizer.target_index]
    pred = batched_zero_shot(
        model, transform, normalizer,
        source_x, aligned.locs[others], others,
        aligned.anchors[anchor_idx], aligned.locs[tgt_idx], context, rng=rng,
    )
    truth = normalizer.normalize_y(aligned.y[tgt_idx, anchor_idx])
    return pred, truth


def transform_validation_loss(model, transform, normalizer, aligned,
                              max_anchors_per_target: int = 64) -> float:
    total, count = 0.0, 0
    for tgt_idx in range(len(aligned.station_ids)):
        idx = np.arange(len(aligned))
        if 0 < max_anchors_per_target < len(idx):
            idx = idx[np.linspace(0, len(idx) - 1, max_anchors_per_target).astype(int)]
        for lo in range(0, len(idx), VAL_BATCH // 8):
            sl = idx[lo : lo + VAL_BATCH // 8]
            pred, truth = _pseudo_target_batch(model, transform, normalizer,
                                               aligned, tgt_idx, sl)
            total += float(((pred.data - truth) ** 2).mean()) * len(sl)
            count += len(sl)
    return total / count


def train_transform(
    model: Seq2Seq,
    transform: ZeroShotTransform,
    split: ZeroShotSplit,
    normalizer: Normalizer,
    config: TrainConfig,
    progress: Optional[Callable] = None,
):
    """Fit the transfer layer and combinator logits with the backbone frozen.

    Every epoch visits each source station once as the pseudo-target; its
    windows supervise forecasts built from the remaining stations' windows
    at the same anchors. Anchors missing from any station are skipped.
    """
    if len(split.train_station_ids) < 2:
        raise ValueError("transform training needs at least 2 source stations "
                         "(one pseudo-target plus one source)")
    metas = split.metas
    train_aligned = AlignedStations(split.train, split.train_station_ids, metas)
    val_aligned = AlignedStations(split.val, split.train_station_ids, metas)
    if len(train_aligned) == 0 or len(val_aligned) == 0:
        raise ValueError("no time-aligned anchors shared by every source station")

    merged = {**model.params, **transform.params}
    optimizer = Adam(merged, config.learning_rate, frozen_prefixes=("backbone/",))
    stopper = EarlyStopping(config.patience)
    log = TrainLog(phase="transform")
    shuffle_rng = np.random.default_rng([config.seed, 4])
    drop_rng = np.random.default_rng([config.seed, 5])

    t0 = time.perf_counter()
    best_val = transform_validation_loss(model, transform, normalizer, val_aligned)
    best_snap = snapshot_params(transform.params)
    best_epoch = 0
    log.epochs.append(EpochRecord(0, None, best_val, time.perf_counter() - t0))

    n_stations = len(split.train_station_ids)
    stop_reason = "max_epochs"
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for tgt_idx in range(n_stations):
            if progress is not None:
                progress(epoch, split.train_station_ids[tgt_idx])
            pool = shuffle_rng.permutation(len(train_aligned))
            if 0 < config.anchors_per_target < len(pool):
                pool = pool[: config.anchors_per_target]
            for step, lo in enumerate(range(0, len(pool), config.batch_size)):
                idx = pool[lo : lo + config.batch_size]
                with GradientTape() as tape:
                    pred, truth = _pseudo_target_batch(
                        model, transform, normalizer, train_aligned, tgt_idx, idx,
                        rng=drop_rng,
                    )
                    loss = mse_loss(pred, truth)
                value = float(loss.data)
                if not np.isfinite(value):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}, pseudo-target "
                        f"{split.train_station_ids[tgt_idx]}, batch {step}; "
                        f"parameter norms: {_param_norms(merged)}"
                    )
                tape.backward(loss)
                optimizer.step()
                optimizer.zero_grad()
                losses.append(value)

        val_loss = transform_validation_loss(model, transform, normalizer, val_aligned)
        log.epochs.append(
            EpochRecord(epoch, float(np.mean(losses)), val_loss, time.perf_counter() - t0)
        )
        if val_loss < best_val:
            best_val = val_loss
            best_snap = snapshot_params(transform.params)
            best_epoch = epoch
        if stopper.update(val_loss):
            stop_reason = "early_stopping"
            break

    restore_snapshot(transform.params, best_snap)
    log.best_epoch = best_epoch
    log.best_val_loss = best_val
    log.stop_reason = stop_reason
    log.validate()
    return transform, log
