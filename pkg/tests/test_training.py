import numpy as np
import pytest

from stationcast import training
from stationcast.autodiff import GradientTape, Tensor
from stationcast.data import fit_normalizer, split_zero_shot
from stationcast.model import ModelConfig, Seq2Seq, params_digest
from stationcast.synthetic import build_world
from stationcast.training import (
    Adam,
    AlignedStations,
    EarlyStopping,
    TrainConfig,
    TrainLog,
    TrainingDiverged,
    mse_loss,
    train_backbone,
    train_transform,
    transform_validation_loss,
)
from stationcast.transform import ZeroShotTransform

TINY_CFG = ModelConfig(
    d_model=8, d_inner=16, n_heads=1, enc_layers=1, dec_layers=1,
    dropout=0.05, label_len=6, L_x=12, L_y=6, n_features=1,
)


@pytest.fixture(scope="module")
def tiny_setup():
    _, stations = build_world(4, 900, seed=7)
    split = split_zero_shot(stations, "S03", test_span=120,
                            L_x=12, L_y=6, train_stride=4, eval_stride=12)
    metas = [split.metas[sid] for sid in split.train_station_ids]
    norm = fit_normalizer(split.train, metas, split.channels, split.target_channel)
    return split, norm


def tiny_train_config(**kw):
    defaults = dict(batch_size=64, learning_rate=1e-3, patience=2, max_epochs=3, seed=0)
    defaults.update(kw)
    return TrainConfig(**defaults)


# ---------------------------------------------------------------------------
# config and helpers


def test_train_config_defaults_match_published_hyperparameters():
    cfg = TrainConfig()
    assert cfg.batch_size == 32
    assert cfg.learning_rate == 1e-4
    assert cfg.loss == "mse"
    assert cfg.patience == 10


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(patience=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(loss="mae")


def test_early_stopping_patience_one_stops_on_second_update():
    es = EarlyStopping(patience=1)
    assert es.update(1.0) is False
    assert es.update(1.1) is True


def test_early_stopping_resets_on_improvement():
    es = EarlyStopping(patience=2)
    assert es.update(1.0) is False
    assert es.update(1.2) is False
    assert es.update(0.9) is False
    assert es.update(1.0) is False
    assert es.update(1.1) is True


# ---------------------------------------------------------------------------
# Adam


def test_adam_zero_gradient_leaves_parameters_unchanged():
    p = Tensor(np.array([1.0, -2.0]), name="w")
    p.grad = np.zeros(2)
    opt = Adam({"w": p}, lr=0.1)
    opt.step()
    assert np.array_equal(p.data, [1.0, -2.0])


def test_adam_minimizes_scalar_quadratic_within_500_steps():
    p = Tensor(np.array([5.0]), name="w")
    opt = Adam({"w": p}, lr=0.05)
    for _ in range(500):
        with GradientTape() as tape:
            loss = ((p - 3.0) ** 2.0).sum()
        tape.backward(loss)
        opt.step()
        opt.zero_grad()
    assert abs(p.data[0] - 3.0) < 1e-3


def test_adam_skips_frozen_namespace_even_with_gradients():
    frozen = Tensor(np.ones(3), name="backbone/w")
    live = Tensor(np.ones(3), name="transform/w")
    frozen.grad = np.ones(3)
    live.grad = np.ones(3)
    opt = Adam({"backbone/w": frozen, "transform/w": live}, lr=0.1,
               frozen_prefixes=("backbone/",))
    opt.step()
    assert np.array_equal(frozen.data, np.ones(3))
    assert not np.array_equal(live.data, np.ones(3))


def test_adam_skips_none_gradients():
    p = Tensor(np.ones(2), name="w")
    opt = Adam({"w": p}, lr=0.1)
    opt.step()
    assert np.array_equal(p.data, np.ones(2))


# ---------------------------------------------------------------------------
# backbone training


def test_backbone_early_stops_after_exactly_two_epochs(tiny_setup, monkeypatch):
    split, norm = tiny_setup
    vals = iter([10.0, 1.0, 2.0, 3.0, 4.0])
    monkeypatch.setattr(training, "backbone_validation_loss", lambda m, v: next(vals))
    model = Seq2Seq(TINY_CFG, seed=0)
    _, log = train_backbone(model, split, norm,
                            tiny_train_config(patience=1, max_epochs=10))
    assert log.training_epochs == 2
    assert log.stop_reason == "early_stopping"
    assert log.best_epoch == 1
    assert log.best_val_loss == 1.0


def test_backbone_training_reduces_validation_loss(tiny_setup):
    split, norm = tiny_setup
    model = Seq2Seq(TINY_CFG, seed=1)
    _, log = train_backbone(model, split, norm, tiny_train_config())
    assert log.best_val_loss <= log.initial_val_loss
    assert log.best_val_loss == min(e.val_loss for e in log.epochs)
    assert log.training_epochs >= 1


def test_backbone_restores_best_checkpoint(tiny_setup):
    split, norm = tiny_setup
    model = Seq2Seq(TINY_CFG, seed=2)
    _, log = train_backbone(model, split, norm, tiny_train_config(max_epochs=2))
    after = training.backbone_validation_loss(
        model, training.BackboneBatches(split.val, norm, model.config))
    assert after == pytest.approx(log.best_val_loss, rel=1e-12)


def test_backbone_fixed_seed_reproduces_losses_and_parameters(tiny_setup):
    split, norm = tiny_setup
    runs = []
    for _ in range(2):
        model = Seq2Seq(TINY_CFG, seed=3)
        _, log = train_backbone(model, split, norm, tiny_train_config(seed=11, max_epochs=2))
        runs.append(([e.train_loss for e in log.epochs],
                     [e.val_loss for e in log.epochs],
                     params_digest(model.params)))
    assert runs[0] == runs[1]


def test_backbone_nan_loss_aborts_with_diagnostics(tiny_setup):
    split, norm = tiny_setup
    model = Seq2Seq(TINY_CFG, seed=4)
    model.params["backbone/head/w"].data[:] = np.nan
    with pytest.raises(TrainingDiverged, match=r"batch 0.*parameter norms"):
        train_backbone(model, split, norm, tiny_train_config())


def test_overfit_probe_50_samples():
    # trainability: loss on a 50-sample probe falls below 1% of its initial
    # value within 2000 optimizer steps
    _, stations = build_world(2, 400, seed=13)
    split = split_zero_shot(stations, "S01", test_span=60, L_x=12, L_y=6,
                            train_stride=5)
    metas = [split.metas[sid] for sid in split.train_station_ids]
    norm = fit_normalizer(split.train, metas, split.channels, split.target_channel)
    model = Seq2Seq(TINY_CFG, seed=5)
    data = training.BackboneBatches(split.train[:50], norm, model.config)
    opt = Adam(model.params, lr=1e-3)
    initial = None
    for step in range(2000):
        with GradientTape() as tape:
            pred = model.forecast(data.x, data.anchors, data.ctx)
            loss = mse_loss(pred, data.y)
        value = float(loss.data)
        if initial is None:
            initial = value
        if value < 0.01 * initial:
            break
        tape.backward(loss)
        opt.step()
        opt.zero_grad()
    assert value < 0.01 * initial, f"stuck at {value / initial:.1%} after {step + 1} steps"


# ---------------------------------------------------------------------------
# transform training


def test_transform_requires_two_source_stations(tiny_setup):
    _, stations = build_world(2, 900, seed=7)
    split = split_zero_shot(stations, "S01", test_span=120, L_x=12, L_y=6,
                            train_stride=4)
    metas = [split.metas[sid] for sid in split.train_station_ids]
    norm = fit_normalizer(split.train, metas, split.channels, split.target_channel)
    model = Seq2Seq(TINY_CFG, seed=0)
    tr = ZeroShotTransform(TINY_CFG.d_model, 1)
    with pytest.raises(ValueError, match="source stations"):
        train_transform(model, tr, split, norm, tiny_train_config())


def test_transform_freezes_backbone_parameters(tiny_setup):
    split, norm = tiny_setup
    model = Seq2Seq(TINY_CFG, seed=6)
    train_backbone(model, split, norm, tiny_train_config(max_epochs=1))
    before = params_digest(model.params)
    tr = ZeroShotTransform(TINY_CFG.d_model, len(split.train_station_ids))
    _, log = train_transform(model, tr, split, norm,
                             tiny_train_config(batch_size=8, max_epochs=2,
                                               anchors_per_target=24))
    assert params_digest(model.params) == before
    assert log.training_epochs >= 1
    assert log.best_val_loss <= log.initial_val_loss


def test_transform_initial_val_matches_mean_embedding_oracle(tiny_setup):
    split, norm = tiny_setup
    model = Seq2Seq(TINY_CFG, seed=7)
    train_backbone(model, split, norm, tiny_train_config(max_epochs=1))
    tr = ZeroShotTransform(TINY_CFG.d_model, len(split.train_station_ids))
    aligned = AlignedStations(split.val, split.train_station_ids, split.metas)
    got = transform_validation_loss(model, tr, norm, aligned, max_anchors_per_target=8)

    # independent oracle: decode the plain mean of source embeddings
    cfg = model.config
    total, count = 0.0, 0
    for tgt_idx in range(len(aligned.station_ids)):
        idx = np.arange(len(aligned))
        idx = idx[np.linspace(0, len(idx) - 1, min(8, len(idx))).astype(int)]
        others = [s for s in range(len(aligned.station_ids)) if s != tgt_idx]
        for a in idx:
            memories = [
                model.encode(norm.normalize_x(aligned.x[s, a][None]),
                             aligned.anchors[a : a + 1]).data[0]
                for s in others
            ]
            mean_memory = Tensor(np.mean(memories, axis=0)[None])
            ctx = norm.normalize_x(aligned.x[tgt_idx, a][None])[
                :, cfg.L_x - cfg.label_len :, norm.target_index]
            pred = model.decode(mean_memory, ctx, aligned.anchors[a : a + 1]).data[0]
            truth = norm.normalize_y(aligned.y[tgt_idx, a])
            total += float(((pred - truth) ** 2).mean())
            count += 1
    oracle = total / count
    assert got == pytest.approx(oracle, rel=1e-9)


def test_transform_pseudo_target_rotation_covers_every_station(tiny_setup):
    split, norm = tiny_setup
    model = Seq2Seq(TINY_CFG, seed=8)
    tr = ZeroShotTransform(TINY_CFG.d_model, len(split.train_station_ids))
    visits = []
    train_transform(model, tr, split, norm,
                    tiny_train_config(batch_size=8, max_epochs=2, patience=5,
                                      anchors_per_target=8),
                    progress=lambda epoch, sid: visits.append((epoch, sid)))
    for epoch in (1, 2):
        seen = [sid for e, sid in visits if e == epoch]
        assert seen == split.train_station_ids  # each station exactly once per epoch


def test_transform_fixed_seed_reproducible(tiny_setup):
    split, norm = tiny_setup
    digests = []
    for _ in range(2):
        model = Seq2Seq(TINY_CFG, seed=9)
        train_backbone(model, split, norm, tiny_train_config(max_epochs=1))
        tr = ZeroShotTransform(TINY_CFG.d_model, len(split.train_station_ids))
        _, log = train_transform(model, tr, split, norm,
                                 tiny_train_config(batch_size=8, max_epochs=1,
                                                   anchors_per_target=16, seed=21))
        digests.append((params_digest(tr.params),
                        tuple(e.val_loss for e in log.epochs)))
    assert digests[0] == digests[1]


def test_trainlog_jsonl_round_trip(tmp_path, tiny_setup):
    import json

    split, norm = tiny_setup
    model = Seq2Seq(TINY_CFG, seed=10)
    _, log = train_backbone(model, split, norm, tiny_train_config(max_epochs=2))
    path = tmp_path / "log.jsonl"
    log.write_jsonl(path, meta={"seed": 10})
    lines = [json.loads(l) for l in path.read_text().splitlines()]
    assert lines[0]["record"] == "meta"
    assert lines[0]["seed"] == 10
    epochs = [l for l in lines if l["record"] == "epoch"]
    assert len(epochs) == len(log.epochs)
    assert epochs[0]["epoch"] == 0
