"""Acceptance suite: one test per criterion, one printed PASS line each.

The experiment criteria (1-3) run a real multi-seed study on a fixed
desk-scale synthetic world: 11 stations, 2 years of hourly data, 10
training stations, and the station closest to the map centroid held out
as the zero-shot target. Training uses the desk presets; run `pytest -s`
to watch the pass lines appear.
"""

import time

import numpy as np
import pytest

from stationcast.autodiff import GradientTape, Tensor
from stationcast.baselines import ar_candidate_aics, fit_ar
from stationcast.data import fit_normalizer, split_zero_shot
from stationcast.evaluation import (
    emit_report,
    learning_curve,
    run_comparison,
    seed_mean_per_hour,
    summarize,
)
from stationcast.model import ModelConfig, Seq2Seq, desk_config, micro_config, params_digest
from stationcast.synthetic import OUParams, SyntheticWorld, build_world, generate_series
from stationcast.training import desk_train_config, train_backbone, train_transform
from stationcast.transform import (
    SourceWindow,
    ZeroShotTransform,
    zero_shot_forecast,
)
from stationcast.data import StationMeta, WindowPair, Normalizer

# ---------------------------------------------------------------------------
# the desk-scale experiment configuration (fixed before any result was read)

WORLD_SEED = 73
N_STATIONS = 11
N_HOURS = 17532  # 2 years
RUN_SEEDS = (101, 102, 103, 104, 105)
TEST_SPAN = 720
TRAIN_STRIDE = 10
EVAL_STRIDE = 3
CURVE_COUNTS = (2, 8)

BUDGET_ORDERING_S = 45 * 60
BUDGET_CURVE_S = 90 * 60


def central_station_id(stations) -> str:
    """The station nearest the map centroid: the canonical held-out target."""
    locs = np.stack([[s.meta.latitude, s.meta.longitude] for s in stations])
    return stations[int(np.argmin(np.linalg.norm(locs - locs.mean(0), axis=1)))].meta.station_id


def ok(n, text):
    print(f"\nACCEPTANCE {n} PASS: {text}")


@pytest.fixture(scope="session")
def desk_world():
    world, stations = build_world(N_STATIONS, N_HOURS, seed=WORLD_SEED)
    return stations


@pytest.fixture(scope="session")
def ordering_run(desk_world):
    """Zero-shot comparison over 5 run seeds (criteria 1 and 3), plus
    deterministic baselines under both scenarios (criterion 4)."""
    target = central_station_id(desk_world)
    t0 = time.perf_counter()
    reports, _ = run_comparison(
        desk_world, target,
        models=("last_value", "moving_average", "persistence", "backbone", "transform"),
        seeds=RUN_SEEDS, scenarios=("zero_shot",),
        model_config=desk_config(),
        backbone_config=desk_train_config("backbone"),
        transform_config=desk_train_config("transform"),
        test_span=TEST_SPAN, train_stride=TRAIN_STRIDE, eval_stride=EVAL_STRIDE,
    )
    elapsed = time.perf_counter() - t0
    both, _ = run_comparison(
        desk_world, target,
        models=("last_value", "moving_average", "persistence"),
        seeds=(RUN_SEEDS[0],), scenarios=("full_data", "zero_shot"),
        model_config=desk_config(),
        test_span=TEST_SPAN, train_stride=TRAIN_STRIDE, eval_stride=EVAL_STRIDE,
    )
    return {"target": target, "reports": reports, "baseline_both": both,
            "elapsed": elapsed}


def test_c01_zero_shot_ordering(ordering_run):
    """Transform beats the vanilla backbone and the naive baselines,
    mean zero-shot MSE over 5 run seeds, within the runtime budget."""
    table = summarize(ordering_run["reports"])
    mse = {model: row["mse_mean"] for (_, model), row in table.items()}
    lines = ", ".join(f"{m}={v:.2f}" for m, v in sorted(mse.items(), key=lambda kv: kv[1]))
    print(f"\n  zero-shot seed-mean MSE: {lines}")
    print(f"  runtime: {ordering_run['elapsed'] / 60:.1f} min")

    assert ordering_run["elapsed"] <= BUDGET_ORDERING_S, "runtime budget exceeded"
    assert mse["transform"] < mse["last_value"]
    assert mse["transform"] < mse["persistence"]
    assert mse["transform"] < mse["moving_average"]
    assert mse["transform"] < mse["backbone"], (
        f"transform {mse['transform']:.3f} vs backbone {mse['backbone']:.3f}"
    )
    ok(1, f"zero-shot ordering holds: transform {mse['transform']:.2f} < "
          f"backbone {mse['backbone']:.2f} < naive baselines")


@pytest.fixture(scope="session")
def curve_run(desk_world):
    target = central_station_id(desk_world)
    t0 = time.perf_counter()
    points, _ = learning_curve(
        desk_world, target, station_counts=CURVE_COUNTS, seeds=RUN_SEEDS,
        model="transform",
        model_config=desk_config(),
        backbone_config=desk_train_config("backbone"),
        transform_config=desk_train_config("transform"),
        test_span=TEST_SPAN, train_stride=TRAIN_STRIDE, eval_stride=EVAL_STRIDE,
    )
    return {"points": points, "elapsed": time.perf_counter() - t0}


def test_c02_learning_curve_trend(curve_run):
    """Zero-shot MSE with 8 training stations beats 2, mean over 5 seeds."""
    by_k = {p.n_train_stations: p for p in curve_run["points"]}
    print(f"\n  curve: " + ", ".join(
        f"k={k}: {p.mse_mean:.2f} +/- {p.mse_std:.2f}" for k, p in sorted(by_k.items())))
    print(f"  runtime: {curve_run['elapsed'] / 60:.1f} min")
    assert curve_run["elapsed"] <= BUDGET_CURVE_S, "runtime budget exceeded"
    assert by_k[8].mse_mean < by_k[2].mse_mean
    ok(2, f"more stations help: MSE(k=8) {by_k[8].mse_mean:.2f} < "
          f"MSE(k=2) {by_k[2].mse_mean:.2f}")


def test_c03_horizon_degradation(ordering_run):
    """Per-hour MSE grows with the forecast horizon (hour 24 vs hour 1)."""
    profile = seed_mean_per_hour(ordering_run["reports"], "zero_shot", "transform")
    print(f"\n  per-hour MSE: h1={profile[0]:.2f} h12={profile[11]:.2f} h24={profile[23]:.2f}")
    assert profile[23] > profile[0]
    ok(3, f"horizon degrades: hour-24 MSE {profile[23]:.2f} > hour-1 {profile[0]:.2f}")


def test_c04_baseline_scenario_equality(ordering_run):
    """Deterministic baselines report identical full-data and zero-shot values."""
    by_key = {(r.model, r.scenario): r for r in ordering_run["baseline_both"]}
    for model in ("last_value", "moving_average", "persistence"):
        full = by_key[(model, "full_data")]
        zero = by_key[(model, "zero_shot")]
        assert full.mse_avg == zero.mse_avg
        assert full.mse_per_hour == zero.mse_per_hour
        assert full.mae_per_hour == zero.mae_per_hour
    ok(4, "deterministic baselines are scenario-invariant, exactly")


def test_c05_ou_stationary_variance():
    """With seasonality and trend off, the generator's sample variance over
    100k hours matches the AR(1) closed form sigma^2 / (1 - (1-kappa)^2)."""
    kappa, sigma = 0.5, 5.0
    params = OUParams(kappa=kappa, sigma=sigma, a=5.0, b=0.0)
    world = SyntheticWorld(seed=0, locations=np.zeros((1, 2)), params=(params,),
                           projection_weights={}, projection_noise=0.0)
    series = generate_series(world, 0, 100_000)
    expected = sigma**2 / (1.0 - (1.0 - kappa) ** 2)
    assert expected == pytest.approx(100.0 / 3.0, abs=1e-9)
    assert series.var() == pytest.approx(expected, rel=0.05)
    ok(5, f"stationary variance {series.var():.2f} within 5% of {expected:.2f}")


# -- criterion 6: gradient suite --------------------------------------------


def _fd(f, arr, h=1e-5):
    g = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        gflat[i] = (up - f()) / (2.0 * h)
        flat[i] = orig
    return g


def _rel(a, b):
    return np.linalg.norm((a - b).ravel()) / max(
        np.linalg.norm(a.ravel()), np.linalg.norm(b.ravel()), 1e-6)


def test_c06_gradient_suite():
    """Every differentiable op at 1e-4 and the full micro model (backbone +
    transform + combinator) end-to-end at 1e-3, against central differences."""
    from stationcast import autodiff as ad

    rng = np.random.default_rng(606)

    # op-level checks
    ops = {
        "add": lambda t: (t[0] + t[1]).sum(),
        "sub": lambda t: (t[0] - t[1]).mean(),
        "mul": lambda t: (t[0] * t[1]).sum(),
        "div": lambda t: (t[0] / (t[1] + 4.0)).sum(),
        "neg": lambda t: (-t[0]).sum(),
        "power": lambda t: (t[0] ** 2.0).sum(),
        "matmul": lambda t: ad.matmul(t[0], t[1].reshape(4, 3)).sum(),
        "softmax": lambda t: (ad.softmax(t[0], axis=-1) * w0).sum(),
        "layer_norm": lambda t: (ad.layer_norm(t[0], gain, bias) * w0).sum(),
        "gelu": lambda t: ad.gelu(t[0]).sum(),
        "softplus": lambda t: ad.softplus(t[0]).sum(),
        "dropout": lambda t: (ad.dropout(t[0], 0.3, seed=9) ** 2.0).sum(),
        "sum_axis": lambda t: t[0].sum(axis=1).mean(),
        "mean_axis": lambda t: t[0].mean(axis=0).sum(),
        "reshape": lambda t: (t[0].reshape(12,) * w1).sum(),
        "transpose": lambda t: (t[0].transpose(1, 0) ** 2.0).sum(),
        "getitem": lambda t: t[0][1:, ::2].sum(),
        "concat": lambda t: (ad.concat([t[0], t[1]], axis=-1) ** 2.0).mean(),
        "stack": lambda t: (ad.stack([t[0], t[1]]) ** 2.0).sum(),
        "take": lambda t: ad.take(t[0], np.array([0, 2, 0])).sum(),
    }
    gain, bias = Tensor(rng.normal(size=4)), Tensor(rng.normal(size=4))
    w0 = rng.normal(size=(3, 4))
    w1 = rng.normal(size=12)
    failures = []
    for name, build in ops.items():
        tensors = [Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(3, 4)))]
        if name == "layer_norm":
            tensors.extend([gain, bias])
        with GradientTape() as tape:
            loss = build(tensors)
        tape.backward(loss)
        for t in tensors:
            num = _fd(lambda: float(build(tensors).data), t.data)
            ana = t.grad if t.grad is not None else np.zeros_like(t.data)
            if _rel(ana, num) >= 1e-4:
                failures.append((name, float(_rel(ana, num))))
    assert not failures, f"op-level gradient failures: {failures}"

    # end-to-end: zero-shot forward through backbone + transform + combinator
    cfg = micro_config()
    model = Seq2Seq(cfg, seed=77)
    tr = ZeroShotTransform(cfg.d_model, n_sources=2)
    tr.params["transform/delta/w"].data += rng.normal(scale=0.05,
                                                      size=tr.params["transform/delta/w"].shape)
    tr.params["transform/logits"].data[:] = rng.normal(size=2)
    norm = Normalizer(channels=["f0"], target_channel="f0",
                      mean=np.zeros(1), std=np.ones(1),
                      loc_mean=np.zeros(3), loc_std=np.ones(3))
    from stationcast.transform import batched_zero_shot

    anchors = np.array([438288 + 100, 438288 + 163])
    source_x = rng.normal(size=(2, 2, cfg.L_x, 1))
    source_locs = rng.uniform(size=(2, 3))
    contexts = rng.normal(size=(2, cfg.label_len))
    target_loc = np.array([0.5, 0.5, 0.0])
    y = rng.normal(size=(2, cfg.L_y))

    def loss_value():
        pred = batched_zero_shot(model, tr, norm, source_x, source_locs, [0, 1],
                                 anchors, target_loc, contexts)
        return float(((pred - y) ** 2.0).mean().data)

    with GradientTape() as tape:
        pred = batched_zero_shot(model, tr, norm, source_x, source_locs, [0, 1],
                                 anchors, target_loc, contexts)
        loss = ((pred - y) ** 2.0).mean()
    tape.backward(loss)

    e2e_failures = []
    for name, p in {**model.params, **tr.params}.items():
        num = _fd(loss_value, p.data)
        ana = p.grad if p.grad is not None else np.zeros_like(p.data)
        err = _rel(ana, num)
        if err >= 1e-3:
            e2e_failures.append((name, float(err)))
    assert not e2e_failures, f"end-to-end gradient failures: {e2e_failures}"
    ok(6, f"{len(ops)} ops at 1e-4 and {len(model.params) + len(tr.params)} "
          f"parameter tensors end-to-end at 1e-3")


def test_c07_transform_reduction_anchors():
    """Identity transform + single source reproduces the backbone bitwise;
    convexity and permutation equivariance hold over 1,000 random cases."""
    cfg = micro_config()
    model = Seq2Seq(cfg, seed=7)
    norm = Normalizer(channels=["f0"], target_channel="f0",
                      mean=np.zeros(1), std=np.ones(1),
                      loc_mean=np.zeros(3), loc_std=np.ones(3))
    rng = np.random.default_rng(707)

    # bitwise reduction anchor
    tr1 = ZeroShotTransform(cfg.d_model, n_sources=1)
    window = WindowPair("S00", 438288 + 500, rng.normal(size=(cfg.L_x, 1)),
                        rng.normal(size=cfg.L_y))
    meta = StationMeta("S00", 0.0, 0.4, 0.6)
    ctx = window.x[-cfg.label_len :, 0]
    zs = zero_shot_forecast(model, tr1, norm, [SourceWindow(0, window, meta)],
                            meta.location(), ctx)
    plain = model.forecast(window.x[None], np.array([window.t]), ctx[None]).data[0]
    assert np.array_equal(zs, plain)

    # 1,000 randomized property cases
    for case in range(1000):
        n = int(rng.integers(2, 7))
        tr = ZeroShotTransform(d_model=3, n_sources=n)
        tr.params["transform/logits"].data[:] = rng.normal(scale=2.0, size=n)
        embs = [Tensor(rng.normal(scale=rng.uniform(0.5, 3.0), size=(2, 3)))
                for _ in range(n)]
        out = tr.combine(embs, list(range(n))).data
        lo = np.min([e.data for e in embs], axis=0)
        hi = np.max([e.data for e in embs], axis=0)
        span = np.maximum(hi - lo, 1e-12)
        assert np.all(out >= lo - 1e-9 * span - 1e-12)
        assert np.all(out <= hi + 1e-9 * span + 1e-12)

        perm = rng.permutation(n)
        out_p = tr.combine([embs[i] for i in perm], [int(i) for i in perm]).data
        assert np.array_equal(out, out_p)

        w = tr.effective_weights(range(n))
        assert np.all(w > 0.0) and abs(w.sum() - 1.0) <= 1e-12
    ok(7, "bitwise reduction anchor + 1,000 convexity/permutation cases")


def test_c08_freeze_contract():
    """Backbone parameter hash is unchanged across phase-2 training."""
    _, stations = build_world(4, 1200, seed=8)
    cfg = ModelConfig(d_model=8, d_inner=16, n_heads=1, enc_layers=1, dec_layers=1,
                      dropout=0.05, label_len=6, L_x=12, L_y=6, n_features=1)
    split = split_zero_shot(stations, "S03", test_span=120, L_x=12, L_y=6,
                            train_stride=4)
    metas = [split.metas[sid] for sid in split.train_station_ids]
    norm = fit_normalizer(split.train, metas, split.channels, split.target_channel)
    model = Seq2Seq(cfg, seed=8)
    from stationcast.training import TrainConfig

    train_backbone(model, split, norm,
                   TrainConfig(batch_size=64, learning_rate=1e-3, patience=2,
                               max_epochs=1, seed=8))
    before = params_digest(model.params)
    tr = ZeroShotTransform(cfg.d_model, len(split.train_station_ids))
    train_transform(model, tr, split, norm,
                    TrainConfig(batch_size=8, learning_rate=1e-3, patience=2,
                                max_epochs=2, seed=8, anchors_per_target=24))
    assert params_digest(model.params) == before
    ok(8, f"backbone digest {before[:12]}... unchanged through phase 2")


def test_c09_ar_recovery_and_aic():
    """AR(1) coefficient 0.8 recovered within 0.05 on 10k points; the chosen
    model's AIC is the grid minimum, checked exhaustively."""
    rng = np.random.default_rng(909)
    x = np.zeros(10_000)
    for i in range(1, len(x)):
        x[i] = 0.8 * x[i - 1] + rng.normal(scale=0.5)
    model = fit_ar(x, max_lag=6, try_trend=True)
    assert model.coefficients[0] == pytest.approx(0.8, abs=0.05)
    grid = ar_candidate_aics(x, max_lag=6, try_trend=True)
    assert len(grid) == 12
    assert model.aic == min(grid.values())
    ok(9, f"AR(1) coefficient {model.coefficients[0]:.3f}; AIC minimal over "
          f"{len(grid)} candidates")


def test_c10_report_reproducibility(tmp_path):
    """Identical seeds produce byte-identical report CSVs."""
    _, stations = build_world(4, 1100, seed=10)
    cfg = ModelConfig(d_model=8, d_inner=16, n_heads=1, enc_layers=1, dec_layers=1,
                      dropout=0.05, label_len=6, L_x=12, L_y=6, n_features=1)
    from stationcast.training import TrainConfig

    blobs = []
    for sub in ("a", "b"):
        reports, _ = run_comparison(
            stations, "S02", models=("last_value", "backbone"), seeds=(3,),
            scenarios=("zero_shot",), model_config=cfg,
            backbone_config=TrainConfig(batch_size=64, learning_rate=1e-3,
                                        patience=2, max_epochs=2, seed=3),
            test_span=150, train_stride=4, eval_stride=6,
            moving_average_k=6, persistence_f=6, config_digest="c10",
        )
        csv_path, json_path = emit_report(reports, tmp_path / sub, "c10")
        blobs.append((csv_path.read_bytes(), json_path.read_bytes()))
    assert blobs[0][0] == blobs[1][0]
    assert blobs[0][1] == blobs[1][1]
    ok(10, "report.csv and report.json byte-identical across reruns")
