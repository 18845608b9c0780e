"""Synthetic multi-station hourly climate series.

Each station's series is a mean-reverting (Ornstein-Uhlenbeck style)
process around a time-varying seasonal mean

    m(t) = a + b*t + alpha*sin(w1*t + th1) + beta*sin(w2*t + th2)
                   + gamma*sin(w3*t + th3)

advanced hourly with the Euler step

    T[i+1] = T[i] + m'(i) + kappa*(m(i) - T[i]) + sigma*z[i]

where z are standard normal draws from a per-(seed, station) stream and
m' is the analytic derivative of m evaluated at integer hours (dt = 1 h).

Station parameters are spatially coherent: locations are uniform points
in [0, 1]^2 and each location-dependent parameter is sampled around a
shared random linear projection of the coordinates, so nearby stations
get similar values.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import StationMeta, StationSeries, write_observations_csv, write_stations_csv

# fixed angular frequencies (rad/hour): yearly, slow multi-year, daily
HOURS_PER_YEAR = 24 * 365.25
OMEGA_YEARLY = 2.0 * math.pi / HOURS_PER_YEAR
OMEGA_SLOW = 0.7 * math.pi / HOURS_PER_YEAR
OMEGA_DAILY = 2.0 * math.pi / 24.0

# per-parameter sampling ranges: name -> (min, range)
PARAM_RANGES = {
    "a": (0.0, 20.0),
    "b": (0.0, 0.01),
    "theta1": (0.0, math.pi),
    "theta2": (0.0, math.pi),
    "theta3": (0.0, math.pi),
    "alpha": (0.0, 15.0),
    "beta": (0.0, 15.0),
    "gamma": (0.0, 15.0),
}

DEFAULT_KAPPA = 0.5
DEFAULT_SIGMA = 5.0
DEFAULT_PROJECTION_NOISE = 0.1

# synthetic series start at this UTC instant (absolute hour index)
SYNTH_START_HOUR = 438288  # 2020-01-01T00:00:00


@dataclass(frozen=True)
class OUParams:
    """Per-station process parameters."""

    kappa: float
    sigma: float
    a: float
    b: float
    omega1: float = OMEGA_YEARLY
    omega2: float = OMEGA_SLOW
    omega3: float = OMEGA_DAILY
    theta1: float = 0.0
    theta2: float = 0.0
    theta3: float = 0.0
    alpha: float = 0.0
    beta: float = 0.0
    gamma: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.kappa < 2.0:
            raise ValueError(f"kappa must be in (0, 2) for a stable step, got {self.kappa}")
        if self.sigma < 0.0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")


@dataclass(frozen=True)
class SyntheticWorld:
    """Locations, per-location parameters, and everything needed to regenerate."""

    seed: int
    locations: np.ndarray  # (n, 2) in [0, 1]^2
    params: tuple  # one OUParams per location
    projection_weights: dict  # param name -> (2,) weights shared across locations
    projection_noise: float = DEFAULT_PROJECTION_NOISE

    @property
    def n_stations(self) -> int:
        return len(self.params)

    def station_id(self, i: int) -> str:
        return f"S{i:02d}"


def seasonal_mean(p: OUParams, t) -> np.ndarray:
    """Time-varying mean at hour(s) t."""
    t = np.asarray(t, dtype=np.float64)
    return (
        p.a
        + p.b * t
        + p.alpha * np.sin(p.omega1 * t + p.theta1)
        + p.beta * np.sin(p.omega2 * t + p.theta2)
        + p.gamma * np.sin(p.omega3 * t + p.theta3)
    )


def seasonal_mean_rate(p: OUParams, t) -> np.ndarray:
    """Analytic time derivative of the seasonal mean at hour(s) t."""
    t = np.asarray(t, dtype=np.float64)
    return (
        p.b
        + p.alpha * p.omega1 * np.cos(p.omega1 * t + p.theta1)
        + p.beta * p.omega2 * np.cos(p.omega2 * t + p.theta2)
        + p.gamma * p.omega3 * np.cos(p.omega3 * t + p.theta3)
    )


def generate_series(world: SyntheticWorld, loc_index: int, n_hours: int, seed=None) -> np.ndarray:
    """Hourly series for one station; deterministic per (seed, location)."""
    if n_hours < 1:
        raise ValueError(f"n_hours must be >= 1, got {n_hours}")
    p = world.params[loc_index]
    seed = world.seed if seed is None else seed
    rng = np.random.default_rng([seed, loc_index])
    z = rng.standard_normal(n_hours - 1)

    t = np.arange(n_hours, dtype=np.float64)
    mean = seasonal_mean(p, t)
    rate = seasonal_mean_rate(p, t)

    out = np.empty(n_hours, dtype=np.float64)
    out[0] = mean[0]  # start on the seasonal mean: no burn-in transient
    for i in range(n_hours - 1):
        out[i + 1] = out[i] + rate[i] + p.kappa * (mean[i] - out[i]) + p.sigma * z[i]
    return out


def sample_location_param(
    locations: np.ndarray,
    projection_weights: np.ndarray,
    range_f: float,
    min_f: float,
    sigma_f: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Spatially coherent per-location values in [min_f, min_f + range_f].

    Draws around the shared linear projection of each location, clamps the
    pre-scale value to [0, 1] (so the range bound is hard), then scales.
    """
    if range_f <= 0.0:
        raise ValueError(f"range_f must be > 0, got {range_f}")
    mean = locations @ projection_weights
    raw = rng.normal(loc=mean, scale=sigma_f) if sigma_f > 0.0 else mean.copy()
    return min_f + np.clip(raw, 0.0, 1.0) * range_f


def sample_world(
    n_stations: int,
    seed: int,
    kappa: float = DEFAULT_KAPPA,
    sigma: float = DEFAULT_SIGMA,
    projection_noise: float = DEFAULT_PROJECTION_NOISE,
) -> SyntheticWorld:
    """Draw locations and per-location parameters (no series yet)."""
    if n_stations < 2:
        raise ValueError(f"need at least 2 stations, got {n_stations}")
    rng = np.random.default_rng([seed, 0])
    locations = rng.uniform(0.0, 1.0, size=(n_stations, 2))
    weights = {name: rng.uniform(0.0, 1.0, size=2) for name in PARAM_RANGES}
    sampled = {
        name: sample_location_param(locations, weights[name], rng=rng,
                                    range_f=rng_f, min_f=min_f, sigma_f=projection_noise)
        for name, (min_f, rng_f) in PARAM_RANGES.items()
    }
    params = tuple(
        OUParams(
            kappa=kappa,
            sigma=sigma,
            a=sampled["a"][i],
            b=sampled["b"][i],
            theta1=sampled["theta1"][i],
            theta2=sampled["theta2"][i],
            theta3=sampled["theta3"][i],
            alpha=sampled["alpha"][i],
            beta=sampled["beta"][i],
            gamma=sampled["gamma"][i],
        )
        for i in range(n_stations)
    )
    return SyntheticWorld(
        seed=seed,
        locations=locations,
        params=params,
        projection_weights=weights,
        projection_noise=projection_noise,
    )


def build_world(n_stations: int, n_hours: int, seed: int, **kwargs):
    """Sample a world and generate every station's series.

    Returns (world, [StationSeries]); synthetic station metadata maps the
    2-D coordinates onto (latitude, longitude) with elevation fixed at 0.
    """
    world = sample_world(n_stations, seed, **kwargs)
    stations = []
    for i in range(n_stations):
        values = generate_series(world, i, n_hours)
        meta = StationMeta(
            station_id=world.station_id(i),
            elevation=0.0,
            latitude=float(world.locations[i, 0]),
            longitude=float(world.locations[i, 1]),
        )
        stations.append(
            StationSeries(
                meta=meta,
                start_hour=SYNTH_START_HOUR,
                values=values.reshape(-1, 1),
                channels=["temperature"],
                target_channel="temperature",
            )
        )
    return world, stations


def world_to_dict(world: SyntheticWorld) -> dict:
    return {
        "schema_version": 1,
        "seed": world.seed,
        "projection_noise": world.projection_noise,
        "locations": world.locations.tolist(),
        "projection_weights": {k: v.tolist() for k, v in world.projection_weights.items()},
        "params": [asdict(p) for p in world.params],
        "station_ids": [world.station_id(i) for i in range(world.n_stations)],
    }


def world_from_dict(d: dict) -> SyntheticWorld:
    return SyntheticWorld(
        seed=d["seed"],
        locations=np.asarray(d["locations"], dtype=np.float64),
        params=tuple(OUParams(**p) for p in d["params"]),
        projection_weights={k: np.asarray(v) for k, v in d["projection_weights"].items()},
        projection_noise=d["projection_noise"],
    )


def write_world(world: SyntheticWorld, stations, out_dir, extra_meta: dict | None = None):
    """Write observations.csv, stations.csv, and the world.json sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_observations_csv(stations, out_dir / "observations.csv", extra_meta=extra_meta)
    write_stations_csv([s.meta for s in stations], out_dir / "stations.csv", extra_meta=extra_meta)
    doc = world_to_dict(world)
    if extra_meta:
        doc.update(extra_meta)
    with open(out_dir / "world.json", "w") as f:
        json.dump(doc, f, indent=1)
    return out_dir / "observations.csv", out_dir / "stations.csv", out_dir / "world.json"


def load_world_json(path) -> SyntheticWorld:
    with open(path) as f:
        return world_from_dict(json.load(f))
