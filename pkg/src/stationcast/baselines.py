"""Classical forecasters: last value, persistence, moving average, and an
AIC-selected autoregression.

All four are deterministic. The AR model supports the zero-shot recipe
of fitting on the station geographically nearest the target and applying
the coefficients to the target's own window.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


class FitError(RuntimeError):
    """No autoregression candidate could be fitted."""


def last_value(x: np.ndarray, L_y: int) -> np.ndarray:
    """Repeat the final observed value across the whole horizon."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("window is empty")
    return np.full(L_y, x[-1])


def persistence(x: np.ndarray, L_y: int, F: int = 24) -> np.ndarray:
    """Replay the F values that preceded the anchor; with F == L_y == 24
    the forecast is yesterday's 24 hours."""
    x = np.asarray(x, dtype=np.float64)
    if F > x.size:
        raise ValueError(f"F={F} exceeds window length {x.size}")
    if F < L_y:
        raise ValueError(f"F={F} shorter than horizon {L_y}")
    return x[x.size - F : x.size - F + L_y].copy()


def moving_average(x: np.ndarray, L_y: int, k: int = 24) -> np.ndarray:
    """Constant forecast at the mean of the last k values."""
    x = np.asarray(x, dtype=np.float64)
    if k == 0:
        raise ValueError("k must be >= 1")
    if k > x.size:
        raise ValueError(f"k={k} exceeds window length {x.size}")
    return np.full(L_y, x[-k:].mean())


# ---------------------------------------------------------------------------
# autoregression


@dataclass(frozen=True)
class ARModel:
    lags: tuple  # lag offsets, 1..p
    coefficients: np.ndarray  # one per lag
    intercept: float
    trend_coefficient: Optional[float]  # per-hour slope, or None
    trend_origin: int  # hour index the trend is centered on
    aic: float

    def __post_init__(self):
        if len(self.coefficients) != len(self.lags):
            raise ValueError("one coefficient per lag required")
        if not np.isfinite(self.aic):
            raise ValueError("AIC must be finite")

    def to_json(self) -> str:
        return json.dumps(
            {
                "lags": list(self.lags),
                "coefficients": [float(c) for c in self.coefficients],
                "intercept": self.intercept,
                "trend_coefficient": self.trend_coefficient,
                "trend_origin": self.trend_origin,
                "aic": self.aic,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "ARModel":
        d = json.loads(text)
        return cls(
            lags=tuple(d["lags"]),
            coefficients=np.asarray(d["coefficients"], dtype=np.float64),
            intercept=d["intercept"],
            trend_coefficient=d["trend_coefficient"],
            trend_origin=d["trend_origin"],
            aic=d["aic"],
        )


def _ols_candidate(series, hours, p, with_trend):
    """Least-squares fit of an AR(p) (optionally with a linear trend).

    Returns (coefficients, intercept, trend, aic) or None when the design
    matrix is rank deficient.
    """
    n = series.size - p
    y = series[p:]
    cols = [np.ones(n)]
    if with_trend:
        cols.append(hours[p:] - hours[0])
    for lag in range(1, p + 1):
        cols.append(series[p - lag : series.size - lag])
    X = np.stack(cols, axis=1)
    beta, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
    if rank < X.shape[1]:
        return None
    rss = float(np.sum((y - X @ beta) ** 2))
    df = X.shape[1]
    aic = n * np.log(max(rss, 1e-300) / n) + 2.0 * (df + 1)
    trend = float(beta[1]) if with_trend else None
    coeffs = beta[2:] if with_trend else beta[1:]
    return np.asarray(coeffs), float(beta[0]), trend, float(aic)


def fit_ar(
    series: np.ndarray,
    max_lag: int = 48,
    try_trend: bool = True,
    start_hour: int = 0,
) -> ARModel:
    """Grid search over lag counts (and trend on/off), keeping the AIC minimum.

    Candidates with singular normal equations are dropped; if every candidate
    is singular, a FitError is raised.
    """
    series = np.asarray(series, dtype=np.float64)
    if series.size <= 2 * max_lag:
        raise ValueError(
            f"series length {series.size} too short for max_lag {max_lag}"
        )
    hours = start_hour + np.arange(series.size, dtype=np.float64)
    best = None
    for p in range(1, max_lag + 1):
        for with_trend in ((False, True) if try_trend else (False,)):
            fit = _ols_candidate(series, hours, p, with_trend)
            if fit is None:
                continue
            coeffs, intercept, trend, aic = fit
            if best is None or aic < best.aic:
                best = ARModel(
                    lags=tuple(range(1, p + 1)),
                    coefficients=coeffs,
                    intercept=intercept,
                    trend_coefficient=trend,
                    trend_origin=start_hour,
                    aic=aic,
                )
    if best is None:
        raise FitError("all autoregression candidates were singular")
    return best


def ar_candidate_aics(series, max_lag=48, try_trend=True, start_hour=0):
    """AIC of every candidate in fit_ar's grid (for exhaustive checks)."""
    series = np.asarray(series, dtype=np.float64)
    hours = start_hour + np.arange(series.size, dtype=np.float64)
    out = {}
    for p in range(1, max_lag + 1):
        for with_trend in ((False, True) if try_trend else (False,)):
            fit = _ols_candidate(series, hours, p, with_trend)
            if fit is not None:
                out[(p, with_trend)] = fit[3]
    return out


def forecast_ar(model: ARModel, x: np.ndarray, L_y: int, end_hour: int = 0) -> np.ndarray:
    """Recursive multi-step forecast, feeding predictions back as inputs.

    ``end_hour`` is the absolute hour of the window's last value so the
    trend term lines up in time when coefficients come from another station.
    """
    x = np.asarray(x, dtype=np.float64)
    max_lag = max(model.lags)
    if x.size < max_lag:
        raise ValueError(f"window length {x.size} shorter than max lag {max_lag}")
    buf = list(x[-max_lag:])
    out = np.empty(L_y)
    for h in range(1, L_y + 1):
        val = model.intercept
        if model.trend_coefficient is not None:
            val += model.trend_coefficient * (end_hour + h - model.trend_origin)
        for lag, c in zip(model.lags, model.coefficients):
            val += c * buf[-lag]
        out[h - 1] = val
        buf.append(val)
    return out


def nearest_station_id(metas, target_id: str, normalizer) -> str:
    """Source station closest to the target in normalized (lat, lon, elev)."""
    target = next(m for m in metas if m.station_id == target_id)
    tloc = normalizer.normalize_location(target.location())
    best, best_d = None, np.inf
    for m in metas:
        if m.station_id == target_id:
            continue
        d = float(np.linalg.norm(normalizer.normalize_location(m.location()) - tloc))
        if d < best_d:
            best, best_d = m.station_id, d
    if best is None:
        raise ValueError("no candidate stations besides the target")
    return best
