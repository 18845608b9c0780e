"""Station observations: ingestion, windowing, zero-shot splits, normalization.

File formats (comment lines starting with '#' are skipped on read):
  stations.csv      header: station,elevation,latitude,longitude
  observations.csv  header: timestamp,station_id,<feature columns>
                    ISO-8601 hourly timestamps, UTC (naive, no offset)

Time is handled as absolute integer hours since 1970-01-01T00:00 UTC, so
hour-of-day and day-of-year are cheap to derive and every module shares
one clock.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

MAX_INTERP_GAP_HOURS = 3
STD_FLOOR = 1e-8


class DataFormatError(ValueError):
    """A data or metadata file violates the expected schema."""


# ---------------------------------------------------------------------------
# time helpers


def parse_timestamp(text: str, row: Optional[int] = None) -> int:
    """ISO-8601 UTC timestamp -> absolute hour index; must be on the hour."""
    where = f" (row {row})" if row is not None else ""
    try:
        dt = datetime.fromisoformat(text.strip())
    except ValueError as exc:
        raise DataFormatError(f"unparseable timestamp {text!r}{where}") from exc
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    seconds = dt.timestamp()
    if dt.minute or dt.second or dt.microsecond:
        raise DataFormatError(f"timestamp {text!r} is not on a whole hour{where}")
    return int(seconds // 3600)


def format_timestamp(hour: int) -> str:
    dt = datetime.fromtimestamp(hour * 3600, tz=timezone.utc)
    return dt.strftime("%Y-%m-%dT%H:%M:%S")


def hour_of_day(hours: np.ndarray) -> np.ndarray:
    return np.asarray(hours) % 24


def day_of_year(hours: np.ndarray) -> np.ndarray:
    """0-based day of year for absolute hour indices (vectorized)."""
    d = np.datetime64(0, "h") + np.asarray(hours, dtype=np.int64).astype("timedelta64[h]")
    days = d.astype("datetime64[D]")
    years = d.astype("datetime64[Y]")
    return (days - years.astype("datetime64[D]")).astype(np.int64)


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class StationMeta:
    station_id: str
    elevation: float  # feet
    latitude: float  # degrees
    longitude: float  # degrees

    def __post_init__(self):
        if not -90.0 <= self.latitude <= 90.0:
            raise ValueError(f"latitude out of range: {self.latitude}")
        if not -180.0 <= self.longitude <= 180.0:
            raise ValueError(f"longitude out of range: {self.longitude}")

    def location(self) -> np.ndarray:
        """Geographic descriptor (lat, lon, elevation)."""
        return np.array([self.latitude, self.longitude, self.elevation], dtype=np.float64)


@dataclass
class StationSeries:
    """Aligned hourly multivariate observations on a gap-free hour grid.

    Rows flagged invalid (dropped days around large gaps) stay on the grid
    but never enter a window.
    """

    meta: StationMeta
    start_hour: int
    values: np.ndarray  # (T, n) float64
    channels: list
    target_channel: str
    valid: Optional[np.ndarray] = None  # (T,) bool; None means all valid
    n_interpolated: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.channels):
            raise ValueError(
                f"values shape {self.values.shape} does not match {len(self.channels)} channels"
            )
        if self.target_channel not in self.channels:
            raise ValueError(f"target channel {self.target_channel!r} not in {self.channels}")
        if self.valid is None:
            self.valid = np.ones(len(self.values), dtype=bool)

    def __len__(self) -> int:
        return len(self.values)

    @property
    def end_hour(self) -> int:
        """One past the last hour on the grid."""
        return self.start_hour + len(self.values)

    @property
    def hours(self) -> np.ndarray:
        return self.start_hour + np.arange(len(self.values))

    @property
    def target_index(self) -> int:
        return self.channels.index(self.target_channel)

    def target_values(self) -> np.ndarray:
        return self.values[:, self.target_index]


@dataclass(frozen=True)
class WindowPair:
    """One sample: inputs over hours (t-L_x, t], target over (t, t+L_y]."""

    station_id: str
    t: int  # absolute hour of the last input row
    x: np.ndarray  # (L_x, n)
    y: np.ndarray  # (L_y,)


@dataclass(frozen=True)
class ZeroShotSplit:
    """Training pool from source stations; test windows from the target only."""

    train: list
    val: list
    test: list
    target_id: str
    train_station_ids: list
    test_span: tuple  # [start, end) absolute hours
    channels: list
    target_channel: str
    metas: dict  # station_id -> StationMeta

    def assert_no_leakage(self) -> None:
        for w in self.train:
            if w.station_id == self.target_id:
                raise AssertionError(f"target window (t={w.t}) leaked into the training pool")
        for w in self.val:
            if w.station_id == self.target_id:
                raise AssertionError(f"target window (t={w.t}) leaked into the validation pool")


# ---------------------------------------------------------------------------
# loading


def _read_rows(path) -> list:
    with open(path, newline="") as f:
        return [row for row in csv.reader(f) if row and not row[0].lstrip().startswith("#")]


def load_station_metas(meta_path) -> list:
    """Parse stations.csv (or world.json) into StationMeta records."""
    meta_path = Path(meta_path)
    if meta_path.suffix == ".json":
        from .synthetic import load_world_json  # local import: avoid cycle at module load

        world = load_world_json(meta_path)
        return [
            StationMeta(world.station_id(i), 0.0,
                        float(world.locations[i, 0]), float(world.locations[i, 1]))
            for i in range(world.n_stations)
        ]
    rows = _read_rows(meta_path)
    if not rows:
        return []
    header = [h.strip() for h in rows[0]]
    if header[:4] != ["station", "elevation", "latitude", "longitude"]:
        raise DataFormatError(f"unexpected stations.csv header: {header}")
    metas = []
    for i, row in enumerate(rows[1:], start=2):
        try:
            metas.append(StationMeta(row[0], float(row[1]), float(row[2]), float(row[3])))
        except (ValueError, IndexError) as exc:
            raise DataFormatError(f"bad station row {i}: {row}") from exc
    return metas


def load_stations(data_path, meta_path, target_channel: Optional[str] = None) -> list:
    """Read observations + metadata into one StationSeries per station.

    Missing hours inside a station's span are linearly interpolated when the
    gap is at most MAX_INTERP_GAP_HOURS; longer gaps invalidate every UTC day
    they touch, and windows never span those rows.
    """
    metas = {m.station_id: m for m in load_station_metas(meta_path)}
    rows = _read_rows(data_path)
    if not rows:
        return []
    header = [h.strip() for h in rows[0]]
    if len(header) < 3 or header[0] != "timestamp" or header[1] != "station_id":
        raise DataFormatError(f"unexpected observations.csv header: {header}")
    channels = header[2:]
    if target_channel is None:
        target_channel = channels[0]
    if target_channel not in channels:
        raise DataFormatError(f"target channel {target_channel!r} not in columns {channels}")

    per_station: dict = {}
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DataFormatError(f"row {i} has {len(row)} fields, expected {len(header)}")
        hour = parse_timestamp(row[0], row=i)
        sid = row[1].strip()
        if sid not in metas:
            raise DataFormatError(f"unknown station {sid!r} in data file (row {i})")
        vals = []
        for col, cell in zip(channels, row[2:]):
            cell = cell.strip()
            if cell == "":
                vals.append(np.nan)
                continue
            try:
                vals.append(float(cell))
            except ValueError as exc:
                raise DataFormatError(
                    f"unparseable float {cell!r} in column {col!r} (row {i})"
                ) from exc
        per_station.setdefault(sid, []).append((hour, vals))

    out = []
    for sid in metas:
        if sid not in per_station:
            continue
        entries = sorted(per_station[sid])
        hours = np.array([h for h, _ in entries], dtype=np.int64)
        if len(np.unique(hours)) != len(hours):
            raise DataFormatError(f"duplicate timestamps for station {sid!r}")
        out.append(_build_series(metas[sid], hours, entries, channels, target_channel))
    return out


def _build_series(meta, hours, entries, channels, target_channel) -> StationSeries:
    """Place rows on a gap-free grid, interpolate small gaps, cut around big ones."""
    start, end = int(hours[0]), int(hours[-1]) + 1
    T = end - start
    grid = np.full((T, len(channels)), np.nan)
    for hour, vals in entries:
        grid[hour - start] = vals

    valid = np.ones(T, dtype=bool)
    missing = np.isnan(grid).any(axis=1)
    i = 0
    while i < T:
        if not missing[i]:
            i += 1
            continue
        j = i
        while j < T and missing[j]:
            j += 1
        gap = j - i
        if gap <= MAX_INTERP_GAP_HOURS and i > 0 and j < T:
            for c in range(len(channels)):
                grid[i:j, c] = np.interp(
                    np.arange(i, j), [i - 1, j], [grid[i - 1, c], grid[j, c]]
                )
        else:
            # drop every UTC day the gap touches
            day_lo = (start + i) // 24 * 24
            day_hi = ((start + j - 1) // 24 + 1) * 24
            lo = max(day_lo - start, 0)
            hi = min(day_hi - start, T)
            valid[lo:hi] = False
        i = j

    # count interpolated rows (rows that were missing but are now filled)
    filled = missing & ~np.isnan(grid).any(axis=1)
    n_interp = int(np.count_nonzero(filled & valid))
    valid &= ~np.isnan(grid).any(axis=1)
    grid[~valid] = 0.0  # masked rows never enter a window
    return StationSeries(
        meta=meta,
        start_hour=start,
        values=grid,
        channels=list(channels),
        target_channel=target_channel,
        valid=valid,
        n_interpolated=n_interp,
    )


# ---------------------------------------------------------------------------
# writing (shared by the synthetic generator and tests)


def _write_csv(path, header_comment, header, rows):
    with open(path, "w", newline="") as f:
        if header_comment:
            f.write(header_comment + "\n")
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def _meta_comment(extra_meta: Optional[dict]) -> str:
    if not extra_meta:
        return ""
    parts = " ".join(f"{k}={v}" for k, v in sorted(extra_meta.items()))
    return f"# {parts}"


def write_stations_csv(metas: Sequence[StationMeta], path, extra_meta=None):
    rows = [
        (m.station_id, repr(float(m.elevation)), repr(float(m.latitude)),
         repr(float(m.longitude)))
        for m in metas
    ]
    _write_csv(path, _meta_comment(extra_meta),
               ["station", "elevation", "latitude", "longitude"], rows)


def write_observations_csv(stations: Sequence[StationSeries], path, extra_meta=None):
    if not stations:
        raise ValueError("no stations to write")
    channels = stations[0].channels
    rows = []
    for s in stations:
        if s.channels != channels:
            raise ValueError("stations must share one channel list")
        for i in range(len(s)):
            if not s.valid[i]:
                continue
            rows.append(
                (format_timestamp(s.start_hour + i), s.meta.station_id,
                 *[repr(float(v)) for v in s.values[i]])
            )
    rows.sort()
    _write_csv(path, _meta_comment(extra_meta), ["timestamp", "station_id", *channels], rows)


# ---------------------------------------------------------------------------
# windowing and splits


def make_windows(series: StationSeries, L_x: int, L_y: int, stride: int = 1) -> list:
    """All valid windows; anchors advance by stride from the first full window."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    T = len(series)
    if T < L_x + L_y:
        return []
    tgt = series.target_index
    windows = []
    valid = series.valid
    for a in range(L_x - 1, T - L_y, stride):
        lo, hi = a - L_x + 1, a + L_y + 1
        if not valid[lo:hi].all():
            continue
        windows.append(
            WindowPair(
                station_id=series.meta.station_id,
                t=series.start_hour + a,
                x=series.values[lo : a + 1].copy(),
                y=series.values[a + 1 : hi, tgt].copy(),
            )
        )
    return windows


def window_at(series: StationSeries, t: int, L_x: int, L_y: int) -> Optional[WindowPair]:
    """The window anchored at absolute hour t, or None if out of range/invalid."""
    a = t - series.start_hour
    lo, hi = a - L_x + 1, a + L_y + 1
    if lo < 0 or hi > len(series) or not series.valid[lo:hi].all():
        return None
    tgt = series.target_index
    return WindowPair(series.meta.station_id, t,
                      series.values[lo : a + 1].copy(),
                      series.values[a + 1 : hi, tgt].copy())


def last_hours_span(stations: Sequence[StationSeries], target_id: str, hours: int) -> tuple:
    """The final `hours` hours of the target station's grid as a [start, end) span."""
    for s in stations:
        if s.meta.station_id == target_id:
            return (s.end_hour - hours, s.end_hour)
    raise KeyError(f"target station {target_id!r} not found")


def _split(
    stations,
    target_id,
    val_fraction,
    test_span,
    L_x,
    L_y,
    train_stride,
    eval_stride,
    include_target_in_train,
):
    by_id = {s.meta.station_id: s for s in stations}
    if target_id not in by_id:
        raise KeyError(
            f"target station {target_id!r} not found; available: {sorted(by_id)}"
        )
    if isinstance(test_span, int):
        test_span = last_hours_span(stations, target_id, test_span)
    span_start, span_end = test_span
    target = by_id[target_id]
    if span_start < target.start_hour or span_end > target.end_hour:
        raise ValueError(
            f"test span {test_span} outside target data range "
            f"[{target.start_hour}, {target.end_hour})"
        )

    train_ids = [
        s.meta.station_id
        for s in stations
        if include_target_in_train or s.meta.station_id != target_id
    ]
    history = []
    for sid in train_ids:
        for w in make_windows(by_id[sid], L_x, L_y, stride=train_stride):
            if w.t + L_y < span_start:  # whole window strictly before the test span
                history.append(w)

    history.sort(key=lambda w: (w.t, w.station_id))
    n_val = int(round(val_fraction * len(history)))
    split_at = len(history) - n_val
    train, val = history[:split_at], history[split_at:]

    test = [
        w
        for w in make_windows(target, L_x, L_y, stride=eval_stride)
        if (w.t - L_x + 1) >= span_start and (w.t + L_y) <= span_end
    ]

    split = ZeroShotSplit(
        train=train,
        val=val,
        test=test,
        target_id=target_id,
        train_station_ids=train_ids,
        test_span=(span_start, span_end),
        channels=list(target.channels),
        target_channel=target.target_channel,
        metas={s.meta.station_id: s.meta for s in stations},
    )
    if not include_target_in_train:
        split.assert_no_leakage()
    return split


def split_zero_shot(
    stations: Sequence[StationSeries],
    target_id: str,
    val_fraction: float = 0.1,
    test_span=720,
    *,
    L_x: int = 48,
    L_y: int = 24,
    train_stride: int = 1,
    eval_stride: int = 1,
) -> ZeroShotSplit:
    """History from every station except the target; the target is test-only."""
    return _split(stations, target_id, val_fraction, test_span, L_x, L_y,
                  train_stride, eval_stride, include_target_in_train=False)


def split_full_data(
    stations: Sequence[StationSeries],
    target_id: str,
    val_fraction: float = 0.1,
    test_span=720,
    *,
    L_x: int = 48,
    L_y: int = 24,
    train_stride: int = 1,
    eval_stride: int = 1,
) -> ZeroShotSplit:
    """Conventional scenario: the target's own history joins the training pool."""
    return _split(stations, target_id, val_fraction, test_span, L_x, L_y,
                  train_stride, eval_stride, include_target_in_train=True)


# ---------------------------------------------------------------------------
# normalization


@dataclass(frozen=True)
class Normalizer:
    """z-score statistics fitted on source-station data only."""

    channels: list
    target_channel: str
    mean: np.ndarray  # (n,)
    std: np.ndarray  # (n,)
    loc_mean: np.ndarray  # (3,)
    loc_std: np.ndarray  # (3,)

    @property
    def target_index(self) -> int:
        return self.channels.index(self.target_channel)

    def normalize_x(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def normalize_y(self, y: np.ndarray) -> np.ndarray:
        i = self.target_index
        return (y - self.mean[i]) / self.std[i]

    def denormalize_y(self, y: np.ndarray) -> np.ndarray:
        i = self.target_index
        return y * self.std[i] + self.mean[i]

    def normalize_location(self, loc: np.ndarray) -> np.ndarray:
        return (np.asarray(loc, dtype=np.float64) - self.loc_mean) / self.loc_std

    def to_dict(self) -> dict:
        return {
            "channels": list(self.channels),
            "target_channel": self.target_channel,
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "loc_mean": self.loc_mean.tolist(),
            "loc_std": self.loc_std.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(
            channels=list(d["channels"]),
            target_channel=d["target_channel"],
            mean=np.asarray(d["mean"], dtype=np.float64),
            std=np.asarray(d["std"], dtype=np.float64),
            loc_mean=np.asarray(d["loc_mean"], dtype=np.float64),
            loc_std=np.asarray(d["loc_std"], dtype=np.float64),
        )


def fit_normalizer(
    windows: Sequence[WindowPair],
    metas: Sequence[StationMeta],
    channels: Sequence[str],
    target_channel: str,
) -> Normalizer:
    """Channel stats from the given (training) windows; location stats from
    the given (training-station) metas. The target station contributes to
    neither, which keeps the zero-shot discipline checkable."""
    if not windows:
        raise ValueError("cannot fit a normalizer on an empty window set")
    stacked = np.concatenate([w.x for w in windows], axis=0)
    mean = stacked.mean(axis=0)
    std = np.maximum(stacked.std(axis=0), STD_FLOOR)
    locs = np.stack([m.location() for m in metas])
    loc_mean = locs.mean(axis=0)
    loc_std = np.maximum(locs.std(axis=0), STD_FLOOR)
    return Normalizer(
        channels=list(channels),
        target_channel=target_channel,
        mean=mean,
        std=std,
        loc_mean=loc_mean,
        loc_std=loc_std,
    )
