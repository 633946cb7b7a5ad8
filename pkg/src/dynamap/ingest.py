"""ATC-style pedestrian tracking logs -> MotionSequences and prediction windows.

Input rows are comma separated::

    time [s], person_id, x [mm], y [mm], z [mm], speed [mm/s], motion_angle [rad], facing_angle [rad]
"""

from __future__ import annotations

import csv
import datetime as dt
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .core import MotionSequence, MotionSet, wrap_angle
from .evaluation import Trajectory

log = logging.getLogger(__name__)

COLUMNS = ("time", "person_id", "x", "y", "z", "speed", "motion_angle", "facing_angle")
MM = 1e-3
MAX_MALFORMED_FRACTION = 0.01


class IngestError(ValueError):
    pass


@dataclass(frozen=True)
class TrackRow:
    time: float
    person_id: int
    x: float
    y: float
    z: float
    speed: float
    motion_angle: float
    facing_angle: float


@dataclass
class TrackTable:
    """Columnar store of parsed rows (units as in the file: s, mm, mm/s, rad)."""

    time: np.ndarray
    person_id: np.ndarray
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    speed: np.ndarray
    motion_angle: np.ndarray
    facing_angle: np.ndarray
    n_malformed: int = 0

    @classmethod
    def empty(cls) -> "TrackTable":
        return cls.from_rows([])

    @classmethod
    def from_rows(cls, rows: Sequence[TrackRow], n_malformed: int = 0) -> "TrackTable":
        cols = {c: np.array([getattr(r, c) for r in rows], dtype=np.int64 if c == "person_id" else float)
                for c in COLUMNS}
        return cls(**cols, n_malformed=n_malformed)

    def __len__(self) -> int:
        return len(self.time)

    def rows(self) -> Iterator[TrackRow]:
        for i in range(len(self)):
            yield TrackRow(*(getattr(self, c)[i].item() for c in COLUMNS))

    def take(self, idx) -> "TrackTable":
        return TrackTable(**{c: getattr(self, c)[idx] for c in COLUMNS}, n_malformed=self.n_malformed)


def _parse_record(rec: list[str]) -> TrackRow | None:
    if len(rec) != len(COLUMNS):
        return None
    try:
        vals = [float(v) for v in rec]
    except ValueError:
        return None
    if not all(math.isfinite(v) for v in vals) or vals[5] < 0 or vals[1] != int(vals[1]):
        return None
    return TrackRow(vals[0], int(vals[1]), *vals[2:])


def parse_rows(path) -> TrackTable:
    """Parse a tracking log; malformed rows are skipped and counted.

    More than 1% malformed rows is treated as a wrong file format.
    """
    rows: list[TrackRow] = []
    bad = 0
    with Path(path).open(newline="") as fh:
        for rec in csv.reader(fh):
            if not rec or not "".join(rec).strip():
                continue
            row = _parse_record(rec)
            if row is None:
                bad += 1
            else:
                rows.append(row)
    total = len(rows) + bad
    if total and bad / total > MAX_MALFORMED_FRACTION:
        raise IngestError(f"{path}: {bad} of {total} rows malformed")
    if bad:
        log.warning("%s: skipped %d malformed rows", path, bad)
    return TrackTable.from_rows(rows, bad)


def write_rows(rows: Sequence[TrackRow], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        for r in rows:
            w.writerow([repr(float(r.time)), int(r.person_id),
                        *(repr(float(getattr(r, c))) for c in COLUMNS[2:])])


@dataclass
class BinningConfig:
    bin_seconds: float = 1800.0
    bins_per_day: int = 20
    day_start: str = "09:40"
    # local clock offset from UTC used to find calendar days (Osaka: +9 h)
    utc_offset_hours: float = 9.0
    max_samples_per_bin: int | None = None
    seed: int = 0
    bbox: tuple[float, float, float, float] | None = None  # xmin, xmax, ymin, ymax in metres

    def validate(self) -> "BinningConfig":
        if self.bin_seconds <= 0 or self.bins_per_day < 1:
            raise ValueError("bin_seconds must be > 0 and bins_per_day >= 1")
        if self.max_samples_per_bin is not None and self.max_samples_per_bin < 1:
            raise ValueError("max_samples_per_bin must be >= 1")
        self.start_offset  # parse check
        return self

    @property
    def start_offset(self) -> float:
        h, m = (int(v) for v in self.day_start.split(":"))
        return 3600.0 * h + 60.0 * m


def local_day(t, utc_offset_hours: float = 9.0) -> np.ndarray:
    """Integer day index (days since epoch in local time) for epoch seconds."""
    return np.floor((np.asarray(t, dtype=float) + 3600.0 * utc_offset_hours) / 86400.0).astype(np.int64)


def day_start_epoch(day: int, cfg: BinningConfig) -> float:
    return day * 86400.0 - 3600.0 * cfg.utc_offset_hours + cfg.start_offset


def day_date(day: int) -> dt.date:
    return dt.date(1970, 1, 1) + dt.timedelta(days=int(day))


def crop(table: TrackTable, bbox) -> TrackTable:
    """Keep rows inside an axis-aligned box given in metres."""
    xmin, xmax, ymin, ymax = bbox
    x, y = table.x * MM, table.y * MM
    return table.take((x >= xmin) & (x <= xmax) & (y >= ymin) & (y <= ymax))


def bin_index(table: TrackTable, cfg: BinningConfig) -> np.ndarray:
    days = np.unique(local_day(table.time, cfg.utc_offset_hours))
    if len(days) > 1:
        raise IngestError(f"rows span {len(days)} calendar days; bin one day at a time")
    start = day_start_epoch(int(days[0]), cfg)
    return np.floor((table.time - start) / cfg.bin_seconds).astype(np.int64)


def to_motion_sequence(table: TrackTable, cfg: BinningConfig | None = None) -> MotionSequence:
    """Bin one day of rows into ``bins_per_day`` steps of SI-unit motion samples."""
    cfg = (cfg or BinningConfig()).validate()
    if len(table) == 0:
        raise IngestError("no rows to bin")
    if cfg.bbox is not None:
        table = crop(table, cfg.bbox)
        if len(table) == 0:
            raise IngestError("no rows inside the bounding box")
    b = bin_index(table, cfg)
    rng = np.random.default_rng(cfg.seed)
    steps = []
    for k in range(cfg.bins_per_day):
        idx = np.flatnonzero(b == k)
        if cfg.max_samples_per_bin is not None and len(idx) > cfg.max_samples_per_bin:
            idx = np.sort(rng.choice(idx, size=cfg.max_samples_per_bin, replace=False))
        data = np.column_stack([table.x[idx] * MM, table.y[idx] * MM,
                                wrap_angle(table.motion_angle[idx]), table.speed[idx] * MM])
        steps.append(MotionSet(k, data))
    if all(len(s) == 0 for s in steps):
        raise IngestError("every bin is empty (rows outside the daily window?)")
    return MotionSequence(steps, cfg.bin_seconds)


def split_by_day(table: TrackTable, utc_offset_hours: float = 9.0) -> dict[dt.date, TrackTable]:
    days = local_day(table.time, utc_offset_hours)
    return {day_date(d): table.take(days == d) for d in np.unique(days)}


@dataclass
class DaySplit:
    train: list = field(default_factory=list)
    validation: list = field(default_factory=list)
    test: list = field(default_factory=list)


SUNDAY, WEDNESDAY = 6, 2


def split_days(days: Sequence[dt.date] | Mapping[dt.date, object], n_train: int = 20,
               n_validation: int = 5) -> DaySplit:
    """Deterministic split by sorted date.

    The test set is the latest Sunday plus the latest Wednesday; the remaining
    days fill training then validation in date order.  With fewer than
    ``n_train + n_validation + 2`` days the remainder is split 80/20 instead.
    """
    ordered = sorted(set(days))
    test = []
    for weekday in (SUNDAY, WEDNESDAY):
        cands = [d for d in ordered if d.weekday() == weekday and d not in test]
        if cands:
            test.append(cands[-1])
    rest = [d for d in ordered if d not in test]
    if len(ordered) >= n_train + n_validation + 2 and len(test) == 2:
        return DaySplit(rest[:n_train], rest[n_train:n_train + n_validation], sorted(test))
    warnings.warn(f"only {len(ordered)} days ({len(test)} test weekdays found); using a proportional split",
                  stacklevel=2)
    if len(test) < 2 and len(rest) > 2:
        extra = rest[-(2 - len(test)):]
        test += extra
        rest = rest[:-len(extra)]
    n_tr = max(1, round(0.8 * len(rest))) if rest else 0
    return DaySplit(rest[:n_tr], rest[n_tr:], sorted(test))


# -- 0.1 s prediction windows -----------------------------------------------------


@dataclass
class Track:
    person_id: int
    step: np.ndarray  # integer grid index (time / dt)
    xy: np.ndarray  # (L, 2) metres
    vxy: np.ndarray  # (L, 2) metres / second


def resample_tracks(table: TrackTable, dt_s: float = 0.1, max_gap: float = 0.5) -> list[Track]:
    """Per-person linear interpolation onto the global ``dt_s`` grid.

    Consecutive detections further apart than ``max_gap`` seconds start a new track.
    """
    tracks = []
    vx = table.speed * MM * np.cos(table.motion_angle)
    vy = table.speed * MM * np.sin(table.motion_angle)
    for pid in np.unique(table.person_id):
        sel = np.flatnonzero(table.person_id == pid)
        sel = sel[np.argsort(table.time[sel], kind="stable")]
        t = table.time[sel]
        breaks = np.flatnonzero(np.diff(t) > max_gap) + 1
        for seg in np.split(np.arange(len(sel)), breaks):
            ts = t[seg]
            grid = np.arange(math.ceil(ts[0] / dt_s - 1e-9), math.floor(ts[-1] / dt_s + 1e-9) + 1)
            if len(grid) == 0:
                continue
            gt = grid * dt_s
            rows = sel[seg]
            xy = np.column_stack([np.interp(gt, ts, table.x[rows] * MM), np.interp(gt, ts, table.y[rows] * MM)])
            vxy = np.column_stack([np.interp(gt, ts, vx[rows]), np.interp(gt, ts, vy[rows])])
            tracks.append(Track(int(pid), grid.astype(np.int64), xy, vxy))
    return tracks


@dataclass
class PredictionWindow:
    history: MotionSequence
    person_ids: list[int]
    starts: np.ndarray  # (P, 2) position at the last history step
    truth: list[Trajectory]


def prediction_windows(table: TrackTable, window: int = 50, horizon: int = 48, dt_s: float = 0.1,
                       max_gap: float = 0.5, stride: int = 10, min_persons: int = 1) -> list[PredictionWindow]:
    """Sliding windows of ``window`` history steps followed by ``horizon`` ground-truth steps.

    The history holds every person seen at each grid step; the truth holds the
    future positions of each person whose track covers the whole window plus
    horizon.
    """
    tracks = resample_tracks(table, dt_s, max_gap)
    if not tracks:
        return []
    lo = min(int(tr.step[0]) for tr in tracks)
    hi = max(int(tr.step[-1]) for tr in tracks)
    span = hi - lo + 1
    # per grid step: rows of (x, y, vx, vy)
    per_step: list[list[np.ndarray]] = [[] for _ in range(span)]
    for tr in tracks:
        for k, s in enumerate(tr.step - lo):
            per_step[s].append(np.concatenate([tr.xy[k], tr.vxy[k]]))
    out = []
    for s0 in range(0, span - window - horizon + 1, stride):
        last = s0 + window - 1
        pids, starts, truth = [], [], []
        for tr in tracks:
            a = s0 + lo
            if tr.step[0] <= a and tr.step[-1] >= last + horizon + lo:
                k = int(last + lo - tr.step[0])
                pids.append(tr.person_id)
                starts.append(tr.xy[k])
                truth.append(Trajectory(tr.xy[k + 1:k + 1 + horizon], dt_s))
        if len(pids) < min_persons:
            continue
        steps = []
        for i, s in enumerate(range(s0, s0 + window)):
            rows = np.array(per_step[s]).reshape(-1, 4)
            speed = np.hypot(rows[:, 2], rows[:, 3])
            psi = np.where(speed > 0, np.arctan2(rows[:, 3], rows[:, 2]), 0.0)
            steps.append(MotionSet(i, np.column_stack([rows[:, :2], psi, speed])))
        out.append(PredictionWindow(MotionSequence(steps, dt_s), pids, np.array(starts), truth))
    return out
