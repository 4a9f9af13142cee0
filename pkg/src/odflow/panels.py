"""Time-indexed flow panels: O-D matrices and link counts over days and intervals.

O-D flows are indexed by departure interval; link counts by the interval in
which a vehicle passes the link's entrance sensor. A panel's first
``warmup_days`` days carry no valid historical companion and are excluded
from supervised use.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .topology import od_pairs


@dataclass
class FlowPanel:
    """O-D and link flows over ``days x intervals_per_day``.

    ``od`` has shape (days, intervals, n_d, n_d - 1); ``link`` has shape
    (days, intervals, n_l). All entries are non-negative.
    """

    intervals_per_day: int
    od: np.ndarray
    link: np.ndarray
    warmup_days: int = 0

    def __post_init__(self):
        self.od = np.asarray(self.od, dtype=float)
        self.link = np.asarray(self.link, dtype=float)
        if self.od.ndim != 4:
            raise ValueError(f"od panel must be 4-D, got shape {self.od.shape}")
        if self.link.ndim != 3:
            raise ValueError(f"link panel must be 3-D, got shape {self.link.shape}")
        if self.od.shape[:2] != self.link.shape[:2]:
            raise ValueError(f"od and link panels disagree on (days, intervals): {self.od.shape} vs {self.link.shape}")
        if self.od.shape[1] != self.intervals_per_day:
            raise ValueError(f"panel has {self.od.shape[1]} intervals, expected {self.intervals_per_day}")
        if self.od.shape[3] != self.od.shape[2] - 1:
            raise ValueError(f"od matrix slices must be n_d x (n_d - 1), got {self.od.shape[2:]}")
        if np.any(self.od < 0) or np.any(self.link < 0):
            raise ValueError("flow panels cannot contain negative entries")

    @property
    def days(self) -> int:
        return self.od.shape[0]

    @property
    def n_d(self) -> int:
        return self.od.shape[2]

    @property
    def n_links(self) -> int:
        return self.link.shape[2]

    def od_flat(self) -> np.ndarray:
        """O-D panel with pair matrices flattened to vectors: (days, intervals, n_od)."""
        return self.od.reshape(self.days, self.intervals_per_day, -1)


def make_historical(panel: FlowPanel, lookback_days: int = 7) -> FlowPanel:
    """Panel of same-interval flows ``lookback_days`` earlier.

    Day d of the result holds day d - lookback of the input; the first
    ``lookback_days`` days have no lookback available, are zero-filled, and
    are marked unusable via ``warmup_days``.
    """
    if panel.days <= lookback_days:
        raise ValueError(f"need more than {lookback_days} days for a {lookback_days}-day lookback, got {panel.days}")
    od = np.zeros_like(panel.od)
    link = np.zeros_like(panel.link)
    od[lookback_days:] = panel.od[:-lookback_days]
    link[lookback_days:] = panel.link[:-lookback_days]
    return FlowPanel(
        intervals_per_day=panel.intervals_per_day,
        od=od,
        link=link,
        warmup_days=lookback_days,
    )


def slice_days(panel: FlowPanel, start: int, stop: int) -> FlowPanel:
    """Restrict a panel to days [start, stop); the warmup marker shifts with it."""
    if not (0 <= start < stop <= panel.days):
        raise ValueError(f"invalid day range [{start}, {stop}) for a {panel.days}-day panel")
    return FlowPanel(
        intervals_per_day=panel.intervals_per_day,
        od=panel.od[start:stop],
        link=panel.link[start:stop],
        warmup_days=max(0, panel.warmup_days - start),
    )


# ------------------------------------------------------------------ file IO
#
# Delimited text, one record per cell, full-precision floats (repr round-trips
# float64 exactly). Lines starting with '#' carry provenance and are skipped.

OD_HEADER = "day,interval,origin,destination,flow"
LINK_HEADER = "day,interval,link_id,count"


def write_od_panel(path, od: np.ndarray, provenance: str | None = None) -> None:
    days, intervals, n_d, _ = od.shape
    pairs = od_pairs(n_d)
    with open(path, "w", encoding="utf-8") as fh:
        if provenance:
            fh.write(f"# {provenance}\n")
        fh.write(OD_HEADER + "\n")
        for day in range(days):
            for h in range(intervals):
                flat = od[day, h].reshape(-1)
                for r, (o, d) in enumerate(pairs):
                    fh.write(f"{day},{h},{o},{d},{flat[r]!r}\n")


def write_link_panel(path, link: np.ndarray, provenance: str | None = None) -> None:
    days, intervals, n_l = link.shape
    with open(path, "w", encoding="utf-8") as fh:
        if provenance:
            fh.write(f"# {provenance}\n")
        fh.write(LINK_HEADER + "\n")
        for day in range(days):
            for h in range(intervals):
                for lid in range(n_l):
                    fh.write(f"{day},{h},{lid},{link[day, h, lid]!r}\n")


def _read_records(path, expected_header: str, n_fields: int):
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        header_seen = False
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if not header_seen:
                if line != expected_header:
                    raise ValueError(f"{path}: line {lineno}: expected header {expected_header!r}")
                header_seen = True
                continue
            fields = line.split(",")
            if len(fields) != n_fields:
                raise ValueError(f"{path}: line {lineno}: expected {n_fields} fields")
            records.append(fields)
    if not header_seen:
        raise ValueError(f"{path}: missing header row")
    return records


def read_od_panel(path) -> np.ndarray:
    records = _read_records(path, OD_HEADER, 5)
    if not records:
        raise ValueError(f"{path}: empty O-D panel")
    days = max(int(r[0]) for r in records) + 1
    intervals = max(int(r[1]) for r in records) + 1
    n_d = max(max(int(r[2]), int(r[3])) for r in records) + 1
    od = np.zeros((days, intervals, n_d, n_d - 1))
    for day, h, o, d, flow in records:
        o, d = int(o), int(d)
        col = d if d < o else d - 1
        od[int(day), int(h), o, col] = float(flow)
    return od


def read_link_panel(path) -> np.ndarray:
    records = _read_records(path, LINK_HEADER, 4)
    if not records:
        raise ValueError(f"{path}: empty link panel")
    days = max(int(r[0]) for r in records) + 1
    intervals = max(int(r[1]) for r in records) + 1
    n_l = max(int(r[2]) for r in records) + 1
    link = np.zeros((days, intervals, n_l))
    for day, h, lid, count in records:
        link[int(day), int(h), int(lid)] = float(count)
    return link
