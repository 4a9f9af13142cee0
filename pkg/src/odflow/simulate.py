"""Synthetic corridor traffic: seeded demand panels and consistent link counts.

Demand for a cell (day, interval, pair) is drawn around
``base * profile[interval] * weekday[day % 7] * day_factor(day)`` where the
day factor is a lognormal fluctuation shared by every pair that day. The
shared factor is what gives deviations from the 7-day-old baseline their
within-day persistence; without it consecutive intervals would be
independent and no filter could beat the historical baseline.

Link counts come in two modes that agree in expectation:

* ``vehicle`` draws a uniform departure time for every vehicle and counts it
  at each on-route sensor in the interval containing its entrance time;
* ``analytic`` applies the exact constant-speed assignment fractions to the
  demand panel.

Counts landing past the last interval of the day go to a per-day closure
buffer so that conservation (every vehicle seen once per on-route sensor)
stays checkable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .assignment import entrance_offsets_minutes, ground_truth_assignment
from .panels import FlowPanel
from .seeding import substream
from .topology import DirectedNetwork

NOISE_MODES = ("poisson", "none")
COUNT_MODES = ("vehicle", "analytic")


@dataclass(frozen=True)
class DemandModel:
    """Seeded demand process on the packed O-D matrix."""

    base_od: np.ndarray
    profile: np.ndarray
    weekday_factor: np.ndarray
    noise: str = "poisson"
    seed: int = 0
    day_sigma: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "base_od", np.asarray(self.base_od, dtype=float))
        object.__setattr__(self, "profile", np.asarray(self.profile, dtype=float))
        object.__setattr__(self, "weekday_factor", np.asarray(self.weekday_factor, dtype=float))
        if self.base_od.ndim != 2 or self.base_od.shape[1] != self.base_od.shape[0] - 1:
            raise ValueError(f"base_od must be n_d x (n_d - 1), got shape {self.base_od.shape}")
        if np.any(self.base_od < 0):
            raise ValueError("base_od rates cannot be negative")
        if np.any(self.profile <= 0) or np.any(self.weekday_factor <= 0):
            raise ValueError("profile and weekday multipliers must be positive")
        if self.weekday_factor.shape != (7,):
            raise ValueError(f"weekday_factor must have 7 entries, got {self.weekday_factor.shape}")
        if self.noise not in NOISE_MODES:
            raise ValueError(f"noise must be one of {NOISE_MODES}, got {self.noise!r}")
        if self.day_sigma < 0:
            raise ValueError("day_sigma cannot be negative")

    @property
    def intervals_per_day(self) -> int:
        return len(self.profile)


def default_demand(
    n_d: int,
    intervals_per_day: int = 14,
    seed: int = 0,
    base_scale: float = 1.0,
    noise: str = "poisson",
    day_sigma: float = 0.15,
) -> DemandModel:
    """Desk-scale peak-period demand: near pairs heavy, far pairs light, asymmetric directions."""
    base = np.zeros((n_d, n_d - 1))
    for o in range(n_d):
        for d in range(n_d):
            if d == o:
                continue
            col = d if d < o else d - 1
            dist = abs(d - o)
            rate = 15.0 + 105.0 * np.exp(-(dist - 1) / 1.5)
            if d < o:  # reverse direction carries less
                rate *= 0.75
            base[o, col] = rate * base_scale
    # Single-peak profile over the analysis period, strictly positive.
    h = np.arange(intervals_per_day)
    profile = 0.6 + 0.8 * np.sin(np.pi * (h + 0.5) / intervals_per_day)
    weekday = np.array([1.05, 1.0, 1.0, 1.0, 1.1, 0.7, 0.6])
    return DemandModel(
        base_od=base,
        profile=profile,
        weekday_factor=weekday,
        noise=noise,
        seed=seed,
        day_sigma=day_sigma,
    )


def day_factor(demand: DemandModel, day: int) -> float:
    """Shared lognormal day fluctuation with mean exactly 1 (1.0 when day_sigma = 0)."""
    if demand.day_sigma == 0.0:
        return 1.0
    rng = substream(demand.seed, "dayfx", day)
    sigma = demand.day_sigma
    return float(np.exp(rng.normal(-0.5 * sigma * sigma, sigma)))


def cell_rate(demand: DemandModel, day: int, interval: int) -> np.ndarray:
    """Mean O-D matrix for one (day, interval) cell, including the day factor."""
    return (
        demand.base_od
        * demand.profile[interval]
        * demand.weekday_factor[day % 7]
        * day_factor(demand, day)
    )


def generate_od_panel(demand: DemandModel, days: int, net: DirectedNetwork) -> np.ndarray:
    """Seeded O-D panel (days, intervals, n_d, n_d - 1).

    Every (day, interval, pair) cell draws from its own named substream, so
    per-day parallel generation would produce bit-identical panels.
    """
    if demand.base_od.shape[0] != net.node_count:
        raise ValueError(
            f"demand is for {demand.base_od.shape[0]} interchanges, network has {net.node_count}"
        )
    intervals = demand.intervals_per_day
    n_d = net.node_count
    od = np.zeros((days, intervals, n_d, n_d - 1))
    n_od = n_d * (n_d - 1)
    for day in range(days):
        for h in range(intervals):
            rates = cell_rate(demand, day, h).reshape(-1)
            if demand.noise == "none":
                od[day, h] = rates.reshape(n_d, n_d - 1)
            else:
                draws = np.empty(n_od)
                for r in range(n_od):
                    draws[r] = substream(demand.seed, "od", day, h, r).poisson(rates[r])
                od[day, h] = draws.reshape(n_d, n_d - 1)
    return od


def simulate_link_counts(
    od_panel: np.ndarray,
    net: DirectedNetwork,
    speed_mph: float = 60.0,
    interval_minutes: float = 15.0,
    mode: str = "vehicle",
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Link counts consistent with an O-D panel, plus the per-day closure buffer.

    Returns ``(link, closure)`` where ``link`` has shape (days, intervals,
    n_l) and ``closure[day, l]`` accumulates counts whose entrance interval
    falls past the end of the day's analysis period.
    """
    if mode not in COUNT_MODES:
        raise ValueError(f"mode must be one of {COUNT_MODES}, got {mode!r}")
    days, intervals, n_d, _ = od_panel.shape
    if n_d != net.node_count:
        raise ValueError(f"panel is for {n_d} interchanges, network has {net.node_count}")
    n_l = net.n_sensors
    link = np.zeros((days, intervals, n_l))
    closure = np.zeros((days, n_l))
    flat = od_panel.reshape(days, intervals, -1)

    if mode == "analytic":
        blocks = ground_truth_assignment(net, speed_mph, interval_minutes)
        for p, block in enumerate(blocks):
            if p == 0:
                link += flat @ block.T
                continue
            link[:, p:, :] += flat[:, : intervals - p, :] @ block.T
            tail = flat[:, intervals - p :, :] @ block.T
            closure += tail.sum(axis=1)
        return link, closure

    counts = np.rint(flat).astype(np.int64)
    if not np.allclose(flat, counts):
        raise ValueError("vehicle mode needs integer O-D counts; use analytic mode for fractional panels")
    offsets = entrance_offsets_minutes(net, speed_mph)
    for day in range(days):
        for h in range(intervals):
            for r, pair_offsets in enumerate(offsets):
                m = counts[day, h, r]
                if m == 0:
                    continue
                rng = substream(seed, "vehicle", day, h, r)
                depart = rng.uniform(h * interval_minutes, (h + 1) * interval_minutes, size=m)
                for col, tau in pair_offsets:
                    arrive = np.floor((depart + tau) / interval_minutes).astype(np.int64)
                    in_day = arrive < intervals
                    if np.any(in_day):
                        link[day, :, col] += np.bincount(arrive[in_day], minlength=intervals)
                    closure[day, col] += m - int(in_day.sum())
    return link, closure


def simulate_panel(
    demand: DemandModel,
    days: int,
    net: DirectedNetwork,
    speed_mph: float = 60.0,
    interval_minutes: float = 15.0,
    mode: str = "vehicle",
) -> tuple[FlowPanel, np.ndarray]:
    """Generate a consistent O-D + link panel; returns the panel and the closure buffer."""
    od = generate_od_panel(demand, days, net)
    link, closure = simulate_link_counts(
        od, net, speed_mph=speed_mph, interval_minutes=interval_minutes, mode=mode, seed=demand.seed
    )
    panel = FlowPanel(intervals_per_day=demand.intervals_per_day, od=od, link=link)
    return panel, closure
