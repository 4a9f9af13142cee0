"""Routes on corridor networks and the O-D-to-link assignment fractions.

On a closed corridor every O-D pair has exactly one route, so the mapping
from demand to link counts reduces to travel-time lags: a vehicle departing
in interval p reaches a link whose entrance lies tau minutes downstream and
is counted in interval p + tau/interval. With departures uniform inside the
interval, the count splits across the two straddled intervals in proportion
1 - frac(tau/interval) : frac(tau/interval).
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.optimize import nnls

from .panels import FlowPanel
from .topology import DirectedNetwork, od_pairs


class NoUniqueRouteError(ValueError):
    """Raised for networks where some O-D pair has zero or multiple routes."""


def _route_search(net: DirectedNetwork, origin: int, dest: int) -> tuple[int, ...]:
    out_links: dict[int, list] = {}
    for link in net.links:
        out_links.setdefault(link.from_node, []).append(link)

    found: list[tuple[int, ...]] = []
    stack = [(origin, ())]
    while stack:
        node, path = stack.pop()
        if node == dest:
            found.append(path)
            if len(found) > 1:
                raise NoUniqueRouteError(f"multiple routes between {origin} and {dest}")
            continue
        visited_nodes = {origin} | {net.links[lid].to_node for lid in path}
        for link in out_links.get(node, []):
            if link.to_node not in visited_nodes:
                stack.append((link.to_node, path + (link.id,)))
    if not found:
        raise NoUniqueRouteError(f"no route between {origin} and {dest}")
    return found[0]


@lru_cache(maxsize=None)
def _routes_cached(net: DirectedNetwork) -> tuple[tuple[int, ...], ...]:
    return tuple(_route_search(net, o, d) for o, d in od_pairs(net.node_count))


def route_links(net: DirectedNetwork, origin: int, dest: int) -> tuple[int, ...]:
    """Link ids of the unique route from origin to dest, in travel order."""
    return _route_search(net, origin, dest)


def all_routes(net: DirectedNetwork) -> tuple[tuple[int, ...], ...]:
    """Unique route per O-D pair, indexed like the packed O-D vector."""
    return _routes_cached(net)


def entrance_offsets_minutes(net: DirectedNetwork, speed_mph: float) -> list[list[tuple[int, float]]]:
    """Per O-D pair: (sensor column, minutes from departure to that link's entrance).

    Only sensor-equipped links appear; the offset is cumulative route length
    before the link divided by the constant speed.
    """
    if not speed_mph > 0:
        raise ValueError(f"speed must be positive, got {speed_mph}")
    sensor_col = {lid: i for i, lid in enumerate(net.sensor_links)}
    per_pair = []
    for route in all_routes(net):
        offsets = []
        dist = 0.0
        for lid in route:
            if lid in sensor_col:
                offsets.append((sensor_col[lid], dist / speed_mph * 60.0))
            dist += net.links[lid].length_miles
        per_pair.append(offsets)
    return per_pair


def max_lag_intervals(net: DirectedNetwork, speed_mph: float, interval_minutes: float) -> int:
    """Smallest p' covering every travel-time lag on the network."""
    worst = 0.0
    for offsets in entrance_offsets_minutes(net, speed_mph):
        for _, tau in offsets:
            worst = max(worst, tau)
    return int(np.ceil(worst / interval_minutes - 1e-12))


def ground_truth_assignment(
    net: DirectedNetwork, speed_mph: float, interval_minutes: float
) -> list[np.ndarray]:
    """Exact assignment blocks a^p for p = 0..p' under constant speed.

    Block p maps departures in interval h - p to counts in interval h. For
    each (pair, on-route link) the entries across p sum to exactly 1.
    """
    p_prime = max_lag_intervals(net, speed_mph, interval_minutes)
    n_od = net.n_od
    n_l = net.n_sensors
    blocks = [np.zeros((n_l, n_od)) for _ in range(p_prime + 1)]
    for r, offsets in enumerate(entrance_offsets_minutes(net, speed_mph)):
        for col, tau in offsets:
            lag = tau / interval_minutes
            base = int(np.floor(lag))
            frac = lag - base
            blocks[base][col, r] += 1.0 - frac
            if frac > 0.0:
                blocks[base + 1][col, r] += frac
    return blocks


def estimate_assignment(
    panel: FlowPanel,
    net: DirectedNetwork,
    p_prime: int,
    speed_mph: float,
    interval_minutes: float,
) -> tuple[list[np.ndarray], list[int]]:
    """Assignment blocks fit by per-link non-negative least squares.

    Each link's counts regress on the lagged flows of the O-D pairs whose
    route passes the link; coefficients are clipped to [0, 1]. Links with a
    degenerate design (no usable rows, or a regressor that never moves) fall
    back to the constant-speed ground truth and are reported in the second
    return value.
    """
    if p_prime < 0:
        raise ValueError(f"p_prime must be >= 0, got {p_prime}")
    routes = all_routes(net)
    sensor_col = {lid: i for i, lid in enumerate(net.sensor_links)}
    pairs_through: list[list[int]] = [[] for _ in range(net.n_sensors)]
    for r, route in enumerate(routes):
        for lid in route:
            if lid in sensor_col:
                pairs_through[sensor_col[lid]].append(r)

    od = panel.od_flat()[panel.warmup_days :]
    link = panel.link[panel.warmup_days :]
    days, intervals = od.shape[:2]
    usable_h = range(p_prime, intervals)

    truth = ground_truth_assignment(net, speed_mph, interval_minutes)
    blocks = [np.zeros((net.n_sensors, net.n_od)) for _ in range(p_prime + 1)]
    fallback_links: list[int] = []

    for col in range(net.n_sensors):
        pairs = pairs_through[col]
        if not pairs:
            continue  # link on no route: all-zero row
        columns = [(r, p) for r in pairs for p in range(p_prime + 1)]
        design_cols = []
        for r, p in columns:
            design_cols.append(od[:, p_prime - p : intervals - p, r].reshape(-1))
        design = np.stack(design_cols, axis=1)
        target = link[:, list(usable_h), col].reshape(-1)
        degenerate = (
            design.shape[0] < design.shape[1]
            or np.any(np.ptp(design, axis=0) == 0.0)
        )
        if degenerate:
            fallback_links.append(col)
            for p in range(p_prime + 1):
                if p < len(truth):
                    blocks[p][col] = truth[p][col]
            continue
        coef, _ = nnls(design, target)
        coef = np.clip(coef, 0.0, 1.0)
        for (r, p), c in zip(columns, coef):
            blocks[p][col, r] = c
    return blocks, fallback_links
