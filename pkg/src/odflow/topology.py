"""Directed corridor networks and the graph matrices consumed by the model.

A closed highway is a directed graph over interchange nodes. Its sensor-
equipped links induce three matrices:

* link adjacency ``A_L``: entry ``(i, j)`` is 1 when sensor link ``i`` feeds
  sensor link ``j`` (head of ``i`` = tail of ``j``), i.e. the adjacency of
  the line graph over sensor links;
* node-link incidence ``P``: +1 where a link leaves a node, -1 where it
  enters one, one column per sensor link;
* self-looped random-walk adjacency ``Dt^{-1} (A_L + I)`` where ``Dt`` is the
  row-sum degree of ``A_L + I``; rows sum to one and the diagonal is
  positive, which keeps repeated graph convolutions numerically stable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Link:
    """One directed road segment."""

    id: int
    from_node: int
    to_node: int
    length_miles: float
    has_sensor: bool


@dataclass(frozen=True)
class DirectedNetwork:
    """Interchange/link topology of a closed highway with sensor placement."""

    node_count: int
    links: tuple[Link, ...]

    def __post_init__(self):
        if self.node_count < 1:
            raise ValueError(f"node_count must be >= 1, got {self.node_count}")
        seen_pairs = set()
        for i, link in enumerate(self.links):
            if link.id != i:
                raise ValueError(f"link ids must be 0..n-1 in order, got id {link.id} at position {i}")
            if not (0 <= link.from_node < self.node_count and 0 <= link.to_node < self.node_count):
                raise ValueError(f"link {link.id} endpoints out of range")
            if link.from_node == link.to_node:
                raise ValueError(f"link {link.id} is a self-loop")
            pair = (link.from_node, link.to_node)
            if pair in seen_pairs:
                raise ValueError(f"duplicate link {pair}")
            seen_pairs.add(pair)
            if not link.length_miles > 0:
                raise ValueError(f"link {link.id} has non-positive length")

    @property
    def sensor_links(self) -> tuple[int, ...]:
        """Ids of sensor-equipped links, strictly increasing."""
        return tuple(link.id for link in self.links if link.has_sensor)

    @property
    def n_links(self) -> int:
        return len(self.links)

    @property
    def n_sensors(self) -> int:
        return len(self.sensor_links)

    @property
    def n_od(self) -> int:
        return self.node_count * (self.node_count - 1)


def od_pairs(n_d: int) -> list[tuple[int, int]]:
    """Ordered (origin, destination) pairs, row-major with the diagonal skipped.

    Pair index r enumerates origins in the outer loop; the inner loop runs over
    destinations != origin, so r = origin * (n_d - 1) + packed destination.
    """
    return [(o, d) for o in range(n_d) for d in range(n_d) if d != o]


def pair_index(origin: int, dest: int, n_d: int) -> int:
    """Flat index of an O-D pair in the packed n_d x (n_d - 1) matrix."""
    if origin == dest:
        raise ValueError("O-D pair must have distinct endpoints")
    col = dest if dest < origin else dest - 1
    return origin * (n_d - 1) + col


def build_line_graph(net: DirectedNetwork) -> np.ndarray:
    """Adjacency of the line graph restricted to sensor links.

    Entry (i, j) is 1 iff the head of sensor link i is the tail of sensor
    link j; the diagonal is zero (self-loops are excluded because a link
    never feeds itself on a loop-free network).
    """
    sensors = [net.links[lid] for lid in net.sensor_links]
    n = len(sensors)
    a_l = np.zeros((n, n))
    for i, li in enumerate(sensors):
        for j, lj in enumerate(sensors):
            if i != j and li.to_node == lj.from_node:
                a_l[i, j] = 1.0
    return a_l


def build_incidence(net: DirectedNetwork) -> np.ndarray:
    """Node-link incidence over sensor links: +1 at a link's start node, -1 at its end.

    Rows follow node index order, columns follow ``sensor_links`` order, so
    every column holds exactly one +1 and one -1 and sums to zero.
    """
    p = np.zeros((net.node_count, net.n_sensors))
    for col, lid in enumerate(net.sensor_links):
        link = net.links[lid]
        p[link.from_node, col] = 1.0
        p[link.to_node, col] = -1.0
    return p


def node_adjacency(net: DirectedNetwork) -> np.ndarray:
    """Node adjacency over all links. Debug/inspection aid; no model path uses it."""
    a_n = np.zeros((net.node_count, net.node_count))
    for link in net.links:
        a_n[link.from_node, link.to_node] = 1.0
    return a_n


def renormalized_adjacency(a_l: np.ndarray) -> np.ndarray:
    """Random-walk renormalization: rows of ``Dt^{-1} (A_L + I)`` sum to one.

    The added identity guarantees every row degree is at least one, so the
    division is always defined.
    """
    a_l = np.asarray(a_l, dtype=float)
    if a_l.ndim != 2 or a_l.shape[0] != a_l.shape[1]:
        raise ValueError(f"adjacency must be square, got shape {a_l.shape}")
    a_tilde = a_l + np.eye(a_l.shape[0])
    degree = a_tilde.sum(axis=1)
    return a_tilde / degree[:, None]


def build_turnpike(n_d: int, spacing_miles: float = 5.0) -> DirectedNetwork:
    """Linear corridor of ``n_d`` interchanges with one sensored link per direction per segment.

    Links 0..n_d-2 run up the corridor (node i -> i+1); links n_d-1..2(n_d-1)-1
    run back down, ordered so that consecutive ids chain head-to-tail within
    each direction.
    """
    if n_d < 2:
        raise ValueError(f"a corridor needs at least 2 interchanges, got {n_d}")
    if not spacing_miles > 0:
        raise ValueError(f"spacing must be positive, got {spacing_miles}")
    links = []
    for i in range(n_d - 1):
        links.append(Link(id=i, from_node=i, to_node=i + 1, length_miles=spacing_miles, has_sensor=True))
    for s, i in enumerate(range(n_d - 1, 0, -1)):
        links.append(Link(id=n_d - 1 + s, from_node=i, to_node=i - 1, length_miles=spacing_miles, has_sensor=True))
    return DirectedNetwork(node_count=n_d, links=tuple(links))


def emit_network(net: DirectedNetwork) -> str:
    """Serialize a network to the line-oriented text format (parse round-trips exactly)."""
    lines = [f"nodes {net.node_count}"]
    for link in net.links:
        sensor = 1 if link.has_sensor else 0
        lines.append(f"link {link.id} {link.from_node} {link.to_node} {link.length_miles!r} {sensor}")
    return "\n".join(lines) + "\n"


def parse_network(text: str) -> DirectedNetwork:
    """Parse the text format written by :func:`emit_network`. Lines starting with '#' are skipped."""
    node_count = None
    links = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if fields[0] == "nodes":
            if node_count is not None:
                raise ValueError(f"line {lineno}: duplicate nodes header")
            if len(fields) != 2:
                raise ValueError(f"line {lineno}: expected 'nodes <count>'")
            node_count = int(fields[1])
        elif fields[0] == "link":
            if len(fields) != 6:
                raise ValueError(f"line {lineno}: expected 'link <id> <from> <to> <length> <sensor>'")
            links.append(
                Link(
                    id=int(fields[1]),
                    from_node=int(fields[2]),
                    to_node=int(fields[3]),
                    length_miles=float(fields[4]),
                    has_sensor=bool(int(fields[5])),
                )
            )
        else:
            raise ValueError(f"line {lineno}: unknown record {fields[0]!r}")
    if node_count is None:
        raise ValueError("missing nodes header")
    return DirectedNetwork(node_count=node_count, links=tuple(links))
