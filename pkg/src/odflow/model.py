"""The fused line-graph convolutional forecaster.

Forward structure, for one prediction:

1. a stack of graph convolutions propagates the lagged link-flow window
   ``Z`` (n_l x 2k) over the sensor line graph: ``h <- relu(A_hat h W + b)``;
2. a line-graph head aggregates link features to interchanges through the
   incidence matrix: ``x_L = relu(P h W2 + b2)``, shape n_d x (n_d - 1);
3. a historical branch transforms the 7-day-old O-D matrix, either as a
   stack of dense layers (column mixing) or as a stack of same-padded 3x3
   convolutions treating the matrix as a one-channel image;
4. fusion sums the two branches: ``x_hat = x_L W3 + branch(x_hist) + b3``
   with a linear output (flows are clamped at zero only at prediction time,
   outside the training loss).

Hidden activations are ReLU throughout. The head width ``gcn_hidden`` is a
free hyperparameter; with width 1 the stack degenerates to a single
convolved signal per link, which stays configurable but cannot span an
n_d x (n_d - 1) output, hence the multi-channel default.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import Node, Tape
from .seeding import substream
from .topology import DirectedNetwork, build_incidence, build_line_graph, renormalized_adjacency

HEAD_VARIANTS = ("fcn", "cnn")


@dataclass(frozen=True)
class FlGcnConfig:
    """Architecture hyperparameters (defaults match the desk-scale experiment)."""

    n_gcn_layers: int = 3
    gcn_hidden: int = 16
    head_variant: str = "cnn"
    n_hist_layers: int = 3
    cnn_channels: tuple[int, ...] = (8, 8, 1)
    k_link_lags: int = 4

    def __post_init__(self):
        if self.n_gcn_layers < 1:
            raise ValueError("need at least one graph convolution layer")
        if self.gcn_hidden < 1:
            raise ValueError("gcn_hidden must be positive")
        if self.head_variant not in HEAD_VARIANTS:
            raise ValueError(f"head_variant must be one of {HEAD_VARIANTS}, got {self.head_variant!r}")
        if self.n_hist_layers < 1:
            raise ValueError("need at least one historical-branch layer")
        if len(self.cnn_channels) != self.n_hist_layers:
            raise ValueError("cnn_channels must list one width per historical layer")
        if self.cnn_channels[-1] != 1:
            raise ValueError("the last historical conv layer must emit one channel")
        if self.k_link_lags < 1:
            raise ValueError("k_link_lags must be positive")


@dataclass(frozen=True)
class TopologyMatrices:
    """Precomputed propagation operators for one network."""

    a_hat: np.ndarray  # n_l x n_l, random-walk renormalized link adjacency
    incidence: np.ndarray  # n_d x n_l
    n_d: int
    n_l: int

    @classmethod
    def from_network(cls, net: DirectedNetwork) -> "TopologyMatrices":
        a_l = build_line_graph(net)
        return cls(
            a_hat=renormalized_adjacency(a_l),
            incidence=build_incidence(net),
            n_d=net.node_count,
            n_l=net.n_sensors,
        )


def param_shapes(config: FlGcnConfig, n_d: int, n_l: int) -> dict[str, tuple[int, ...]]:
    """Canonical name -> shape map for every learnable tensor."""
    k2 = 2 * config.k_link_lags
    c = config.gcn_hidden
    cols = n_d - 1
    shapes: dict[str, tuple[int, ...]] = {}
    width_in = k2
    for layer in range(config.n_gcn_layers):
        shapes[f"gcn{layer}_w"] = (width_in, c)
        shapes[f"gcn{layer}_b"] = (c,)
        width_in = c
    shapes["head_w"] = (c, cols)
    shapes["head_b"] = (cols,)
    shapes["fuse_w"] = (cols, cols)
    shapes["fuse_b"] = (n_d, cols)
    if config.head_variant == "fcn":
        for layer in range(config.n_hist_layers):
            shapes[f"hist{layer}_w"] = (cols, cols)
            shapes[f"hist{layer}_b"] = (cols,)
    else:
        c_in = 1
        for layer, c_out in enumerate(config.cnn_channels):
            shapes[f"hist{layer}_k"] = (c_out, c_in, 3, 3)
            shapes[f"hist{layer}_b"] = (c_out,)
            c_in = c_out
    return shapes


def init_params(config: FlGcnConfig, n_d: int, n_l: int, seed: int) -> dict[str, np.ndarray]:
    """Glorot-uniform weights (bound sqrt(6 / (fan_in + fan_out))), zero biases."""
    rng = substream(seed, "init", config.head_variant)
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config, n_d, n_l).items():
        if name.endswith("_b"):
            params[name] = np.zeros(shape)
            continue
        if len(shape) == 2:
            fan_in, fan_out = shape
        else:  # conv kernel (c_out, c_in, 3, 3)
            fan_in = shape[1] * 9
            fan_out = shape[0] * 9
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def _leaves(tape: Tape, params: dict[str, np.ndarray]) -> dict[str, Node]:
    return {name: tape.leaf(value) for name, value in sorted(params.items())}


def forward_gcn(tape: Tape, z: Node, a_hat: Node, leaves: dict[str, Node], config: FlGcnConfig) -> Node:
    """Graph-convolution stack over the link window: h <- relu(A_hat h W + b)."""
    h = z
    for layer in range(config.n_gcn_layers):
        h = tape.matmul(a_hat, h)
        h = tape.matmul(h, leaves[f"gcn{layer}_w"])
        h = tape.add(h, leaves[f"gcn{layer}_b"])
        h = tape.relu(h)
    return h


def forward_lgcn(tape: Tape, link_features: Node, incidence: Node, leaves: dict[str, Node]) -> Node:
    """Line-graph head: aggregate link features to interchanges, relu(P h W2 + b2)."""
    x = tape.matmul(incidence, link_features)
    x = tape.matmul(x, leaves["head_w"])
    x = tape.add(x, leaves["head_b"])
    return tape.relu(x)


def forward_historical(tape: Tape, x_hist: Node, leaves: dict[str, Node], config: FlGcnConfig) -> Node:
    """Historical branch: dense column-mixing stack (fcn) or one-channel conv stack (cnn).

    ReLU separates layers; the last layer stays linear.
    """
    if config.head_variant == "fcn":
        h = x_hist
        for layer in range(config.n_hist_layers):
            h = tape.matmul(h, leaves[f"hist{layer}_w"])
            h = tape.add(h, leaves[f"hist{layer}_b"])
            if layer < config.n_hist_layers - 1:
                h = tape.relu(h)
        return h
    batched = len(x_hist.shape) == 3
    if batched:
        b, height, width = x_hist.shape
        h = tape.reshape(x_hist, (b, 1, height, width))
    else:
        height, width = x_hist.shape
        h = tape.reshape(x_hist, (1, height, width))
    for layer in range(config.n_hist_layers):
        h = tape.conv2d(h, leaves[f"hist{layer}_k"], leaves[f"hist{layer}_b"])
        if layer < config.n_hist_layers - 1:
            h = tape.relu(h)
    return tape.reshape(h, (b, height, width) if batched else (height, width))


def forward_flgcn(
    tape: Tape,
    z: Node,
    x_hist: Node,
    a_hat: Node,
    incidence: Node,
    leaves: dict[str, Node],
    config: FlGcnConfig,
) -> Node:
    """Full forward pass to the (unclamped) predicted O-D matrix."""
    features = forward_gcn(tape, z, a_hat, leaves, config)
    x_l = forward_lgcn(tape, features, incidence, leaves)
    fused = tape.matmul(x_l, leaves["fuse_w"])
    hist = forward_historical(tape, x_hist, leaves, config)
    out = tape.add(fused, hist)
    return tape.add(out, leaves["fuse_b"])


def predict(
    params: dict[str, np.ndarray],
    config: FlGcnConfig,
    topo: TopologyMatrices,
    z: np.ndarray,
    x_hist: np.ndarray,
) -> np.ndarray:
    """Inference on one window or a batch; output clamped at zero (flows are counts)."""
    tape = Tape()
    leaves = _leaves(tape, params)
    out = forward_flgcn(
        tape,
        tape.leaf(z),
        tape.leaf(x_hist),
        tape.leaf(topo.a_hat),
        tape.leaf(topo.incidence),
        leaves,
        config,
    )
    return np.maximum(out.value, 0.0)


# ------------------------------------------------------------- checkpoints
#
# Flat binary layout: magic, length-prefixed JSON metadata (config echo), then
# each tensor as (name, shape, row-major float64 values) in sorted name order.
# Saving what load returns reproduces the file byte for byte.

CHECKPOINT_MAGIC = b"FLGCN-CKPT-1\n"


def _canonical_json(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path, params: dict[str, np.ndarray], meta: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        blob = _canonical_json(meta)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            encoded = name.encode("utf-8")
            value = np.ascontiguousarray(params[name], dtype=np.float64)
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", value.ndim))
            fh.write(struct.pack(f"<{value.ndim}I", *value.shape))
            fh.write(value.tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (meta_len,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(meta_len).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        params: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            size = int(np.prod(shape)) if shape else 1
            values = np.frombuffer(fh.read(8 * size), dtype="<f8").reshape(shape)
            params[name] = values.copy()
        trailing = fh.read(1)
        if trailing:
            raise ValueError(f"{path}: trailing bytes after last tensor")
    return params, meta


def config_from_meta(meta: dict) -> FlGcnConfig:
    return FlGcnConfig(
        n_gcn_layers=int(meta["n_gcn_layers"]),
        gcn_hidden=int(meta["gcn_hidden"]),
        head_variant=str(meta["head_variant"]),
        n_hist_layers=int(meta["n_hist_layers"]),
        cnn_channels=tuple(int(c) for c in meta["cnn_channels"]),
        k_link_lags=int(meta["k_link_lags"]),
    )


def meta_from_config(config: FlGcnConfig) -> dict:
    return {
        "n_gcn_layers": config.n_gcn_layers,
        "gcn_hidden": config.gcn_hidden,
        "head_variant": config.head_variant,
        "n_hist_layers": config.n_hist_layers,
        "cnn_channels": list(config.cnn_channels),
        "k_link_lags": config.k_link_lags,
    }
