"""Small feedforward and convolutional networks as plain weight matrices.

A network is an ordered list of layers without bias terms, each a weight
matrix plus a 1-Lipschitz activation (relu or identity). Full networks
carry a split index separating the feature extractor (lower layers) from
the head (upper layers); the final layer must use the identity activation
so forward evaluation returns raw pre-softmax scores.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

__all__ = [
    "DenseLayer",
    "ConvLayer",
    "Network",
    "InitSnapshot",
    "RiskEstimate",
    "mlp_template",
    "forward",
    "predict_label",
    "empirical_risk_01",
    "empirical_risk_margin",
    "miss_count_01",
    "margin_miss_count",
    "true_risk_estimate",
    "split",
    "join",
    "take_snapshot",
    "network_to_dict",
    "network_from_dict",
    "save_network",
    "load_network",
]

ACTIVATIONS = ("relu", "identity")


def _activate(pre: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(pre, 0.0)
    return pre


@dataclass
class DenseLayer:
    """Fully connected layer: x -> activation(weights @ x)."""

    weights: np.ndarray  # (out_dim, in_dim)
    activation: str = "relu"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ValueError("dense weights must be a 2-D matrix")
        if not np.isfinite(self.weights).all():
            raise ValueError("dense weights must be finite")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def apply(self, x: np.ndarray) -> np.ndarray:
        return _activate(x @ self.weights.T, self.activation)


@dataclass
class ConvLayer:
    """2-D convolution stored as a filter matrix applied to flattened inputs.

    Inputs are channel-first (in_channels, in_height, in_width) volumes
    flattened in C order. ``weights`` has one row per output channel and
    one column per (in_channel, kernel_row, kernel_col) patch entry, also
    in C order. Valid padding, square stride, no pooling.
    """

    weights: np.ndarray  # (out_channels, in_channels * kernel_h * kernel_w)
    in_channels: int
    in_height: int
    in_width: int
    kernel_height: int
    kernel_width: int
    stride: int = 1
    activation: str = "relu"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if not np.isfinite(self.weights).all():
            raise ValueError("conv weights must be finite")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if min(self.in_channels, self.in_height, self.in_width,
               self.kernel_height, self.kernel_width, self.stride) < 1:
            raise ValueError("conv geometry fields must be positive")
        if self.kernel_height > self.in_height or self.kernel_width > self.in_width:
            raise ValueError("kernel larger than input")
        patch = self.in_channels * self.kernel_height * self.kernel_width
        if self.weights.ndim != 2 or self.weights.shape[1] != patch:
            raise ValueError(
                f"conv weights must have {patch} columns, got {self.weights.shape}"
            )

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def out_height(self) -> int:
        return (self.in_height - self.kernel_height) // self.stride + 1

    @property
    def out_width(self) -> int:
        return (self.in_width - self.kernel_width) // self.stride + 1

    @property
    def num_patches(self) -> int:
        return self.out_height * self.out_width

    @property
    def in_dim(self) -> int:
        return self.in_channels * self.in_height * self.in_width

    @property
    def out_dim(self) -> int:
        return self.out_channels * self.num_patches

    def extract_patches(self, x: np.ndarray) -> np.ndarray:
        """im2col: (n, in_dim) -> (n, patch_size, num_patches)."""
        n = x.shape[0]
        vol = x.reshape(n, self.in_channels, self.in_height, self.in_width)
        kh, kw, s = self.kernel_height, self.kernel_width, self.stride
        oh, ow = self.out_height, self.out_width
        cols = np.empty((n, self.in_channels * kh * kw, oh * ow), dtype=np.float64)
        idx = 0
        for r in range(oh):
            for c in range(ow):
                patch = vol[:, :, r * s:r * s + kh, c * s:c * s + kw]
                cols[:, :, idx] = patch.reshape(n, -1)
                idx += 1
        return cols

    def apply(self, x: np.ndarray) -> np.ndarray:
        cols = self.extract_patches(x)
        pre = np.einsum("ok,nkp->nop", self.weights, cols)
        return _activate(pre.reshape(x.shape[0], -1), self.activation)


Layer = DenseLayer | ConvLayer


@dataclass
class Network:
    """Ordered layer stack, optionally split into feature extractor and head.

    With ``split_index`` set to L, layers [0, L) form the feature extractor
    and layers [L, len) the head; the final layer must then use the identity
    activation (raw scores). Plain stacks (``split_index=None``), as
    produced by :func:`split`, only require adjacent dimensions to match.
    Treat instances as immutable once built.
    """

    layers: list[Layer]
    split_index: int | None = None

    def __post_init__(self):
        if not self.layers:
            raise ValueError("network needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ValueError(
                    f"layer dimension mismatch: {a.out_dim} feeds {b.in_dim}"
                )
        if self.split_index is not None:
            if not 1 <= self.split_index < len(self.layers):
                raise ValueError(
                    f"split index {self.split_index} outside [1, {len(self.layers) - 1}]"
                )
            if self.layers[-1].activation != "identity":
                raise ValueError("final layer must use the identity activation")

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def feature_dim(self) -> int:
        if self.split_index is None:
            raise ValueError("network has no split index")
        return self.layers[self.split_index - 1].out_dim

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def max_width(self) -> int:
        return max(layer.out_dim for layer in self.layers)

    def scores(self, x: np.ndarray) -> np.ndarray:
        """Batched forward pass: (n, d) -> (n, output_dim)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ValueError(
                f"expected inputs of shape (n, {self.input_dim}), got {x.shape}"
            )
        for layer in self.layers:
            x = layer.apply(x)
        return x

    def activations(self, x: np.ndarray) -> list[np.ndarray]:
        """Per-layer post-activation values, index 0 being the input batch."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ValueError(
                f"expected inputs of shape (n, {self.input_dim}), got {x.shape}"
            )
        acts = [x]
        for layer in self.layers:
            acts.append(layer.apply(acts[-1]))
        return acts

    def predict_labels(self, x: np.ndarray) -> np.ndarray:
        return self.scores(x).argmax(axis=1)

    def copy(self) -> "Network":
        return Network([_copy_layer(l) for l in self.layers], self.split_index)


def _copy_layer(layer: Layer) -> Layer:
    if isinstance(layer, DenseLayer):
        return DenseLayer(layer.weights.copy(), layer.activation)
    return ConvLayer(
        layer.weights.copy(), layer.in_channels, layer.in_height, layer.in_width,
        layer.kernel_height, layer.kernel_width, layer.stride, layer.activation,
    )


@dataclass(frozen=True)
class InitSnapshot:
    """Copies of every layer weight matrix at initialization time."""

    matrices: tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(
            self, "matrices", tuple(np.array(m, dtype=np.float64) for m in self.matrices)
        )

    def check_shapes(self, net: Network):
        if len(self.matrices) != net.depth:
            raise ValueError("snapshot depth does not match network")
        for m, layer in zip(self.matrices, net.layers):
            if m.shape != layer.weights.shape:
                raise ValueError("snapshot shape does not match network layer")


def take_snapshot(net: Network) -> InitSnapshot:
    return InitSnapshot(tuple(layer.weights.copy() for layer in net.layers))


def mlp_template(input_dim: int, hidden_widths, output_dim: int,
                 split_index: int) -> Network:
    """Zero-weight dense architecture: relu hidden layers, identity output."""
    widths = [input_dim, *hidden_widths, output_dim]
    layers: list[Layer] = [
        DenseLayer(np.zeros((widths[i + 1], widths[i])),
                   "identity" if i == len(widths) - 2 else "relu")
        for i in range(len(widths) - 1)
    ]
    return Network(layers, split_index)


def forward(net: Network, x) -> np.ndarray:
    """Score vector for a single input vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("forward expects a single input vector")
    return net.scores(x[None, :])[0]


def predict_label(net: Network, x) -> int:
    """Argmax of the forward scores, lowest index on ties."""
    return int(forward(net, x).argmax())


def _check_eval_args(net: Network, inputs, labels):
    inputs = np.asarray(inputs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(inputs) != len(labels):
        raise ValueError("inputs and labels must have equal length")
    if len(labels) == 0:
        raise ValueError("empty evaluation set")
    if labels.min() < 0 or labels.max() >= net.output_dim:
        raise ValueError("label outside network output range")
    return inputs, labels


def miss_count_01(net: Network, inputs, labels) -> int:
    """Number of examples whose predicted label differs from the true label."""
    inputs, labels = _check_eval_args(net, inputs, labels)
    return int((net.predict_labels(inputs) != labels).sum())


def empirical_risk_01(net: Network, inputs, labels) -> float:
    """Fraction of misclassified examples (exact integer count over n)."""
    return miss_count_01(net, inputs, labels) / len(labels)


def margin_miss_count(net: Network, inputs, labels, gamma: float) -> int:
    """Number of examples whose true-label score fails the margin test.

    An example is a miss when score[true] < gamma + max over other labels,
    with strict inequality, so a tie at gamma=0 counts as correct.
    """
    if gamma < 0:
        raise ValueError("margin gamma must be non-negative")
    inputs, labels = _check_eval_args(net, inputs, labels)
    scores = net.scores(inputs)
    idx = np.arange(len(labels))
    true_scores = scores[idx, labels].copy()
    scores[idx, labels] = -np.inf
    best_other = scores.max(axis=1)
    return int((true_scores < gamma + best_other).sum())


def empirical_risk_margin(net: Network, inputs, labels, gamma: float) -> float:
    """Margin empirical risk, non-decreasing in gamma."""
    return margin_miss_count(net, inputs, labels, gamma) / len(labels)


@dataclass(frozen=True)
class RiskEstimate:
    """Monte Carlo 0-1 risk on held-out data with its binomial standard error."""

    estimate: float
    std_error: float
    n: int


def true_risk_estimate(net: Network, heldout_inputs, heldout_labels) -> RiskEstimate:
    """Held-out 0-1 risk; the caller must keep the held-out set disjoint."""
    v = empirical_risk_01(net, heldout_inputs, heldout_labels)
    n = len(heldout_labels)
    return RiskEstimate(v, float(np.sqrt(v * (1.0 - v) / n)), n)


def split(net: Network) -> tuple[Network, Network]:
    """Feature extractor and head as standalone stacks; composition is exact."""
    if net.split_index is None:
        raise ValueError("network has no split index")
    extractor = Network([_copy_layer(l) for l in net.layers[: net.split_index]])
    head = Network([_copy_layer(l) for l in net.layers[net.split_index:]])
    return extractor, head


def join(extractor: Network, head: Network) -> Network:
    """Reattach a head to a feature extractor, splitting where they meet.

    Layer objects are shared, not copied, so the joined network's extractor
    weights are bit-identical to the inputs'.
    """
    return Network(list(extractor.layers) + list(head.layers),
                   split_index=len(extractor.layers))


def _layer_to_dict(layer: Layer) -> dict:
    if isinstance(layer, DenseLayer):
        return {
            "kind": "dense",
            "weights": layer.weights.tolist(),
            "activation": layer.activation,
        }
    return {
        "kind": "conv2d",
        "weights": layer.weights.tolist(),
        "activation": layer.activation,
        "in_channels": layer.in_channels,
        "in_height": layer.in_height,
        "in_width": layer.in_width,
        "kernel_height": layer.kernel_height,
        "kernel_width": layer.kernel_width,
        "stride": layer.stride,
    }


def _layer_from_dict(obj: dict) -> Layer:
    kind = obj.get("kind")
    if kind == "dense":
        return DenseLayer(np.array(obj["weights"], dtype=np.float64), obj["activation"])
    if kind == "conv2d":
        return ConvLayer(
            np.array(obj["weights"], dtype=np.float64),
            obj["in_channels"], obj["in_height"], obj["in_width"],
            obj["kernel_height"], obj["kernel_width"],
            obj.get("stride", 1), obj["activation"],
        )
    raise ValueError(f"unknown layer kind {kind!r}")


def network_to_dict(net: Network, init: InitSnapshot | None = None) -> dict:
    """JSON-ready document; floats round-trip exactly through json."""
    doc = {
        "layers": [_layer_to_dict(l) for l in net.layers],
        "split_index": net.split_index,
    }
    if init is not None:
        init.check_shapes(net)
        doc["init_weights"] = [m.tolist() for m in init.matrices]
    return doc


def network_from_dict(doc: dict) -> tuple[Network, InitSnapshot | None]:
    net = Network([_layer_from_dict(o) for o in doc["layers"]], doc.get("split_index"))
    init = None
    if doc.get("init_weights") is not None:
        init = InitSnapshot(tuple(np.array(m, dtype=np.float64) for m in doc["init_weights"]))
        init.check_shapes(net)
    return net, init


def save_network(net: Network, path, init: InitSnapshot | None = None):
    with open(path, "w") as fh:
        json.dump(network_to_dict(net, init), fh, sort_keys=True)
        fh.write("\n")


def load_network(path) -> tuple[Network, InitSnapshot | None]:
    with open(path) as fh:
        return network_from_dict(json.load(fh))
