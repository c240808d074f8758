"""Per-input seed generation: a frozen feature extractor and the mapping MLP."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .serialization import read_checkpoint, write_checkpoint
from .tensor_core import ShapeMismatchError, conv2d_arrays, im2col

ACTIVATIONS = ("tanh", "relu", "identity")
EXTRACTOR_KINDS = ("raw-flatten", "pooled-conv")


def activate(z: np.ndarray, tag: str) -> np.ndarray:
    if tag == "tanh":
        return np.tanh(z)
    if tag == "relu":
        return np.maximum(z, 0.0)
    if tag == "identity":
        return z
    raise ValueError(f"unknown activation {tag!r}")


def _readonly(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class FeatureExtractor:
    """Frozen stand-in for a pretrained backbone.

    ``raw-flatten`` returns the row-major flattening of the input.
    ``pooled-conv`` applies one fixed random ``KxKxIxF`` kernel with same
    padding and averages each output channel over space.
    """

    kind: str
    input_shape: tuple[int, int, int]
    kernel: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in EXTRACTOR_KINDS:
            raise ValueError(f"extractor kind must be one of {EXTRACTOR_KINDS}, got {self.kind!r}")
        object.__setattr__(self, "input_shape", tuple(int(n) for n in self.input_shape))
        if self.kind == "pooled-conv":
            if self.kernel is None or np.ndim(self.kernel) != 4:
                raise ShapeMismatchError("pooled-conv needs a KxKxIxF kernel")
            k = _readonly(self.kernel)
            if k.shape[0] != k.shape[1] or k.shape[0] % 2 == 0:
                raise ShapeMismatchError(f"pooled-conv kernel must be square with odd K, got {k.shape}")
            if k.shape[2] != self.input_shape[2]:
                raise ShapeMismatchError(
                    f"kernel input channels {k.shape[2]} != image channels {self.input_shape[2]}"
                )
            object.__setattr__(self, "kernel", k)

    @property
    def output_dim(self) -> int:
        if self.kind == "raw-flatten":
            return int(np.prod(self.input_shape))
        return self.kernel.shape[3]

    @property
    def padding(self) -> int:
        return (self.kernel.shape[0] - 1) // 2


def make_extractor(kind: str, input_shape, rng: np.random.Generator | None = None,
                   features: int = 8, kernel_size: int = 3) -> FeatureExtractor:
    if kind == "raw-flatten":
        return FeatureExtractor(kind, tuple(input_shape))
    I = input_shape[2]
    kernel = rng.normal(0.0, 1.0 / np.sqrt(kernel_size * kernel_size * I),
                        (kernel_size, kernel_size, I, features))
    return FeatureExtractor(kind, tuple(input_shape), kernel)


def extract_features(x, fe: FeatureExtractor) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != fe.input_shape:
        raise ShapeMismatchError(f"input shape {x.shape} != extractor input shape {fe.input_shape}")
    if fe.kind == "raw-flatten":
        return x.reshape(-1).copy()
    y = conv2d_arrays(x, fe.kernel, 1, fe.padding)
    return y.mean(axis=(0, 1))


def extract_features_batch(X: np.ndarray, fe: FeatureExtractor) -> np.ndarray:
    """Vectorized :func:`extract_features` over a leading batch axis."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[1:] != fe.input_shape:
        raise ShapeMismatchError(f"batch shape {X.shape} does not match {fe.input_shape}")
    if fe.kind == "raw-flatten":
        return X.reshape(len(X), -1)
    K = fe.kernel.shape[0]
    cols = im2col(X, K, 1, fe.padding)
    y = cols.reshape(len(X), -1, K * K * fe.kernel.shape[2]) @ fe.kernel.reshape(-1, fe.kernel.shape[3])
    return y.mean(axis=1)


@dataclass(frozen=True, eq=False)
class Layer:
    weight: np.ndarray  # out x in
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "weight", _readonly(self.weight))
        object.__setattr__(self, "bias", _readonly(self.bias))
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeMismatchError(f"layer weight {self.weight.shape} and bias {self.bias.shape} disagree")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")


@dataclass(frozen=True, eq=False)
class MappingNet:
    """MLP from a feature vector to a seed of shape ``seed_shape``."""

    layers: tuple[Layer, ...]
    seed_shape: tuple[int, ...]

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "seed_shape", tuple(int(n) for n in self.seed_shape))
        if not layers:
            raise ValueError("mapping net needs at least one layer")
        for k in range(1, len(layers)):
            if layers[k].weight.shape[1] != layers[k - 1].weight.shape[0]:
                raise ShapeMismatchError(
                    f"layer {k} expects {layers[k].weight.shape[1]} inputs, "
                    f"layer {k - 1} emits {layers[k - 1].weight.shape[0]}"
                )
        if layers[-1].activation != "identity":
            raise ValueError("final mapping-net layer must be linear (identity activation)")
        if layers[-1].weight.shape[0] != int(np.prod(self.seed_shape)):
            raise ShapeMismatchError(
                f"output width {layers[-1].weight.shape[0]} does not fill seed shape {self.seed_shape}"
            )

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for k, layer in enumerate(self.layers):
            out[f"W{k}"] = layer.weight
            out[f"b{k}"] = layer.bias
        return out

    def with_params(self, params: dict) -> "MappingNet":
        layers = tuple(
            Layer(params.get(f"W{k}", l.weight), params.get(f"b{k}", l.bias), l.activation)
            for k, l in enumerate(self.layers)
        )
        return MappingNet(layers, self.seed_shape)


def init_mapping_net(input_dim: int, seed_shape, rng: np.random.Generator,
                     hidden: int | None = None, depth: int = 2, activation: str = "tanh",
                     output_bias: str = "neutral", output_gain: float = 0.1) -> MappingNet:
    """Gaussian-initialized MLP.

    ``output_bias="neutral"`` starts the seed at all-ones (CP) or the
    identity (TR) so that a fresh Meta adapter behaves like its static
    counterpart; ``"zeros"`` starts it at zero.
    """
    seed_shape = tuple(seed_shape)
    out_dim = int(np.prod(seed_shape))
    R = seed_shape[0]
    hidden = 2 * R if hidden is None else hidden
    dims = [input_dim] + [hidden] * (depth - 1) + [out_dim]
    layers = []
    for k in range(depth):
        fan_in = dims[k]
        gain = output_gain if k == depth - 1 else 1.0
        W = rng.normal(0.0, gain / np.sqrt(fan_in), (dims[k + 1], fan_in))
        b = np.zeros(dims[k + 1])
        act = "identity" if k == depth - 1 else activation
        layers.append(Layer(W, b, act))
    if output_bias == "neutral":
        b = np.ones(out_dim) if len(seed_shape) == 1 else np.eye(R).reshape(-1)
        layers[-1] = Layer(layers[-1].weight, b, "identity")
    elif output_bias != "zeros":
        raise ValueError(f"output_bias must be 'neutral' or 'zeros', got {output_bias!r}")
    return MappingNet(tuple(layers), seed_shape)


def mapping_forward(net: MappingNet, f) -> np.ndarray:
    """Seed for one feature vector: ``h <- act(W h + b)`` layer by layer."""
    h = np.asarray(f, dtype=np.float64)
    if h.shape != (net.input_dim,):
        raise ShapeMismatchError(f"feature length {h.shape} != mapping-net input {net.input_dim}")
    for layer in net.layers:
        h = activate(layer.weight @ h + layer.bias, layer.activation)
    return h.reshape(net.seed_shape)


def mapping_manifest(net: MappingNet) -> dict:
    return {
        "variant": "mapping_net",
        "seed_shape": list(net.seed_shape),
        "activations": [l.activation for l in net.layers],
        "shapes": {k: list(v.shape) for k, v in net.params().items()},
    }


def save_mapping_net(net: MappingNet, directory) -> Path:
    return write_checkpoint(directory, mapping_manifest(net), net.params())


def mapping_from_manifest(manifest: dict, arrays: dict) -> MappingNet:
    layers = tuple(
        Layer(arrays[f"W{k}"], arrays[f"b{k}"], act) for k, act in enumerate(manifest["activations"])
    )
    return MappingNet(layers, tuple(manifest["seed_shape"]))


def load_mapping_net(directory) -> MappingNet:
    return mapping_from_manifest(*read_checkpoint(directory))
