"""Encoder / classifier / discriminator assembly and serialization.

All three networks are small feed-forward stacks of affine layers with ReLU
between hidden layers and a linear output. Parameters travel between client
and server as one flat vector per network, in a fixed order: for each layer
front to back, weights row-major, then bias. ``vector_to_params`` inverts
``params_to_vector`` bit-exactly.

Checkpoint layout (all little-endian):
  magic "AFCL" (4 bytes), version u16, round u32, fusion weight f64,
  then for each of encoder / classifier / discriminator:
    layer count u16, per layer: in_dim u32, out_dim u32,
    weights f64 row-major (in_dim * out_dim), bias f64 (out_dim).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .numerics import AffineLayer, affine_backward, affine_forward, relu, relu_backward

CHECKPOINT_MAGIC = b"AFCL"
CHECKPOINT_VERSION = 1


@dataclass
class NetworkConfig:
    """Widths of the three networks; the discriminator always outputs 2 logits."""

    input_dim: int
    num_classes: int
    feature_dim: int = 32
    encoder_hidden: tuple[int, ...] = (128, 64)
    discriminator_hidden: int = 32

    def __post_init__(self):
        self.encoder_hidden = tuple(int(w) for w in self.encoder_hidden)
        widths = (self.input_dim, self.feature_dim, self.discriminator_hidden) + self.encoder_hidden
        if any(w < 1 for w in widths):
            raise ValueError("all network widths must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")


@dataclass
class Mlp:
    """Affine layers with ReLU between hidden layers; linear final output."""

    layers: list[AffineLayer]

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim


@dataclass
class MlpCache:
    inputs: list[np.ndarray]  # input to each affine layer
    preacts: list[np.ndarray]  # pre-activation output of each hidden layer


def mlp_forward(net: Mlp, batch: np.ndarray) -> np.ndarray:
    out = batch
    last = len(net.layers) - 1
    for i, layer in enumerate(net.layers):
        out = affine_forward(layer, out)
        if i < last:
            out = relu(out)
    return out


def mlp_forward_cached(net: Mlp, batch: np.ndarray):
    inputs, preacts = [], []
    out = np.asarray(batch, dtype=np.float64)
    last = len(net.layers) - 1
    for i, layer in enumerate(net.layers):
        inputs.append(out)
        out = affine_forward(layer, out)
        if i < last:
            preacts.append(out)
            out = relu(out)
    return out, MlpCache(inputs, preacts)


def mlp_backward(net: Mlp, cache: MlpCache, upstream: np.ndarray):
    """Backprop through the whole stack.

    Returns (grad_vector, grad_input) where grad_vector follows the
    params_to_vector layout.
    """
    per_layer = [None] * len(net.layers)
    grad = upstream
    for i in reversed(range(len(net.layers))):
        grad_w, grad_b, grad = affine_backward(net.layers[i], cache.inputs[i], grad)
        per_layer[i] = (grad_w, grad_b)
        if i > 0:
            grad = relu_backward(cache.preacts[i - 1], grad)
    pieces = []
    for grad_w, grad_b in per_layer:
        pieces.append(grad_w.ravel())
        pieces.append(grad_b)
    return np.concatenate(pieces), grad


def param_count(net: Mlp) -> int:
    return sum(l.weights.size + l.bias.size for l in net.layers)


def params_to_vector(net: Mlp) -> np.ndarray:
    pieces = []
    for layer in net.layers:
        pieces.append(layer.weights.ravel())
        pieces.append(layer.bias)
    return np.concatenate(pieces)


def vector_to_params(template: Mlp, vector: np.ndarray) -> Mlp:
    """Rebuild a network with the template's shapes from a flat vector."""
    vector = np.asarray(vector, dtype=np.float64)
    if vector.shape != (param_count(template),):
        raise ValueError(
            f"vector length {vector.shape} does not match parameter count "
            f"{param_count(template)}"
        )
    layers = []
    offset = 0
    for layer in template.layers:
        w_size = layer.weights.size
        weights = vector[offset : offset + w_size].reshape(layer.weights.shape).copy()
        offset += w_size
        bias = vector[offset : offset + layer.bias.size].copy()
        offset += layer.bias.size
        layers.append(AffineLayer(weights, bias))
    return Mlp(layers)


def clone(net: Mlp) -> Mlp:
    return Mlp([AffineLayer(l.weights.copy(), l.bias.copy()) for l in net.layers])


def _init_mlp(rng: np.random.Generator, widths: list[int]) -> Mlp:
    # Uniform in +-sqrt(6 / (fan_in + fan_out)), zero bias.
    layers = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        layers.append(AffineLayer(weights, np.zeros(fan_out)))
    return Mlp(layers)


def build_models(config: NetworkConfig, seed: int):
    """Seeded construction of (encoder, classifier, discriminator).

    Draw order is fixed (encoder, then classifier, then discriminator), so the
    same (config, seed) pair always yields bit-identical parameters.
    """
    rng = np.random.default_rng(seed)
    encoder = _init_mlp(rng, [config.input_dim, *config.encoder_hidden, config.feature_dim])
    classifier = _init_mlp(rng, [config.feature_dim, config.num_classes])
    discriminator = _init_mlp(rng, [config.feature_dim, config.discriminator_hidden, 2])
    return encoder, classifier, discriminator


def encode(encoder: Mlp, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != encoder.in_dim:
        raise ValueError(
            f"batch width {batch.shape} does not match encoder input {encoder.in_dim}"
        )
    return mlp_forward(encoder, batch)


def classify(classifier: Mlp, features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != classifier.in_dim:
        raise ValueError(
            f"feature width {features.shape} does not match classifier input "
            f"{classifier.in_dim}"
        )
    return mlp_forward(classifier, features)


def discriminate(discriminator: Mlp, features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != discriminator.in_dim:
        raise ValueError(
            f"feature width {features.shape} does not match discriminator input "
            f"{discriminator.in_dim}"
        )
    return mlp_forward(discriminator, features)


def checkpoint_save(
    encoder: Mlp,
    classifier: Mlp,
    discriminator: Mlp,
    fusion_weight: float,
    round_index: int,
) -> bytes:
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<HId", CHECKPOINT_VERSION, round_index, fusion_weight),
    ]
    for net in (encoder, classifier, discriminator):
        parts.append(struct.pack("<H", len(net.layers)))
        for layer in net.layers:
            parts.append(struct.pack("<II", layer.in_dim, layer.out_dim))
            parts.append(layer.weights.astype("<f8").tobytes())
            parts.append(layer.bias.astype("<f8").tobytes())
    return b"".join(parts)


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise ValueError("truncated checkpoint")
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def checkpoint_load(data: bytes):
    """Inverse of checkpoint_save; bit-exact round-trip.

    Returns (encoder, classifier, discriminator, fusion_weight, round_index).
    """
    cur = _Cursor(data)
    if cur.take(4) != CHECKPOINT_MAGIC:
        raise ValueError("bad magic")
    version, round_index, fusion_weight = cur.unpack("<HId")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    nets = []
    for _ in range(3):
        (layer_count,) = cur.unpack("<H")
        layers = []
        for _ in range(layer_count):
            in_dim, out_dim = cur.unpack("<II")
            weights = np.frombuffer(cur.take(8 * in_dim * out_dim), dtype="<f8")
            bias = np.frombuffer(cur.take(8 * out_dim), dtype="<f8")
            layers.append(AffineLayer(weights.reshape(in_dim, out_dim).copy(), bias.copy()))
        nets.append(Mlp(layers))
    if cur.offset != len(data):
        raise ValueError("checkpoint has trailing bytes (shape count mismatch)")
    encoder, classifier, discriminator = nets
    return encoder, classifier, discriminator, fusion_weight, round_index
