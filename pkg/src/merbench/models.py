"""The three emotion-regression variants and their losses.

All variants share a VGG-style convolutional trunk followed by global
average pooling and a fully connected embedding layer.  They differ only in
the head:

* ``A2E``   -- embedding -> 8 emotions (one linear layer)
* ``A2B2E`` -- embedding -> 7-unit linear bottleneck -> 8 emotions
* ``A2M2E`` -- same architecture as A2B2E, bottleneck supervised on the
  seven mid-level descriptors
"""

from __future__ import annotations

import hashlib
import json
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Iterator, Mapping

import numpy as np

from . import tensor as T
from .container import FormatError, read_tensors, write_tensors
from .tensor import Tensor

VARIANTS = ("A2E", "A2B2E", "A2M2E")
BOTTLENECK_VARIANTS = ("A2B2E", "A2M2E")
ACTIVATIONS = ("relu", "tanh")

EMOTIONS = ("anger", "fear", "sadness", "happiness", "tenderness", "valence", "energy", "tension")
MIDLEVEL = ("melodiousness", "articulation", "rhythmic_stability", "tonal_stability",
            "rhythmic_complexity", "dissonance", "modality")


class ConfigError(ValueError):
    """Invalid model, training or experiment configuration."""


class ShapeError(FormatError):
    """A checkpoint layer does not match the shape required by the spec."""


@dataclass(frozen=True)
class ConvBlock:
    out_channels: int
    kernel: int = 3
    pool: int = 2


@dataclass(frozen=True)
class ModelSpec:
    variant: str = "A2E"
    conv_blocks: tuple[ConvBlock, ...] = (ConvBlock(8), ConvBlock(16), ConvBlock(32))
    embedding_dim: int = 32
    n_midlevel: int = 7
    n_emotions: int = 8
    activation: str = "relu"
    in_channels: int = 1

    def __post_init__(self):
        blocks = tuple(b if isinstance(b, ConvBlock) else ConvBlock(*b) if isinstance(b, (list, tuple))
                       else ConvBlock(**b) for b in self.conv_blocks)
        object.__setattr__(self, "conv_blocks", blocks)
        variant = self.variant.upper()
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        object.__setattr__(self, "variant", variant)
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def has_bottleneck(self) -> bool:
        return self.variant in BOTTLENECK_VARIANTS

    def with_variant(self, variant: str) -> "ModelSpec":
        return ModelSpec(variant, self.conv_blocks, self.embedding_dim, self.n_midlevel,
                         self.n_emotions, self.activation, self.in_channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_blocks"] = [asdict(b) for b in self.conv_blocks]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        d = dict(d)
        if "conv_blocks" in d:
            d["conv_blocks"] = tuple(ConvBlock(**b) if isinstance(b, Mapping) else ConvBlock(*b)
                                     for b in d["conv_blocks"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model fields {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> bytes:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()

    def param_shapes(self) -> "OrderedDict[str, tuple[int, ...]]":
        """Name -> shape for every parameter, in forward order."""
        shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
        c_in = self.in_channels
        for i, block in enumerate(self.conv_blocks):
            shapes[f"conv{i}.weight"] = (block.out_channels, c_in, block.kernel, block.kernel)
            shapes[f"conv{i}.bias"] = (block.out_channels,)
            c_in = block.out_channels
        shapes["embed.weight"] = (c_in, self.embedding_dim)
        shapes["embed.bias"] = (self.embedding_dim,)
        if self.has_bottleneck:
            shapes["bottleneck.weight"] = (self.embedding_dim, self.n_midlevel)
            shapes["bottleneck.bias"] = (self.n_midlevel,)
            shapes["head.weight"] = (self.n_midlevel, self.n_emotions)
        else:
            shapes["head.weight"] = (self.embedding_dim, self.n_emotions)
        shapes["head.bias"] = (self.n_emotions,)
        for name, shape in shapes.items():
            if 0 in shape:
                raise ConfigError(f"layer {name} has zero size {shape}")
        return shapes


@dataclass
class ModelParams:
    """Ordered mapping layer name -> parameter tensor, plus the init seed."""

    tensors: "OrderedDict[str, Tensor]"
    seed: int = 0

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def copy(self) -> "ModelParams":
        return ModelParams(OrderedDict((k, Tensor(v.data, requires_grad=v.requires_grad, dtype=v.dtype))
                                       for k, v in self.tensors.items()), self.seed)

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(OrderedDict((k, Tensor(v.data, requires_grad=True, dtype=dtype))
                                       for k, v in self.tensors.items()), self.seed)


@dataclass
class ModelOutput:
    emotions: Tensor
    midlevel: Tensor | None = None


def build_model(spec: ModelSpec, seed: int, dtype=None) -> ModelParams:
    """Initialize parameters deterministically from ``seed``.

    Weights are uniform in +-sqrt(6 / fan_in); biases start at zero.
    """
    dtype = np.dtype(dtype or T.default_dtype())
    rng = np.random.default_rng(seed)
    tensors: OrderedDict[str, Tensor] = OrderedDict()
    for name, shape in spec.param_shapes().items():
        if name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            bound = np.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(data, requires_grad=True, dtype=dtype)
    return ModelParams(tensors, seed)


def _activate(spec: ModelSpec, x: Tensor) -> Tensor:
    return T.relu(x) if spec.activation == "relu" else T.tanh(x)


def embed(params: ModelParams, spec: ModelSpec, x: Tensor) -> Tensor:
    """Trunk: conv blocks, global average pooling, embedding layer."""
    if x.ndim != 4:
        raise T.DimensionError(f"expected input (B, {spec.in_channels}, F, T), got {x.shape}")
    h = x
    for i, block in enumerate(spec.conv_blocks):
        pad = block.kernel // 2
        h = T.conv2d(h, params[f"conv{i}.weight"], params[f"conv{i}.bias"], padding=pad)
        h = _activate(spec, h)
        if block.pool > 1:
            if h.shape[-1] < block.pool or h.shape[-2] < block.pool:
                raise T.DimensionError(f"input {x.shape} too small: block {i} cannot pool "
                                       f"{block.pool}x{block.pool} over {h.shape[-2:]}")
            h = T.maxpool2d(h, block.pool, block.pool)
    h = T.global_avg_pool(h)
    return _activate(spec, T.linear(h, params["embed.weight"], params["embed.bias"]))


def forward(params: ModelParams, spec: ModelSpec, x) -> ModelOutput:
    """Predict emotions (and bottleneck activations for bottleneck variants)."""
    if not isinstance(x, Tensor):
        x = Tensor(x, dtype=params["head.weight"].dtype)
    h = embed(params, spec, x)
    if spec.has_bottleneck:
        mid = T.linear(h, params["bottleneck.weight"], params["bottleneck.bias"])
        emo = T.linear(mid, params["head.weight"], params["head.bias"])
        return ModelOutput(emo, mid)
    return ModelOutput(T.linear(h, params["head.weight"], params["head.bias"]))


def predict(params: ModelParams, spec: ModelSpec, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Emotion predictions without building a graph."""
    outs = []
    with T.no_grad():
        for start in range(0, len(x), batch_size):
            outs.append(forward(params, spec, x[start:start + batch_size]).emotions.data)
    return np.concatenate(outs, axis=0)


def loss_a2e(out: ModelOutput, y_emotion) -> Tensor:
    return T.mse_loss(out.emotions, y_emotion)


loss_a2b2e = loss_a2e


def loss_a2m2e(out: ModelOutput, y_emotion, y_midlevel) -> Tensor:
    """Joint loss: 0.5 * emotion MSE + 0.5 * mid-level MSE."""
    if out.midlevel is None:
        raise ConfigError("A2M2E loss needs bottleneck (mid-level) outputs")
    if y_midlevel is None:
        raise ConfigError("A2M2E loss needs mid-level targets")
    emo = T.mse_loss(out.emotions, y_emotion)
    mid = T.mse_loss(out.midlevel, y_midlevel)
    return T.add(T.mul_scalar(emo, 0.5), T.mul_scalar(mid, 0.5))


def variant_loss(spec: ModelSpec, out: ModelOutput, y_emotion, y_midlevel=None) -> Tensor:
    """The training loss of ``spec.variant``."""
    if spec.variant == "A2M2E":
        return loss_a2m2e(out, y_emotion, y_midlevel)
    return loss_a2e(out, y_emotion)


# -- checkpoints ---------------------------------------------------------------

def save_params(params: ModelParams, spec: ModelSpec) -> bytes:
    return write_tensors(OrderedDict((k, v.data) for k, v in params.items()), spec.digest())


def load_params(blob: bytes, spec: ModelSpec, seed: int = 0) -> ModelParams:
    """Rebuild parameters from a checkpoint written by :func:`save_params`."""
    digest, arrays = read_tensors(blob)
    expected = spec.param_shapes()
    for name, shape in expected.items():
        if name not in arrays:
            raise ShapeError(f"checkpoint lacks layer {name!r}")
        if arrays[name].shape != shape:
            raise ShapeError(f"layer {name!r}: checkpoint shape {arrays[name].shape}, spec needs {shape}")
    extra = sorted(set(arrays) - set(expected))
    if extra:
        raise ShapeError(f"checkpoint has layers unknown to the spec: {extra}")
    if digest != spec.digest():
        raise FormatError("checkpoint was written for a different model spec")
    return ModelParams(OrderedDict((k, Tensor(arrays[k], requires_grad=True, dtype=np.float32))
                                   for k in expected), seed)
