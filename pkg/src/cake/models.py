"""Classifier architectures used as teachers and students.

A ``Network`` is an ordered list of ``LayerSpec`` records plus the parameter
tensors they own.  The only thing the rest of the package asks of a network is
logits for a batch and, through autodiff, gradients with respect to its input.

LeNet-5 layout for single-channel 32x32 input (``half`` halves every width)::

    conv 6@5x5 -> relu -> pool2 -> conv 16@5x5 -> relu -> pool2 -> flatten
    -> dense 120 -> relu -> dense 84 -> relu -> dense C

which gives 61,706 parameters (15,738 for the half model) at C=10.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError

LAYER_KINDS = ("dense", "conv", "maxpool", "relu", "flatten")


@dataclass(frozen=True)
class LayerSpec:
    """One layer.  ``dims`` is (in, out) for dense, (out_ch, in_ch, kh, kw)
    for conv, (size,) for maxpool and empty otherwise."""

    kind: str
    dims: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")

    @property
    def param_shapes(self) -> list[tuple[int, ...]]:
        if self.kind == "dense":
            return [self.dims, (self.dims[1],)]
        if self.kind == "conv":
            return [self.dims, (self.dims[0],)]
        return []

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        if self.kind == "dense":
            if in_shape != (self.dims[0],):
                raise DimensionError(f"dense layer expects ({self.dims[0]},), got {in_shape}")
            return (self.dims[1],)
        if self.kind == "conv":
            if len(in_shape) != 3 or in_shape[0] != self.dims[1]:
                raise DimensionError(f"conv layer expects {self.dims[1]} channels, got {in_shape}")
            _, h, w = in_shape
            return (self.dims[0], h - self.dims[2] + 1, w - self.dims[3] + 1)
        if self.kind == "maxpool":
            c, h, w = in_shape
            s = self.dims[0]
            if h % s or w % s:
                raise DimensionError(f"maxpool{s} cannot pool {h}x{w}")
            return (c, h // s, w // s)
        if self.kind == "flatten":
            return (int(np.prod(in_shape)),)
        return in_shape


@dataclass
class Network:
    layers: list[LayerSpec]
    params: list[Tensor]
    input_shape: tuple[int, ...]
    num_classes: int
    name: str = "custom"
    _slots: list[tuple[int, ...]] = field(init=False, repr=False)

    def __post_init__(self):
        shape = tuple(self.input_shape)
        slots = []
        k = 0
        for layer in self.layers:
            shape = layer.output_shape(shape)
            n = len(layer.param_shapes)
            slots.append(tuple(range(k, k + n)))
            k += n
        if shape != (self.num_classes,):
            raise ConfigError(f"network ends in shape {shape}, expected ({self.num_classes},)")
        if k != len(self.params):
            raise ConfigError(f"layers need {k} parameter tensors, got {len(self.params)}")
        expected = [s for layer in self.layers for s in layer.param_shapes]
        for p, s in zip(self.params, expected):
            if p.shape != tuple(s):
                raise DimensionError(f"parameter shape {p.shape} != layer shape {tuple(s)}")
        self._slots = slots

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:
        if tuple(x.shape[1:]) != tuple(self.input_shape):
            raise DimensionError(f"{self.name} expects samples of shape {self.input_shape}, got {x.shape[1:]}")
        h = x
        for layer, slot in zip(self.layers, self._slots):
            if layer.kind == "dense":
                w, b = (self.params[i] for i in slot)
                h = ad.add_bias(ad.matmul(h, w), b)
            elif layer.kind == "conv":
                w, b = (self.params[i] for i in slot)
                h = ad.conv2d(h, w, b)
            elif layer.kind == "maxpool":
                h = ad.maxpool2d(h, layer.dims[0])
            elif layer.kind == "relu":
                h = ad.relu(h)
            else:
                h = ad.flatten(h)
        return h

    def parameters(self) -> list[Tensor]:
        return self.params

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, (layer, slot) in enumerate(zip(self.layers, self._slots)):
            for suffix, j in zip(("weight", "bias"), slot):
                out.append((f"{i}.{layer.kind}.{suffix}", self.params[j]))
        return out

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def requires_grad_(self, flag: bool) -> Network:
        for p in self.params:
            p.requires_grad = flag
        return self

    def copy(self, dtype=None) -> Network:
        """Deep copy; optionally cast parameters (float64 for gradient checks)."""
        if dtype is None:
            dtype = self.params[0].dtype if self.params else np.float32
        params = [Tensor(p.data.copy(), requires_grad=p.requires_grad, dtype=dtype) for p in self.params]
        return Network(list(self.layers), params, tuple(self.input_shape), self.num_classes, self.name)


def _glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def build_network(
    layers: Sequence[LayerSpec],
    input_shape: Sequence[int],
    num_classes: int,
    rng: np.random.Generator,
    name: str = "custom",
) -> Network:
    params = []
    for layer in layers:
        if layer.kind == "dense":
            fan_in, fan_out = layer.dims
            params.append(Tensor(_glorot(rng, layer.dims, fan_in, fan_out), requires_grad=True))
            params.append(Tensor(np.zeros(fan_out), requires_grad=True))
        elif layer.kind == "conv":
            f, c, kh, kw = layer.dims
            params.append(Tensor(_glorot(rng, layer.dims, c * kh * kw, f * kh * kw), requires_grad=True))
            params.append(Tensor(np.zeros(f), requires_grad=True))
    return Network(list(layers), params, tuple(input_shape), num_classes, name)


def mlp_new(
    input_dim: int,
    hidden: Sequence[int],
    num_classes: int,
    rng: np.random.Generator,
    input_shape: Sequence[int] | None = None,
) -> Network:
    """Dense-ReLU stack with a linear logit layer.

    ``input_shape`` lets the MLP take image tensors directly; a flatten layer is
    prepended and its element count must equal ``input_dim``.
    """
    hidden = list(hidden)
    if not hidden:
        raise ConfigError("mlp needs at least one hidden layer")
    if input_dim <= 0 or num_classes <= 0 or any(w <= 0 for w in hidden):
        raise ConfigError(f"mlp widths must be positive: {input_dim}, {hidden}, {num_classes}")
    layers: list[LayerSpec] = []
    shape: tuple[int, ...] = (input_dim,)
    if input_shape is not None and tuple(input_shape) != (input_dim,):
        if int(np.prod(input_shape)) != input_dim:
            raise ConfigError(f"input_shape {tuple(input_shape)} does not flatten to {input_dim}")
        layers.append(LayerSpec("flatten"))
        shape = tuple(input_shape)
    widths = [input_dim] + hidden
    for a, b in zip(widths[:-1], widths[1:]):
        layers += [LayerSpec("dense", (a, b)), LayerSpec("relu")]
    layers.append(LayerSpec("dense", (widths[-1], num_classes)))
    return build_network(layers, shape, num_classes, rng, name="mlp")


def lenet5_new(half: bool, rng: np.random.Generator, num_classes: int = 10) -> Network:
    c1, c2, d1, d2 = (3, 8, 60, 42) if half else (6, 16, 120, 84)
    layers = [
        LayerSpec("conv", (c1, 1, 5, 5)),
        LayerSpec("relu"),
        LayerSpec("maxpool", (2,)),
        LayerSpec("conv", (c2, c1, 5, 5)),
        LayerSpec("relu"),
        LayerSpec("maxpool", (2,)),
        LayerSpec("flatten"),
        LayerSpec("dense", (c2 * 25, d1)),
        LayerSpec("relu"),
        LayerSpec("dense", (d1, d2)),
        LayerSpec("relu"),
        LayerSpec("dense", (d2, num_classes)),
    ]
    return build_network(layers, (1, 32, 32), num_classes, rng, name="lenet5_half" if half else "lenet5")


def forward_logits(net: Network, x, track_input_grad: bool = False) -> Tensor:
    """Logits for a batch.  With ``track_input_grad`` the returned graph reaches
    back to ``x`` so a later ``backward`` fills ``x.grad``; ``x`` must then be a
    Tensor the caller keeps."""
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if track_input_grad:
        x.requires_grad = True
    return net.forward(x)
