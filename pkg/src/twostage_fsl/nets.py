"""Feature extractor, variance estimator and the transformer's shift MLP.

All networks use channels-last layout.  Feature maps keep their spatial
structure (``B x h x w x 64``) because the variance estimator applies 1x1
convolutions to the class-mean map; flatten with :func:`flatten` to get the
``D``-dimensional embedding used for distances.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor

VARIANCE_FLOOR = 1e-6


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


class Module:
    """Minimal parameter/buffer container with '/'-namespaced names."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, Module] = {}

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        arr = np.array(value, dtype=np.float64)
        self._buffers[name] = arr
        return arr

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + k: v for k, v in self._params.items()}
        for cname, child in self._children.items():
            out.update(child.named_parameters(f"{prefix}{cname}/"))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {prefix + k: v for k, v in self._buffers.items()}
        for cname, child in self._children.items():
            out.update(child.named_buffers(f"{prefix}{cname}/"))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {k: v.data.copy() for k, v in self.named_parameters(prefix).items()}
        out.update({k: v.copy() for k, v in self.named_buffers(prefix).items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, t in self.named_parameters(prefix).items():
            if name not in state:
                raise ConfigError(f"checkpoint is missing parameter {name!r}")
            if state[name].shape != t.shape:
                raise ConfigError(f"parameter {name!r}: checkpoint shape {state[name].shape} != {t.shape}")
            t.data = np.array(state[name], dtype=np.float64)
        for name, buf in self.named_buffers(prefix).items():
            if name not in state:
                raise ConfigError(f"checkpoint is missing buffer {name!r}")
            buf[...] = state[name]


class BatchNorm(Module):
    def __init__(self, channels: int):
        super().__init__()
        self.gamma = self.add_param("gamma", np.ones(channels))
        self.beta = self.add_param("beta", np.zeros(channels))
        self.running_mean = self.add_buffer("running_mean", np.zeros(channels))
        self.running_var = self.add_buffer("running_var", np.ones(channels))

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return T.batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var, train)


def flatten(maps: Tensor) -> Tensor:
    return T.reshape(maps, (maps.shape[0], -1))


class ConvExtractor(Module):
    """Stack of conv3x3(SAME) -> batchnorm -> relu -> maxpool2x2 blocks."""

    def __init__(self, input_shape: Sequence[int], rng: np.random.Generator,
                 n_blocks: int = 4, filters: int = 64):
        super().__init__()
        H, W, C = (int(v) for v in input_shape)
        if H < 2 ** n_blocks or W < 2 ** n_blocks:
            raise ConfigError(f"input {H}x{W} too small for {n_blocks} pooling blocks")
        self.input_shape = (H, W, C)
        self.weights = []
        self.norms = []
        cin = C
        for i in range(n_blocks):
            block = self.add_child(f"block{i}", Module())
            self.weights.append(block.add_param("conv", he_normal(rng, (3, 3, cin, filters), 9 * cin)))
            self.norms.append(block.add_child("bn", BatchNorm(filters)))
            cin = filters
        h, w = H, W
        for _ in range(n_blocks):
            h, w = h // 2, w // 2
        self.map_shape = (h, w, filters)
        self.feature_dim = h * w * filters

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        if tuple(x.shape[1:]) != self.input_shape:
            raise ConfigError(f"extractor expects samples of shape {self.input_shape}, got {x.shape[1:]}")
        for w, bn in zip(self.weights, self.norms):
            x = T.maxpool2x2(T.relu(bn(T.conv2d_3x3_same(x, w), train)))
        return x


class MLPExtractor(Module):
    """Fully connected extractor for vector data; output viewed as a 1x1 map."""

    def __init__(self, input_dim: int, rng: np.random.Generator,
                 hidden: Sequence[int] = (64, 64), out_dim: int = 64):
        super().__init__()
        self.input_shape = (int(input_dim),)
        self.weights = []
        self.norms = []
        cin = int(input_dim)
        for i, width in enumerate(hidden):
            layer = self.add_child(f"fc{i}", Module())
            self.weights.append(layer.add_param("w", he_normal(rng, (cin, width), cin)))
            self.norms.append(layer.add_child("bn", BatchNorm(width)))
            cin = width
        out = self.add_child("out", Module())
        self.w_out = out.add_param("w", he_normal(rng, (cin, out_dim), cin))
        self.b_out = out.add_param("b", np.zeros(out_dim))
        self.map_shape = (1, 1, int(out_dim))
        self.feature_dim = int(out_dim)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        if tuple(x.shape[1:]) != self.input_shape:
            raise ConfigError(f"extractor expects samples of shape {self.input_shape}, got {x.shape[1:]}")
        for w, bn in zip(self.weights, self.norms):
            x = T.relu(bn(T.matmul(x, w), train))
        x = T.add(T.matmul(x, self.w_out), self.b_out)
        return T.reshape(x, (x.shape[0], 1, 1, self.feature_dim))


def default_pool_blocks(map_shape: Sequence[int]) -> tuple[int, ...]:
    """Which variance-estimator blocks pool, chosen so the output is 1x1.

    1x1 maps never pool; 2x2 maps pool in the second block only; 5x5 maps
    (and anything needing two halvings) pool in both blocks.
    """
    h, w = map_shape[0], map_shape[1]
    size = max(h, w)
    if size == 1:
        return ()
    if size < 4:
        return (2,)
    if size < 8:
        return (1, 2)
    raise ConfigError(f"no variance-estimator pooling rule reduces a {h}x{w} map to 1x1")


class VarianceEstimator(Module):
    """Maps a class-mean feature map to a positive scalar variance.

    block 1: conv1x1(32) -> batchnorm -> [maxpool] -> relu
    block 2: conv1x1(1)  -> batchnorm -> [maxpool] -> softplus, plus a floor
    """

    def __init__(self, map_shape: Sequence[int], rng: np.random.Generator,
                 hidden: int = 32, pool_blocks: Sequence[int] | None = None):
        super().__init__()
        h, w, C = (int(v) for v in map_shape)
        self.map_shape = (h, w, C)
        self.pool_blocks = tuple(default_pool_blocks(map_shape) if pool_blocks is None else pool_blocks)
        for _ in self.pool_blocks:
            h, w = h // 2, w // 2
        if (h, w) != (1, 1):
            raise ConfigError(f"variance estimator pooling {self.pool_blocks} leaves a {h}x{w} map")
        b1 = self.add_child("block1", Module())
        self.w1 = b1.add_param("conv", he_normal(rng, (C, hidden), C))
        self.bn1 = b1.add_child("bn", BatchNorm(hidden))
        b2 = self.add_child("block2", Module())
        self.w2 = b2.add_param("conv", he_normal(rng, (hidden, 1), hidden))
        self.bn2 = b2.add_child("bn", BatchNorm(1))

    def __call__(self, maps: Tensor, train: bool) -> Tensor:
        if tuple(maps.shape[1:]) != self.map_shape:
            raise ConfigError(f"variance estimator expects maps {self.map_shape}, got {maps.shape[1:]}")
        x = self.bn1(T.conv2d_1x1(maps, self.w1), train)
        if 1 in self.pool_blocks:
            x = T.maxpool2x2(x)
        x = T.relu(x)
        x = self.bn2(T.conv2d_1x1(x, self.w2), train)
        if 2 in self.pool_blocks:
            x = T.maxpool2x2(x)
        x = T.add(T.softplus(x), VARIANCE_FLOOR)
        return T.reshape(x, (maps.shape[0],))


class ShiftMLP(Module):
    """The transformer's additive shift network.

    Two hidden fully connected layers with batchnorm and relu, then a linear
    output layer (no activation, so shifts can be negative).  The output
    layer starts at zero so the initial shift is exactly zero.
    """

    def __init__(self, dim: int, rng: np.random.Generator, hidden: Sequence[int] = (128, 96),
                 zero_output: bool = True):
        super().__init__()
        self.dim = int(dim)
        self.weights = []
        self.norms = []
        cin = self.dim
        for i, width in enumerate(hidden):
            layer = self.add_child(f"fc{i}", Module())
            self.weights.append(layer.add_param("w", he_normal(rng, (cin, width), cin)))
            self.norms.append(layer.add_child("bn", BatchNorm(width)))
            cin = width
        out = self.add_child("out", Module())
        w_init = np.zeros((cin, self.dim)) if zero_output else he_normal(rng, (cin, self.dim), cin)
        self.w_out = out.add_param("w", w_init)
        self.b_out = out.add_param("b", np.zeros(self.dim))

    def __call__(self, p: Tensor, train: bool) -> Tensor:
        if p.ndim != 2 or p.shape[1] != self.dim:
            raise ConfigError(f"shift MLP expects rows of dimension {self.dim}, got {p.shape}")
        x = p
        for w, bn in zip(self.weights, self.norms):
            x = T.relu(bn(T.matmul(x, w), train))
        return T.add(T.matmul(x, self.w_out), self.b_out)


def extract_features(extractor, batch, train: bool) -> Tensor:
    """Unflattened feature maps ``B x h x w x C`` for a batch of samples."""
    return extractor(T.as_tensor(batch), train)


def estimate_variance(fv: VarianceEstimator, prototype_maps, train: bool) -> Tensor:
    """One variance per class-mean map; always >= ``VARIANCE_FLOOR``."""
    maps = T.as_tensor(prototype_maps)
    if maps.ndim == 3:
        maps = T.reshape(maps, (1,) + maps.shape)
    return fv(maps, train)


def transformer_shift(mlp: ShiftMLP, p, train: bool) -> Tensor:
    p = T.as_tensor(p)
    if p.ndim == 1:
        p = T.reshape(p, (1, p.shape[0]))
    return mlp(p, train)


def build_extractor(kind: str, input_shape: Sequence[int], rng: np.random.Generator,
                    hidden: Sequence[int] = (64, 64), out_dim: int = 64):
    if kind == "conv":
        if len(input_shape) != 3:
            raise ConfigError(f"conv extractor needs (H, W, C) samples, got {tuple(input_shape)}")
        return ConvExtractor(input_shape, rng)
    if kind == "mlp":
        if len(input_shape) != 1:
            raise ConfigError(f"mlp extractor needs vector samples, got {tuple(input_shape)}")
        return MLPExtractor(input_shape[0], rng, hidden=hidden, out_dim=out_dim)
    raise ConfigError(f"unknown extractor kind {kind!r}")
