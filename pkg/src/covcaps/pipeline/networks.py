"""The three trainable networks: slice-level capsule net, candidate capsule net, fusion MLP."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad
from ..autodiff import BatchNormState, Tensor
from ..capsules import MarginLossConfig, capsule_layer, primary_caps
from ..errors import ConfigurationError, DimensionError


@dataclass(frozen=True)
class Stage1Config:
    input_side: int = 64
    conv_channels: tuple[int, ...] = (8, 8, 16, 16)
    kernel_size: int = 3
    pool_window: int = 2
    pool_after: int = 2
    shortcuts: tuple[tuple[int, int], ...] = ((1, 3), (2, 4))
    primary_dim: int = 8
    capsule_layers: tuple[tuple[int, int], ...] = ((8, 8), (8, 8), (2, 16))
    routing_iterations: int = 3
    loss: MarginLossConfig = field(default_factory=MarginLossConfig)

    def __post_init__(self):
        if len(self.conv_channels) != 4:
            raise ConfigurationError("stage 1 needs exactly 4 convolutional layers")
        if len(self.capsule_layers) != 3:
            raise ConfigurationError("stage 1 needs exactly 3 capsule layers")
        if len(self.shortcuts) != 2:
            raise ConfigurationError("stage 1 needs exactly 2 shortcut connections")
        for src, dst in self.shortcuts:
            if not 1 <= src < dst - 1 < 4:
                raise ConfigurationError(f"shortcut {src}->{dst} must skip at least one conv layer")
        if self.capsule_layers[-1][0] != 2:
            raise ConfigurationError("stage 1 ends in 2 capsules (non-infected, infected)")
        if not 1 <= self.pool_after <= 4 or self.kernel_size % 2 == 0:
            raise ConfigurationError("pool_after must be 1..4 and kernel_size odd")
        _check_common(self)


@dataclass(frozen=True)
class Stage2Config:
    input_side: int = 64
    candidate_count: int = 10
    conv_channels: tuple[int, ...] = (8, 8, 16)
    kernel_size: int = 3
    pool_window: int = 2
    primary_dim: int = 8
    capsule_layers: tuple[tuple[int, int], ...] = ((8, 8), (3, 16))
    routing_iterations: int = 3
    loss: MarginLossConfig = field(default_factory=MarginLossConfig)

    def __post_init__(self):
        if len(self.conv_channels) != 3:
            raise ConfigurationError("stage 2 needs exactly 3 convolutional layers")
        if len(self.capsule_layers) != 2:
            raise ConfigurationError("stage 2 needs exactly 2 capsule layers")
        if self.capsule_layers[-1][0] != 3:
            raise ConfigurationError("stage 2 ends in 3 capsules (covid, cap, normal)")
        if self.candidate_count < 1 or self.kernel_size % 2 == 0:
            raise ConfigurationError("candidate_count must be positive and kernel_size odd")
        _check_common(self)


def _check_common(cfg) -> None:
    if cfg.routing_iterations < 1:
        raise ConfigurationError("routing_iterations must be at least 1")
    if cfg.input_side % cfg.pool_window:
        raise ConfigurationError(f"pool window {cfg.pool_window} must divide side {cfg.input_side}")
    if cfg.conv_channels[-1] % cfg.primary_dim:
        raise ConfigurationError(f"last conv width {cfg.conv_channels[-1]} is not a multiple of "
                                 f"primary capsule length {cfg.primary_dim}")


def config_to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def config_from_dict(cls, d: dict):
    d = dict(d)
    unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
    if unknown:
        raise ConfigurationError(f"unknown {cls.__name__} keys {sorted(unknown)}")
    if "loss" in d and isinstance(d["loss"], dict):
        loss = dict(d["loss"])
        if loss.get("class_weights") is not None:
            loss["class_weights"] = tuple(loss["class_weights"])
        d["loss"] = MarginLossConfig(**loss)
    for k, v in list(d.items()):
        if isinstance(v, list):
            d[k] = tuple(tuple(x) if isinstance(x, list) else x for x in v)
    return cls(**d)


class Network:
    """Named parameters plus batch-norm running statistics."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.bn: dict[str, BatchNormState] = {}

    def _param(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(data, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def _bn(self, name: str, features: int) -> None:
        self._param(f"{name}.gamma", np.ones(features))
        self._param(f"{name}.beta", np.zeros(features))
        self.bn[name] = BatchNormState.fresh(features)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {k: t.data.copy() for k, t in self.params.items()}
        for k, s in self.bn.items():
            out[f"{k}.running_mean"] = s.running_mean.copy()
            out[f"{k}.running_var"] = s.running_var.copy()
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        expected = set(self.state_arrays())
        if set(arrays) != expected:
            missing, extra = expected - set(arrays), set(arrays) - expected
            raise ConfigurationError(f"parameter mismatch: missing {sorted(missing)}, "
                                     f"unexpected {sorted(extra)}")
        for k, t in self.params.items():
            if arrays[k].shape != t.shape:
                raise DimensionError(f"{k}: stored shape {arrays[k].shape} != {t.shape}")
            t.data = np.array(arrays[k], dtype=np.float64)
        for k, s in self.bn.items():
            s.running_mean = np.array(arrays[f"{k}.running_mean"], dtype=np.float64)
            s.running_var = np.array(arrays[f"{k}.running_var"], dtype=np.float64)

    def parameter_count(self) -> int:
        return int(sum(t.size for t in self.params.values()))


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _caps_weights(rng, n_in, n_out, d_out, d_in):
    # starts the final capsule norms near 0.4, away from both the flat region of
    # squash at the origin and its saturation towards 1
    std = 1.6 * n_out / (np.sqrt(n_in) * np.sqrt(d_in))
    return rng.normal(0.0, std, size=(n_in, n_out, d_out, d_in))


def _conv_block(x: Tensor, params, name: str, padding: int) -> Tensor:
    y = ad.conv2d(x, params[f"{name}.weight"], 1, padding)
    return ad.relu(ad.bias_add(y, params[f"{name}.bias"], axis=1))


def _as_batch(x, side: int) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim == 2:
        x = Tensor(x.data[None, None]) if not x.requires_grad else ad.reshape(x, (1, 1) + x.shape)
    elif x.ndim == 3:
        x = ad.reshape(x, (x.shape[0], 1) + x.shape[1:])
    if x.ndim != 4 or x.shape[1:] != (1, side, side):
        raise DimensionError(f"expected slices of side {side}, got {x.shape}")
    return x


@dataclass
class Forward:
    """Output of a capsule network pass: final capsule norms and named activations."""

    norms: Tensor
    activations: dict[str, Tensor]
    couplings: list[np.ndarray]


class Stage1Net(Network):
    """Four convs with one pool and two shortcuts, batch norm, then three capsule layers.

    A shortcut ``(a, b)`` concatenates conv ``a``'s output onto conv ``b``'s
    input along channels; activations from before the pool are pooled too.
    """

    def __init__(self, config: Stage1Config, rng: np.random.Generator):
        super().__init__()
        self.config = config
        k = config.kernel_size
        widths = config.conv_channels
        for layer in range(1, 5):
            c_in = 1 if layer == 1 else widths[layer - 2]
            c_in += sum(widths[src - 1] for src, dst in config.shortcuts if dst == layer)
            self._param(f"conv{layer}.weight", _he(rng, (widths[layer - 1], c_in, k, k), c_in * k * k))
            self._param(f"conv{layer}.bias", np.zeros(widths[layer - 1]))
        self._bn("bn", widths[-1])
        side = config.input_side // config.pool_window
        n_in, d_in = (widths[-1] // config.primary_dim) * side * side, config.primary_dim
        for i, (n_out, d_out) in enumerate(config.capsule_layers, start=1):
            self._param(f"caps{i}.weight", _caps_weights(rng, n_in, n_out, d_out, d_in))
            n_in, d_in = n_out, d_out

    def forward(self, x, training: bool = False, differentiable_routing: bool = False) -> Forward:
        cfg, p = self.config, self.params
        x = _as_batch(x, cfg.input_side)
        pad = cfg.kernel_size // 2
        acts: dict[str, Tensor] = {}
        pooled: dict[int, Tensor] = {}

        def source(layer: int, consumer: int) -> Tensor:
            if layer <= cfg.pool_after < consumer:
                if layer not in pooled:
                    pooled[layer] = ad.maxpool2d(acts[f"conv{layer}"], cfg.pool_window)
                return pooled[layer]
            return acts[f"conv{layer}"]

        h = x
        for layer in range(1, 5):
            if layer > 1:
                parts = [source(layer - 1, layer)]
                parts += [source(src, layer) for src, dst in cfg.shortcuts if dst == layer]
                h = parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)
            acts[f"conv{layer}"] = _conv_block(h, p, f"conv{layer}", pad)
        h = acts["conv4"]
        if cfg.pool_after == 4:
            h = ad.maxpool2d(h, cfg.pool_window)
        h = ad.batchnorm2d(h, p["bn.gamma"], p["bn.beta"], self.bn["bn"], training)
        caps = primary_caps(h, cfg.primary_dim)
        couplings = []
        for i in range(1, 4):
            caps, state = capsule_layer(caps, p[f"caps{i}.weight"], cfg.routing_iterations,
                                        differentiable_routing)
            couplings.append(state.couplings)
        return Forward(ad.norm(caps, axis=-1), acts, couplings)


class Stage2Net(Network):
    """Shared per-candidate network: conv, conv, batch norm, max pool, conv, two capsule layers."""

    def __init__(self, config: Stage2Config, rng: np.random.Generator):
        super().__init__()
        self.config = config
        k, widths = config.kernel_size, config.conv_channels
        c_in = 1
        for layer, width in enumerate(widths, start=1):
            self._param(f"conv{layer}.weight", _he(rng, (width, c_in, k, k), c_in * k * k))
            self._param(f"conv{layer}.bias", np.zeros(width))
            c_in = width
        self._bn("bn", widths[1])
        side = config.input_side // config.pool_window
        n_in, d_in = (widths[-1] // config.primary_dim) * side * side, config.primary_dim
        for i, (n_out, d_out) in enumerate(config.capsule_layers, start=1):
            self._param(f"caps{i}.weight", _caps_weights(rng, n_in, n_out, d_out, d_in))
            n_in, d_in = n_out, d_out

    def forward(self, x, training: bool = False, differentiable_routing: bool = False) -> Forward:
        cfg, p = self.config, self.params
        x = _as_batch(x, cfg.input_side)
        pad = cfg.kernel_size // 2
        acts = {}
        acts["conv1"] = _conv_block(x, p, "conv1", pad)
        acts["conv2"] = _conv_block(acts["conv1"], p, "conv2", pad)
        h = ad.batchnorm2d(acts["conv2"], p["bn.gamma"], p["bn.beta"], self.bn["bn"], training)
        h = ad.maxpool2d(h, cfg.pool_window)
        acts["conv3"] = _conv_block(h, p, "conv3", pad)
        caps = primary_caps(acts["conv3"], cfg.primary_dim)
        couplings = []
        for i in range(1, len(cfg.capsule_layers) + 1):
            caps, state = capsule_layer(caps, p[f"caps{i}.weight"], cfg.routing_iterations,
                                        differentiable_routing)
            couplings.append(state.couplings)
        return Forward(ad.norm(caps, axis=-1), acts, couplings)


FUSION_WIDTH = 64
FUSION_DEPTH = 4
FUSION_INPUTS = 11


class FusionMLP(Network):
    """Four FC(64) + batch norm + ReLU blocks and a 3-way softmax output layer."""

    def __init__(self, rng: np.random.Generator, width: int = FUSION_WIDTH,
                 depth: int = FUSION_DEPTH):
        super().__init__()
        self.width, self.depth = width, depth
        fan_in = FUSION_INPUTS
        for i in range(1, depth + 1):
            self._param(f"fc{i}.weight", _he(rng, (fan_in, width), fan_in))
            self._param(f"fc{i}.bias", np.zeros(width))
            self._bn(f"bn{i}", width)
            fan_in = width
        self._param("out.weight", rng.normal(0.0, np.sqrt(1.0 / fan_in), size=(fan_in, 3)))
        self._param("out.bias", np.zeros(3))

    def logits(self, x, training: bool = False) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.atleast_2d(x))
        if x.ndim != 2 or x.shape[1] != FUSION_INPUTS:
            raise DimensionError(f"fusion input must be n x {FUSION_INPUTS}, got {x.shape}")
        p, h = self.params, x
        for i in range(1, self.depth + 1):
            h = ad.bias_add(ad.matmul(h, p[f"fc{i}.weight"]), p[f"fc{i}.bias"])
            h = ad.batchnorm(h, p[f"bn{i}.gamma"], p[f"bn{i}.beta"], self.bn[f"bn{i}"], training)
            h = ad.relu(h)
        return ad.bias_add(ad.matmul(h, p["out.weight"]), p["out.bias"])
