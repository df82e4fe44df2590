"""Architecture and hyperparameter descriptions, shape arithmetic and config files.

An architecture is an ordered list of convolutional layers followed by an
implicit dense readout whose filter covers the whole final feature map.
Layers are numbered from 1; layer ``k`` maps the output of layer ``k - 1``
(the input image for ``k = 1``) to a new activation map.  A layer with
``skip_span = s`` adds the pre-activations of layer ``k - s`` to its own
output, so ``s = 1`` is a residual block with a single convolution and
``s = 2`` the two-convolution basic block of a ResNet.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError


class Nonlinearity(str, enum.Enum):
    RELU = "relu"
    ERF = "erf"


class Padding(str, enum.Enum):
    SAME = "same"
    VALID = "valid"


class FanInMode(str, enum.Enum):
    CHANNELS = "channels"
    CHANNELS_AND_FILTER = "channels_and_filter"


class ReluPrefactor(str, enum.Enum):
    STANDARD = "standard"
    PAPER_LITERAL = "paper-literal"


class LayerKind(str, enum.Enum):
    CONV = "conv"
    CONV_WITH_SKIP = "conv_with_skip"


def _enum(cls, value, what):
    if isinstance(value, cls):
        return value
    try:
        return cls(str(value).lower())
    except ValueError:
        allowed = ", ".join(m.value for m in cls)
        raise ConfigError(f"unknown {what} {value!r}; expected one of: {allowed}") from None


def output_size(n: int, f: int, stride: int, padding: Padding) -> int:
    """Spatial extent produced by a filter of size ``f`` along an axis of size ``n``."""
    if padding is Padding.SAME:
        return -(-n // stride)
    if f > n:
        return 0
    return (n - f) // stride + 1


def same_padding(n: int, f: int, stride: int) -> tuple[int, int]:
    """Zero padding (before, after) for Same convolution, extra cell at the end."""
    out = -(-n // stride)
    total = max((out - 1) * stride + f - n, 0)
    return total // 2, total - total // 2


@dataclass(frozen=True)
class LayerSpec:
    filter_height: int
    filter_width: int
    stride: int = 1
    padding: Padding = Padding.SAME
    skip_span: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "padding", _enum(Padding, self.padding, "padding"))
        for name in ("filter_height", "filter_width", "stride"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.skip_span is not None and (
            not isinstance(self.skip_span, int) or self.skip_span < 1
        ):
            raise ConfigError(f"skip_span must be a positive integer, got {self.skip_span!r}")

    @property
    def kind(self) -> LayerKind:
        return LayerKind.CONV if self.skip_span is None else LayerKind.CONV_WITH_SKIP

    @property
    def filter_area(self) -> int:
        return self.filter_height * self.filter_width

    def output_shape(self, hw: tuple[int, int]) -> tuple[int, int]:
        return (
            output_size(hw[0], self.filter_height, self.stride, self.padding),
            output_size(hw[1], self.filter_width, self.stride, self.padding),
        )

    def pads(self, hw: tuple[int, int]) -> tuple[int, int]:
        """(top, left) zero padding applied to an input of shape ``hw``."""
        if self.padding is Padding.VALID:
            return 0, 0
        return (
            same_padding(hw[0], self.filter_height, self.stride)[0],
            same_padding(hw[1], self.filter_width, self.stride)[0],
        )


@dataclass(frozen=True)
class Hyperparameters:
    sigma_b_sq: float
    sigma_w_sq: float
    fan_in_mode: FanInMode = FanInMode.CHANNELS
    relu_prefactor: ReluPrefactor = ReluPrefactor.STANDARD

    def __post_init__(self):
        object.__setattr__(self, "fan_in_mode", _enum(FanInMode, self.fan_in_mode, "fan_in_mode"))
        object.__setattr__(
            self, "relu_prefactor", _enum(ReluPrefactor, self.relu_prefactor, "relu_prefactor")
        )
        b, w = float(self.sigma_b_sq), float(self.sigma_w_sq)
        if not (math.isfinite(b) and b >= 0):
            raise ConfigError(f"sigma_b_sq must be finite and >= 0, got {self.sigma_b_sq!r}")
        if not (math.isfinite(w) and w > 0):
            raise ConfigError(f"sigma_w_sq must be finite and > 0, got {self.sigma_w_sq!r}")
        object.__setattr__(self, "sigma_b_sq", b)
        object.__setattr__(self, "sigma_w_sq", w)

    @property
    def relu_factor(self) -> float:
        return 1 / math.pi if self.relu_prefactor is ReluPrefactor.PAPER_LITERAL else 0.5 / math.pi

    def filter_norm(self, filter_area: int) -> int:
        return filter_area if self.fan_in_mode is FanInMode.CHANNELS_AND_FILTER else 1


@dataclass(frozen=True)
class ArchitectureSpec:
    layers: tuple[LayerSpec, ...] = ()
    nonlinearity: Nonlinearity = Nonlinearity.RELU

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(
            self, "nonlinearity", _enum(Nonlinearity, self.nonlinearity, "nonlinearity")
        )
        for k, layer in enumerate(self.layers, start=1):
            if layer.skip_span is not None and layer.skip_span >= k:
                raise ConfigError(
                    f"layer {k}: skip_span {layer.skip_span} must be smaller than the layer index"
                )

    @property
    def depth(self) -> int:
        return len(self.layers)

    def shapes(self, input_hw: tuple[int, int]) -> list[tuple[int, int]]:
        """Spatial shapes ``[input, layer 1, ..., layer L]``; raises on invalid geometry."""
        hw = tuple(input_hw)
        if min(hw) < 1:
            raise ConfigError(f"input spatial shape must be positive, got {hw}")
        out = [hw]
        for k, layer in enumerate(self.layers, start=1):
            if layer.padding is Padding.VALID and (
                layer.filter_height > hw[0] or layer.filter_width > hw[1]
            ):
                raise ConfigError(
                    f"layer {k}: valid {layer.filter_height}x{layer.filter_width} filter "
                    f"does not fit a {hw[0]}x{hw[1]} input"
                )
            hw = layer.output_shape(hw)
            if min(hw) < 1:
                raise ConfigError(f"layer {k}: empty output")
            out.append(hw)
        for k, layer in enumerate(self.layers, start=1):
            if layer.skip_span is not None and out[k - layer.skip_span] != out[k]:
                raise ConfigError(
                    f"layer {k}: skip from layer {k - layer.skip_span} has shape "
                    f"{out[k - layer.skip_span]}, expected {out[k]}"
                )
        return out

    def validate(self, input_hw: tuple[int, int]) -> None:
        self.shapes(input_hw)

    def without_skips(self) -> "ArchitectureSpec":
        return replace(self, layers=tuple(replace(l, skip_span=None) for l in self.layers))


@dataclass(frozen=True)
class KernelConfig:
    """An architecture with its hyperparameters, as stored in a config file."""

    arch: ArchitectureSpec
    hyper: Hyperparameters
    name: str = ""
    extra: dict[str, Any] = field(default_factory=dict, compare=False)

    def to_dict(self) -> dict[str, Any]:
        layers = []
        for layer in self.arch.layers:
            d: dict[str, Any] = {
                "filter": layer.filter_height
                if layer.filter_height == layer.filter_width
                else [layer.filter_height, layer.filter_width],
                "stride": layer.stride,
                "padding": layer.padding.value,
            }
            if layer.skip_span is not None:
                d["skip_span"] = layer.skip_span
            layers.append(d)
        return {
            "sigma_b_sq": self.hyper.sigma_b_sq,
            "sigma_w_sq": self.hyper.sigma_w_sq,
            "nonlinearity": self.arch.nonlinearity.value,
            "fan_in_mode": self.hyper.fan_in_mode.value,
            "relu_prefactor": self.hyper.relu_prefactor.value,
            "layers": layers,
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


_KEYS = {"sigma_b_sq", "sigma_w_sq", "nonlinearity", "fan_in_mode", "relu_prefactor", "layers"}
_LAYER_KEYS = {"filter", "stride", "padding", "skip_span"}


def _parse_layer(i: int, d: Any) -> LayerSpec:
    if not isinstance(d, dict):
        raise ConfigError(f"layers[{i}] must be a mapping, got {type(d).__name__}")
    unknown = set(d) - _LAYER_KEYS
    if unknown:
        raise ConfigError(f"layers[{i}]: unknown keys {sorted(unknown)}")
    if "filter" not in d:
        raise ConfigError(f"layers[{i}]: missing 'filter'")
    f = d["filter"]
    fh, fw = (f, f) if isinstance(f, int) else tuple(f)
    return LayerSpec(
        filter_height=fh,
        filter_width=fw,
        stride=d.get("stride", 1),
        padding=d.get("padding", "same"),
        skip_span=d.get("skip_span"),
    )


def config_from_dict(d: dict[str, Any], name: str = "") -> KernelConfig:
    if not isinstance(d, dict):
        raise ConfigError("configuration must be a mapping")
    unknown = set(d) - _KEYS
    if unknown:
        raise ConfigError(f"unknown configuration keys {sorted(unknown)}")
    for key in ("sigma_b_sq", "sigma_w_sq"):
        if key not in d:
            raise ConfigError(f"missing required key {key!r}")
    layers = d.get("layers") or []
    if not isinstance(layers, list):
        raise ConfigError("'layers' must be a list")
    try:
        arch = ArchitectureSpec(
            layers=tuple(_parse_layer(i, l) for i, l in enumerate(layers)),
            nonlinearity=d.get("nonlinearity", "relu"),
        )
        hyper = Hyperparameters(
            sigma_b_sq=d["sigma_b_sq"],
            sigma_w_sq=d["sigma_w_sq"],
            fan_in_mode=d.get("fan_in_mode", "channels"),
            relu_prefactor=d.get("relu_prefactor", "standard"),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    return KernelConfig(arch=arch, hyper=hyper, name=name)


def shipped_configs() -> list[str]:
    files = resources.files("cnngp") / "configs"
    return sorted(p.name[:-5] for p in files.iterdir() if p.name.endswith(".yaml"))


def load_config(path_or_name: str | Path) -> KernelConfig:
    """Load a YAML config from a path, or one of the shipped configs by name."""
    path = Path(path_or_name)
    if path.is_file():
        text = path.read_text()
        name = path.stem
    else:
        res = resources.files("cnngp") / "configs" / f"{path_or_name}.yaml"
        if not res.is_file():
            raise ConfigError(
                f"config {str(path_or_name)!r} is neither a file nor a shipped config "
                f"({', '.join(shipped_configs())})"
            )
        text = res.read_text()
        name = str(path_or_name)
    try:
        d = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path_or_name}: {exc}") from exc
    return config_from_dict(d, name=name)


def uniform_layers(
    depth: int,
    filter_size: int,
    stride: int = 1,
    padding: Padding | str = Padding.SAME,
    skip_every: int | None = None,
) -> tuple[LayerSpec, ...]:
    """``depth`` identical layers; with ``skip_every = k`` layers 1 + k, 1 + 2k, ... skip back k."""
    layers = []
    for k in range(1, depth + 1):
        span = skip_every if skip_every and k > 1 and (k - 1) % skip_every == 0 else None
        layers.append(LayerSpec(filter_size, filter_size, stride, padding, span))
    return tuple(layers)
