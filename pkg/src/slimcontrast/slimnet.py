"""Width-switchable layer primitives with nested weight sharing.

One set of full-width tensors backs every sub-network: running a layer at
width ``w`` uses the leading ``active_channels(w, C)`` input/output channels
of its weight, so the parameter set of a narrow network is a prefix slice
(and therefore a subset) of every wider one. Normalization layers keep an
independent statistics/affine set per registered width ("switchable"
normalization); those per-width affine parameters are excluded from the
shared-parameter partition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from slimcontrast.errors import UnknownWidthError

WEIGHTED_KINDS = ("linear", "conv2d")
KNOWN_KINDS = WEIGHTED_KINDS + ("norm", "activation", "maxpool2d", "global_avg_pool", "flatten")


def active_channels(width: float, full: int) -> int:
    """Number of live channels at ``width`` out of ``full``: max(1, floor(w*full + 0.5))."""
    if not (0.0 < width <= 1.0):
        raise ValueError(f"width must lie in (0, 1], got {width}")
    if full < 1:
        raise ValueError(f"full channel count must be >= 1, got {full}")
    return max(1, math.floor(width * full + 0.5))


def format_width(width: float) -> str:
    return repr(float(width))


@dataclass(frozen=True)
class WidthConfig:
    """Ordered widths, strictly descending from 1.0."""

    widths: tuple[float, ...]

    def __post_init__(self):
        ws = tuple(float(w) for w in self.widths)
        object.__setattr__(self, "widths", ws)
        if len(ws) < 1:
            raise ValueError("at least one width is required")
        if ws[0] != 1.0:
            raise ValueError(f"the first width must be 1.0, got {ws[0]}")
        for w in ws:
            if not (0.0 < w <= 1.0):
                raise ValueError(f"widths must lie in (0, 1], got {w}")
        if any(a <= b for a, b in zip(ws, ws[1:])):
            raise ValueError(f"widths must be strictly descending, got {ws}")

    @property
    def n(self) -> int:
        return len(self.widths)

    @property
    def full(self) -> float:
        return self.widths[0]

    @property
    def sub_widths(self) -> tuple[float, ...]:
        return self.widths[1:]

    def index(self, width: float) -> int:
        try:
            return self.widths.index(float(width))
        except ValueError:
            raise UnknownWidthError(f"width {width} is not registered in {self.widths}") from None

    def __contains__(self, width: float) -> bool:
        return float(width) in self.widths

    def __iter__(self) -> Iterator[float]:
        return iter(self.widths)


@dataclass
class LayerSpec:
    """One layer of a declarative architecture description."""

    kind: str
    in_channels: int = 0
    out_channels: int = 0
    slim_in: bool = True
    slim_out: bool = True
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    bias: bool = True

    def __post_init__(self):
        if self.kind not in KNOWN_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}; expected one of {KNOWN_KINDS}")


class SlimmableLinear(nn.Module):
    """Linear layer whose active rows/columns follow the requested width."""

    def __init__(self, in_features: int, out_features: int, widths: WidthConfig,
                 slim_in: bool = True, slim_out: bool = True, bias: bool = True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.widths = widths
        self.slim_in = slim_in
        self.slim_out = slim_out
        self.weight = nn.Parameter(torch.empty(out_features, in_features))
        self.bias = nn.Parameter(torch.empty(out_features)) if bias else None
        self.reset_parameters()

    def reset_parameters(self):
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        if self.bias is not None:
            bound = 1.0 / math.sqrt(self.in_features)
            nn.init.uniform_(self.bias, -bound, bound)

    def active_shape(self, width: float) -> tuple[int, int]:
        self.widths.index(width)
        o = active_channels(width, self.out_features) if self.slim_out else self.out_features
        i = active_channels(width, self.in_features) if self.slim_in else self.in_features
        return o, i

    def forward(self, x: torch.Tensor, width: float) -> torch.Tensor:
        o, i = self.active_shape(width)
        if x.shape[-1] != i:
            raise ValueError(f"expected {i} input features at width {width}, got {x.shape[-1]}")
        b = self.bias[:o] if self.bias is not None else None
        return F.linear(x, self.weight[:o, :i], b)

    def param_masks(self, width: float) -> dict[str, np.ndarray]:
        o, i = self.active_shape(width)
        wm = np.zeros((self.out_features, self.in_features), dtype=bool)
        wm[:o, :i] = True
        masks = {"weight": wm.reshape(-1)}
        if self.bias is not None:
            bm = np.zeros(self.out_features, dtype=bool)
            bm[:o] = True
            masks["bias"] = bm
        return masks

    def extra_repr(self) -> str:
        return (f"in={self.in_features}, out={self.out_features}, "
                f"slim_in={self.slim_in}, slim_out={self.slim_out}")


class SlimmableConv2d(nn.Module):
    """2d convolution with width-sliced input/output channel counts."""

    def __init__(self, in_channels: int, out_channels: int, widths: WidthConfig,
                 kernel: int = 3, stride: int = 1, padding: int = 1,
                 slim_in: bool = True, slim_out: bool = True, bias: bool = True):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.widths = widths
        self.slim_in = slim_in
        self.slim_out = slim_out
        self.stride = stride
        self.padding = padding
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, kernel, kernel))
        self.bias = nn.Parameter(torch.empty(out_channels)) if bias else None
        self.reset_parameters()

    def reset_parameters(self):
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        if self.bias is not None:
            fan_in = self.in_channels * self.weight.shape[2] * self.weight.shape[3]
            bound = 1.0 / math.sqrt(fan_in)
            nn.init.uniform_(self.bias, -bound, bound)

    def active_shape(self, width: float) -> tuple[int, int]:
        self.widths.index(width)
        o = active_channels(width, self.out_channels) if self.slim_out else self.out_channels
        i = active_channels(width, self.in_channels) if self.slim_in else self.in_channels
        return o, i

    def forward(self, x: torch.Tensor, width: float) -> torch.Tensor:
        o, i = self.active_shape(width)
        if x.shape[1] != i:
            raise ValueError(f"expected {i} input channels at width {width}, got {x.shape[1]}")
        b = self.bias[:o] if self.bias is not None else None
        return F.conv2d(x, self.weight[:o, :i], b, self.stride, self.padding)

    def param_masks(self, width: float) -> dict[str, np.ndarray]:
        o, i = self.active_shape(width)
        wm = np.zeros(self.weight.shape, dtype=bool)
        wm[:o, :i] = True
        masks = {"weight": wm.reshape(-1)}
        if self.bias is not None:
            bm = np.zeros(self.out_channels, dtype=bool)
            bm[:o] = True
            masks["bias"] = bm
        return masks


class SwitchableNorm(nn.Module):
    """Batch normalization with one independent stats/affine set per width.

    Statistics recorded while running at one width never touch any other
    width's set, so sub-network inference is not corrupted by full-width
    batch statistics (and vice versa).
    """

    def __init__(self, num_features: int, widths: WidthConfig, dims: int,
                 slimmable: bool = True, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        if dims not in (1, 2):
            raise ValueError(f"dims must be 1 or 2, got {dims}")
        self.num_features = num_features
        self.widths = widths
        self.slimmable = slimmable
        norm_cls = nn.BatchNorm1d if dims == 1 else nn.BatchNorm2d
        self.norms = nn.ModuleList([
            norm_cls(active_channels(w, num_features) if slimmable else num_features,
                     eps=eps, momentum=momentum)
            for w in widths
        ])

    def forward(self, x: torch.Tensor, width: float) -> torch.Tensor:
        return self.norms[self.widths.index(width)](x)


class Activation(nn.Module):
    def forward(self, x: torch.Tensor, width: float) -> torch.Tensor:
        return F.relu(x)


class MaxPool2d(nn.Module):
    def __init__(self, kernel: int = 2):
        super().__init__()
        self.kernel = kernel

    def forward(self, x: torch.Tensor, width: float) -> torch.Tensor:
        return F.max_pool2d(x, self.kernel)


class GlobalAvgPool(nn.Module):
    def forward(self, x: torch.Tensor, width: float) -> torch.Tensor:
        return x.mean(dim=(2, 3))


class Flatten(nn.Module):
    def forward(self, x: torch.Tensor, width: float) -> torch.Tensor:
        return x.reshape(x.shape[0], -1)


def resolve_specs(layers: Sequence[dict], input_channels: int) -> list[LayerSpec]:
    """Fill in input channels and slimming flags for a declarative layer list.

    The first weighted layer never slims its input (raw data channels are
    not sliced); afterwards each layer's input follows the previous
    weighted layer's output.
    """
    specs: list[LayerSpec] = []
    channels = input_channels
    slim = False  # raw input is never sliced
    for raw in layers:
        raw = dict(raw)
        kind = raw.pop("kind", None)
        if kind is None:
            raise ValueError(f"layer entry missing 'kind': {raw}")
        if kind in WEIGHTED_KINDS:
            out = int(raw.pop("out"))
            spec = LayerSpec(kind=kind, in_channels=channels, out_channels=out,
                             slim_in=slim, slim_out=bool(raw.pop("slim_out", True)),
                             kernel=int(raw.pop("kernel", 3)), stride=int(raw.pop("stride", 1)),
                             padding=int(raw.pop("padding", 1)), bias=bool(raw.pop("bias", True)))
            channels = out
            slim = spec.slim_out
        else:
            spec = LayerSpec(kind=kind, in_channels=channels, out_channels=channels,
                             slim_in=slim, slim_out=slim, kernel=int(raw.pop("kernel", 2)))
        if raw:
            raise ValueError(f"unknown keys {sorted(raw)} in layer entry of kind {kind!r}")
        specs.append(spec)
    return specs


def mlp_specs(input_dim: int, hidden_dims: Sequence[int], norm: bool = True) -> list[LayerSpec]:
    layers: list[dict] = []
    for h in hidden_dims:
        layers.append({"kind": "linear", "out": h})
        if norm:
            layers.append({"kind": "norm"})
        layers.append({"kind": "activation"})
    return resolve_specs(layers, input_dim)


def cnn_specs(in_channels: int, channels: Sequence[int], kernel: int = 3) -> list[LayerSpec]:
    layers: list[dict] = []
    for c in channels:
        layers += [{"kind": "conv2d", "out": c, "kernel": kernel, "padding": kernel // 2},
                   {"kind": "norm"}, {"kind": "activation"}, {"kind": "maxpool2d"}]
    layers.append({"kind": "global_avg_pool"})
    return resolve_specs(layers, in_channels)


class SlimmableNet(nn.Module):
    """A stack of width-switchable layers sharing one full-width parameter set.

    Acts as the single parameter store: full-width weight/bias tensors for
    the weighted layers plus one normalization statistics set per width.
    ``forward(x, width)`` is bit-identical to running a standalone network
    built from the prefix slices of those tensors.
    """

    def __init__(self, specs: Sequence[LayerSpec], widths: WidthConfig,
                 norm_momentum: float = 0.1):
        super().__init__()
        self.specs = list(specs)
        self.widths = widths
        mods: list[nn.Module] = []
        ndim = None  # 1 after linear, 2 after conv; decides norm flavour
        rep_channels, rep_slim = 0, False
        for spec in self.specs:
            if spec.kind == "linear":
                mods.append(SlimmableLinear(spec.in_channels, spec.out_channels, widths,
                                            spec.slim_in, spec.slim_out, spec.bias))
                ndim, rep_channels, rep_slim = 1, spec.out_channels, spec.slim_out
            elif spec.kind == "conv2d":
                mods.append(SlimmableConv2d(spec.in_channels, spec.out_channels, widths,
                                            spec.kernel, spec.stride, spec.padding,
                                            spec.slim_in, spec.slim_out, spec.bias))
                ndim, rep_channels, rep_slim = 2, spec.out_channels, spec.slim_out
            elif spec.kind == "norm":
                if ndim is None:
                    raise ValueError("a norm layer cannot precede every weighted layer")
                mods.append(SwitchableNorm(spec.in_channels, widths, dims=ndim,
                                           slimmable=spec.slim_in, momentum=norm_momentum))
            elif spec.kind == "activation":
                mods.append(Activation())
            elif spec.kind == "maxpool2d":
                mods.append(MaxPool2d(spec.kernel))
            elif spec.kind == "global_avg_pool":
                mods.append(GlobalAvgPool())
                ndim = 1
            elif spec.kind == "flatten":
                mods.append(Flatten())
                ndim = 1
        self.layers = nn.ModuleList(mods)
        self.rep_channels = rep_channels
        self.rep_slim = rep_slim

    def feature_dim(self, width: float) -> int:
        if self.rep_slim:
            return active_channels(width, self.rep_channels)
        return self.rep_channels

    def forward(self, x: torch.Tensor, width: float) -> torch.Tensor:
        self.widths.index(width)
        for layer in self.layers:
            x = layer(x, width)
        return x


def iter_slimmable_layers(module: nn.Module) -> Iterator[tuple[str, nn.Module]]:
    """Weighted width-switchable layers of a module tree, in registration order."""
    for name, mod in module.named_modules():
        if isinstance(mod, (SlimmableLinear, SlimmableConv2d)):
            yield name, mod


@dataclass
class ParamEntry:
    layer: str
    param: str
    shape: tuple[int, ...]
    offset: int
    numel: int
    tensor: torch.Tensor = field(repr=False)


class PartitionTable:
    """Index sets over the flattened shared parameters, one per width.

    Covers the weight/bias tensors of every width-switchable weighted layer;
    per-width normalization affine parameters are deliberately absent. The
    width-1.0 set covers everything, and smaller widths are nested subsets
    by prefix-slice construction.
    """

    def __init__(self, module: nn.Module, widths: WidthConfig):
        self.widths = widths
        self.entries: list[ParamEntry] = []
        layer_masks: dict[str, dict[float, list[np.ndarray]]] = {}
        offset = 0
        for name, layer in iter_slimmable_layers(module):
            per_width = {w: layer.param_masks(w) for w in widths}
            layer_masks[name] = {w: [] for w in widths}
            for pname in per_width[widths.full]:
                tensor = getattr(layer, pname)
                numel = tensor.numel()
                self.entries.append(ParamEntry(name, pname, tuple(tensor.shape), offset, numel, tensor))
                for w in widths:
                    layer_masks[name][w].append(per_width[w][pname])
                offset += numel
        self.total = offset
        self.layer_masks: dict[str, dict[float, np.ndarray]] = {
            name: {w: np.concatenate(parts) for w, parts in by_width.items()}
            for name, by_width in layer_masks.items()
        }
        self.layer_offsets: dict[str, tuple[int, int]] = {}
        for e in self.entries:
            start, size = self.layer_offsets.get(e.layer, (e.offset, 0))
            self.layer_offsets[e.layer] = (min(start, e.offset), size + e.numel)
        self.width_masks: dict[float, np.ndarray] = {
            w: np.concatenate([self.layer_masks[name][w] for name in self.layer_masks])
            if self.layer_masks else np.zeros(0, dtype=bool)
            for w in widths
        }

    @property
    def layers(self) -> list[str]:
        return list(self.layer_masks)

    def mask(self, key: str) -> np.ndarray:
        """Global boolean mask for a partition key ("0.5" or "1.0-0.25")."""
        if "-" in key[1:]:
            hi, lo = key.split("-", 1)
            return self.width_masks[float(hi)] & ~self.width_masks[float(lo)]
        return self.width_masks[float(key)]

    def layer_mask(self, layer: str, key: str) -> np.ndarray:
        if "-" in key[1:]:
            hi, lo = key.split("-", 1)
            return self.layer_masks[layer][float(hi)] & ~self.layer_masks[layer][float(lo)]
        return self.layer_masks[layer][float(key)]

    def count(self, key: str) -> int:
        return int(self.mask(key).sum())

    def partition_keys(self) -> list[str]:
        """Width keys plus every ordered set-difference pair, widest first."""
        keys = [format_width(w) for w in self.widths]
        ws = self.widths.widths
        for i, wi in enumerate(ws):
            for wj in ws[i + 1:]:
                keys.append(f"{format_width(wi)}-{format_width(wj)}")
        return keys

    def flat_grad(self, layer: str) -> np.ndarray:
        """Concatenated float64 gradient of one layer's weight/bias (zeros if absent)."""
        parts = []
        for e in self.entries:
            if e.layer != layer:
                continue
            g = e.tensor.grad
            if g is None:
                parts.append(np.zeros(e.numel))
            else:
                parts.append(g.detach().cpu().double().numpy().reshape(-1))
        return np.concatenate(parts)

    def gather_flat(self, tensors_by_entry: Optional[list[torch.Tensor]] = None) -> np.ndarray:
        """Flatten parameters (or a parallel list of tensors) in partition order."""
        out = np.empty(self.total)
        for i, e in enumerate(self.entries):
            t = e.tensor if tensors_by_entry is None else tensors_by_entry[i]
            out[e.offset:e.offset + e.numel] = t.detach().cpu().double().numpy().reshape(-1)
        return out


def param_partition(module: nn.Module, widths: WidthConfig) -> PartitionTable:
    """Build the per-width index sets over a module's shared parameters."""
    return PartitionTable(module, widths)
