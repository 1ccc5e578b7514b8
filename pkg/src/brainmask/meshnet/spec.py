"""Declarative network specifications and named presets."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence, Tuple

from ..errors import ChannelMismatch

NORMS = ("none", "paramfree_layernorm", "batchnorm_stats")
ACTIVATIONS = ("relu", "none")

DECREASING = (16, 8, 4, 2, 1)  # glyph ▶
INCREASING = (1, 2, 4, 8, 16)  # glyph ◀
GLYPHS = {"▶": DECREASING, ">": DECREASING, "◀": INCREASING, "<": INCREASING}


@dataclass(frozen=True)
class ConvLayerSpec:
    in_channels: int
    out_channels: int
    kernel_size: int = 3
    dilation: int = 1
    has_bias: bool = False
    norm: str = "paramfree_layernorm"
    activation: str = "relu"

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel size must be odd and positive, got {self.kernel_size}")
        if self.dilation < 1:
            raise ValueError(f"dilation must be >= 1, got {self.dilation}")
        if self.norm not in NORMS:
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def padding(self) -> int:
        return self.dilation * (self.kernel_size - 1) // 2

    @property
    def weight_shape(self) -> Tuple[int, ...]:
        k = self.kernel_size
        return (self.out_channels, self.in_channels, k, k, k)

    def n_params(self) -> int:
        n = self.out_channels * self.in_channels * self.kernel_size ** 3
        if self.has_bias:
            n += self.out_channels
        if self.norm == "batchnorm_stats":
            n += 4 * self.out_channels
        return n


@dataclass(frozen=True)
class NetworkSpec:
    layers: Tuple[ConvLayerSpec, ...]
    name: str = "custom"
    eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        for i, (a, b) in enumerate(zip(self.layers, self.layers[1:])):
            if a.out_channels != b.in_channels:
                raise ChannelMismatch(
                    f"layer {i} emits {a.out_channels} channels, layer {i + 1} takes {b.in_channels}")

    @property
    def max_channels(self) -> int:
        if not self.layers:
            return 0
        return max(max(l.in_channels, l.out_channels) for l in self.layers)

    @property
    def dilations(self) -> Tuple[int, ...]:
        return tuple(l.dilation for l in self.layers)

    def to_dict(self) -> dict:
        return {"name": self.name, "eps": self.eps, "layers": [asdict(l) for l in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(tuple(ConvLayerSpec(**l) for l in d["layers"]), d.get("name", "custom"),
                   d.get("eps", 1e-5))

    def fingerprint(self) -> str:
        """Hash of the architecture (layer list and eps; the name is ignored)."""
        payload = json.dumps({"eps": self.eps, "layers": [asdict(l) for l in self.layers]},
                             sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()


def count_params(spec: NetworkSpec) -> int:
    return sum(layer.n_params() for layer in spec.layers)


@dataclass(frozen=True)
class DilationSchedule:
    dilations: Tuple[int, ...]
    name: str = field(default="")

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if not self.dilations:
            raise ValueError("dilation schedule must be nonempty")
        if min(self.dilations) < 1:
            raise ValueError("dilations must be positive")

    def __len__(self):
        return len(self.dilations)

    def __iter__(self):
        return iter(self.dilations)

    @classmethod
    def from_glyphs(cls, glyphs: str) -> "DilationSchedule":
        """``"▶◀"`` -> (16, 8, 4, 2, 1, 1, 2, 4, 8, 16).  ASCII ``>``/``<`` also work."""
        out = []
        for g in glyphs:
            if g.isspace():
                continue
            if g not in GLYPHS:
                raise ValueError(f"unknown block glyph {g!r}")
            out.extend(GLYPHS[g])
        return cls(tuple(out), glyphs)


def build_network(dilations: Sequence[int], channels: int = 15, *,
                  norm: str = "paramfree_layernorm", activation: str = "relu",
                  in_channels: int = 1, n_classes: int = 2, kernel_size: int = 3,
                  name: str = "custom", eps: float = 1e-5) -> NetworkSpec:
    """Isometric dilated stack: one k^3 layer per dilation, then a 1x1x1 classifier.

    Hidden layers carry no bias; the classifier has a bias and no norm or
    activation.
    """
    layers = []
    c_in = in_channels
    for d in dilations:
        layers.append(ConvLayerSpec(c_in, channels, kernel_size, int(d), False, norm, activation))
        c_in = channels
    layers.append(ConvLayerSpec(c_in, n_classes, 1, 1, True, "none", "none"))
    return NetworkSpec(tuple(layers), name, eps)


_PRESET_GLYPHS = {
    "mindgrab": "▶▶▶▶▶",
    "dec-dec": "▶▶",
    "dec-inc": "▶◀",
    "inc-dec": "◀▶",
    "toy-block": "▶",
}
_PRESET_CHANNELS = {"toy-block": 8}


def preset_names():
    names = []
    for base in _PRESET_GLYPHS:
        names += [base, base + "-bn"]
    return names


def preset(name: str, channels: int | None = None) -> NetworkSpec:
    """Named architecture.

    ``mindgrab`` is five decreasing blocks (▶▶▶▶▶) of 15-channel layers with
    parameter-free layer normalisation; ``dec-dec``, ``dec-inc`` and
    ``inc-dec`` are the two-block ablations.  A ``-bn`` suffix swaps in
    stored-statistics batch normalisation.  Raw glyph strings are accepted too.
    """
    norm = "paramfree_layernorm"
    base = name
    if name.endswith("-bn"):
        base, norm = name[:-3], "batchnorm_stats"
    if base in _PRESET_GLYPHS:
        glyphs = _PRESET_GLYPHS[base]
        default_c = _PRESET_CHANNELS.get(base, 15)
    else:
        glyphs, default_c = base, 15
    schedule = DilationSchedule.from_glyphs(glyphs)
    return build_network(schedule.dilations, channels or default_c, norm=norm, name=name)


MINDGRAB = preset("mindgrab")
