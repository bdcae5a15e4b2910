"""Four-stage convolutional feature network with a tap after every stage.

Topology for a square input of side ``S``::

    stem    4x4 conv, stride 4         -> (C1, S/4)
    stage 1 1x1 conv + residual block  -> (C1, S/4)
    stage l 2x2 conv, stride 2 + block -> (Cl, S/4 / 2^(l-1))   for l = 2..4

Spatial sizes use floor division throughout, so a 112 input yields
28, 14, 7, 3. Only the stem carries a bias; stage convolutions are bias-free,
which makes a zero stem produce an all-zero trunk.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import ShapeError
from .metrics.macs import LayerSpec, conv

NUM_STAGES = 4
NORM_MEAN = 0.5
NORM_STD = 0.25


@dataclass(frozen=True)
class StageSpec:
    channels: int
    blocks: int = 1


def _default_stages() -> tuple[StageSpec, ...]:
    return (StageSpec(16), StageSpec(32), StageSpec(64), StageSpec(128))


@dataclass(frozen=True)
class BackboneConfig:
    input_size: int = 224
    stages: tuple[StageSpec, ...] = field(default_factory=_default_stages)
    seed: int = 0

    def __post_init__(self):
        if len(self.stages) != NUM_STAGES:
            raise ShapeError(f"backbone needs exactly {NUM_STAGES} stages, got {len(self.stages)}")
        if self.input_size < 4 * 2 ** (NUM_STAGES - 1):
            raise ShapeError(f"input_size {self.input_size} too small for {NUM_STAGES} stages")

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(s.channels for s in self.stages)

    def to_dict(self) -> dict:
        return {
            "input_size": self.input_size,
            "stages": [{"channels": s.channels, "blocks": s.blocks} for s in self.stages],
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(
            input_size=int(d.get("input_size", 224)),
            stages=tuple(StageSpec(int(s["channels"]), int(s.get("blocks", 1))) for s in d["stages"])
            if "stages" in d
            else _default_stages(),
            seed=int(d.get("seed", 0)),
        )


def stage_shapes(config: BackboneConfig) -> list[tuple[int, int, int]]:
    """(channels, h, w) after each stage, computed without running the network."""
    size = config.input_size // 4
    shapes = []
    for l, stage in enumerate(config.stages, start=1):
        if l > 1:
            size //= 2
        shapes.append((stage.channels, size, size))
    return shapes


def stem_layers(config: BackboneConfig) -> list[LayerSpec]:
    s1 = config.input_size // 4
    return [conv("stem", 3, config.stages[0].channels, 4, s1, bias=True)]


def stage_layers(config: BackboneConfig, l: int) -> list[LayerSpec]:
    shapes = stage_shapes(config)
    c, s, _ = shapes[l - 1]
    cin = c if l == 1 else shapes[l - 2][0]
    k = 1 if l == 1 else 2
    layers = [conv(f"stage{l}.transition", cin, c, k, s, bias=False)]
    for b in range(config.stages[l - 1].blocks):
        layers.append(conv(f"stage{l}.block{b}.conv1", c, c, 3, s, bias=False))
        layers.append(conv(f"stage{l}.block{b}.conv2", c, c, 3, s, bias=False))
    return layers


def trunk_layers(config: BackboneConfig, upto: int = NUM_STAGES) -> list[LayerSpec]:
    out = stem_layers(config)
    for l in range(1, upto + 1):
        out.extend(stage_layers(config, l))
    return out


class ResidualBlock(nn.Module):
    def __init__(self, channels: int, bias: bool = False):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, bias=bias)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, bias=bias)

    def forward(self, x):
        return torch.relu(x + self.conv2(torch.relu(self.conv1(x))))


class Stage(nn.Module):
    def __init__(self, cin: int, cout: int, blocks: int, first: bool):
        super().__init__()
        k = 1 if first else 2
        self.transition = nn.Conv2d(cin, cout, k, stride=k, bias=False)
        self.blocks = nn.Sequential(*[ResidualBlock(cout) for _ in range(blocks)])

    def forward(self, x):
        return self.blocks(torch.relu(self.transition(x)))


def normalize(images) -> torch.Tensor:
    """(H, W, 3) or (N, H, W, 3) intensities in [0, 1] -> normalised NCHW float32."""
    x = torch.as_tensor(np.asarray(images, dtype=np.float32))
    if x.ndim == 3:
        x = x.unsqueeze(0)
    if x.ndim != 4 or x.shape[-1] != 3:
        raise ShapeError(f"expected (N, H, W, 3) images, got {tuple(x.shape)}")
    return ((x - NORM_MEAN) / NORM_STD).permute(0, 3, 1, 2).contiguous()


class Backbone(nn.Module):
    def __init__(self, config: BackboneConfig | None = None):
        super().__init__()
        self.config = config or BackboneConfig()
        chans = self.config.channels
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.config.seed)
            self.stem = nn.Conv2d(3, chans[0], 4, stride=4, bias=True)
            self.stages = nn.ModuleList(
                Stage(chans[max(l - 1, 0)], chans[l], self.config.stages[l].blocks, first=(l == 0))
                for l in range(NUM_STAGES)
            )

    def _check(self, x: torch.Tensor) -> None:
        s = self.config.input_size
        if x.ndim != 4 or tuple(x.shape[1:]) != (3, s, s):
            raise ShapeError(f"backbone expects (N, 3, {s}, {s}) input, got {tuple(x.shape)}")

    def run_stages(self, z: torch.Tensor, start: int, stop: int) -> torch.Tensor:
        """Apply stages ``start+1 .. stop`` to the stage-``start`` output (``start=0`` is the stem output)."""
        for l in range(start, stop):
            z = self.stages[l](z)
        return z

    def stem_forward(self, x: torch.Tensor) -> torch.Tensor:
        self._check(x)
        return torch.relu(self.stem(x))

    def forward_to_stage(self, x: torch.Tensor, l: int) -> torch.Tensor:
        """Batched forward through stages ``1..l`` of a normalised NCHW batch."""
        if not 1 <= l <= NUM_STAGES:
            raise ValueError(f"stage index must be in 1..{NUM_STAGES}, got {l}")
        return self.run_stages(self.stem_forward(x), 0, l)

    def taps(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Outputs of all four stages for a normalised NCHW batch."""
        z = self.stem_forward(x)
        out = []
        for l in range(NUM_STAGES):
            z = self.stages[l](z)
            out.append(z)
        return out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_to_stage(x, NUM_STAGES)

    @torch.no_grad()
    def features(self, image, l: int = NUM_STAGES) -> torch.Tensor:
        """Stage-``l`` FeatureMap ``(C, h, w)`` for one (H, W, 3) image in [0, 1]."""
        return self.forward_to_stage(normalize(image), l)[0]


def forward_to_stage(backbone: Backbone, frame_image, l: int) -> torch.Tensor:
    return backbone.features(frame_image, l)


def forward_full(backbone: Backbone, frame_image) -> torch.Tensor:
    return backbone.features(frame_image, NUM_STAGES)
