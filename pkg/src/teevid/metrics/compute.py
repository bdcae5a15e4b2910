"""Analytic compute accounting for the main branch and every early-exit path."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from ..backbone import NUM_STAGES, BackboneConfig, stage_shapes, trunk_layers
from ..detector import HeadConfig, head_layers
from ..teem import TeemConfig, teem_layers
from .macs import LayerSpec, total_macs, total_params


@dataclass(frozen=True)
class PathCost:
    macs: int
    params: int

    @classmethod
    def of(cls, layers: Sequence[LayerSpec]) -> "PathCost":
        return cls(total_macs(layers), total_params(layers))


@dataclass(frozen=True)
class MacReport:
    full: PathCost
    exit_paths: dict[int, PathCost]
    teem: dict[int, PathCost]
    trunk: dict[int, PathCost]  # stem + stages 1..l

    def to_dict(self) -> dict:
        return {
            "full": vars(self.full),
            "exit_paths": {str(k): vars(v) for k, v in sorted(self.exit_paths.items())},
            "teem": {str(k): vars(v) for k, v in sorted(self.teem.items())},
            "trunk": {str(k): vars(v) for k, v in sorted(self.trunk.items())},
        }

    def exit_ratio(self, l: int) -> float:
        return self.exit_paths[l].macs / self.full.macs

    def reuse_cost(self, evaluated: Sequence[int]) -> int:
        """MACs for a frame that ran the trunk to the deepest evaluated exit plus each evaluated TEEM."""
        if not evaluated:
            return 0
        return self.trunk[max(evaluated)].macs + sum(self.teem[l].macs for l in evaluated)

    def full_cost(self, evaluated: Sequence[int] = ()) -> int:
        return self.full.macs + sum(self.teem[l].macs for l in evaluated)


def default_teem_configs(backbone: BackboneConfig, hidden_ratio: float = 0.5, **kwargs) -> list[TeemConfig]:
    return [
        TeemConfig(channels=c, hidden=max(1, int(round(c * hidden_ratio))), **kwargs)
        for c, _, _ in stage_shapes(backbone)
    ]


def mac_report(backbone: BackboneConfig, teems: Sequence[TeemConfig], head: HeadConfig) -> MacReport:
    if len(teems) != NUM_STAGES:
        raise ValueError(f"need one TEEM config per stage, got {len(teems)}")
    shapes = stage_shapes(backbone)
    trunk = {l: PathCost.of(trunk_layers(backbone, l)) for l in range(1, NUM_STAGES + 1)}
    teem = {l: PathCost.of(teem_layers(teems[l - 1], shapes[l - 1][1], l)) for l in range(1, NUM_STAGES + 1)}
    exits = {
        l: PathCost.of(trunk_layers(backbone, l) + teem_layers(teems[l - 1], shapes[l - 1][1], l))
        for l in range(1, NUM_STAGES + 1)
    }
    full = PathCost.of(trunk_layers(backbone) + head_layers(head, backbone))
    return MacReport(full, exits, teem, trunk)
