"""Multiply-accumulate and parameter arithmetic for conv / fully connected layers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable


@dataclass(frozen=True)
class LayerSpec:
    """One conv (``kind="conv"``), fully connected (``"fc"``) or batch-norm (``"bn"``) layer.

    For ``fc`` layers ``kh = kw = hout = wout = 1``. Batch-norm carries no
    MACs but contributes ``2 * cout`` affine parameters.
    """

    name: str
    kind: str
    cin: int
    cout: int
    kh: int = 1
    kw: int = 1
    hout: int = 1
    wout: int = 1
    bias: bool = True

    @property
    def macs(self) -> int:
        return mac_count(self)

    @property
    def params(self) -> int:
        if self.kind == "bn":
            return 2 * self.cout
        return self.cin * self.cout * self.kh * self.kw + (self.cout if self.bias else 0)


def mac_count(layer: LayerSpec) -> int:
    """conv: Cin*Cout*kh*kw*Hout*Wout; fc: in*out; bn: 0."""
    if layer.kind == "conv":
        return layer.cin * layer.cout * layer.kh * layer.kw * layer.hout * layer.wout
    if layer.kind == "fc":
        return layer.cin * layer.cout
    if layer.kind == "bn":
        return 0
    raise ValueError(f"unknown layer kind {layer.kind!r}")


def conv(name: str, cin: int, cout: int, k: int, out: int, bias: bool = True) -> LayerSpec:
    return LayerSpec(name, "conv", cin, cout, k, k, out, out, bias)


def total_macs(layers: Iterable[LayerSpec]) -> int:
    return sum(mac_count(layer) for layer in layers)


def total_params(layers: Iterable[LayerSpec]) -> int:
    return sum(layer.params for layer in layers)
