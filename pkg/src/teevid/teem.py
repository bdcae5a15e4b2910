"""Temporal early-exit module: frame-pair attention plus a changed/unchanged classifier.

Given the cached reference features ``z_ref`` and the current features
``z_cur`` at one backbone tap::

    z_sub   = z_cur - z_ref
    attmap  = sigmoid(conv([z_cur ; z_sub]))            (1 x h x w)
    z_att   = attmap * z_cur
    scores  = fc(gap(relu(bn(conv(z_att)))))             (unchanged, changed)

Global average pooling sits between the ReLU and the fully connected layer so
the classifier does not depend on the tap resolution.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import DomainError, ShapeError
from .geometry import SceneryLabel
from .metrics.macs import LayerSpec, conv


@dataclass(frozen=True)
class TeemConfig:
    channels: int
    hidden: int
    attention_kernel: int = 3
    # "current": concatenate z_cur with the difference; "reference": z_ref instead
    concat: str = "current"
    # the attention starts mostly closed so training learns to open it where the frames differ
    attention_bias: float = -2.0
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.concat not in ("current", "reference"):
            raise ValueError(f"concat must be 'current' or 'reference', got {self.concat!r}")
        if self.attention_kernel % 2 != 1:
            raise ValueError("attention_kernel must be odd")

    def to_dict(self) -> dict:
        return asdict(self)


def teem_layers(config: TeemConfig, size: int, exit_index: int | None = None) -> list[LayerSpec]:
    tag = f"teem{exit_index}" if exit_index is not None else "teem"
    c, h = config.channels, config.hidden
    return [
        conv(f"{tag}.attention", 2 * c, 1, config.attention_kernel, size),
        conv(f"{tag}.conv", c, h, 3, size),
        LayerSpec(f"{tag}.bn", "bn", h, h, hout=size, wout=size, bias=False),
        LayerSpec(f"{tag}.fc", "fc", h, 2),
    ]


class Teem(nn.Module):
    def __init__(self, config: TeemConfig, seed: int | None = None):
        super().__init__()
        self.config = config
        c, h, k = config.channels, config.hidden, config.attention_kernel
        with torch.random.fork_rng(devices=[]):
            if seed is not None:
                torch.manual_seed(seed)
            self.attention = nn.Conv2d(2 * c, 1, k, padding=k // 2)
            nn.init.constant_(self.attention.bias, config.attention_bias)
            self.conv = nn.Conv2d(c, h, 3, padding=1)
            self.bn = nn.BatchNorm2d(h, eps=config.bn_eps, momentum=config.bn_momentum)
            self.fc = nn.Linear(h, 2)

    def _check(self, z: torch.Tensor) -> None:
        if z.ndim != 4 or z.shape[1] != self.config.channels:
            raise ShapeError(f"TEEM expects (N, {self.config.channels}, h, w), got {tuple(z.shape)}")

    def attention_map(self, z_ref: torch.Tensor, z_cur: torch.Tensor) -> torch.Tensor:
        self._check(z_cur)
        if z_ref.shape != z_cur.shape:
            raise ShapeError(f"reference {tuple(z_ref.shape)} and current {tuple(z_cur.shape)} differ")
        z_sub = z_cur - z_ref
        base = z_cur if self.config.concat == "current" else z_ref
        return torch.sigmoid(self.attention(torch.cat([base, z_sub], dim=1)))

    def pre_pool(self, z_cur: torch.Tensor, attmap: torch.Tensor) -> torch.Tensor:
        self._check(z_cur)
        if attmap.ndim != 4 or attmap.shape[1] != 1 or attmap.shape[2:] != z_cur.shape[2:]:
            raise ShapeError(f"attention map {tuple(attmap.shape)} does not fit features {tuple(z_cur.shape)}")
        return F.relu(self.bn(self.conv(attmap * z_cur)))

    def classify(self, z_cur: torch.Tensor, attmap: torch.Tensor) -> torch.Tensor:
        return self.fc(self.pre_pool(z_cur, attmap).mean(dim=(2, 3)))

    def forward(self, z_ref: torch.Tensor, z_cur: torch.Tensor) -> torch.Tensor:
        return self.classify(z_cur, self.attention_map(z_ref, z_cur))


@dataclass(frozen=True)
class ExitLogits:
    scores: tuple[float, float]
    probs: tuple[float, float]
    entropy: float

    @property
    def label(self) -> SceneryLabel:
        # ties go to "changed" so an undecided exit never suppresses a recompute
        return SceneryLabel.CHANGED if self.scores[1] >= self.scores[0] else SceneryLabel.UNCHANGED


def entropy(probs: Sequence[float], base: str = "bits") -> float:
    """Shannon entropy of a discrete distribution, ``0 log 0 = 0``."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or np.any(p < 0) or not np.all(np.isfinite(p)) or abs(p.sum() - 1.0) > 1e-6:
        raise DomainError(f"not a probability distribution: {list(probs)}")
    nz = p[p > 0]
    h = float(-(nz * np.log(nz)).sum())
    if base == "bits":
        h /= math.log(2.0)
    elif base != "nats":
        raise DomainError(f"unknown entropy base {base!r}")
    return max(h, 0.0)


def entropy_bits(probs: Sequence[float]) -> float:
    return entropy(probs, "bits")


def exit_logits(scores: torch.Tensor, base: str = "bits") -> ExitLogits:
    s = scores.detach().to(torch.float64).reshape(2)
    p = torch.softmax(s, dim=0)
    probs = (float(p[0]), float(p[1]))
    return ExitLogits((float(s[0]), float(s[1])), probs, entropy(probs, base))


def _batched(z: torch.Tensor) -> torch.Tensor:
    return z.unsqueeze(0) if z.ndim == 3 else z


@torch.no_grad()
def attention_map(z_ref: torch.Tensor, z_cur: torch.Tensor, teem: Teem) -> torch.Tensor:
    """AttentionMap ``(1, h, w)`` for one pair of FeatureMaps ``(C, h, w)``."""
    return teem.attention_map(_batched(z_ref), _batched(z_cur))[0]


@torch.no_grad()
def classify(z_cur: torch.Tensor, attmap: torch.Tensor, teem: Teem, base: str = "bits") -> ExitLogits:
    return exit_logits(teem.classify(_batched(z_cur), _batched(attmap))[0], base)


@torch.no_grad()
def evaluate_pair(teem: Teem, z_ref: torch.Tensor, z_cur: torch.Tensor, base: str = "bits") -> ExitLogits:
    return exit_logits(teem(_batched(z_ref), _batched(z_cur))[0], base)


@torch.no_grad()
def class_activation_map(teem: Teem, z_ref: torch.Tensor, z_cur: torch.Tensor, target_class: int) -> np.ndarray:
    """FC-weighted sum of the pre-pooling channels, rescaled to [0, 1].

    A spatially constant map carries no localisation signal and is returned
    as all zeros.
    """
    was_training = teem.training
    teem.eval()
    try:
        zr, zc = _batched(z_ref), _batched(z_cur)
        feats = teem.pre_pool(zc, teem.attention_map(zr, zc))[0].to(torch.float64)
        weights = teem.fc.weight[int(target_class)].to(torch.float64)
        cam = torch.einsum("c,chw->hw", weights, feats).numpy()
    finally:
        teem.train(was_training)
    lo, hi = cam.min(), cam.max()
    if not hi - lo > 1e-12 * max(1.0, abs(hi)):
        return np.zeros_like(cam)
    return (cam - lo) / (hi - lo)
