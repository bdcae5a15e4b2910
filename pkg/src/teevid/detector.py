"""Main-branch detection head and an oracle detector behind one interface.

The toy head is a one-stage grid detector over the stage-4 feature map: every
cell predicts an objectness logit, a box (centre offset inside the cell plus
log-size relative to the cell) and, for multi-class setups, class logits. It
is deliberately deep and wide so that, as with a two-stage detector, the head
dominates the cost of the main branch.

The oracle detector returns ground-truth boxes with optional Gaussian corner
jitter and random drops; it isolates pipeline behaviour from detector error.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import Backbone, BackboneConfig, ResidualBlock, normalize, stage_shapes
from .checkpoint import load_params, save_params
from .errors import ConfigError, ContractError, SchemaError
from .geometry import BoundingBox, iou
from .metrics.macs import LayerSpec, conv
from .synthgen import FrameRecord, SyntheticVideo


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    class_id: int
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class DetectionSet:
    frame_index: int
    detections: tuple[Detection, ...] = ()

    def __len__(self) -> int:
        return len(self.detections)


@dataclass(frozen=True)
class DetectorKind:
    kind: str = "toy"
    jitter_sigma: float = 0.0
    drop_prob: float = 0.0

    def __post_init__(self):
        if self.kind not in ("toy", "oracle"):
            raise ConfigError(f"detector kind must be 'toy' or 'oracle', got {self.kind!r}")
        if self.jitter_sigma < 0 or not 0.0 <= self.drop_prob < 1.0:
            raise ConfigError("need jitter_sigma >= 0 and drop_prob in [0, 1)")


@dataclass(frozen=True)
class HeadConfig:
    width: int = 256
    blocks: int = 10
    num_classes: int = 1
    score_threshold: float = 0.5
    nms_iou: float = 0.5
    seed: int = 0

    @property
    def outputs(self) -> int:
        return 5 + (self.num_classes if self.num_classes > 1 else 0)

    def to_dict(self) -> dict:
        return asdict(self)


def head_layers(head: HeadConfig, backbone: BackboneConfig) -> list[LayerSpec]:
    c4, g, _ = stage_shapes(backbone)[-1]
    layers = [conv("head.proj", c4, head.width, 1, g)]
    for b in range(head.blocks):
        layers.append(conv(f"head.block{b}.conv1", head.width, head.width, 3, g))
        layers.append(conv(f"head.block{b}.conv2", head.width, head.width, 3, g))
    layers.append(conv("head.pred", head.width, head.outputs, 1, g))
    return layers


class DetectionHead(nn.Module):
    def __init__(self, config: HeadConfig, in_channels: int):
        super().__init__()
        self.config = config
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            self.proj = nn.Conv2d(in_channels, config.width, 1)
            self.blocks = nn.Sequential(*[ResidualBlock(config.width, bias=True) for _ in range(config.blocks)])
            self.pred = nn.Conv2d(config.width, config.outputs, 1)
            for block in self.blocks:
                # residual branches start as identity so the deep tower trains like a shallow one
                nn.init.zeros_(block.conv2.weight)
                nn.init.zeros_(block.conv2.bias)
            nn.init.constant_(self.pred.bias[:1], -2.0)

    def forward(self, z4: torch.Tensor) -> torch.Tensor:
        return self.pred(self.blocks(torch.relu(self.proj(z4))))


def nms(detections: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy per-class suppression; ties in score keep the earlier detection."""
    order = sorted(range(len(detections)), key=lambda k: -detections[k].score)
    kept: list[Detection] = []
    for k in order:
        d = detections[k]
        if all(o.class_id != d.class_id or iou(o.box, d.box) <= iou_threshold for o in kept):
            kept.append(d)
    return kept


def _clamped_box(x0, y0, x1, y1, size: float) -> BoundingBox | None:
    x0, x1 = min(max(x0, 0.0), size), min(max(x1, 0.0), size)
    y0, y1 = min(max(y0, 0.0), size), min(max(y1, 0.0), size)
    if x1 - x0 < 1e-3 or y1 - y0 < 1e-3:
        return None
    return BoundingBox(float(x0), float(y0), float(x1), float(y1))


def decode_grid(raw: torch.Tensor, config: HeadConfig, input_size: int, frame_index: int) -> DetectionSet:
    """Turn one ``(outputs, G, G)`` head map into thresholded, suppressed detections."""
    raw = raw.detach().to(torch.float64)
    g = raw.shape[-1]
    cell = input_size / g
    obj = torch.sigmoid(raw[0])
    if config.num_classes > 1:
        cls_prob = torch.softmax(raw[5:], dim=0)
        cls_score, cls_id = cls_prob.max(dim=0)
        score = obj * cls_score
    else:
        score, cls_id = obj, torch.zeros_like(obj, dtype=torch.long)
    cands = []
    for i, j in zip(*torch.nonzero(score >= config.score_threshold, as_tuple=True)):
        i, j = int(i), int(j)
        cx = (j + float(torch.sigmoid(raw[1, i, j]))) * cell
        cy = (i + float(torch.sigmoid(raw[2, i, j]))) * cell
        w = math.exp(float(raw[3, i, j].clamp(-4, 4))) * cell
        h = math.exp(float(raw[4, i, j].clamp(-4, 4))) * cell
        box = _clamped_box(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2, input_size)
        if box is not None:
            cands.append(Detection(box, int(cls_id[i, j]), min(1.0, float(score[i, j]))))
    return DetectionSet(frame_index, tuple(nms(cands, config.nms_iou)))


class ToyHeadDetector:
    kind = "toy"

    def __init__(self, head: DetectionHead, input_size: int):
        self.head = head.eval()
        self.input_size = input_size

    @torch.no_grad()
    def detect(self, frame: FrameRecord, stage4_features: torch.Tensor | None) -> DetectionSet:
        if stage4_features is None:
            raise ContractError("toy head detector needs stage-4 features")
        z = stage4_features if stage4_features.ndim == 4 else stage4_features.unsqueeze(0)
        return decode_grid(self.head(z)[0], self.head.config, self.input_size, frame.frame_index)


class OracleDetector:
    kind = "oracle"

    def __init__(self, jitter_sigma: float = 0.0, drop_prob: float = 0.0, seed: int = 0, canvas: float = 224.0):
        DetectorKind("oracle", jitter_sigma, drop_prob)
        self.jitter_sigma = jitter_sigma
        self.drop_prob = drop_prob
        self.seed = seed
        self.canvas = canvas

    def detect(self, frame: FrameRecord, stage4_features: torch.Tensor | None = None) -> DetectionSet:
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, frame.frame_index]))
        out = []
        for ann in frame.annotations:
            drop = rng.random() < self.drop_prob
            offs = rng.normal(0.0, self.jitter_sigma, size=4) if self.jitter_sigma > 0 else np.zeros(4)
            if drop:
                continue
            b = ann.box
            if self.jitter_sigma == 0:
                out.append(Detection(b, ann.class_id, 1.0))
                continue
            x0, y0, x1, y1 = b.x0 + offs[0], b.y0 + offs[1], b.x1 + offs[2], b.y1 + offs[3]
            box = _clamped_box(min(x0, x1), min(y0, y1), max(x0, x1), max(y0, y1), self.canvas)
            if box is not None:
                out.append(Detection(box, ann.class_id, float(1.0 / (1.0 + np.abs(offs).mean()))))
        return DetectionSet(frame.frame_index, tuple(out))


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class DetectorTrainConfig:
    epochs: int = 8
    learning_rate: float = 1e-3
    batch_size: int = 16
    frame_stride: int = 2
    seed: int = 0
    box_weight: float = 5.0
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head: HeadConfig = field(default_factory=HeadConfig)

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epochs < 1 or self.batch_size < 1 or self.frame_stride < 1:
            raise ConfigError("invalid detector training config")


def grid_targets(frames: Sequence[FrameRecord], grid: int, input_size: int, num_classes: int) -> torch.Tensor:
    """Per-cell targets ``[obj, off_x, off_y, log_w, log_h, class]``; larger boxes win shared cells."""
    cell = input_size / grid
    t = torch.zeros(len(frames), 6, grid, grid, dtype=torch.float32)
    for n, fr in enumerate(frames):
        for ann in sorted(fr.annotations, key=lambda a: a.box.area):
            b = ann.box
            cx, cy = (b.x0 + b.x1) / 2 / cell, (b.y0 + b.y1) / 2 / cell
            j, i = min(int(cx), grid - 1), min(int(cy), grid - 1)
            t[n, :, i, j] = torch.tensor(
                [1.0, cx - j, cy - i, math.log(b.width / cell), math.log(b.height / cell), float(ann.class_id)]
            )
    return t


def detection_loss(raw: torch.Tensor, target: torch.Tensor, num_classes: int, box_weight: float) -> torch.Tensor:
    obj_t = target[:, 0]
    loss = F.binary_cross_entropy_with_logits(raw[:, 0], obj_t, reduction="sum")
    pos = obj_t > 0
    if pos.any():
        off = torch.sigmoid(raw[:, 1:3]).permute(0, 2, 3, 1)[pos]
        size = raw[:, 3:5].permute(0, 2, 3, 1)[pos]
        tgt = target[:, 1:5].permute(0, 2, 3, 1)[pos]
        loss = loss + box_weight * (
            F.smooth_l1_loss(off, tgt[:, :2], reduction="sum", beta=0.05)
            + F.smooth_l1_loss(size, tgt[:, 2:], reduction="sum", beta=0.05)
        )
        if num_classes > 1:
            logits = raw[:, 5:].permute(0, 2, 3, 1)[pos]
            loss = loss + F.cross_entropy(logits, target[:, 5][pos].long(), reduction="sum")
    return loss / raw.shape[0]


@dataclass
class DetectorHistory:
    epoch_loss: list[float] = field(default_factory=list)


def train_toy_detector(
    videos: Sequence[SyntheticVideo], config: DetectorTrainConfig, log=None
) -> tuple[Backbone, DetectionHead, DetectorHistory]:
    """Jointly fit backbone and head on annotated frames, then freeze both."""
    frames = [fr for v in videos for fr in v.frames[:: config.frame_stride]]
    if not any(fr.annotations for fr in frames):
        raise ConfigError("no annotated objects to train the detector on")
    size = config.backbone.input_size
    for v in videos:
        if (v.width, v.height) != (size, size):
            raise ConfigError(f"video {v.video_id} is {v.width}x{v.height}, backbone expects {size}x{size}")
    backbone = Backbone(config.backbone)
    grid = stage_shapes(config.backbone)[-1][1]
    head = DetectionHead(config.head, config.backbone.channels[-1])
    pixels = np.stack([fr.pixels for fr in frames])
    targets = grid_targets(frames, grid, size, config.head.num_classes)
    params = list(backbone.parameters()) + list(head.parameters())
    opt = torch.optim.Adam(params, lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    history = DetectorHistory()
    backbone.train()
    head.train()
    for epoch in range(config.epochs):
        order = rng.permutation(len(frames))
        total, batches = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            x = normalize(pixels[idx].astype(np.float32) / 255.0)
            loss = detection_loss(head(backbone(x)), targets[idx], config.head.num_classes, config.box_weight)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
            batches += 1
        history.epoch_loss.append(total / batches)
        if log:
            log(f"detector epoch {epoch + 1}/{config.epochs} loss {history.epoch_loss[-1]:.4f}")
    backbone.eval().requires_grad_(False)
    head.eval().requires_grad_(False)
    return backbone, head, history


def build_detector(kind: DetectorKind, head: DetectionHead | None, input_size: int, seed: int = 0):
    if kind.kind == "oracle":
        return OracleDetector(kind.jitter_sigma, kind.drop_prob, seed, float(input_size))
    if head is None:
        raise ContractError("toy detector requested but no trained head is available")
    return ToyHeadDetector(head, input_size)


def detect_video(detector, backbone: Backbone | None, video: SyntheticVideo) -> list[DetectionSet]:
    """Run the detector independently on every frame (per-frame baseline)."""
    out = []
    with torch.no_grad():
        for fr in video.frames:
            feats = backbone.forward_to_stage(normalize(fr.image), 4) if detector.kind == "toy" else None
            out.append(detector.detect(fr, feats))
    return out


# ---------------------------------------------------------------------------
# detection dump: one JSON line per detection


def write_detections(sets: Iterable[DetectionSet], path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        for ds in sets:
            for d in ds.detections:
                fh.write(
                    json.dumps(
                        {"frame": ds.frame_index, "class_id": d.class_id, "score": d.score, "bbox": d.box.as_list()},
                        sort_keys=True,
                    )
                    + "\n"
                )


def read_detections(path: str | os.PathLike, num_frames: int) -> list[DetectionSet]:
    per_frame: list[list[Detection]] = [[] for _ in range(num_frames)]
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                d = Detection(BoundingBox.from_list(rec["bbox"]), int(rec["class_id"]), float(rec["score"]))
                per_frame[int(rec["frame"])].append(d)
            except (KeyError, ValueError, TypeError, IndexError) as exc:
                raise SchemaError(f"line {lineno}: {exc}", str(path)) from None
    return [DetectionSet(t, tuple(ds)) for t, ds in enumerate(per_frame)]


# ---------------------------------------------------------------------------
# main-branch checkpoint: backbone and head in one container


def save_main_branch(path: str | os.PathLike, backbone: Backbone, head: DetectionHead, metadata: dict | None = None) -> str:
    tensors = {f"backbone.{k}": v for k, v in backbone.state_dict().items()}
    tensors.update({f"head.{k}": v for k, v in head.state_dict().items()})
    meta = dict(metadata or {})
    meta["backbone"] = backbone.config.to_dict()
    meta["head"] = head.config.to_dict()
    return save_params(path, tensors, meta)


def load_main_branch(path: str | os.PathLike) -> tuple[Backbone, DetectionHead, dict]:
    tensors, meta = load_params(path)
    backbone = Backbone(BackboneConfig.from_dict(meta["backbone"]))
    head = DetectionHead(HeadConfig(**meta["head"]), backbone.config.channels[-1])
    backbone.load_state_dict({k[9:]: v for k, v in tensors.items() if k.startswith("backbone.")})
    head.load_state_dict({k[5:]: v for k, v in tensors.items() if k.startswith("head.")})
    backbone.eval().requires_grad_(False)
    head.eval().requires_grad_(False)
    return backbone, head, meta
