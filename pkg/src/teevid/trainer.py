"""Per-exit TEEM training on a frozen backbone, and classifier evaluation."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import NUM_STAGES, Backbone, normalize
from .checkpoint import load_params, save_params, state_hash
from .errors import ConfigError, IntegrityError
from .sampler import FramePairSample
from .synthgen import SyntheticVideo
from .teem import Teem, TeemConfig


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    learning_rate: float = 1e-2
    batch_size: int = 32
    seed: int = 0
    tau_var: float = 0.4
    exits: tuple[int, ...] = (1, 2, 3, 4)
    cache_bytes: int = 1_500_000_000

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not set(self.exits) <= set(range(1, NUM_STAGES + 1)) or not self.exits:
            raise ConfigError(f"exits must be a non-empty subset of 1..{NUM_STAGES}")


@dataclass
class TrainHistory:
    entries: list[dict] = field(default_factory=list)

    def add(self, epoch: int, exit_index: int, loss: float, accuracy: float) -> None:
        self.entries.append({"epoch": epoch, "exit": exit_index, "loss": loss, "accuracy": accuracy})

    def at(self, epoch: int, exit_index: int) -> dict:
        for e in self.entries:
            if e["epoch"] == epoch and e["exit"] == exit_index:
                return e
        raise KeyError((epoch, exit_index))


@dataclass(frozen=True)
class ExitMetrics:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else 0.0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def to_dict(self) -> dict:
        return {
            **asdict(self),
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
        }

    @classmethod
    def from_predictions(cls, predicted: Sequence[int], truth: Sequence[int]) -> "ExitMetrics":
        p = np.asarray(predicted, dtype=int)
        t = np.asarray(truth, dtype=int)
        return cls(
            tp=int(((p == 1) & (t == 1)).sum()),
            fp=int(((p == 1) & (t == 0)).sum()),
            fn=int(((p == 0) & (t == 1)).sum()),
            tn=int(((p == 0) & (t == 0)).sum()),
        )


@dataclass
class ClassifierReport:
    exits: dict[int, ExitMetrics]

    @property
    def best_exit(self) -> int:
        return max(sorted(self.exits), key=lambda l: self.exits[l].accuracy)

    def to_dict(self) -> dict:
        return {"exits": {str(l): m.to_dict() for l, m in sorted(self.exits.items())}, "best_exit": self.best_exit}


class FeatureCache:
    """Backbone taps for (video_id, frame) keys, computed once and kept as float16.

    Falls back to recomputing per request when the requested frames would not
    fit in ``max_bytes``.
    """

    def __init__(self, backbone: Backbone, videos: Mapping[str, SyntheticVideo], max_bytes: int = 1_500_000_000):
        self.backbone = backbone
        self.videos = videos
        self.max_bytes = max_bytes
        self._store: dict[tuple[str, int], list[torch.Tensor]] = {}
        self._chunk = 32

    def _compute(self, keys: Sequence[tuple[str, int]]) -> list[torch.Tensor]:
        imgs = np.stack([self.videos[v].frames[f].pixels for v, f in keys]).astype(np.float32) / 255.0
        with torch.no_grad():
            return self.backbone.taps(normalize(imgs))

    def warm(self, keys: Sequence[tuple[str, int]]) -> bool:
        keys = sorted(set(keys) - set(self._store))
        if not keys:
            return True
        per_frame = sum(c * h * w for c, h, w in self._shapes()) * 2
        if (len(keys) + len(self._store)) * per_frame > self.max_bytes:
            return False
        for start in range(0, len(keys), self._chunk):
            chunk = keys[start : start + self._chunk]
            taps = self._compute(chunk)
            for n, key in enumerate(chunk):
                self._store[key] = [t[n].to(torch.float16) for t in taps]
        return True

    def _shapes(self):
        from .backbone import stage_shapes

        return stage_shapes(self.backbone.config)

    def batch(self, keys: Sequence[tuple[str, int]]) -> list[torch.Tensor]:
        if all(k in self._store for k in keys):
            return [torch.stack([self._store[k][l] for k in keys]).to(torch.float32) for l in range(NUM_STAGES)]
        # keep the numeric path identical to cached entries
        taps = []
        for start in range(0, len(keys), self._chunk):
            taps.append([t.to(torch.float16) for t in self._compute(keys[start : start + self._chunk])])
        return [torch.cat([c[l] for c in taps]).to(torch.float32) for l in range(NUM_STAGES)]


def _labels(samples: Sequence[FramePairSample]) -> torch.Tensor:
    return torch.tensor([int(s.label) for s in samples], dtype=torch.long)


def train_teems(
    backbone: Backbone,
    samples: Sequence[FramePairSample],
    videos: Mapping[str, SyntheticVideo] | FeatureCache,
    teem_configs: Sequence[TeemConfig],
    config: TrainConfig,
    log: Callable[[str], None] | None = None,
) -> tuple[dict[int, Teem], TrainHistory]:
    """Fit one TEEM per enabled exit with cross-entropy; gradients never reach the backbone.

    All exits share each batch's backbone forward pass and are updated by
    independent optimisers, which is equivalent to training them one by one.
    """
    if not samples:
        raise ConfigError("no training samples")
    if len(teem_configs) != NUM_STAGES:
        raise ConfigError(f"need {NUM_STAGES} TEEM configs")
    cache = videos if isinstance(videos, FeatureCache) else FeatureCache(backbone, videos, config.cache_bytes)
    before = state_hash(backbone)
    backbone.eval().requires_grad_(False)
    teems = {l: Teem(teem_configs[l - 1], seed=config.seed * 100 + l) for l in config.exits}
    opts = {l: torch.optim.Adam(t.parameters(), lr=config.learning_rate) for l, t in teems.items()}
    # cosine decay to zero so the final weights settle instead of landing on an arbitrary step
    scheds = {l: torch.optim.lr_scheduler.CosineAnnealingLR(o, T_max=config.epochs) for l, o in opts.items()}
    keys = [(s.video_id, s.frame_i) for s in samples] + [(s.video_id, s.frame_j) for s in samples]
    cache.warm(keys)
    rng = np.random.default_rng(config.seed)
    history = TrainHistory()
    for epoch in range(1, config.epochs + 1):
        for t in teems.values():
            t.train()
        order = rng.permutation(len(samples))
        loss_sum = {l: 0.0 for l in teems}
        correct = {l: 0 for l in teems}
        for start in range(0, len(order), config.batch_size):
            batch = [samples[k] for k in order[start : start + config.batch_size]]
            if len(batch) < 2 and len(samples) >= 2:
                # batch-norm needs more than one sample per batch
                continue
            z_ref = cache.batch([(s.video_id, s.frame_i) for s in batch])
            z_cur = cache.batch([(s.video_id, s.frame_j) for s in batch])
            y = _labels(batch)
            for l, teem in teems.items():
                scores = teem(z_ref[l - 1], z_cur[l - 1])
                loss = F.cross_entropy(scores, y)
                opts[l].zero_grad()
                loss.backward()
                opts[l].step()
                loss_sum[l] += loss.item() * len(batch)
                pred = (scores[:, 1] >= scores[:, 0]).long()
                correct[l] += int((pred == y).sum())
        for sch in scheds.values():
            sch.step()
        seen = len(samples) if len(samples) < 2 else len(samples) - (len(samples) % config.batch_size == 1)
        for l in sorted(teems):
            history.add(epoch, l, loss_sum[l] / seen, correct[l] / seen)
            if log:
                log(f"epoch {epoch}/{config.epochs} exit {l} loss {loss_sum[l] / seen:.4f} acc {correct[l] / seen:.3f}")
    for t in teems.values():
        t.eval()
    if state_hash(backbone) != before:
        raise IntegrityError("backbone parameters changed during TEEM training")
    return teems, history


@torch.no_grad()
def predict_pairs(
    teems: Mapping[int, Teem], cache: FeatureCache, samples: Sequence[FramePairSample], batch_size: int = 64
) -> dict[int, np.ndarray]:
    """Changed-class probability per exit for every sample (no entropy gate)."""
    out: dict[int, list[np.ndarray]] = {l: [] for l in teems}
    for t in teems.values():
        t.eval()
    for start in range(0, len(samples), batch_size):
        batch = samples[start : start + batch_size]
        z_ref = cache.batch([(s.video_id, s.frame_i) for s in batch])
        z_cur = cache.batch([(s.video_id, s.frame_j) for s in batch])
        for l, teem in teems.items():
            out[l].append(torch.softmax(teem(z_ref[l - 1], z_cur[l - 1]).double(), dim=1)[:, 1].numpy())
    return {l: np.concatenate(v) for l, v in out.items()}


def evaluate_classifier(
    teems: Mapping[int, Teem],
    backbone: Backbone,
    samples: Sequence[FramePairSample],
    videos: Mapping[str, SyntheticVideo] | FeatureCache,
) -> ClassifierReport:
    """Argmax prediction per exit against the ground-truth labels, changed as positive."""
    if not samples:
        raise ConfigError("empty test set")
    cache = videos if isinstance(videos, FeatureCache) else FeatureCache(backbone, videos)
    cache.warm([(s.video_id, s.frame_i) for s in samples] + [(s.video_id, s.frame_j) for s in samples])
    probs = predict_pairs(teems, cache, samples)
    truth = [int(s.label) for s in samples]
    # tie at p = 0.5 resolves to changed
    return ClassifierReport(
        {l: ExitMetrics.from_predictions((p >= 0.5).astype(int), truth) for l, p in sorted(probs.items())}
    )


def save_teems(path: str | os.PathLike, teems: Mapping[int, Teem], metadata: dict | None = None) -> str:
    tensors = {f"exit{l}.{name}": t for l, teem in teems.items() for name, t in teem.state_dict().items()}
    meta = dict(metadata or {})
    meta["teems"] = {str(l): teem.config.to_dict() for l, teem in sorted(teems.items())}
    return save_params(path, tensors, meta)


def load_teems(path: str | os.PathLike) -> tuple[dict[int, Teem], dict]:
    tensors, meta = load_params(path)
    teems = {}
    for key, cfg in meta["teems"].items():
        l = int(key)
        teem = Teem(TeemConfig(**cfg))
        prefix = f"exit{l}."
        teem.load_state_dict({k[len(prefix) :]: v for k, v in tensors.items() if k.startswith(prefix)})
        teems[l] = teem.eval()
    return teems, meta
