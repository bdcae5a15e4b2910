"""Balanced frame-pair sampling with an adaptive sampling interval.

Pairs are binned into ten classes by their largest per-object motion. Once a
class is full, further draws landing in it are rejected and the interval is
nudged toward the regime that feeds the emptiest class: longer intervals give
more motion, shorter ones less.
"""

from __future__ import annotations

import json
import math
import os
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DomainError, SchemaError
from .geometry import SceneryLabel, label_from_motion, max_motion, motion_field
from .synthgen import SyntheticVideo

NUM_BINS = 10


@dataclass(frozen=True)
class FramePairSample:
    video_id: str
    frame_i: int
    frame_j: int
    max_mfi: float
    label: SceneryLabel
    bin: int

    @property
    def interval(self) -> int:
        return self.frame_j - self.frame_i

    def __post_init__(self):
        if self.frame_j <= self.frame_i:
            raise ConfigError(f"frame_j ({self.frame_j}) must exceed frame_i ({self.frame_i})")
        if self.bin != bin_of(self.max_mfi):
            raise ConfigError(f"bin {self.bin} inconsistent with max_mfi {self.max_mfi}")

    def to_record(self) -> dict:
        return {
            "video_id": self.video_id,
            "frame_i": self.frame_i,
            "frame_j": self.frame_j,
            "interval": self.interval,
            "max_mfi": self.max_mfi,
            "label": int(self.label),
            "bin": self.bin,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "FramePairSample":
        return cls(
            video_id=str(rec["video_id"]),
            frame_i=int(rec["frame_i"]),
            frame_j=int(rec["frame_j"]),
            max_mfi=float(rec["max_mfi"]),
            label=SceneryLabel(int(rec["label"])),
            bin=int(rec["bin"]),
        )


@dataclass
class BinLedger:
    capacity: int
    counts: list[int] = field(default_factory=lambda: [0] * NUM_BINS)
    exhausted: list[bool] = field(default_factory=lambda: [False] * NUM_BINS)

    def full(self, b: int) -> bool:
        return self.counts[b] >= self.capacity

    def all_full(self) -> bool:
        return all(self.full(b) for b in range(NUM_BINS))


@dataclass(frozen=True)
class SamplerConfig:
    bin_capacity: int = 50
    initial_interval: int = 4
    interval_min: int = 1
    interval_max: int = 30
    interval_step: int = 1
    seed: int = 0
    tau_var: float = 0.4
    attempt_budget: int | None = None  # default: 200 x total capacity
    ew_decay: float = 0.9

    def __post_init__(self):
        if not 1 <= self.interval_min <= self.initial_interval <= self.interval_max:
            raise ConfigError("need 1 <= interval_min <= initial_interval <= interval_max")
        if self.bin_capacity < 1 or self.interval_step < 1:
            raise ConfigError("bin_capacity and interval_step must be >= 1")
        if not 0.0 <= self.tau_var <= 1.0:
            raise ConfigError("tau_var must lie in [0, 1]")


@dataclass
class SamplingResult:
    samples: list[FramePairSample]
    ledger: BinLedger
    attempts: int


def bin_of(max_mfi: float) -> int:
    """Variation class of a pair: [0.1b, 0.1(b+1)) for b < 9, top bin closed at 1."""
    if not (0.0 <= max_mfi <= 1.0) or math.isnan(max_mfi):
        raise DomainError(f"max_mfi {max_mfi} outside [0, 1]")
    b = int(math.floor(max_mfi * NUM_BINS))
    # guard against floating rounding at the edges
    if b > 0 and max_mfi < b / NUM_BINS:
        b -= 1
    elif b < NUM_BINS and max_mfi >= (b + 1) / NUM_BINS:
        b += 1
    return min(b, NUM_BINS - 1)


def pair_sample(video: SyntheticVideo, i: int, j: int, tau_var: float) -> FramePairSample:
    m = max_motion(motion_field(video.frames[i].annotations, video.frames[j].annotations))
    return FramePairSample(video.video_id, i, j, m, label_from_motion(m, tau_var), bin_of(m))


def _target_bin(ledger: BinLedger) -> int:
    fill = [ledger.counts[b] / ledger.capacity for b in range(NUM_BINS)]
    return int(np.argmin(fill))


def sample_balanced_pairs(videos: Sequence[SyntheticVideo], config: SamplerConfig) -> SamplingResult:
    """Draw pairs until every variation class is full or the attempt budget runs out.

    Videos are drawn uniformly regardless of length, so short videos are
    revisited (upsampled) relative to long ones. An exponentially weighted
    mean of the class index observed at each interval tells which way to move
    the interval after a rejection.
    """
    usable = [v for v in videos if len(v) >= 2]
    if not usable:
        raise ConfigError("need at least one video with two or more frames")
    rng = np.random.default_rng(config.seed)
    ledger = BinLedger(config.bin_capacity)
    budget = config.attempt_budget or 200 * config.bin_capacity * NUM_BINS
    interval = config.initial_interval
    ew_bin: dict[int, float] = {}
    seen: set[tuple[str, int, int]] = set()
    samples: list[FramePairSample] = []
    attempts = 0
    while attempts < budget and not ledger.all_full():
        attempts += 1
        video = usable[int(rng.integers(len(usable)))]
        step = min(interval, len(video) - 1)
        i = int(rng.integers(len(video) - step))
        sample = pair_sample(video, i, i + step, config.tau_var)
        b = sample.bin
        prev = ew_bin.get(interval)
        ew_bin[interval] = b if prev is None else config.ew_decay * prev + (1 - config.ew_decay) * b
        key = (video.video_id, i, i + step)
        if not ledger.full(b) and key not in seen:
            seen.add(key)
            ledger.counts[b] += 1
            samples.append(sample)
            continue
        target = _target_bin(ledger)
        if ew_bin[interval] < target:
            interval = min(interval + config.interval_step, config.interval_max)
        elif ew_bin[interval] > target:
            interval = max(interval - config.interval_step, config.interval_min)
    ledger.exhausted = [not ledger.full(b) for b in range(NUM_BINS)]
    return SamplingResult(samples, ledger, attempts)


def split_dataset(
    samples: Sequence[FramePairSample], fractions: Sequence[float], seed: int
) -> tuple[list[FramePairSample], list[FramePairSample]]:
    """Label-stratified train/test split with largest-remainder rounding."""
    if len(fractions) != 2:
        raise ConfigError("expected (train, test) fractions")
    f_train, f_test = (float(f) for f in fractions)
    if not (0.0 <= f_train <= 1.0 and 0.0 <= f_test <= 1.0) or abs(f_train + f_test - 1.0) > 1e-9:
        raise ConfigError(f"fractions {tuple(fractions)} must lie in [0, 1] and sum to 1")
    rng = np.random.default_rng(seed)
    groups: dict[int, list[FramePairSample]] = defaultdict(list)
    for s in samples:
        groups[int(s.label)].append(s)
    labels = sorted(groups)
    exact = {lab: len(groups[lab]) * f_train for lab in labels}
    take = {lab: int(math.floor(exact[lab])) for lab in labels}
    short = int(round(len(samples) * f_train)) - sum(take.values())
    for lab in sorted(labels, key=lambda lab: (-(exact[lab] - take[lab]), lab))[: max(short, 0)]:
        take[lab] += 1
    train: list[FramePairSample] = []
    test: list[FramePairSample] = []
    for lab in labels:
        group = groups[lab]
        order = rng.permutation(len(group))
        train.extend(group[k] for k in order[: take[lab]])
        test.extend(group[k] for k in order[take[lab] :])
    return train, test


def write_pairs(samples: Iterable[FramePairSample], path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_record(), sort_keys=True) + "\n")


def read_pairs(path: str | os.PathLike) -> list[FramePairSample]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(FramePairSample.from_record(json.loads(line)))
            except (KeyError, ValueError, TypeError) as exc:
                raise SchemaError(f"line {lineno}: {exc}", str(path)) from None
    return out


def ledger_record(ledger: BinLedger) -> dict:
    return asdict(ledger)
