"""Run statistics and the evaluation report."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

from ..errors import IntegrityError
from .detection import DEFAULT_THRESHOLDS, mean_average_precision, mean_iou

REPORT_SCHEMA_VERSION = 1

# Large-scale reference rows (ResNet-50 two-stage detector on surveillance video).
# Context only: nothing at desk scale is asserted against these.
REFERENCE_ROWS = {
    "per_frame": {"updating_ratio": 1, "map": 0.231, "miou": 0.80},
    "fixed_step_7": {"updating_ratio": 7, "map": 0.211, "miou": 0.76},
    "fixed_step_10": {"updating_ratio": 10, "map": 0.183, "miou": 0.75},
    "fixed_step_20": {"updating_ratio": 20, "map": 0.16, "miou": 0.70},
    "temporal_early_exit": {"updating_ratio": 20, "map": 0.209, "miou": 0.75},
    "exit1_vs_full_macs": {"exit1": 1.7e9, "full": 134e9},
    "fps": {"exit1": 628, "full": 18},
}


@dataclass
class RunStats:
    frames: int
    full_compute_count: int
    reuse_counts: dict[str, int]
    total_macs: int
    full_macs: int

    @property
    def avg_macs_per_frame(self) -> float:
        return self.total_macs / self.frames if self.frames else 0.0

    @property
    def updating_ratio(self) -> float:
        return self.frames / self.full_compute_count if self.full_compute_count else float("inf")

    @property
    def mac_speedup(self) -> float:
        return self.full_macs / self.avg_macs_per_frame if self.total_macs else float("inf")

    def merge(self, other: "RunStats") -> "RunStats":
        keys = sorted(set(self.reuse_counts) | set(other.reuse_counts))
        return RunStats(
            self.frames + other.frames,
            self.full_compute_count + other.full_compute_count,
            {k: self.reuse_counts.get(k, 0) + other.reuse_counts.get(k, 0) for k in keys},
            self.total_macs + other.total_macs,
            self.full_macs,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["avg_macs_per_frame"] = self.avg_macs_per_frame
        d["updating_ratio"] = self.updating_ratio
        d["mac_speedup"] = self.mac_speedup
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunStats":
        return cls(
            int(d["frames"]),
            int(d["full_compute_count"]),
            {str(k): int(v) for k, v in d["reuse_counts"].items()},
            int(d["total_macs"]),
            int(d["full_macs"]),
        )


@dataclass
class EvalReport:
    run_id: str
    map: float
    per_threshold_ap: dict[str, float]
    miou: float
    classifier: dict | None = None
    run_stats: dict | None = None
    config: dict = field(default_factory=dict)
    reference: dict = field(default_factory=lambda: dict(REFERENCE_ROWS))
    schema_version: int = REPORT_SCHEMA_VERSION

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"


@dataclass
class EvalInputs:
    run_id: str
    detections_per_frame: Sequence
    annotations_per_frame: Sequence
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS
    config: dict = field(default_factory=dict)


def _run_id(obj) -> str | None:
    if obj is None:
        return None
    if isinstance(obj, Mapping):
        return obj.get("run_id")
    return getattr(obj, "run_id", None)


def assemble_report(classifier_report, run_stats, inputs: EvalInputs) -> EvalReport:
    """Compute detection metrics and bundle them with the classifier and run statistics.

    ``classifier_report`` and ``run_stats`` are mappings (or objects) carrying
    a ``run_id``; every provided id must equal ``inputs.run_id``.
    """
    for name, part in (("classifier report", classifier_report), ("run stats", run_stats)):
        rid = _run_id(part)
        if part is not None and rid != inputs.run_id:
            raise IntegrityError(f"{name} belongs to run {rid!r}, evaluation inputs to {inputs.run_id!r}")
    per_t, m = mean_average_precision(inputs.detections_per_frame, inputs.annotations_per_frame, inputs.thresholds)

    def plain(part):
        if part is None:
            return None
        d = dict(part) if isinstance(part, Mapping) else part.to_dict()
        d.pop("run_id", None)
        return d

    return EvalReport(
        run_id=inputs.run_id,
        map=m,
        per_threshold_ap={f"{t:.2f}": v for t, v in per_t.items()},
        miou=mean_iou(inputs.detections_per_frame, inputs.annotations_per_frame),
        classifier=plain(classifier_report),
        run_stats=plain(run_stats),
        config=dict(inputs.config),
    )
