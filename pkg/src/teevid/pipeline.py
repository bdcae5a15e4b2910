"""Per-frame early-exit controller: gate each frame at the exits, reuse or recompute detections.

For every frame after the first, the backbone runs stage by stage. At each
enabled exit the TEEM compares the current features with those cached at the
keyframe (the last frame that went through the main branch). A confident
"unchanged" reuses the keyframe's detections and stops; a confident "changed"
goes straight to the main branch; an unsure exit defers to the next one, and
running out of exits also means the main branch.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import torch

from .backbone import NUM_STAGES, Backbone, normalize
from .detector import DetectionSet
from .errors import ConfigError, LifecycleError
from .geometry import ObjectAnnotation, SceneryLabel, scenery_change
from .metrics.compute import MacReport
from .metrics.report import RunStats
from .synthgen import FrameRecord, SyntheticVideo
from .teem import Teem, exit_logits

GATES = ("teem", "ground_truth", "fixed_step")
REFERENCES = ("keyframe", "sliding")


@dataclass(frozen=True)
class PipelineConfig:
    gamma: float = 0.97
    tau_var: float = 0.4  # training-time metadata; also the ground-truth gate's threshold
    exits: tuple[int, ...] = (1, 2, 3, 4)
    entropy_base: str = "bits"
    min_probability: float | None = None
    gate: str = "teem"
    fixed_step: int = 10
    reference: str = "keyframe"

    def __post_init__(self):
        if not self.gamma >= 0:
            raise ConfigError("gamma must be >= 0")
        if not self.exits or list(self.exits) != sorted(set(self.exits)) or not set(self.exits) <= set(range(1, NUM_STAGES + 1)):
            raise ConfigError(f"exits must be an increasing subset of 1..{NUM_STAGES}")
        if self.gate not in GATES:
            raise ConfigError(f"gate must be one of {GATES}")
        if self.reference not in REFERENCES:
            raise ConfigError(f"reference must be one of {REFERENCES}")
        if self.entropy_base not in ("bits", "nats"):
            raise ConfigError("entropy_base must be 'bits' or 'nats'")
        if self.fixed_step < 1:
            raise ConfigError("fixed_step must be >= 1")
        if self.min_probability is not None and not 0.5 <= self.min_probability <= 1.0:
            raise ConfigError("min_probability must lie in [0.5, 1]")

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma,
            "tau_var": self.tau_var,
            "exits": list(self.exits),
            "entropy_base": self.entropy_base,
            "min_probability": self.min_probability,
            "gate": self.gate,
            "fixed_step": self.fixed_step,
            "reference": self.reference,
        }


@dataclass(frozen=True)
class ExitEvaluation:
    exit: int
    probs: tuple[float, float]
    entropy: float


@dataclass(frozen=True)
class ExitDecision:
    outcome: str  # "full_compute" | "reuse"
    reason: str | None = None  # first_frame | changed_at_exit | no_exit_confident | changed | scheduled
    exit: int | None = None
    evaluations: tuple[ExitEvaluation, ...] = ()

    @property
    def is_reuse(self) -> bool:
        return self.outcome == "reuse"

    @property
    def evaluated_exits(self) -> tuple[int, ...]:
        return tuple(e.exit for e in self.evaluations)


@dataclass
class PipelineState:
    ref_features: dict[int, torch.Tensor] = field(default_factory=dict)
    ref_detections: DetectionSet | None = None
    ref_annotations: tuple[ObjectAnnotation, ...] = ()
    ref_frame_index: int | None = None
    frames_since_full_compute: int = 0


@dataclass(frozen=True)
class FrameResult:
    frame_index: int
    detections: DetectionSet
    decision: ExitDecision
    macs_charged: int

    def trace_record(self) -> dict:
        d = self.decision
        return {
            "frame": self.frame_index,
            "outcome": d.outcome,
            "reason": d.reason,
            "exit": d.exit,
            "exits": [
                {"exit": e.exit, "p_unchanged": e.probs[0], "p_changed": e.probs[1], "entropy": e.entropy}
                for e in d.evaluations
            ],
            "macs": self.macs_charged,
            "detections": len(self.detections),
        }


def reuse_key(decision: ExitDecision) -> str:
    if decision.exit is not None:
        return f"exit{decision.exit}"
    return decision.reason or "reuse"


class TeePipeline:
    """Stateful per-video controller. One instance per concurrently processed video."""

    def __init__(
        self,
        config: PipelineConfig,
        backbone: Backbone | None = None,
        teems: Mapping[int, Teem] | None = None,
        detector=None,
        macs: MacReport | None = None,
    ):
        self.config = config
        self.backbone = backbone
        self.teems = dict(teems or {})
        self.detector = detector
        self.macs = macs
        self.state = PipelineState()

    def load_models(self, backbone: Backbone, teems: Mapping[int, Teem], detector, macs: MacReport) -> None:
        self.backbone, self.teems, self.detector, self.macs = backbone, dict(teems), detector, macs

    def reset_state(self) -> PipelineState:
        self.state = PipelineState()
        return self.state

    def _check_loaded(self) -> None:
        missing = [n for n, v in (("backbone", self.backbone), ("detector", self.detector), ("mac report", self.macs)) if v is None]
        if self.config.gate == "teem":
            missing += [f"teem{l}" for l in self.config.exits if l not in self.teems]
        if missing:
            raise LifecycleError(f"models not loaded: {', '.join(missing)}")

    # -- main branch -------------------------------------------------------

    def _full_compute(self, frame: FrameRecord, z: torch.Tensor, depth: int, feats: dict[int, torch.Tensor], decision: ExitDecision) -> FrameResult:
        """Finish the trunk from stage ``depth``, detect, and make this frame the keyframe."""
        for l in range(depth, NUM_STAGES):
            z = self.backbone.stages[l](z)
            feats[l + 1] = z
        dets = self.detector.detect(frame, z if self.detector.kind == "toy" else None)
        st = self.state
        st.ref_features = {l: feats[l] for l in self.config.exits}
        st.ref_detections = dets
        st.ref_annotations = frame.annotations
        st.ref_frame_index = frame.frame_index
        st.frames_since_full_compute = 0
        return FrameResult(frame.frame_index, dets, decision, self.macs.full_cost(decision.evaluated_exits))

    def _reuse(self, frame: FrameRecord, decision: ExitDecision, macs: int) -> FrameResult:
        st = self.state
        st.frames_since_full_compute += 1
        # the cached set is immutable; only the frame index is restamped
        dets = DetectionSet(frame.frame_index, st.ref_detections.detections)
        return FrameResult(frame.frame_index, dets, decision, macs)

    # -- gating -------------------------------------------------------------

    @torch.no_grad()
    def process_frame(self, frame: FrameRecord) -> FrameResult:
        self._check_loaded()
        cfg, st = self.config, self.state
        x = normalize(frame.image)
        z = self.backbone.stem_forward(x)
        feats: dict[int, torch.Tensor] = {}
        if st.ref_detections is None:
            return self._full_compute(frame, z, 0, feats, ExitDecision("full_compute", "first_frame"))

        if cfg.gate == "fixed_step":
            if st.frames_since_full_compute + 1 >= cfg.fixed_step:
                return self._full_compute(frame, z, 0, feats, ExitDecision("full_compute", "scheduled"))
            return self._reuse(frame, ExitDecision("reuse", "fixed_step"), 0)

        if cfg.gate == "ground_truth":
            label = scenery_change(st.ref_annotations, frame.annotations, cfg.tau_var)
            if label == SceneryLabel.CHANGED:
                return self._full_compute(frame, z, 0, feats, ExitDecision("full_compute", "changed"))
            return self._reuse(frame, ExitDecision("reuse", "ground_truth"), 0)

        depth = 0
        evals: list[ExitEvaluation] = []
        for l in cfg.exits:
            for k in range(depth, l):
                z = self.backbone.stages[k](z)
                feats[k + 1] = z
            depth = l
            # the TEEMs were fitted on half-precision cached features
            z_cur = z.half().float()
            out = exit_logits(self.teems[l](st.ref_features[l].half().float(), z_cur)[0], cfg.entropy_base)
            evals.append(ExitEvaluation(l, out.probs, out.entropy))
            if cfg.reference == "sliding":
                st.ref_features[l] = z
            confident = out.entropy < cfg.gamma
            if cfg.min_probability is not None:
                confident = confident and max(out.probs) >= cfg.min_probability
            if not confident:
                continue
            if out.label == SceneryLabel.UNCHANGED:
                return self._reuse(frame, ExitDecision("reuse", None, l, tuple(evals)), self.macs.reuse_cost([e.exit for e in evals]))
            return self._full_compute(frame, z, depth, feats, ExitDecision("full_compute", "changed_at_exit", l, tuple(evals)))
        return self._full_compute(frame, z, depth, feats, ExitDecision("full_compute", "no_exit_confident", None, tuple(evals)))

    def process_video(self, video: SyntheticVideo | Sequence[FrameRecord]) -> tuple[list[FrameResult], RunStats]:
        """Run a fresh state over the frames in order."""
        frames = video.frames if isinstance(video, SyntheticVideo) else list(video)
        self.reset_state()
        if not frames:
            return [], RunStats(0, 0, {}, 0, self.macs.full.macs if self.macs else 0)
        results = [self.process_frame(fr) for fr in frames]
        return results, run_stats(results, self.macs.full.macs)


def run_stats(results: Sequence[FrameResult], full_macs: int) -> RunStats:
    reuse: dict[str, int] = {}
    full = 0
    for r in results:
        if r.decision.is_reuse:
            key = reuse_key(r.decision)
            reuse[key] = reuse.get(key, 0) + 1
        else:
            full += 1
    return RunStats(len(results), full, dict(sorted(reuse.items())), sum(r.macs_charged for r in results), full_macs)


def write_trace(results: Iterable[FrameResult], path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        for r in results:
            fh.write(json.dumps(r.trace_record(), sort_keys=True) + "\n")


def read_trace(path: str | os.PathLike) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
