"""Detection accuracy: mAP over an IoU-threshold sweep and mean IoU."""

from __future__ import annotations

from collections import defaultdict
from typing import Sequence

import numpy as np

from ..errors import MetricError
from ..geometry import ObjectAnnotation, iou

DEFAULT_THRESHOLDS: tuple[float, ...] = tuple(round(0.35 + 0.05 * k, 2) for k in range(9))


def _dets(frame) -> Sequence:
    return frame.detections if hasattr(frame, "detections") else frame


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the precision envelope (all-point interpolation)."""
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _class_ap(dets, gts_by_frame, n_gt: int, threshold: float) -> float:
    if n_gt == 0:
        raise MetricError("class without ground truth")
    if not dets:
        return 0.0
    matched = {f: [False] * len(g) for f, g in gts_by_frame.items()}
    tp = np.zeros(len(dets))
    for k, (_, f, _, box) in enumerate(dets):
        gts = gts_by_frame.get(f, [])
        best, best_iou = -1, -1.0
        for g, gbox in enumerate(gts):
            if matched[f][g]:
                continue
            v = iou(box, gbox)
            if v > best_iou:
                best, best_iou = g, v
        if best >= 0 and best_iou >= threshold:
            matched[f][best] = True
            tp[k] = 1.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    return average_precision(ctp / n_gt, ctp / (ctp + cfp))


def mean_average_precision(
    detections_per_frame: Sequence,
    annotations_per_frame: Sequence[Sequence[ObjectAnnotation]],
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
) -> tuple[dict[float, float], float]:
    """Per-threshold AP (mean over classes) and their mean.

    Detections are matched greedily in descending score order, each to the
    best-overlapping ground truth not yet claimed in the same frame.
    """
    if len(detections_per_frame) != len(annotations_per_frame):
        raise MetricError("detections and annotations cover different frame counts")
    gts: dict[int, dict[int, list]] = defaultdict(lambda: defaultdict(list))
    for f, anns in enumerate(annotations_per_frame):
        for a in anns:
            gts[a.class_id][f].append(a.box)
    if not gts:
        raise MetricError("no annotations: mAP is undefined")
    dets: dict[int, list] = defaultdict(list)
    for f, frame in enumerate(detections_per_frame):
        for k, d in enumerate(_dets(frame)):
            dets[d.class_id].append((-d.score, f, k, d.box))
    for c in dets:
        dets[c].sort(key=lambda r: r[:3])
    per_threshold = {}
    for t in thresholds:
        aps = []
        for c in sorted(gts):
            n_gt = sum(len(b) for b in gts[c].values())
            aps.append(_class_ap(dets.get(c, []), gts[c], n_gt, t))
        per_threshold[float(t)] = float(np.mean(aps))
    return per_threshold, float(np.mean(list(per_threshold.values())))


def frame_iou(detections: Sequence, annotations: Sequence[ObjectAnnotation]) -> float | None:
    """Mean IoU over one frame's ground truth; ``None`` when the frame has none."""
    if not annotations:
        return None
    pairs = []
    for g, a in enumerate(annotations):
        for k, d in enumerate(detections):
            if d.class_id == a.class_id:
                v = iou(a.box, d.box)
                if v > 0:
                    pairs.append((-v, g, k))
    pairs.sort()
    used_g, used_d = set(), set()
    scores = [0.0] * len(annotations)
    for neg, g, k in pairs:
        if g in used_g or k in used_d:
            continue
        used_g.add(g)
        used_d.add(k)
        scores[g] = -neg
    return float(np.mean(scores))


def mean_iou(detections_per_frame: Sequence, annotations_per_frame: Sequence[Sequence[ObjectAnnotation]]) -> float:
    if len(detections_per_frame) != len(annotations_per_frame):
        raise MetricError("detections and annotations cover different frame counts")
    vals = [frame_iou(_dets(d), a) for d, a in zip(detections_per_frame, annotations_per_frame)]
    vals = [v for v in vals if v is not None]
    if not vals:
        raise MetricError("no annotated frames: mIoU is undefined")
    return float(np.mean(vals))
