"""Acceptance suite: the twelve end-to-end criteria at their stated tolerances.

The session fixture runs the whole CLI script once on the default configuration
(oracle detector, 224 px corpus, 500-frame evaluation suite) and times each
command. Every test records a one-line verdict, repeated in the terminal summary.
"""

import dataclasses
import hashlib
import json
import time
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
import torch

from oracles import finite_difference_errors, raster_iou_separable
from teevid import config as cfgmod
from teevid.backbone import BackboneConfig
from teevid.cli import Run, main
from teevid.detector import HeadConfig, build_detector, detect_video
from teevid.geometry import BoundingBox, iou, scenery_change
from teevid.metrics.compute import PathCost, default_teem_configs, mac_report
from teevid.metrics.macs import LayerSpec, conv
from teevid.pipeline import TeePipeline, read_trace, write_trace
from teevid.sampler import read_pairs, sample_balanced_pairs
from teevid.synthgen import FrameRecord, SyntheticVideo, generate_video, random_scene, read_annotations
from teevid.teem import Teem

SCRIPT = ("gen-data", "sample-pairs", "train-detector", "train-teems", "infer", "eval", "report", "cam")
ACCEPTANCE = {"run_id": "acceptance", "detector": {"kind": "oracle", "jitter_sigma": 0.0}}
# same commands and seeding as the full run, on a corpus small enough to run twice
REDUCED = {
    "run_id": "determinism",
    "corpus": {"videos_per_regime": 1, "num_frames": 30, "size": 112},
    "suite": {"videos": 2, "num_frames": 40},
    "sampler": {"bin_capacity": 10},
    "detector_train": {"epochs": 1, "frame_stride": 4},
    "train": {"epochs": 2},
    "cam": {"pairs": 1},
}


def run_script(root: Path, doc: dict) -> tuple[Path, dict[str, float]]:
    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "config.json"
    cfg.write_text(json.dumps(doc))
    out = root / "run"
    timings = {}
    for cmd in SCRIPT:
        start = time.perf_counter()
        code = main([cmd, "--config", str(cfg), "--out", str(out)])
        timings[cmd] = time.perf_counter() - start
        assert code == 0, f"{cmd} exited with {code}"
    return out, timings


@pytest.fixture(scope="session")
def full_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    out, timings = run_script(root, ACCEPTANCE)
    return out, timings, Run(cfgmod.load_config(str(root / "config.json")), out)


def read_json(path: Path):
    return json.loads(path.read_text())


def annotation_videos(root: Path, split: str) -> list[SyntheticVideo]:
    """Corpus videos with exact annotations but placeholder pixels (labels never look at images)."""
    index = read_json(root / "data" / "index.json")
    blank = np.zeros((1, 1, 3), dtype=np.uint8)
    out = []
    for vid in index[split]:
        video_id, w, h, per_frame = read_annotations(root / "data" / split / vid)
        out.append(SyntheticVideo(video_id, w, h, tuple(FrameRecord(t, blank, a) for t, a in enumerate(per_frame))))
    return out


def test_01_iou_matches_raster_oracle(verdict):
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        boxes = []
        for _ in range(2):
            w, h = rng.uniform(2, 160, size=2)
            x, y = rng.uniform(0, 224 - w), rng.uniform(0, 224 - h)
            boxes.append((x, y, x + w, y + h))
        a, b = boxes
        worst = max(worst, abs(iou(BoundingBox(*a), BoundingBox(*b)) - raster_iou_separable(a, b)))
    elapsed = time.perf_counter() - start
    ok = worst <= 0.02 and elapsed <= 10
    verdict(1, "geometry oracle", ok, f"worst |IoU - raster| {worst:.5f} over 1000 pairs (<= 0.02) in {elapsed:.1f}s (<= 10s)")
    assert ok


def test_02_stored_labels_match_annotations(full_run, verdict):
    out, _, run = full_run
    videos = {v.video_id: v for v in annotation_videos(out, "corpus")}
    samples = read_pairs(out / "pairs" / "train.jsonl") + read_pairs(out / "pairs" / "test.jsonl")
    tau = run.config["tau_var"]
    bad = 0
    for s in samples:
        frames = videos[s.video_id].frames
        if scenery_change(frames[s.frame_i].annotations, frames[s.frame_j].annotations, tau) != s.label:
            bad += 1
    ok = bad == 0 and len(samples) > 0
    verdict(2, "label integrity", ok, f"{bad} discrepancies over {len(samples)} sampled pairs")
    assert ok


def test_03_classifier_quality(full_run, verdict):
    out, timings, _ = full_run
    n_train = len(read_pairs(out / "pairs" / "train.jsonl"))
    n_test = len(read_pairs(out / "pairs" / "test.jsonl"))
    rep = read_json(out / "teems" / "classifier.json")
    best = rep["exits"][str(rep["best_exit"])]
    # the TEEMs read the frozen detector trunk, so its training is part of the budget
    elapsed = timings["sample-pairs"] + timings["train-detector"] + timings["train-teems"]
    ok = n_train >= 2000 and n_test >= 500 and best["accuracy"] >= 0.85 and best["f1"] >= 0.85 and elapsed <= 900
    verdict(
        3,
        "classifier quality",
        ok,
        f"best exit {rep['best_exit']} accuracy {best['accuracy']:.3f} F1 {best['f1']:.3f} (>= 0.85) "
        f"on {n_train}/{n_test} pairs in {elapsed:.0f}s (<= 900s)",
    )
    assert ok


def test_04_teem_gradients_match_finite_differences(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    errs = []
    for l, cfg in enumerate(default_teem_configs(BackboneConfig()), start=1):
        teem = Teem(cfg, seed=100 + l)
        g = torch.Generator().manual_seed(l)
        z_ref = torch.randn(4, cfg.channels, 5, 5, generator=g).double()
        z_cur = torch.randn(4, cfg.channels, 5, 5, generator=g).double()
        y = torch.tensor([0, 1, 1, 0])
        named = list(teem.named_parameters())
        picks = []
        for _ in range(7 if l == 1 else 6):
            name, p = named[int(rng.integers(len(named)))]
            picks.append((name, int(rng.integers(p.numel()))))
        errs += finite_difference_errors(teem, z_ref, z_cur, y, picks, step=1e-5)
    elapsed = time.perf_counter() - start
    ok = len(errs) == 25 and max(errs) <= 1e-3 and elapsed <= 60
    verdict(4, "gradient check", ok, f"max relative error {max(errs):.2e} over {len(errs)} parameters (<= 1e-3) in {elapsed:.1f}s")
    assert ok


def test_05_gamma_zero_is_per_frame_detector(full_run, verdict):
    _, _, run = full_run
    backbone, head, _ = run.main_branch()
    teems = run.teems()
    size = run.backbone_config.input_size
    video = generate_video(random_scene("long", 5, 200, "fast", size=size, num_objects=2))
    rows = []
    for kind in ("toy", "oracle"):
        detector = build_detector(dataclasses.replace(run.detector_kind, kind=kind), head, size)
        pipe = TeePipeline(dataclasses.replace(run.pipeline, gamma=0.0), backbone, teems, detector, run.macs)
        got = [r.detections for r in pipe.process_video(video)[0]]
        want = detect_video(detector, backbone, video)
        boxes = sum(len(w.detections) for w in want)
        mismatch = sum(g.detections != w.detections for g, w in zip(got, want)) + abs(len(got) - len(want))
        rows.append((kind, mismatch, boxes))
    ok = all(m == 0 for _, m, _ in rows)
    detail = ", ".join(f"{k} detector {m} mismatching frames ({n} boxes)" for k, m, n in rows)
    verdict(5, "baseline equivalence", ok, f"gamma 0 over 200 frames: {detail}")
    assert ok


def test_06_gamma_one_bit_decides_at_exit_one(full_run, tmp_path, verdict):
    _, _, run = full_run
    backbone, head, _ = run.main_branch()
    teems = run.teems()
    videos = run.videos("suite")
    frames = deeper = 0
    for gamma in (1.0, 4.0):
        pipe = TeePipeline(dataclasses.replace(run.pipeline, gamma=gamma), backbone, teems, run.detector(head), run.macs)
        for video in videos:
            path = tmp_path / f"{gamma}_{video.video_id}.jsonl"
            write_trace(pipe.process_video(video)[0], path)
            for rec in read_trace(path)[1:]:
                frames += 1
                deeper += [e["exit"] for e in rec["exits"]] != [1]
    ok = deeper == 0 and frames > 0
    verdict(6, "gate degeneracy", ok, f"{deeper} of {frames} traced frames evaluated beyond exit 1 at gamma 1.0 and 4.0")
    assert ok


def static_fraction(videos: list[SyntheticVideo]) -> float:
    static = total = 0
    for v in videos:
        for t, fr in enumerate(v.frames):
            total += 1
            static += t == 0 or fr.annotations == v.frames[t - 1].annotations
    return static / total


def test_07_compute_reduction(full_run, verdict):
    out, timings, _ = full_run
    stats = read_json(out / "infer" / "run_stats.json")
    frac = static_fraction(annotation_videos(out, "suite"))
    ok = (
        stats["frames"] == 500
        and frac >= 0.9
        and stats["mac_speedup"] >= 8
        and stats["updating_ratio"] >= 8
        and timings["infer"] <= 300
    )
    verdict(
        7,
        "compute reduction",
        ok,
        f"speedup {stats['mac_speedup']:.2f}x, updating ratio {stats['updating_ratio']:.2f} (both >= 8) "
        f"on {stats['frames']} frames, {frac:.0%} static, in {timings['infer']:.0f}s (<= 300s)",
    )
    assert ok


def test_08_accuracy_retention(full_run, verdict):
    out, _, run = full_run
    report = read_json(out / "report" / "report.json")
    rows = {r["method"]: r for r in report["rows"]}
    base, tee, gt = rows["per_frame"], rows["temporal_early_exit"], rows["ground_truth_gate"]
    evaluation = read_json(out / "eval" / "report.json")
    oracle = run.config["detector"] == {"kind": "oracle", "jitter_sigma": 0.0, "drop_prob": 0.0}
    d_map, d_miou, d_gt = base["map"] - tee["map"], base["miou"] - tee["miou"], base["map"] - gt["map"]
    ok = oracle and abs(d_map) <= 0.05 and abs(d_miou) <= 0.05 and d_gt <= 0.01 and evaluation["map"] == tee["map"]
    verdict(
        8,
        "accuracy retention",
        ok,
        f"per-frame mAP {base['map']:.4f} mIoU {base['miou']:.4f}; early exit mAP {tee['map']:.4f} (drop {d_map:.4f}) "
        f"mIoU {tee['miou']:.4f} (drop {d_miou:.4f}), both <= 0.05; ground-truth gate mAP drop {d_gt:.4f} (<= 0.01)",
    )
    assert ok


def test_09_mac_accounting(full_run, verdict):
    out, _, _ = full_run
    # conv 3->8, 3x3, 56x56 output then fc 128->2, counted by hand
    micro = PathCost.of([conv("conv", 3, 8, 3, 56), LayerSpec("fc", "fc", 128, 2)])
    hand = 3 * 8 * 3 * 3 * 56 * 56 + 128 * 2
    reference = mac_report(BackboneConfig(), default_teem_configs(BackboneConfig()), HeadConfig())
    ratio = reference.exit_ratio(1)
    shipped = read_json(out / "report" / "report.json")["exit_ratios"]["1"]
    ok = micro.macs == hand and 3 * 8 * 9 * 56 * 56 == 677_376 and ratio <= 0.05 and shipped == ratio
    verdict(9, "MAC accounting", ok, f"micro config {micro.macs} == hand sum {hand}; exit-1/full ratio {ratio:.4f} (<= 0.05)")
    assert ok


def test_10_sampler_balance_at_capacity_50(full_run, verdict):
    out, _, run = full_run
    result = sample_balanced_pairs(annotation_videos(out, "corpus"), dataclasses.replace(run.sampler, bin_capacity=50))
    hist = Counter(s.bin for s in result.samples)
    counts = result.ledger.counts
    balanced = all((c == 50) != flagged for c, flagged in zip(counts, result.ledger.exhausted))
    exact = [hist.get(b, 0) for b in range(len(counts))] == counts
    ok = balanced and exact
    verdict(10, "sampler balance", ok, f"bins {counts}, exhausted {sum(result.ledger.exhausted)}, ledger equals histogram: {exact}")
    assert ok


def test_11_cam_focus(full_run, verdict):
    out, _, _ = full_run
    cam = read_json(out / "cam" / "cam.json")
    best = str(read_json(out / "teems" / "classifier.json")["best_exit"])
    shapes_ok = cam["shapes"] == [[56, 56], [28, 28], [14, 14], [7, 7]] and all(
        p["exits"][str(l)]["shape"] == cam["shapes"][l - 1] for p in cam["pairs"] for l in range(1, 5)
    )
    range_ok = all(0.0 <= e["min"] and e["max"] <= 1.0 for p in cam["pairs"] for e in p["exits"].values())
    inside = float(np.mean([p["exits"][best]["inside"] for p in cam["pairs"]]))
    outside = float(np.mean([p["exits"][best]["outside"] for p in cam["pairs"]]))
    per_pair = sum(p["exits"][best]["inside"] > p["exits"][best]["outside"] for p in cam["pairs"])
    ok = shapes_ok and range_ok and inside > outside
    verdict(
        11,
        "CAM shapes and focus",
        ok,
        f"shapes 56/28/14/7 {shapes_ok}, values in [0,1] {range_ok}; exit {best} mean inside {inside:.3f} > outside {outside:.3f} "
        f"over {len(cam['pairs'])} teleport pairs ({per_pair} individually)",
    )
    assert ok


def digest(root: Path) -> dict[str, str]:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.rglob("*")) if p.is_file()}


def test_12_rerun_is_byte_identical(tmp_path, verdict):
    a, _ = run_script(tmp_path / "a", REDUCED)
    b, _ = run_script(tmp_path / "b", REDUCED)
    da, db = digest(a), digest(b)
    named = {
        "dataset": [k for k in da if k.startswith("data/")],
        "history": ["detector/history.json", "teems/history.json"],
        "traces": [k for k in da if k.endswith("trace.jsonl")],
        "report": ["eval/report.json"],
    }
    same = {name: bool(keys) and all(da[k] == db.get(k) for k in keys) for name, keys in named.items()}
    ok = all(same.values()) and da == db
    verdict(12, "determinism", ok, f"{len(da)} files compared, " + ", ".join(f"{k} identical {v}" for k, v in same.items()))
    assert ok
