"""Command-line entry point.

Every subcommand works inside one run directory (``--out``) and writes only
its own subdirectory plus ``manifests/<command>.json``. Commands read their
predecessors' outputs from sibling subdirectories::

    data/      gen-data        corpus/<video>/, suite/<video>/, index.json
    pairs/     sample-pairs    train.jsonl, test.jsonl, ledger.json
    detector/  train-detector  main_branch.tee, history.json
    teems/     train-teems     teems.tee, history.json, classifier.json
    infer/     infer           <video>/trace.jsonl, <video>/detections.jsonl, run_stats.json
    eval/      eval            report.json
    cam/       cam             exit grids (PNG), cam.json
    report/    report          report.json, table.csv

Exit status: 0 success, 1 runtime failure, 2 usage error, 3 config or
artifact schema violation.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import shutil
import sys
import zlib
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from . import config as cfgmod
from .backbone import NUM_STAGES, BackboneConfig, stage_shapes
from .checkpoint import file_hash
from .detector import (
    DetectionSet,
    DetectorKind,
    DetectorTrainConfig,
    HeadConfig,
    build_detector,
    detect_video,
    load_main_branch,
    read_detections,
    save_main_branch,
    train_toy_detector,
    write_detections,
)
from .errors import ConfigError, SchemaError, TeeError
from .metrics.compute import default_teem_configs, mac_report
from .metrics.detection import mean_average_precision, mean_iou
from .metrics.report import EvalInputs, RunStats, assemble_report
from .pipeline import FrameResult, PipelineConfig, TeePipeline, run_stats, write_trace
from .sampler import SamplerConfig, ledger_record, read_pairs, sample_balanced_pairs, split_dataset, write_pairs
from .synthgen import SyntheticVideo, corpus_configs, generate_video, read_dataset, write_dataset
from .teem import class_activation_map
from .trainer import FeatureCache, TrainConfig, evaluate_classifier, load_teems, save_teems, train_teems

log = logging.getLogger("teevid")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_SCHEMA = 0, 1, 2, 3


def derive_seed(seed: int, name: str) -> int:
    """Stable per-module seed fanned out from the run seed."""
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0] & 0x7FFFFFFF)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _read_json(path: Path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise SchemaError("required artifact is missing; run the producing command first", str(path)) from None
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc}", str(path)) from None


def _hash_tree(root: Path, base: Path) -> dict[str, str]:
    if root.is_file():
        return {root.relative_to(base).as_posix(): file_hash(root)}
    return {p.relative_to(base).as_posix(): file_hash(p) for p in sorted(root.rglob("*")) if p.is_file()}


class Run:
    """Resolved configuration plus the run directory layout."""

    def __init__(self, config: dict, out: Path):
        self.config = config
        self.out = out
        self.seed = int(config["seed"])
        try:
            self._resolve()
        except (ConfigError, ValueError) as exc:
            if isinstance(exc, SchemaError):
                raise
            raise SchemaError(f"inconsistent config: {exc}", "config") from None

    def _resolve(self) -> None:
        c = self.config
        size = c["corpus"]["size"]
        self.backbone_config = BackboneConfig(input_size=size, seed=derive_seed(self.seed, "backbone"))
        self.head_config = HeadConfig(seed=derive_seed(self.seed, "head"))
        dt = c["detector_train"]
        self.detector_train = DetectorTrainConfig(
            epochs=dt["epochs"],
            learning_rate=dt["learning_rate"],
            batch_size=dt["batch_size"],
            frame_stride=dt["frame_stride"],
            box_weight=dt["box_weight"],
            seed=derive_seed(self.seed, "detector_train"),
            backbone=self.backbone_config,
            head=self.head_config,
        )
        d = c["detector"]
        self.detector_kind = DetectorKind(d["kind"], d["jitter_sigma"], d["drop_prob"])
        t = c["teem"]
        self.teem_configs = default_teem_configs(
            self.backbone_config,
            t["hidden_ratio"],
            attention_kernel=t["attention_kernel"],
            concat=t["concat"],
            attention_bias=t["attention_bias"],
        )
        tr = c["train"]
        self.train = TrainConfig(
            epochs=tr["epochs"],
            learning_rate=tr["learning_rate"],
            batch_size=tr["batch_size"],
            seed=derive_seed(self.seed, "teem_train"),
            tau_var=c["tau_var"],
        )
        s = c["sampler"]
        self.sampler = SamplerConfig(
            bin_capacity=s["bin_capacity"],
            initial_interval=s["initial_interval"],
            interval_min=s["interval_min"],
            interval_max=s["interval_max"],
            interval_step=s["interval_step"],
            ew_decay=s["ew_decay"],
            seed=derive_seed(self.seed, "sampler"),
            tau_var=c["tau_var"],
        )
        p = c["pipeline"]
        self.pipeline = PipelineConfig(
            gamma=p["gamma"],
            tau_var=c["tau_var"],
            exits=tuple(sorted(p["exits"])),
            entropy_base=p["entropy_base"],
            min_probability=p["min_probability"],
            gate=p["gate"],
            fixed_step=p["fixed_step"],
            reference=p["reference"],
        )
        self.macs = mac_report(self.backbone_config, self.teem_configs, self.head_config)

    def path(self, *parts: str) -> Path:
        return self.out.joinpath(*parts)

    def fresh_dir(self, *parts: str) -> Path:
        """Empty output directory owned by one command, so stale files never survive a rerun."""
        d = self.path(*parts)
        if d.exists():
            shutil.rmtree(d)
        d.mkdir(parents=True)
        return d

    def manifest(self, command: str, inputs: Sequence[str], outputs: Sequence[str], extra: dict | None = None) -> None:
        doc = {
            "command": command,
            "run_id": self.config["run_id"],
            "seed": self.seed,
            "config": self.config,
            "inputs": {},
            "outputs": {},
        }
        for key, names in (("inputs", inputs), ("outputs", outputs)):
            for name in names:
                p = self.path(name)
                if p.exists():
                    doc[key].update(_hash_tree(p, self.out))
        if extra:
            doc.update(extra)
        _write_json(self.path("manifests", f"{command}.json"), doc)

    # -- shared loaders --------------------------------------------------------

    def videos(self, split: str) -> list[SyntheticVideo]:
        index = _read_json(self.path("data", "index.json"))
        return [read_dataset(self.path("data", split, vid)) for vid in index[split]]

    def main_branch(self):
        return load_main_branch(self.path("detector", "main_branch.tee"))

    def teems(self):
        return load_teems(self.path("teems", "teems.tee"))[0]

    def detector(self, head):
        return build_detector(
            self.detector_kind, head, self.backbone_config.input_size, derive_seed(self.seed, "oracle")
        )


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(run: Run) -> None:
    c = run.config
    corpus = c["corpus"]
    suite = c["suite"]
    data = run.fresh_dir("data")
    index: dict[str, list[str]] = {"corpus": [], "suite": []}
    for scene in corpus_configs(
        "c_",
        derive_seed(run.seed, "corpus"),
        corpus["regimes"],
        corpus["videos_per_regime"],
        corpus["num_frames"],
        size=corpus["size"],
        noise_sigma=corpus["noise_sigma"],
    ):
        write_dataset(generate_video(scene), data / "corpus" / scene.video_id)
        index["corpus"].append(scene.video_id)
        log.info("generated %s", scene.video_id)
    if suite["videos"]:
        for scene in corpus_configs(
            "s_",
            derive_seed(run.seed, "suite"),
            ["hops"],
            suite["videos"],
            suite["num_frames"],
            size=corpus["size"],
            noise_sigma=suite["noise_sigma"],
            static_fraction=suite["static_fraction"],
        ):
            write_dataset(generate_video(scene), data / "suite" / scene.video_id)
            index["suite"].append(scene.video_id)
            log.info("generated %s", scene.video_id)
    _write_json(data / "index.json", index)
    run.manifest("gen-data", [], ["data"])


def cmd_sample_pairs(run: Run) -> None:
    videos = run.videos("corpus")
    result = sample_balanced_pairs(videos, run.sampler)
    frac = run.config["sampler"]["test_fraction"]
    train, test = split_dataset(result.samples, (1.0 - frac, frac), derive_seed(run.seed, "split"))
    out = run.path("pairs")
    out.mkdir(parents=True, exist_ok=True)
    write_pairs(train, out / "train.jsonl")
    write_pairs(test, out / "test.jsonl")
    _write_json(out / "ledger.json", {**ledger_record(result.ledger), "attempts": result.attempts})
    log.info("sampled %d pairs (%d train / %d test), ledger %s", len(result.samples), len(train), len(test), result.ledger.counts)
    run.manifest("sample-pairs", ["data"], ["pairs"])


def cmd_train_detector(run: Run) -> None:
    videos = run.videos("corpus")
    backbone, head, history = train_toy_detector(videos, run.detector_train, log=log.info)
    out = run.path("detector")
    out.mkdir(parents=True, exist_ok=True)
    save_main_branch(out / "main_branch.tee", backbone, head, {"run_id": run.config["run_id"]})
    _write_json(out / "history.json", {"epoch_loss": history.epoch_loss})
    run.manifest("train-detector", ["data"], ["detector"])


def cmd_train_teems(run: Run) -> None:
    videos = {v.video_id: v for v in run.videos("corpus")}
    train = read_pairs(run.path("pairs", "train.jsonl"))
    test = read_pairs(run.path("pairs", "test.jsonl"))
    backbone, _, _ = run.main_branch()
    cache = FeatureCache(backbone, videos, run.train.cache_bytes)
    teems, history = train_teems(backbone, train, cache, run.teem_configs, run.train, log=log.info)
    out = run.path("teems")
    out.mkdir(parents=True, exist_ok=True)
    save_teems(out / "teems.tee", teems, {"run_id": run.config["run_id"], "tau_var": run.config["tau_var"]})
    _write_json(out / "history.json", {"entries": history.entries})
    report = evaluate_classifier(teems, backbone, test, cache)
    _write_json(out / "classifier.json", {"run_id": run.config["run_id"], **report.to_dict()})
    for l, m in sorted(report.exits.items()):
        log.info("exit %d accuracy %.3f f1 %.3f", l, m.accuracy, m.f1)
    run.manifest("train-teems", ["data", "pairs", "detector"], ["teems"])


def _pipeline_for(run: Run, config: PipelineConfig, backbone, teems, detector) -> TeePipeline:
    return TeePipeline(config, backbone, teems, detector, run.macs)


def cmd_infer(run: Run) -> None:
    videos = run.videos("suite")
    if not videos:
        raise ConfigError("the suite is empty; nothing to infer")
    backbone, head, _ = run.main_branch()
    teems = run.teems() if run.pipeline.gate == "teem" else {}
    pipe = _pipeline_for(run, run.pipeline, backbone, teems, run.detector(head))
    out = run.fresh_dir("infer")
    total: RunStats | None = None
    for video in videos:
        results, stats = pipe.process_video(video)
        vdir = out / video.video_id
        vdir.mkdir(parents=True, exist_ok=True)
        write_trace(results, vdir / "trace.jsonl")
        write_detections([r.detections for r in results], vdir / "detections.jsonl")
        total = stats if total is None else total.merge(stats)
        log.info("%s: %d full computes over %d frames", video.video_id, stats.full_compute_count, stats.frames)
    _write_json(out / "run_stats.json", {"run_id": run.config["run_id"], **total.to_dict()})
    run.manifest("infer", ["data", "detector", "teems"], ["infer"])


def cmd_eval(run: Run) -> None:
    videos = run.videos("suite")
    dets: list[DetectionSet] = []
    anns = []
    for video in videos:
        dets.extend(read_detections(run.path("infer", video.video_id, "detections.jsonl"), len(video)))
        anns.extend(fr.annotations for fr in video.frames)
    stats = _read_json(run.path("infer", "run_stats.json"))
    cls_path = run.path("teems", "classifier.json")
    classifier = _read_json(cls_path) if cls_path.exists() else None
    report = assemble_report(
        classifier,
        stats,
        EvalInputs(run.config["run_id"], dets, anns, tuple(run.config["metrics"]["thresholds"]), run.config),
    )
    out = run.path("eval")
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    log.info("mAP %.4f mIoU %.4f", report.map, report.miou)
    run.manifest("eval", ["data", "infer", "teems"], ["eval"])


def _variant_row(name: str, results_per_video: list[list[FrameResult]], videos, full_macs: int, thresholds) -> dict:
    flat = [r for rs in results_per_video for r in rs]
    stats = run_stats(flat, full_macs)
    dets = [r.detections for r in flat]
    anns = [fr.annotations for v in videos for fr in v.frames]
    _, m = mean_average_precision(dets, anns, thresholds)
    return {
        "method": name,
        "updating_ratio": stats.updating_ratio,
        "mac_speedup": stats.mac_speedup,
        "avg_macs_per_frame": stats.avg_macs_per_frame,
        "map": m,
        "miou": mean_iou(dets, anns),
    }


def cmd_report(run: Run) -> None:
    """Comparison table over the suite: per-frame, fixed steps, ground-truth gating, early exit."""
    videos = run.videos("suite")
    backbone, head, _ = run.main_branch()
    teems = run.teems()
    detector = run.detector(head)
    thresholds = tuple(run.config["metrics"]["thresholds"])
    base = run.pipeline
    variants = [("per_frame", PipelineConfig(**{**base.__dict__, "gate": "fixed_step", "fixed_step": 1}))]
    for n in run.config["metrics"]["fixed_steps"]:
        variants.append((f"fixed_step_{n}", PipelineConfig(**{**base.__dict__, "gate": "fixed_step", "fixed_step": n})))
    variants.append(("ground_truth_gate", PipelineConfig(**{**base.__dict__, "gate": "ground_truth"})))
    variants.append(("temporal_early_exit", PipelineConfig(**{**base.__dict__, "gate": "teem"})))
    rows = []
    for name, pcfg in variants:
        pipe = _pipeline_for(run, pcfg, backbone, teems, detector)
        rows.append(_variant_row(name, [pipe.process_video(v)[0] for v in videos], videos, run.macs.full.macs, thresholds))
        log.info("%s: ratio %.2f speedup %.2f mAP %.4f", name, rows[-1]["updating_ratio"], rows[-1]["mac_speedup"], rows[-1]["map"])
    out = run.path("report")
    out.mkdir(parents=True, exist_ok=True)
    eval_path = run.path("eval", "report.json")
    doc = {
        "run_id": run.config["run_id"],
        "rows": rows,
        "macs": run.macs.to_dict(),
        "exit_ratios": {str(l): run.macs.exit_ratio(l) for l in range(1, NUM_STAGES + 1)},
        "evaluation": _read_json(eval_path) if eval_path.exists() else None,
    }
    _write_json(out / "report.json", doc)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    (out / "table.csv").write_text(buf.getvalue())
    run.manifest("report", ["data", "detector", "teems", "eval"], ["report"])


def union_mask(boxes, size: int, grid: int) -> np.ndarray:
    """Feature cells whose centres fall inside any of ``boxes`` (image coordinates)."""
    centres = (np.arange(grid) + 0.5) * size / grid
    mask = np.zeros((grid, grid), dtype=bool)
    for b in boxes:
        ys = (centres >= b.y0) & (centres <= b.y1)
        xs = (centres >= b.x0) & (centres <= b.x1)
        mask |= ys[:, None] & xs[None, :]
    return mask


def cam_focus(cam: np.ndarray, boxes, size: int) -> tuple[float, float]:
    mask = union_mask(boxes, size, cam.shape[0])
    inside = float(cam[mask].mean()) if mask.any() else float("nan")
    outside = float(cam[~mask].mean()) if (~mask).any() else float("nan")
    return inside, outside


def cmd_cam(run: Run) -> None:
    """Class-activation grids for changed pairs from teleporting videos in the test split."""
    videos = {v.video_id: v for v in run.videos("corpus")}
    test = read_pairs(run.path("pairs", "test.jsonl"))
    backbone, _, _ = run.main_branch()
    teems = run.teems()
    picks = [s for s in test if "teleport" in s.video_id and int(s.label) == 1]
    picks.sort(key=lambda s: (s.video_id, s.frame_i, s.frame_j))
    picks = picks[: run.config["cam"]["pairs"]]
    if not picks:
        raise ConfigError("no changed teleport pairs in the test split")
    size = run.backbone_config.input_size
    out = run.path("cam")
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for k, s in enumerate(picks):
        video = videos[s.video_id]
        fi, fj = video.frames[s.frame_i], video.frames[s.frame_j]
        taps_i = [backbone.features(fi.image, l) for l in range(1, NUM_STAGES + 1)]
        taps_j = [backbone.features(fj.image, l) for l in range(1, NUM_STAGES + 1)]
        tiles = [fi.pixels, fj.pixels]
        boxes = [a.box for a in fi.annotations] + [a.box for a in fj.annotations]
        rec = {"video_id": s.video_id, "frame_i": s.frame_i, "frame_j": s.frame_j, "exits": {}}
        for l in range(1, NUM_STAGES + 1):
            cam = class_activation_map(teems[l], taps_i[l - 1], taps_j[l - 1], 1)
            inside, outside = cam_focus(cam, boxes, size)
            rec["exits"][str(l)] = {"shape": list(cam.shape), "min": float(cam.min()), "max": float(cam.max()), "inside": inside, "outside": outside}
            heat = Image.fromarray(np.uint8(np.round(cam * 255)), mode="L").resize((size, size), Image.NEAREST)
            tiles.append(np.stack([np.asarray(heat)] * 3, axis=-1))
        Image.fromarray(np.concatenate(tiles, axis=1), mode="RGB").save(out / f"pair{k:02d}.png")
        records.append(rec)
    _write_json(out / "cam.json", {"pairs": records, "shapes": [list(s[1:]) for s in stage_shapes(run.backbone_config)]})
    run.manifest("cam", ["data", "pairs", "detector", "teems"], ["cam"])


HELP = {
    "gen-data": "render the training corpus and the evaluation suite",
    "sample-pairs": "draw variation-balanced frame pairs and split them",
    "train-detector": "train the backbone and toy detection head",
    "train-teems": "fit one early-exit module per backbone stage",
    "infer": "run the gated pipeline over the suite",
    "eval": "score suite detections (mAP, mIoU) into an evaluation report",
    "report": "compare per-frame, fixed-step, ground-truth and early-exit runs",
    "cam": "write class-activation grids for changed teleport pairs",
}

COMMANDS = {
    "gen-data": cmd_gen_data,
    "sample-pairs": cmd_sample_pairs,
    "train-detector": cmd_train_detector,
    "train-teems": cmd_train_teems,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "cam": cmd_cam,
    "report": cmd_report,
}


def _exits(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of exits, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file (overrides defaults)")
    common.add_argument("--seed", type=int, help="run seed")
    common.add_argument("--out", type=Path, default=Path("run"), help="run directory")
    common.add_argument("--gamma", type=float, help="entropy threshold in bits")
    common.add_argument("--tau-var", type=float, dest="tau_var", help="variation threshold for labels")
    common.add_argument("--exits", type=_exits, help="enabled exits, e.g. 1,2,3,4")
    common.add_argument("--detector", choices=["toy", "oracle"], help="main-branch detector")
    common.add_argument("--fixed-step", type=int, dest="fixed_step", help="recompute every N frames instead of gating")
    parser = argparse.ArgumentParser(prog="teevid", description="Temporal early-exit video detection at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=HELP[name], description=HELP[name])
    return parser


def overrides_from(args: argparse.Namespace) -> dict:
    o: dict = {}
    if args.seed is not None:
        o["seed"] = args.seed
    if args.tau_var is not None:
        o["tau_var"] = args.tau_var
    pipe: dict = {}
    if args.gamma is not None:
        pipe["gamma"] = args.gamma
    if args.exits is not None:
        pipe["exits"] = args.exits
    if args.fixed_step is not None:
        pipe["gate"] = "fixed_step"
        pipe["fixed_step"] = args.fixed_step
    if pipe:
        o["pipeline"] = pipe
    if args.detector is not None:
        o["detector"] = {"kind": args.detector}
    return o


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(
        level=os.environ.get("TEE_LOG_LEVEL", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    torch.set_num_threads(1)
    try:
        config = cfgmod.load_config(args.config, overrides_from(args))
        run = Run(config, args.out)
    except SchemaError as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    # from here on a malformed or missing artifact is a runtime failure, not a config problem
    try:
        run.out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](run)
    except (TeeError, OSError, RuntimeError, ValueError) as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


run_command = main


if __name__ == "__main__":
    sys.exit(main())
