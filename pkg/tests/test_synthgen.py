import json
import filecmp

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from teevid.errors import ConfigError, SchemaError
from teevid.geometry import SceneryLabel
from teevid.synthgen import (
    BackgroundSpec,
    MotionSegment,
    ObjectSpec,
    SceneConfig,
    corpus_configs,
    generate_video,
    label_pairs,
    parse_annotations,
    random_scene,
    read_dataset,
    write_dataset,
)


def scene(motion=(), noise=0.0, frames=12, shape="rectangle", seed=3, **kw):
    return SceneConfig(
        "v",
        frames,
        seed,
        width=64,
        height=64,
        objects=(ObjectSpec("a", 10.0, 12.0, 16.0, 14.0, shape=shape, motion=tuple(motion)),),
        noise_sigma=noise,
        **kw,
    )


def test_static_noise_free_frames_identical():
    v = generate_video(scene())
    assert all(np.array_equal(v.frames[0].pixels, f.pixels) for f in v.frames)


def test_generation_is_deterministic():
    cfg = scene([MotionSegment(0, 5, 1.5, 0.5)], noise=0.05)
    a, b = generate_video(cfg), generate_video(cfg)
    assert all(np.array_equal(x.pixels, y.pixels) for x, y in zip(a.frames, b.frames))
    assert [f.annotations for f in a.frames] == [f.annotations for f in b.frames]


def test_constant_velocity_kinematics():
    v = generate_video(scene([MotionSegment(0, 10, 2.0, 0.0)], frames=12))
    assert v.frames[10].annotations[0].box.x0 - v.frames[0].annotations[0].box.x0 == 20.0
    # segment over: position holds
    assert v.frames[11].annotations[0].box == v.frames[10].annotations[0].box


def test_object_leaving_canvas_rejected():
    with pytest.raises(ConfigError):
        generate_video(scene([MotionSegment(0, 11, 5.0, 0.0)]))


def test_noise_bounds_enforced():
    with pytest.raises(ConfigError):
        generate_video(scene(noise=0.3))


def test_noise_leaves_annotations_alone():
    a = generate_video(scene([MotionSegment(0, 5, 1.0, 1.0)]))
    b = generate_video(scene([MotionSegment(0, 5, 1.0, 1.0)], noise=0.1))
    assert [f.annotations for f in a.frames] == [f.annotations for f in b.frames]


@settings(max_examples=20, deadline=None)
@given(
    st.floats(2, 40), st.floats(2, 40), st.floats(4, 20), st.floats(4, 20), st.sampled_from(["rectangle", "ellipse"])
)
def test_painted_pixels_stay_inside_box(x, y, w, h, shape):
    bg = BackgroundSpec(base=0.0, texture_amplitude=0.0)
    cfg = SceneConfig(
        "p", 1, 0, 64, 64, (ObjectSpec("a", x, y, w, h, shape=shape, color=(1.0, 1.0, 1.0), texture_amplitude=0.0),), bg
    )
    v = generate_video(cfg)
    tint_max = 0.05 * 255 + 1
    painted = np.argwhere(v.frames[0].pixels.max(axis=2) > tint_max)
    b = v.frames[0].annotations[0].box
    assert painted.size
    assert painted[:, 1].min() >= b.x0 - 1 and painted[:, 1].max() <= b.x1 + 1
    assert painted[:, 0].min() >= b.y0 - 1 and painted[:, 0].max() <= b.y1 + 1


def test_label_pairs_static_all_unchanged():
    v = generate_video(scene())
    assert all(lab == SceneryLabel.UNCHANGED for *_, lab in label_pairs(v, 3, 0.4))
    assert label_pairs(v, 12, 0.4) == []


def test_label_pairs_teleport_is_changed_with_full_motion():
    v = generate_video(scene([MotionSegment(4, 5, 30.0, 0.0)], frames=8))
    rec = {(i, j): (m, lab) for i, j, m, lab in label_pairs(v, 1, 0.4)}
    assert rec[(4, 5)] == (1.0, SceneryLabel.CHANGED)
    assert rec[(0, 1)] == (0.0, SceneryLabel.UNCHANGED)


def test_label_pairs_iou_019_drift():
    # width 16, shift s: IoU = (16 - s) / (16 + s); s = 10.89 gives about 0.19
    s = 16 * (1 - 0.19) / 1.19
    v = generate_video(scene([MotionSegment(0, 1, s, 0.0)], frames=2))
    (_, _, m, lab), = label_pairs(v, 1, 0.4)
    assert m == pytest.approx(0.81, abs=1e-9)
    assert lab == SceneryLabel.CHANGED


def test_dataset_round_trip(tmp_path):
    v = generate_video(scene([MotionSegment(0, 5, 1.25, 0.5)], noise=0.02, background=BackgroundSpec(kind="dynamic", flicker_amplitude=0.1, flicker_region=(30.0, 30.0, 60.0, 60.0))))
    write_dataset(v, tmp_path / "d")
    back = read_dataset(tmp_path / "d")
    assert back.video_id == v.video_id and len(back) == len(v)
    for a, b in zip(v.frames, back.frames):
        assert np.array_equal(a.pixels, b.pixels)
        assert a.annotations == b.annotations
    assert back.config == v.config


def test_write_is_byte_deterministic(tmp_path):
    cfg = random_scene("r", 11, 6, "fast", size=64)
    write_dataset(generate_video(cfg), tmp_path / "a")
    write_dataset(generate_video(cfg), tmp_path / "b")
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files
    for name in sorted((tmp_path / "a" / "frames").iterdir()):
        assert name.read_bytes() == (tmp_path / "b" / "frames" / name.name).read_bytes()


def test_hand_authored_annotations(tmp_path):
    doc = {
        "video_id": "hand",
        "width": 32,
        "height": 32,
        "frames": [
            {"frame": 0, "objects": [{"object_id": "car", "class_id": 0, "bbox": [1.5, 2.0, 10.25, 12.0]}]},
            {"frame": 1, "objects": []},
        ],
    }
    vid, w, h, frames = parse_annotations(doc)
    assert (vid, w, h) == ("hand", 32, 32)
    (ann,) = frames[0]
    assert ann.object_id == "car" and ann.box.as_list() == [1.5, 2.0, 10.25, 12.0]
    assert frames[1] == ()


def test_missing_frame_entry_is_schema_error(tmp_path):
    v = generate_video(scene(frames=3))
    write_dataset(v, tmp_path / "d")
    path = tmp_path / "d" / "annotations.json"
    doc = json.loads(path.read_text())
    del doc["frames"][1]
    path.write_text(json.dumps(doc))
    with pytest.raises(SchemaError) as err:
        read_dataset(tmp_path / "d")
    assert "annotations.json" in str(err.value)


def test_malformed_bbox_is_schema_error():
    doc = {"video_id": "x", "width": 8, "height": 8, "frames": [{"frame": 0, "objects": [{"object_id": "a", "class_id": 0, "bbox": [5, 5, 1, 1]}]}]}
    with pytest.raises(SchemaError):
        parse_annotations(doc)
    doc["frames"][0]["objects"][0]["bbox"] = [0, 0, 1]
    with pytest.raises(SchemaError):
        parse_annotations(doc)


@pytest.mark.parametrize("regime", ["static", "slow", "fast", "teleport", "hops"])
def test_random_scenes_are_valid(regime):
    v = generate_video(random_scene("x", 5, 40, regime, size=96))
    assert len(v) == 40


def test_hops_scene_static_fraction():
    v = generate_video(random_scene("b", 1, 100, "hops", static_fraction=0.9))
    moving = sum(
        1 for t in range(1, 100) if v.frames[t].annotations != v.frames[t - 1].annotations
    )
    assert moving == round(99 * 0.1)


def test_corpus_configs_unique_ids():
    cfgs = corpus_configs("c", 0, ["static", "fast"], 3, 10, size=96)
    assert len({c.video_id for c in cfgs}) == 6
    assert len({c.seed for c in cfgs}) == 6


def test_hops_nudge_then_jump_clear():
    from teevid.geometry import iou

    v = generate_video(random_scene("h", 4, 100, "hops", static_fraction=0.9, num_objects=2))
    steps = []
    for t in range(1, 100):
        before = {a.object_id: a.box for a in v.frames[t - 1].annotations}
        for a in v.frames[t].annotations:
            if a.box != before[a.object_id]:
                steps.append(iou(a.box, before[a.object_id]))
    assert len(steps) == 10
    nudges, jumps = steps[0::2], steps[1::2]
    assert all(s > 0.8 for s in nudges)
    assert all(s == 0.0 for s in jumps)
