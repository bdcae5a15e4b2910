import numpy as np
import pytest
import torch

from teevid.backbone import Backbone, BackboneConfig
from teevid.checkpoint import state_hash
from teevid.errors import ConfigError
from teevid.geometry import SceneryLabel
from teevid.metrics.compute import default_teem_configs
from teevid.sampler import pair_sample
from teevid.synthgen import generate_video, random_scene
from teevid.trainer import (
    ClassifierReport,
    ExitMetrics,
    FeatureCache,
    TrainConfig,
    evaluate_classifier,
    load_teems,
    predict_pairs,
    save_teems,
    train_teems,
)

SIZE = 112


def corpus(tag, seed, n_videos, per_class, frames=60):
    """Balanced pairs from teleport videos: rest periods are unchanged, jumps are changed.

    Both classes share scenes so the background carries no label information.
    """
    videos = {}
    for k in range(n_videos):
        v = generate_video(random_scene(f"{tag}{k}", seed + k, frames, "teleport", size=SIZE, num_objects=1))
        videos[v.video_id] = v
    rng = np.random.default_rng(seed)
    static, changed = [], []
    while len(static) < per_class or len(changed) < per_class:
        vid = list(videos)[int(rng.integers(len(videos)))]
        i = int(rng.integers(frames - 1))
        s = pair_sample(videos[vid], i, int(rng.integers(i + 1, frames)), 0.4)
        if s.max_mfi == 0 and len(static) < per_class:
            static.append(s)
        elif s.label == SceneryLabel.CHANGED and len(changed) < per_class:
            changed.append(s)
    return videos, static + changed


@pytest.fixture(scope="module")
def setup():
    backbone = Backbone(BackboneConfig(input_size=SIZE, seed=0)).eval()
    train_v, train_s = corpus("tr", 10, n_videos=8, per_class=200)
    test_v, test_s = corpus("te", 50, n_videos=3, per_class=50)
    videos = {**train_v, **test_v}
    cache = FeatureCache(backbone, videos)
    return backbone, videos, cache, train_s, test_s


def configs(backbone):
    return default_teem_configs(backbone.config)


def test_history_shape_and_frozen_backbone(setup):
    backbone, _, cache, train_s, _ = setup
    before = state_hash(backbone)
    teems, hist = train_teems(backbone, train_s, cache, configs(backbone), TrainConfig(epochs=3))
    assert len(hist.entries) == 12
    assert {(e["epoch"], e["exit"]) for e in hist.entries} == {(e, l) for e in (1, 2, 3) for l in (1, 2, 3, 4)}
    assert state_hash(backbone) == before
    assert not any(p.requires_grad for p in backbone.parameters())
    assert set(teems) == {1, 2, 3, 4} and not any(t.training for t in teems.values())


@pytest.fixture(scope="module")
def trained(setup):
    backbone, _, cache, train_s, _ = setup
    # 200 pairs, balanced
    pairs = train_s[:100] + train_s[-100:]
    return train_teems(backbone, pairs, cache, configs(backbone), TrainConfig(epochs=12, learning_rate=1e-2, exits=(2,)))


def test_static_vs_teleport_is_learnable(setup, trained):
    backbone, _, cache, _, test_s = setup
    teems, hist = trained
    assert hist.at(12, 2)["loss"] < hist.at(1, 2)["loss"]
    assert hist.at(12, 2)["accuracy"] > 0.9
    # held-out objects are unseen colours and shapes, so only ask for clearly better than chance
    assert evaluate_classifier(teems, backbone, test_s, cache).exits[2].accuracy > 0.7


def test_training_is_deterministic(setup):
    backbone, _, cache, train_s, _ = setup
    cfg = TrainConfig(epochs=1, exits=(1,), seed=4)
    a, ha = train_teems(backbone, train_s, cache, configs(backbone), cfg)
    b, hb = train_teems(backbone, train_s, cache, configs(backbone), cfg)
    assert state_hash(a[1]) == state_hash(b[1]) and ha.entries == hb.entries


def test_cache_and_direct_videos_agree(setup, trained):
    backbone, videos, cache, _, test_s = setup
    teems, _ = trained
    via_cache = predict_pairs(teems, cache, test_s[:8])
    fresh = FeatureCache(backbone, videos, max_bytes=0)  # forces recomputation
    assert np.array_equal(via_cache[2], predict_pairs(teems, fresh, test_s[:8])[2])


def test_confusion_metrics():
    m = ExitMetrics(tp=45, fp=5, fn=5, tn=45)
    assert (m.accuracy, m.precision, m.recall, m.f1) == pytest.approx((0.9, 0.9, 0.9, 0.9))
    assert ExitMetrics.from_predictions([1] * 50 + [0] * 50, [1] * 45 + [0] * 5 + [1] * 5 + [0] * 45) == m


def test_all_changed_predictor():
    m = ExitMetrics.from_predictions([1] * 10, [1] * 4 + [0] * 6)
    assert m.recall == 1.0 and m.precision == pytest.approx(0.4)
    assert m.accuracy == pytest.approx(0.4)
    assert ExitMetrics(0, 0, 0, 0).f1 == 0.0


def test_best_exit_prefers_lowest_on_tie():
    rep = ClassifierReport({1: ExitMetrics(5, 0, 0, 5), 2: ExitMetrics(5, 0, 0, 5), 3: ExitMetrics(4, 1, 1, 4)})
    assert rep.best_exit == 1
    assert rep.to_dict()["exits"]["3"]["f1"] == pytest.approx(0.8)


def test_empty_inputs_rejected(setup):
    backbone, videos, cache, _, _ = setup
    with pytest.raises(ConfigError):
        train_teems(backbone, [], cache, configs(backbone), TrainConfig(epochs=1))
    with pytest.raises(ConfigError):
        evaluate_classifier({}, backbone, [], videos)


@pytest.mark.parametrize("kw", [{"learning_rate": 0}, {"epochs": 0}, {"exits": (5,)}, {"exits": ()}])
def test_train_config_validation(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_checkpoint_round_trip(tmp_path, setup, trained):
    _, _, cache, _, test_s = setup
    teems, _ = trained
    save_teems(tmp_path / "t.tee", teems, {"run_id": "r"})
    loaded, meta = load_teems(tmp_path / "t.tee")
    assert meta["run_id"] == "r" and set(loaded) == {2}
    assert state_hash(loaded[2]) == state_hash(teems[2])
    z = cache.batch([(test_s[0].video_id, test_s[0].frame_j)])[1]
    with torch.no_grad():
        assert torch.equal(loaded[2](z, z), teems[2](z, z))
