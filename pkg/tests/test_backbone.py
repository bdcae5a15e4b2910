import numpy as np
import pytest
import torch

from teevid.backbone import (
    Backbone,
    BackboneConfig,
    StageSpec,
    forward_full,
    forward_to_stage,
    normalize,
    stage_shapes,
)
from teevid.checkpoint import file_hash, load_params, read_header, save_params, state_hash
from teevid.errors import SchemaError, ShapeError


@pytest.fixture(scope="module")
def net():
    return Backbone(BackboneConfig(seed=7)).eval()


@pytest.fixture
def image():
    return np.random.default_rng(0).uniform(0, 1, size=(224, 224, 3)).astype(np.float32)


@pytest.mark.parametrize("size,spatial", [(224, [56, 28, 14, 7]), (112, [28, 14, 7, 3]), (32, [8, 4, 2, 1])])
def test_stage_shapes(size, spatial):
    assert [s[1] for s in stage_shapes(BackboneConfig(input_size=size))] == spatial
    assert [s[0] for s in stage_shapes(BackboneConfig(input_size=size))] == [16, 32, 64, 128]


def test_config_validation():
    with pytest.raises(ShapeError):
        BackboneConfig(stages=(StageSpec(8),) * 3)
    with pytest.raises(ShapeError):
        BackboneConfig(input_size=16)


def test_runtime_shapes_match_analytic(net, image):
    taps = net.taps(normalize(image))
    assert [tuple(t.shape[1:]) for t in taps] == stage_shapes(net.config)
    assert tuple(forward_to_stage(net, image, 1).shape) == (16, 56, 56)
    assert tuple(forward_to_stage(net, image, 4).shape) == (128, 7, 7)


@pytest.mark.parametrize("size", [112, 120])
def test_runtime_shapes_other_sizes(size):
    net = Backbone(BackboneConfig(input_size=size))
    x = torch.zeros(1, 3, size, size)
    assert [tuple(t.shape[1:]) for t in net.taps(x)] == stage_shapes(net.config)


def test_wrong_input_size(net):
    with pytest.raises(ShapeError):
        net.forward_to_stage(torch.zeros(1, 3, 200, 200), 2)
    with pytest.raises(ShapeError):
        normalize(np.zeros((224, 224)))


def test_zero_stem_gives_zero_features():
    net = Backbone()
    with torch.no_grad():
        net.stem.weight.zero_()
        net.stem.bias.zero_()
    out = net.features(np.zeros((224, 224, 3), np.float32), 4)
    assert torch.count_nonzero(out) == 0


def test_full_equals_stage4_and_composition(net, image):
    assert torch.equal(forward_full(net, image), forward_to_stage(net, image, 4))
    x = normalize(image)
    with torch.no_grad():
        for l in range(1, 4):
            step = net.stages[l](net.forward_to_stage(x, l))
            assert torch.equal(step, net.forward_to_stage(x, l + 1))
        mid = net.forward_to_stage(x, 2)
        assert torch.equal(net.run_stages(mid, 2, 4), net.forward_to_stage(x, 4))


def test_single_pixel_perturbation_changes_output(net, image):
    other = image.copy()
    other[100, 100, 1] += 0.3
    assert not torch.equal(forward_full(net, image), forward_full(net, other))


def test_normalisation_scheme():
    x = normalize(np.full((224, 224, 3), 0.75, np.float32))
    assert x.shape == (1, 3, 224, 224)
    assert torch.all(x == 1.0)


def test_seeded_init_is_reproducible():
    assert state_hash(Backbone(BackboneConfig(seed=3))) == state_hash(Backbone(BackboneConfig(seed=3)))
    assert state_hash(Backbone(BackboneConfig(seed=3))) != state_hash(Backbone(BackboneConfig(seed=4)))


def test_checkpoint_round_trip_bit_exact(tmp_path, net):
    digest = save_params(tmp_path / "b.tee", net.state_dict(), {"config": net.config.to_dict()})
    assert digest == file_hash(tmp_path / "b.tee")
    tensors, meta = load_params(tmp_path / "b.tee")
    header, _ = read_header(tmp_path / "b.tee")
    assert {e["name"] for e in header["manifest"]} == set(net.state_dict())
    fresh = Backbone(BackboneConfig.from_dict(meta["config"]))
    fresh.load_state_dict(tensors)
    assert state_hash(fresh) == state_hash(net)
    # identical inputs give identical bytes
    assert save_params(tmp_path / "c.tee", net.state_dict(), {"config": net.config.to_dict()}) == digest


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "x.tee").write_bytes(b"NOTMAGIC" + b"\0" * 16)
    with pytest.raises(SchemaError):
        load_params(tmp_path / "x.tee")
