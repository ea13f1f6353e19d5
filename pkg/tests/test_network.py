import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pamba.autodiff import Tape, Tensor
from pamba.cloud import PointCloud, serialize_coords
from pamba.curve3d import CurvePattern
from pamba.errors import DomainError
from pamba.network import (ConvMambaBlock, ModelConfig, SegmentationNet, build_hierarchy,
                           erf_probe, load_checkpoint, model_forward, read_checkpoint,
                           receptive_radius, save_checkpoint)
from pamba.sparseconv import SparseTensor
from pamba.synthdata import SceneSpec, generate

SMALL = dict(d_model=(6, 8), d_state=3)


def small_model(**kw):
    cfg = dict(SMALL)
    cfg.update(kw)
    return SegmentationNet(ModelConfig(**cfg))


def random_cloud(n, seed=0, extent=1.0):
    rng = np.random.default_rng(seed)
    return PointCloud(rng.random((n, 3)) * extent, rng.normal(size=(n, 4)), rng.integers(0, 4, n))


def test_config_validation_and_roundtrip():
    cfg = ModelConfig(d_model=(8, 12), stages=2, mamba="uni")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(DomainError):
        ModelConfig(stages=0, d_model=(8,))
    with pytest.raises(DomainError):
        ModelConfig(d_model=(8, 0))
    with pytest.raises(DomainError):
        ModelConfig(mamba="tri")
    with pytest.raises(DomainError):
        ModelConfig.from_dict({"stagez": 2})
    with pytest.raises(DomainError):
        ModelConfig(patterns=("zigzag",))


def test_default_size_near_fifty_thousand():
    n = SegmentationNet(ModelConfig()).num_parameters()
    assert 40_000 <= n <= 80_000


def test_block_patterns_are_hz_variants():
    m = SegmentationNet(ModelConfig(blocks_per_stage=3, d_model=(4, 4), d_state=2))
    assert len(m.blocks()) == 9
    assert {b.pattern for b in m.blocks()} <= {CurvePattern.HZ, CurvePattern.HZ_SWAP}


def test_block_identity_at_zero_weights():
    rng = np.random.default_rng(0)
    block = ConvMambaBlock(8, "hz", rng, ModelConfig(stages=1, d_model=(8,)))
    block.zero_()
    coords = rng.integers(0, 5, size=(30, 3))
    coords = np.unique(coords, axis=0)
    x = rng.normal(size=(len(coords), 8))
    order = serialize_coords(coords, "hz")
    out = block(SparseTensor(coords, x), order).feats.data
    assert np.array_equal(out, x)


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 80), st.integers(0, 2**31))
def test_block_shape_preserved(n, seed):
    rng = np.random.default_rng(seed)
    coords = np.unique(rng.integers(0, 6, size=(n, 3)), axis=0)
    block = ConvMambaBlock(4, "hz-swap", rng, ModelConfig(stages=1, d_model=(4,), d_state=2))
    out = block(SparseTensor(coords, rng.normal(size=(len(coords), 4))),
                serialize_coords(coords, block.pattern)).feats
    assert out.shape == (len(coords), 4)


def test_single_point_cloud():
    logits = model_forward(small_model(), random_cloud(1))
    assert logits.shape == (1, 4) and np.all(np.isfinite(logits.data))


def test_hierarchy_parents_and_symmetry():
    cloud = random_cloud(500, 1)
    h = build_hierarchy(cloud.positions, 0.1, 3)
    assert len(h.levels) == 3
    for fine, coarse in zip(h.levels, h.levels[1:]):
        assert np.array_equal(fine.coords >> 1, coarse.coords[coarse.parent])
        assert len(np.unique(coarse.coords, axis=0)) == len(coarse.coords)
    assert np.array_equal(h.levels[0].coords[h.point_to_site], h.point_coords)


@pytest.mark.parametrize("mamba", ["bi", "uni", "none"])
def test_order_equivariance(mamba):
    cloud = random_cloud(300, 2)
    model = small_model(mamba=mamba)
    base = model_forward(model, cloud).data
    perm = np.random.default_rng(3).permutation(len(cloud))
    shuffled = model_forward(model, cloud.subset(perm)).data
    # equal up to summation order inside voxel means
    assert np.allclose(shuffled, base[perm], rtol=1e-10, atol=1e-12)


def test_forward_is_deterministic():
    cloud = random_cloud(200, 4)
    a = model_forward(small_model(), cloud).data
    b = model_forward(small_model(), cloud).data
    assert np.array_equal(a, b)


def test_feature_width_checked():
    cloud = PointCloud(np.zeros((3, 3)), np.zeros((3, 2)))
    with pytest.raises(DomainError):
        model_forward(small_model(), cloud)


def test_receptive_radius_formula():
    assert receptive_radius(ModelConfig(stages=1, d_model=(4,), blocks_per_stage=1)) == 3
    assert receptive_radius(ModelConfig(stages=2, d_model=(4, 4), blocks_per_stage=1)) == 10
    assert receptive_radius(ModelConfig(stages=2, d_model=(4, 4), blocks_per_stage=0)) == 2


def voxel_dist(model, cloud, i):
    h = build_hierarchy(cloud.positions, model.config.grid_size, model.config.stages)
    return np.abs(h.point_coords - h.point_coords[i]).max(axis=1)


@pytest.mark.parametrize("stages,blocks", [(1, 1), (2, 1), (2, 0), (3, 1)])
def test_conv_only_saliency_bounded(stages, blocks):
    cfg = ModelConfig(stages=stages, blocks_per_stage=blocks, d_model=(4,) * stages,
                      mamba="none", grid_size=0.1)
    model = SegmentationNet(cfg).astype(np.float64)
    cloud = random_cloud(800, 5, extent=4.0)
    sal = erf_probe(model, cloud, 7)
    dist = voxel_dist(model, cloud, 7)
    assert sal[7] > 0
    assert np.all(sal[dist > receptive_radius(cfg)] == 0)


def test_mamba_reaches_far_points():
    cloud = random_cloud(400, 6, extent=4.0)
    model = small_model(grid_size=0.1).astype(np.float64)
    sal = erf_probe(model, cloud, 0)
    far = voxel_dist(model, cloud, 0) > receptive_radius(model.config)
    assert far.any() and np.any(sal[far] > 0)
    with pytest.raises(DomainError):
        erf_probe(model, cloud, 400)


def test_checkpoint_roundtrip(tmp_path):
    model = small_model(seed=3)
    model.astype(np.float32)
    path = tmp_path / "m.pmb"
    save_checkpoint(path, model, {"extra": np.arange(4.0)}, meta={"note": "x"})
    raw = path.read_bytes()
    assert raw[:4] == b"PMB1"
    header, tensors = read_checkpoint(path)
    assert header["meta"] == {"note": "x"}
    assert [t["name"] for t in header["tensors"]][-1] == "extra"
    loaded, _, extra = load_checkpoint(path)
    assert np.array_equal(extra["extra"], np.arange(4.0))
    for (n1, p1), (n2, p2) in zip(model.named_parameters(), loaded.named_parameters()):
        assert n1 == n2 and np.array_equal(p1.data, p2.data)
    assert [b.pattern for b in loaded.blocks()] == [b.pattern for b in model.blocks()]
    cloud = random_cloud(50)
    assert np.array_equal(model_forward(model, cloud).data, model_forward(loaded, cloud).data)


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "bad.pmb"
    p.write_bytes(b"XXXX" + bytes(8))
    with pytest.raises(DomainError):
        load_checkpoint(p)


def test_checkpoint_is_byte_stable(tmp_path):
    for name in ("a", "b"):
        save_checkpoint(tmp_path / name, small_model(seed=9))
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_resample_patterns_deterministic():
    a, b = small_model(blocks_per_stage=2), small_model(blocks_per_stage=2)
    a.resample_patterns(11)
    b.resample_patterns(11)
    assert [x.pattern for x in a.blocks()] == [x.pattern for x in b.blocks()]


def test_synthetic_scene_forward():
    cloud = generate(SceneSpec(num_points=512, seed=0))
    logits = model_forward(SegmentationNet(ModelConfig()), cloud)
    assert logits.shape == (512, 4)
