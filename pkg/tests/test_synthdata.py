import numpy as np
import pytest

from pamba.errors import DomainError
from pamba.synthdata import CLASSES, SceneSpec, generate


def test_deterministic_per_seed():
    a, b = generate(SceneSpec(seed=3)), generate(SceneSpec(seed=3))
    assert np.array_equal(a.positions, b.positions)
    assert np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)
    c = generate(SceneSpec(seed=4))
    assert not np.array_equal(a.positions, c.positions)


def test_noiseless_floor_is_flat():
    c = generate(SceneSpec(num_points=2000, noise_sigma=0.0, seed=1))
    assert np.all(c.positions[c.labels == 0, 2] == 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_all_classes_present_and_balanced(seed):
    c = generate(SceneSpec(num_points=4096, seed=seed))
    counts = np.bincount(c.labels, minlength=4)
    assert counts.tolist() == [1024] * 4
    c.validate(num_classes=len(CLASSES))


def test_features_are_height_and_normal():
    c = generate(SceneSpec(num_points=1000, noise_sigma=0.0, seed=2))
    assert np.array_equal(c.features[:, 0], c.positions[:, 2])
    assert np.allclose(np.linalg.norm(c.features[:, 1:], axis=1), 1.0)
    walls = c.labels == 1
    assert np.allclose(c.features[walls, 3], 0.0)


def test_class_subset():
    c = generate(SceneSpec(num_points=300, classes=("floor", "wall"), seed=0))
    assert set(np.unique(c.labels)) == {0, 1}


@pytest.mark.parametrize("spec", [
    SceneSpec(num_points=10),
    SceneSpec(extents=(0.5, 3, 2)),
    SceneSpec(classes=("floor", "chair")),
    SceneSpec(noise_sigma=-1),
])
def test_infeasible_specs(spec):
    with pytest.raises(DomainError):
        generate(spec)
