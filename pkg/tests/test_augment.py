import numpy as np
import pytest

from multirecon.augment import (
    AugmentConfig,
    PatchSpec,
    augment_sample,
    sample_patches,
    sliding_window_predict,
    window_origins,
)
from multirecon.errors import ParameterError
from multirecon.segmenter import Segmenter
from multirecon.volume import N_CLASSES, Grid, LabelMap, Volume, normalize


class ConstantModel(Segmenter):
    """Outputs a fixed one-hot class everywhere."""

    def __init__(self, cls):
        self.cls = cls

    def predict_proba(self, patch):
        p = np.zeros((N_CLASSES,) + patch.dims)
        p[self.cls] = 1.0
        return p

    def to_bytes(self):
        return bytes([self.cls])


class IntensityModel(Segmenter):
    """Soft, position-dependent output: class probabilities from a softmax of the intensity."""

    def predict_proba(self, patch):
        logits = np.stack([patch.data * (c - 3.5) for c in range(N_CLASSES)])
        logits -= logits.max(axis=0)
        e = np.exp(logits)
        return e / e.sum(axis=0)

    def to_bytes(self):
        return b""


def test_identity_augmentation(small_phantom):
    v, l = small_phantom
    out_v, out_l = augment_sample(v, l, AugmentConfig.identity())
    np.testing.assert_allclose(out_v.data, normalize(v).data, atol=1e-12)
    assert np.array_equal(out_l.labels, l.labels)


def test_double_flip_is_identity(small_phantom):
    v, l = small_phantom
    flip = AugmentConfig((1.0, 0, 0), 0.0, (1.0, 1.0), 0, 0.0, 0.0)
    once = augment_sample(v, l, flip)
    assert np.array_equal(once[1].labels, l.labels[::-1])
    twice = augment_sample(*once, flip)
    assert np.array_equal(twice[1].labels, l.labels)
    np.testing.assert_allclose(twice[0].data, normalize(v).data, atol=1e-6)


def test_augmentation_deterministic(small_phantom):
    v, l = small_phantom
    cfg = AugmentConfig(seed=11)
    a, b = augment_sample(v, l, cfg), augment_sample(v, l, cfg)
    assert np.array_equal(a[0].data, b[0].data)
    assert np.array_equal(a[1].labels, b[1].labels)
    c = augment_sample(v, l, AugmentConfig(seed=12))
    assert not np.array_equal(a[0].data, c[0].data)


def test_augmentation_keeps_class_set(small_phantom):
    v, l = small_phantom
    for seed in range(5):
        _, out = augment_sample(v, l, AugmentConfig(seed=seed))
        assert out.classes() <= l.classes()


def test_config_validation():
    with pytest.raises(ParameterError):
        AugmentConfig(flip_prob=(1.5, 0, 0))
    with pytest.raises(ParameterError):
        AugmentConfig(scale_range=(1.2, 1.0))
    with pytest.raises(ParameterError):
        PatchSpec(4)
    with pytest.raises(ParameterError):
        PatchSpec(16, overlap=1.0)


def test_patch_exactly_volume_sized():
    g = Grid.centered((16, 16, 16), 1.0)
    v = Volume(np.ones(g.dims), g)
    l = LabelMap(np.ones(g.dims, int), g)
    patches = sample_patches(v, l, PatchSpec(16), 10, np.random.default_rng(0))
    assert {o for _, _, o in patches} == {(0, 0, 0)}


def test_small_volume_is_padded():
    g = Grid.centered((10, 12, 9), 1.0)
    v = Volume(np.ones(g.dims), g)
    l = LabelMap(np.ones(g.dims, int), g)
    [(pv, pl, origin)] = sample_patches(v, l, PatchSpec(16), 1, np.random.default_rng(0))
    assert pv.dims == (16, 16, 16) and origin == (0, 0, 0)
    assert pv.data[10:].sum() == 0 and pl.labels[:10, :12, :9].all()


def test_patch_origins_in_bounds(rng):
    g = Grid.centered((64, 64, 64), 1.0)
    lab = np.zeros(g.dims, int)
    lab[20:40, 20:40, 20:40] = 3
    patches = sample_patches(Volume(np.zeros(g.dims), g), LabelMap(lab, g), PatchSpec(32), 100, rng)
    origins = np.array([o for _, _, o in patches])
    assert origins.min() >= 0 and origins.max() <= 32
    for pv, pl, o in patches:
        assert pv.dims == (32, 32, 32)
        np.testing.assert_allclose(pv.grid.world_coordinates()[:, 0, 0, 0], g.world_coordinates()[:, o[0], o[1], o[2]])


def test_foreground_fraction(small_phantom, rng):
    v, l = small_phantom
    patches = sample_patches(v, l, PatchSpec(16), 200, rng)
    frac = np.mean([pl.labels.any() for _, pl, _ in patches])
    assert frac >= 0.5


def test_window_cover():
    spec = PatchSpec(16, 0.5)
    for dims in [(16, 16, 16), (40, 33, 17), (48, 48, 48)]:
        cover = np.zeros(dims)
        for o in window_origins(dims, spec):
            cover[o[0] : o[0] + 16, o[1] : o[1] + 16, o[2] : o[2] + 16] += 1
        assert cover.min() >= 1


@pytest.mark.parametrize("overlap", [0.0, 0.25, 0.5])
def test_constant_model_stitches_to_constant(small_phantom, overlap):
    v, _ = small_phantom
    probs, lab = sliding_window_predict(v, [ConstantModel(3)], PatchSpec(16, overlap))
    assert np.all(lab.labels == 3)
    np.testing.assert_allclose(probs.sum(axis=0), 1.0, atol=1e-6)


def test_no_overlap_equals_concatenated_patches(small_phantom):
    v, _ = small_phantom
    model = IntensityModel()
    probs, _ = sliding_window_predict(v, [model], PatchSpec(16, 0.0), normalization=None)
    expected = np.zeros_like(probs)
    for o in window_origins(v.dims, PatchSpec(16, 0.0)):
        sl = tuple(slice(a, a + 16) for a in o)
        patch = Volume(v.data[sl], v.grid.subgrid(o, (16, 16, 16)))
        expected[(slice(None),) + sl] = model.predict_proba(patch)
    np.testing.assert_allclose(probs, expected, atol=1e-12)


def test_ensemble_of_identical_models(small_phantom):
    v, _ = small_phantom
    spec = PatchSpec(16, 0.5)
    p1, l1 = sliding_window_predict(v, [IntensityModel()], spec)
    p5, l5 = sliding_window_predict(v, [IntensityModel() for _ in range(5)], spec)
    np.testing.assert_allclose(p1, p5, atol=1e-12)
    assert np.array_equal(l1.labels, l5.labels)


def test_stitched_simplex_on_odd_volume(rng):
    g = Grid.centered((21, 18, 13), 1.0)
    v = Volume(rng.normal(size=g.dims), g)
    probs, lab = sliding_window_predict(v, [IntensityModel()], PatchSpec(16, 0.5))
    assert probs.shape == (N_CLASSES,) + g.dims and lab.grid.same_as(g)
    np.testing.assert_allclose(probs.sum(axis=0), 1.0, atol=1e-6)


def test_requires_a_model(small_phantom):
    with pytest.raises(ParameterError):
        sliding_window_predict(small_phantom[0], [], PatchSpec(16))
