import numpy as np
import pytest

from multirecon.errors import DegenerateIntensityError, GeometryError, ParameterError, SchemaError
from multirecon.metrics import dice
from multirecon.volume import (
    Grid,
    LabelMap,
    RigidTransform,
    Volume,
    normalize,
    resample,
    warp_labels,
    warp_volume,
)


def test_grid_rejects_bad_geometry():
    with pytest.raises(GeometryError):
        Grid.centered((4, 0, 4), 1.0)
    with pytest.raises(GeometryError):
        Grid.centered((4, 4, 4), 0.0)
    shear = np.eye(4)
    shear[0, 1] = 0.5
    with pytest.raises(GeometryError):
        Grid((4, 4, 4), (1, np.hypot(1, 0.5), 1), shear)


def test_volume_rejects_nan(grid12):
    data = np.zeros(grid12.dims)
    data[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        Volume(data, grid12)


def test_labels_out_of_schema(grid12):
    lab = np.zeros(grid12.dims, int)
    lab[1, 1, 1] = 8
    with pytest.raises(SchemaError):
        LabelMap(lab, grid12)
    assert LabelMap(lab, grid12, max_class=8).classes() == {0, 8}


def test_resample_constant_inside_support():
    src = Volume(np.full((16, 16, 16), 5.0), Grid.centered((16, 16, 16), 1.0))
    target = Grid.centered((10, 9, 11), 0.8)
    out = resample(src, target)
    np.testing.assert_allclose(out.data, 5.0, atol=1e-12)


def test_identity_resample_is_bitwise_copy(rng):
    g = Grid.centered((7, 8, 9), (1.0, 1.5, 2.0))
    v = Volume(rng.normal(size=g.dims), g)
    out = resample(v, g)
    assert np.array_equal(out.data, v.data)
    assert out.data is not v.data


def test_half_voxel_ramp():
    g = Grid.centered((20, 4, 4), 1.0)
    x = np.arange(20, dtype=float)
    v = Volume(np.broadcast_to(x[:, None, None], g.dims).copy(), g)
    aff = np.array(g.affine)
    aff[0, 3] += 0.5
    target = Grid((19, 4, 4), g.spacing, aff)
    out = resample(v, target)
    expected = (np.arange(19) + 0.5)[:, None, None]
    assert np.max(np.abs(out.data - expected)) <= 1e-6


def test_warp_labels_identity(small_phantom):
    _, lab = small_phantom
    out = warp_labels(lab, RigidTransform(), lab.grid)
    assert np.array_equal(out.labels, lab.labels)


def test_warp_labels_integer_shift():
    g = Grid.centered((16, 16, 16), 1.0)
    lab = np.zeros(g.dims, int)
    lab[4:10, 5:9, 6:12] = 3
    lab[11:16, 0:3, 0:3] = 5
    l = LabelMap(lab, g)
    # the transform maps output points to input points, so t = -2 moves content by +2
    out = warp_labels(l, RigidTransform(translation=(-2.0, 0, 0)), g)
    expected = np.zeros_like(lab)
    expected[2:] = lab[:-2]
    assert np.array_equal(out.labels, expected)
    assert np.all(out.labels[:2] == 0)


def test_warp_labels_round_trip_blob():
    g = Grid.centered((32, 32, 32), 1.0)
    idx = np.indices(g.dims) - 15.5
    lab = ((idx**2).sum(0) < 8.0**2).astype(int) * 3
    l = LabelMap(lab, g)
    t = RigidTransform.from_degrees((4, -3, 7), (1.3, -0.7, 2.1))
    back = warp_labels(warp_labels(l, t, g), t.inverse(), g)
    assert dice(back, l, 3) >= 0.95


def test_warp_labels_never_invents_classes(rng):
    g = Grid.centered((12, 12, 12), 1.0)
    l = LabelMap(rng.choice([0, 2, 5], size=g.dims), g)
    for _ in range(5):
        t = RigidTransform.from_degrees(rng.uniform(-20, 20, 3), rng.uniform(-3, 3, 3))
        assert warp_labels(l, t, g).classes() <= l.classes() | {0}


def test_warp_volume_unknown_mode(grid12):
    with pytest.raises(ValueError):
        warp_volume(Volume(np.zeros(grid12.dims), grid12), None, grid12, mode="cubic")


def test_transform_compose_inverse(rng):
    t = RigidTransform.from_degrees(rng.uniform(-30, 30, 3), rng.uniform(-5, 5, 3))
    ident = t.compose(t.inverse())
    np.testing.assert_allclose(ident.matrix(), np.eye(4), atol=1e-12)
    assert RigidTransform.from_dict(t.to_dict()).matrix() == pytest.approx(t.matrix())


def test_normalize_two_level_support():
    g = Grid.centered((10, 10, 10), 1.0)
    data = np.zeros(g.dims)
    data[:4] = 10.0
    data[4:8] = 20.0
    out = normalize(Volume(data, g))
    vals = out.data[data != 0]
    assert abs(vals.mean()) <= 1e-6
    assert abs(vals.std() - 1.0) <= 1e-6
    assert np.all(out.data[data == 0] == 0)


@pytest.mark.parametrize("mode", ["support", "robust"])
def test_normalize_idempotent(small_phantom, mode):
    v, _ = small_phantom
    once = normalize(v, mode=mode)
    twice = normalize(once, mode=mode)
    assert np.max(np.abs(once.data - twice.data)) <= 1e-6


def test_normalize_constant_raises(grid12):
    with pytest.raises(DegenerateIntensityError):
        normalize(Volume(np.full(grid12.dims, 3.0), grid12))
    with pytest.raises(ParameterError):
        normalize(Volume(np.arange(1728.0).reshape(12, 12, 12), grid12), mode="median")
