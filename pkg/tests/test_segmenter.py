import warnings

import numpy as np
import pytest

from multirecon.augment import AugmentConfig, PatchSpec
from multirecon.errors import CorruptFileError, PlanError, UnsupportedFormatError
from multirecon.metrics import evaluate
from multirecon.phantom import PhantomParams, generate_phantom
from multirecon.segmenter import (
    MODEL_MAGIC,
    FeatureConfig,
    FoldPlan,
    GaussianSegmenter,
    TrainingConfiguration,
    TrainingItem,
    TrainingSchedule,
    compute_features,
    run_cv,
    train_baseline_model,
)
from multirecon.volume import N_CLASSES, Grid, LabelMap, Volume

TINY = TrainingSchedule(epochs=1, patches_per_epoch=1, augment=AugmentConfig.identity(), patch=PatchSpec(8))


@pytest.fixture(scope="module")
def clean_phantom():
    intens = {c: (m, 0.0) for c, (m, _) in PhantomParams().class_intensities.items()}
    return generate_phantom(PhantomParams(dims=(32, 32, 32), class_intensities=intens, bias_amplitude=0.0))


def test_self_segmentation(clean_phantom):
    v, l = clean_phantom
    model = train_baseline_model([(v, l)])
    assert evaluate(model.predict(v), l).mean_dsc >= 0.80


def test_single_class_training(small_phantom):
    v, l = small_phantom
    one = l.with_labels(np.full(l.dims, 3))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model = train_baseline_model([(v, one)])
    assert np.all(model.predict(v).labels == 3)


def test_missing_class_warns(small_phantom):
    v, l = small_phantom
    lab = np.where(l.labels == 7, 3, l.labels)
    with pytest.warns(UserWarning, match="absent"):
        model = train_baseline_model([(v, l.with_labels(lab))])
    assert 7 not in model.predict(v).classes()


def test_features_shape(small_phantom):
    v, _ = small_phantom
    f = compute_features(v, FeatureConfig())
    assert f.shape == (FeatureConfig().n_features, v.grid.size)
    assert compute_features(v, FeatureConfig(use_coords=False)).shape[0] == 4


def test_simplex_on_random_inputs(rng, small_phantom):
    model = train_baseline_model([small_phantom])
    g = Grid.centered((9, 10, 11), 1.3)
    for scale in (0.1, 1.0, 50.0):
        p = model.predict_proba(Volume(rng.normal(0, scale, g.dims), g))
        assert p.shape == (N_CLASSES,) + g.dims
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=0), 1.0, atol=1e-9)


def test_serialization_deterministic(small_phantom):
    a = train_baseline_model([small_phantom], seed=4, schedule=TINY)
    b = train_baseline_model([small_phantom], seed=4, schedule=TINY)
    assert a.to_bytes() == b.to_bytes()
    assert a.to_bytes().startswith(MODEL_MAGIC)


def test_round_trip(tmp_path, small_phantom):
    v, _ = small_phantom
    model = train_baseline_model([small_phantom])
    model.save(tmp_path / "m.mrseg")
    back = GaussianSegmenter.load(tmp_path / "m.mrseg")
    assert back.to_bytes() == model.to_bytes()
    assert np.array_equal(back.predict(v).labels, model.predict(v).labels)


def test_bad_model_files(small_phantom):
    blob = train_baseline_model([small_phantom]).to_bytes()
    with pytest.raises(CorruptFileError):
        GaussianSegmenter.from_bytes(b"garbage")
    with pytest.raises(CorruptFileError):
        GaussianSegmenter.from_bytes(blob[:-8])
    bumped = blob[:8] + (99).to_bytes(4, "little") + blob[12:]
    with pytest.raises(UnsupportedFormatError):
        GaussianSegmenter.from_bytes(bumped)


def test_fold_plan_validation():
    with pytest.raises(PlanError):
        FoldPlan(0, {})
    with pytest.raises(PlanError):
        FoldPlan(2, {"a": 0, "b": 0})
    with pytest.raises(PlanError):
        FoldPlan(2, {"a": 0, "b": 1, "c": 2})
    with pytest.raises(PlanError):
        FoldPlan.stratified({"a": 21.0}, 2)


def test_stratified_folds_span_ga():
    ga = {f"s{i:02d}": 21 + 14 * i / 29 for i in range(30)}
    plan = FoldPlan.stratified(ga, 5)
    for f in range(5):
        held = plan.held_out(f)
        assert len(held) == 6
        assert max(ga[s] for s in held) - min(ga[s] for s in held) > 10


def _config(n_subjects, weights, vol):
    g = Grid.centered((12, 12, 12), 1.0)
    v = Volume(vol.data[10:22, 10:22, 10:22], g)
    l = LabelMap(np.where(v.data > np.median(v.data), 3, 1), g)
    items = [
        TrainingItem(f"s{i:02d}", f"s{i:02d}_w{w}", v, l, "manual" if w == 0.75 else "weak")
        for i in range(n_subjects)
        for w in weights
    ]
    return TrainingConfiguration("x", items)


def test_cv_split_sizes(small_phantom):
    v, _ = small_phantom
    base = _config(30, [0.75], v)
    aug = _config(30, [0.1, 0.75, 1.5, 3.0], v)
    plan = FoldPlan.stratified({s: i for i, s in enumerate(base.subjects)}, 5)
    assert all(len(plan.train_subjects(f)) == 24 for f in range(5))
    rb = run_cv(base, plan, TINY)
    ra = run_cv(aug, plan, TINY)
    assert len(rb.models) == len(ra.models) == 5
    assert all(len(k) == 24 for k in rb.training_keys)
    assert all(len(k) == 96 for k in ra.training_keys)
    for f, keys in enumerate(ra.training_keys):
        assert not {k.split("_")[0] for k in keys} & set(plan.held_out(f))


def test_cv_deterministic_and_cached(small_phantom):
    v, _ = small_phantom
    cfg = _config(10, [0.1, 0.75], v)
    plan = FoldPlan.stratified({s: i for i, s in enumerate(cfg.subjects)}, 5)
    a = run_cv(cfg, plan, TrainingSchedule(epochs=1, patches_per_epoch=1, patch=PatchSpec(8)), seed=3)
    cache = {}
    b = run_cv(cfg, plan, TrainingSchedule(epochs=1, patches_per_epoch=1, patch=PatchSpec(8)), seed=3, stats_cache=cache)
    assert [m.digest() for m in a.models] == [m.digest() for m in b.models]
    assert len(cache) == 20


def test_cv_single_fold_uses_everything(small_phantom):
    v, _ = small_phantom
    cfg = _config(1, [0.75], v)
    res = run_cv(cfg, FoldPlan(1, {"s00": 0}), TINY)
    assert res.training_keys == [["s00_w0.75"]]


def test_cv_subject_without_fold(small_phantom):
    v, _ = small_phantom
    cfg = _config(3, [0.75], v)
    with pytest.raises(PlanError):
        run_cv(cfg, FoldPlan(2, {"s00": 0, "s01": 1}), TINY)
