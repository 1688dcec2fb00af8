import json

import numpy as np
import pytest

from multirecon.errors import LeakageError, SchemaError
from multirecon.experiment import (
    default_manifest,
    merge_classes,
    run_experiment,
    validate_manifest,
)
from multirecon.volume import Grid, LabelMap


def tiny_manifest(**over):
    base = {
        "schema_version": 1,
        "cohort": {"n": 6, "dims": [24, 24, 24], "spacing": 2.2},
        "simulation": {"in_plane_spacing": 2.2, "slice_thickness": 4.4},
        "reconstruction": {"weights": [0.1, 0.75], "max_iters": 3},
        "configurations": [
            {"name": "Baseline", "weights": [0.75]},
            {"name": "MIALSRTK-augmented", "weights": [0.1, 0.75], "labelling": "weak"},
        ],
        "split": {"n_test": 2},
        "folds": {"k": 2},
        "training": {"patch_size": 16},
        "inference": {"patch_size": 16},
        "out_of_domain": {"cohort": {"n": 5}, "simulation": {"slice_thickness": 6.6}},
        "outputs": {"volumes": False},
    }
    base.update(over)
    return base


def test_default_manifest_volumes():
    m = validate_manifest(default_manifest())
    assert len(m["split"]["train"]) == 30 and len(m["split"]["test"]) == 10
    assert not set(m["split"]["train"]) & set(m["split"]["test"])
    n_train = len(m["split"]["train"])
    sizes = {c["name"]: n_train * len(c["weights"]) for c in m["configurations"]}
    assert sizes == {"Baseline": 30, "MIALSRTK-augmented": 120}
    # the shifted pipeline inherits everything it does not override
    assert m["out_of_domain"]["simulation"]["n_stacks"] == 3
    assert m["out_of_domain"]["simulation"]["slice_thickness"] == 4.4


def test_leaky_split():
    with pytest.raises(LeakageError):
        validate_manifest(tiny_manifest(split={"train": ["sub-001", "sub-002"], "test": ["sub-002"]}))


def test_leaky_fold_plan():
    m = tiny_manifest(split={"test": ["sub-006"]}, folds={"k": 2, "assignment": {"sub-001": 0, "sub-006": 1}})
    with pytest.raises(LeakageError):
        validate_manifest(m)


@pytest.mark.parametrize(
    "bad",
    [
        {"reconstruction": {"weights": [0.1], "reference_weight": 0.75}},
        {"configurations": [{"name": "MIALSRTK-augmented", "weights": [0.75]}]},
        {"configurations": [{"name": "Baseline", "weights": [9.0]}]},
        {"split": {"n_test": 6}},
        {"cohort": {"n": "six"}},
        # a "shifted" pipeline identical to the training one
        {"out_of_domain": {"simulation": {"slice_thickness": 4.4},
                           "reconstruction": {"regularizer": "huber-tv", "convention": "lambda",
                                              "weights": [0.75], "reference_weight": 0.75}}},
    ],
)
def test_schema_errors(bad):
    with pytest.raises(SchemaError):
        validate_manifest(tiny_manifest(**bad))


def test_merge_classes():
    g = Grid.centered((2, 2, 2), 1.0)
    l = LabelMap(np.array([0, 1, 3, 8, 8, 2, 3, 1]).reshape(2, 2, 2), g, 8)
    out = merge_classes(l, {"8": 3})
    assert sorted(np.unique(out.labels)) == [0, 1, 2, 3]
    assert (out.labels == 3).sum() == 4
    same = LabelMap(l.labels.clip(0, 7), g)
    assert np.array_equal(merge_classes(same, {c: c for c in range(8)}).labels, same.labels)
    with pytest.raises(SchemaError):
        merge_classes(same, {0: 0, 1: 1, 2: 2, 3: 3})
    with pytest.raises(SchemaError):
        merge_classes(l, {"8": 9})
    with pytest.raises(SchemaError):
        merge_classes(l, {"9": 3})


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("exp")
    return out, run_experiment(tiny_manifest(), out)


def test_smoke_run_outputs(tiny_run):
    out, report = tiny_run
    for name in ["table.csv", "subjects.csv", "ga_strata.csv", "weak_labels.csv", "stats.json",
                 "folds.json", "provenance.json", "report.json", "manifest.resolved.json"]:
        assert (out / name).exists(), name
    table = {(r["task"], r["configuration"]): r for r in report["table"]}
    assert table["in-domain", "Baseline"]["training_volumes"] == 4
    assert table["in-domain", "MIALSRTK-augmented"]["training_volumes"] == 8
    assert ("out-of-domain", "MIALSRTK-augmented") in table
    weak = (out / "weak_labels.csv").read_text().splitlines()
    assert len(weak) == 1 + 4
    test = json.loads((out / "manifest.resolved.json").read_text())["split"]["test"]
    assert len(test) == 2
    folds = json.loads((out / "folds.json").read_text())
    for keys in folds["configurations"]["MIALSRTK-augmented"]["training_keys"]:
        assert keys and not any(k.startswith(tuple(test)) for k in keys)


def test_smoke_run_deterministic(tiny_run, tmp_path):
    out, _ = tiny_run
    run_experiment(tiny_manifest(), tmp_path)
    for name in ["table.csv", "subjects.csv", "ga_strata.csv", "weak_labels.csv", "folds.json"]:
        assert (out / name).read_bytes() == (tmp_path / name).read_bytes(), name


def test_volume_outputs(tmp_path):
    m = tiny_manifest(cohort={"n": 3, "dims": [24, 24, 24], "spacing": 2.2}, split={"n_test": 1},
                      folds={"k": 1}, out_of_domain=None, outputs={"volumes": True})
    run_experiment(m, tmp_path)
    recon = sorted(p.name for p in (tmp_path / "recon").iterdir())
    assert "sub-001_rec-lambda0.1.nii.gz" in recon and "sub-002_rec-lambda0.75.nii.gz" in recon
    assert len(list((tmp_path / "pred").iterdir())) == 2
    assert len(list((tmp_path / "models").iterdir())) == 2
