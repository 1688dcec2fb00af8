"""Manifest-driven experiment: multi-reconstruction augmentation versus a single-reconstruction baseline.

One run goes phantom -> simulate -> multi-reconstruct -> propagate labels ->
cross-validated training per configuration -> ensemble inference ->
evaluation -> paired statistics, for an in-domain held-out split and an
optional out-of-domain cohort produced by a different acquisition and
reconstruction setup.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .augment import AugmentConfig, PatchSpec, sliding_window_predict
from .errors import LeakageError, SchemaError
from .forward import AcquisitionModel, simulate_stacks
from .metrics import (
    TISSUE_CLASSES,
    bonferroni,
    compare,
    evaluate,
    ga_bins,
    rows_to_csv,
    stratify_by_ga,
)
from .nifti import dumps_json, write_json, write_labels, write_text, write_volume
from .phantom import PhantomParams, cohort_params, generate_phantom
from .registration import propagate_labels
from .segmenter import (
    CONFIGURATION_NAMES,
    FeatureConfig,
    FoldPlan,
    TrainingConfiguration,
    TrainingItem,
    TrainingSchedule,
    run_cv,
)
from .solver import CONVENTIONS, REGULARIZERS, ReconConfig, multi_reconstruct, output_name
from .volume import CLASS_NAMES, N_CLASSES, LabelMap

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

_cohort = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "n": {"type": "integer", "minimum": 1},
        "ga_range": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
        "seed": {"type": "integer", "minimum": 0},
        "dims": {"type": "array", "items": {"type": "integer", "minimum": 8}, "minItems": 3, "maxItems": 3},
        "spacing": {"type": "number", "exclusiveMinimum": 0},
        "with_cc": {"type": "boolean"},
        "bias_amplitude": {"type": "number", "minimum": 0},
    },
}
_simulation = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "n_stacks": {"type": "integer", "minimum": 1},
        "in_plane_spacing": {"type": "number", "exclusiveMinimum": 0},
        "slice_thickness": {"type": "number", "exclusiveMinimum": 0},
        "psf_fwhm_through": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "psf_fwhm_inplane": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "motion_sd": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 2, "maxItems": 2},
        "noise_sd": {"type": "number", "minimum": 0},
    },
}
_reconstruction = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "regularizer": {"enum": list(REGULARIZERS)},
        "convention": {"enum": list(CONVENTIONS)},
        "weights": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1},
        "reference_weight": {"type": "number", "exclusiveMinimum": 0},
        "max_iters": {"type": "integer", "minimum": 1},
        "tolerance": {"type": "number", "minimum": 0},
    },
}

MANIFEST_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "multirecon experiment manifest",
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "name": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "cohort": _cohort,
        "simulation": _simulation,
        "reconstruction": _reconstruction,
        "split": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_test": {"type": "integer", "minimum": 0},
                "train": {"type": "array", "items": {"type": "string"}},
                "test": {"type": "array", "items": {"type": "string"}},
            },
        },
        "folds": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "k": {"type": "integer", "minimum": 1},
                "assignment": {"type": "object", "additionalProperties": {"type": "integer", "minimum": 0}},
            },
        },
        "configurations": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["name", "weights"],
                "properties": {
                    "name": {"enum": list(CONFIGURATION_NAMES)},
                    "weights": {"type": "array", "items": {"type": "number"}, "minItems": 1},
                    "labelling": {"enum": ["manual", "weak"]},
                },
            },
        },
        "propagation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "levels": {"type": "integer", "minimum": 1},
                "restarts": {"type": "integer", "minimum": 0},
                "max_evals": {"type": "integer", "minimum": 1},
                "fine_stride": {"type": "integer", "minimum": 1},
                "order": {"enum": [1, 3]},
            },
        },
        "training": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epochs": {"type": "integer", "minimum": 1},
                "patches_per_epoch": {"type": "integer", "minimum": 1},
                "patch_size": {"type": "integer", "minimum": 8},
                "augment": {"type": "object"},
                "features": {"type": "object"},
            },
        },
        "inference": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "patch_size": {"type": "integer", "minimum": 8},
                "overlap": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            },
        },
        "out_of_domain": {
            "type": ["object", "null"],
            "additionalProperties": False,
            "properties": {
                "cohort": _cohort,
                "simulation": _simulation,
                "reconstruction": _reconstruction,
                "merge_classes": {"type": "object", "additionalProperties": {"type": "integer", "minimum": 0}},
            },
        },
        "statistics": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "test": {"enum": ["signed-rank", "rank-sum"]},
                "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "ga_bin_width": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "outputs": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"volumes": {"type": "boolean"}},
        },
    },
}

MIALSRTK_WEIGHTS = [0.1, 0.75, 1.5, 3.0]

DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "name": "multi-reconstruction-augmentation",
    "seed": 0,
    "cohort": {
        "n": 40,
        "ga_range": [21.0, 35.0],
        "seed": 1,
        "dims": [48, 48, 48],
        "spacing": 1.1,
        "with_cc": False,
        "bias_amplitude": 0.2,
    },
    "simulation": {
        "n_stacks": 3,
        "in_plane_spacing": 1.1,
        "slice_thickness": 3.3,
        "psf_fwhm_through": None,
        "psf_fwhm_inplane": None,
        "motion_sd": [2.0, 1.0],
        "noise_sd": 0.03,
    },
    "reconstruction": {
        "regularizer": "huber-tv",
        "convention": "lambda",
        "weights": MIALSRTK_WEIGHTS,
        "reference_weight": 0.75,
        "max_iters": 10,
        "tolerance": 1e-3,
    },
    "split": {"n_test": 10},
    "folds": {"k": 5},
    "configurations": [
        {"name": "Baseline", "weights": [0.75], "labelling": "manual"},
        {"name": "MIALSRTK-augmented", "weights": MIALSRTK_WEIGHTS, "labelling": "weak"},
    ],
    "propagation": {"levels": 1, "restarts": 0, "max_evals": 60, "fine_stride": 2, "order": 1},
    "training": {
        "epochs": 2,
        "patches_per_epoch": 2,
        "patch_size": 32,
        "augment": {
            "flip_prob": [0.5, 0.0, 0.0],
            "max_rotation_deg": 3.0,
            "scale_range": [0.97, 1.03],
            "bias_order": 3,
            "bias_amplitude": 0.3,
            "noise_sd_rel": 0.05,
            "normalization": "robust",
        },
        "features": {},
    },
    "inference": {"patch_size": 32, "overlap": 0.5},
    "out_of_domain": {
        "cohort": {"n": 40, "seed": 2, "with_cc": True},
        "simulation": {"slice_thickness": 4.4},
        "reconstruction": {
            "regularizer": "tikhonov-gradient",
            "convention": "alpha",
            "weights": [0.01],
            "reference_weight": 0.01,
            "max_iters": 20,
        },
        "merge_classes": {"8": 3},
    },
    "statistics": {"test": "signed-rank", "alpha": 0.05, "ga_bin_width": 2.0},
    "outputs": {"volumes": True},
}


def _merge(base, over):
    if isinstance(base, dict) and isinstance(over, dict):
        out = dict(base)
        for k, v in over.items():
            out[k] = _merge(base.get(k), v) if k in base else copy.deepcopy(v)
        return out
    return copy.deepcopy(over)


def default_manifest(**overrides) -> dict:
    return _merge(DEFAULTS, overrides)


def subject_ids(n: int, prefix: str = "sub") -> list[str]:
    return [f"{prefix}-{i + 1:03d}" for i in range(n)]


def validate_manifest(raw: dict) -> dict:
    """Schema-check ``raw``, fill defaults, and enforce the cross-field rules.

    Raises :class:`SchemaError` on a malformed manifest and
    :class:`LeakageError` when a held-out subject is scheduled for training.
    The returned manifest is fully resolved.
    """
    try:
        jsonschema.validate(raw, MANIFEST_SCHEMA)
    except jsonschema.ValidationError as e:
        path = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise SchemaError(f"manifest invalid at {path}: {e.message}") from None
    m = _merge(DEFAULTS, raw)
    if m.get("out_of_domain") is not None:
        ood = m["out_of_domain"]
        for key in ("cohort", "simulation", "reconstruction"):
            ood[key] = _merge(m[key], ood.get(key) or {})
    rec = m["reconstruction"]
    if rec["reference_weight"] not in rec["weights"]:
        raise SchemaError("reconstruction.reference_weight must be one of reconstruction.weights")
    lo, hi = m["cohort"]["ga_range"]
    if hi < lo:
        raise SchemaError("cohort.ga_range must be ordered")
    names = [c["name"] for c in m["configurations"]]
    if len(set(names)) != len(names):
        raise SchemaError("configuration names must be unique")
    for c in m["configurations"]:
        c.setdefault("labelling", "manual")
        bad = [w for w in c["weights"] if w not in rec["weights"]]
        if bad:
            raise SchemaError(f"configuration {c['name']} uses weights {bad} that are not reconstructed")
    if "Baseline" not in names:
        raise SchemaError("a Baseline configuration is required for the comparison")

    ids = subject_ids(m["cohort"]["n"])
    train, test = _split(m, ids)
    m["split"] = {"train": train, "test": test}
    k = m["folds"]["k"]
    assignment = m["folds"].get("assignment")
    if assignment is not None:
        leaked = sorted(set(assignment) & set(test))
        if leaked:
            raise LeakageError(f"held-out subjects {leaked} appear in the fold plan")
        unknown = sorted(set(assignment) - set(ids))
        if unknown:
            raise SchemaError(f"fold plan names unknown subjects {unknown}")

    ood = m.get("out_of_domain")
    if ood is not None:
        mapping = ood.get("merge_classes") or {}
        for src, dst in mapping.items():
            if not src.isdigit() or dst > N_CLASSES - 1:
                raise SchemaError(f"merge_classes entry {src!r}: {dst} is not a valid mapping")
        shifted_sim = _pipeline_key(ood["simulation"]) != _pipeline_key(m["simulation"])
        shifted_rec = ood["reconstruction"]["regularizer"] != rec["regularizer"] or (
            ood["reconstruction"]["convention"] != rec["convention"]
        )
        if not (shifted_sim or shifted_rec):
            raise SchemaError("out-of-domain pipeline must differ from the training pipeline")
    return m


def _pipeline_key(d: dict) -> str:
    return json.dumps(d, sort_keys=True)


def _split(m: dict, ids: list[str]) -> tuple[list[str], list[str]]:
    split = m["split"]
    if "train" in split or "test" in split:
        train = list(split.get("train", []))
        test = list(split.get("test", []))
        unknown = sorted((set(train) | set(test)) - set(ids))
        if unknown:
            raise SchemaError(f"split names unknown subjects {unknown}")
        leaked = sorted(set(train) & set(test))
        if leaked:
            raise LeakageError(f"subjects {leaked} are both training and held-out")
        if not train:
            train = [s for s in ids if s not in test]
        return sorted(train), sorted(test)
    n_test = int(split.get("n_test", 0))
    if n_test >= len(ids) and len(ids) > 0:
        raise SchemaError("n_test leaves no training subjects")
    # held-out subjects spread evenly over the GA-ordered cohort
    picks = set()
    if n_test:
        picks = {int(round(x)) for x in np.linspace(0, len(ids) - 1, n_test + 2)[1:-1]}
        if len(picks) != n_test:
            raise SchemaError("n_test too large to spread over the cohort")
    test = [ids[i] for i in sorted(picks)]
    return [s for s in ids if s not in test], test


def merge_classes(l: LabelMap, mapping: dict) -> LabelMap:
    """Relabel ``l`` with ``mapping`` (class -> class).

    A mapping whose keys are all outside the 0..7 tissue schema (e.g.
    ``{8: 3}``) merges extra classes and leaves the others alone. A mapping
    that names any in-schema class is treated as a full table and must cover
    every observed class.
    """
    mapping = {int(k): int(v) for k, v in mapping.items()}
    if any(v < 0 or v > N_CLASSES - 1 for v in mapping.values()):
        raise SchemaError("merge targets must be tissue classes 0..7")
    observed = [int(c) for c in np.unique(l.labels)]
    full_table = any(k <= N_CLASSES - 1 for k in mapping)
    lut = np.arange(max(observed + list(mapping) + [0]) + 1, dtype=np.uint8)
    for c in observed:
        if c in mapping:
            lut[c] = mapping[c]
        elif full_table or c > N_CLASSES - 1:
            raise SchemaError(f"class {c} is present but not mapped")
    return LabelMap(lut[l.labels], l.grid, N_CLASSES - 1)


def check_leakage(configs, plan: FoldPlan | None, test_subjects) -> None:
    """Abort when any held-out subject contributes a training volume or a fold slot."""
    test = set(test_subjects)
    for c in configs:
        leaked = sorted({it.subject for it in c.items} & test)
        if leaked:
            raise LeakageError(f"configuration {c.name} trains on held-out subjects {leaked}")
    if plan is not None:
        leaked = sorted(set(plan.assignment) & test)
        if leaked:
            raise LeakageError(f"held-out subjects {leaked} appear in the fold plan")


# -- per-subject work (top level so worker processes can pickle it) --


def _phantom_template(cohort: dict) -> PhantomParams:
    return PhantomParams(
        dims=tuple(cohort["dims"]),
        spacing=float(cohort["spacing"]),
        with_cc=bool(cohort["with_cc"]),
        bias_amplitude=float(cohort["bias_amplitude"]),
    )


def _acquisition(sim: dict) -> AcquisitionModel:
    return AcquisitionModel(
        in_plane_spacing=sim["in_plane_spacing"],
        slice_thickness=sim["slice_thickness"],
        psf_fwhm_through=sim["psf_fwhm_through"],
        psf_fwhm_inplane=sim["psf_fwhm_inplane"],
    )


def _recon_config(rec: dict, spacing: float) -> ReconConfig:
    return ReconConfig(
        regularizer=rec["regularizer"],
        weight_convention=rec["convention"],
        weight_value=rec["reference_weight"],
        max_iters=rec["max_iters"],
        tolerance=rec["tolerance"],
        hr_spacing=spacing,
    )


def _subject_job(job: dict) -> dict:
    p: PhantomParams = job["params"]
    sim, rec = job["simulation"], job["reconstruction"]
    vol, labels = generate_phantom(p)
    stacks = simulate_stacks(
        vol,
        n_stacks=sim["n_stacks"],
        motion_sd=tuple(sim["motion_sd"]),
        noise_sd=sim["noise_sd"],
        seed=job["sim_seed"],
        template=_acquisition(sim),
    )
    results = multi_reconstruct(stacks, None, _recon_config(rec, p.spacing), job["weights"])
    recons = {w: r.volume for w, r in results}
    summaries = {_wkey(w): r.summary() for w, r in results}
    weak, audit = {}, {}
    ref = recons.get(rec["reference_weight"])
    for w in job.get("weak_weights", []):
        weak[w], reg = propagate_labels(labels, ref, recons[w], return_registration=True, **job["propagation"])
        # every reconstruction shares the phantom's frame, so ``labels`` is the truth here
        audit[w] = {"transform": reg.transform, "dsc": evaluate(weak[w], labels).mean_dsc}
    return {"labels": labels, "recons": recons, "weak": weak, "weak_audit": audit, "summaries": summaries}


def _wkey(w: float) -> str:
    return f"{w:g}"


def _pmap(fn, items, threads: int):
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def _sim_seed(seed: int, cohort_seed: int, i: int) -> int:
    ss = np.random.SeedSequence([seed, cohort_seed, i])
    return int(ss.generate_state(1, np.uint64)[0])


def _cohort_jobs(m: dict, cohort: dict, sim: dict, rec: dict, ids, weights_for, weak_for) -> list[dict]:
    params = cohort_params(cohort["n"], tuple(cohort["ga_range"]), cohort["seed"], _phantom_template(cohort))
    jobs = []
    for i, (sid, p) in enumerate(zip(ids, params)):
        jobs.append(
            {
                "subject": sid,
                "params": p,
                "sim_seed": _sim_seed(m["seed"], cohort["seed"], i),
                "simulation": sim,
                "reconstruction": rec,
                "weights": weights_for(sid),
                "weak_weights": weak_for(sid),
                "propagation": m["propagation"],
            }
        )
    return jobs


def _report_rows(task: str, config: str, reports) -> list[dict]:
    rows = []
    for r in reports:
        row = {"task": task, "configuration": config, "subject": r.subject, "ga": float(r.ga)}
        row["mean_dsc"] = r.mean_dsc
        row["mean_assd"] = r.mean_assd
        for c in TISSUE_CLASSES:
            row[f"dsc_{CLASS_NAMES[c]}"] = r.dsc[c]
            row[f"assd_{CLASS_NAMES[c]}"] = r.assd[c]
        rows.append(row)
    return rows


def _mean_sd(vals):
    vals = [v for v in vals if v is not None]
    if not vals:
        return None, None
    return float(np.mean(vals)), float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0


def run_experiment(manifest, output_dir, threads: int = 1, seed: int | None = None) -> dict:
    """Execute a manifest and write the report bundle to ``output_dir``.

    ``manifest`` is a path or an already-loaded dict. Returns the summary that
    is also written to ``report.json``.
    """
    t0 = time.perf_counter()
    raw = manifest
    if not isinstance(manifest, dict):
        with open(manifest) as f:
            raw = json.load(f)
    if seed is not None:
        raw = dict(raw, seed=int(seed))
    m = validate_manifest(raw)
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(m, out / "manifest.resolved.json")

    rec = m["reconstruction"]
    ref_w = rec["reference_weight"]
    ids = subject_ids(m["cohort"]["n"])
    train_ids, test_ids = m["split"]["train"], m["split"]["test"]
    test_set = set(test_ids)
    all_train_weights = sorted({w for c in m["configurations"] for w in c["weights"]})
    weak_weights = sorted(
        {w for c in m["configurations"] if c["labelling"] == "weak" for w in c["weights"] if w != ref_w}
    )

    # fold plan and leakage guard come before any expensive work
    cohort_ga = {
        sid: p.ga
        for sid, p in zip(ids, cohort_params(m["cohort"]["n"], tuple(m["cohort"]["ga_range"]), m["cohort"]["seed"]))
    }
    k = min(m["folds"]["k"], len(train_ids)) if train_ids else 1
    if m["folds"].get("assignment") is not None:
        plan = FoldPlan(m["folds"]["k"], dict(m["folds"]["assignment"]))
    else:
        plan = FoldPlan.stratified({s: cohort_ga[s] for s in train_ids}, k)
    check_leakage([], plan, test_ids)

    jobs = _cohort_jobs(
        m,
        m["cohort"],
        m["simulation"],
        rec,
        ids,
        lambda s: [ref_w] if s in test_set else sorted(set(all_train_weights) | {ref_w}),
        lambda s: [] if s in test_set else weak_weights,
    )
    log.info("reconstructing %d in-domain subjects", len(jobs))
    subj = dict(zip(ids, _pmap(_subject_job, jobs, threads)))

    configs = []
    for c in m["configurations"]:
        items = []
        for sid in train_ids:
            s = subj[sid]
            for w in c["weights"]:
                weak = c["labelling"] == "weak" and w != ref_w
                items.append(
                    TrainingItem(
                        subject=sid,
                        key=output_name(sid, rec["convention"], w).replace(".nii.gz", ""),
                        volume=s["recons"][w],
                        labels=s["weak"][w] if weak else s["labels"],
                        labelling="weak" if weak else "manual",
                    )
                )
        configs.append(TrainingConfiguration(c["name"], items))
    check_leakage(configs, plan, test_ids)

    tr = m["training"]
    schedule = TrainingSchedule(
        epochs=tr["epochs"],
        patches_per_epoch=tr["patches_per_epoch"],
        augment=AugmentConfig(**_augment_kwargs(tr["augment"], m["seed"])),
        patch=PatchSpec((tr["patch_size"],) * 3),
    )
    fcfg = FeatureConfig.from_dict(_merge(FeatureConfig().to_dict(), tr["features"]))
    infer_spec = PatchSpec((m["inference"]["patch_size"],) * 3, m["inference"]["overlap"])
    cache: dict = {}
    ensembles = {}
    folds_record = {"plan": plan.to_dict(), "configurations": {}}
    for c in configs:
        log.info("training %s on %d volumes", c.name, len(c.items))
        cv = run_cv(c, plan, schedule, fcfg, seed=m["seed"], stats_cache=cache)
        ensembles[c.name] = cv.models
        folds_record["configurations"][c.name] = {
            "summary": c.summary(),
            "training_keys": cv.training_keys,
            "model_sha256": [mdl.digest() for mdl in cv.models],
        }
        if m["outputs"]["volumes"]:
            for i, mdl in enumerate(cv.models):
                mdl.save(out / "models" / f"{_slug(c.name)}_fold{i}.mrseg")
    write_json(folds_record, out / "folds.json")

    provenance = []
    tasks = []
    if test_ids:
        tasks.append(
            (
                "in-domain",
                [(sid, cohort_ga[sid], subj[sid]["recons"][ref_w], subj[sid]["labels"]) for sid in test_ids],
                rec,
            )
        )
    ood = m.get("out_of_domain")
    if ood is not None:
        ood_ids = subject_ids(ood["cohort"]["n"], "ood")
        orec = ood["reconstruction"]
        ojobs = _cohort_jobs(
            m, ood["cohort"], ood["simulation"], orec, ood_ids, lambda s: [orec["reference_weight"]], lambda s: []
        )
        log.info("reconstructing %d out-of-domain subjects", len(ojobs))
        ores = _pmap(_subject_job, ojobs, threads)
        mapping = ood.get("merge_classes") or {}
        entries = []
        for sid, job, r in zip(ood_ids, ojobs, ores):
            gt = merge_classes(r["labels"], mapping) if mapping else r["labels"]
            entries.append((sid, job["params"].ga, r["recons"][orec["reference_weight"]], gt))
        tasks.append(("out-of-domain", entries, orec))

    if m["outputs"]["volumes"]:
        for sid in ids:
            s = subj[sid]
            for w, v in s["recons"].items():
                name = output_name(sid, rec["convention"], w)
                write_volume(v, out / "recon" / name, descrip=f"{rec['regularizer']} {rec['convention']}={w:g}")
                provenance.append(_prov(name, "recon", sid, jobs[ids.index(sid)], rec, w))

    per_subject = []
    reports_by = {}
    for task, entries, trec in tasks:
        log.info("inference and evaluation: %s, %d subjects", task, len(entries))
        for c in configs:
            reps = []
            for sid, ga, vol, gt in entries:
                _, pred = sliding_window_predict(vol, ensembles[c.name], infer_spec)
                reps.append(evaluate(pred, gt, sid, ga))
                if m["outputs"]["volumes"]:
                    name = f"{sid}_task-{task}_model-{_slug(c.name)}_dseg.nii.gz"
                    write_labels(pred, out / "pred" / name)
                    provenance.append(
                        {
                            "file": f"pred/{name}",
                            "kind": "prediction",
                            "subject": sid,
                            "convention": trec["convention"],
                            "weight": trec["reference_weight"],
                            "configuration": c.name,
                            "folds": list(range(plan.k)),
                        }
                    )
            reports_by[(task, c.name)] = reps
            per_subject.extend(_report_rows(task, c.name, reps))

    stats = _statistics(m, reports_by, [t[0] for t in tasks], [c.name for c in configs])
    table = _table(reports_by, [t[0] for t in tasks], configs, stats)
    strata = _strata(m, reports_by)

    write_text(rows_to_csv(table, list(table[0]) if table else ["task"]), out / "table.csv")
    subj_cols = list(per_subject[0]) if per_subject else ["task"]
    write_text(rows_to_csv(per_subject, subj_cols), out / "subjects.csv")
    write_text(rows_to_csv(strata, list(strata[0]) if strata else ["task"]), out / "ga_strata.csv")
    weak_rows = _weak_rows(ids, subj, rec["convention"])
    write_text(rows_to_csv(weak_rows, WEAK_COLUMNS), out / "weak_labels.csv")
    write_json(stats, out / "stats.json")
    write_json(provenance, out / "provenance.json")
    manifest_sha = hashlib.sha256(dumps_json(m).encode()).hexdigest()
    report = {
        "name": m["name"],
        "version": __version__,
        "manifest_sha256": manifest_sha,
        "elapsed_s": round(time.perf_counter() - t0, 2),
        "table": table,
        "stats": stats,
        "recon_summaries": {sid: subj[sid]["summaries"] for sid in ids},
    }
    write_json(report, out / "report.json")
    return report


WEAK_COLUMNS = ["subject", "convention", "weight", "rx_deg", "ry_deg", "rz_deg", "tx_mm", "ty_mm", "tz_mm", "dsc_vs_truth"]


def _weak_rows(ids, subj, convention) -> list[dict]:
    """One row per propagated labelling: registration found and agreement with the phantom labels."""
    rows = []
    for sid in ids:
        for w, a in sorted(subj[sid].get("weak_audit", {}).items()):
            t = a["transform"]
            rows.append(
                {"subject": sid, "convention": convention, "weight": float(w), "dsc_vs_truth": a["dsc"]}
                | dict(zip(WEAK_COLUMNS[3:6], t.rotation_deg))
                | dict(zip(WEAK_COLUMNS[6:9], (float(x) for x in t.translation)))
            )
    return rows


def _augment_kwargs(d: dict, seed: int) -> dict:
    kw = dict(d)
    for key in ("flip_prob", "scale_range"):
        if key in kw and isinstance(kw[key], list):
            kw[key] = tuple(kw[key])
    kw.setdefault("seed", seed)
    return kw


def _slug(name: str) -> str:
    return name.lower().replace(" ", "-")


def _prov(name, kind, sid, job, rec, w) -> dict:
    return {
        "file": f"{kind}/{name}",
        "kind": kind,
        "subject": sid,
        "subject_seed": job["params"].seed,
        "simulation_seed": job["sim_seed"],
        "regularizer": rec["regularizer"],
        "convention": rec["convention"],
        "weight": w,
    }


def _statistics(m, reports_by, tasks, names) -> dict:
    """Paired tests of every non-baseline configuration against Baseline, Bonferroni-corrected."""
    test = m["statistics"]["test"]
    alpha = m["statistics"]["alpha"]
    raw = []
    for task in tasks:
        base = {r.subject: r for r in reports_by[(task, "Baseline")]}
        for name in names:
            if name == "Baseline":
                continue
            other = {r.subject: r for r in reports_by[(task, name)]}
            for metric in ("dsc", "assd"):
                subs = [
                    s
                    for s in sorted(base)
                    if getattr(base[s], f"mean_{metric}") is not None and getattr(other[s], f"mean_{metric}") is not None
                ]
                x = [getattr(other[s], f"mean_{metric}") for s in subs]
                y = [getattr(base[s], f"mean_{metric}") for s in subs]
                entry = {"task": task, "configuration": name, "metric": metric, "n": len(subs)}
                if len(subs) >= 5:
                    res = compare(x, y, test)
                    entry.update(res.to_dict())
                    entry["mean_difference"] = float(np.mean(np.subtract(x, y)))
                else:
                    entry.update({"p_value": None, "note": "fewer than 5 paired subjects"})
                raw.append(entry)
    testable = [e for e in raw if e["p_value"] is not None]
    corrected = bonferroni([e["p_value"] for e in testable], len(testable)) if testable else []
    for e, pc in zip(testable, corrected):
        e["p_corrected"] = pc
        e["significant"] = pc < alpha
    return {"test": test, "alpha": alpha, "correction": "bonferroni", "m": len(testable), "comparisons": raw}


def _table(reports_by, tasks, configs, stats) -> list[dict]:
    """One row per (task, configuration): mean and sd of the overall and per-class scores."""
    lookup = {(e["task"], e["configuration"], e["metric"]): e for e in stats["comparisons"]}
    rows = []
    for task in tasks:
        for c in configs:
            reps = reports_by[(task, c.name)]
            row = {
                "task": task,
                "configuration": c.name,
                "training_subjects": len(c.subjects),
                "training_volumes": len(c.items),
                "test_subjects": len(reps),
            }
            row["dsc_mean"], row["dsc_sd"] = _mean_sd([r.mean_dsc for r in reps])
            row["assd_mean"], row["assd_sd"] = _mean_sd([r.mean_assd for r in reps])
            for cls in TISSUE_CLASSES:
                row[f"dsc_{CLASS_NAMES[cls]}"] = _mean_sd([r.dsc[cls] for r in reps])[0]
            for cls in TISSUE_CLASSES:
                row[f"assd_{CLASS_NAMES[cls]}"] = _mean_sd([r.assd[cls] for r in reps])[0]
            for metric in ("dsc", "assd"):
                e = lookup.get((task, c.name, metric))
                row[f"p_{metric}"] = e.get("p_corrected") if e else None
            rows.append(row)
    return rows


def _strata(m, reports_by) -> list[dict]:
    lo, hi = m["cohort"]["ga_range"]
    width = m["statistics"]["ga_bin_width"]
    edges = ga_bins(lo, hi, width) if hi > lo else [lo, lo + width]
    rows = []
    for (task, name), reps in reports_by.items():
        for b in stratify_by_ga(reps, edges):
            rows.append({"task": task, "configuration": name, **b})
    return rows
