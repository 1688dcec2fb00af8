"""Command-line entry point: ``multirecon <command> ...``.

Exit codes: 0 success, 2 invalid input (bad flags, manifest, files or
geometry), 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .augment import PatchSpec, sliding_window_predict
from .errors import (
    DegenerateIntensityError,
    DivergenceError,
    LeakageError,
    MultiReconError,
    NoOverlapError,
    SchemaError,
)
from .experiment import default_manifest, run_experiment, validate_manifest
from .forward import AcquisitionModel, LRStack, simulate_stacks
from .metrics import bonferroni, compare, evaluate, rows_to_csv
from .nifti import (
    dumps_json,
    read_json,
    read_labels,
    read_volume,
    write_json,
    write_labels,
    write_text,
    write_volume,
)
from .phantom import CC_CLASS, PhantomParams, cohort_params, generate_phantom
from .registration import propagate_labels, register_rigid
from .segmenter import (
    CONFIGURATION_NAMES,
    FeatureConfig,
    FoldPlan,
    GaussianSegmenter,
    TrainingConfiguration,
    TrainingItem,
    TrainingSchedule,
    run_cv,
)
from .solver import CONVENTIONS, REGULARIZERS, ReconConfig, multi_reconstruct, output_name
from .volume import CLASS_NAMES, TISSUE_CLASSES, Grid, RigidTransform

log = logging.getLogger("multirecon")

NUMERICAL_ERRORS = (DivergenceError, DegenerateIntensityError, NoOverlapError, ArithmeticError)


def _stem(path) -> str:
    name = Path(path).name
    for ext in (".nii.gz", ".nii", ".json"):
        if name.endswith(ext):
            return name[: -len(ext)]
    return name


def _sidecar(path) -> Path:
    return Path(path).with_name(_stem(path) + ".json")


# -- commands --


def cmd_phantom(a) -> int:
    tmpl = PhantomParams(dims=tuple(a.dims), spacing=a.spacing, with_cc=a.with_cc)
    params = cohort_params(a.n, tuple(a.ga_range), a.seed, tmpl)
    out = Path(a.output_dir)
    subjects = []
    for i, p in enumerate(params):
        sid = f"sub-{i + 1:03d}"
        v, l = generate_phantom(p)
        write_volume(v, out / f"{sid}_T2w.nii.gz", descrip=f"phantom ga={p.ga:.2f}")
        write_labels(l, out / f"{sid}_dseg.nii.gz")
        subjects.append(
            {
                "subject": sid,
                "ga": p.ga,
                "seed": p.seed,
                "volume": f"{sid}_T2w.nii.gz",
                "labels": f"{sid}_dseg.nii.gz",
            }
        )
    write_json(
        {
            "kind": "cohort",
            "seed": a.seed,
            "ga_range": list(a.ga_range),
            "dims": list(a.dims),
            "spacing": a.spacing,
            "with_cc": a.with_cc,
            "subjects": subjects,
        },
        out / "cohort.json",
    )
    return 0


def cmd_simulate(a) -> int:
    v = read_volume(a.volume)
    template = AcquisitionModel(
        in_plane_spacing=a.in_plane,
        slice_thickness=a.slice_thickness,
        psf_fwhm_through=a.psf_through,
        psf_fwhm_inplane=a.psf_inplane,
    )
    stacks = simulate_stacks(
        v, a.n_stacks, (a.motion_deg, a.motion_mm), a.noise, a.seed, template, per_slice=a.per_slice
    )
    subject = a.subject or _stem(a.volume).split("_")[0]
    out = Path(a.output_dir)
    for k, s in enumerate(stacks):
        name = f"{subject}_stack-{k + 1}_{s.model.orientation}.nii.gz"
        write_volume(s.volume, out / name)
        write_json(
            {
                "kind": "lr-stack",
                "source": str(a.volume),
                "seed": a.seed,
                "model": s.model.to_dict(),
                "hr_grid": s.hr_grid.to_dict(),
            },
            _sidecar(out / name),
        )
    return 0


def _load_stacks(paths) -> list[LRStack]:
    stacks = []
    for p in paths:
        side = _sidecar(p)
        if not side.exists():
            raise SchemaError(f"{p}: missing JSON sidecar {side.name}")
        meta = read_json(side)
        stacks.append(
            LRStack(read_volume(p), AcquisitionModel.from_dict(meta["model"]), Grid.from_dict(meta["hr_grid"]))
        )
    return stacks


def _recon(a, weights) -> int:
    stacks = _load_stacks(a.stacks)
    transforms = [RigidTransform()] * len(stacks) if a.ignore_motion else None
    if a.transforms:
        transforms = [RigidTransform.from_dict(read_json(t)) for t in a.transforms]
    cfg = ReconConfig(
        regularizer=a.regularizer,
        weight_convention=a.convention,
        weight_value=weights[0],
        max_iters=a.iters,
        tolerance=a.tol,
        hr_spacing=a.hr_spacing,
    )
    subject = a.subject or _stem(a.stacks[0]).split("_")[0]
    out = Path(a.output_dir)
    entries = []
    for w, r in multi_reconstruct(stacks, transforms, cfg, weights):
        name = output_name(subject, a.convention, w)
        write_volume(r.volume, out / name, descrip=f"{a.regularizer} {a.convention}={w:g}")
        entries.append({"file": name, **r.summary(), "objective_trace": list(r.objective_trace)})
    write_json(
        {"kind": "reconstruction", "subject": subject, "stacks": [str(s) for s in a.stacks], "results": entries},
        out / f"{subject}_sweep.json",
    )
    return 0


def cmd_reconstruct(a) -> int:
    return _recon(a, [a.weight])


def cmd_multirecon(a) -> int:
    return _recon(a, a.weights)


def cmd_register(a) -> int:
    moving, fixed = read_volume(a.moving), read_volume(a.fixed)
    res = register_rigid(moving, fixed, levels=a.levels, max_evals=a.max_evals, order=a.order)
    out = Path(a.output_dir)
    name = f"{_stem(a.moving)}_to_{_stem(a.fixed)}_xfm.json"
    write_json({"kind": "rigid-transform", "moving": str(a.moving), "fixed": str(a.fixed), **res.to_dict()}, out / name)
    return 0


def cmd_propagate(a) -> int:
    labels = read_labels(a.labels, max_class=CC_CLASS)
    src, dst = read_volume(a.source), read_volume(a.target)
    lab, reg = propagate_labels(labels, src, dst, return_registration=True, levels=a.levels, order=a.order)
    out = Path(a.output_dir)
    name = f"{_stem(a.target)}_desc-weak_dseg.nii.gz"
    write_labels(lab, out / name)
    write_json(
        {"kind": "weak-labels", "labels": str(a.labels), "source": str(a.source), "target": str(a.target), **reg.to_dict()},
        _sidecar(out / name),
    )
    return 0


def cmd_train(a) -> int:
    """Manifest: {"configurations": {name: [{"subject", "volume", "labels", "ga", "labelling"}]}}."""
    man = read_json(a.manifest)
    base = Path(a.manifest).parent
    confs = man.get("configurations", {})
    if a.configuration not in CONFIGURATION_NAMES:
        raise SchemaError(f"unknown configuration {a.configuration!r}; expected one of {CONFIGURATION_NAMES}")
    if a.configuration not in confs:
        raise SchemaError(f"manifest has no configuration {a.configuration!r}")
    items, ga = [], {}
    for e in confs[a.configuration]:
        v = read_volume(base / e["volume"])
        l = read_labels(base / e["labels"])
        items.append(TrainingItem(e["subject"], _stem(e["volume"]), v, l, e.get("labelling", "manual")))
        ga[e["subject"]] = float(e.get("ga", 0.0))
    held_out = set(man.get("test_subjects", []))
    leaked = sorted(held_out & set(ga))
    if leaked:
        raise LeakageError(f"held-out subjects {leaked} listed for training")
    config = TrainingConfiguration(a.configuration, items)
    plan = FoldPlan.stratified(ga, min(a.k, len(ga)))
    schedule = TrainingSchedule(epochs=a.epochs, patches_per_epoch=a.patches, patch=PatchSpec((a.patch_size,) * 3))
    cv = run_cv(config, plan, schedule, FeatureConfig(), seed=a.seed)
    out = Path(a.output_dir)
    slug = a.configuration.lower()
    files = []
    for i, m in enumerate(cv.models):
        name = f"{slug}_fold{i}.mrseg"
        m.save(out / name)
        files.append({"file": name, "fold": i, "training_volumes": cv.training_keys[i], "sha256": m.digest()})
    write_json({"kind": "models", "configuration": a.configuration, "plan": plan.to_dict(), "models": files}, out / f"{slug}_models.json")
    return 0


def cmd_infer(a) -> int:
    v = read_volume(a.volume)
    models = [GaussianSegmenter.load(p) for p in a.models]
    probs, labels = sliding_window_predict(v, models, PatchSpec((a.patch_size,) * 3, a.overlap))
    out = Path(a.output_dir)
    name = f"{_stem(a.volume)}_dseg.nii.gz"
    write_labels(labels, out / name)
    write_json(
        {"kind": "prediction", "volume": str(a.volume), "models": [str(m) for m in a.models],
         "patch_size": a.patch_size, "overlap": a.overlap},
        _sidecar(out / name),
    )
    if a.save_probabilities:
        np.save(out / f"{_stem(a.volume)}_probseg.npy", probs.astype(np.float32))
    return 0


def _report_row(r, configuration="") -> dict:
    row = {"subject": r.subject, "configuration": configuration, "ga": r.ga, "mean_dsc": r.mean_dsc, "mean_assd": r.mean_assd}
    for c in TISSUE_CLASSES:
        row[f"dsc_{CLASS_NAMES[c]}"] = r.dsc[c]
        row[f"assd_{CLASS_NAMES[c]}"] = r.assd[c]
    return row


def cmd_evaluate(a) -> int:
    if len(a.pred) != len(a.truth):
        raise SchemaError("--pred and --truth need the same number of files")
    rows = []
    for p, t in zip(a.pred, a.truth):
        r = evaluate(read_labels(p), read_labels(t), subject=_stem(t).split("_")[0], ga=None)
        rows.append(_report_row(r, a.configuration))
    out = Path(a.output_dir)
    write_text(rows_to_csv(rows, list(rows[0])), out / f"{a.name}.csv")
    write_json(rows, out / f"{a.name}.json")
    return 0


def _read_rows(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def cmd_stats(a) -> int:
    """Paired comparison of two configurations in an evaluate/experiment per-subject CSV."""
    rows = []
    for p in a.reports:
        rows.extend(_read_rows(p))
    results = []
    for metric in a.metrics:
        col = f"mean_{metric}"
        by = {}
        for r in rows:
            if r.get(col, "") == "":
                continue
            by.setdefault(r["configuration"], {})[r["subject"]] = float(r[col])
        if a.a not in by or a.b not in by:
            raise SchemaError(f"configurations {a.a!r} and {a.b!r} must both appear in the reports")
        subs = sorted(set(by[a.a]) & set(by[a.b]))
        res = compare([by[a.a][s] for s in subs], [by[a.b][s] for s in subs], a.test)
        results.append({"metric": metric, "a": a.a, "b": a.b, **res.to_dict()})
    for r, pc in zip(results, bonferroni([r["p_value"] for r in results], a.comparisons or len(results))):
        r["p_adjusted"] = pc
    out = Path(a.output_dir)
    write_json({"test": a.test, "correction": "bonferroni", "results": results}, out / "stats.json")
    write_text(rows_to_csv(results, list(results[0])), out / "stats.csv")
    return 0


def cmd_experiment(a) -> int:
    if a.print_default:
        sys.stdout.write(dumps_json(default_manifest()))
        return 0
    if a.manifest is None:
        raise SchemaError("--manifest is required (or use --print-default)")
    if a.validate_only:
        validate_manifest(read_json(a.manifest))
        return 0
    report = run_experiment(a.manifest, a.output_dir, threads=a.threads, seed=a.seed_override)
    for row in report["table"]:
        log.info(
            "%-14s %-20s DSC %.4f  ASSD %s",
            row["task"],
            row["configuration"],
            row["dsc_mean"] if row["dsc_mean"] is not None else float("nan"),
            "n/a" if row["assd_mean"] is None else f"{row['assd_mean']:.4f}",
        )
    return 0


# -- parser --


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="multirecon", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    ap.add_argument("--threads", type=int, default=1, help="worker processes for per-subject stages")
    ap.add_argument("--output-dir", default=".", help="directory for all outputs")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="synthetic labelled cohort")
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--ga-range", type=float, nargs=2, default=(21.0, 35.0))
    p.add_argument("--dims", type=int, nargs=3, default=(64, 64, 64))
    p.add_argument("--spacing", type=float, default=1.1)
    p.add_argument("--with-cc", action="store_true", help="add a corpus callosum class (8)")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("simulate", help="orthogonal low-resolution stacks from an HR volume")
    p.add_argument("--volume", required=True)
    p.add_argument("--subject")
    p.add_argument("--n-stacks", type=int, default=3)
    p.add_argument("--motion-deg", type=float, default=2.0)
    p.add_argument("--motion-mm", type=float, default=1.0)
    p.add_argument("--per-slice", action="store_true", help="independent motion for every slice")
    p.add_argument("--noise", type=float, default=0.03, help="noise sd relative to the volume sd")
    p.add_argument("--in-plane", type=float, default=1.1)
    p.add_argument("--slice-thickness", type=float, default=3.3)
    p.add_argument("--psf-through", type=float)
    p.add_argument("--psf-inplane", type=float)
    p.set_defaults(func=cmd_simulate)

    for name, func in (("reconstruct", cmd_reconstruct), ("multirecon", cmd_multirecon)):
        p = sub.add_parser(name, help="super-resolution reconstruction" + (" sweep" if name == "multirecon" else ""))
        p.add_argument("--stacks", nargs="+", required=True, help="stack NIfTI files with JSON sidecars")
        p.add_argument("--subject")
        if name == "reconstruct":
            p.add_argument("--weight", type=float, default=0.75)
        else:
            p.add_argument("--weights", type=float, nargs="+", default=[0.1, 0.75, 1.5, 3.0])
        p.add_argument("--convention", choices=CONVENTIONS, default="lambda")
        p.add_argument("--regularizer", choices=REGULARIZERS, default="huber-tv")
        p.add_argument("--iters", type=int, default=100)
        p.add_argument("--tol", type=float, default=1e-6)
        p.add_argument("--hr-spacing", type=float, default=None)
        p.add_argument(
            "--ignore-motion", action="store_true", help="treat stacks as motion-free instead of using the sidecar motion"
        )
        p.add_argument("--transforms", nargs="+", help="one transform JSON per stack")
        p.set_defaults(func=func)

    p = sub.add_parser("register", help="rigid registration of two volumes")
    p.add_argument("--moving", required=True)
    p.add_argument("--fixed", required=True)
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--max-evals", type=int, default=300)
    p.add_argument("--order", type=int, choices=(1, 3), default=1, help="cost interpolation order")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("propagate", help="weak labels by registration")
    p.add_argument("--labels", required=True)
    p.add_argument("--source", required=True, help="volume the labels are defined on")
    p.add_argument("--target", required=True)
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--order", type=int, choices=(1, 3), default=1)
    p.set_defaults(func=cmd_propagate)

    p = sub.add_parser("train", help="cross-validated segmenter training")
    p.add_argument("--manifest", required=True)
    p.add_argument("--configuration", required=True, help=" | ".join(CONFIGURATION_NAMES))
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--epochs", type=int, default=2)
    p.add_argument("--patches", type=int, default=2, help="patches per epoch and volume")
    p.add_argument("--patch-size", type=int, default=32)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="sliding-window ensemble segmentation")
    p.add_argument("--volume", required=True)
    p.add_argument("--models", nargs="+", required=True)
    p.add_argument("--patch-size", type=int, default=32)
    p.add_argument("--overlap", type=float, default=0.5)
    p.add_argument("--save-probabilities", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="DSC and ASSD per tissue class")
    p.add_argument("--pred", nargs="+", required=True)
    p.add_argument("--truth", nargs="+", required=True)
    p.add_argument("--configuration", default="")
    p.add_argument("--name", default="evaluation")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("stats", help="paired test between two configurations")
    p.add_argument("--reports", nargs="+", required=True, help="per-subject CSV files")
    p.add_argument("--a", required=True)
    p.add_argument("--b", default="Baseline")
    p.add_argument("--metrics", nargs="+", choices=("dsc", "assd"), default=["dsc", "assd"])
    p.add_argument("--test", choices=("signed-rank", "rank-sum"), default="signed-rank")
    p.add_argument("--comparisons", type=int, help="Bonferroni m (default: number of metrics)")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("experiment", help="run a full manifest-driven experiment")
    p.add_argument("--manifest")
    p.add_argument("--print-default", action="store_true", help="print the default manifest and exit")
    p.add_argument("--validate-only", action="store_true")
    p.set_defaults(func=cmd_experiment)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    a = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if a.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    # the global --seed only overrides a manifest's seed when given explicitly
    given = argv if argv is not None else sys.argv[1:]
    a.seed_override = a.seed if any(x == "--seed" or x.startswith("--seed=") for x in given) else None
    try:
        return a.func(a)
    except NUMERICAL_ERRORS as e:
        log.error("numerical failure: %s", e)
        return 3
    except (MultiReconError, ValueError, OSError, KeyError) as e:
        log.error("%s: %s", type(e).__name__, e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
