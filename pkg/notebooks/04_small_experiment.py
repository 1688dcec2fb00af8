"""
A reduced end-to-end experiment
===============================

The default manifest compares a segmenter trained on reference
reconstructions only with one trained on every weight of the sweep, on held
out subjects and on a cohort reconstructed with a different pipeline. This
script runs a shrunken copy that finishes in well under a minute; drop the
overrides to run the full 40-subject version.
"""

import tempfile

from multirecon.experiment import default_manifest, run_experiment

manifest = default_manifest(
    cohort={"n": 10, "dims": [32, 32, 32]},
    split={"n_test": 3},
    folds={"k": 3},
    training={"patch_size": 16},
    inference={"patch_size": 16},
    out_of_domain={"cohort": {"n": 6}},
    outputs={"volumes": False},
)

with tempfile.TemporaryDirectory() as out:
    report = run_experiment(manifest, out)

for row in report["table"]:
    print(
        f"{row['task']:>14s} {row['configuration']:>20s} volumes {row['training_volumes']:4d} "
        f"DSC {row['dsc_mean']:.3f} ASSD {row['assd_mean']:.3f}"
    )
print(f"elapsed {report['elapsed_s']} s")
