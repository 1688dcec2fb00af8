"""Overlap and surface-distance metrics and the paired statistics used to compare configurations."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage, stats

from .errors import GeometryError, ParameterError, UndefinedDistanceError
from .volume import CLASS_NAMES, TISSUE_CLASSES, LabelMap

SIGNIFICANCE = 0.05
EXACT_MAX_N = 20


def _check_pair(pred: LabelMap, truth: LabelMap) -> None:
    if not pred.grid.same_as(truth.grid):
        raise GeometryError("prediction and ground truth live on different grids")


def dice(pred: LabelMap, truth: LabelMap, class_id: int) -> float:
    """``2|P & T| / (|P| + |T|)``; 1.0 when the class is absent from both."""
    _check_pair(pred, truth)
    p = pred.labels == class_id
    t = truth.labels == class_id
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & t).sum()) / denom


def surface(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with at least one 6-neighbour outside the mask (grid edge counts as outside)."""
    eroded = ndimage.binary_erosion(mask, structure=ndimage.generate_binary_structure(3, 1), border_value=0)
    return mask & ~eroded


def _directed(src: np.ndarray, dst: np.ndarray, spacing) -> np.ndarray:
    """Distance from each ``src`` voxel to the nearest ``dst`` voxel (mm)."""
    dt = ndimage.distance_transform_edt(~dst, sampling=spacing)
    return dt[src]


def assd(pred: LabelMap, truth: LabelMap, class_id: int) -> float:
    """Average symmetric surface distance in mm, pooled over both surfaces."""
    _check_pair(pred, truth)
    p = pred.labels == class_id
    t = truth.labels == class_id
    if not p.any() or not t.any():
        raise UndefinedDistanceError(f"class {class_id} is empty in {'prediction' if not p.any() else 'truth'}")
    sp, st = surface(p), surface(t)
    d1 = _directed(sp, st, pred.spacing)
    d2 = _directed(st, sp, pred.spacing)
    return float((d1.sum() + d2.sum()) / (d1.size + d2.size))


@dataclass
class TissueReport:
    subject: str
    ga: float | None
    dsc: dict[int, float]
    assd: dict[int, float | None]
    mean_dsc: float = field(init=False)
    mean_assd: float | None = field(init=False)

    def __post_init__(self):
        self.mean_dsc = float(np.mean([self.dsc[c] for c in TISSUE_CLASSES]))
        vals = [self.assd[c] for c in TISSUE_CLASSES if self.assd.get(c) is not None]
        self.mean_assd = float(np.mean(vals)) if vals else None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dsc"] = {CLASS_NAMES[c]: v for c, v in self.dsc.items()}
        d["assd"] = {CLASS_NAMES[c]: v for c, v in self.assd.items()}
        return d


def evaluate(pred: LabelMap, truth: LabelMap, subject: str = "", ga: float | None = None) -> TissueReport:
    """Per-class DSC and ASSD over the seven tissue classes.

    ASSD is ``None`` (missing) when either mask is empty.
    """
    dsc = {c: dice(pred, truth, c) for c in TISSUE_CLASSES}
    dist = {}
    for c in TISSUE_CLASSES:
        try:
            dist[c] = assd(pred, truth, c)
        except UndefinedDistanceError:
            dist[c] = None
    return TissueReport(subject, ga, dsc, dist)


@dataclass
class TestResult:
    statistic: float
    p_value: float
    n: int
    n_nonzero: int
    method: str
    degenerate: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def _midranks(a: np.ndarray) -> np.ndarray:
    return stats.rankdata(a, method="average")


def signed_rank_null_counts(doubled_ranks: np.ndarray) -> np.ndarray:
    """Number of sign assignments giving each value of the doubled positive-rank sum.

    Index ``k`` holds the count of assignments with ``2 * W+ == k``. Working
    with doubled ranks keeps midranks integral.
    """
    r = np.asarray(doubled_ranks, dtype=np.int64)
    counts = np.zeros(int(r.sum()) + 1, dtype=object)
    counts[0] = 1
    top = 0
    for v in r:
        new = counts.copy()
        new[v : top + v + 1] += counts[: top + 1]
        counts = new
        top += int(v)
    return counts


def wilcoxon_paired(x, y, method: str = "auto") -> TestResult:
    """Two-sided Wilcoxon signed-rank test on the paired differences ``x - y``.

    Zero differences are dropped and tied magnitudes get midranks. The null
    distribution is enumerated exactly for up to 20 non-zero pairs, otherwise
    a normal approximation with tie-corrected variance is used.
    """
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    if x.shape != y.shape or x.ndim != 1:
        raise ParameterError("paired samples must be 1-D arrays of equal length")
    if x.size < 5:
        raise ParameterError("the paired test needs at least 5 pairs")
    d = x - y
    d = d[d != 0]
    n = int(d.size)
    if n == 0:
        return TestResult(0.0, 1.0, int(x.size), 0, "degenerate", degenerate=True)
    ranks = _midranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if method == "auto":
        method = "exact" if n <= EXACT_MAX_N else "normal"
    if method == "exact":
        doubled = np.rint(2 * ranks).astype(np.int64)
        counts = signed_rank_null_counts(doubled)
        k = int(round(2 * w_plus))
        total = 2**n
        lower = sum(counts[: k + 1])
        upper = sum(counts[k:])
        p = min(1.0, 2 * float(min(lower, upper)) / total)
    elif method == "normal":
        mean = n * (n + 1) / 4.0
        _, tie_counts = np.unique(np.abs(d), return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - float((tie_counts**3 - tie_counts).sum()) / 48.0
        if var <= 0:
            return TestResult(w_plus, 1.0, int(x.size), n, "normal", degenerate=True)
        z = (w_plus - mean) / math.sqrt(var)
        p = min(1.0, 2 * stats.norm.sf(abs(z)))
    else:
        raise ParameterError(f"unknown method {method!r}")
    return TestResult(w_plus, float(p), int(x.size), n, method)


def rank_sum_test(x, y) -> TestResult:
    """Unpaired two-sided Wilcoxon rank-sum (Mann-Whitney U) test; alternate to the paired test."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    if x.size < 5 or y.size < 5:
        raise ParameterError("the rank-sum test needs at least 5 samples per group")
    if np.all(x == x[0]) and np.all(y == x[0]):
        return TestResult(0.0, 1.0, int(x.size), 0, "rank-sum", degenerate=True)
    res = stats.mannwhitneyu(x, y, alternative="two-sided")
    return TestResult(float(res.statistic), float(res.pvalue), int(x.size), int(x.size + y.size), "rank-sum")


def compare(x, y, test: str = "signed-rank") -> TestResult:
    if test == "signed-rank":
        return wilcoxon_paired(x, y)
    if test == "rank-sum":
        return rank_sum_test(x, y)
    raise ParameterError(f"unknown test {test!r}")


def bonferroni(p, m: int) -> list[float]:
    """``min(1, p * m)`` for every p-value."""
    if m < 1:
        raise ParameterError("number of comparisons must be >= 1")
    out = []
    for v in np.atleast_1d(np.asarray(p, float)):
        if not (0.0 <= v <= 1.0):
            raise ParameterError(f"p-value {v} outside [0, 1]")
        out.append(min(1.0, float(v) * m))
    return out


def ga_bins(lo: float = 21.0, hi: float = 35.0, step: float = 2.0) -> list[float]:
    n = int(round((hi - lo) / step))
    return [lo + i * step for i in range(n + 1)]


def stratify_by_ga(reports: list[TissueReport], bins) -> list[dict]:
    """Mean overall DSC/ASSD per GA bin; the last bin includes its right edge.

    Empty bins report ``None`` means rather than zeros.
    """
    edges = list(bins)
    if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ParameterError("bin edges must be increasing with at least two entries")
    out = []
    for i, (lo, hi) in enumerate(zip(edges, edges[1:])):
        last = i == len(edges) - 2
        sel = [
            r
            for r in reports
            if r.ga is not None and lo <= r.ga and (r.ga <= hi if last else r.ga < hi)
        ]
        assds = [r.mean_assd for r in sel if r.mean_assd is not None]
        out.append(
            {
                "ga_lo": lo,
                "ga_hi": hi,
                "n": len(sel),
                "mean_dsc": float(np.mean([r.mean_dsc for r in sel])) if sel else None,
                "mean_assd": float(np.mean(assds)) if assds else None,
            }
        )
    return out


def rows_to_csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k)) for k in columns})
    return buf.getvalue()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return v
