"""Segmenter contract, a Gaussian feature classifier, and the cross-validation driver.

The classifier fits one multivariate Gaussian per tissue class over a small
bank of local features and predicts a softmax of the class log-likelihoods.
Training reduces each volume to additive sufficient statistics, so folds that
share volumes share work and fold models are exact sums of per-volume terms.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
import tempfile
import warnings
from abc import ABC, abstractmethod
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.special import logsumexp

from .augment import AugmentConfig, PatchSpec, augment_sample, sample_patches
from .errors import CorruptFileError, DegenerateIntensityError, PlanError, UnsupportedFormatError
from .volume import N_CLASSES, LabelMap, Volume, normalize

log = logging.getLogger(__name__)

MODEL_MAGIC = b"MRSEGMDL"
MODEL_VERSION = 1
CONFIGURATION_NAMES = ("Baseline", "MIALSRTK-augmented", "NiftyMIC-augmented")
MISSING_CLASS_PENALTY = 50.0  # nats below the worst present class


class Segmenter(ABC):
    """Anything that maps an intensity patch to per-voxel class probabilities."""

    @abstractmethod
    def predict_proba(self, patch: Volume) -> np.ndarray:
        """Probabilities of shape ``(8,) + patch.dims``, summing to one per voxel."""

    @abstractmethod
    def to_bytes(self) -> bytes:
        ...

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        with os.fdopen(fd, "wb") as f:
            f.write(self.to_bytes())
        os.replace(tmp, path)


@dataclass(frozen=True)
class FeatureConfig:
    """Local feature bank: z-scored intensity, two local means, a local sd, world coordinates."""

    mean_sigmas: tuple[float, ...] = (1.0, 2.5)
    sd_sigma: float = 1.0
    coord_scale_mm: float = 30.0
    use_coords: bool = True
    ridge: float = 1e-4

    @property
    def n_features(self) -> int:
        return 1 + len(self.mean_sigmas) + 1 + (3 if self.use_coords else 0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean_sigmas"] = list(self.mean_sigmas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureConfig":
        d = dict(d)
        d["mean_sigmas"] = tuple(d["mean_sigmas"])
        return cls(**d)


def compute_features(patch: Volume, cfg: FeatureConfig) -> np.ndarray:
    """Feature matrix of shape ``(n_features, n_voxels)``.

    Intensities are used as given; callers z-score whole volumes first so
    that a patch and the volume it came from share one intensity scale.
    """
    z = patch.data
    feats = [z]
    for s in cfg.mean_sigmas:
        feats.append(ndimage.gaussian_filter(z, s, mode="nearest"))
    m = ndimage.gaussian_filter(z, cfg.sd_sigma, mode="nearest")
    m2 = ndimage.gaussian_filter(z * z, cfg.sd_sigma, mode="nearest")
    feats.append(np.sqrt(np.maximum(m2 - m * m, 0.0)))
    if cfg.use_coords:
        feats.extend(patch.grid.world_coordinates() / cfg.coord_scale_mm)
    return np.stack([f.ravel() for f in feats])


def _zscore(v: Volume) -> Volume:
    try:
        return normalize(v, mode="robust")
    except DegenerateIntensityError:
        return v


@dataclass
class ClassStats:
    """Additive per-class sufficient statistics: counts, feature sums and outer-product sums."""

    counts: np.ndarray
    sums: np.ndarray
    outer: np.ndarray

    @classmethod
    def zeros(cls, n_features: int) -> "ClassStats":
        return cls(
            np.zeros(N_CLASSES),
            np.zeros((N_CLASSES, n_features)),
            np.zeros((N_CLASSES, n_features, n_features)),
        )

    def add(self, feats: np.ndarray, labels: np.ndarray) -> None:
        lab = labels.ravel()
        for c in range(N_CLASSES):
            sel = lab == c
            k = int(sel.sum())
            if k == 0:
                continue
            x = feats[:, sel]
            self.counts[c] += k
            self.sums[c] += x.sum(axis=1)
            self.outer[c] += x @ x.T

    def __add__(self, other: "ClassStats") -> "ClassStats":
        return ClassStats(self.counts + other.counts, self.sums + other.sums, self.outer + other.outer)


class GaussianSegmenter(Segmenter):
    """Quadratic-discriminant classifier over :func:`compute_features`."""

    def __init__(self, feature_config: FeatureConfig, counts, means, covariances):
        self.feature_config = feature_config
        self.counts = np.asarray(counts, float)
        self.means = np.asarray(means, float)
        self.covariances = np.asarray(covariances, float)
        self.present = self.counts > 0
        total = self.counts.sum()
        self.log_prior = np.where(self.present, np.log(np.maximum(self.counts, 1) / max(total, 1)), 0.0)
        self._prec = []
        self._logdet = []
        for c in range(N_CLASSES):
            if self.present[c]:
                sign, logdet = np.linalg.slogdet(self.covariances[c])
                self._prec.append(np.linalg.inv(self.covariances[c]))
                self._logdet.append(logdet)
            else:
                self._prec.append(None)
                self._logdet.append(0.0)

    @classmethod
    def from_stats(cls, stats: ClassStats, cfg: FeatureConfig) -> "GaussianSegmenter":
        nf = cfg.n_features
        means = np.zeros((N_CLASSES, nf))
        covs = np.tile(np.eye(nf), (N_CLASSES, 1, 1))
        missing = [c for c in range(N_CLASSES) if stats.counts[c] == 0]
        if missing:
            warnings.warn(f"classes {missing} absent from training data; they get a negligible floor probability")
        for c in range(N_CLASSES):
            n = stats.counts[c]
            if n == 0:
                continue
            mu = stats.sums[c] / n
            cov = stats.outer[c] / n - np.outer(mu, mu)
            cov = 0.5 * (cov + cov.T) + cfg.ridge * np.eye(nf)
            means[c] = mu
            covs[c] = cov
        return cls(cfg, stats.counts, means, covs)

    def compute_features(self, patch: Volume) -> np.ndarray:
        return compute_features(patch, self.feature_config)

    def predict_features(self, feats: np.ndarray, shape) -> np.ndarray:
        n = feats.shape[1]
        ll = np.empty((N_CLASSES, n))
        nf = feats.shape[0]
        for c in range(N_CLASSES):
            if not self.present[c]:
                continue
            d = feats - self.means[c][:, None]
            maha = np.sum(d * (self._prec[c] @ d), axis=0)
            ll[c] = -0.5 * (maha + self._logdet[c] + nf * np.log(2 * np.pi)) + self.log_prior[c]
        if not self.present.all():
            floor = ll[self.present].min(axis=0) - MISSING_CLASS_PENALTY
            ll[~self.present] = floor
        probs = np.exp(ll - logsumexp(ll, axis=0))
        return probs.reshape((N_CLASSES,) + tuple(shape))

    def predict_proba(self, patch: Volume) -> np.ndarray:
        return self.predict_features(self.compute_features(patch), patch.dims)

    def predict(self, v: Volume) -> LabelMap:
        """Whole-volume prediction after z-scoring ``v``."""
        v = _zscore(v)
        return LabelMap(np.argmax(self.predict_proba(v), axis=0).astype(np.uint8), v.grid)

    def to_bytes(self) -> bytes:
        meta = json.dumps(
            {"feature_config": self.feature_config.to_dict(), "n_classes": N_CLASSES}, sort_keys=True
        ).encode()
        body = b"".join(
            np.ascontiguousarray(a, "<f8").tobytes() for a in (self.counts, self.means, self.covariances)
        )
        return MODEL_MAGIC + struct.pack("<II", MODEL_VERSION, len(meta)) + meta + body

    @classmethod
    def from_bytes(cls, blob: bytes) -> "GaussianSegmenter":
        head = len(MODEL_MAGIC) + 8
        if len(blob) < head or blob[: len(MODEL_MAGIC)] != MODEL_MAGIC:
            raise CorruptFileError("not a segmenter model file")
        version, meta_len = struct.unpack("<II", blob[len(MODEL_MAGIC) : head])
        if version != MODEL_VERSION:
            raise UnsupportedFormatError(f"model version {version} is not supported")
        meta = json.loads(blob[head : head + meta_len])
        cfg = FeatureConfig.from_dict(meta["feature_config"])
        nf, k = cfg.n_features, meta["n_classes"]
        arr = np.frombuffer(blob[head + meta_len :], "<f8")
        need = k + k * nf + k * nf * nf
        if arr.size != need:
            raise CorruptFileError("model payload has the wrong size")
        counts = arr[:k]
        means = arr[k : k + k * nf].reshape(k, nf)
        covs = arr[k + k * nf :].reshape(k, nf, nf)
        return cls(cfg, counts, means, covs)

    @classmethod
    def load(cls, path) -> "GaussianSegmenter":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


@dataclass(frozen=True)
class TrainingSchedule:
    """Sampling budget: ``epochs`` augmented draws per volume, ``patches_per_epoch`` patches each."""

    epochs: int = 2
    patches_per_epoch: int = 2
    augment: AugmentConfig = field(default_factory=lambda: AugmentConfig(flip_prob=(0.5, 0.0, 0.0), normalization="robust"))
    patch: PatchSpec = field(default_factory=PatchSpec)


def _volume_seed(seed: int, key: str) -> list[int]:
    h = hashlib.sha256(key.encode()).digest()
    return [int(seed), int.from_bytes(h[:8], "little")]


def volume_statistics(
    v: Volume, l: LabelMap, cfg: FeatureConfig, schedule: TrainingSchedule, seed: int, key: str = ""
) -> ClassStats:
    """Sufficient statistics of one training volume under the sampling schedule.

    The random stream depends only on ``(seed, key)``, never on which other
    volumes share the training set.
    """
    rng = np.random.default_rng(_volume_seed(seed, key))
    stats = ClassStats.zeros(cfg.n_features)
    for _ in range(schedule.epochs):
        av, al = augment_sample(v, l, schedule.augment, rng)
        for patch, lab, _ in sample_patches(av, al, schedule.patch, schedule.patches_per_epoch, rng):
            stats.add(compute_features(patch, cfg), lab.labels)
    return stats


def train_baseline_model(
    pairs,
    features_cfg: FeatureConfig | None = None,
    seed: int = 0,
    schedule: TrainingSchedule | None = None,
) -> GaussianSegmenter:
    """Fit the Gaussian classifier on ``(Volume, LabelMap)`` pairs.

    Without a schedule every pair is used whole and un-augmented.
    """
    cfg = features_cfg or FeatureConfig()
    pairs = list(pairs)
    if not pairs:
        raise ValueError("at least one training pair is required")
    total = ClassStats.zeros(cfg.n_features)
    for i, (v, l) in enumerate(pairs):
        if schedule is None:
            s = ClassStats.zeros(cfg.n_features)
            s.add(compute_features(_zscore(v), cfg), l.labels)
        else:
            s = volume_statistics(v, l, cfg, schedule, seed, key=str(i))
        total = total + s
    return GaussianSegmenter.from_stats(total, cfg)


@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignment: dict

    def __post_init__(self):
        if self.k < 1:
            raise PlanError("k must be >= 1")
        used = Counter(self.assignment.values())
        for f in range(self.k):
            if used.get(f, 0) == 0:
                raise PlanError(f"fold {f} has no subjects")
        if any(f not in range(self.k) for f in used):
            raise PlanError("fold index out of range")

    @classmethod
    def stratified(cls, subjects_ga: dict, k: int = 5) -> "FoldPlan":
        """Round-robin assignment in GA order, so each fold spans the GA range."""
        if len(subjects_ga) < k:
            raise PlanError(f"{len(subjects_ga)} subjects cannot fill {k} folds")
        order = sorted(subjects_ga, key=lambda s: (subjects_ga[s], s))
        return cls(k, {s: i % k for i, s in enumerate(order)})

    def train_subjects(self, fold: int) -> list[str]:
        return sorted(s for s, f in self.assignment.items() if f != fold)

    def held_out(self, fold: int) -> list[str]:
        return sorted(s for s, f in self.assignment.items() if f == fold)

    def to_dict(self) -> dict:
        return {"k": self.k, "assignment": dict(sorted(self.assignment.items()))}


@dataclass(frozen=True, eq=False)
class TrainingItem:
    subject: str
    key: str  # unique volume id, e.g. "sub-003_rec-lambda0.75"
    volume: Volume
    labels: LabelMap
    labelling: str = "manual"  # or "weak"


@dataclass
class TrainingConfiguration:
    name: str
    items: list[TrainingItem]

    @property
    def subjects(self) -> list[str]:
        return sorted({it.subject for it in self.items})

    def summary(self) -> dict:
        labelling = sorted({it.labelling for it in self.items})
        return {
            "name": self.name,
            "subjects": len(self.subjects),
            "volumes": len(self.items),
            "labelling": labelling,
        }


@dataclass
class CVResult:
    models: list[GaussianSegmenter]
    training_keys: list[list[str]]
    plan: FoldPlan


def run_cv(
    config: TrainingConfiguration,
    plan: FoldPlan,
    schedule: TrainingSchedule | None = None,
    features_cfg: FeatureConfig | None = None,
    seed: int = 0,
    stats_cache: dict | None = None,
) -> CVResult:
    """Train one model per fold on every volume whose subject is outside that fold."""
    schedule = schedule or TrainingSchedule()
    cfg = features_cfg or FeatureConfig()
    missing = set(config.subjects) - set(plan.assignment)
    if missing:
        raise PlanError(f"subjects without a fold: {sorted(missing)}")
    cache = stats_cache if stats_cache is not None else {}
    models, keys = [], []
    for fold in range(plan.k):
        # a single fold means no held-out split: the one model sees everything
        if plan.k == 1:
            train = list(config.items)
        else:
            train = [it for it in config.items if plan.assignment[it.subject] != fold]
        if not train:
            raise PlanError(f"fold {fold} leaves no training volumes")
        total = ClassStats.zeros(cfg.n_features)
        for it in sorted(train, key=lambda t: t.key):
            ck = (it.key, it.labelling, cfg, schedule, seed)
            if ck not in cache:
                cache[ck] = volume_statistics(it.volume, it.labels, cfg, schedule, seed, it.key)
            total = total + cache[ck]
        models.append(GaussianSegmenter.from_stats(total, cfg))
        keys.append(sorted(it.key for it in train))
    return CVResult(models, keys, plan)
