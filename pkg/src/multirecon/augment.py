"""Train-time augmentation, patch sampling and sliding-window ensemble inference."""
from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .errors import DegenerateIntensityError, ParameterError
from .volume import N_CLASSES, Grid, LabelMap, Volume, normalize


@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: tuple[float, float, float] = (0.5, 0.5, 0.5)
    max_rotation_deg: float = 10.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    bias_order: int = 3
    bias_amplitude: float = 0.3
    noise_sd_rel: float = 0.05
    seed: int = 0
    normalization: str = "support"  # or "robust", see volume.normalize

    def __post_init__(self):
        fp = self.flip_prob
        if np.isscalar(fp):
            fp = (fp,) * 3
        fp = tuple(float(p) for p in fp)
        if len(fp) != 3 or any(not 0.0 <= p <= 1.0 for p in fp):
            raise ParameterError("flip probabilities must lie in [0, 1]")
        object.__setattr__(self, "flip_prob", fp)
        lo, hi = self.scale_range
        if lo <= 0 or hi < lo:
            raise ParameterError("scale_range must be positive and ordered")
        if self.max_rotation_deg < 0 or self.bias_amplitude < 0 or self.noise_sd_rel < 0:
            raise ParameterError("magnitudes must be non-negative")
        if self.bias_order < 0:
            raise ParameterError("bias_order must be >= 0")

    @classmethod
    def identity(cls, seed: int = 0) -> "AugmentConfig":
        return cls((0.0, 0.0, 0.0), 0.0, (1.0, 1.0), 0, 0.0, 0.0, seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["flip_prob"] = list(self.flip_prob)
        d["scale_range"] = list(self.scale_range)
        return d


@dataclass(frozen=True)
class PatchSpec:
    size: tuple[int, int, int] = (32, 32, 32)
    overlap: float = 0.5

    def __post_init__(self):
        size = self.size
        if np.isscalar(size):
            size = (size,) * 3
        size = tuple(int(s) for s in size)
        if len(size) != 3 or min(size) < 8:
            raise ParameterError("patch size must be >= 8 along every axis")
        if not 0.0 <= self.overlap < 1.0:
            raise ParameterError("overlap must lie in [0, 1)")
        object.__setattr__(self, "size", size)

    @property
    def stride(self) -> tuple[int, int, int]:
        return tuple(max(1, int(round(s * (1.0 - self.overlap)))) for s in self.size)


def _rotation(angles_rad) -> np.ndarray:
    cx, cy, cz = np.cos(angles_rad)
    sx, sy, sz = np.sin(angles_rad)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def _bias_field(shape, order: int, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    """``exp`` of a random polynomial of total degree ``order`` on [-1, 1]^3.

    The log-field is rescaled so its largest magnitude equals ``amplitude``.
    """
    axes = [np.linspace(-1.0, 1.0, n) for n in shape]
    log_field = np.zeros(shape)
    for i, j, k in itertools.product(range(order + 1), repeat=3):
        if i + j + k > order:
            continue
        c = rng.uniform(-1.0, 1.0)
        log_field += c * (
            axes[0][:, None, None] ** i * axes[1][None, :, None] ** j * axes[2][None, None, :] ** k
        )
    peak = np.abs(log_field).max()
    if peak > 0:
        log_field *= amplitude / peak
    return np.exp(log_field)


def augment_sample(
    v: Volume, l: LabelMap, cfg: AugmentConfig, rng: np.random.Generator | None = None
) -> tuple[Volume, LabelMap]:
    """Random flip, rotation and scaling of both images, then bias field and noise on the intensities.

    The output intensities are z-scored with :func:`normalize`.
    """
    if not v.grid.same_as(l.grid):
        raise ParameterError("volume and labels must share geometry")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    img = np.array(v.data)
    lab = np.array(l.labels)

    for axis, p in enumerate(cfg.flip_prob):
        if rng.random() < p:
            img = np.flip(img, axis)
            lab = np.flip(lab, axis)

    angles = np.deg2rad(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg, 3))
    scale = rng.uniform(*cfg.scale_range)
    if np.any(angles != 0) or scale != 1.0:
        # sample input at centre + R^T (p - centre) / scale, in voxel units
        m = _rotation(angles).T / scale
        centre = (np.array(img.shape) - 1) / 2.0
        offset = centre - m @ centre
        img = ndimage.affine_transform(img, m, offset, order=1, mode="constant", cval=0.0)
        lab = ndimage.affine_transform(lab, m, offset, order=0, mode="constant", cval=0)

    if cfg.bias_amplitude > 0:
        img = img * _bias_field(img.shape, cfg.bias_order, cfg.bias_amplitude, rng)
    if cfg.noise_sd_rel > 0:
        support = img[lab != 0] if np.any(lab != 0) else img
        img = img + rng.normal(0.0, cfg.noise_sd_rel * float(support.std()), img.shape)

    out = Volume(np.ascontiguousarray(img), v.grid)
    try:
        out = normalize(out, mode=cfg.normalization)
    except DegenerateIntensityError:
        pass
    return out, LabelMap(np.ascontiguousarray(lab), l.grid, l.max_class)


def _pad_to(v: Volume, l: LabelMap | None, size) -> tuple[Volume, LabelMap | None]:
    need = [max(0, s - d) for s, d in zip(size, v.dims)]
    if not any(need):
        return v, l
    pad = [(0, n) for n in need]
    dims = tuple(d + n for d, n in zip(v.dims, need))
    grid = Grid(dims, v.spacing, v.affine)
    pv = Volume(np.pad(v.data, pad), grid)
    pl = LabelMap(np.pad(l.labels, pad), grid, l.max_class) if l is not None else None
    return pv, pl


def extract_patch(v: Volume, origin, size) -> Volume:
    sl = tuple(slice(o, o + s) for o, s in zip(origin, size))
    return Volume(v.data[sl], v.grid.subgrid(origin, size))


def sample_patches(
    v: Volume, l: LabelMap, spec: PatchSpec, n: int, rng: np.random.Generator | None = None
) -> list[tuple[Volume, LabelMap, tuple[int, int, int]]]:
    """``n`` random patches; even-numbered draws are forced to contain foreground.

    Volumes smaller than the patch are zero-padded at the high end.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    v, l = _pad_to(v, l, spec.size)
    size = spec.size
    hi = [d - s for d, s in zip(v.dims, size)]
    fg = np.argwhere(l.labels != 0)
    out = []
    for i in range(n):
        if i % 2 == 0 and len(fg):
            c = fg[rng.integers(len(fg))]
            lo_o = [max(0, ci - s + 1) for ci, s in zip(c, size)]
            hi_o = [min(h, ci) for ci, h in zip(c, hi)]
            origin = tuple(int(rng.integers(a, b + 1)) for a, b in zip(lo_o, hi_o))
        else:
            origin = tuple(int(rng.integers(0, h + 1)) for h in hi)
        sl = tuple(slice(o, o + s) for o, s in zip(origin, size))
        grid = v.grid.subgrid(origin, size)
        out.append((Volume(v.data[sl], grid), LabelMap(l.labels[sl], grid, l.max_class), origin))
    return out


def window_origins(dims, spec: PatchSpec) -> list[tuple[int, int, int]]:
    """Window origins covering every voxel; the last window is flush with the far edge."""
    per_axis = []
    for d, s, st in zip(dims, spec.size, spec.stride):
        starts = list(range(0, max(d - s, 0) + 1, st))
        if starts[-1] + s < d:
            starts.append(d - s)
        per_axis.append(starts)
    return list(itertools.product(*per_axis))


def sliding_window_predict(
    v: Volume, models: list, spec: PatchSpec, normalization: str | None = "robust"
) -> tuple[np.ndarray, LabelMap]:
    """Average class probabilities over overlapping windows and over ``models``.

    Returns ``(probabilities with shape (8, nx, ny, nz), argmax label map)``.
    The volume is z-scored once before tiling (``normalization=None`` skips it). Models exposing
    ``feature_config`` and ``predict_features`` share one feature computation
    per window.
    """
    if not models:
        raise ParameterError("at least one model is required")
    if normalization is not None:
        try:
            v = normalize(v, mode=normalization)
        except DegenerateIntensityError:
            pass
    orig_dims = v.dims
    v, _ = _pad_to(v, None, spec.size)
    acc = np.zeros((N_CLASSES,) + v.dims)
    cover = np.zeros(v.dims)
    for origin in window_origins(v.dims, spec):
        patch = extract_patch(v, origin, spec.size)
        sl = tuple(slice(o, o + s) for o, s in zip(origin, spec.size))
        cache = {}
        total = np.zeros((N_CLASSES,) + spec.size)
        for m in models:
            fcfg = getattr(m, "feature_config", None)
            if fcfg is not None and hasattr(m, "predict_features"):
                if fcfg not in cache:
                    cache[fcfg] = m.compute_features(patch)
                total += m.predict_features(cache[fcfg], spec.size)
            else:
                total += m.predict_proba(patch)
        acc[(slice(None),) + sl] += total / len(models)
        cover[sl] += 1.0
    probs = acc / cover
    crop = (slice(None),) + tuple(slice(0, d) for d in orig_dims)
    probs = probs[crop]
    grid = Grid(orig_dims, v.spacing, v.affine)
    labels = LabelMap(np.argmax(probs, axis=0).astype(np.uint8), grid)
    return probs, labels
