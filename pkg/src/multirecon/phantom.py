"""Synthetic fetal-brain-like phantoms with exact tissue labels.

Anatomy is a nest of analytic ellipsoids and a cylinder expressed in
coordinates normalised by the brain's semi-axes; the brain scale grows
linearly with gestational age, so every structure grows with it.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .errors import ParameterError
from .volume import Grid, LabelMap, Volume

GA_RANGE = (21.0, 35.0)
CC_CLASS = 8

# T2w-like ordering: CSF brightest, WM mid, grey matter darker.
DEFAULT_INTENSITIES = {
    1: (1.00, 0.03),
    2: (0.38, 0.03),
    3: (0.62, 0.03),
    4: (0.92, 0.03),
    5: (0.48, 0.03),
    6: (0.42, 0.03),
    7: (0.53, 0.03),
    CC_CLASS: (0.56, 0.03),
}


@dataclass(frozen=True)
class PhantomParams:
    ga: float = 28.0
    seed: int = 0
    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: float = 1.1
    class_intensities: dict = field(default_factory=lambda: dict(DEFAULT_INTENSITIES))
    bias_amplitude: float = 0.2
    texture_sigma: float = 1.0  # voxels; correlation length of within-class texture
    with_cc: bool = False  # add a corpus callosum label (class 8) inside the WM

    @property
    def grid(self) -> Grid:
        return Grid.centered(self.dims, self.spacing)


def brain_scale(ga: float) -> float:
    """Brain semi-axis as a fraction of the half field of view."""
    lo, hi = GA_RANGE
    return 0.66 + 0.26 * (ga - lo) / (hi - lo)


def _shape_jitter(seed: int) -> dict:
    # seed-dependent but GA-independent, so class volumes stay monotone in GA
    rng = np.random.default_rng([seed, 7])
    return {
        "aspect": 1.0 + rng.uniform(-0.04, 0.04, 3),
        "vent": 1.0 + rng.uniform(-0.12, 0.12, 2),
        "fold_phase": rng.uniform(0, 2 * np.pi, 2),
        "fold_amp": rng.uniform(0.015, 0.03),
    }


def _ellipsoid(u, center, semi, growth: float = 1.0):
    """Ellipsoid test in brain-normalised coordinates ``u``.

    With ``growth = k > 1`` the region is the union of the ellipsoid seen at
    every brain scale between the smallest GA and the current one, i.e. some
    ``m`` in ``[1, k]`` has ``m * u`` inside. That union only grows with GA, so
    off-centre structures keep monotone voxel counts on a fixed lattice.
    """
    a = sum((u[i] / semi[i]) ** 2 for i in range(3))
    b = sum(u[i] * center[i] / semi[i] ** 2 for i in range(3))
    c = sum((center[i] / semi[i]) ** 2 for i in range(3))
    m = np.clip(b / np.maximum(a, 1e-300), 1.0, max(growth, 1.0))
    return a * m * m - 2.0 * b * m + c <= 1.0


def phantom_labels(p: PhantomParams) -> LabelMap:
    grid = p.grid
    jit = _shape_jitter(p.seed)
    half = 0.5 * float(np.min(grid.fov))
    semi = half * brain_scale(p.ga) * np.array([0.80, 0.95, 0.80]) * jit["aspect"]
    world = grid.world_coordinates()
    u = world / semi[:, None, None, None]
    r = np.sqrt((u**2).sum(axis=0))

    # low-order "folding" modulation of the cortical boundary
    az = np.arctan2(u[1], u[0])
    el = np.arctan2(u[2], np.hypot(u[0], u[1]))
    fold = jit["fold_amp"] * np.cos(6 * az + jit["fold_phase"][0]) * np.cos(4 * el + jit["fold_phase"][1])

    t_csf, t_gm = 0.13, 0.13
    inner = r <= 1.0 - t_csf
    lab = np.zeros(grid.dims, np.uint8)
    lab[r <= 1.0] = 1
    lab[inner] = 2
    lab[r <= 1.0 - t_csf - t_gm + fold] = 3
    lab[~inner & (lab != 0)] = 1

    k = brain_scale(p.ga) / brain_scale(GA_RANGE[0])
    dgm = _ellipsoid(u, (0.17, -0.05, -0.08), (0.15, 0.22, 0.15), k) | _ellipsoid(
        u, (-0.17, -0.05, -0.08), (0.15, 0.22, 0.15), k
    )
    lab[dgm & inner] = 6
    vs = jit["vent"]
    vent = _ellipsoid(u, (0.22, 0.05, 0.14), (0.11 * vs[0], 0.36, 0.14), k) | _ellipsoid(
        u, (-0.22, 0.05, 0.14), (0.11 * vs[1], 0.36, 0.14), k
    )
    lab[vent & inner] = 4
    if p.with_cc:
        cc = (np.abs(u[0]) <= 0.28) & (u[1] >= -0.30) & (u[1] <= 0.36) & (u[2] >= 0.30) & (u[2] <= 0.39)
        lab[cc & (lab == 3)] = CC_CLASS
    cereb = _ellipsoid(u, (0.0, -0.55, -0.50), (0.48, 0.26, 0.27), k)
    lab[cereb & inner] = 5
    stem = _ellipsoid(u, (0.0, -0.12, -0.55), (0.13, 0.13, 0.45), k)
    lab[stem & inner] = 7
    return LabelMap(lab, grid, max_class=CC_CLASS if p.with_cc else 7)


def _bias_field(grid: Grid, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    if amplitude == 0:
        return np.ones(grid.dims)
    phases = rng.uniform(0, 2 * np.pi, 3)
    axes = [np.arange(n) / n for n in grid.dims]
    f = np.ones(grid.dims)
    for i, (ax, ph) in enumerate(zip(axes, phases)):
        shape = [1, 1, 1]
        shape[i] = -1
        f = f * np.cos(np.pi * ax + ph).reshape(shape)
    return 1.0 + amplitude * f


def generate_phantom(p: PhantomParams) -> tuple[Volume, LabelMap]:
    """Return ``(intensity volume, label map)`` for the given parameters."""
    lo, hi = GA_RANGE
    if not (lo <= p.ga <= hi):
        raise ParameterError(f"ga must lie in [{lo}, {hi}], got {p.ga}")
    if p.bias_amplitude < 0 or p.bias_amplitude >= 1:
        raise ParameterError("bias_amplitude must lie in [0, 1)")
    labels = phantom_labels(p)
    rng = np.random.default_rng([p.seed, int(round(p.ga * 1000))])
    lab = labels.labels
    img = np.zeros(lab.shape)
    for cls in sorted(int(c) for c in np.unique(lab)):
        if cls == 0:
            continue
        mean, sd = p.class_intensities[cls]
        mask = lab == cls
        noise = rng.standard_normal(lab.shape)
        if sd > 0:
            m = mask.astype(float)
            num = ndimage.gaussian_filter(noise * m, p.texture_sigma, mode="constant")
            den = ndimage.gaussian_filter(m, p.texture_sigma, mode="constant")
            tex = num[mask] / np.maximum(den[mask], 1e-12)
            s = tex.std()
            tex = (tex - tex.mean()) / s if s > 0 else np.zeros_like(tex)
            img[mask] = mean + sd * tex
        else:
            img[mask] = mean
    img *= _bias_field(labels.grid, p.bias_amplitude, rng)
    return Volume(img, labels.grid), labels


def make_cohort(
    n: int,
    ga_range: tuple[float, float] = GA_RANGE,
    seed: int = 0,
    template: PhantomParams | None = None,
) -> list[tuple[Volume, LabelMap, float]]:
    """``n`` phantoms with GA evenly covering ``ga_range`` and per-subject seeds."""
    return [
        generate_phantom(p) + (p.ga,) for p in cohort_params(n, ga_range, seed, template)
    ]


def cohort_params(n, ga_range=GA_RANGE, seed=0, template=None) -> list[PhantomParams]:
    if n < 1:
        raise ParameterError("cohort size must be at least 1")
    template = template or PhantomParams()
    lo, hi = ga_range
    gas = [0.5 * (lo + hi)] if n == 1 else list(np.linspace(lo, hi, n))
    seeds = [int(s.generate_state(1, np.uint64)[0]) for s in np.random.SeedSequence(seed).spawn(n)]
    return [replace(template, ga=float(g), seed=s) for g, s in zip(gas, seeds)]
