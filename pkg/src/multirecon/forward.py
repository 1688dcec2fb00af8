"""Slice-stack acquisition model: motion, slice-profile blur and decimation.

For a stack ``k`` the operator is ``A_k = D_k G_k W_k`` where ``W_k`` resamples
the HR volume under the stack's rigid motion (trilinear, zero outside),
``G_k`` is a separable truncated Gaussian whose weights are renormalised at
the boundary, and ``D_k`` averages non-overlapping blocks along each axis.
Every factor is an explicit linear map, so ``apply_adjoint`` is the exact
transpose rather than an approximation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import ndimage

from .errors import GeometryError
from .volume import Grid, RigidTransform, Volume

AXES = {"x": 0, "y": 1, "z": 2}
FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))


@dataclass(frozen=True)
class AcquisitionModel:
    """Geometry and physics of one 2D multi-slice stack.

    ``motion`` is either one transform for the whole stack or a tuple with one
    transform per acquired slice.
    """

    orientation: str = "z"
    in_plane_spacing: float = 1.125
    slice_thickness: float = 3.3
    motion: RigidTransform | tuple = field(default_factory=RigidTransform)
    psf_fwhm_through: float | None = None
    psf_fwhm_inplane: float | None = None
    noise_sd: float = 0.0

    def __post_init__(self):
        if self.orientation not in AXES:
            raise ValueError(f"orientation must be one of x, y, z; got {self.orientation!r}")
        if self.in_plane_spacing <= 0 or self.slice_thickness <= 0:
            raise ValueError("spacings must be positive")
        if self.slice_thickness <= self.in_plane_spacing:
            raise ValueError("slice thickness must exceed the in-plane spacing")
        if isinstance(self.motion, list):
            object.__setattr__(self, "motion", tuple(self.motion))

    @property
    def axis(self) -> int:
        return AXES[self.orientation]

    @property
    def fwhm_through(self) -> float:
        return self.slice_thickness if self.psf_fwhm_through is None else self.psf_fwhm_through

    @property
    def fwhm_inplane(self) -> float:
        return 1.2 * self.in_plane_spacing if self.psf_fwhm_inplane is None else self.psf_fwhm_inplane

    @property
    def per_slice_motion(self) -> bool:
        return isinstance(self.motion, tuple)

    def factors(self, hr: Grid) -> tuple[int, int, int]:
        """Integer decimation factor per axis of ``hr``."""
        h = hr.spacing
        if not np.allclose(h, h[0], rtol=1e-6):
            raise GeometryError(f"HR grid must be isotropic, got spacing {h}")
        out = []
        for a in range(3):
            target = self.slice_thickness if a == self.axis else self.in_plane_spacing
            f = int(round(target / h[a]))
            if f < 1:
                raise GeometryError(
                    f"LR spacing {target} mm is finer than the HR spacing {h[a]} mm along axis {a}"
                )
            out.append(f)
        return tuple(out)

    def lr_grid(self, hr: Grid) -> Grid:
        f = np.array(self.factors(hr))
        dims = tuple(int(math.ceil(n / k)) for n, k in zip(hr.dims, f))
        affine = np.array(hr.affine)
        affine[:3, :3] = hr.affine[:3, :3] * f
        affine[:3, 3] = hr.affine[:3, :3] @ ((f - 1) / 2.0) + hr.affine[:3, 3]
        return Grid(dims, tuple(np.array(hr.spacing) * f), affine)

    def with_motion(self, motion) -> "AcquisitionModel":
        return _replace(self, motion=motion)

    def to_dict(self) -> dict:
        motion = (
            [t.to_dict() for t in self.motion] if self.per_slice_motion else self.motion.to_dict()
        )
        return {
            "orientation": self.orientation,
            "in_plane_spacing": self.in_plane_spacing,
            "slice_thickness": self.slice_thickness,
            "psf_fwhm_through": self.fwhm_through,
            "psf_fwhm_inplane": self.fwhm_inplane,
            "noise_sd": self.noise_sd,
            "motion": motion,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AcquisitionModel":
        m = d.get("motion") or RigidTransform().to_dict()
        motion = tuple(RigidTransform.from_dict(t) for t in m) if isinstance(m, list) else RigidTransform.from_dict(m)
        return cls(
            orientation=d["orientation"],
            in_plane_spacing=d["in_plane_spacing"],
            slice_thickness=d["slice_thickness"],
            motion=motion,
            psf_fwhm_through=d.get("psf_fwhm_through"),
            psf_fwhm_inplane=d.get("psf_fwhm_inplane"),
            noise_sd=d.get("noise_sd", 0.0),
        )


def _replace(obj, **kw):
    from dataclasses import replace

    return replace(obj, **kw)


@dataclass(frozen=True, eq=False)
class LRStack:
    volume: Volume
    model: AcquisitionModel
    hr_grid: Grid

    def __post_init__(self):
        sp = self.volume.spacing
        a = self.model.axis
        if not all(sp[a] > sp[b] for b in range(3) if b != a):
            raise GeometryError("through-plane spacing must exceed in-plane spacing")


def gaussian_kernel(fwhm_mm: float, spacing_mm: float) -> np.ndarray:
    """Sampled Gaussian truncated at 3 sigma, unit sum."""
    sigma = fwhm_mm * FWHM_TO_SIGMA / spacing_mm
    if sigma < 1e-6:
        return np.ones(1)
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=float)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


class StackOperator:
    """Precomputed ``A_k`` for a fixed HR grid; ``forward``/``adjoint`` act on arrays."""

    def __init__(self, model: AcquisitionModel, hr: Grid):
        self.model = model
        self.hr_grid = hr
        self.lr_grid = model.lr_grid(hr)
        self.factors = model.factors(hr)
        self.kernels = []
        self.norms = []
        for a in range(3):
            fwhm = model.fwhm_through if a == model.axis else model.fwhm_inplane
            k = gaussian_kernel(fwhm, hr.spacing[a])
            self.kernels.append(k)
            if k.size > 1:
                n = ndimage.correlate1d(np.ones(hr.dims[a]), k, mode="constant", cval=0.0)
                shape = [1, 1, 1]
                shape[a] = -1
                self.norms.append(n.reshape(shape))
            else:
                self.norms.append(None)
        self.block_starts = [np.arange(0, n, f) for n, f in zip(hr.dims, self.factors)]
        self.block_sizes = [np.diff(np.append(s, n)) for s, n in zip(self.block_starts, hr.dims)]
        self._motion = _motion_table(model, hr, self.lr_grid.dims[model.axis], self.factors[model.axis])

    # motion
    def _warp(self, x):
        if self._motion is None:
            return x
        idx, w = self._motion
        return (w * x.ravel()[idx]).sum(axis=0).reshape(x.shape)

    def _warp_t(self, x):
        if self._motion is None:
            return x
        idx, w = self._motion
        out = np.bincount(idx.ravel(), weights=(w * x.ravel()).ravel(), minlength=x.size)
        return out.reshape(x.shape)

    # blur
    def _blur(self, x):
        for a in range(3):
            k = self.kernels[a]
            if k.size > 1:
                x = ndimage.correlate1d(x, k, axis=a, mode="constant", cval=0.0) / self.norms[a]
        return x

    def _blur_t(self, x):
        for a in (2, 1, 0):
            k = self.kernels[a]
            if k.size > 1:
                x = ndimage.correlate1d(x / self.norms[a], k, axis=a, mode="constant", cval=0.0)
        return x

    # decimation
    def _decimate(self, x):
        for a in range(3):
            if self.factors[a] > 1:
                shape = [1, 1, 1]
                shape[a] = -1
                x = np.add.reduceat(x, self.block_starts[a], axis=a) / self.block_sizes[a].reshape(shape)
        return x

    def _decimate_t(self, y):
        for a in (2, 1, 0):
            if self.factors[a] > 1:
                shape = [1, 1, 1]
                shape[a] = -1
                y = np.repeat(y / self.block_sizes[a].reshape(shape), self.block_sizes[a], axis=a)
        return y

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self._decimate(self._blur(self._warp(np.asarray(x, float))))

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        return self._warp_t(self._blur_t(self._decimate_t(np.asarray(y, float))))


def _motion_table(model: AcquisitionModel, hr: Grid, n_slices: int, factor: int):
    """Trilinear gather table ``(idx, weights)``, each of shape ``(8, N)``; None for no motion."""
    if model.per_slice_motion:
        transforms = model.motion
        if len(transforms) != n_slices:
            raise GeometryError(f"per-slice motion has {len(transforms)} entries for {n_slices} slices")
        if all(t.is_identity() for t in transforms):
            return None
    else:
        if model.motion.is_identity():
            return None
        transforms = None

    world = hr.world_coordinates().reshape(3, -1)
    if transforms is None:
        moved = model.motion.apply(world)
    else:
        slice_of = (np.indices(hr.dims)[model.axis] // factor).ravel()
        moved = np.empty_like(world)
        for j, t in enumerate(transforms):
            sel = slice_of == j
            moved[:, sel] = t.apply(world[:, sel])
    inv = np.linalg.inv(hr.affine)
    q = inv[:3, :3] @ moved + inv[:3, 3:4]
    qr = np.round(q)
    snap = np.abs(q - qr) < 1e-9
    q[snap] = qr[snap]

    base = np.floor(q).astype(np.int64)
    frac = q - base
    dims = np.array(hr.dims)[:, None]
    strides = np.array([hr.dims[1] * hr.dims[2], hr.dims[2], 1])[:, None]
    idx = np.empty((8, q.shape[1]), np.int64)
    w = np.empty((8, q.shape[1]))
    for c in range(8):
        off = np.array([(c >> 2) & 1, (c >> 1) & 1, c & 1])[:, None]
        corner = base + off
        wc = np.prod(np.where(off == 1, frac, 1.0 - frac), axis=0)
        valid = np.all((corner >= 0) & (corner < dims), axis=0)
        idx[c] = np.where(valid, (corner * strides).sum(axis=0), 0)
        w[c] = np.where(valid, wc, 0.0)
    return idx, w


@lru_cache(maxsize=8)
def _cached_operator(model: AcquisitionModel, hr: Grid) -> StackOperator:
    return StackOperator(model, hr)


def operator(model: AcquisitionModel, hr: Grid) -> StackOperator:
    return _cached_operator(model, hr)


def apply(model: AcquisitionModel, x: Volume) -> Volume:
    """Simulate the noise-free LR stack of HR volume ``x``."""
    op = operator(model, x.grid)
    return Volume(op.forward(x.data), op.lr_grid)


def apply_adjoint(model: AcquisitionModel, y: Volume, hr_grid: Grid) -> Volume:
    """Exact transpose of :func:`apply` onto ``hr_grid``."""
    op = operator(model, hr_grid)
    if not y.grid.same_as(op.lr_grid):
        raise GeometryError("LR volume geometry does not match the model's LR grid")
    return Volume(op.adjoint(y.data), hr_grid)


def simulate_stacks(
    x: Volume,
    n_stacks: int = 3,
    motion_sd: tuple[float, float] = (0.0, 0.0),
    noise_sd: float = 0.0,
    seed: int = 0,
    template: AcquisitionModel | None = None,
    per_slice: bool = False,
) -> list[LRStack]:
    """Orthogonal LR stacks (orientations cycle x, y, z) with random rigid motion and noise.

    ``motion_sd`` is ``(degrees, mm)``; noise sd is ``noise_sd`` times the
    intensity sd of ``x``.
    """
    if n_stacks < 1:
        raise ValueError("n_stacks must be at least 1")
    template = template or AcquisitionModel()
    rng = np.random.default_rng(seed)
    deg_sd, mm_sd = motion_sd
    scale = float(np.std(x.data))
    stacks = []
    for k in range(n_stacks):
        orient = "xyz"[k % 3]
        model = _replace(template, orientation=orient, motion=RigidTransform(), noise_sd=noise_sd)
        n_slices = model.lr_grid(x.grid).dims[model.axis]
        count = n_slices if per_slice else 1
        draws = []
        for _ in range(count):
            rot = rng.normal(0.0, deg_sd, 3) if deg_sd > 0 else np.zeros(3)
            tr = rng.normal(0.0, mm_sd, 3) if mm_sd > 0 else np.zeros(3)
            draws.append(RigidTransform.from_degrees(rot, tr))
        model = model.with_motion(tuple(draws) if per_slice else draws[0])
        lr = apply(model, x)
        data = lr.data
        if noise_sd > 0:
            data = data + rng.normal(0.0, noise_sd * scale, data.shape)
        stacks.append(LRStack(lr.with_data(data), model, x.grid))
    return stacks
