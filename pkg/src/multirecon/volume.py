"""Volumes, label maps, rigid transforms and the resampling routines built on them.

World coordinates are millimetres. A :class:`Grid` maps voxel indices to world
points through a 4x4 affine restricted to rotation plus axis-aligned scale.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .errors import DegenerateIntensityError, GeometryError, ParameterError, SchemaError

N_CLASSES = 8
CLASS_NAMES = {
    0: "background",
    1: "CSF",
    2: "cGM",
    3: "WM",
    4: "ventricles",
    5: "cerebellum",
    6: "dGM",
    7: "brainstem",
}
TISSUE_CLASSES = tuple(range(1, N_CLASSES))

_SNAP = 1e-9


@dataclass(frozen=True, eq=False)
class Grid:
    """Voxel lattice: ``dims`` voxels of size ``spacing`` placed by ``affine``."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    affine: np.ndarray = field(repr=False)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        affine = np.array(self.affine, dtype=float)
        if len(dims) != 3 or min(dims) <= 0:
            raise GeometryError(f"grid dims must be three positive integers, got {self.dims}")
        if len(spacing) != 3 or not all(np.isfinite(spacing)) or min(spacing) <= 0:
            raise GeometryError(f"grid spacing must be strictly positive, got {self.spacing}")
        if affine.shape != (4, 4) or not np.all(np.isfinite(affine)):
            raise GeometryError("affine must be a finite 4x4 matrix")
        if not np.allclose(affine[3], [0, 0, 0, 1]):
            raise GeometryError("affine last row must be (0, 0, 0, 1)")
        col_norms = np.linalg.norm(affine[:3, :3], axis=0)
        if not np.allclose(col_norms, spacing, rtol=1e-6):
            raise GeometryError("affine column norms disagree with spacing")
        rot = affine[:3, :3] / col_norms
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-6):
            raise GeometryError("affine must be rotation plus axis-aligned scale (no shear)")
        affine.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "affine", affine)

    @classmethod
    def centered(cls, dims, spacing) -> "Grid":
        """Axis-aligned grid whose centre sits at the world origin."""
        dims = tuple(int(d) for d in dims)
        if np.isscalar(spacing):
            spacing = (spacing,) * 3
        spacing = tuple(float(s) for s in spacing)
        if len(dims) != 3 or min(dims) <= 0:
            raise GeometryError(f"invalid dims {dims}")
        if min(spacing) <= 0:
            raise GeometryError(f"invalid spacing {spacing}")
        affine = np.eye(4)
        affine[:3, :3] = np.diag(spacing)
        affine[:3, 3] = -0.5 * (np.array(dims) - 1) * np.array(spacing)
        return cls(dims, spacing, affine)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.dims

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    @property
    def fov(self) -> np.ndarray:
        """Physical extent (mm) along each voxel axis."""
        return np.array(self.dims) * np.array(self.spacing)

    def same_as(self, other: "Grid", atol: float = 1e-6) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, atol=atol)
            and np.allclose(self.affine, other.affine, atol=atol)
        )

    def world_coordinates(self) -> np.ndarray:
        """World position of every voxel centre, shape ``(3, nx, ny, nz)``."""
        idx = np.indices(self.dims, dtype=float).reshape(3, -1)
        world = self.affine[:3, :3] @ idx + self.affine[:3, 3:4]
        return world.reshape((3,) + self.dims)

    def subgrid(self, origin, size) -> "Grid":
        """Grid of a box of ``size`` voxels starting at voxel ``origin``."""
        affine = np.array(self.affine)
        affine[:3, 3] = self.affine[:3, :3] @ np.asarray(origin, float) + self.affine[:3, 3]
        return Grid(tuple(size), self.spacing, affine)

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "spacing": list(self.spacing),
            "affine": np.asarray(self.affine).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Grid":
        return cls(tuple(d["dims"]), tuple(d["spacing"]), np.array(d["affine"]))


def _check_finite(data: np.ndarray) -> None:
    if not np.all(np.isfinite(data)):
        raise ValueError("volume data contains NaN or Inf")


@dataclass(frozen=True, eq=False)
class Volume:
    """Scalar intensity image on a :class:`Grid`. Data are stored as float64."""

    data: np.ndarray = field(repr=False)
    grid: Grid

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.shape != self.grid.dims:
            raise GeometryError(f"data shape {data.shape} does not match grid dims {self.grid.dims}")
        _check_finite(data)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @classmethod
    def centered(cls, data, spacing) -> "Volume":
        data = np.asarray(data)
        return cls(data, Grid.centered(data.shape, spacing))

    @property
    def dims(self):
        return self.grid.dims

    @property
    def spacing(self):
        return self.grid.spacing

    @property
    def affine(self):
        return self.grid.affine

    def with_data(self, data) -> "Volume":
        return Volume(data, self.grid)


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Integer tissue classes on a :class:`Grid`.

    ``max_class`` is 7 for the tissue schema; label maps read from foreign
    schemas (e.g. with an extra corpus callosum class) may be built with a
    larger bound and then harmonised with ``merge_classes``.
    """

    labels: np.ndarray = field(repr=False)
    grid: Grid
    max_class: int = N_CLASSES - 1

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.shape != self.grid.dims:
            raise GeometryError(f"label shape {labels.shape} does not match grid dims {self.grid.dims}")
        if labels.dtype.kind == "f":
            if not np.all(np.isfinite(labels)) or np.any(labels != np.round(labels)):
                raise SchemaError("label map contains non-integer values")
        if labels.size and (labels.min() < 0 or labels.max() > self.max_class):
            raise SchemaError(
                f"label values must lie in 0..{self.max_class}, found {labels.min()}..{labels.max()}"
            )
        labels = labels.astype(np.uint8)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def dims(self):
        return self.grid.dims

    @property
    def spacing(self):
        return self.grid.spacing

    @property
    def affine(self):
        return self.grid.affine

    def classes(self) -> set[int]:
        return set(int(c) for c in np.unique(self.labels))

    def with_labels(self, labels) -> "LabelMap":
        return LabelMap(labels, self.grid, self.max_class)


@dataclass(frozen=True)
class RigidTransform:
    """Rotation (Euler angles in radians, extrinsic x-y-z) followed by translation in mm.

    Maps a point ``p`` to ``R p + t`` with ``R = Rz @ Ry @ Rx``. Rotation is
    about the world origin, which is the grid centre for centred grids.
    """

    rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        rot = tuple(float(a) for a in self.rotation)
        tr = tuple(float(a) for a in self.translation)
        if len(rot) != 3 or len(tr) != 3:
            raise ValueError("rotation and translation need three components each")
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(tr))):
            raise ValueError("transform parameters must be finite")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tr)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, float)
        angles = Rotation.from_matrix(m[:3, :3]).as_euler("xyz")
        return cls(tuple(angles), tuple(m[:3, 3]))

    @classmethod
    def from_degrees(cls, rotation_deg, translation) -> "RigidTransform":
        return cls(tuple(np.deg2rad(rotation_deg)), tuple(translation))

    def rotation_matrix(self) -> np.ndarray:
        return Rotation.from_euler("xyz", self.rotation).as_matrix()

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix()
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform points of shape ``(3, ...)``."""
        pts = np.asarray(points, float)
        flat = pts.reshape(3, -1)
        out = self.rotation_matrix() @ flat + np.asarray(self.translation)[:, None]
        return out.reshape(pts.shape)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform.from_matrix(self.matrix() @ other.matrix())

    def inverse(self) -> "RigidTransform":
        return RigidTransform.from_matrix(np.linalg.inv(self.matrix()))

    def is_identity(self, atol: float = 0.0) -> bool:
        return bool(
            np.all(np.abs(self.rotation) <= atol) and np.all(np.abs(self.translation) <= atol)
        )

    @property
    def rotation_deg(self) -> tuple[float, float, float]:
        return tuple(float(a) for a in np.rad2deg(self.rotation))

    def to_dict(self) -> dict:
        """JSON form: angles in degrees, translation in mm."""
        return {"rotation_deg": list(self.rotation_deg), "translation_mm": list(self.translation)}

    @classmethod
    def from_dict(cls, d: dict) -> "RigidTransform":
        return cls.from_degrees(d["rotation_deg"], d["translation_mm"])


def _source_coordinates(src: Grid, target: Grid, transform: RigidTransform | None) -> np.ndarray:
    """Voxel coordinates in ``src`` sampled by each voxel of ``target``."""
    world = target.world_coordinates().reshape(3, -1)
    if transform is not None and not transform.is_identity():
        world = transform.apply(world)
    inv = np.linalg.inv(src.affine)
    coords = inv[:3, :3] @ world + inv[:3, 3:4]
    rounded = np.round(coords)
    near = np.abs(coords - rounded) < _SNAP
    coords[near] = rounded[near]
    return coords


def _sample(data: np.ndarray, coords: np.ndarray, order: int, dims) -> np.ndarray:
    out = ndimage.map_coordinates(data, coords, order=order, mode="constant", cval=0)
    return out.reshape(dims)


def warp_volume(v: Volume, t: RigidTransform | None, target: Grid, mode: str = "linear") -> Volume:
    """Sample ``v`` at ``t(p)`` for every world point ``p`` of ``target``.

    ``t`` maps output space into the space of ``v``; out-of-field voxels are 0.
    """
    order = {"linear": 1, "nearest": 0}.get(mode)
    if order is None:
        raise ValueError(f"unknown interpolation mode {mode!r}")
    if (t is None or t.is_identity()) and target.same_as(v.grid, atol=0):
        return Volume(np.array(v.data), target)
    coords = _source_coordinates(v.grid, target, t)
    return Volume(_sample(v.data, coords, order, target.dims), target)


def resample(v: Volume, target: Grid, mode: str = "linear") -> Volume:
    """Resample ``v`` onto ``target`` (trilinear or nearest, zero outside)."""
    if not isinstance(target, Grid):
        target = Grid(*target)
    return warp_volume(v, None, target, mode)


def warp_labels(l: LabelMap, t: RigidTransform | None, target: Grid) -> LabelMap:
    """Nearest-neighbour label warp; voxels mapping outside ``l`` become background."""
    if (t is None or t.is_identity()) and target.same_as(l.grid, atol=0):
        return LabelMap(np.array(l.labels), target, l.max_class)
    coords = _source_coordinates(l.grid, target, t)
    out = _sample(l.labels, coords, 0, target.dims)
    return LabelMap(out, target, l.max_class)


def support_mask(v: Volume, labels: LabelMap | None = None) -> np.ndarray:
    if labels is not None:
        return labels.labels != 0
    return v.data != 0


ROBUST_FOREGROUND = 0.2  # fraction of the [p1, p99] intensity range


def robust_foreground(data: np.ndarray) -> np.ndarray:
    """Voxels above ``p1 + 0.2 * (p99 - p1)``.

    The rule is invariant under positive affine intensity maps, so the mask
    survives a z-score unchanged.
    """
    lo, hi = np.percentile(data, [1.0, 99.0])
    return data > lo + ROBUST_FOREGROUND * (hi - lo)


def normalize(v: Volume, labels: LabelMap | None = None, mode: str = "support") -> Volume:
    """Z-score intensities over the brain support.

    ``mode="support"``: the support is ``labels != 0`` when a label map is
    given, else the nonzero voxels of ``v``; voxels outside it are set to 0,
    which makes the operation idempotent.

    ``mode="robust"``: moments come from :func:`robust_foreground` and the
    affine map is applied to every voxel. This tolerates noisy or
    interpolated backgrounds and is idempotent as well.
    """
    if mode == "support":
        mask = support_mask(v, labels)
    elif mode == "robust":
        mask = robust_foreground(v.data)
    else:
        raise ParameterError(f"unknown normalisation mode {mode!r}")
    vals = v.data[mask]
    if vals.size < 2 or np.ptp(vals) == 0:
        raise DegenerateIntensityError("normalisation needs at least two distinct support intensities")
    if mode == "robust":
        out = (v.data - vals.mean()) / vals.std()
        vals = out[mask]
        return v.with_data((out - vals.mean()) / vals.std())
    out = np.zeros_like(v.data)
    out[mask] = (vals - vals.mean()) / vals.std()
    # second pass removes round-off left by the first
    vals = out[mask]
    out[mask] = (vals - vals.mean()) / vals.std()
    return v.with_data(out)


def smooth(v: Volume, sigma_vox: float) -> Volume:
    return v.with_data(ndimage.gaussian_filter(v.data, sigma_vox, mode="nearest"))


def downsample2(v: Volume) -> Volume:
    """Gaussian smoothing followed by factor-2 decimation; the affine follows the new lattice."""
    sm = ndimage.gaussian_filter(v.data, 1.0, mode="constant")
    data = sm[::2, ::2, ::2]
    affine = np.array(v.affine)
    affine[:3, :3] = v.affine[:3, :3] * 2
    grid = Grid(data.shape, tuple(2 * s for s in v.spacing), affine)
    return Volume(data, grid)
