"""Minimal NIfTI-1 single-file reader/writer and JSON helpers.

Only little-endian ``.nii``/``.nii.gz`` with datatype 16 (float32
intensities) or 2 (uint8 labels) is supported. The sform carries the affine
and the qform is zeroed. Because header fields are float32, the exact float64
grid is also stored in a comment extension so a write/read round trip
reproduces geometry exactly; readers that ignore extensions still get the
float32 sform.
"""
from __future__ import annotations

import gzip
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import CorruptFileError, SchemaError, UnsupportedFormatError
from .volume import Grid, LabelMap, Volume

HEADER_SIZE = 348
MAGIC = b"n+1\x00"
DT_UINT8 = 2
DT_FLOAT32 = 16
_DTYPES = {DT_UINT8: np.dtype("<u1"), DT_FLOAT32: np.dtype("<f4")}
_EXT_CODE_COMMENT = 6
_EXT_TAG = "multirecon-grid"

header_dtype = np.dtype(
    [
        ("sizeof_hdr", "<i4"),
        ("data_type", "S10"),
        ("db_name", "S18"),
        ("extents", "<i4"),
        ("session_error", "<i2"),
        ("regular", "S1"),
        ("dim_info", "u1"),
        ("dim", "<i2", (8,)),
        ("intent_p1", "<f4"),
        ("intent_p2", "<f4"),
        ("intent_p3", "<f4"),
        ("intent_code", "<i2"),
        ("datatype", "<i2"),
        ("bitpix", "<i2"),
        ("slice_start", "<i2"),
        ("pixdim", "<f4", (8,)),
        ("vox_offset", "<f4"),
        ("scl_slope", "<f4"),
        ("scl_inter", "<f4"),
        ("slice_end", "<i2"),
        ("slice_code", "u1"),
        ("xyzt_units", "u1"),
        ("cal_max", "<f4"),
        ("cal_min", "<f4"),
        ("slice_duration", "<f4"),
        ("toffset", "<f4"),
        ("glmax", "<i4"),
        ("glmin", "<i4"),
        ("descrip", "S80"),
        ("aux_file", "S24"),
        ("qform_code", "<i2"),
        ("sform_code", "<i2"),
        ("quatern_b", "<f4"),
        ("quatern_c", "<f4"),
        ("quatern_d", "<f4"),
        ("qoffset_x", "<f4"),
        ("qoffset_y", "<f4"),
        ("qoffset_z", "<f4"),
        ("srow_x", "<f4", (4,)),
        ("srow_y", "<f4", (4,)),
        ("srow_z", "<f4", (4,)),
        ("intent_name", "S16"),
        ("magic", "S4"),
    ]
)
assert header_dtype.itemsize == HEADER_SIZE


def _is_gz(path) -> bool:
    return str(path).endswith(".gz")


def make_header(grid: Grid, datatype: int, descrip: str = "") -> np.ndarray:
    hdr = np.zeros((), dtype=header_dtype)
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["regular"] = b"r"
    hdr["dim"] = [3, *grid.dims, 1, 1, 1, 1]
    hdr["datatype"] = datatype
    hdr["bitpix"] = _DTYPES[datatype].itemsize * 8
    hdr["pixdim"] = [1.0, *grid.spacing, 1.0, 1.0, 1.0, 1.0]
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["xyzt_units"] = 2  # mm
    hdr["descrip"] = descrip.encode("ascii", "replace")[:79]
    hdr["qform_code"] = 0
    hdr["sform_code"] = 2  # aligned anatomical
    hdr["srow_x"] = grid.affine[0]
    hdr["srow_y"] = grid.affine[1]
    hdr["srow_z"] = grid.affine[2]
    hdr["magic"] = MAGIC
    return hdr


def _extension_bytes(grid: Grid) -> bytes:
    payload = json.dumps({_EXT_TAG: grid.to_dict()}, sort_keys=True).encode()
    esize = 8 + len(payload)
    esize += (-esize) % 16
    payload = payload.ljust(esize - 8, b"\x00")
    return np.array([esize, _EXT_CODE_COMMENT], "<i4").tobytes() + payload


def encode(grid: Grid, array: np.ndarray, datatype: int, descrip: str = "") -> bytes:
    """Serialise a grid and voxel array into NIfTI-1 single-file bytes."""
    hdr = make_header(grid, datatype, descrip)
    ext = _extension_bytes(grid)
    vox_offset = HEADER_SIZE + 4 + len(ext)
    hdr["vox_offset"] = vox_offset
    data = np.asarray(array).astype(_DTYPES[datatype]).tobytes(order="F")
    return hdr.tobytes() + b"\x01\x00\x00\x00" + ext + data


def _atomic_write(path, blob: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if _is_gz(path):
        blob = gzip.compress(blob, compresslevel=6, mtime=0)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _parse_extensions(raw: bytes, vox_offset: int) -> Grid | None:
    if len(raw) < HEADER_SIZE + 4 or raw[HEADER_SIZE] == 0:
        return None
    pos = HEADER_SIZE + 4
    while pos + 8 <= vox_offset:
        esize, ecode = np.frombuffer(raw[pos : pos + 8], "<i4")
        if esize < 8 or pos + esize > vox_offset:
            break
        if ecode == _EXT_CODE_COMMENT:
            body = raw[pos + 8 : pos + esize].rstrip(b"\x00")
            try:
                doc = json.loads(body)
            except ValueError:
                doc = None
            if isinstance(doc, dict) and _EXT_TAG in doc:
                return Grid.from_dict(doc[_EXT_TAG])
        pos += int(esize)
    return None


def decode(raw: bytes) -> tuple[Grid, np.ndarray, np.ndarray]:
    """Parse NIfTI-1 bytes into ``(grid, array, header)``."""
    if len(raw) < HEADER_SIZE:
        raise CorruptFileError(f"file has {len(raw)} bytes, shorter than a NIfTI-1 header")
    hdr = np.frombuffer(raw[:HEADER_SIZE], dtype=header_dtype)[0]
    if int(hdr["sizeof_hdr"]) != HEADER_SIZE:
        if int(hdr["sizeof_hdr"].byteswap()) == HEADER_SIZE:
            raise UnsupportedFormatError("big-endian NIfTI files are not supported")
        raise CorruptFileError("sizeof_hdr is not 348")
    if bytes(hdr["magic"]).ljust(4, b"\x00") != MAGIC:
        raise UnsupportedFormatError(f"unsupported magic {bytes(hdr['magic'])!r}; only single-file n+1")
    datatype = int(hdr["datatype"])
    if datatype not in _DTYPES:
        raise UnsupportedFormatError(f"unsupported datatype code {datatype}")
    dim = hdr["dim"]
    ndim = int(dim[0])
    if ndim < 1 or ndim > 7:
        raise CorruptFileError(f"invalid dim[0]={ndim}")
    if ndim > 3 and any(int(d) > 1 for d in dim[4 : ndim + 1]):
        raise UnsupportedFormatError("multi-frame files are not supported")
    dims = tuple(int(d) if i < ndim else 1 for i, d in enumerate(dim[1:4]))
    if min(dims) <= 0:
        raise CorruptFileError(f"invalid dims {dims}")
    if float(hdr["scl_slope"]) not in (0.0, 1.0) or float(hdr["scl_inter"]) != 0.0:
        raise UnsupportedFormatError("intensity scaling (scl_slope/scl_inter) is not supported")
    vox_offset = int(hdr["vox_offset"])
    if vox_offset < HEADER_SIZE:
        raise CorruptFileError(f"vox_offset {vox_offset} lies inside the header")
    dtype = _DTYPES[datatype]
    nbytes = int(np.prod(dims)) * dtype.itemsize
    if len(raw) < vox_offset + nbytes:
        raise CorruptFileError(f"truncated voxel data: need {vox_offset + nbytes} bytes, have {len(raw)}")
    array = np.frombuffer(raw, dtype=dtype, count=int(np.prod(dims)), offset=vox_offset)
    array = array.reshape(dims, order="F")

    grid = _parse_extensions(raw, vox_offset)
    if grid is None or grid.dims != dims:
        spacing = tuple(float(p) for p in hdr["pixdim"][1:4])
        if int(hdr["sform_code"]) > 0:
            affine = np.eye(4)
            affine[0], affine[1], affine[2] = hdr["srow_x"], hdr["srow_y"], hdr["srow_z"]
            spacing = tuple(np.linalg.norm(affine[:3, :3], axis=0))
        else:
            affine = np.diag([*spacing, 1.0])
        grid = Grid(dims, spacing, affine)
    return grid, array, hdr


def _read_bytes(path) -> bytes:
    with open(path, "rb") as f:
        raw = f.read()
    if _is_gz(path) or raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise CorruptFileError(f"{path}: broken gzip stream ({exc})") from exc
    return raw


def read_volume(path) -> Volume:
    grid, array, hdr = decode(_read_bytes(path))
    if not np.all(np.isfinite(array)):
        raise CorruptFileError(f"{path}: non-finite voxel values")
    return Volume(array.astype(np.float64), grid)


def write_volume(v: Volume, path, descrip: str = "") -> None:
    """Write intensities as float32; values not representable in float32 are rounded."""
    _atomic_write(path, encode(v.grid, v.data, DT_FLOAT32, descrip))


def read_labels(path, max_class: int = 7) -> LabelMap:
    grid, array, hdr = decode(_read_bytes(path))
    if int(hdr["datatype"]) != DT_UINT8:
        # float label files are accepted when every value is an integer
        if np.any(array != np.round(array)):
            raise SchemaError(f"{path}: label file holds non-integer values")
    if array.size and array.max() > max_class:
        raise SchemaError(f"{path}: label value {int(array.max())} exceeds {max_class}")
    return LabelMap(array.astype(np.uint8), grid, max_class)


def write_labels(l: LabelMap, path, descrip: str = "") -> None:
    _atomic_write(path, encode(l.grid, l.labels, DT_UINT8, descrip))


def dumps_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def write_json(obj, path) -> None:
    """Write JSON with sorted keys, atomically."""
    _atomic_write(path, dumps_json(obj).encode())


def write_text(text: str, path) -> None:
    """UTF-8 text, written atomically (CSV reports and the like)."""
    _atomic_write(path, text.encode())


def read_json(path):
    with open(path) as f:
        return json.load(f)
