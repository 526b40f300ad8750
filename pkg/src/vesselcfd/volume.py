"""Voxel volumes: the in-memory grid plus NIfTI-1 and raw+JSON storage.

Arrays are indexed ``data[i, j, k]`` with ``i`` along x.  On disk the
voxels are written x-fastest, which is Fortran order for that indexing.
"""

from __future__ import annotations

import enum
import gzip
import json
import math
import struct
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage as ndi

from vesselcfd.errors import CapacityError, FormatError, VolumeWriteError

# Refuse volumes whose voxel buffer would exceed this many bytes.
MAX_VOLUME_BYTES = 1 << 34


class VolumeKind(str, enum.Enum):
    BINARY = "binary-mask"
    SCALAR = "scalar"


@dataclass(frozen=True)
class VoxelVolume:
    """Dense 3D grid with physical spacing and origin (both in mm).

    ``data`` is stored read-only; binary masks are held as ``uint8``.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    kind: VolumeKind = VolumeKind.SCALAR

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3D array, got shape {arr.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(spacing) != 3 or not all(math.isfinite(s) and s > 0 for s in spacing):
            raise ValueError(f"spacing must be three positive finite values, got {self.spacing}")
        if len(origin) != 3 or not all(math.isfinite(o) for o in origin):
            raise ValueError(f"origin must be three finite values, got {self.origin}")
        kind = VolumeKind(self.kind)
        if kind is VolumeKind.BINARY:
            if arr.dtype != bool and not np.isin(arr, (0, 1)).all():
                raise ValueError("binary-mask volume contains values other than 0 and 1")
            arr = arr.astype(np.uint8)
        else:
            arr = np.array(arr, copy=True)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "kind", kind)

    @classmethod
    def mask(cls, data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> "VoxelVolume":
        return cls(np.asarray(data).astype(np.uint8), spacing, origin, VolumeKind.BINARY)

    @classmethod
    def scalar(cls, data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> "VoxelVolume":
        return cls(np.asarray(data), spacing, origin, VolumeKind.SCALAR)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def is_binary(self) -> bool:
        return self.kind is VolumeKind.BINARY

    def bool(self) -> np.ndarray:
        return self.data.astype(bool)

    def like(self, data, kind=None) -> "VoxelVolume":
        """New volume on the same grid."""
        return VoxelVolume(data, self.spacing, self.origin, self.kind if kind is None else kind)

    def index_to_mm(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=float)
        return np.asarray(self.origin) + idx * np.asarray(self.spacing)

    def mm_to_index(self, xyz) -> np.ndarray:
        xyz = np.asarray(xyz, dtype=float)
        return (xyz - np.asarray(self.origin)) / np.asarray(self.spacing)

    def voxel_volume_mm3(self) -> float:
        return float(np.prod(self.spacing))

    def header(self) -> "VolumeHeader":
        code = _NIFTI_CODES.get(self.data.dtype.newbyteorder("<"), 0)
        return VolumeHeader(self.dims, self.spacing, self.origin, code, "<")

    def __eq__(self, other):
        if not isinstance(other, VoxelVolume):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.origin == other.origin
            and self.kind == other.kind
            and self.data.dtype == other.data.dtype
            and np.array_equal(self.data, other.data)
        )

    __hash__ = None


@dataclass(frozen=True)
class VolumeHeader:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    datatype_code: int
    byte_order: str = field(default="<")


# ---------------------------------------------------------------- NIfTI-1

_NIFTI_DTYPES = {
    2: np.dtype("u1"),
    4: np.dtype("i2"),
    16: np.dtype("f4"),
    64: np.dtype("f8"),
}
_NIFTI_CODES = {dt: code for code, dt in _NIFTI_DTYPES.items()}
_RAW_DTYPES = {"u8": np.dtype("<u1"), "i16": np.dtype("<i2"), "f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_RAW_NAMES = {dt: name for name, dt in _RAW_DTYPES.items()}

_VOX_OFFSET = 352


def _check_capacity(dims, itemsize):
    nbytes = itemsize
    for n in dims:
        nbytes *= int(n)
    if nbytes > MAX_VOLUME_BYTES or nbytes > sys.maxsize:
        raise CapacityError(f"volume of dims {tuple(dims)} needs {nbytes} bytes")


def _classify(arr: np.ndarray) -> VolumeKind:
    # Float-typed files stay scalar so that save/load keeps their dtype.
    if arr.dtype.kind in "ui" and np.isin(arr, (0, 1)).all():
        return VolumeKind.BINARY
    return VolumeKind.SCALAR


def _f32(x: float) -> float:
    # Header floats are float32; recover the shortest decimal they encode.
    return float(str(np.float32(x)))


def read_nifti_header(raw: bytes) -> tuple[VolumeHeader, int, tuple[float, float]]:
    """Parse a single-file NIfTI-1 header.

    Returns the header, the voxel data offset and the (slope, intercept) pair.
    """
    if len(raw) < 348:
        raise FormatError("file shorter than a NIfTI-1 header")
    for bo in ("<", ">"):
        if struct.unpack(bo + "i", raw[:4])[0] == 348:
            break
    else:
        raise FormatError("sizeof_hdr is not 348")
    if raw[344:348] != b"n+1\x00":
        raise FormatError(f"unsupported NIfTI magic {raw[344:348]!r}")
    dim = struct.unpack(bo + "8h", raw[40:56])
    if not 3 <= dim[0] <= 7 or any(d > 1 for d in dim[4:dim[0] + 1]):
        raise FormatError(f"only 3D volumes are supported, dim={dim}")
    dims = tuple(int(d) for d in dim[1:4])
    if min(dims) < 1:
        raise FormatError(f"non-positive dims {dims}")
    datatype = struct.unpack(bo + "h", raw[70:72])[0]
    if datatype not in _NIFTI_DTYPES:
        raise FormatError(f"unsupported NIfTI datatype code {datatype}")
    pixdim = struct.unpack(bo + "8f", raw[76:108])
    spacing = tuple(_f32(abs(p)) for p in pixdim[1:4])
    if not all(math.isfinite(s) and s > 0 for s in spacing):
        raise FormatError(f"invalid pixdim {pixdim[1:4]}")
    vox_offset = int(struct.unpack(bo + "f", raw[108:112])[0])
    slope, inter = struct.unpack(bo + "2f", raw[112:120])
    qform_code, sform_code = struct.unpack(bo + "2h", raw[252:256])
    if qform_code > 0:
        origin = struct.unpack(bo + "3f", raw[268:280])
    elif sform_code > 0:
        srow = struct.unpack(bo + "12f", raw[280:328])
        origin = (srow[3], srow[7], srow[11])
    else:
        origin = (0.0, 0.0, 0.0)
    header = VolumeHeader(dims, spacing, tuple(_f32(o) for o in origin), int(datatype), bo)
    return header, max(vox_offset, 348), (slope, inter)


def _nifti_bytes(vol: VoxelVolume) -> bytes:
    dt = vol.data.dtype.newbyteorder("<")
    if dt not in _NIFTI_CODES:
        raise VolumeWriteError(f"dtype {vol.data.dtype} has no NIfTI-1 datatype code")
    code = _NIFTI_CODES[dt]
    hdr = bytearray(_VOX_OFFSET)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, *vol.dims, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, code, dt.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *vol.spacing, 1.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(_VOX_OFFSET))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    hdr[123] = 2  # xyzt_units: mm
    struct.pack_into("<2h", hdr, 252, 1, 0)
    struct.pack_into("<3f", hdr, 268, *vol.origin)
    hdr[344:348] = b"n+1\x00"
    body = np.ascontiguousarray(vol.data.astype(dt).ravel(order="F")).tobytes()
    return bytes(hdr) + body


def _load_nifti(path: Path) -> VoxelVolume:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise FormatError(f"corrupt gzip stream in {path}") from exc
    header, offset, (slope, inter) = read_nifti_header(raw)
    dt = _NIFTI_DTYPES[header.datatype_code].newbyteorder(header.byte_order)
    _check_capacity(header.dims, dt.itemsize)
    n = int(np.prod(header.dims))
    need = offset + n * dt.itemsize
    if len(raw) < need:
        raise FormatError(f"truncated voxel data: {len(raw)} of {need} bytes")
    flat = np.frombuffer(raw, dtype=dt, count=n, offset=offset)
    arr = flat.reshape(header.dims, order="F").astype(dt.newbyteorder("="))
    if slope not in (0.0, 1.0) or inter != 0.0:
        arr = arr.astype(np.float64) * (slope if slope != 0 else 1.0) + inter
    if not all(math.isfinite(o) for o in header.origin):
        raise FormatError(f"non-finite origin {header.origin}")
    return VoxelVolume(arr, header.spacing, header.origin, _classify(arr))


# ---------------------------------------------------------------- raw + JSON

def _raw_paths(path: Path) -> tuple[Path, Path]:
    stem = path.with_suffix("")
    return stem.with_suffix(".json"), stem.with_suffix(".raw")


def _load_raw(path: Path) -> VoxelVolume:
    meta_path, raw_path = _raw_paths(path)
    try:
        meta = json.loads(meta_path.read_text())
        dims = tuple(int(d) for d in meta["dims"])
        spacing = tuple(float(s) for s in meta["spacing_mm"])
        origin = tuple(float(o) for o in meta.get("origin_mm", (0.0, 0.0, 0.0)))
        dt = _RAW_DTYPES[meta["dtype"]]
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"malformed raw sidecar {meta_path}: {exc}") from exc
    if meta.get("order", "x-fastest") != "x-fastest":
        raise FormatError(f"unsupported voxel order {meta.get('order')!r}")
    if len(dims) != 3 or min(dims) < 1 or len(spacing) != 3 or len(origin) != 3:
        raise FormatError(f"malformed dims/spacing/origin in {meta_path}")
    if not all(math.isfinite(s) and s > 0 for s in spacing):
        raise FormatError(f"invalid spacing {spacing}")
    _check_capacity(dims, dt.itemsize)
    raw = raw_path.read_bytes()
    n = int(np.prod(dims))
    if len(raw) != n * dt.itemsize:
        raise FormatError(f"{raw_path} holds {len(raw)} bytes, expected {n * dt.itemsize}")
    arr = np.frombuffer(raw, dtype=dt).reshape(dims, order="F").astype(dt.newbyteorder("="))
    return VoxelVolume(arr, spacing, origin, _classify(arr))


def _save_raw(vol: VoxelVolume, path: Path) -> None:
    meta_path, raw_path = _raw_paths(path)
    dt = vol.data.dtype.newbyteorder("<")
    if dt not in _RAW_NAMES:
        raise VolumeWriteError(f"dtype {vol.data.dtype} not supported by the raw format")
    meta = {
        "dims": list(vol.dims),
        "spacing_mm": list(vol.spacing),
        "origin_mm": list(vol.origin),
        "dtype": _RAW_NAMES[dt],
        "order": "x-fastest",
    }
    raw_path.write_bytes(np.ascontiguousarray(vol.data.astype(dt).ravel(order="F")).tobytes())
    meta_path.write_text(json.dumps(meta, indent=2))


# ---------------------------------------------------------------- public API

def _is_raw(path: Path) -> bool:
    return path.suffix in (".raw", ".json")


def load_volume(path) -> VoxelVolume:
    """Read a NIfTI-1 (``.nii`` / ``.nii.gz``) or raw+JSON volume.

    Data whose values are all 0/1 comes back as a binary mask (``uint8``
    unless the file stored another integer/float type); everything else is
    a scalar volume.
    """
    path = Path(path)
    if _is_raw(path):
        vol = _load_raw(path)
    else:
        vol = _load_nifti(path)
    return vol


def save_volume(vol: VoxelVolume, path) -> None:
    path = Path(path)
    try:
        if _is_raw(path):
            _save_raw(vol, path)
        else:
            payload = _nifti_bytes(vol)
            if path.name.endswith(".gz"):
                payload = gzip.compress(payload, mtime=0)
            path.write_bytes(payload)
    except OSError as exc:
        raise VolumeWriteError(f"cannot write {path}: {exc}") from exc


def resample(vol: VoxelVolume, target_spacing, interp: str = "nearest") -> VoxelVolume:
    """Resample onto a grid with ``target_spacing`` covering the same extent.

    Binary masks are always resampled with nearest-neighbour lookup.
    """
    target = tuple(float(s) for s in target_spacing)
    if len(target) != 3 or not all(math.isfinite(s) and s > 0 for s in target):
        raise ValueError(f"target spacing must be three positive values, got {target_spacing}")
    if interp not in ("nearest", "trilinear"):
        raise ValueError(f"unknown interpolation {interp!r}")
    old = np.asarray(vol.spacing)
    new = np.asarray(target)
    if np.array_equal(old, new):
        return vol
    dims = np.maximum(np.rint(np.asarray(vol.dims) * old / new).astype(int), 1)
    # Extent starts half a voxel before the first centre on both grids.
    origin = np.asarray(vol.origin) - old / 2 + new / 2
    axes = [(origin[a] + new[a] * np.arange(dims[a]) - vol.origin[a]) / old[a] for a in range(3)]
    if vol.is_binary or interp == "nearest":
        idx = [np.clip(np.floor(ax + 0.5).astype(int), 0, vol.dims[a] - 1) for a, ax in enumerate(axes)]
        data = vol.data[np.ix_(*idx)]
    else:
        grid = np.meshgrid(*axes, indexing="ij")
        data = ndi.map_coordinates(vol.data.astype(np.float64), grid, order=1, mode="nearest")
        data = data.astype(vol.data.dtype if vol.data.dtype.kind == "f" else np.float32)
    return VoxelVolume(data, target, tuple(origin), vol.kind)
