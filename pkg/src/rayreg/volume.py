"""CT volumes, segmentation masks and landmark sampling.

Voxel arrays are indexed ``data[i, j, k]`` with ``dims == data.shape``.  The
world position of voxel index ``(i, j, k)`` is ``origin + spacing * (i, j, k)``
(axis-aligned NIfTI convention, no oblique orientations).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .errors import BadHeader, EmptyMask, UnreadableFile, UnsupportedDatatype

DEFAULT_MU_WATER = 0.02  # 1/mm
DEFAULT_HU_CLIP_MIN = -1000.0

_RAW_DTYPES = {"f32": "<f4", "u8": "u1"}


@dataclass(frozen=True, eq=False)
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    unit: str = "mu"  # "hu" or "mu"
    mask: "VolumeMask | None" = field(default=None, repr=False)

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise BadHeader(f"volume must be a non-empty 3D grid, got shape {data.shape}")
        if len(self.spacing) != 3 or any(not s > 0 for s in self.spacing):
            raise BadHeader(f"spacing must be 3 positive reals, got {self.spacing}")
        if not np.all(np.isfinite(data)):
            raise BadHeader("volume contains non-finite values")
        if self.unit not in ("hu", "mu"):
            raise BadHeader(f"unknown unit {self.unit!r}")
        if self.mask is not None and self.mask.dims != data.shape:
            raise BadHeader(f"mask dims {self.mask.dims} != volume dims {data.shape}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def world_from_index(self) -> np.ndarray:
        """4x4 affine mapping voxel indices to world millimetres."""
        affine = np.diag([*self.spacing, 1.0])
        affine[:3, 3] = self.origin
        return affine

    def index_to_world(self, ijk) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(ijk, dtype=np.float64) * np.asarray(self.spacing)

    def world_to_index(self, xyz) -> np.ndarray:
        return (np.asarray(xyz, dtype=np.float64) - np.asarray(self.origin)) / np.asarray(self.spacing)

    @property
    def center(self) -> np.ndarray:
        """World position of the grid centre (centroid of the voxel lattice)."""
        return self.index_to_world((np.asarray(self.dims) - 1) / 2.0)

    def with_data(self, data: np.ndarray, unit: str | None = None) -> "Volume":
        return Volume(data, self.spacing, self.origin, unit or self.unit, self.mask)


@dataclass(frozen=True, eq=False)
class VolumeMask:
    bits: np.ndarray

    def __post_init__(self):
        bits = np.ascontiguousarray(self.bits, dtype=bool)
        if bits.ndim != 3:
            raise BadHeader("mask must be 3D")
        object.__setattr__(self, "bits", bits)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.bits.shape)


@dataclass(frozen=True, eq=False)
class LandmarkSample:
    points: np.ndarray  # (n, 3) world mm

    def __len__(self) -> int:
        return len(self.points)


# ----------------------------------------------------------------------------
# raw + JSON header format


def _read_header(path: Path) -> dict:
    try:
        header = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise UnreadableFile(str(path)) from exc
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BadHeader(f"{path}: {exc}") from exc
    if not isinstance(header, dict):
        raise BadHeader(f"{path}: header must be a JSON object")
    dims = header.get("dims")
    if not (isinstance(dims, list) and len(dims) == 3 and all(isinstance(d, int) for d in dims)):
        raise BadHeader(f"{path}: dims must be 3 integers")
    if min(dims) < 1:
        raise BadHeader(f"{path}: zero or negative dimension in {dims}")
    if header.get("dtype", "f32") not in _RAW_DTYPES:
        raise UnsupportedDatatype(f"{path}: dtype {header.get('dtype')!r}")
    return header


def _raw_data_path(header_path: Path, header: dict) -> Path:
    if "data" in header:
        return header_path.parent / header["data"]
    return header_path.with_suffix(".raw")


def _read_raw_grid(header_path: Path) -> tuple[dict, np.ndarray]:
    header = _read_header(header_path)
    dims = header["dims"]
    data_path = _raw_data_path(header_path, header)
    dtype = np.dtype(_RAW_DTYPES[header.get("dtype", "f32")])
    try:
        buf = data_path.read_bytes()
    except OSError as exc:
        raise UnreadableFile(str(data_path)) from exc
    expected = dims[0] * dims[1] * dims[2] * dtype.itemsize
    if len(buf) != expected:
        raise BadHeader(f"{data_path}: expected {expected} bytes, found {len(buf)}")
    # i-fastest on disk == Fortran order over (i, j, k)
    grid = np.frombuffer(buf, dtype=dtype).reshape(dims, order="F")
    return header, grid


def _write_raw_grid(header_path: Path, grid: np.ndarray, header: dict) -> None:
    header_path = Path(header_path)
    header_path.parent.mkdir(parents=True, exist_ok=True)
    data_path = header_path.with_suffix(".raw")
    header = {**header, "dims": [int(n) for n in grid.shape], "data": data_path.name}
    dtype = np.dtype(_RAW_DTYPES[header["dtype"]])
    data_path.write_bytes(np.asarray(grid, dtype=dtype).tobytes(order="F"))
    header_path.write_text(json.dumps(header, indent=1) + "\n")


def save_volume(volume: Volume, path) -> Path:
    """Write ``volume`` as ``<path>.json`` header plus ``<path>.raw`` data.

    An attached mask goes to ``<path>.mask.json``/``.raw`` and is referenced
    from the header, so :func:`load_volume` restores it.
    """
    path = Path(path).with_suffix(".json")
    header = {
        "spacing": list(volume.spacing),
        "origin": list(volume.origin),
        "dtype": "f32",
        "unit": volume.unit,
    }
    if volume.mask is not None:
        mask_path = save_mask(volume.mask, path.with_name(path.stem + ".mask.json"), volume.spacing, volume.origin)
        header["mask"] = mask_path.name
    _write_raw_grid(path, volume.data, header)
    return path


def save_mask(mask: VolumeMask, path, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> Path:
    path = Path(path).with_suffix(".json")
    _write_raw_grid(path, mask.bits.astype(np.uint8), {
        "spacing": [float(s) for s in spacing],
        "origin": [float(o) for o in origin],
        "dtype": "u8",
    })
    return path


def load_mask(path) -> VolumeMask:
    header, grid = _read_raw_grid(Path(path))
    return VolumeMask(grid != 0)


# ----------------------------------------------------------------------------
# NIfTI-1


_NIFTI_DTYPES = {4: np.int16, 16: np.float32}


def _load_nifti(path: Path) -> Volume:
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise UnreadableFile(str(path)) from exc
    if len(buf) < 348:
        raise BadHeader(f"{path}: too short for a NIfTI-1 header")
    for endian in ("<", ">"):
        if struct.unpack(endian + "i", buf[:4])[0] == 348:
            break
    else:
        raise BadHeader(f"{path}: sizeof_hdr is not 348")
    if buf[344:348] != b"n+1\0":
        raise BadHeader(f"{path}: magic {buf[344:348]!r} is not single-file NIfTI-1")

    dim = struct.unpack(endian + "8h", buf[40:56])
    datatype, _bitpix = struct.unpack(endian + "2h", buf[70:74])
    pixdim = struct.unpack(endian + "8f", buf[76:108])
    vox_offset, scl_slope, scl_inter = struct.unpack(endian + "3f", buf[108:120])
    qform_code, sform_code = struct.unpack(endian + "2h", buf[252:256])
    quatern = struct.unpack(endian + "6f", buf[256:280])
    srow = np.array(struct.unpack(endian + "12f", buf[280:328]), dtype=np.float64).reshape(3, 4)

    ndim = dim[0]
    if not 3 <= ndim <= 7 or any(d != 1 for d in dim[4:ndim + 1]):
        raise BadHeader(f"{path}: expected a scalar 3D image, dim = {dim}")
    dims = [int(d) for d in dim[1:4]]
    if min(dims) < 1:
        raise BadHeader(f"{path}: zero or negative dimension in {dims}")
    if datatype not in _NIFTI_DTYPES:
        raise UnsupportedDatatype(f"{path}: NIfTI datatype code {datatype}")

    if sform_code > 0:
        linear = srow[:, :3]
        if np.any(np.abs(linear - np.diag(np.diag(linear))) > 1e-6) or np.any(np.diag(linear) <= 0):
            raise BadHeader(f"{path}: sform is not a positive axis-aligned scaling")
        spacing = tuple(np.diag(linear))
        origin = tuple(srow[:, 3])
    elif qform_code > 0:
        b, c, d, qx, qy, qz = quatern
        qfac = pixdim[0] if pixdim[0] in (-1.0, 1.0) else 1.0
        if abs(b) > 1e-6 or abs(c) > 1e-6 or abs(d) > 1e-6 or qfac < 0:
            raise BadHeader(f"{path}: qform carries a rotation or flip")
        spacing = tuple(pixdim[1:4])
        origin = (qx, qy, qz)
    else:
        spacing = tuple(pixdim[1:4])
        origin = (0.0, 0.0, 0.0)
    if any(not s > 0 for s in spacing):
        raise BadHeader(f"{path}: non-positive voxel spacing {spacing}")

    dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder(endian)
    offset = int(vox_offset)
    count = dims[0] * dims[1] * dims[2]
    if offset < 348 or len(buf) < offset + count * dtype.itemsize:
        raise BadHeader(f"{path}: data section truncated")
    raw = np.frombuffer(buf, dtype=dtype, count=count, offset=offset).astype(np.float64)
    if scl_slope != 0.0 and np.isfinite(scl_slope):
        raw = raw * scl_slope + scl_inter
    data = raw.reshape(dims, order="F").astype(np.float32)
    return Volume(data, spacing, origin, unit="hu")


def load_volume(path, format: str | None = None) -> Volume:
    """Load a volume from ``.nii`` (NIfTI-1) or a ``.json`` raw header.

    ``format`` may be ``"nifti1"`` or ``"raw"``; it is inferred from the
    suffix when omitted.  A raw header may name a ``"mask"`` file, which is
    attached to the returned volume.
    """
    path = Path(path)
    if format is None:
        format = "nifti1" if path.suffix == ".nii" else "raw"
    if format == "nifti1":
        return _load_nifti(path)
    if format not in ("raw", "raw+header"):
        raise BadHeader(f"unknown volume format {format!r}")
    header, grid = _read_raw_grid(path)
    mask = None
    if "mask" in header:
        mask = load_mask(path.parent / header["mask"])
    return Volume(
        grid.astype(np.float32),
        tuple(header.get("spacing", (1.0, 1.0, 1.0))),
        tuple(header.get("origin", (0.0, 0.0, 0.0))),
        unit=header.get("unit", "mu"),
        mask=mask,
    )


# ----------------------------------------------------------------------------
# intensity conversion and sampling


def hu_to_attenuation(volume: Volume, mu_water: float = DEFAULT_MU_WATER,
                      hu_clip_min: float = DEFAULT_HU_CLIP_MIN) -> Volume:
    hu = volume.data.astype(np.float64)
    mu = mu_water * (hu + 1000.0) / 1000.0
    mu[hu < hu_clip_min] = 0.0
    np.maximum(mu, 0.0, out=mu)
    return volume.with_data(mu.astype(np.float32), unit="mu")


@numba.njit(cache=True, nogil=True)
def trilinear_index(data, x, y, z):
    """Trilinear value at continuous index ``(x, y, z)``; zero-padded outside."""
    nx, ny, nz = data.shape
    if x <= -1.0 or y <= -1.0 or z <= -1.0 or x >= nx or y >= ny or z >= nz:
        return 0.0
    x0 = int(np.floor(x))
    y0 = int(np.floor(y))
    z0 = int(np.floor(z))
    fx = x - x0
    fy = y - y0
    fz = z - z0
    acc = 0.0
    for di in range(2):
        i = x0 + di
        if i < 0 or i >= nx:
            continue
        wx = fx if di else 1.0 - fx
        for dj in range(2):
            j = y0 + dj
            if j < 0 or j >= ny:
                continue
            wy = fy if dj else 1.0 - fy
            for dk in range(2):
                k = z0 + dk
                if k < 0 or k >= nz:
                    continue
                wz = fz if dk else 1.0 - fz
                acc += wx * wy * wz * data[i, j, k]
    return acc


@numba.njit(cache=True)
def _trilinear_many(data, idx):
    out = np.empty(idx.shape[0])
    for n in range(idx.shape[0]):
        out[n] = trilinear_index(data, idx[n, 0], idx[n, 1], idx[n, 2])
    return out


def sample_trilinear(volume: Volume, point):
    """Trilinear attenuation at world point(s); 0 outside the grid.

    Accepts a single 3-vector (returns a float) or an ``(n, 3)`` array.
    """
    pts = np.asarray(point, dtype=np.float64)
    idx = np.atleast_2d(volume.world_to_index(pts))
    vals = _trilinear_many(volume.data, np.ascontiguousarray(idx))
    return float(vals[0]) if pts.ndim == 1 else vals


def sample_mask_points(mask: VolumeMask, volume: Volume, count: int, seed: int) -> LandmarkSample:
    if count < 1:
        raise ValueError("count must be >= 1")
    if mask.dims != volume.dims:
        raise BadHeader(f"mask dims {mask.dims} != volume dims {volume.dims}")
    voxels = np.argwhere(mask.bits)
    if len(voxels) == 0:
        raise EmptyMask("mask has no true voxels")
    rng = np.random.default_rng(seed)
    chosen = voxels[rng.integers(0, len(voxels), size=count)]
    jitter = rng.uniform(-0.5, 0.5, size=(count, 3))
    return LandmarkSample(volume.index_to_world(chosen + jitter))
