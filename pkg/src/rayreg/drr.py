"""Digitally reconstructed radiographs by Beer-Lambert ray integration.

Each detector pixel's ray is clipped to the support of the zero-padded
trilinear volume and the line integral of attenuation is evaluated with the
midpoint rule (default) or, for piecewise-constant voxels, exactly with
Siddon's path-length traversal.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from .errors import BadHeader, BadScale, UnreadableFile
from .geometry import CameraModel, PoseSE3, backproject
from .volume import Volume, trilinear_index

KINDS = ("intensity", "log_attenuation")


@dataclass(frozen=True, eq=False)
class DetectorImage:
    values: np.ndarray  # (height, width)
    pixel_mm: float
    kind: str = "intensity"
    i0: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown image kind {self.kind!r}")
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError("image values must be a 2D grid")
        object.__setattr__(self, "values", values)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    def as_kind(self, kind: str) -> "DetectorImage":
        if kind == self.kind:
            return self
        if kind == "intensity":
            return DetectorImage(self.i0 * np.exp(-self.values), self.pixel_mm, kind, self.i0)
        return DetectorImage(-np.log(self.values / self.i0), self.pixel_mm, kind, self.i0)


# ----------------------------------------------------------------------------
# kernels


@numba.njit(cache=True, nogil=True)
def _clip_ray(p0, dv, shape):
    """Parametric interval (mm) where the ray is inside the padded grid support."""
    tmin = 0.0
    tmax = np.inf
    for a in range(3):
        lo = -1.0
        hi = float(shape[a])
        if abs(dv[a]) < 1e-15:
            if p0[a] <= lo or p0[a] >= hi:
                return 0.0, -1.0
            continue
        t1 = (lo - p0[a]) / dv[a]
        t2 = (hi - p0[a]) / dv[a]
        if t1 > t2:
            t1, t2 = t2, t1
        tmin = max(tmin, t1)
        tmax = min(tmax, t2)
    return tmin, tmax


@numba.njit(cache=True, parallel=True)
def _midpoint_kernel(data, origin, spacing, src, dirs, step, out):
    h, w = out.shape
    shape = data.shape
    p0 = (src - origin) / spacing
    for r in numba.prange(h):
        dv = np.empty(3)
        for c in range(w):
            for a in range(3):
                dv[a] = dirs[r, c, a] / spacing[a]
            tmin, tmax = _clip_ray(p0, dv, shape)
            if tmax <= tmin:
                out[r, c] = 0.0
                continue
            n = int(math.ceil((tmax - tmin) / step))
            dt = (tmax - tmin) / n
            acc = 0.0
            for m in range(n):
                t = tmin + (m + 0.5) * dt
                acc += trilinear_index(data, p0[0] + t * dv[0], p0[1] + t * dv[1], p0[2] + t * dv[2])
            out[r, c] = acc * dt


@numba.njit(cache=True, nogil=True)
def _siddon_ray(data, p0, dv):
    """Exact ∫μ through nearest-neighbour voxels (boxes [i-0.5, i+0.5])."""
    shape = data.shape
    tmin = 0.0
    tmax = np.inf
    for a in range(3):
        lo = -0.5
        hi = shape[a] - 0.5
        if abs(dv[a]) < 1e-15:
            if p0[a] <= lo or p0[a] >= hi:
                return 0.0
            continue
        t1 = (lo - p0[a]) / dv[a]
        t2 = (hi - p0[a]) / dv[a]
        if t1 > t2:
            t1, t2 = t2, t1
        tmin = max(tmin, t1)
        tmax = min(tmax, t2)
    if tmax <= tmin:
        return 0.0
    ts = [tmin, tmax]
    for a in range(3):
        if abs(dv[a]) < 1e-15:
            continue
        for i in range(shape[a] + 1):
            t = (i - 0.5 - p0[a]) / dv[a]
            if tmin < t < tmax:
                ts.append(t)
    arr = np.sort(np.array(ts))
    acc = 0.0
    for m in range(arr.shape[0] - 1):
        seg = arr[m + 1] - arr[m]
        if seg <= 0.0:
            continue
        tm = 0.5 * (arr[m] + arr[m + 1])
        i = int(math.floor(p0[0] + tm * dv[0] + 0.5))
        j = int(math.floor(p0[1] + tm * dv[1] + 0.5))
        k = int(math.floor(p0[2] + tm * dv[2] + 0.5))
        if 0 <= i < shape[0] and 0 <= j < shape[1] and 0 <= k < shape[2]:
            acc += seg * data[i, j, k]
    return acc


@numba.njit(cache=True, parallel=True)
def _siddon_kernel(data, origin, spacing, src, dirs, out):
    h, w = out.shape
    p0 = (src - origin) / spacing
    for r in numba.prange(h):
        dv = np.empty(3)
        for c in range(w):
            for a in range(3):
                dv[a] = dirs[r, c, a] / spacing[a]
            out[r, c] = _siddon_ray(data, p0, dv)


def line_integrals(volume: Volume, origin, directions, step_mm: float | None = None,
                   method: str = "midpoint") -> np.ndarray:
    """∫μ dt along rays ``origin + t·direction`` (t ≥ 0) for a ``(..., 3)`` direction grid."""
    if volume.unit != "mu":
        raise ValueError("volume stores HU; convert with hu_to_attenuation first")
    dirs = np.asarray(directions, dtype=np.float64)
    shape = dirs.shape[:-1]
    dirs2 = np.ascontiguousarray(dirs.reshape(-1, 1, 3) if dirs.ndim != 3 else dirs)
    out = np.empty(dirs2.shape[:2])
    args = (volume.data, np.asarray(volume.origin), np.asarray(volume.spacing),
            np.asarray(origin, dtype=np.float64))
    if method == "midpoint":
        step = default_step(volume) if step_mm is None else float(step_mm)
        if not step > 0:
            raise ValueError("step_mm must be positive")
        _midpoint_kernel(*args, dirs2, step, out)
    elif method == "siddon":
        _siddon_kernel(*args, dirs2, out)
    else:
        raise ValueError(f"unknown integration method {method!r}")
    return out.reshape(shape)


def default_step(volume: Volume) -> float:
    return 0.5 * min(volume.spacing)


def render_drr(volume: Volume, camera: CameraModel, pose: PoseSE3, step_mm: float | None = None,
               i0: float = 1.0, output_kind: str = "intensity", method: str = "midpoint") -> DetectorImage:
    if not i0 > 0:
        raise ValueError("i0 must be positive")
    if output_kind not in KINDS:
        raise ValueError(f"unknown output kind {output_kind!r}")
    ray = backproject(camera, pose, camera.pixel_centers())
    integral = line_integrals(volume, ray.origin, ray.direction, step_mm, method)
    img = DetectorImage(integral, camera.pixel_mm, "log_attenuation", i0)
    return img.as_kind(output_kind)


def render_multiscale(volume: Volume, camera: CameraModel, pose: PoseSE3, scales, step_mm: float | None = None,
                      i0: float = 1.0, output_kind: str = "intensity") -> list[DetectorImage]:
    """One rendering per scale, casting rays on the binned detector grid."""
    out = []
    for s in scales:
        s = int(s)
        if s < 1 or camera.width % s or camera.height % s:
            raise BadScale(f"scale {s} does not divide detector {camera.detector_px}")
        out.append(render_drr(volume, camera.scaled(s), pose, step_mm, i0, output_kind))
    return out


def downsample(values: np.ndarray, scale: int, method: str = "box") -> np.ndarray:
    """Reduce ``values`` by an integer factor in both directions.

    ``"box"`` averages each ``scale x scale`` block.  ``"center"`` samples the
    image bilinearly at the coarse pixel centres (the mean of the central 2x2
    pixels for even factors), matching rays cast on the binned detector.
    """
    v = np.asarray(values, dtype=np.float64)
    if scale == 1:
        return v
    h, w = v.shape
    if h % scale or w % scale:
        raise BadScale(f"scale {scale} does not divide image {w}x{h}")
    blocks = v.reshape(h // scale, scale, w // scale, scale)
    if method == "box":
        return blocks.mean(axis=(1, 3))
    if method == "center":
        lo, hi = (scale - 1) // 2, scale // 2
        return blocks[:, lo:hi + 1, :, lo:hi + 1].mean(axis=(1, 3))
    raise ValueError(f"unknown downsample method {method!r}")


# ----------------------------------------------------------------------------
# image files


def save_image(image: DetectorImage, path) -> Path:
    """Raw little-endian f32 grid (row-major) with a ``.json`` header."""
    path = Path(path).with_suffix(".json")
    path.parent.mkdir(parents=True, exist_ok=True)
    data_path = path.with_suffix(".raw")
    data_path.write_bytes(image.values.astype("<f4").tobytes())
    header = {"width": image.width, "height": image.height, "pixel_mm": image.pixel_mm,
              "kind": image.kind, "i0": image.i0, "data": data_path.name}
    path.write_text(json.dumps(header, indent=1) + "\n")
    return path


def load_image(path) -> DetectorImage:
    path = Path(path).with_suffix(".json")
    try:
        header = json.loads(path.read_text())
        buf = (path.parent / header.get("data", path.with_suffix(".raw").name)).read_bytes()
    except FileNotFoundError as exc:
        raise UnreadableFile(str(exc)) from exc
    except (KeyError, json.JSONDecodeError) as exc:
        raise BadHeader(f"{path}: {exc}") from exc
    w, h = int(header["width"]), int(header["height"])
    if len(buf) != 4 * w * h:
        raise BadHeader(f"{path}: expected {4 * w * h} bytes, found {len(buf)}")
    values = np.frombuffer(buf, dtype="<f4").reshape(h, w).astype(np.float64)
    return DetectorImage(values, float(header["pixel_mm"]), header.get("kind", "intensity"),
                         float(header.get("i0", 1.0)))


def save_pgm(values: np.ndarray, path) -> Path:
    """16-bit binary PGM, linearly mapped from [min, max]; range kept in a JSON sidecar."""
    path = Path(path).with_suffix(".pgm")
    path.parent.mkdir(parents=True, exist_ok=True)
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    scaled = np.zeros_like(v) if hi <= lo else (v - lo) / (hi - lo)
    q = np.round(scaled * 65535).astype(">u2")
    h, w = v.shape
    path.write_bytes(f"P5\n{w} {h}\n65535\n".encode() + q.tobytes())
    path.with_suffix(".pgm.json").write_text(json.dumps({"min": lo, "max": hi}) + "\n")
    return path
