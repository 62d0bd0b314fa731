"""Per-pixel ray embeddings behind a common provider contract.

Two built-in providers are available:

``oracle``
    Pose-aware analytic embedding: the normalised Plücker coordinates of each
    pixel's back-projected ray.  Lines through a fixed point ``X`` have moment
    ``X × d``, so their embeddings span an exactly three-dimensional subspace.
``patch``
    Pose-free multi-scale local statistics of the min-max normalised image.

A third, ``file``, reads maps produced by an external encoder.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .drr import DetectorImage
from .errors import BadMagic, DimMismatch, MissingPose, SizeMismatch, UnreadableFile
from .geometry import CameraModel, PoseSE3, backproject

MAGIC = b"REMB"
VERSION = 1
_HEADER = struct.Struct("<4s5I")


@dataclass(frozen=True, eq=False)
class EmbeddingMap:
    vectors: np.ndarray  # (height, width, dim)
    grid_stride_px: int = 1

    def __post_init__(self):
        v = np.asarray(self.vectors)
        if v.ndim != 3:
            raise ValueError("embedding vectors must be a (height, width, dim) grid")
        if not np.all(np.isfinite(v)):
            raise ValueError("embedding contains non-finite values")
        if self.grid_stride_px < 1:
            raise ValueError("grid_stride_px must be >= 1")
        object.__setattr__(self, "vectors", v)

    @property
    def width(self) -> int:
        return self.vectors.shape[1]

    @property
    def height(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[2]

    def cell_center_px(self, row, col) -> np.ndarray:
        """Full-image pixel coordinates (u, v) of embedding cell centres."""
        s = self.grid_stride_px
        return np.stack([(np.asarray(col) + 0.5) * s, (np.asarray(row) + 0.5) * s], axis=-1)

    def sample_bilinear(self, uv) -> np.ndarray:
        """Embeddings at full-image pixel coordinates ``(n, 2)``; edge cells are clamped."""
        uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
        s = self.grid_stride_px
        x = np.clip(uv[:, 0] / s - 0.5, 0.0, self.width - 1)
        y = np.clip(uv[:, 1] / s - 0.5, 0.0, self.height - 1)
        x0 = np.minimum(np.floor(x).astype(int), max(self.width - 2, 0))
        y0 = np.minimum(np.floor(y).astype(int), max(self.height - 2, 0))
        x1 = np.minimum(x0 + 1, self.width - 1)
        y1 = np.minimum(y0 + 1, self.height - 1)
        fx = (x - x0)[:, None]
        fy = (y - y0)[:, None]
        v = self.vectors
        return ((1 - fy) * ((1 - fx) * v[y0, x0] + fx * v[y0, x1])
                + fy * ((1 - fx) * v[y1, x0] + fx * v[y1, x1]))


class EmbeddingProvider:
    """Contract: deterministic ``embed`` from an image (and, if pose-aware, a pose)."""

    name = "abstract"
    dim = 0
    normalized = False
    pose_aware = False

    def config(self) -> dict:
        return {"name": self.name}

    def embed(self, image: DetectorImage, camera: CameraModel, pose: PoseSE3 | None = None,
              key: str | None = None) -> EmbeddingMap:
        raise NotImplementedError


def _check_size(image: DetectorImage, camera: CameraModel) -> None:
    if (image.width, image.height) != camera.detector_px:
        raise SizeMismatch(f"image {image.width}x{image.height} does not match detector {camera.detector_px}")


def plucker_coordinates(origin, directions, center=(0.0, 0.0, 0.0), scale_mm: float = 100.0) -> np.ndarray:
    """Unit-normalised ``(d, o' × d)`` with ``o' = (origin - center) / scale_mm``."""
    d = np.asarray(directions, dtype=np.float64)
    d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    o = (np.asarray(origin, dtype=np.float64) - np.asarray(center, dtype=np.float64)) / scale_mm
    v = np.concatenate([d, np.cross(np.broadcast_to(o, d.shape), d)], axis=-1)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


class OraclePluckerProvider(EmbeddingProvider):
    name = "oracle"
    dim = 6
    normalized = True
    pose_aware = True

    def __init__(self, center=(0.0, 0.0, 0.0), scale_mm: float = 100.0):
        self.center = tuple(float(c) for c in center)
        self.scale_mm = float(scale_mm)

    def config(self) -> dict:
        return {"name": self.name, "center": list(self.center), "scale_mm": self.scale_mm}

    def embed(self, image, camera, pose=None, key=None):
        if pose is None:
            raise MissingPose("the oracle provider needs the image pose")
        _check_size(image, camera)
        ray = backproject(camera, pose, camera.pixel_centers())
        return EmbeddingMap(plucker_coordinates(ray.origin, ray.direction, self.center, self.scale_mm))


class PatchDescriptorProvider(EmbeddingProvider):
    name = "patch"
    normalized = True
    pose_aware = False

    def __init__(self, radius_px: int = 3, scales=(1, 2, 4), bins: int = 8):
        if radius_px < 1:
            raise ValueError("radius_px must be >= 1")
        self.radius_px = int(radius_px)
        self.scales = tuple(int(s) for s in scales)
        self.bins = int(bins)
        self.dim = len(self.scales) * (2 + self.bins)

    def config(self) -> dict:
        return {"name": self.name, "radius_px": self.radius_px, "scales": list(self.scales), "bins": self.bins}

    @staticmethod
    def _box(img: np.ndarray, size: int) -> np.ndarray:
        # direct correlation (not running sums) keeps the filter exactly shift-equivariant
        k = np.full(size, 1.0 / size)
        out = ndimage.correlate1d(img, k, axis=0, mode="nearest")
        return ndimage.correlate1d(out, k, axis=1, mode="nearest")

    def embed(self, image, camera, pose=None, key=None):
        _check_size(image, camera)
        img = image.values
        lo, hi = img.min(), img.max()
        img = np.zeros_like(img) if hi <= lo else (img - lo) / (hi - lo)
        gy, gx = np.gradient(img)
        mag = np.hypot(gx, gy)
        ang = np.mod(np.arctan2(gy, gx), 2 * np.pi)
        bin_idx = np.minimum((ang / (2 * np.pi) * self.bins).astype(int), self.bins - 1)
        feats = []
        for s in self.scales:
            size = 2 * self.radius_px * s + 1
            mean = self._box(img, size)
            var = np.maximum(self._box(img * img, size) - mean * mean, 0.0)
            feats += [mean, np.sqrt(var)]
            for b in range(self.bins):
                feats.append(self._box(np.where(bin_idx == b, mag, 0.0), size))
        v = np.stack(feats, axis=-1)
        norm = np.linalg.norm(v, axis=-1, keepdims=True)
        flat = norm[..., 0] < 1e-12
        v = np.divide(v, norm, out=np.zeros_like(v), where=norm >= 1e-12)
        v[flat] = 1.0 / np.sqrt(self.dim)
        return EmbeddingMap(v)


class FileProvider(EmbeddingProvider):
    """Reads ``<directory>/<key>.remb`` written by an external encoder."""

    name = "file"
    normalized = False
    pose_aware = False

    def __init__(self, directory):
        self.directory = Path(directory)
        self.dim = None

    def config(self) -> dict:
        return {"name": self.name, "directory": str(self.directory)}

    def embed(self, image, camera, pose=None, key=None):
        if key is None:
            raise ValueError("the file provider needs an image key")
        emap = load_embeddings(self.directory / f"{key}.remb", expected_dim=self.dim)
        s = emap.grid_stride_px
        if -(-image.width // s) != emap.width or -(-image.height // s) != emap.height:
            raise SizeMismatch(f"{key}: {emap.width}x{emap.height} cells at stride {s} "
                               f"do not cover a {image.width}x{image.height} image")
        self.dim = emap.dim
        return emap


def oracle_plucker_provider(center=(0.0, 0.0, 0.0), scale_mm: float = 100.0) -> OraclePluckerProvider:
    return OraclePluckerProvider(center, scale_mm)


def patch_descriptor_provider(radius_px: int = 3, scales=(1, 2, 4)) -> PatchDescriptorProvider:
    return PatchDescriptorProvider(radius_px, scales)


def make_provider(spec: str, center=(0.0, 0.0, 0.0)) -> EmbeddingProvider:
    """Provider from a CLI selector: ``oracle``, ``patch`` or ``file:<dir>``."""
    if spec == "oracle":
        return OraclePluckerProvider(center)
    if spec == "patch":
        return PatchDescriptorProvider()
    if spec.startswith("file:"):
        return FileProvider(spec[5:])
    raise ValueError(f"unknown provider {spec!r}")


def embed_image(provider: EmbeddingProvider, image: DetectorImage, camera: CameraModel,
                pose: PoseSE3 | None = None, key: str | None = None) -> EmbeddingMap:
    if provider.pose_aware and pose is None:
        raise MissingPose(f"provider {provider.name!r} requires a pose")
    return provider.embed(image, camera, pose, key)


# ----------------------------------------------------------------------------
# file format


def save_embeddings(emap: EmbeddingMap, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = _HEADER.pack(MAGIC, VERSION, emap.width, emap.height, emap.dim, emap.grid_stride_px)
    path.write_bytes(header + np.ascontiguousarray(emap.vectors, dtype="<f4").tobytes())
    return path


def load_embeddings(path, expected_dim: int | None = None) -> EmbeddingMap:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise UnreadableFile(str(path)) from exc
    if len(buf) < _HEADER.size:
        raise BadMagic(f"{path}: truncated header")
    magic, version, w, h, dim, stride = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagic(f"{path}: magic {magic!r}")
    if version != VERSION:
        raise BadMagic(f"{path}: unsupported version {version}")
    if expected_dim is not None and dim != expected_dim:
        raise DimMismatch(f"{path}: dim {dim}, expected {expected_dim}")
    n = w * h * dim
    if len(buf) != _HEADER.size + 4 * n:
        raise BadMagic(f"{path}: expected {n} floats, file length {len(buf)}")
    vectors = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).reshape(h, w, dim).astype(np.float32)
    return EmbeddingMap(vectors, stride)
