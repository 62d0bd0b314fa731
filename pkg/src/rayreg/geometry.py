"""Pinhole C-arm geometry, rigid poses and pose sampling.

Conventions
-----------
* A pose ``T = (R, t)`` maps world (volume) millimetres into the camera frame:
  ``X_cam = R @ X + t``.  The X-ray source sits at the camera origin and the
  principal axis is ``+z``; the detector plane is at ``z = focal_mm``.
* Pixel coordinates are continuous with pixel ``(col, row)`` centred at
  ``(col + 0.5, row + 0.5)``, so a ``W x H`` detector spans ``[0, W] x [0, H]``.
* Twists are ``(rotation vector, translation vector)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadHeader, BehindCamera, NearPiRotation

DEEPFLUORO_DETECTOR_PX = 1536
DEEPFLUORO_PIXEL_MM = 0.194


@dataclass(frozen=True)
class CameraModel:
    focal_mm: float
    detector_px: tuple[int, int]  # (width, height)
    pixel_mm: float
    principal_px: tuple[float, float]

    def __post_init__(self):
        if not self.focal_mm > 0 or not self.pixel_mm > 0:
            raise BadHeader("focal_mm and pixel_mm must be positive")
        w, h = self.detector_px
        if int(w) < 1 or int(h) < 1:
            raise BadHeader(f"detector dims must be >= 1, got {self.detector_px}")
        object.__setattr__(self, "detector_px", (int(w), int(h)))
        object.__setattr__(self, "principal_px", tuple(float(c) for c in self.principal_px))
        object.__setattr__(self, "focal_mm", float(self.focal_mm))
        object.__setattr__(self, "pixel_mm", float(self.pixel_mm))

    @classmethod
    def centered(cls, focal_mm: float, width: int, height: int | None = None,
                 pixel_mm: float = DEEPFLUORO_PIXEL_MM) -> "CameraModel":
        height = width if height is None else height
        return cls(focal_mm, (width, height), pixel_mm, (width / 2.0, height / 2.0))

    @classmethod
    def deepfluoro(cls, focal_mm: float, downsample: int = 1) -> "CameraModel":
        """1536x1536 flat panel at 0.194 mm/px, optionally binned by ``downsample``."""
        return cls.centered(focal_mm, DEEPFLUORO_DETECTOR_PX, pixel_mm=DEEPFLUORO_PIXEL_MM).scaled(downsample)

    @property
    def width(self) -> int:
        return self.detector_px[0]

    @property
    def height(self) -> int:
        return self.detector_px[1]

    @property
    def focal_px(self) -> float:
        return self.focal_mm / self.pixel_mm

    @property
    def K(self) -> np.ndarray:
        f = self.focal_px
        cx, cy = self.principal_px
        return np.array([[f, 0.0, cx], [0.0, f, cy], [0.0, 0.0, 1.0]])

    def scaled(self, scale: int) -> "CameraModel":
        """Same geometry on a detector binned by ``scale`` in each direction."""
        if scale == 1:
            return self
        w, h = self.detector_px
        cx, cy = self.principal_px
        return CameraModel(self.focal_mm, (w // scale, h // scale), self.pixel_mm * scale,
                           (cx / scale, cy / scale))

    def pixel_centers(self) -> np.ndarray:
        """``(H, W, 2)`` array of (u, v) pixel-centre coordinates."""
        u = np.arange(self.width) + 0.5
        v = np.arange(self.height) + 0.5
        uu, vv = np.meshgrid(u, v)
        return np.stack([uu, vv], axis=-1)

    def contains(self, uv) -> np.ndarray:
        uv = np.asarray(uv, dtype=np.float64)
        return ((uv[..., 0] >= 0) & (uv[..., 0] <= self.width)
                & (uv[..., 1] >= 0) & (uv[..., 1] <= self.height))

    def to_dict(self) -> dict:
        return {
            "focal_mm": self.focal_mm,
            "detector_px": list(self.detector_px),
            "pixel_mm": self.pixel_mm,
            "principal_px": list(self.principal_px),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        try:
            return cls(d["focal_mm"], tuple(d["detector_px"]), d["pixel_mm"], tuple(d["principal_px"]))
        except (KeyError, TypeError) as exc:
            raise BadHeader(f"bad camera description: {exc}") from exc


@dataclass(frozen=True, eq=False)
class PoseSE3:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation is not a proper orthonormal matrix")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M) -> "PoseSE3":
        M = np.asarray(M, dtype=np.float64)
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def from_rt(cls, R, t, reorthonormalize: bool = True) -> "PoseSE3":
        return cls(orthonormalize(R) if reorthonormalize else R, t)

    @property
    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def apply(self, points) -> np.ndarray:
        """World -> camera for a 3-vector or an ``(n, 3)`` array."""
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """``self ∘ other``: apply ``other`` first."""
        R = self.rotation @ other.rotation
        t = self.rotation @ other.translation + self.translation
        return PoseSE3.from_rt(R, t)

    __matmul__ = compose

    def inverse(self) -> "PoseSE3":
        return PoseSE3(self.rotation.T, -self.rotation.T @ self.translation)

    @property
    def source_world(self) -> np.ndarray:
        """World position of the X-ray source (camera centre)."""
        return -self.rotation.T @ self.translation

    def to_dict(self) -> dict:
        return {
            "rotation": [float(v) for v in self.rotation.ravel()],
            "translation": [float(v) for v in self.translation],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PoseSE3":
        try:
            return cls.from_rt(np.reshape(d["rotation"], (3, 3)), d["translation"])
        except (KeyError, TypeError, ValueError) as exc:
            raise BadHeader(f"bad pose description: {exc}") from exc


@dataclass(frozen=True, eq=False)
class Ray:
    origin: np.ndarray
    direction: np.ndarray


def orthonormalize(R) -> np.ndarray:
    """Nearest rotation matrix (polar decomposition via SVD)."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=np.float64))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def rotation_angle(R_a, R_b) -> float:
    """Geodesic angle (radians) of ``R_aᵀ R_b``."""
    c = (np.trace(np.asarray(R_a).T @ np.asarray(R_b)) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def save_json(obj, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj.to_dict(), indent=1) + "\n")


def load_pose(path) -> PoseSE3:
    return PoseSE3.from_dict(json.loads(Path(path).read_text()))


def load_camera(path) -> CameraModel:
    return CameraModel.from_dict(json.loads(Path(path).read_text()))


# ----------------------------------------------------------------------------
# projection


def project(camera: CameraModel, pose: PoseSE3, point) -> np.ndarray:
    """Pinhole projection of world point(s) to pixel coordinates."""
    X = pose.apply(point)
    z = X[..., 2]
    if np.any(z <= 0):
        raise BehindCamera("point has non-positive depth in the camera frame")
    f = camera.focal_px
    cx, cy = camera.principal_px
    return np.stack([f * X[..., 0] / z + cx, f * X[..., 1] / z + cy], axis=-1)


def pixel_directions_camera(camera: CameraModel, pixels) -> np.ndarray:
    """Unit camera-frame directions through pixel coordinates ``(..., 2)``."""
    uv = np.asarray(pixels, dtype=np.float64)
    f = camera.focal_px
    cx, cy = camera.principal_px
    d = np.stack([(uv[..., 0] - cx) / f, (uv[..., 1] - cy) / f, np.ones(uv.shape[:-1])], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def backproject(camera: CameraModel, pose: PoseSE3, pixel) -> Ray:
    """World-frame ray(s) from the source through pixel coordinate(s)."""
    d_cam = pixel_directions_camera(camera, pixel)
    d = d_cam @ pose.rotation  # Rᵀ d for each row
    d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    return Ray(pose.source_world, d)


# ----------------------------------------------------------------------------
# SO(3) / SE(3)


def _hat(w) -> np.ndarray:
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def so3_exp(rotvec) -> np.ndarray:
    w = np.asarray(rotvec, dtype=np.float64)
    theta = math.sqrt(float(w @ w))
    W = _hat(w)
    if theta < 1e-8:
        A, B = 1.0 - theta**2 / 6.0, 0.5 - theta**2 / 24.0
    else:
        A, B = math.sin(theta) / theta, (1.0 - math.cos(theta)) / theta**2
    return np.eye(3) + A * W + B * (W @ W)


def so3_log(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = math.acos(c)
    if theta > math.pi - 1e-6:
        raise NearPiRotation(f"rotation angle {theta} too close to pi")
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-8:
        return 0.5 * v * (1.0 + theta**2 / 6.0)
    return v * theta / (2.0 * math.sin(theta))


def _left_jacobian(w) -> np.ndarray:
    theta = math.sqrt(float(w @ w))
    W = _hat(w)
    if theta < 1e-8:
        B, C = 0.5 - theta**2 / 24.0, 1.0 / 6.0 - theta**2 / 120.0
    else:
        B = (1.0 - math.cos(theta)) / theta**2
        C = (theta - math.sin(theta)) / theta**3
    return np.eye(3) + B * W + C * (W @ W)


def se3_exp(twist) -> PoseSE3:
    xi = np.asarray(twist, dtype=np.float64).reshape(6)
    w, v = xi[:3], xi[3:]
    return PoseSE3.from_rt(so3_exp(w), _left_jacobian(w) @ v)


def se3_log(pose: PoseSE3) -> np.ndarray:
    w = so3_log(pose.rotation)
    v = np.linalg.solve(_left_jacobian(w), pose.translation)
    return np.concatenate([w, v])


def rotate_about(pose: PoseSE3, delta_rotation, pivot_world, delta_translation=(0.0, 0.0, 0.0)) -> PoseSE3:
    """Rotate the volume about ``pivot_world`` in the camera frame, then shift.

    ``X_cam' = ΔR (X_cam - c) + c + Δt`` with ``c`` the pivot in camera frame.
    """
    c = pose.apply(pivot_world)
    dR = np.asarray(delta_rotation, dtype=np.float64)
    R = dR @ pose.rotation
    t = dR @ (pose.translation - c) + c + np.asarray(delta_translation, dtype=np.float64)
    return PoseSE3.from_rt(R, t)


def perturb(pose: PoseSE3, twist, pivot_world=(0.0, 0.0, 0.0)) -> PoseSE3:
    """Left-apply ``se3_exp(twist)`` in a camera-aligned frame centred at the pivot."""
    c = pose.apply(pivot_world)
    E = se3_exp(twist)
    R = E.rotation @ pose.rotation
    t = E.rotation @ (pose.translation - c) + E.translation + c
    return PoseSE3.from_rt(R, t)


def twist_between(reference: PoseSE3, pose: PoseSE3, pivot_world=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Inverse of :func:`perturb`: the twist taking ``reference`` to ``pose``."""
    c = reference.apply(pivot_world)
    R = pose.rotation @ reference.rotation.T
    t = pose.translation - c - R @ (reference.translation - c)
    return se3_log(PoseSE3.from_rt(R, t))


# ----------------------------------------------------------------------------
# pose sampling


def _rot_x(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _rot_y(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def template_grid_angles(lao_rao_range_deg: float, cra_cau_range_deg: float, steps: int) -> np.ndarray:
    """``(steps², 2)`` array of (LAO/RAO, CRA/CAU) angles in degrees, row-major."""
    if steps < 2:
        raise ValueError("steps must be >= 2")
    a = np.linspace(-lao_rao_range_deg, lao_rao_range_deg, steps)
    b = np.linspace(-cra_cau_range_deg, cra_cau_range_deg, steps)
    aa, bb = np.meshgrid(a, b, indexing="ij")
    return np.stack([aa.ravel(), bb.ravel()], axis=-1)


def template_pose_grid(center: PoseSE3, lao_rao_range_deg: float, cra_cau_range_deg: float,
                       steps: int, pivot=(0.0, 0.0, 0.0)) -> list[PoseSE3]:
    """Equally spaced C-arm views around ``center``.

    LAO/RAO tilts rotate about the detector's vertical (camera y) axis and
    CRA/CAU tilts about its horizontal (camera x) axis, both through ``pivot``.
    """
    poses = []
    for a, b in np.deg2rad(template_grid_angles(lao_rao_range_deg, cra_cau_range_deg, steps)):
        poses.append(rotate_about(center, _rot_y(a) @ _rot_x(b), pivot))
    return poses


def random_pose(center: PoseSE3, rot_bounds_deg, trans_bounds_mm, seed: int,
                pivot=(0.0, 0.0, 0.0)) -> PoseSE3:
    """Uniform rotation-vector and offset perturbation of ``center`` about ``pivot``."""
    rb = np.deg2rad(np.asarray(rot_bounds_deg, dtype=np.float64))
    tb = np.asarray(trans_bounds_mm, dtype=np.float64)
    if np.any(rb < 0) or np.any(tb < 0):
        raise ValueError("bounds must be non-negative")
    rng = np.random.default_rng(seed)
    rotvec = rng.uniform(-1.0, 1.0, 3) * rb
    offset = rng.uniform(-1.0, 1.0, 3) * tb
    return rotate_about(center, so3_exp(rotvec), pivot, offset)
