"""Configuration and end-to-end orchestration shared by the CLI and tests."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .drr import DetectorImage, render_drr
from .embedding import EmbeddingProvider, embed_image
from .errors import BadHeader
from .geometry import CameraModel, PoseSE3, random_pose, template_grid_angles, template_pose_grid
from .registration import RefineConfig, RegistrationResult, RobustConfig, magsac_pnp, refine_pose
from .subspace import (CorrespondenceSet, SimilarityHeatmap, Template, TemplateSet, _point_rng,
                       build_subspace, estimate_correspondences, similarity_heatmap)
from .volume import LandmarkSample, Volume, sample_mask_points

DEFAULTS: dict = {
    "workspace": "workspace",
    "seed": 0,
    "threads": None,
    "provider": "oracle",
    "volume": {"path": None, "format": None, "mask": None, "mu_water": 0.02, "hu_clip_min": -1000.0},
    # the source-to-detector distance is not a published constant; always configure it
    "camera": {"focal_mm": 1020.0, "detector_px": [192, 192], "pixel_mm": 1.552, "principal_px": [96.0, 96.0]},
    "source_to_pivot_mm": 600.0,
    "center_pose": None,
    "grid": {"lao_rao_range_deg": 45.0, "cra_cau_range_deg": 22.5, "steps": 18},
    "render": {"step_mm": None, "i0": 1.0},
    "sampling": {"points": 3000, "top_k": 600, "tta_rounds": 10, "n_subspace_templates": 4,
                 "sv_rel_tol": 1e-6, "upsample": "bilinear-refined"},
    "robust": {"max_iterations": 2000, "sigma_max_px": 10.0, "confidence": 0.999},
    "refine": {"iterations": 100, "scales": [8, 4, 2], "step_size": 1.0,
               "fd_epsilon": [0.005, 0.005, 0.005, 0.5, 0.5, 0.5]},
    "synth": {"rot_bounds_deg": [20.0, 10.0, 5.0], "trans_bounds_mm": [10.0, 10.0, 10.0]},
    "n_eval_landmarks": 14,
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise BadHeader(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, f"{path}{key}.")
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass
class PipelineConfig:
    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def from_dict(cls, d: dict | None = None) -> "PipelineConfig":
        cfg = cls(_merge(DEFAULTS, d or {}))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise BadHeader(f"{path}: {exc}") from exc

    def override(self, **values) -> "PipelineConfig":
        d = copy.deepcopy(self.raw)
        for key, value in values.items():
            if value is not None:
                d[key] = value
        return PipelineConfig.from_dict(d)

    def validate(self) -> None:
        s = self.raw["sampling"]
        for key in ("points", "top_k", "tta_rounds", "n_subspace_templates"):
            if int(s[key]) < 1:
                raise BadHeader(f"sampling.{key} must be positive")
        if s["top_k"] > s["points"]:
            raise BadHeader("sampling.top_k must not exceed sampling.points")
        if int(self.raw["grid"]["steps"]) < 2:
            raise BadHeader("grid.steps must be >= 2")
        self.camera  # noqa: B018 - validates
        self.robust_config()
        self.refine_config()

    # typed views -------------------------------------------------------------

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def camera(self) -> CameraModel:
        return CameraModel.from_dict(self.raw["camera"])

    @property
    def sampling(self) -> dict:
        return self.raw["sampling"]

    def center_pose(self, volume: Volume) -> PoseSE3:
        """Configured reference view, else an AP-like view looking at the volume centre."""
        if self.raw["center_pose"] is not None:
            return PoseSE3.from_dict(self.raw["center_pose"])
        t = np.array([0.0, 0.0, float(self.raw["source_to_pivot_mm"])]) - volume.center
        return PoseSE3(np.eye(3), t)

    def robust_config(self, seed: int | None = None) -> RobustConfig:
        r = self.raw["robust"]
        return RobustConfig(int(r["max_iterations"]), float(r["sigma_max_px"]), float(r["confidence"]),
                            seed=self.seed if seed is None else seed)

    def refine_config(self) -> RefineConfig:
        r = self.raw["refine"]
        return RefineConfig(int(r["iterations"]), tuple(r["scales"]), float(r["step_size"]),
                            tuple(r["fd_epsilon"]))

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=1, sort_keys=True)


def derived_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([int(seed), *[int(k) for k in keys]]).generate_state(1)[0])


# ----------------------------------------------------------------------------
# stages


def template_poses(cfg: PipelineConfig, volume: Volume) -> tuple[list[PoseSE3], np.ndarray]:
    g = cfg.raw["grid"]
    center = cfg.center_pose(volume)
    poses = template_pose_grid(center, g["lao_rao_range_deg"], g["cra_cau_range_deg"], int(g["steps"]),
                               pivot=volume.center)
    return poses, template_grid_angles(g["lao_rao_range_deg"], g["cra_cau_range_deg"], int(g["steps"]))


def render_image(cfg: PipelineConfig, volume: Volume, pose: PoseSE3, camera: CameraModel | None = None) -> DetectorImage:
    r = cfg.raw["render"]
    return render_drr(volume, camera or cfg.camera, pose, r["step_mm"], float(r["i0"]))


def build_template_set(cfg: PipelineConfig, volume: Volume, provider: EmbeddingProvider,
                       keep_images: bool = True, progress=None) -> TemplateSet:
    camera = cfg.camera
    poses, _ = template_poses(cfg, volume)
    templates = []
    for i, pose in enumerate(poses):
        image = render_image(cfg, volume, pose, camera)
        emap = embed_image(provider, image, camera, pose, key=f"t{i:04d}")
        templates.append(Template(pose, emap, image if keep_images else None))
        if progress:
            progress(i)
    return TemplateSet(templates, camera, provider.name)


def synth_pose(cfg: PipelineConfig, volume: Volume, index: int) -> PoseSE3:
    s = cfg.raw["synth"]
    return random_pose(cfg.center_pose(volume), s["rot_bounds_deg"], s["trans_bounds_mm"],
                       derived_seed(cfg.seed, 1, index), pivot=volume.center)


def sample_points(cfg: PipelineConfig, volume: Volume) -> LandmarkSample:
    if volume.mask is None:
        raise BadHeader("the volume has no segmentation mask to sample landmarks from")
    return sample_mask_points(volume.mask, volume, int(cfg.sampling["points"]), derived_seed(cfg.seed, 2))


def eval_landmarks(cfg: PipelineConfig, volume: Volume) -> np.ndarray:
    """Fixed evaluation landmark set drawn from the mask (used when none is supplied)."""
    return sample_mask_points(volume.mask, volume, int(cfg.raw["n_eval_landmarks"]),
                              derived_seed(cfg.seed, 3)).points


def correspond(cfg: PipelineConfig, templates: TemplateSet, query_embedding, points: LandmarkSample) -> CorrespondenceSet:
    s = cfg.sampling
    return estimate_correspondences(templates, query_embedding, points, int(s["n_subspace_templates"]),
                                    int(s["top_k"]), int(s["tta_rounds"]), derived_seed(cfg.seed, 4),
                                    s["upsample"], float(s["sv_rel_tol"]))


def landmark_heatmap(cfg: PipelineConfig, templates: TemplateSet, query_embedding, point, index: int) -> SimilarityHeatmap:
    """First-round heatmap of the sampled point ``index`` (same template draw as the search)."""
    _, vis = templates.project_all(point)
    visible = np.flatnonzero(vis[:, 0])
    rng = _point_rng(derived_seed(cfg.seed, 4), index)
    k = min(int(cfg.sampling["n_subspace_templates"]), len(visible))
    chosen = np.sort(rng.choice(visible, size=k, replace=False))
    sub = build_subspace(templates, point, chosen, float(cfg.sampling["sv_rel_tol"]))
    return similarity_heatmap(sub, query_embedding)


@dataclass(eq=False)
class PipelineOutput:
    result: RegistrationResult
    correspondences: CorrespondenceSet


def register(cfg: PipelineConfig, volume: Volume, templates: TemplateSet, query: DetectorImage,
             query_embedding, points: LandmarkSample | None = None, refine: bool = True) -> PipelineOutput:
    """Correspondences → robust PnP → (optional) NCC refinement."""
    points = sample_points(cfg, volume) if points is None else points
    corr = correspond(cfg, templates, query_embedding, points)
    result = magsac_pnp(corr, templates.camera, cfg.robust_config())
    refine_cfg = cfg.refine_config()
    if refine and refine_cfg.iterations > 0:
        trace: list = []
        result.refined_pose = refine_pose(volume, templates.camera, query, result.initial_pose, refine_cfg,
                                          pivot=volume.center, step_mm=cfg.raw["render"]["step_mm"], trace=trace)
        result.trace = result.trace + trace
    return PipelineOutput(result, corr)
