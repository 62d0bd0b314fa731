"""Registration error metrics and per-dataset summaries."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyLandmarks, EmptyResults
from .geometry import CameraModel, PoseSE3, project

PERCENTILES = (25, 50, 95)
METRICS = ("mtre_mm", "mpd_mm")


def _landmarks(landmarks) -> np.ndarray:
    X = np.asarray(landmarks, dtype=np.float64).reshape(-1, 3)
    if len(X) == 0:
        raise EmptyLandmarks("no landmarks given")
    return X


def mtre(gt_pose: PoseSE3, est_pose: PoseSE3, landmarks) -> float:
    """Mean camera-frame distance between landmarks under the two poses (mm)."""
    X = _landmarks(landmarks)
    return float(np.mean(np.linalg.norm(gt_pose.apply(X) - est_pose.apply(X), axis=1)))


def mpd(gt_pose: PoseSE3, est_pose: PoseSE3, landmarks, camera: CameraModel) -> float:
    """Mean detector-plane distance between landmark projections (mm at full resolution)."""
    X = _landmarks(landmarks)
    d = np.linalg.norm(project(camera, gt_pose, X) - project(camera, est_pose, X), axis=1)
    return float(np.mean(d) * camera.pixel_mm)


@dataclass
class EvalReport:
    per_image: list[dict]
    percentiles: dict[str, dict[str, float]]
    gfr_metric: str
    gfr10: float
    gfr5: float
    thresholds: tuple[float, float] = (10.0, 5.0)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 <= self.gfr10 <= 1.0 and 0.0 <= self.gfr5 <= 1.0):
            raise ValueError("gross failure rates must lie in [0, 1]")
        if self.thresholds[1] <= self.thresholds[0] and self.gfr5 < self.gfr10:
            raise ValueError("GFR at the stricter threshold cannot be lower")

    def to_dict(self) -> dict:
        return {
            "per_image": self.per_image,
            "percentiles": self.percentiles,
            "gfr_metric": self.gfr_metric,
            "thresholds_mm": list(self.thresholds),
            "gfr10": self.gfr10,
            "gfr5": self.gfr5,
        }

    def write(self, json_path, csv_path=None) -> None:
        json_path = Path(json_path)
        json_path.parent.mkdir(parents=True, exist_ok=True)
        json_path.write_text(json.dumps(self.to_dict(), indent=1) + "\n")
        if csv_path is not None:
            keys = list(self.per_image[0].keys())
            with open(csv_path, "w", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=keys)
                writer.writeheader()
                writer.writerows(self.per_image)


def aggregate(results: list[dict], thresholds=(10.0, 5.0), metric: str = "mtre_mm") -> EvalReport:
    """Percentiles of each metric and gross failure rates on ``metric``.

    ``results`` holds one mapping per image with ``mtre_mm`` and ``mpd_mm``
    (plus optional identifying keys).  A failure at threshold τ is a value
    strictly greater than τ.
    """
    if not results:
        raise EmptyResults("no per-image results to aggregate")
    if metric not in METRICS:
        raise ValueError(f"metric must be one of {METRICS}")
    pct = {}
    for m in METRICS:
        vals = np.array([r[m] for r in results if r.get(m) is not None], dtype=np.float64)
        if len(vals):
            pct[m] = {str(p): float(v) for p, v in zip(PERCENTILES, np.percentile(vals, PERCENTILES))}
    vals = np.array([r[metric] for r in results], dtype=np.float64)
    t_loose, t_strict = (float(t) for t in thresholds)
    return EvalReport(
        per_image=list(results),
        percentiles=pct,
        gfr_metric=metric,
        gfr10=float(np.mean(vals > t_loose)),
        gfr5=float(np.mean(vals > t_strict)),
        thresholds=(t_loose, t_strict),
    )
