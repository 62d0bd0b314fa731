"""Static figures written next to the pipeline's JSON outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .drr import DetectorImage  # noqa: E402
from .subspace import SimilarityHeatmap  # noqa: E402

GT_COLOR = "magenta"
EST_COLOR = "cyan"
# fixed metadata keeps the PNG bytes reproducible across runs
_PNG_META = {"Software": None}


def overlay_figure(query: DetectorImage, heatmap: SimilarityHeatmap, path, gt_uv=None, est_uv=None,
                   title: str | None = None) -> Path:
    """Query image beside the similarity heatmap, with landmark markers on both.

    The ground-truth projection is drawn in magenta and the estimate in cyan.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w = query.height, query.width
    fig, axes = plt.subplots(1, 2, figsize=(8, 4), dpi=100)
    axes[0].imshow(query.values, cmap="gray", extent=(0, w, h, 0))
    axes[0].set_title("query")
    im = axes[1].imshow(heatmap.values, cmap="viridis", vmin=0.0, vmax=1.0, extent=(0, w, h, 0))
    axes[1].set_title("similarity")
    fig.colorbar(im, ax=axes[1], fraction=0.046)
    for ax in axes:
        if gt_uv is not None:
            ax.plot(*np.asarray(gt_uv)[:2], "+", color=GT_COLOR, ms=12, mew=2, label="ground truth")
        if est_uv is not None:
            ax.plot(*np.asarray(est_uv)[:2], "x", color=EST_COLOR, ms=10, mew=2, label="estimate")
        ax.set_xlim(0, w)
        ax.set_ylim(h, 0)
        ax.set_xticks([])
        ax.set_yticks([])
    if gt_uv is not None or est_uv is not None:
        axes[0].legend(loc="lower right", fontsize=7)
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
    return path


def score_error_figure(scores, errors_px, path, in_view=None) -> Path:
    """Scatter of similarity score against reprojection error of the estimate."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    scores = np.asarray(scores, dtype=np.float64)
    errors = np.asarray(errors_px, dtype=np.float64)
    in_view = np.ones(len(scores), bool) if in_view is None else np.asarray(in_view, bool)
    fig, ax = plt.subplots(figsize=(5, 4), dpi=100)
    ax.scatter(scores[in_view], errors[in_view], s=6, label="in view")
    if (~in_view).any():
        ax.scatter(scores[~in_view], errors[~in_view], s=6, c="tab:red", label="out of view")
        ax.legend(fontsize=7)
    ax.set_xlabel("similarity score")
    ax.set_ylabel("projection error (px)")
    ax.set_yscale("symlog", linthresh=1.0)
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
    return path
