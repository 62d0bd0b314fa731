"""Landmark subspaces, similarity heatmaps and 2D correspondence search.

A 3D point ``X`` is represented by the span of the template embeddings read
at its projections.  Query cells are scored by how much of their embedding
lies in that span, ``‖Pe‖ / ‖e‖``, where ``P`` is the orthogonal projector.
``P`` is never formed: with ``B`` the retained left singular vectors of the
stacked embeddings, ``P = B Bᵀ`` and ``‖Pe‖ = ‖Bᵀe‖``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .drr import DetectorImage
from .embedding import EmbeddingMap
from .errors import DimMismatch, TooFewVisibleTemplates
from .geometry import CameraModel, PoseSE3
from .volume import LandmarkSample

DEFAULT_SV_REL_TOL = 1e-6
DEFAULT_TEMPERATURE = 1e-4
_TINY = 1e-12


@dataclass(frozen=True, eq=False)
class Template:
    pose: PoseSE3
    embedding: EmbeddingMap
    image: DetectorImage | None = None


@dataclass(eq=False)
class TemplateSet:
    templates: list[Template]
    camera: CameraModel
    provider_name: str
    _R: np.ndarray = field(init=False, repr=False)
    _t: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not self.templates:
            raise ValueError("template set is empty")
        dims = {t.embedding.dim for t in self.templates}
        if len(dims) != 1:
            raise DimMismatch(f"templates disagree on embedding dim: {sorted(dims)}")
        self._R = np.stack([t.pose.rotation for t in self.templates])
        self._t = np.stack([t.pose.translation for t in self.templates])

    def __len__(self) -> int:
        return len(self.templates)

    @property
    def dim(self) -> int:
        return self.templates[0].embedding.dim

    def project_all(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Projections ``(n_templates, n_points, 2)`` and visibility mask."""
        X = np.atleast_2d(np.asarray(points, dtype=np.float64))
        cam = np.einsum("tij,nj->tni", self._R, X) + self._t[:, None, :]
        z = cam[..., 2]
        safe = np.where(z > 0, z, 1.0)
        f = self.camera.focal_px
        cx, cy = self.camera.principal_px
        uv = np.stack([f * cam[..., 0] / safe + cx, f * cam[..., 1] / safe + cy], axis=-1)
        visible = (z > 0) & self.camera.contains(uv)
        return uv, visible


@dataclass(frozen=True, eq=False)
class LandmarkSubspace:
    point: np.ndarray
    basis: np.ndarray  # (dim, rank), orthonormal columns

    @property
    def rank(self) -> int:
        return self.basis.shape[1]

    @property
    def projector(self) -> np.ndarray:
        """Dense ``P = B Bᵀ`` (for inspection and tests only)."""
        return self.basis @ self.basis.T


@dataclass(frozen=True, eq=False)
class SimilarityHeatmap:
    values: np.ndarray  # (height, width) over embedding cells
    point: np.ndarray
    grid_stride_px: int = 1

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    points: np.ndarray  # (n, 3) world mm
    pixels: np.ndarray  # (n, 2) full-image px
    scores: np.ndarray  # (n,)
    indices: np.ndarray | None = None  # positions in the source LandmarkSample

    def __len__(self) -> int:
        return len(self.scores)

    def subset(self, mask) -> "CorrespondenceSet":
        idx = None if self.indices is None else self.indices[mask]
        return CorrespondenceSet(self.points[mask], self.pixels[mask], self.scores[mask], idx)


# ----------------------------------------------------------------------------
# subspace construction and scoring


def subspace_from_columns(F, point=None, sv_rel_tol: float = DEFAULT_SV_REL_TOL) -> LandmarkSubspace:
    """Orthonormal basis of the column space of ``F`` (rows = embedding dims)."""
    F = np.asarray(F, dtype=np.float64)
    U, s, _ = np.linalg.svd(F, full_matrices=False)
    if s.size == 0 or s[0] <= 0:
        raise TooFewVisibleTemplates("embedding columns are all zero")
    rank = int(np.count_nonzero(s >= sv_rel_tol * s[0]))
    pt = np.full(3, np.nan) if point is None else np.asarray(point, dtype=np.float64)
    return LandmarkSubspace(pt, U[:, :rank])


def build_subspace(templates: TemplateSet, point, chosen, sv_rel_tol: float = DEFAULT_SV_REL_TOL,
                   _projection=None) -> LandmarkSubspace:
    """Subspace of ``point`` from the chosen templates in which it is visible."""
    chosen = np.asarray(chosen, dtype=int)
    if len(chosen) < 2:
        raise TooFewVisibleTemplates("need at least 2 chosen templates")
    if _projection is None:
        uv, vis = templates.project_all(point)
        uv, vis = uv[chosen, 0], vis[chosen, 0]
    else:
        uv, vis = _projection
    cols = [templates.templates[t].embedding.sample_bilinear(uv[k])[0]
            for k, t in enumerate(chosen) if vis[k]]
    if len(cols) < 2:
        raise TooFewVisibleTemplates(f"point visible in only {len(cols)} of the chosen templates")
    return subspace_from_columns(np.stack(cols, axis=1), point, sv_rel_tol)


def _sim_from_parts(proj_norm, norm):
    ok = (norm >= _TINY) & (proj_norm >= _TINY)
    return np.where(ok, proj_norm / np.where(ok, norm, 1.0), 0.0)


def similarity_values(basis: np.ndarray, vectors: np.ndarray, norms: np.ndarray | None = None) -> np.ndarray:
    """``‖Bᵀe‖ / ‖e‖`` for every vector in ``vectors (..., dim)``; 0 by convention for null parts."""
    v = np.asarray(vectors, dtype=np.float64)
    if norms is None:
        norms = np.linalg.norm(v, axis=-1)
    return _sim_from_parts(np.linalg.norm(v @ basis, axis=-1), norms)


def similarity_literal(P, e) -> float:
    """``eᵀPe / (‖e‖ ‖Pe‖)`` evaluated with a dense projector."""
    e = np.asarray(e, dtype=np.float64)
    Pe = P @ e
    return float(e @ Pe / (np.linalg.norm(e) * np.linalg.norm(Pe)))


def similarity_heatmap(subspace: LandmarkSubspace, query: EmbeddingMap,
                       _norms: np.ndarray | None = None) -> SimilarityHeatmap:
    if query.dim != subspace.basis.shape[0]:
        raise DimMismatch(f"query dim {query.dim} != subspace dim {subspace.basis.shape[0]}")
    values = similarity_values(subspace.basis, query.vectors, _norms)
    return SimilarityHeatmap(values, subspace.point, query.grid_stride_px)


def _parabola_offset(left, center, right) -> float:
    denom = left - 2.0 * center + right
    if denom >= 0:
        return 0.0
    return float(np.clip(0.5 * (left - right) / denom, -0.5, 0.5))


def best_correspondence(heatmap: SimilarityHeatmap, upsample: str = "nearest") -> tuple[np.ndarray, float]:
    """Arg-max cell in full-image pixel coordinates.

    Ties go to the smallest row, then column.  ``"bilinear-refined"`` adds a
    separable quadratic sub-cell peak fit.
    """
    v = heatmap.values
    flat = int(np.argmax(v))
    row, col = divmod(flat, v.shape[1])
    score = float(v[row, col])
    fx = fy = 0.0
    if upsample == "bilinear-refined":
        if 0 < col < v.shape[1] - 1:
            fx = _parabola_offset(v[row, col - 1], score, v[row, col + 1])
        if 0 < row < v.shape[0] - 1:
            fy = _parabola_offset(v[row - 1, col], score, v[row + 1, col])
    elif upsample != "nearest":
        raise ValueError(f"unknown upsample mode {upsample!r}")
    s = heatmap.grid_stride_px
    return np.array([(col + 0.5 + fx) * s, (row + 0.5 + fy) * s]), score


# ----------------------------------------------------------------------------
# correspondence search


def _point_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def estimate_correspondences(templates: TemplateSet, query: EmbeddingMap, points, n_subspace_templates: int = 4,
                             top_k: int | None = None, tta_rounds: int = 1, seed: int = 0,
                             upsample: str = "bilinear-refined",
                             sv_rel_tol: float = DEFAULT_SV_REL_TOL) -> CorrespondenceSet:
    """Top-k filtered, test-time-augmented 2D estimates for sampled 3D points.

    Every point is scored once with a random subset of ``n_subspace_templates``
    templates (drawn among those that see it).  The ``top_k`` best survive and
    are re-scored with further random subsets until ``tta_rounds`` subsets in
    total have been tried, keeping the best-scoring estimate.  Points seen by
    fewer than two templates are dropped.
    """
    X = points.points if isinstance(points, LandmarkSample) else np.atleast_2d(np.asarray(points, dtype=np.float64))
    n_points = len(X)
    top_k = n_points if top_k is None else int(top_k)
    if top_k > n_points:
        raise ValueError(f"top_k {top_k} exceeds the {n_points} sampled points")
    if tta_rounds < 1 or n_subspace_templates < 2:
        raise ValueError("tta_rounds must be >= 1 and n_subspace_templates >= 2")
    if query.dim != templates.dim:
        raise DimMismatch(f"query dim {query.dim} != template dim {templates.dim}")

    uv_all, vis_all = templates.project_all(X)
    q_vectors = np.asarray(query.vectors, dtype=np.float64)
    q_norms = np.linalg.norm(q_vectors, axis=-1)
    rngs = [_point_rng(seed, i) for i in range(n_points)]

    def score_once(i):
        visible = np.flatnonzero(vis_all[:, i])
        if len(visible) < 2:
            return None
        k = min(n_subspace_templates, len(visible))
        chosen = np.sort(rngs[i].choice(visible, size=k, replace=False))
        sub = build_subspace(templates, X[i], chosen, sv_rel_tol,
                             _projection=(uv_all[chosen, i], vis_all[chosen, i]))
        heat = SimilarityHeatmap(similarity_values(sub.basis, q_vectors, q_norms), sub.point,
                                 query.grid_stride_px)
        return best_correspondence(heat, upsample)

    first = [score_once(i) for i in range(n_points)]
    alive = np.array([r is not None for r in first])
    pass1 = np.array([r[1] if r is not None else -np.inf for r in first])
    order = np.lexsort((np.arange(n_points), -pass1))  # descending score, then index
    keep = np.sort(order[:top_k])
    keep = keep[alive[keep]]

    pixels, scores = [], []
    for i in keep:
        best_uv, best_score = first[i]
        for _ in range(tta_rounds - 1):
            uv, score = score_once(i)
            if score > best_score:
                best_uv, best_score = uv, score
        pixels.append(best_uv)
        scores.append(best_score)
    return CorrespondenceSet(X[keep], np.array(pixels).reshape(-1, 2), np.array(scores), keep)


# ----------------------------------------------------------------------------
# contrastive objective


def info_nce_loss(subspace: LandmarkSubspace, query: EmbeddingMap, positive: tuple[int, int],
                  temperature: float = DEFAULT_TEMPERATURE) -> tuple[float, np.ndarray]:
    """InfoNCE over all query cells with ``positive = (row, col)``.

    Returns the loss and its gradient with respect to every query embedding,
    holding the subspace basis fixed.  The positive cell is part of the
    normalising set.
    """
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    e = np.asarray(query.vectors, dtype=np.float64)
    h, w, d = e.shape
    r, c = positive
    if not (0 <= r < h and 0 <= c < w):
        raise IndexError(f"positive cell {positive} outside {h}x{w} grid")
    B = subspace.basis
    a = e @ B
    proj_norm = np.linalg.norm(a, axis=-1)
    norm = np.linalg.norm(e, axis=-1)
    sim = _sim_from_parts(proj_norm, norm)

    logits = sim / temperature
    m = logits.max()
    shifted = logits - m
    log_z = np.log(np.exp(shifted).sum())
    loss = float(log_z - shifted[r, c])

    weights = np.exp(shifted - log_z)
    weights[r, c] -= 1.0
    dl_dsim = weights / temperature

    ok = (norm >= _TINY) & (proj_norm >= _TINY)
    safe_p = np.where(ok, proj_norm, 1.0)[..., None]
    safe_n = np.where(ok, norm, 1.0)[..., None]
    Pe = a @ B.T
    dsim_de = Pe / (safe_p * safe_n) - sim[..., None] * e / safe_n**2
    grad = np.where(ok[..., None], dl_dsim[..., None] * dsim_de, 0.0)
    return loss, grad


# ----------------------------------------------------------------------------
# files


def save_correspondences(corr: CorrespondenceSet, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps({"X": [float(v) for v in X], "x2d": [float(v) for v in x], "score": float(s)})
             for X, x, s in zip(corr.points, corr.pixels, corr.scores)]
    path.write_text("".join(line + "\n" for line in lines))
    return path


def load_correspondences(path) -> CorrespondenceSet:
    items = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    return CorrespondenceSet(
        np.array([it["X"] for it in items], dtype=np.float64).reshape(-1, 3),
        np.array([it["x2d"] for it in items], dtype=np.float64).reshape(-1, 2),
        np.array([it["score"] for it in items], dtype=np.float64),
    )
