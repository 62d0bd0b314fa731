"""Pose initialisation from 2D/3D correspondences and intensity-based refinement.

Initial pose
    Random minimal samples of four correspondences produce hypotheses (P3P on
    three points, disambiguated by the fourth, polished by Gauss-Newton).
    Hypotheses are ranked by a noise-scale-marginalised inlier likelihood, so
    no inlier threshold has to be chosen; the winner is polished by
    iteratively reweighted least squares.
Refinement
    Gradient ascent of the mean zero-normalised cross-correlation between
    DRRs and the query image over a coarse-to-fine list of detector binnings.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import Polynomial
from scipy.special import roots_legendre
from scipy.stats import chi2

from .drr import DetectorImage, downsample, render_drr
from .errors import DegenerateConfiguration, NoValidHypothesis
from .geometry import CameraModel, PoseSE3, perturb, se3_exp
from .subspace import CorrespondenceSet
from .volume import Volume

MIN_SAMPLE = 4
GN_MAX_STEPS = 10
_BIG = 1e6


@dataclass(frozen=True)
class RobustConfig:
    max_iterations: int = 2000
    sigma_max_px: float = 10.0
    confidence: float = 0.999
    min_sample: int = MIN_SAMPLE
    seed: int = 0

    def __post_init__(self):
        if not self.sigma_max_px > 0:
            raise ValueError("sigma_max_px must be positive")
        if not 0 < self.confidence < 1:
            raise ValueError("confidence must lie in (0, 1)")
        if self.min_sample != MIN_SAMPLE:
            raise ValueError("only four-point minimal samples are supported")


@dataclass(frozen=True)
class RefineConfig:
    iterations: int = 100
    scales: tuple[int, ...] = (8, 4, 2)
    step_size: float = 1.0  # learning rate, in units of fd_epsilon
    fd_epsilon: tuple[float, ...] = (0.005, 0.005, 0.005, 0.5, 0.5, 0.5)  # rad x3, mm x3

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not self.scales:
            raise ValueError("scales must be non-empty")
        if len(self.fd_epsilon) != 6 or min(self.fd_epsilon) <= 0:
            raise ValueError("fd_epsilon needs 6 positive steps")
        object.__setattr__(self, "scales", tuple(int(s) for s in self.scales))
        object.__setattr__(self, "fd_epsilon", tuple(float(e) for e in self.fd_epsilon))


@dataclass(eq=False)
class RegistrationResult:
    initial_pose: PoseSE3
    refined_pose: PoseSE3 | None
    inlier_flags: np.ndarray
    score: float
    trace: list[dict] = field(default_factory=list)

    @property
    def final_pose(self) -> PoseSE3:
        return self.refined_pose if self.refined_pose is not None else self.initial_pose

    def to_dict(self) -> dict:
        return {
            "initial_pose": self.initial_pose.to_dict(),
            "refined_pose": None if self.refined_pose is None else self.refined_pose.to_dict(),
            "inliers": [bool(b) for b in self.inlier_flags],
            "score": float(self.score),
            "trace": self.trace,
        }


# ----------------------------------------------------------------------------
# reprojection


def reprojection_residuals(camera: CameraModel, pose: PoseSE3, points, pixels) -> np.ndarray:
    """``(n, 2)`` pixel residuals; points behind the source get a large constant."""
    Xc = pose.apply(points)
    z = Xc[:, 2]
    ok = z > 1e-9
    safe = np.where(ok, z, 1.0)
    f = camera.focal_px
    cx, cy = camera.principal_px
    uv = np.stack([f * Xc[:, 0] / safe + cx, f * Xc[:, 1] / safe + cy], axis=-1)
    res = uv - pixels
    res[~ok] = _BIG
    return res


def reprojection_rms(camera, pose, points, pixels) -> float:
    r = reprojection_residuals(camera, pose, points, pixels)
    return float(np.sqrt(np.mean(np.sum(r * r, axis=1))))


def gauss_newton(camera: CameraModel, pose: PoseSE3, points, pixels, weights=None,
                 steps: int = GN_MAX_STEPS) -> PoseSE3:
    """Weighted Gauss-Newton on pixel reprojection error, left-perturbing the pose.

    A step that raises the cost is halved (up to 8 times) before giving up.
    """
    X = np.asarray(points, dtype=np.float64)
    x = np.asarray(pixels, dtype=np.float64)
    w = np.ones(len(X)) if weights is None else np.asarray(weights, dtype=np.float64)
    f = camera.focal_px

    def cost(p):
        r = reprojection_residuals(camera, p, X, x)
        return float(np.sum(w * np.sum(r * r, axis=1)))

    current = cost(pose)
    for _ in range(steps):
        Xc = pose.apply(X)
        if np.any(Xc[:, 2] <= 1e-9):
            break
        xs, ys, zs = Xc[:, 0], Xc[:, 1], Xc[:, 2]
        r = reprojection_residuals(camera, pose, X, x)
        # d(u, v)/d(Xc) times d(Xc)/d(omega, v) = [-[Xc]x, I]
        du = np.stack([f / zs, np.zeros_like(zs), -f * xs / zs**2], axis=-1)
        dv = np.stack([np.zeros_like(zs), f / zs, -f * ys / zs**2], axis=-1)
        J = np.empty((len(X), 2, 6))
        for row, d in ((0, du), (1, dv)):
            J[:, row, :3] = np.cross(Xc, d)  # d · (ω × Xc) = ω · (Xc × d)
            J[:, row, 3:] = d
        Jw = J * np.sqrt(w)[:, None, None]
        rw = r * np.sqrt(w)[:, None]
        A = np.einsum("nki,nkj->ij", Jw, Jw)
        g = np.einsum("nki,nk->i", Jw, rw)
        try:
            delta = -np.linalg.solve(A + 1e-12 * np.trace(A) * np.eye(6), g)
        except np.linalg.LinAlgError:
            break
        improved = False
        for _ in range(8):
            E = se3_exp(delta)
            trial = PoseSE3.from_rt(E.rotation @ pose.rotation, E.rotation @ pose.translation + E.translation)
            c = cost(trial)
            if c <= current:
                pose, improved = trial, c < current
                current = c
                break
            delta = 0.5 * delta
        if not improved or np.linalg.norm(delta) < 1e-14:
            break
    return pose


# ----------------------------------------------------------------------------
# minimal and linear solvers


def _bearings(camera: CameraModel, pixels) -> np.ndarray:
    uv = np.asarray(pixels, dtype=np.float64)
    b = np.column_stack([(uv[:, 0] - camera.principal_px[0]) / camera.focal_px,
                         (uv[:, 1] - camera.principal_px[1]) / camera.focal_px,
                         np.ones(len(uv))])
    return b / np.linalg.norm(b, axis=1, keepdims=True)


def absolute_orientation(world, cam) -> PoseSE3:
    """Least-squares rigid ``R, t`` with ``cam ≈ R world + t`` (Kabsch)."""
    pw, pc = world.mean(axis=0), cam.mean(axis=0)
    H = (world - pw).T @ (cam - pc)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return PoseSE3.from_rt(R, pc - R @ pw)


def p3p(camera: CameraModel, points, pixels) -> list[PoseSE3]:
    """All poses consistent with three correspondences (up to four).

    Depths ``s1, s2 = u·s1, s3 = v·s1`` satisfy the three law-of-cosines
    constraints; eliminating ``u`` leaves a quartic in ``v``.
    """
    P = np.asarray(points, dtype=np.float64)[:3]
    f = _bearings(camera, np.asarray(pixels)[:3])
    a2 = float(np.sum((P[1] - P[2]) ** 2))
    b2 = float(np.sum((P[0] - P[2]) ** 2))
    c2 = float(np.sum((P[0] - P[1]) ** 2))
    if min(a2, b2, c2) < 1e-18:
        return []
    ca, cb, cg = float(f[1] @ f[2]), float(f[0] @ f[2]), float(f[0] @ f[1])

    v = Polynomial([0.0, 1.0])
    g = 1 + v**2 - 2 * cb * v  # 1 + v² − 2v cosβ
    L = 2 * b2 * (ca * v - cg)
    Q = b2 - b2 * v**2 + (a2 - c2) * g
    quartic = b2 * Q**2 + 2 * b2 * cg * Q * L + (b2 - c2 * g) * L**2

    poses = []
    for root in quartic.roots():
        if abs(root.imag) > 1e-6 * max(1.0, abs(root.real)):
            continue
        vr = root.real
        Lv = L(vr)
        if vr <= 0 or abs(Lv) < 1e-14:
            continue
        u = -Q(vr) / Lv
        gv = g(vr)
        if u <= 0 or gv <= 0:
            continue
        s1 = math.sqrt(b2 / gv)
        C = np.stack([s1 * f[0], u * s1 * f[1], vr * s1 * f[2]])
        d = np.array([np.sum((C[1] - C[2]) ** 2), np.sum((C[0] - C[2]) ** 2), np.sum((C[0] - C[1]) ** 2)])
        if np.max(np.abs(d - [a2, b2, c2]) / np.array([a2, b2, c2])) > 1e-4:
            continue
        poses.append(absolute_orientation(P, C))
    return poses


def dlt_pose(camera: CameraModel, points, pixels) -> PoseSE3 | None:
    """Direct linear transform on normalised image coordinates (n ≥ 6, non-coplanar)."""
    X = np.asarray(points, dtype=np.float64)
    n = len(X)
    if n < 6:
        return None
    mean = X.mean(axis=0)
    scale = np.sqrt(3.0) / max(np.mean(np.linalg.norm(X - mean, axis=1)), 1e-12)
    Xn = np.column_stack([(X - mean) * scale, np.ones(n)])
    xy = _bearings(camera, pixels)
    xy = xy[:, :2] / xy[:, 2:]
    A = np.zeros((2 * n, 12))
    A[0::2, 0:4] = Xn
    A[0::2, 8:12] = -xy[:, :1] * Xn
    A[1::2, 4:8] = Xn
    A[1::2, 8:12] = -xy[:, 1:] * Xn
    _, s, Vt = np.linalg.svd(A)
    if s[-2] < 1e-9 * s[0]:
        return None
    Pn = Vt[-1].reshape(3, 4)
    T = np.eye(4)
    T[:3, :3] *= scale
    T[:3, 3] = -scale * mean
    P = Pn @ T
    M, p = P[:, :3], P[:, 3]
    if np.linalg.det(M) < 0:
        M, p = -M, -p
    U, S, Vt2 = np.linalg.svd(M)
    R = U @ Vt2
    return PoseSE3.from_rt(R, p / S.mean())


def _check_configuration(points) -> None:
    X = np.asarray(points, dtype=np.float64)
    s = np.linalg.svd(X - X.mean(axis=0), compute_uv=False)
    if s[0] < 1e-9 or s[1] < 1e-6 * s[0]:
        raise DegenerateConfiguration("3D points are coincident or collinear")


def _dedupe(poses: list[PoseSE3], tol: float = 1e-6) -> list[PoseSE3]:
    out = []
    for p in poses:
        if not any(np.abs(p.matrix - q.matrix).max() < tol for q in out):
            out.append(p)
    return out


def pnp_minimal(correspondences, camera: CameraModel) -> list[PoseSE3]:
    """Candidate poses from ≥ 4 correspondences, best reprojection RMS first.

    Candidates come from DLT (when ≥ 6 non-coplanar points) and from P3P on
    every triple of the first four points; each is polished by at most ten
    Gauss-Newton steps over all points.
    """
    X, x = _unpack(correspondences)
    if len(X) < MIN_SAMPLE:
        raise ValueError(f"need at least {MIN_SAMPLE} correspondences, got {len(X)}")
    _check_configuration(X)
    raw = []
    dlt = dlt_pose(camera, X, x)
    if dlt is not None:
        raw.append(dlt)
    for tri in itertools.combinations(range(4), 3):
        raw += p3p(camera, X[list(tri)], x[list(tri)])
    if not raw:
        raise DegenerateConfiguration("no solver produced a pose")
    polished = _dedupe([gauss_newton(camera, p, X, x) for p in raw])
    return sorted(polished, key=lambda p: reprojection_rms(camera, p, X, x))


def _unpack(correspondences):
    if isinstance(correspondences, CorrespondenceSet):
        return correspondences.points, correspondences.pixels
    X, x = correspondences
    return np.asarray(X, dtype=np.float64), np.asarray(x, dtype=np.float64)


# ----------------------------------------------------------------------------
# σ-marginalised robust estimation


class SigmaMarginalizedScore:
    """Inlier likelihood of a residual averaged over a uniform prior on σ ∈ (0, σ_max].

    For each quadrature node σ_j a residual counts with the (peak-normalised)
    two-dof χ² density ``exp(-r²/2σ_j²)``, truncated at the 0.99 quantile.  The
    marginal weight is 1 at r = 0 and falls to 0 beyond ``k·σ_max``.
    """

    def __init__(self, sigma_max: float, nodes: int = 10, quantile: float = 0.99):
        x, w = roots_legendre(nodes)
        self.sigmas = 0.5 * sigma_max * (x + 1.0)
        self.node_weights = 0.5 * w  # sums to 1: uniform prior over (0, σ_max]
        self.cutoff = math.sqrt(chi2.ppf(quantile, 2))

    def weights(self, residuals) -> np.ndarray:
        r2 = np.sum(np.asarray(residuals) ** 2, axis=-1) if np.ndim(residuals) > 1 else np.asarray(residuals) ** 2
        s2 = self.sigmas**2
        dens = np.exp(-r2[:, None] / (2.0 * s2[None, :]))
        dens[r2[:, None] > (self.cutoff**2) * s2[None, :]] = 0.0
        return dens @ self.node_weights

    def score(self, residuals) -> float:
        return float(self.weights(residuals).sum())


def _required_iterations(inlier_ratio: float, confidence: float, sample: int) -> float:
    p = inlier_ratio**sample
    if p <= 0:
        return math.inf
    if p >= 1:
        return 0
    return math.log(1.0 - confidence) / math.log(1.0 - p)


def _minimal_hypothesis(camera, X, x) -> PoseSE3 | None:
    """P3P on the first three points, the fourth picks the root, then GN on all four."""
    try:
        _check_configuration(X)
    except DegenerateConfiguration:
        return None
    cands = p3p(camera, X[:3], x[:3])
    if not cands:
        return None
    best = min(cands, key=lambda p: float(np.sum(reprojection_residuals(camera, p, X[3:], x[3:]) ** 2)))
    return gauss_newton(camera, best, X, x)


def magsac_pnp(correspondences, camera: CameraModel, config: RobustConfig = RobustConfig()) -> RegistrationResult:
    X, x = _unpack(correspondences)
    n = len(X)
    if n < config.min_sample:
        raise ValueError(f"need at least {config.min_sample} correspondences, got {n}")
    scorer = SigmaMarginalizedScore(config.sigma_max_px)
    rng = np.random.default_rng(config.seed)

    best_pose, best_score = None, -math.inf
    needed = math.inf
    iterations = 0
    for it in range(config.max_iterations):
        iterations = it + 1
        idx = rng.choice(n, size=config.min_sample, replace=False)
        hyp = _minimal_hypothesis(camera, X[idx], x[idx])
        if hyp is not None:
            w = scorer.weights(reprojection_residuals(camera, hyp, X, x))
            s = float(w.sum())
            if s > best_score:
                best_pose, best_score = hyp, s
                ratio = np.count_nonzero(w > 0.5) / n
                needed = _required_iterations(ratio, config.confidence, config.min_sample)
        if iterations >= needed:
            break
    if best_pose is None:
        raise NoValidHypothesis(f"all {iterations} minimal samples were degenerate")

    # iteratively reweighted polish; accept only score improvements
    pose, score = best_pose, best_score
    for _ in range(5):
        w = scorer.weights(reprojection_residuals(camera, pose, X, x))
        if np.count_nonzero(w > 0) < config.min_sample:
            break
        cand = gauss_newton(camera, pose, X, x, weights=w)
        s = scorer.score(reprojection_residuals(camera, cand, X, x))
        if s <= score + 1e-12:
            if s >= score:
                pose, score = cand, s
            break
        pose, score = cand, s

    w = scorer.weights(reprojection_residuals(camera, pose, X, x))
    inliers = w > 0.5 * w.max() if w.max() > 0 else np.zeros(n, dtype=bool)
    return RegistrationResult(pose, None, inliers, score,
                              trace=[{"stage": "magsac", "iterations": iterations, "raw_score": best_score}])


def weighted_cost(camera, pose, correspondences, sigma_max_px: float = 10.0) -> float:
    """σ-marginalised reprojection cost ``Σ (1 − w(r_i))``; lower is better."""
    X, x = _unpack(correspondences)
    w = SigmaMarginalizedScore(sigma_max_px).weights(reprojection_residuals(camera, pose, X, x))
    return float(np.sum(1.0 - w))


# ----------------------------------------------------------------------------
# intensity-based refinement


def zncc(a, b) -> float:
    """Zero-normalised cross-correlation of two equally shaped images."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    a = a - a.mean()
    b = b - b.mean()
    denom = math.sqrt(float(a @ a) * float(b @ b))
    return float(a @ b) / denom if denom > 0 else 0.0


class MultiScaleNCC:
    """Mean ZNCC between DRRs and the centre-sampled query over several binnings."""

    def __init__(self, volume: Volume, camera: CameraModel, query: DetectorImage, step_mm: float | None = None):
        if (query.width, query.height) != camera.detector_px:
            raise ValueError(f"query {query.width}x{query.height} does not match detector {camera.detector_px}")
        self.volume = volume
        self.camera = camera
        self.kind = query.kind
        self.query = query
        self.step_mm = step_mm
        self._targets: dict[int, np.ndarray] = {}

    def target(self, scale: int) -> np.ndarray:
        if scale not in self._targets:
            self._targets[scale] = downsample(self.query.values, scale, "center")
        return self._targets[scale]

    def __call__(self, pose: PoseSE3, scales) -> float:
        vals = []
        for s in scales:
            img = render_drr(self.volume, self.camera.scaled(s), pose, self.step_mm, self.query.i0, self.kind)
            vals.append(zncc(img.values, self.target(s)))
        return float(np.mean(vals))


def refine_pose(volume: Volume, camera: CameraModel, query_image: DetectorImage, init: PoseSE3,
                config: RefineConfig = RefineConfig(), pivot=None, step_mm: float | None = None,
                trace: list | None = None) -> PoseSE3:
    """Coarse-to-fine gradient ascent of multi-scale NCC over a twist about ``init``.

    Stage ``k`` optimises the mean NCC over ``scales[:k + 1]`` for its share
    of the iteration budget.  Gradients are central finite differences.  The
    update is Adam-style (per-axis normalised moments) with learning rate
    ``step_size · fd_epsilon`` decaying linearly within each stage, so weakly
    observed axes such as depth still move.  Returns the best pose visited
    under the full objective (``init`` if nothing beats it).
    """
    if config.iterations == 0:
        return init
    pivot = volume.center if pivot is None else np.asarray(pivot, dtype=np.float64)
    objective = MultiScaleNCC(volume, camera, query_image, step_mm)
    eps = np.asarray(config.fd_epsilon)
    n_stages = len(config.scales)
    budgets = [config.iterations // n_stages] * n_stages
    budgets[-1] += config.iterations - sum(budgets)
    beta1, beta2 = 0.9, 0.999

    def pose_at(xi):
        return perturb(init, xi, pivot)

    best_x = np.zeros(6)
    it = 0
    for stage, budget in enumerate(budgets):
        scales = config.scales[:stage + 1]
        x = best_x.copy()
        best_f = objective(pose_at(x), scales)
        m = np.zeros(6)
        v = np.zeros(6)
        for k in range(budget):
            f = objective(pose_at(x), scales) if k else best_f
            if f > best_f:
                best_x, best_f = x.copy(), f
            grad = np.empty(6)
            for i in range(6):
                e = np.zeros(6)
                e[i] = eps[i]
                grad[i] = (objective(pose_at(x + e), scales) - objective(pose_at(x - e), scales)) * (0.5 / eps[i])
            m = beta1 * m + (1 - beta1) * grad
            v = beta2 * v + (1 - beta2) * grad**2
            m_hat = m / (1 - beta1 ** (k + 1))
            v_hat = v / (1 - beta2 ** (k + 1))
            lr = config.step_size * eps * (1.0 - k / budget)
            x = x + lr * m_hat / (np.sqrt(v_hat) + 1e-300)
            if trace is not None:
                trace.append({"iter": it, "objective": f})
            it += 1
        f = objective(pose_at(x), scales)
        if f > best_f:
            best_x, best_f = x.copy(), f

    f_init = objective(init, config.scales)
    if best_f <= f_init:
        return init
    return pose_at(best_x)
