"""Frame-level and temporal metrics for predicted vs ground-truth mesh sequences.

Frame level: Chamfer distance (non-squared, averaged both ways), precision,
recall and F-score at a distance threshold.  Temporal: Chamfer delta between
consecutive-frame Chamfer profiles, occupancy-transition KL, and cosine / DTW
comparisons of per-frame feature tracks.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .meshio import DegenerateMeshError, MeshFrame

logger = logging.getLogger(__name__)

DEFAULT_POINTS = 4096
DEFAULT_TAU = 0.02
DEFAULT_K = 32
DEFAULT_EPS = 1e-8


class MetricInputError(ValueError):
    pass


# ---------------------------------------------------------------------------
# sampling


def triangle_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    a, b, c = (vertices[faces[:, i]] for i in range(3))
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def sample_surface(mesh: MeshFrame, n: int, seed: int = 0, return_index: bool = False):
    """Area-weighted barycentric sampling of ``n`` surface points.

    Triangles are drawn with probability proportional to area; within a
    triangle the weights ``(1 - sqrt(r1), sqrt(r1)(1 - r2), sqrt(r1) r2)`` give
    a uniform point.  With ``return_index`` the chosen face ids and the
    barycentric weights are returned too.
    """
    if n < 1:
        raise MetricInputError("need at least one sample")
    V, F = mesh.vertices, mesh.faces
    if len(F) == 0:
        raise DegenerateMeshError("mesh has no faces")
    areas = triangle_areas(V, F)
    total = areas.sum()
    if not total > 0:
        raise DegenerateMeshError("all triangles are degenerate")
    rng = np.random.default_rng(seed)
    cdf = np.cumsum(areas) / total
    tri = np.minimum(np.searchsorted(cdf, rng.random(n), side="right"), len(F) - 1)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    w = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    f = F[tri]
    pts = w[:, :1] * V[f[:, 0]] + w[:, 1:2] * V[f[:, 1]] + w[:, 2:] * V[f[:, 2]]
    if return_index:
        return pts, tri, w
    return pts


# ---------------------------------------------------------------------------
# frame-level


def _check_cloud(P):
    P = np.asarray(P, dtype=np.float64).reshape(-1, 3)
    if len(P) == 0:
        raise MetricInputError("empty point cloud")
    return P


def nearest_distances(P, G) -> np.ndarray:
    """For every point of ``P`` the Euclidean distance to its nearest point of ``G``."""
    P, G = _check_cloud(P), _check_cloud(G)
    d, _ = cKDTree(G).query(P, k=1)
    return d


def chamfer(P, G) -> float:
    d_pg = nearest_distances(P, G)
    d_gp = nearest_distances(G, P)
    return 0.5 * (d_pg.mean() + d_gp.mean())


def f_score(P, G, tau: float = DEFAULT_TAU):
    """``(precision, recall, f)`` with strict ``distance < tau`` matches."""
    if tau <= 0:
        raise MetricInputError("tau must be positive")
    precision = float(np.mean(nearest_distances(P, G) < tau))
    recall = float(np.mean(nearest_distances(G, P) < tau))
    if precision + recall > 0:
        f = 2 * precision * recall / (precision + recall)
    else:
        f = 0.0
    return precision, recall, f


# ---------------------------------------------------------------------------
# temporal


def consecutive_chamfer(seq: Sequence) -> np.ndarray:
    return np.array([chamfer(seq[t], seq[t + 1]) for t in range(len(seq) - 1)])


def _check_pair(pred, gt):
    if len(pred) != len(gt):
        raise MetricInputError(f"sequence lengths differ: {len(pred)} vs {len(gt)}")
    if len(pred) < 2:
        raise MetricInputError("temporal metrics need at least two frames")


def delta_cd(pred_seq: Sequence, gt_seq: Sequence) -> float:
    _check_pair(pred_seq, gt_seq)
    return float(np.mean(np.abs(consecutive_chamfer(pred_seq) - consecutive_chamfer(gt_seq))))


@dataclass
class OccupancyGrid:
    K: int
    counts: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    def distribution(self, eps: float = DEFAULT_EPS) -> np.ndarray:
        p = self.counts + eps
        return p / p.sum()


def global_bounds(*sequences):
    pts = np.concatenate([np.asarray(c).reshape(-1, 3) for seq in sequences for c in seq])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    flat = hi - lo <= 0
    if np.any(flat):
        warnings.warn(f"degenerate bounding box on axes {np.flatnonzero(flat).tolist()}; expanding by 1e-6")
        lo = np.where(flat, lo - 0.5e-6, lo)
        hi = np.where(flat, hi + 0.5e-6, hi)
    return lo, hi


def voxelize(cloud, K: int, lo, hi) -> OccupancyGrid:
    cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    ijk = np.floor((cloud - lo) / (hi - lo) * K).astype(np.int64)
    ijk = np.clip(ijk, 0, K - 1)
    flat = (ijk[:, 0] * K + ijk[:, 1]) * K + ijk[:, 2]
    counts = np.bincount(flat, minlength=K ** 3).astype(np.float64)
    return OccupancyGrid(K, counts, np.asarray(lo), np.asarray(hi))


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    return float(np.sum(p * np.log(p / q)))


def occupancy_transition_kl(seq, K, lo, hi, eps=DEFAULT_EPS) -> np.ndarray:
    dists = [voxelize(c, K, lo, hi).distribution(eps) for c in seq]
    return np.array([kl_divergence(dists[t + 1], dists[t]) for t in range(len(dists) - 1)])


def occupancy_kl(pred_seq: Sequence, gt_seq: Sequence, K: int = DEFAULT_K,
                 eps: float = DEFAULT_EPS) -> float:
    """Mean |KL(p_{t+1} || p_t)_pred - KL(p_{t+1} || p_t)_gt| over a shared voxel grid."""
    _check_pair(pred_seq, gt_seq)
    lo, hi = global_bounds(pred_seq, gt_seq)
    kp = occupancy_transition_kl(pred_seq, K, lo, hi, eps)
    kg = occupancy_transition_kl(gt_seq, K, lo, hi, eps)
    return float(np.mean(np.abs(kp - kg)))


# ---------------------------------------------------------------------------
# features

DESCRIPTOR_ID = "geometric-descriptor-64"
RADIAL_BINS, RADIAL_MAX = 32, 2.0
HEIGHT_BINS, HEIGHT_MAX = 23, 2.0


def feature_descriptor(cloud) -> np.ndarray:
    """Deterministic 64-d shape descriptor of a point cloud.

    Layout: centroid (3), bounding-box extents (3), ascending covariance
    eigenvalues (3), normalised histogram of distances to the centroid over
    ``[0, 2]`` (32), normalised histogram of heights ``y - centroid_y`` over
    ``[-2, 2]`` (23).  Only the first block depends on absolute position.
    """
    X = _check_cloud(cloud)
    c = X.mean(axis=0)
    Xc = X - c
    extents = X.max(axis=0) - X.min(axis=0)
    eig = np.linalg.eigvalsh(np.cov(Xc.T, bias=True)) if len(X) > 1 else np.zeros(3)
    r = np.linalg.norm(Xc, axis=1)
    rh = np.histogram(np.clip(r, 0, RADIAL_MAX), bins=RADIAL_BINS, range=(0, RADIAL_MAX))[0]
    hh = np.histogram(np.clip(Xc[:, 1], -HEIGHT_MAX, HEIGHT_MAX), bins=HEIGHT_BINS,
                      range=(-HEIGHT_MAX, HEIGHT_MAX))[0]
    return np.concatenate([c, extents, eig, rh / len(X), hh / len(X)])


@dataclass
class FeatureTrack:
    features: np.ndarray
    encoder: str = DESCRIPTOR_ID

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))


def dtw(A, B) -> float:
    """Dynamic-time-warping cost ``D(T_A, T_B)`` with Euclidean frame distances."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if A.shape[1] != B.shape[1]:
        raise MetricInputError("feature widths differ")
    d = np.linalg.norm(A[:, None, :] - B[None, :, :], axis=2)
    return dtw_from_costs(d)


def dtw_from_costs(d: np.ndarray) -> float:
    n, m = d.shape
    D = np.full((n + 1, m + 1), np.inf)
    D[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            D[i, j] = d[i - 1, j - 1] + min(D[i - 1, j], D[i, j - 1], D[i - 1, j - 1])
    return float(D[n, m])


def temporal_feature_compare(A, B):
    """``(cosine of mean-pooled features, DTW cost)`` for two feature tracks."""
    fa = A.features if isinstance(A, FeatureTrack) else np.atleast_2d(A)
    fb = B.features if isinstance(B, FeatureTrack) else np.atleast_2d(B)
    if fa.shape[1] != fb.shape[1]:
        raise MetricInputError("feature widths differ")
    ma, mb = fa.mean(axis=0), fb.mean(axis=0)
    na, nb = np.linalg.norm(ma), np.linalg.norm(mb)
    if na == 0 or nb == 0:
        raise MetricInputError("zero-norm mean feature; cosine undefined")
    cos = float(np.clip(ma @ mb / (na * nb), -1.0, 1.0))
    return cos, dtw(fa, fb)


# ---------------------------------------------------------------------------
# report

TABLE_COLUMNS = [
    ("CD", "cd"), ("F-score", "f_score"), ("Precision", "precision"), ("Recall", "recall"),
    ("ΔCD", "delta_cd"), ("FE Cos", "feature_cosine"), ("Feat. DTW", "feature_dtw"),
    ("Occ. KL", "occupancy_kl"),
]


@dataclass
class MetricReport:
    cd: float
    precision: float
    recall: float
    f_score: float
    delta_cd: float
    occupancy_kl: float
    feature_cosine: float
    feature_dtw: float
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        head = " | ".join(f"{name:>9}" for name, _ in TABLE_COLUMNS)
        row = " | ".join(f"{getattr(self, key):>9.4f}" for _, key in TABLE_COLUMNS)
        return head + "\n" + row


def _frames(seq):
    return list(seq.frames) if hasattr(seq, "frames") else list(seq)


def evaluate_sequences(pred, gt, *, n: int = DEFAULT_POINTS, tau: float = DEFAULT_TAU,
                       K: int = DEFAULT_K, eps: float = DEFAULT_EPS, seed: int = 0,
                       encoder: Callable = feature_descriptor,
                       encoder_id: str = DESCRIPTOR_ID) -> MetricReport:
    """Full metric report for two mesh sequences of equal length.

    Every frame of both sequences is sampled with the same ``seed``, so frames
    with shared topology get corresponding barycentric draws.
    """
    pf, gf = _frames(pred), _frames(gt)
    if len(pf) != len(gf):
        raise MetricInputError(f"frame counts differ: {len(pf)} vs {len(gf)}")
    P = [sample_surface(m, n, seed) for m in pf]
    G = [sample_surface(m, n, seed) for m in gf]

    cds, prs, rcs, fs = [], [], [], []
    for p, g in zip(P, G):
        cds.append(chamfer(p, g))
        pr, rc, f = f_score(p, g, tau)
        prs.append(pr)
        rcs.append(rc)
        fs.append(f)

    if len(P) >= 2:
        dcd = delta_cd(P, G)
        okl = occupancy_kl(P, G, K, eps)
    else:
        dcd = okl = 0.0
    cos, dist = temporal_feature_compare(
        FeatureTrack(np.array([encoder(p) for p in P]), encoder_id),
        FeatureTrack(np.array([encoder(g) for g in G]), encoder_id))

    params = {"n": n, "tau": tau, "K": K, "eps": eps, "seed": seed,
              "encoder": encoder_id, "frames": len(P), "aggregation": "uniform-mean"}
    return MetricReport(
        cd=float(np.mean(cds)), precision=float(np.mean(prs)), recall=float(np.mean(rcs)),
        f_score=float(np.mean(fs)), delta_cd=dcd, occupancy_kl=okl,
        feature_cosine=cos, feature_dtw=dist, params=params)
