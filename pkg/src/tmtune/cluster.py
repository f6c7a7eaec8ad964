"""Offline lookup model over the performance database.

Workload states are clustered with k-means (k chosen by a numeric elbow rule
over WCSS). Each cluster then gets: an outlier threshold mu + 3*sigma on
member-to-centroid distance, per-feature weights from a small regression
tree's impurity-decrease importances (IPC as the target), and a weighted
nearest-neighbor index whose query answer is the configuration of the
best-IPC member among the K nearest states.

Cluster assignment always uses unweighted Euclidean distance to the
centroids; the learned weights apply only to neighbor search inside the
chosen cluster, because weights are fitted per cluster after the fact.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import artifacts
from .core import (
    ParamConfig,
    ParamSpace,
    PerfDatabase,
    ValidationError,
    WorkloadState,
    WS_DIM,
)

logger = logging.getLogger(__name__)

MODEL_KIND = "cluster-model"


@dataclass(frozen=True)
class ClusteringConfig:
    k_range: tuple[int, int] = (2, 10)
    elbow_drop_threshold: float = 0.10
    restarts: int = 8
    max_iter: int = 100
    knn_k: int = 25
    tree_max_depth: int = 5
    tree_min_leaf: int = 10
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.k_range
        if lo < 1 or hi < lo:
            raise ValidationError(f"bad k_range {self.k_range}")
        if not (0 < self.elbow_drop_threshold < 1):
            raise ValidationError("elbow_drop_threshold must be in (0, 1)")
        if self.restarts < 1 or self.max_iter < 1:
            raise ValidationError("restarts and max_iter must be >= 1")
        if self.knn_k < 1:
            raise ValidationError("knn_k must be >= 1")
        if self.tree_max_depth < 1 or self.tree_min_leaf < 1:
            raise ValidationError("tree shape parameters must be >= 1")


@dataclass
class ClusterStats:
    mu: float
    sigma: float
    threshold: float


@dataclass
class KMeansModel:
    k: int
    centroids: np.ndarray          # (k, 5)
    assignments: np.ndarray        # (n,) cluster id per training point
    stats: list[ClusterStats]      # per cluster
    wcss: float

    def nearest_centroid(self, x: np.ndarray) -> tuple[int, float]:
        d = np.linalg.norm(self.centroids - x, axis=1)
        cid = int(np.argmin(d))    # ties resolve to the smallest cluster id
        return cid, float(d[cid])


@dataclass
class OutlierResult:
    cluster_id: int
    distance: float
    is_outlier: bool


@dataclass
class TreeNode:
    """Regression tree node; leaves carry the mean-IPC prediction."""

    feature: int | None = None
    split: float | None = None
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    value: float = 0.0

    def is_leaf(self) -> bool:
        return self.feature is None

    def predict(self, x: np.ndarray) -> float:
        node = self
        while not node.is_leaf():
            node = node.left if x[node.feature] <= node.split else node.right
        return node.value

    def to_dict(self) -> dict:
        if self.is_leaf():
            return {"value": self.value}
        return {
            "feature": self.feature,
            "split": self.split,
            "left": self.left.to_dict(),
            "right": self.right.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TreeNode":
        if "feature" not in d:
            return cls(value=float(d["value"]))
        return cls(
            feature=int(d["feature"]),
            split=float(d["split"]),
            left=cls.from_dict(d["left"]),
            right=cls.from_dict(d["right"]),
            value=0.0,
        )


@dataclass
class ClusterEntry:
    member_indices: np.ndarray     # indices into the owning database
    weights: np.ndarray            # (5,) non-negative, sum 1
    tree: TreeNode | None
    weights_degraded: bool = False


@dataclass
class ClusterIndex:
    space: ParamSpace
    entries: list[ClusterEntry]
    ws: np.ndarray                 # (n, 5) training states
    ipc: np.ndarray                # (n,)
    configs: list[ParamConfig]
    ipc_min: float
    ipc_max: float


# -- k-means ----------------------------------------------------------------

def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centroids = np.empty((k, points.shape[1]))
    first = int(rng.integers(n))
    centroids[0] = points[first]
    closest_sq = np.sum((points - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = closest_sq.sum()
        if total <= 0:
            centroids[j] = points[int(rng.integers(n))]
            continue
        r = rng.random() * total
        idx = int(np.searchsorted(np.cumsum(closest_sq), r))
        idx = min(idx, n - 1)
        centroids[j] = points[idx]
        closest_sq = np.minimum(closest_sq, np.sum((points - centroids[j]) ** 2, axis=1))
    return centroids


def _assign(points: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    labels = np.argmin(d2, axis=1)
    return labels, d2[np.arange(len(points)), labels]


def _lloyd(points: np.ndarray, k: int, rng: np.random.Generator,
           max_iter: int) -> tuple[np.ndarray, np.ndarray, float]:
    centroids = _kmeans_pp_init(points, k, rng)
    labels = np.full(len(points), -1)
    for _ in range(max_iter):
        new_labels, dist2 = _assign(points, centroids)
        # empty clusters are reseeded from the current farthest point, which
        # keeps the run deterministic
        for cid in range(k):
            if not np.any(new_labels == cid):
                far = int(np.argmax(dist2))
                centroids[cid] = points[far]
                new_labels, dist2 = _assign(points, centroids)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for cid in range(k):
            centroids[cid] = points[labels == cid].mean(axis=0)
    labels, dist2 = _assign(points, centroids)
    return centroids, labels, float(dist2.sum())


def fit_kmeans(points, k: int, seed: int = 0, restarts: int = 8,
               max_iter: int = 100) -> KMeansModel:
    """Best-of-restarts Lloyd's with k-means++ seeding; unweighted distance.

    Populates per-cluster distance stats and the mu + 3*sigma outlier
    threshold. Deterministic under a fixed seed.
    """
    pts = _as_matrix(points)
    if k < 1:
        raise ValidationError("k must be >= 1")
    if k > len(pts):
        raise ValidationError(f"k={k} exceeds {len(pts)} points")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        centroids, labels, wcss = _lloyd(pts, k, rng, max_iter)
        if best is None or wcss < best[2]:
            best = (centroids, labels, wcss)
    centroids, labels, wcss = best
    stats = []
    for cid in range(k):
        member_d = np.linalg.norm(pts[labels == cid] - centroids[cid], axis=1)
        if len(member_d) == 0:
            stats.append(ClusterStats(mu=0.0, sigma=0.0, threshold=0.0))
            continue
        mu = float(member_d.mean())
        sigma = float(member_d.std())
        stats.append(ClusterStats(mu=mu, sigma=sigma, threshold=mu + 3.0 * sigma))
    return KMeansModel(k=k, centroids=centroids, assignments=labels,
                       stats=stats, wcss=wcss)


def _as_matrix(points) -> np.ndarray:
    if isinstance(points, np.ndarray):
        pts = np.asarray(points, dtype=np.float64)
    else:
        pts = np.array(
            [p.as_array() if isinstance(p, WorkloadState) else np.asarray(p, dtype=np.float64)
             for p in points]
        )
    if pts.ndim != 2 or pts.shape[1] != WS_DIM:
        raise ValidationError(f"expected an (n, {WS_DIM}) state matrix, got {pts.shape}")
    if len(pts) == 0:
        raise ValidationError("no points")
    return pts


def select_k_elbow(points, cfg: ClusteringConfig) -> int:
    """Numeric elbow: smallest k whose relative WCSS drop to k+1 falls below
    the threshold; the top of the range if no drop ever flattens out."""
    pts = _as_matrix(points)
    if np.allclose(pts, pts[0]):
        return 1
    lo, hi = cfg.k_range
    hi = min(hi, len(pts))
    lo = min(lo, hi)
    wcss = {}
    for k in range(lo, hi + 1):
        wcss[k] = fit_kmeans(pts, k, seed=cfg.seed, restarts=cfg.restarts,
                             max_iter=cfg.max_iter).wcss
    for k in range(lo, hi):
        if wcss[k] <= 0:
            return k
        drop = (wcss[k] - wcss[k + 1]) / wcss[k]
        if drop < cfg.elbow_drop_threshold:
            return k
    return hi


# -- feature weights ---------------------------------------------------------

def _build_tree(x: np.ndarray, y: np.ndarray, depth: int, max_depth: int,
                min_leaf: int, importances: np.ndarray) -> TreeNode:
    node = TreeNode(value=float(y.mean()))
    n = len(y)
    if depth >= max_depth or n < 2 * min_leaf:
        return node
    parent_sse = float(((y - y.mean()) ** 2).sum())
    if parent_sse <= 0:
        return node
    best_gain = 0.0
    best = None
    for f in range(x.shape[1]):
        order = np.argsort(x[:, f], kind="stable")
        xs, ys = x[order, f], y[order]
        csum = np.cumsum(ys)
        csum2 = np.cumsum(ys ** 2)
        total, total2 = csum[-1], csum2[-1]
        # candidate split after position i (1-based left size), both sides >= min_leaf
        for i in range(min_leaf, n - min_leaf + 1):
            if xs[i - 1] == xs[i]:
                continue
            left_sse = csum2[i - 1] - csum[i - 1] ** 2 / i
            right_n = n - i
            right_sum = total - csum[i - 1]
            right_sse = (total2 - csum2[i - 1]) - right_sum ** 2 / right_n
            gain = parent_sse - left_sse - right_sse
            if gain > best_gain:
                best_gain = gain
                best = (f, (xs[i - 1] + xs[i]) / 2.0)
    if best is None:
        return node
    f, split = best
    importances[f] += best_gain
    mask = x[:, f] <= split
    node.feature = f
    node.split = float(split)
    node.left = _build_tree(x[mask], y[mask], depth + 1, max_depth, min_leaf, importances)
    node.right = _build_tree(x[~mask], y[~mask], depth + 1, max_depth, min_leaf, importances)
    return node


def fit_feature_weights(ws: np.ndarray, ipc: np.ndarray,
                        cfg: ClusteringConfig) -> tuple[np.ndarray, TreeNode | None, bool]:
    """Fit the per-cluster regression tree and return its normalized
    impurity-decrease importances as K-NN feature weights.

    Returns (weights, tree, degraded): degraded is set when the member count
    is below 2*min_leaf (uniform fallback, logged) or no split was possible.
    """
    uniform = np.full(WS_DIM, 1.0 / WS_DIM)
    if len(ipc) < 2 * cfg.tree_min_leaf:
        logger.warning("cluster with %d members is too small for weight fitting; "
                       "falling back to uniform weights", len(ipc))
        return uniform, None, True
    importances = np.zeros(WS_DIM)
    tree = _build_tree(np.asarray(ws, dtype=np.float64), np.asarray(ipc, dtype=np.float64),
                       0, cfg.tree_max_depth, cfg.tree_min_leaf, importances)
    total = importances.sum()
    if total <= 0:
        return uniform, tree, True
    return importances / total, tree, False


# -- fitting and queries -----------------------------------------------------

def fit_cluster_model(db: PerfDatabase, cfg: ClusteringConfig,
                      k: int | None = None) -> tuple[KMeansModel, ClusterIndex]:
    """Full offline fit: choose k (elbow) unless given, cluster, then fit the
    per-cluster weights and neighbor indexes."""
    if len(db) == 0:
        raise ValidationError("cannot fit on an empty database")
    pts = db.ws_matrix()
    ipc = db.ipc_vector()
    if k is None:
        k = select_k_elbow(pts, cfg)
    model = fit_kmeans(pts, k, seed=cfg.seed, restarts=cfg.restarts,
                       max_iter=cfg.max_iter)
    entries = []
    for cid in range(model.k):
        members = np.flatnonzero(model.assignments == cid)
        weights, tree, degraded = fit_feature_weights(pts[members], ipc[members], cfg)
        entries.append(ClusterEntry(member_indices=members, weights=weights,
                                    tree=tree, weights_degraded=degraded))
    index = ClusterIndex(
        space=db.space,
        entries=entries,
        ws=pts,
        ipc=ipc,
        configs=[p.config for p in db.points],
        ipc_min=db.ipc_min,
        ipc_max=db.ipc_max,
    )
    return model, index


def outlier_check(model: KMeansModel, ws: WorkloadState) -> OutlierResult:
    """Nearest centroid plus the mu + 3*sigma membership test."""
    cid, dist = model.nearest_centroid(ws.as_array())
    return OutlierResult(cluster_id=cid, distance=dist,
                         is_outlier=dist > model.stats[cid].threshold)


def knn_query(index: ClusterIndex, model: KMeansModel, ws: WorkloadState,
              knn_k: int) -> tuple[ParamConfig, float, int]:
    """Answer a tuning query: the configuration of the best-IPC member among
    the knn_k weighted-nearest states in the query's cluster.

    IPC ties break toward the smaller weighted distance, then the
    lexicographically smaller config. Clusters smaller than knn_k use all
    members.
    """
    x = ws.as_array()
    cid, _ = model.nearest_centroid(x)
    entry = index.entries[cid]
    members = entry.member_indices
    diffs = index.ws[members] - x
    dist = np.sqrt((diffs * diffs) @ entry.weights)
    order = np.argsort(dist, kind="stable")[:knn_k]
    best_pos = min(
        order,
        key=lambda i: (-index.ipc[members[i]], dist[i], index.configs[members[i]].values),
    )
    gidx = members[best_pos]
    return index.configs[gidx], float(index.ipc[gidx]), cid


# -- model artifact ----------------------------------------------------------

def save_model(path: str, model: KMeansModel, index: ClusterIndex,
               cfg: ClusteringConfig, db_path: str | None = None) -> None:
    body = {
        "database": db_path,
        "space": index.space.to_dict(),
        "k": model.k,
        "wcss": model.wcss,
        "centroids": model.centroids.tolist(),
        "assignments": model.assignments.tolist(),
        "knn_k": cfg.knn_k,
        "ipc_min": index.ipc_min,
        "ipc_max": index.ipc_max,
        "clusters": [
            {
                "mu": s.mu,
                "sigma": s.sigma,
                "threshold": s.threshold,
                "weights": e.weights.tolist(),
                "weights_degraded": e.weights_degraded,
                "members": e.member_indices.tolist(),
                "tree": e.tree.to_dict() if e.tree is not None else None,
            }
            for s, e in zip(model.stats, index.entries)
        ],
    }
    artifacts.write_json(path, MODEL_KIND, body)


def model_database_path(path: str) -> str | None:
    """The database path recorded in a model file at fit time, if any."""
    return artifacts.read_json(path, MODEL_KIND).get("database")


def load_model(path: str, db: PerfDatabase) -> tuple[KMeansModel, ClusterIndex, int]:
    """Load a model file back against its database; returns the stored knn_k too."""
    doc = artifacts.read_json(path, MODEL_KIND)
    space = ParamSpace.from_dict(doc["space"])
    if space.to_dict() != db.space.to_dict():
        raise artifacts.ArtifactError(
            f"{path}: model space {space.solution!r} does not match database "
            f"space {db.space.solution!r}"
        )
    if any(m >= len(db) for c in doc["clusters"] for m in c["members"]):
        raise artifacts.ArtifactError(f"{path}: member index beyond database size")
    model = KMeansModel(
        k=int(doc["k"]),
        centroids=np.array(doc["centroids"], dtype=np.float64),
        assignments=np.array(doc["assignments"], dtype=np.int64),
        stats=[ClusterStats(mu=c["mu"], sigma=c["sigma"], threshold=c["threshold"])
               for c in doc["clusters"]],
        wcss=float(doc["wcss"]),
    )
    entries = [
        ClusterEntry(
            member_indices=np.array(c["members"], dtype=np.int64),
            weights=np.array(c["weights"], dtype=np.float64),
            tree=TreeNode.from_dict(c["tree"]) if c["tree"] is not None else None,
            weights_degraded=bool(c["weights_degraded"]),
        )
        for c in doc["clusters"]
    ]
    index = ClusterIndex(
        space=space,
        entries=entries,
        ws=db.ws_matrix(),
        ipc=db.ipc_vector(),
        configs=[p.config for p in db.points],
        ipc_min=float(doc["ipc_min"]),
        ipc_max=float(doc["ipc_max"]),
    )
    return model, index, int(doc["knn_k"])
