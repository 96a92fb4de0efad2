"""Self-tuning spectral clustering of daily load profiles.

Pipeline: local scales from the K-th nearest neighbor, Gaussian-kernel
affinity with zero diagonal, normalized Laplacian D^-1/2 W D^-1/2, top-k
eigenvector embedding with row normalization, then seeded k-means. The
number of clusters is picked by minimizing the Davies-Bouldin index over a
candidate range. Profiles are normalized to unit daily sum before
clustering so classes capture shape, not magnitude.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import eigh

from .amigen import DAY_KINDS, CUSTOMER_TYPES, DataSubset


class ClusteringError(ValueError):
    """Degenerate input for the clustering pipeline."""


def local_scales(points: np.ndarray, K: int = 7) -> np.ndarray:
    """Distance from each point to its K-th nearest neighbor.

    Degenerate ties (duplicated points) are clamped to a small positive
    floor proportional to the dataset diameter.
    """
    X = np.asarray(points, dtype=float)
    n = len(X)
    if n <= K:
        raise ClusteringError(f"need more than K={K} points, got {n}")
    d2 = np.sum((X[:, None, :] - X[None, :, :]) ** 2, axis=2)
    dist = np.sqrt(np.maximum(d2, 0.0))
    alphas = np.sort(dist, axis=1)[:, K]  # column 0 is the self-distance
    diameter = float(dist.max())
    if diameter == 0.0:
        raise ClusteringError("all points identical: local scales undefined")
    return np.maximum(alphas, 1e-9 * diameter)


def build_affinity(points: np.ndarray, alphas: np.ndarray) -> np.ndarray:
    """Gaussian-kernel adjacency w_ij = exp(-||Vi-Vj||^2 / (a_i a_j)), zero diagonal."""
    X = np.asarray(points, dtype=float)
    alphas = np.asarray(alphas, dtype=float)
    if np.any(alphas <= 0):
        raise ClusteringError("local scales must be positive")
    d2 = np.sum((X[:, None, :] - X[None, :, :]) ** 2, axis=2)
    W = np.exp(-d2 / np.outer(alphas, alphas))
    np.fill_diagonal(W, 0.0)
    return (W + W.T) / 2.0


def normalized_laplacian(W: np.ndarray) -> np.ndarray:
    """L = D^-1/2 W D^-1/2 for the (normalized-affinity) graph Laplacian."""
    W = np.asarray(W, dtype=float)
    deg = W.sum(axis=1)
    if np.any(deg <= 0):
        raise ClusteringError("isolated vertex: zero degree")
    dinv = 1.0 / np.sqrt(deg)
    L = W * np.outer(dinv, dinv)
    return (L + L.T) / 2.0


def spectral_embed(L: np.ndarray, k: int) -> np.ndarray:
    """Rows of the top-k eigenvectors of L, row-normalized, with canonical signs.

    Sign rule: each eigenvector's largest-magnitude entry is made positive
    (first such index on ties), so repeated calls are bit-identical.
    """
    L = np.asarray(L, dtype=float)
    n = L.shape[0]
    if not 2 <= k <= n:
        raise ClusteringError(f"k={k} outside [2, {n}]")
    vals, vecs = eigh(L)
    order = np.argsort(vals)[::-1][:k]
    X = vecs[:, order]
    for j in range(k):
        lead = int(np.argmax(np.abs(X[:, j])))
        if X[lead, j] < 0:
            X[:, j] = -X[:, j]
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return X / norms


def kmeans(
    points: np.ndarray,
    k: int,
    seed: int,
    restarts: int = 10,
    max_iter: int = 300,
) -> tuple[np.ndarray, np.ndarray]:
    """Plain k-means with seeded farthest-point init and empty-cluster reseeding.

    Returns (labels, centroids) of the best of ``restarts`` runs by inertia.
    """
    X = np.asarray(points, dtype=float)
    n = len(X)
    if k > n:
        raise ClusteringError(f"k={k} exceeds {n} points")
    if k == 1:
        return np.zeros(n, dtype=int), X.mean(axis=0, keepdims=True)
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        centers = _farthest_point_init(X, k, rng)
        labels = np.zeros(n, dtype=int)
        for _ in range(max_iter):
            d2 = np.sum((X[:, None, :] - centers[None, :, :]) ** 2, axis=2)
            labels = np.argmin(d2, axis=1)
            new_centers = np.empty_like(centers)
            for c in range(k):
                members = X[labels == c]
                if len(members) == 0:
                    # reseed to the point farthest from its assigned center
                    far = int(np.argmax(d2[np.arange(n), labels]))
                    new_centers[c] = X[far]
                else:
                    new_centers[c] = members.mean(axis=0)
            if np.allclose(new_centers, centers):
                centers = new_centers
                break
            centers = new_centers
        d2 = np.sum((X[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        labels = np.argmin(d2, axis=1)
        inertia = float(np.sum(d2[np.arange(n), labels]))
        if best is None or inertia < best[0]:
            best = (inertia, labels, centers)
    return best[1], best[2]


def _farthest_point_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    centers = [X[int(rng.integers(n))]]
    min_d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(k - 1):
        nxt = int(np.argmax(min_d2))
        centers.append(X[nxt])
        min_d2 = np.minimum(min_d2, np.sum((X - centers[-1]) ** 2, axis=1))
    return np.array(centers)


def davies_bouldin(points: np.ndarray, labels: np.ndarray) -> float:
    """Davies-Bouldin index; +inf when two cluster centroids coincide."""
    X = np.asarray(points, dtype=float)
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if len(uniq) < 2:
        raise ClusteringError("DBI needs at least 2 non-empty clusters")
    centroids = np.array([X[labels == c].mean(axis=0) for c in uniq])
    scatter = np.array(
        [np.mean(np.linalg.norm(X[labels == c] - centroids[i], axis=1)) for i, c in enumerate(uniq)]
    )
    m = len(uniq)
    worst = np.empty(m)
    for i in range(m):
        ratios = []
        for j in range(m):
            if j == i:
                continue
            sep = float(np.linalg.norm(centroids[i] - centroids[j]))
            ratios.append(np.inf if sep == 0 else (scatter[i] + scatter[j]) / sep)
        worst[i] = max(ratios)
    return float(np.mean(worst))


def cluster_once(points: np.ndarray, k: int, seed: int, K: int = 7,
                 restarts: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Full spectral-clustering pass at a fixed k: returns (labels, embedding)."""
    alphas = local_scales(points, K=K)
    W = build_affinity(points, alphas)
    L = normalized_laplacian(W)
    Y = spectral_embed(L, k)
    labels, _ = kmeans(Y, k, seed=seed, restarts=restarts)
    return labels, Y


@dataclass
class SelectKResult:
    k: int
    dbi_curve: dict[int, float]
    labels: np.ndarray  # labels at the chosen k


def select_k(points: np.ndarray, k_range: range, seed: int, K: int = 7,
             restarts: int = 10) -> SelectKResult:
    """Run the SC pipeline per candidate k and keep the DBI-minimizing one.

    The DBI is evaluated on the original points with each candidate's
    labels; ties break toward the smaller k.
    """
    X = np.asarray(points, dtype=float)
    n = len(X)
    ks = [k for k in k_range]
    if not ks:
        raise ClusteringError("empty k range")
    if ks[0] < 2 or ks[-1] > n - 1:
        raise ClusteringError(f"k range {ks[0]}..{ks[-1]} outside [2, {n - 1}]")
    curve: dict[int, float] = {}
    labels_by_k: dict[int, np.ndarray] = {}
    for k in ks:
        labels, _ = cluster_once(X, k, seed=seed, K=K, restarts=restarts)
        labels_by_k[k] = labels
        curve[k] = davies_bouldin(X, labels)
    best_k = min(ks, key=lambda k: (curve[k], k))
    return SelectKResult(k=best_k, dbi_curve=curve, labels=labels_by_k[best_k])


@dataclass
class PatternClass:
    class_id: int
    centroid: np.ndarray          # unit-sum 24-point shape
    member_ids: list[str]
    mean_daily_kwh: float         # average member daily energy (magnitude info)


@dataclass
class SubsetPatterns:
    customer_type: str
    day_kind: str
    chosen_k: int
    dbi_curve: dict[int, float]
    classes: list[PatternClass]
    labels: dict[str, int]        # customer id -> class id


@dataclass
class PatternBank:
    subsets: dict[tuple[str, str], SubsetPatterns] = field(default_factory=dict)

    def get(self, customer_type: str, day_kind: str) -> SubsetPatterns:
        return self.subsets[(customer_type, day_kind)]

    def to_dict(self) -> dict:
        out = {"schema_version": 1, "subsets": {}}
        for (t, k), sp in sorted(self.subsets.items()):
            out["subsets"][f"{t}/{k}"] = {
                "customer_type": sp.customer_type,
                "day_kind": sp.day_kind,
                "chosen_k": sp.chosen_k,
                "dbi_curve": {str(kk): vv for kk, vv in sp.dbi_curve.items()},
                "classes": [
                    {
                        "class_id": c.class_id,
                        "centroid": [float(v) for v in c.centroid],
                        "member_ids": list(c.member_ids),
                        "mean_daily_kwh": c.mean_daily_kwh,
                    }
                    for c in sp.classes
                ],
                "labels": dict(sp.labels),
            }
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "PatternBank":
        bank = cls()
        for key, spraw in raw["subsets"].items():
            t, k = key.split("/")
            bank.subsets[(t, k)] = SubsetPatterns(
                customer_type=spraw["customer_type"],
                day_kind=spraw["day_kind"],
                chosen_k=int(spraw["chosen_k"]),
                dbi_curve={int(kk): float(vv) for kk, vv in spraw["dbi_curve"].items()},
                classes=[
                    PatternClass(
                        class_id=int(c["class_id"]),
                        centroid=np.array(c["centroid"], dtype=float),
                        member_ids=list(c["member_ids"]),
                        mean_daily_kwh=float(c["mean_daily_kwh"]),
                    )
                    for c in spraw["classes"]
                ],
                labels={cid: int(lab) for cid, lab in spraw["labels"].items()},
            )
        return bank

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "PatternBank":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class ClusterConfig:
    K: int = 7
    k_min: int = 2
    k_max: int = 10
    restarts: int = 10
    seed: int = 0


def cluster_subset(subset: DataSubset, cfg: ClusterConfig) -> SubsetPatterns:
    """Cluster one (type, day kind) subset and summarize its classes."""
    if len(subset) < 4:
        raise ClusteringError(
            f"subset {subset.customer_type}/{subset.day_kind} too small to cluster"
            f" ({len(subset)} profiles)"
        )
    raw = np.array([p.values for p in subset.profiles])
    sums = raw.sum(axis=1)
    if np.any(sums <= 0):
        raise ClusteringError("profile with zero total energy")
    X = raw / sums[:, None]
    kmax = min(cfg.k_max, len(X) - 1, max(2, len(X) // 2))
    sel = select_k(X, range(cfg.k_min, kmax + 1), seed=cfg.seed, K=min(cfg.K, len(X) - 1),
                   restarts=cfg.restarts)
    classes = []
    labels_map: dict[str, int] = {}
    for c in sorted(np.unique(sel.labels)):
        members = np.where(sel.labels == c)[0]
        member_ids = [subset.profiles[i].customer_id for i in members]
        for cid in member_ids:
            labels_map[cid] = int(c)
        classes.append(
            PatternClass(
                class_id=int(c),
                centroid=X[members].mean(axis=0),
                member_ids=member_ids,
                mean_daily_kwh=float(sums[members].mean()),
            )
        )
    return SubsetPatterns(
        customer_type=subset.customer_type,
        day_kind=subset.day_kind,
        chosen_k=sel.k,
        dbi_curve=sel.dbi_curve,
        classes=classes,
        labels=labels_map,
    )


def build_pattern_bank(
    subsets: dict[tuple[str, str], DataSubset], cfg: ClusterConfig
) -> PatternBank:
    """Cluster every non-empty subset; empty subsets are skipped."""
    bank = PatternBank()
    for key in sorted(subsets):
        subset = subsets[key]
        if len(subset) == 0:
            continue
        bank.subsets[key] = cluster_subset(subset, cfg)
    if not bank.subsets:
        raise ClusteringError("no non-empty subsets to cluster")
    return bank
