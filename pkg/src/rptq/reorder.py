"""Channel clustering and reorder-index construction.

Channels are clustered on their range signatures — (min, max) points for
ordinary activations, (q_max, q_min, k_max, k_min) 4-points for joint Q/K —
with seeded k-means++ / Lloyd iterations on raw (unnormalized) coordinates.
The resulting permutation lists each cluster's channels contiguously, which
is what lets one (scale, zero point) pair serve a contiguous slice.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .tensor import check_permutation, inverse_permutation

DEFAULT_MAX_ITER = 100
DEFAULT_N_INIT = 10


@dataclass(frozen=True)
class ReorderPlan:
    """A channel permutation partitioned into contiguous clusters.

    perm lists all channels of cluster 1, then cluster 2, ...; cluster_sizes
    gives the boundaries; centroids holds one signature point per cluster.
    """

    perm: np.ndarray
    cluster_sizes: np.ndarray
    centroids: np.ndarray

    def __post_init__(self) -> None:
        sizes = np.asarray(self.cluster_sizes, dtype=np.int64)
        perm = check_permutation(np.asarray(self.perm), int(sizes.sum()))
        if sizes.ndim != 1 or len(sizes) < 1 or np.any(sizes < 1):
            raise ValidationError("every cluster must hold at least one channel")
        centroids = np.asarray(self.centroids, dtype=np.float64)
        if centroids.ndim != 2 or centroids.shape[0] != len(sizes):
            raise ValidationError("need one centroid per cluster")
        for arr in (perm, sizes, centroids):
            arr.flags.writeable = False
        object.__setattr__(self, "perm", perm)
        object.__setattr__(self, "cluster_sizes", sizes)
        object.__setattr__(self, "centroids", centroids)

    @property
    def g(self) -> int:
        return len(self.cluster_sizes)

    @property
    def num_channels(self) -> int:
        return len(self.perm)

    @property
    def inverse_perm(self) -> np.ndarray:
        return inverse_permutation(self.perm)

    def cluster_slices(self) -> list[slice]:
        """Contiguous index ranges of each cluster in reordered space."""
        bounds = np.concatenate([[0], np.cumsum(self.cluster_sizes)])
        return [slice(int(bounds[i]), int(bounds[i + 1])) for i in range(self.g)]

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.perm, np.arange(self.num_channels)))


def identity_plan(num_channels: int, signatures: np.ndarray | None = None) -> ReorderPlan:
    """Single-cluster plan that leaves channel order untouched."""
    if signatures is None:
        centroid = np.zeros((1, 2))
    else:
        centroid = np.asarray(signatures, dtype=np.float64).mean(axis=0, keepdims=True)
    return ReorderPlan(
        perm=np.arange(num_channels, dtype=np.int64),
        cluster_sizes=np.array([num_channels], dtype=np.int64),
        centroids=centroid,
    )


# ---------------------------------------------------------------------------
# K-means
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia_trace: tuple[float, ...]

    @property
    def inertia(self) -> float:
        return self.inertia_trace[-1]


def _plusplus_init(points: np.ndarray, g: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centroids = np.empty((g, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, g):
        total = d2.sum()
        if total <= 0.0:  # all remaining points coincide with chosen centroids
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[i] = points[idx]
        d2 = np.minimum(d2, ((points - centroids[i]) ** 2).sum(axis=1))
    return centroids


def _fill_empty_clusters(assignments: np.ndarray, d2_assigned: np.ndarray, g: int) -> np.ndarray:
    """Move the point farthest from its centroid into each empty cluster."""
    assignments = assignments.copy()
    counts = np.bincount(assignments, minlength=g)
    for empty in np.flatnonzero(counts == 0):
        donors = counts[assignments] > 1
        if not donors.any():
            raise ValidationError("cannot repair empty cluster: too few points")
        cand = np.where(donors, d2_assigned, -np.inf)
        donor = int(np.argmax(cand))
        counts[assignments[donor]] -= 1
        assignments[donor] = empty
        counts[empty] += 1
        d2_assigned = d2_assigned.copy()
        d2_assigned[donor] = 0.0
    return assignments


def _lloyd(points: np.ndarray, centroids: np.ndarray, g: int,
           max_iter: int) -> KMeansResult:
    n = len(points)
    centroids = centroids.copy()
    assignments = np.full(n, -1, dtype=np.int64)
    trace: list[float] = []
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assign = d2.argmin(axis=1)
        new_assign = _fill_empty_clusters(new_assign, d2[np.arange(n), new_assign], g)
        if np.array_equal(new_assign, assignments):
            break
        assignments = new_assign
        for c in range(g):
            centroids[c] = points[assignments == c].mean(axis=0)
        inertia = float(((points - centroids[assignments]) ** 2).sum())
        if trace and inertia > trace[-1] * (1 + 1e-12) + 1e-300:
            raise AssertionError(
                f"Lloyd inertia increased: {trace[-1]} -> {inertia}"
            )
        trace.append(inertia)
    return KMeansResult(assignments=assignments, centroids=centroids,
                        inertia_trace=tuple(trace))


def kmeans_full(points: np.ndarray, g: int, seed: int,
                max_iter: int = DEFAULT_MAX_ITER,
                n_init: int = DEFAULT_N_INIT) -> KMeansResult:
    """Seeded k-means++ plus Lloyd iterations; never returns an empty cluster.

    Runs `n_init` independently seeded restarts and keeps the lowest-inertia
    fixed point (Lloyd alone gets stuck in local optima too often on small
    instances). Fully deterministic for a fixed (seed, n_init). Within each
    restart the SSE is tracked after every centroid update and is guaranteed
    non-increasing (a tiny relative slack covers float rounding).
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValidationError("points must be a 2-d array")
    n = len(points)
    if g < 1:
        raise ValidationError(f"cluster count {g} < 1")
    if g > n:
        raise ValidationError(f"cluster count {g} exceeds point count {n}")
    if n_init < 1:
        raise ValidationError("n_init must be positive")

    best: KMeansResult | None = None
    for restart in range(n_init):
        rng = np.random.default_rng([seed, restart])
        centroids = _plusplus_init(points, g, rng)
        result = _lloyd(points, centroids, g, max_iter)
        if best is None or result.inertia < best.inertia:
            best = result
    return best  # type: ignore[return-value]


def kmeans(points: np.ndarray, g: int, seed: int,
           max_iter: int = DEFAULT_MAX_ITER,
           n_init: int = DEFAULT_N_INIT) -> np.ndarray:
    """Cluster assignments in [0, g) for each point; deterministic per seed."""
    return kmeans_full(points, g, seed, max_iter, n_init).assignments


# ---------------------------------------------------------------------------
# Plan construction
# ---------------------------------------------------------------------------

def build_reorder(assignments: np.ndarray, signatures: np.ndarray) -> ReorderPlan:
    """Concatenate the clusters' channel indices into one reorder index.

    Clusters are emitted in ascending order of their centroid's smallest
    coordinate; within a cluster, channels keep ascending original index.
    Either ordering choice is quantization-neutral, this one is just fixed
    for determinism.
    """
    assignments = np.asarray(assignments, dtype=np.int64)
    signatures = np.asarray(signatures, dtype=np.float64)
    if signatures.ndim != 2 or len(signatures) != len(assignments):
        raise ValidationError("need one signature point per assigned channel")
    labels = np.unique(assignments)
    members = [np.flatnonzero(assignments == lab) for lab in labels]
    centroids = np.stack([signatures[m].mean(axis=0) for m in members])
    order = sorted(
        range(len(labels)),
        key=lambda c: (centroids[c].min(), tuple(centroids[c]), int(members[c][0])),
    )
    perm = np.concatenate([members[c] for c in order])
    sizes = np.array([len(members[c]) for c in order], dtype=np.int64)
    return ReorderPlan(perm=perm, cluster_sizes=sizes, centroids=centroids[order])


def plan_reorder(signatures: np.ndarray, g: int, seed: int,
                 max_iter: int = DEFAULT_MAX_ITER) -> ReorderPlan:
    """kmeans + build_reorder in one step."""
    assignments = kmeans(signatures, g, seed, max_iter)
    return build_reorder(assignments, signatures)


def plan_uniform_groups(signatures: np.ndarray, g: int) -> ReorderPlan:
    """Comparison baseline: sort channels by range midpoint, then split into
    g near-equal contiguous groups (remainder spread over the first groups).
    """
    signatures = np.asarray(signatures, dtype=np.float64)
    n = len(signatures)
    if g < 1:
        raise ValidationError(f"group count {g} < 1")
    if g > n:
        raise ValidationError(f"group count {g} exceeds channel count {n}")
    midpoints = signatures.mean(axis=1)
    perm = np.argsort(midpoints, kind="stable").astype(np.int64)
    base, extra = divmod(n, g)
    sizes = np.array([base + (1 if i < extra else 0) for i in range(g)], dtype=np.int64)
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    centroids = np.stack([
        signatures[perm[bounds[i]:bounds[i + 1]]].mean(axis=0) for i in range(g)
    ])
    return ReorderPlan(perm=perm, cluster_sizes=sizes, centroids=centroids)


def concat_head_plans(plans: list[ReorderPlan]) -> ReorderPlan:
    """Stack per-head plans into one plan over the concatenated channel axis.

    Head h's permutation entries shift by the combined width of heads 0..h-1,
    so the global permutation never crosses head boundaries.
    """
    if not plans:
        raise ValidationError("no plans to concatenate")
    perms, sizes, cents = [], [], []
    offset = 0
    for p in plans:
        perms.append(p.perm + offset)
        sizes.append(p.cluster_sizes)
        cents.append(p.centroids)
        offset += p.num_channels
    return ReorderPlan(
        perm=np.concatenate(perms),
        cluster_sizes=np.concatenate(sizes),
        centroids=np.vstack(cents),
    )


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def plan_to_dict(plan: ReorderPlan) -> dict:
    return {
        "g": plan.g,
        "perm": plan.perm.tolist(),
        "cluster_sizes": plan.cluster_sizes.tolist(),
        "centroids": plan.centroids.tolist(),
    }


def plan_from_dict(doc: dict) -> ReorderPlan:
    plan = ReorderPlan(
        perm=np.asarray(doc["perm"], dtype=np.int64),
        cluster_sizes=np.asarray(doc["cluster_sizes"], dtype=np.int64),
        centroids=np.asarray(doc["centroids"], dtype=np.float64),
    )
    if plan.g != int(doc["g"]):
        raise ValidationError("cluster count disagrees with cluster_sizes")
    return plan


def save_plan(plan: ReorderPlan, path: str | Path) -> None:
    Path(path).write_text(json.dumps(plan_to_dict(plan), sort_keys=True, indent=1))


def load_plan(path: str | Path) -> ReorderPlan:
    return plan_from_dict(json.loads(Path(path).read_text()))
