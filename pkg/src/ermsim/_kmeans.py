"""Weighted Lloyd k-means with seeded k-means++ seeding.

Shared by region partitioning and cell clustering. Ties resolve to the lowest
index everywhere so results depend only on the inputs and the seed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class KMeansResult:
    centers: np.ndarray
    labels: np.ndarray
    wcss_history: tuple[float, ...]
    iterations: int


def sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centers[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def nearest(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # argmin returns the first minimum, i.e. lowest center index on ties
    return np.argmin(sq_dists(points, centers), axis=1)


def wcss(points: np.ndarray, weights: np.ndarray, centers: np.ndarray, labels: np.ndarray) -> float:
    d = points - centers[labels]
    return float(np.sum(weights * np.einsum("ij,ij->i", d, d)))


def kmeans_pp_init(points: np.ndarray, weights: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    chosen = [int(rng.choice(n, p=weights / weights.sum()))]
    d2 = sq_dists(points, points[chosen]).min(axis=1)
    while len(chosen) < k:
        mass = weights * d2
        total = mass.sum()
        if total <= 0.0:
            # every remaining point coincides with a center; take the lowest unused index
            free = [i for i in range(n) if i not in chosen]
            nxt = free[0]
        else:
            nxt = int(rng.choice(n, p=mass / total))
        chosen.append(nxt)
        d2 = np.minimum(d2, sq_dists(points, points[[nxt]])[:, 0])
    return points[chosen].astype(float).copy()


def lloyd(points: np.ndarray, weights: np.ndarray, k: int, seed: int, max_iters: int = 100) -> KMeansResult:
    """Run weighted Lloyd iterations from a k-means++ start.

    Each point stands for ``weight`` identical samples, so weighting a cell
    centroid by its incident count equals clustering one sample per incident.
    A center that loses all its points stays where it is.
    """
    points = np.asarray(points, dtype=float)
    weights = np.asarray(weights, dtype=float)
    rng = np.random.default_rng(seed)
    centers = kmeans_pp_init(points, weights, k, rng)
    labels = nearest(points, centers)
    history = [wcss(points, weights, centers, labels)]
    it = 0
    for it in range(1, max_iters + 1):
        new_centers = centers.copy()
        for j in range(k):
            m = labels == j
            w = weights[m].sum()
            if w > 0:
                new_centers[j] = (weights[m, None] * points[m]).sum(axis=0) / w
        new_labels = nearest(points, new_centers)
        history.append(wcss(points, weights, new_centers, new_labels))
        converged = np.array_equal(new_labels, labels) and np.allclose(new_centers, centers, rtol=0, atol=1e-12)
        centers, labels = new_centers, new_labels
        if converged:
            break
    return KMeansResult(centers=centers, labels=labels, wcss_history=tuple(history), iterations=it)


def assign_nonempty(items: np.ndarray, centers: np.ndarray, max_rounds: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-center assignment of ``items`` with empty-group repair.

    While some group is empty, the item of the largest group farthest from its
    own center moves to the empty group, whose center is re-anchored on that
    item; assignments are then recomputed by nearest center. When coincident
    items make the Voronoi step unable to fill a group, the move is kept as a
    plain reassignment.
    """
    items = np.asarray(items, dtype=float)
    centers = np.asarray(centers, dtype=float).copy()
    k = len(centers)
    if k > len(items):
        raise ValueError("more groups than items")
    labels = nearest(items, centers)
    voronoi_rounds = max_rounds if max_rounds is not None else k * len(items)
    voronoi = True
    for round_ in range(voronoi_rounds + k + 1):
        if round_ >= voronoi_rounds:
            voronoi = False
        counts = np.bincount(labels, minlength=k)
        empty = np.flatnonzero(counts == 0)
        if len(empty) == 0:
            return labels, centers
        target = int(empty[0])
        largest = int(np.argmax(counts))
        members = np.flatnonzero(labels == largest)
        d = np.einsum("ij,ij->i", items[members] - centers[largest], items[members] - centers[largest])
        mover = int(members[np.argmax(d)])
        centers[target] = items[mover]
        if voronoi:
            relabeled = nearest(items, centers)
            if relabeled[mover] == target:
                labels = relabeled
                continue
            voronoi = False
        labels = labels.copy()
        labels[mover] = target
    raise RuntimeError("empty-group repair did not terminate")
