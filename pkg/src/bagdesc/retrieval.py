"""Retrieval evaluation: keypoint-match ranking and VLAD aggregation.

Matching-based retrieval ranks database images by the hard bag match score
at a threshold tuned on a separate split (the relaxation exists only for
learning). VLAD-based retrieval sums descriptor-minus-centroid residuals per
k-means centroid, concatenates the blocks, L2-normalizes the result, and
ranks by inner product. Quality is summarized by NN / FT / ST: the fraction
of same-class items within the top 1, C-1, and 2(C-1) results for a class
with C members, averaged over all queries. Queries never rank themselves.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data import BagDataset
from .matching import GramPair, hard_match_score
from .net import DescriptorNet, forward_bag

__all__ = [
    "RetrievalEntry",
    "RetrievalIndex",
    "VladCodebook",
    "build_match_index",
    "match_retrieve",
    "nn_ft_st",
    "sweep_tau",
    "default_tau_grid",
    "kmeans",
    "vlad_encode",
    "vlad_retrieve",
    "write_score_rows",
]


@dataclass
class RetrievalEntry:
    image_id: int
    object_id: int
    payload: np.ndarray  # [n, d] descriptor matrix or flat VLAD vector


@dataclass
class RetrievalIndex:
    entries: list[RetrievalEntry]

    def __post_init__(self):
        ids = [e.image_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("image ids must be unique")

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class VladCodebook:
    """k-means centroids used to aggregate descriptors into one vector."""

    centroids: np.ndarray
    distortion_history: list[float] | None = None

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 1:
            raise ValueError(f"centroids must be [k,d] with k >= 1, got {self.centroids.shape}")
        if not np.all(np.isfinite(self.centroids)):
            raise ValueError("centroids contain non-finite values")
        k = self.centroids.shape[0]
        for a in range(k):
            for b in range(a + 1, k):
                if np.array_equal(self.centroids[a], self.centroids[b]):
                    raise ValueError(f"centroids {a} and {b} are identical")

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


def build_match_index(net: DescriptorNet, dataset: BagDataset) -> RetrievalIndex:
    """Descriptor matrices for every bag, image ids in dataset order."""
    entries = [
        RetrievalEntry(i, bag.object_id, forward_bag(net, bag).data)
        for i, bag in enumerate(dataset.bags)
    ]
    return RetrievalIndex(entries)


def match_retrieve(
    query_desc: np.ndarray,
    index: RetrievalIndex,
    tau: float,
    exclude_image_id: int | None = None,
) -> list[tuple[int, float]]:
    """Database images by descending hard match score; ties by ascending id."""
    candidates = [e for e in index.entries if e.image_id != exclude_image_id]
    if not candidates:
        raise ValueError("index has no entries to rank")
    scored = [
        (e.image_id, hard_match_score(GramPair(query_desc, e.payload), tau))
        for e in candidates
    ]
    scored.sort(key=lambda item: (-item[1], item[0]))
    return scored


def nn_ft_st(
    rankings: list[tuple[int, list[int]]],
    class_sizes: dict[int, int],
) -> tuple[float, float, float]:
    """Average retrieval scores over queries.

    `rankings` holds (query_object_id, retrieved object ids in rank order);
    `class_sizes` maps object id to its total member count C (including the
    query). Per query: NN is 1 when the top result shares the class, FT and
    ST count same-class hits in the top C-1 and top 2(C-1), both divided by
    C-1. Classes with a single member cannot be scored.
    """
    if not rankings:
        raise ValueError("need at least one query ranking")
    nn_total = ft_total = st_total = 0.0
    for query_obj, retrieved in rankings:
        c = class_sizes.get(query_obj)
        if c is None or c < 2:
            raise ValueError(f"class {query_obj} has fewer than 2 members")
        relevant = c - 1
        nn_total += 1.0 if retrieved and retrieved[0] == query_obj else 0.0
        ft_total += sum(1 for o in retrieved[:relevant] if o == query_obj) / relevant
        st_total += sum(1 for o in retrieved[: 2 * relevant] if o == query_obj) / relevant
    q = len(rankings)
    return nn_total / q, ft_total / q, st_total / q


def default_tau_grid() -> np.ndarray:
    """0.05 to 2.00 in steps of 0.05."""
    return np.round(np.arange(1, 41) * 0.05, 2)


def _rank_all(index: RetrievalIndex, tau: float) -> list[tuple[int, list[int]]]:
    by_id = {e.image_id: e for e in index.entries}
    rankings = []
    for entry in index.entries:
        ranked = match_retrieve(entry.payload, index, tau, exclude_image_id=entry.image_id)
        rankings.append((entry.object_id, [by_id[i].object_id for i, _ in ranked]))
    return rankings


def _dataset_class_sizes(dataset: BagDataset) -> dict[int, int]:
    return {oid: len(views) for oid, views in dataset.by_object.items()}


def sweep_tau(
    dataset: BagDataset,
    net: DescriptorNet,
    tau_grid=None,
) -> tuple[float, list[tuple[float, float, float, float]]]:
    """Evaluate every threshold on the grid; best by NN, then FT, then
    smallest tau. Returns (best_tau, [(tau, NN, FT, ST), ...])."""
    grid = default_tau_grid() if tau_grid is None else np.asarray(tau_grid, dtype=np.float64)
    if grid.size == 0:
        raise ValueError("tau grid must not be empty")
    if np.any(grid <= 0.0) or np.any(grid >= 4.0):
        raise ValueError("tau grid values must lie in (0, 4)")
    index = build_match_index(net, dataset)
    class_sizes = _dataset_class_sizes(dataset)
    rows = []
    best = None
    for tau in grid:
        nn, ft, st = nn_ft_st(_rank_all(index, float(tau)), class_sizes)
        rows.append((float(tau), nn, ft, st))
        if best is None or (nn, ft) > (rows[best][1], rows[best][2]):
            best = len(rows) - 1
    return rows[best][0], rows


def kmeans(
    descriptors: np.ndarray,
    k: int,
    seed: int,
    max_iters: int = 100,
) -> VladCodebook:
    """Cluster rows of `descriptors` with seeded k-means++ and Lloyd sweeps.

    Iterates to an assignment fixpoint (or max_iters). An empty cluster is
    re-seeded to the point currently farthest from its assigned centroid.
    Deterministic given the seed.
    """
    points = np.asarray(descriptors, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError(f"descriptors must be [m,d], got {points.shape}")
    m = points.shape[0]
    if k < 1 or m < k:
        raise ValueError(f"need at least k={k} points, got {m}")
    rng = np.random.Generator(np.random.PCG64(seed))

    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[int(rng.integers(m))]
    closest = np.sum((points - centroids[0]) ** 2, axis=1)
    for c in range(1, k):
        total = closest.sum()
        if total > 0:
            probs = closest / total
            choice = int(rng.choice(m, p=probs))
        else:
            choice = int(rng.integers(m))
        centroids[c] = points[choice]
        closest = np.minimum(closest, np.sum((points - centroids[c]) ** 2, axis=1))

    history: list[float] = []
    previous = None
    for _ in range(max_iters):
        d2 = (
            np.sum(points * points, axis=1)[:, None]
            - 2.0 * points @ centroids.T
            + np.sum(centroids * centroids, axis=1)[None]
        )
        assign = np.argmin(d2, axis=1)
        own_dist = d2[np.arange(m), assign].copy()
        for c in range(k):
            if not np.any(assign == c):
                far = int(np.argmax(own_dist))
                centroids[c] = points[far]
                assign[far] = c
                own_dist[far] = -1.0
        if previous is not None and np.array_equal(assign, previous):
            break
        for c in range(k):
            centroids[c] = points[assign == c].mean(axis=0)
        history.append(float(np.mean(np.sum((points - centroids[assign]) ** 2, axis=1))))
        previous = assign
    return VladCodebook(centroids, history)


def vlad_encode(descriptors: np.ndarray, codebook: VladCodebook) -> np.ndarray:
    """Concatenated per-centroid residual sums, globally L2-normalized.

    Each descriptor contributes (descriptor - centroid) to its nearest
    centroid's block (ties to the lowest index). The output has length
    k * descriptor_dim; an all-zero residual encodes as the zero vector.
    """
    points = np.asarray(descriptors, dtype=np.float64)
    cents = codebook.centroids
    if points.ndim != 2 or points.shape[1] != cents.shape[1]:
        raise ValueError(
            f"descriptors {points.shape} incompatible with centroids {cents.shape}"
        )
    d2 = (
        np.sum(points * points, axis=1)[:, None]
        - 2.0 * points @ cents.T
        + np.sum(cents * cents, axis=1)[None]
    )
    assign = np.argmin(d2, axis=1)
    blocks = np.zeros_like(cents)
    np.add.at(blocks, assign, points - cents[assign])
    flat = blocks.reshape(-1)
    norm = np.linalg.norm(flat)
    return flat / norm if norm > 0 else flat


def vlad_retrieve(
    query_vlad: np.ndarray,
    index: RetrievalIndex,
    exclude_image_id: int | None = None,
) -> list[tuple[int, float]]:
    """Database images by descending inner product; ties by ascending id."""
    query = np.asarray(query_vlad, dtype=np.float64)
    candidates = [e for e in index.entries if e.image_id != exclude_image_id]
    if not candidates:
        raise ValueError("index has no entries to rank")
    for e in candidates:
        if e.payload.shape != query.shape:
            raise ValueError(
                f"VLAD dimension mismatch: query {query.shape}, entry {e.payload.shape}"
            )
    scored = [(e.image_id, float(e.payload @ query)) for e in candidates]
    scored.sort(key=lambda item: (-item[1], item[0]))
    return scored


def write_score_rows(path, header: list[str], rows) -> None:
    """Plain-text CSV with repr-formatted floats (byte-stable)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
