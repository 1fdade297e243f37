"""Exhaustive block matching over a strided patch grid.

Supplies non-local positives (most similar patches), reverse non-local
negatives (most dissimilar patches) and the random / grid-neighbour
baselines used for ablations.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

STRATEGIES = ("random", "neighbour", "nonlocal")
LOCATION_STRATEGIES = ("random", "reverse_nonlocal")

# rows of the query block evaluated at once; bounds peak memory
_CHUNK_ELEMS = 8_000_000


def patch_distance(p: np.ndarray, q: np.ndarray) -> float:
    """Squared L2 distance, accumulated in float64."""
    p = np.asarray(p)
    q = np.asarray(q)
    if p.shape != q.shape:
        raise ValueError(f"patch shapes differ: {p.shape} vs {q.shape}")
    d = p.astype(np.float64) - q.astype(np.float64)
    return float(np.sum(d * d))


@dataclass
class PatchGrid:
    source: np.ndarray
    patch: int
    stride: int
    rows: int
    cols: int

    @property
    def count(self) -> int:
        return self.rows * self.cols

    @property
    def index_map(self) -> np.ndarray:
        """``(count, 2)`` top-left ``(row, col)`` pixel coordinates, row-major."""
        r, c = np.divmod(np.arange(self.count), self.cols)
        return np.stack([r * self.stride, c * self.stride], axis=1)

    def coords(self, index: int) -> tuple[int, int]:
        r, c = divmod(int(index), self.cols)
        return r * self.stride, c * self.stride

    def patch_at(self, index: int) -> np.ndarray:
        y, x = self.coords(index)
        return self.source[y:y + self.patch, x:x + self.patch]

    @cached_property
    def _vectors(self) -> np.ndarray:
        img = self.source if self.source.ndim == 3 else self.source[:, :, None]
        win = np.lib.stride_tricks.sliding_window_view(img, (self.patch, self.patch), axis=(0, 1))
        win = win[::self.stride, ::self.stride][: self.rows, : self.cols]
        # (rows, cols, C, P, P) -> (count, P, P, C) so rows flatten like patch_at
        return np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2).reshape(self.count, -1), dtype=np.float64)

    def vectors(self) -> np.ndarray:
        """All patches flattened to ``(count, P*P*C)`` float64 rows."""
        return self._vectors

    def check_index(self, index) -> None:
        index = np.asarray(index)
        if index.size and (index.min() < 0 or index.max() >= self.count):
            raise IndexError(f"patch index out of range [0, {self.count})")


def build_grid(img: np.ndarray, patch: int, stride: int) -> PatchGrid:
    img = np.asarray(img)
    if img.ndim not in (2, 3):
        raise ValueError("image must be H x W or H x W x C")
    h, w = img.shape[:2]
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if patch < 1 or patch > min(h, w):
        raise ValueError(f"patch {patch} does not fit a {h}x{w} image")
    return PatchGrid(img, patch, stride, (h - patch) // stride + 1, (w - patch) // stride + 1)


def distances_from(grid: PatchGrid, queries) -> np.ndarray:
    """``(len(queries), count)`` squared distances from each query to every patch."""
    queries = np.atleast_1d(np.asarray(queries, dtype=np.int64))
    grid.check_index(queries)
    vecs = grid.vectors()
    out = np.empty((len(queries), grid.count), np.float64)
    step = max(1, _CHUNK_ELEMS // max(1, vecs.size))
    for s in range(0, len(queries), step):
        q = queries[s:s + step]
        diff = vecs[None, :, :] - vecs[q][:, None, :]
        out[s:s + step] = np.einsum("qnd,qnd->qn", diff, diff)
    return out


@dataclass
class MatchResult:
    query_index: int
    indices: np.ndarray
    distances: np.ndarray


def _ranked(grid: PatchGrid, query_index: int, k: int, farthest: bool) -> MatchResult:
    if not 1 <= k <= grid.count - 1:
        raise ValueError(f"k={k} outside [1, {grid.count - 1}]")
    dist = distances_from(grid, [query_index])[0]
    idx = np.arange(grid.count)
    keep = idx != query_index
    idx, dist = idx[keep], dist[keep]
    # lexsort: last key is primary; ties resolved by smaller index
    order = np.lexsort((idx, -dist if farthest else dist))[:k]
    return MatchResult(int(query_index), idx[order], dist[order])


def topk_similar(grid: PatchGrid, query_index: int, k: int) -> MatchResult:
    return _ranked(grid, query_index, k, farthest=False)


def topk_dissimilar(grid: PatchGrid, query_index: int, k: int) -> MatchResult:
    return _ranked(grid, query_index, k, farthest=True)


def grid_neighbours(grid: PatchGrid, index: int, k: int) -> np.ndarray:
    """The ``k`` grid cells closest to ``index`` by Chebyshev ring, then index.

    For an interior cell and ``k=8`` these are the 8-connected neighbours;
    border cells borrow from the next ring.
    """
    if not 0 <= k <= grid.count - 1:
        raise ValueError(f"k={k} outside [0, {grid.count - 1}]")
    r0, c0 = divmod(int(index), grid.cols)
    r, c = np.divmod(np.arange(grid.count), grid.cols)
    ring = np.maximum(np.abs(r - r0), np.abs(c - c0))
    ring[index] = -1
    order = np.lexsort((np.arange(grid.count), ring))
    return order[1:k + 1]


# --------------------------------------------------------------------------
# contrastive sample selection


@dataclass
class LayerSample:
    """Patch indices for the layer contrast.

    ``positives`` lie on the background grid (``positives[0]`` is the anchor),
    ``negatives`` on the rain grid, in groups labelled by ``negative_groups``;
    ``negative_anchors`` holds the first member of each group.
    """

    positives: np.ndarray
    negatives: np.ndarray
    negative_groups: np.ndarray
    negative_anchors: np.ndarray

    @property
    def anchors(self) -> np.ndarray:
        return np.concatenate([self.positives[:1], self.negative_anchors])


def _group(grid: PatchGrid, anchor: int, size: int, strategy: str, rng) -> np.ndarray:
    if strategy == "nonlocal":
        rest = topk_similar(grid, anchor, size - 1).indices if size > 1 else np.empty(0, int)
    elif strategy == "neighbour":
        rest = grid_neighbours(grid, anchor, size - 1)
    else:
        raise ValueError(strategy)
    return np.concatenate([[anchor], rest]).astype(np.int64)


def _validate_strategy(name: str, allowed) -> None:
    if name not in allowed:
        raise ValueError(f"unknown strategy {name!r}; expected one of {allowed}")


def sample_positive_group(grid: PatchGrid, n: int, strategy: str, rng: np.random.Generator) -> np.ndarray:
    _validate_strategy(strategy, STRATEGIES)
    if not 1 <= n <= grid.count:
        raise ValueError(f"cannot draw {n} positives from {grid.count} patches")
    if strategy == "random":
        return rng.choice(grid.count, size=n, replace=False).astype(np.int64)
    anchor = int(rng.integers(grid.count))
    return _group(grid, anchor, n, strategy, rng)


def sample_negative_groups(
    grid: PatchGrid, n: int, group: int, strategy: str, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """``n`` indices in groups of ``group + 1`` (anchor + ``group`` companions)."""
    _validate_strategy(strategy, STRATEGIES)
    if not 1 <= n <= grid.count:
        raise ValueError(f"cannot draw {n} negatives from {grid.count} patches")
    size = group + 1
    if size > grid.count:
        raise ValueError(f"group of {size} exceeds grid of {grid.count}")
    n_groups = math.ceil(n / size)
    if strategy == "random":
        idx = rng.choice(grid.count, size=n, replace=False).astype(np.int64)
        return idx, np.arange(n) // size
    if n_groups > grid.count:
        raise ValueError(f"{n_groups} anchors exceed grid of {grid.count}")
    anchors = rng.choice(grid.count, size=n_groups, replace=False)
    members = [_group(grid, int(a), size, strategy, rng) for a in anchors]
    idx = np.concatenate(members)[:n]
    labels = np.repeat(np.arange(n_groups), size)[:n]
    return idx, labels


def sample_layer_contrast(b_est: np.ndarray, r_est: np.ndarray, cfg, rng: np.random.Generator) -> LayerSample:
    """Select background positives and rain negatives on the current estimates.

    ``cfg`` supplies ``patch``, ``stride``, ``n_pos``, ``n_neg``, ``neg_group``,
    ``pos_strategy`` and ``neg_strategy``.
    """
    b_grid = build_grid(b_est, cfg.patch, cfg.stride)
    r_grid = build_grid(r_est, cfg.patch, cfg.stride)
    pos = sample_positive_group(b_grid, cfg.n_pos, cfg.pos_strategy, rng)
    neg, groups = sample_negative_groups(r_grid, cfg.n_neg, cfg.neg_group, cfg.neg_strategy, rng)
    first = np.flatnonzero(np.r_[True, groups[1:] != groups[:-1]])
    return LayerSample(pos, neg, groups, neg[first])


@dataclass
class LocationSample:
    queries: np.ndarray  # (N,)
    negatives: np.ndarray  # (N, N), row i holds negatives of queries[i]


def sample_location_contrast(obs: np.ndarray, cfg, rng: np.random.Generator) -> LocationSample:
    """Query locations on the observation grid with their negative locations.

    ``cfg`` supplies ``patch``, ``stride``, ``n_loc`` and ``loc_neg_strategy``.
    """
    _validate_strategy(cfg.loc_neg_strategy, LOCATION_STRATEGIES)
    grid = build_grid(obs, cfg.patch, cfg.stride)
    n = cfg.n_loc
    if not 1 <= n <= grid.count - 1:
        raise ValueError(f"N={n} exceeds grid size - 1 = {grid.count - 1}")
    queries = rng.choice(grid.count, size=n, replace=False).astype(np.int64)
    if cfg.loc_neg_strategy == "random":
        neg = np.empty((n, n), np.int64)
        for row, q in enumerate(queries):
            others = rng.choice(grid.count - 1, size=n, replace=False)
            neg[row] = others + (others >= q)
        return LocationSample(queries, neg)
    dist = distances_from(grid, queries)
    idx = np.arange(grid.count)
    neg = np.empty((n, n), np.int64)
    for row, q in enumerate(queries):
        keep = idx != q
        order = np.lexsort((idx[keep], -dist[row][keep]))[:n]
        neg[row] = idx[keep][order]
    return LocationSample(queries, neg)


def mean_positive_distance(b_est: np.ndarray, positives: np.ndarray, patch: int, stride: int) -> float:
    """Mean squared distance from the positive anchor to its companions."""
    grid = build_grid(b_est, patch, stride)
    if len(positives) < 2:
        return 0.0
    d = distances_from(grid, positives[:1])[0]
    return float(d[positives[1:]].mean())
