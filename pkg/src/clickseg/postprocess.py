"""Graph post-processing of annotated masks: outlier removal, segment smoothing.

Outlier removal keeps only mask points spatially connected (through the kNN
graph restricted to the mask) to some positive click. Segment smoothing
repeatedly adds points whose flagged-neighbor fraction exceeds a threshold.
"""

from __future__ import annotations

import warnings

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .geometry import NeighborIndex


def mask_graph_edges(index: NeighborIndex, mask: np.ndarray, degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Undirected edge list: (i, j) whenever j is in i's kNN and both are masked."""
    nbrs = index.knn_all(degree)
    src = np.repeat(np.arange(index.n), nbrs.shape[1])
    dst = nbrs.ravel()
    keep = mask[src] & mask[dst]
    return src[keep], dst[keep]


def outlier_removal(
    index: NeighborIndex,
    mask: np.ndarray,
    positives: list[int],
    degree: int = 3,
) -> np.ndarray:
    """Keep mask points in a connected component containing a positive click."""
    mask = np.asarray(mask, dtype=bool)
    if not positives:
        warnings.warn("outlier removal skipped: no positive clicks", stacklevel=2)
        return mask.copy()
    if not mask[list(positives)].all():
        raise ValueError("positive clicks must lie inside the mask")
    n = index.n
    src, dst = mask_graph_edges(index, mask, degree)
    graph = coo_matrix((np.ones(len(src)), (src, dst)), shape=(n, n))
    _, comp = connected_components(graph, directed=False)
    keep_comps = np.unique(comp[list(positives)])
    return mask & np.isin(comp, keep_comps)


def segment_smoothing(
    index: NeighborIndex,
    mask: np.ndarray,
    n_smooth: int = 32,
    gamma: float = 0.7,
    n_iter: int = 5,
) -> np.ndarray:
    """Iteratively add unflagged points whose flagged-neighbor fraction > gamma.

    Each round counts against the round-start mask and applies additions
    synchronously; a round that adds nothing ends the loop early.
    """
    if not 0 < gamma <= 1:
        raise ValueError("gamma must be in (0, 1]")
    mask = np.asarray(mask, dtype=bool).copy()
    nbrs = index.knn_all(n_smooth)
    denom = nbrs.shape[1]
    if denom == 0:
        return mask
    for _ in range(n_iter):
        frac = mask[nbrs].sum(axis=1) / denom
        add = (~mask) & (frac > gamma)
        if not add.any():
            break
        mask |= add
    return mask


def refine_mask(
    index: NeighborIndex,
    raw_mask: np.ndarray,
    positives: list[int],
    negatives: list[int],
    degree: int = 3,
    n_smooth: int = 32,
    gamma: float = 0.7,
    n_iter: int = 5,
    use_or: bool = True,
    use_ss: bool = True,
) -> np.ndarray:
    """Full pipeline: outlier removal then smoothing, negatives re-excluded last."""
    mask = np.asarray(raw_mask, dtype=bool)
    if use_or and positives:
        mask = outlier_removal(index, mask, positives, degree)
    if use_ss:
        mask = segment_smoothing(index, mask, n_smooth, gamma, n_iter)
        if negatives:
            mask = mask.copy()
            mask[list(negatives)] = False
    return mask
