"""Click-driven annotation: click sets, per-click radii, mask computation.

A point is annotated when its embedding falls strictly inside some positive
click's ball, whose radius is the default alpha capped by the distance to the
nearest negative click. Clicked points override the distance rule: a positive
click's point is always in, a negative click's point never is.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .geometry import NeighborIndex, PointCloud


class ClickError(ValueError):
    """Duplicate or out-of-range click index."""


@dataclass
class ClickSet:
    """Ordered positive/negative click indices plus the default radius."""

    positives: list[int] = field(default_factory=list)
    negatives: list[int] = field(default_factory=list)
    alpha: float = 0.35

    def validate_new(self, index: int, n: int) -> None:
        if not 0 <= index < n:
            raise ClickError(f"click index {index} out of range [0, {n})")
        if index in self.positives or index in self.negatives:
            raise ClickError(f"point {index} already clicked")


def positive_radii(embeddings: np.ndarray, clicks: ClickSet) -> np.ndarray:
    """Radius of each positive click: min(alpha, nearest negative-click distance)."""
    if not clicks.positives:
        return np.empty(0)
    pos = embeddings[clicks.positives]
    if not clicks.negatives:
        return np.full(len(clicks.positives), clicks.alpha)
    neg = embeddings[clicks.negatives]
    d = np.linalg.norm(pos[:, None, :] - neg[None, :, :], axis=2).min(axis=1)
    return np.minimum(clicks.alpha, d)


def annotate(embeddings: np.ndarray, clicks: ClickSet) -> np.ndarray:
    """Boolean mask over all points for the current click set."""
    n = embeddings.shape[0]
    mask = np.zeros(n, dtype=bool)
    if clicks.positives:
        radii = positive_radii(embeddings, clicks)
        pos = embeddings[clicks.positives]
        dists = np.linalg.norm(embeddings[:, None, :] - pos[None, :, :], axis=2)
        mask = np.any(dists < radii[None, :], axis=1)
        mask[clicks.positives] = True
    mask[clicks.negatives] = False
    return mask


@dataclass
class Session:
    """One annotation session: cloud, embeddings, clicks, cached mask, undo stack.

    The cached mask is kept equal to annotate(current clicks) after every
    mutation. Embedding offsets (used by online tuning of non-parametric
    backends) are part of the session and included in undo snapshots.
    """

    cloud: PointCloud
    embeddings: np.ndarray
    clicks: ClickSet = field(default_factory=ClickSet)
    history_limit: int = 64
    index: NeighborIndex = None
    offsets: np.ndarray | None = None
    mask: np.ndarray = field(init=False)
    _history: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.embeddings.shape[0] != self.cloud.n:
            raise ValueError("embedding row count must equal point count")
        if self.index is None:
            self.index = NeighborIndex.build(self.cloud)
        self.mask = annotate(self.effective_embeddings(), self.clicks)

    def effective_embeddings(self) -> np.ndarray:
        if self.offsets is None:
            return self.embeddings
        return self.embeddings + self.offsets

    def _snapshot(self):
        state = (
            copy.deepcopy(self.clicks),
            self.mask.copy(),
            None if self.offsets is None else self.offsets.copy(),
            self.embeddings,
        )
        self._history.append(state)
        if len(self._history) > self.history_limit:
            self._history.pop(0)

    def recompute(self) -> np.ndarray:
        self.mask = annotate(self.effective_embeddings(), self.clicks)
        return self.mask

    def add_click(self, kind: str, index: int) -> np.ndarray:
        """Append one click; returns the new raw mask. Session unchanged on error."""
        if kind not in ("positive", "negative"):
            raise ClickError(f"unknown click kind {kind!r}")
        self.clicks.validate_new(index, self.cloud.n)
        self._snapshot()
        (self.clicks.positives if kind == "positive" else self.clicks.negatives).append(index)
        return self.recompute()

    def add_scribble(self, indices) -> np.ndarray:
        """Densely mark negatives; duplicates and already-negative indices skipped."""
        self._snapshot()
        for index in indices:
            index = int(index)
            if not 0 <= index < self.cloud.n:
                raise ClickError(f"scribble index {index} out of range")
            if index in self.clicks.negatives or index in self.clicks.positives:
                continue
            self.clicks.negatives.append(index)
        return self.recompute()

    def undo(self) -> np.ndarray:
        if not self._history:
            raise ClickError("nothing to undo")
        clicks, mask, offsets, embeddings = self._history.pop()
        self.clicks = clicks
        self.mask = mask
        self.offsets = offsets
        self.embeddings = embeddings
        return self.mask

    def can_undo(self) -> bool:
        return bool(self._history)
