"""Metric-learning objective over per-point embeddings.

Three terms: a hinge pulling each point toward its segment's embedding center,
a hinge pushing distinct segment centers apart, and a mean-norm regularizer.
All gradients are analytic, with subgradient 0 at hinge kinks and at
zero-length vectors.
"""

from __future__ import annotations

import numpy as np

from .config import LossWeights


def _segments(labels: np.ndarray) -> list[np.ndarray]:
    labels = np.asarray(labels)
    k = int(labels.max()) + 1
    groups = [np.flatnonzero(labels == i) for i in range(k)]
    for i, g in enumerate(groups):
        if g.size == 0:
            raise ValueError(f"segment {i} is empty")
    return groups


def segment_centers(embeddings: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """(K, d) matrix of per-segment embedding means."""
    groups = _segments(labels)
    return np.stack([embeddings[g].mean(axis=0) for g in groups])


def intra_cluster_loss(embeddings: np.ndarray, labels: np.ndarray, eps: float) -> float:
    """Mean hinged point-to-center distance, averaged within then across segments."""
    loss, _ = _intra_with_grad(embeddings, labels, eps, want_grad=False)
    return loss


def inter_cluster_loss(embeddings: np.ndarray, labels: np.ndarray, eps: float) -> float:
    """Mean hinged margin violation over ordered center pairs; 0 when K < 2."""
    loss, _ = _inter_with_grad(embeddings, labels, eps, want_grad=False)
    return loss


def norm_reg_loss(embeddings: np.ndarray) -> float:
    """Mean embedding norm."""
    return float(np.mean(np.linalg.norm(embeddings, axis=1)))


def _intra_with_grad(z, labels, eps, want_grad=True):
    groups = _segments(labels)
    k = len(groups)
    grad = np.zeros_like(z) if want_grad else None
    total = 0.0
    for g in groups:
        center = z[g].mean(axis=0)
        diff = z[g] - center
        dist = np.linalg.norm(diff, axis=1)
        active = dist > eps
        total += np.sum(dist[active] - eps) / g.size
        if want_grad and np.any(active):
            unit = diff[active] / dist[active][:, None]
            w = 1.0 / (k * g.size)
            np.add.at(grad, g[active], w * unit)
            grad[g] -= w * unit.sum(axis=0) / g.size
    return total / k, grad


def _inter_with_grad(z, labels, eps, want_grad=True):
    groups = _segments(labels)
    k = len(groups)
    grad = np.zeros_like(z) if want_grad else None
    if k < 2:
        return 0.0, grad
    centers = np.stack([z[g].mean(axis=0) for g in groups])
    diff = centers[:, None, :] - centers[None, :, :]
    dist = np.linalg.norm(diff, axis=2)
    off = ~np.eye(k, dtype=bool)
    viol = np.maximum(eps - dist, 0.0)
    total = viol[off].sum() / (k * (k - 1))
    if want_grad:
        grad_centers = np.zeros_like(centers)
        coeff = -1.0 / (k * (k - 1))
        for i in range(k):
            for j in range(k):
                if i == j or dist[i, j] >= eps or dist[i, j] == 0.0:
                    continue
                u = diff[i, j] / dist[i, j]
                grad_centers[i] += coeff * u
        for i, g in enumerate(groups):
            grad[g] += grad_centers[i] / g.size
    return total, grad


def _reg_with_grad(z, want_grad=True):
    norms = np.linalg.norm(z, axis=1)
    grad = None
    if want_grad:
        grad = np.zeros_like(z)
        nz = norms > 0
        grad[nz] = z[nz] / norms[nz][:, None] / z.shape[0]
    return float(norms.mean()), grad


def total_loss(
    embeddings: np.ndarray,
    labels: np.ndarray,
    weights: LossWeights,
    with_grad: bool = False,
):
    """Weighted objective; optionally returns the gradient w.r.t. the embeddings."""
    z = np.asarray(embeddings, dtype=np.float64)
    l_intra, g_intra = _intra_with_grad(z, labels, weights.eps_intra, with_grad)
    l_inter, g_inter = _inter_with_grad(z, labels, weights.eps_inter, with_grad)
    l_reg, g_reg = _reg_with_grad(z, with_grad)
    value = (
        weights.lambda_intra * l_intra
        + weights.lambda_inter * l_inter
        + weights.lambda_reg * l_reg
    )
    if not with_grad:
        return value
    grad = (
        weights.lambda_intra * g_intra
        + weights.lambda_inter * g_inter
        + weights.lambda_reg * g_reg
    )
    return value, grad
