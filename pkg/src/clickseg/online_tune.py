"""Human-in-loop fine-tuning: push negative-click embeddings away from positives.

The energy averages, over negative clicks, the hinged shortfall of the distance
to the nearest positive click below a margin. Trainable backends take gradient
steps on their parameters; fixed backends tune session-local additive per-point
embedding offsets instead.
"""

from __future__ import annotations

import numpy as np

from .embedding import TrainedBackend
from .interact import Session, annotate


class NotTunableError(RuntimeError):
    """Backend has no parameter gradients and offset tuning is disabled."""


def finetune_energy(pos_embeddings: np.ndarray, neg_embeddings: np.ndarray, eps: float) -> float:
    """Mean hinged margin violation of negatives against their nearest positive."""
    if len(pos_embeddings) == 0:
        raise ValueError("at least one positive click required")
    if len(neg_embeddings) == 0:
        return 0.0
    d = np.linalg.norm(neg_embeddings[:, None, :] - pos_embeddings[None, :, :], axis=2)
    return float(np.maximum(eps - d.min(axis=1), 0.0).mean())


def energy_grad(pos_embeddings: np.ndarray, neg_embeddings: np.ndarray, eps: float):
    """Gradient of the energy w.r.t. both click embedding blocks.

    Ties in the nearest-positive choice attribute the gradient to the
    lowest-index positive; zero-distance pairs get subgradient 0.
    """
    n_neg = len(neg_embeddings)
    g_pos = np.zeros_like(pos_embeddings)
    g_neg = np.zeros_like(neg_embeddings)
    if n_neg == 0:
        return g_pos, g_neg
    d = np.linalg.norm(neg_embeddings[:, None, :] - pos_embeddings[None, :, :], axis=2)
    nearest = d.argmin(axis=1)  # argmin takes the lowest index on ties
    for i in range(n_neg):
        j = nearest[i]
        dist = d[i, j]
        if dist >= eps or dist == 0.0:
            continue
        u = (neg_embeddings[i] - pos_embeddings[j]) / dist
        g_neg[i] += -u / n_neg
        g_pos[j] += u / n_neg
    return g_pos, g_neg


def session_energy(session: Session, eps: float) -> float:
    z = session.effective_embeddings()
    return finetune_energy(z[session.clicks.positives], z[session.clicks.negatives], eps)


def finetune_step(
    session: Session,
    backend,
    steps: int = 10,
    step_size: float = 1e-3,
    eps: float = 0.75,
    allow_offsets: bool = True,
) -> float:
    """Guarded gradient descent on the click-separation energy.

    Each step is accepted only if the energy does not increase; otherwise the
    step size is halved and retried, up to 5 times. Re-embeds the cloud and
    recomputes the session mask. Returns the final energy.
    """
    clicks = session.clicks
    if not clicks.positives:
        raise ValueError("fine-tuning requires at least one positive click")
    if steps <= 0:
        return session_energy(session, eps)

    trainable = isinstance(backend, TrainedBackend)
    if not trainable and not allow_offsets:
        raise NotTunableError("backend not tunable")
    session._snapshot()

    if trainable:
        _tune_parameters(session, backend, steps, step_size, eps)
    else:
        _tune_offsets(session, steps, step_size, eps)
    session.recompute()
    return session_energy(session, eps)


def _click_grad_to_full(session: Session, g_pos, g_neg) -> np.ndarray:
    grad = np.zeros_like(session.effective_embeddings())
    grad[session.clicks.positives] = g_pos
    grad[session.clicks.negatives] = g_neg
    return grad


def _tune_parameters(session, backend, steps, step_size, eps):
    clicks = session.clicks
    for _ in range(steps):
        z, state = backend.embed_with_cache(session.cloud, session.index)
        zc = z if session.offsets is None else z + session.offsets
        e0 = finetune_energy(zc[clicks.positives], zc[clicks.negatives], eps)
        if e0 == 0.0:
            session.embeddings = z
            return
        g_pos, g_neg = energy_grad(zc[clicks.positives], zc[clicks.negatives], eps)
        grad_z = _click_grad_to_full(session, g_pos, g_neg)
        grad_p = backend.param_grad(grad_z, state)
        lr = step_size
        saved = backend.params.copy()
        for _ in range(6):
            backend.params = saved - lr * grad_p
            z_new = backend.embed(session.cloud, session.index)
            zc_new = z_new if session.offsets is None else z_new + session.offsets
            e1 = finetune_energy(zc_new[clicks.positives], zc_new[clicks.negatives], eps)
            if e1 <= e0:
                session.embeddings = z_new
                break
            lr *= 0.5
        else:
            backend.params = saved
            return
    session.embeddings = backend.embed(session.cloud, session.index)


def _tune_offsets(session, steps, step_size, eps):
    clicks = session.clicks
    if session.offsets is None:
        session.offsets = np.zeros_like(session.embeddings)
    for _ in range(steps):
        z = session.effective_embeddings()
        e0 = finetune_energy(z[clicks.positives], z[clicks.negatives], eps)
        if e0 == 0.0:
            return
        g_pos, g_neg = energy_grad(z[clicks.positives], z[clicks.negatives], eps)
        grad = _click_grad_to_full(session, g_pos, g_neg)
        lr = step_size
        for _ in range(6):
            trial = session.offsets - lr * grad
            z_new = session.embeddings + trial
            e1 = finetune_energy(z_new[clicks.positives], z_new[clicks.negatives], eps)
            if e1 <= e0:
                session.offsets = trial
                break
            lr *= 0.5
        else:
            return


def expand_scribble(session: Session, indices) -> np.ndarray:
    """Add many negative clicks at once; mask recomputed once at the end."""
    return session.add_scribble(indices)
