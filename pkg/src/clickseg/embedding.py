"""Per-point embedding backends and training of the learnable one.

Backends:
  * DescriptorBackend — fixed multi-radius angular-histogram local descriptor,
    rotation invariant by construction.
  * TrainedBackend — pointwise MLP over position + normal + descriptor with
    two rounds of k=16 neighborhood mean aggregation; parameters trained with
    the metric objective in `losses`.
  * ImportedBackend — precomputed matrix loaded from file.
  * OneHotBackend — ground-truth one-hot embeddings, for oracle tests.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io as cio
from .config import LossWeights
from .forge import LabeledShape
from .geometry import NeighborIndex, PointCloud
from .losses import total_loss

DESCRIPTOR_RADII = (0.05, 0.1, 0.2)
DESCRIPTOR_BINS = 5
DESCRIPTOR_DIM = 3 * DESCRIPTOR_BINS * len(DESCRIPTOR_RADII)
_MAX_DESCRIPTOR_NEIGHBORS = 32
_AGG_K = 16


def compute_descriptors(cloud: PointCloud, index: NeighborIndex | None = None) -> np.ndarray:
    """Angular pair-feature histograms at three radii, L2-scaled per point.

    For each neighbor q of p: build the Darboux frame from p's normal and the
    offset direction, histogram the three pair angles, concatenate radii.
    """
    if index is None:
        index = NeighborIndex.build(cloud)
    n = cloud.n
    pos, nrm = cloud.positions, cloud.normals
    nbrs = index.knn_all(min(_MAX_DESCRIPTOR_NEIGHBORS, n - 1))
    offsets = pos[nbrs] - pos[:, None, :]          # (N, k, 3)
    dists = np.linalg.norm(offsets, axis=2)
    with np.errstate(invalid="ignore", divide="ignore"):
        dirs = np.where(dists[:, :, None] > 0, offsets / np.maximum(dists, 1e-30)[:, :, None], 0.0)
    u = nrm[:, None, :]                            # source normal
    nq = nrm[nbrs]                                 # neighbor normals
    v = np.cross(dirs, u)
    v_len = np.linalg.norm(v, axis=2, keepdims=True)
    v = np.where(v_len > 1e-12, v / np.maximum(v_len, 1e-30), 0.0)
    w = np.cross(u, v)
    alpha = np.einsum("nkd,nkd->nk", v, nq)
    phi = np.einsum("nkd,nkd->nk", u * np.ones_like(dirs), dirs)
    theta = np.arctan2(np.einsum("nkd,nkd->nk", w, nq), np.einsum("nkd,nkd->nk", u * np.ones_like(nq), nq))

    feats = np.zeros((n, DESCRIPTOR_DIM))
    col = 0
    for radius in DESCRIPTOR_RADII:
        within = dists <= radius
        for values, lo, hi in ((alpha, -1.0, 1.0), (phi, -1.0, 1.0), (theta, -np.pi, np.pi)):
            bins = np.clip(
                ((values - lo) / (hi - lo) * DESCRIPTOR_BINS).astype(int), 0, DESCRIPTOR_BINS - 1
            )
            for b in range(DESCRIPTOR_BINS):
                feats[:, col + b] = np.sum(within & (bins == b), axis=1)
            col += DESCRIPTOR_BINS
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    return feats / np.maximum(norms, 1e-12)


class DescriptorBackend:
    """Fixed local-geometry descriptor; not trainable."""

    identity = "descriptor"
    dim = DESCRIPTOR_DIM

    def embed(self, cloud: PointCloud, index: NeighborIndex | None = None) -> np.ndarray:
        return compute_descriptors(cloud, index)


class ImportedBackend:
    """Embeddings precomputed elsewhere and loaded from a matrix file."""

    identity = "imported"

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.matrix = cio.read_embedding(self.path)
        self.dim = self.matrix.shape[1]

    def embed(self, cloud: PointCloud, index: NeighborIndex | None = None) -> np.ndarray:
        if self.matrix.shape[0] != cloud.n:
            raise ValueError(
                f"imported matrix has {self.matrix.shape[0]} rows, cloud has {cloud.n} points"
            )
        return self.matrix


class OneHotBackend:
    """Oracle embeddings: row i is the one-hot of the ground-truth label."""

    identity = "oracle"

    def __init__(self, labels: np.ndarray, num_segments: int):
        self.labels = np.asarray(labels)
        self.dim = num_segments

    def embed(self, cloud: PointCloud, index: NeighborIndex | None = None) -> np.ndarray:
        if self.labels.shape[0] != cloud.n:
            raise ValueError("label count does not match cloud")
        return np.eye(self.dim)[self.labels]


class RandomBackend:
    """Seeded Gaussian embeddings; the no-information baseline."""

    identity = "random"

    def __init__(self, dim: int = 64, seed: int = 0):
        self.dim = dim
        self.seed = seed

    def embed(self, cloud: PointCloud, index: NeighborIndex | None = None) -> np.ndarray:
        # Seed from the cloud content so the same shape always embeds the same.
        h = hash((self.seed, cloud.n, float(cloud.positions[0, 0]))) % (2**31)
        return np.random.default_rng(h).normal(size=(cloud.n, self.dim))


_CKPT_MAGIC = b"CSB1"
_INPUT_DIM = 6 + DESCRIPTOR_DIM


@dataclass
class TrainedBackend:
    """Pointwise map with two neighborhood mean-aggregation rounds.

    x -> relu(W1 x) -> mean over self+kNN -> relu(W2 .) -> mean agg -> W3 .
    Parameters live in a flat vector; gradients come from manual backprop.
    """

    dim: int = 64
    hidden: int = 64
    params: np.ndarray = field(default=None, repr=False)
    identity: str = "trained"

    def __post_init__(self):
        if self.params is None:
            rng = np.random.default_rng(0)
            self.params = self._init_params(rng)
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (self.num_params(),):
            raise ValueError("parameter vector has wrong length")

    def num_params(self) -> int:
        h, d = self.hidden, self.dim
        return _INPUT_DIM * h + h + h * h + h + h * d + d

    def _init_params(self, rng: np.random.Generator) -> np.ndarray:
        h, d = self.hidden, self.dim
        parts = [
            rng.normal(scale=np.sqrt(2.0 / _INPUT_DIM), size=_INPUT_DIM * h),
            np.zeros(h),
            rng.normal(scale=np.sqrt(2.0 / h), size=h * h),
            np.zeros(h),
            rng.normal(scale=np.sqrt(1.0 / h), size=h * d),
            np.zeros(d),
        ]
        return np.concatenate(parts)

    def _unpack(self, p: np.ndarray):
        h, d = self.hidden, self.dim
        sizes = [_INPUT_DIM * h, h, h * h, h, h * d, d]
        offs = np.cumsum([0] + sizes)
        w1 = p[offs[0]:offs[1]].reshape(h, _INPUT_DIM)
        b1 = p[offs[1]:offs[2]]
        w2 = p[offs[2]:offs[3]].reshape(h, h)
        b2 = p[offs[3]:offs[4]]
        w3 = p[offs[4]:offs[5]].reshape(d, h)
        b3 = p[offs[5]:offs[6]]
        return w1, b1, w2, b2, w3, b3

    def _features(self, cloud: PointCloud, index: NeighborIndex) -> np.ndarray:
        desc = compute_descriptors(cloud, index)
        return np.hstack([cloud.positions, cloud.normals, desc])

    @staticmethod
    def _agg_sets(cloud: PointCloud, index: NeighborIndex) -> np.ndarray:
        """(N, m) table of self + up to k=16 nearest neighbors."""
        nbrs = index.knn_all(min(_AGG_K, cloud.n - 1))
        self_col = np.arange(cloud.n)[:, None]
        return np.hstack([self_col, nbrs])

    def _forward(self, x: np.ndarray, agg: np.ndarray):
        w1, b1, w2, b2, w3, b3 = self._unpack(self.params)
        pre1 = x @ w1.T + b1
        h1 = np.maximum(pre1, 0.0)
        a1 = h1[agg].mean(axis=1)
        pre2 = a1 @ w2.T + b2
        h2 = np.maximum(pre2, 0.0)
        a2 = h2[agg].mean(axis=1)
        z = a2 @ w3.T + b3
        cache = (x, pre1, h1, a1, pre2, h2, a2)
        return z, cache

    def embed(self, cloud: PointCloud, index: NeighborIndex | None = None) -> np.ndarray:
        if index is None:
            index = NeighborIndex.build(cloud)
        x = self._features(cloud, index)
        agg = self._agg_sets(cloud, index)
        z, _ = self._forward(x, agg)
        return z

    def embed_with_cache(self, cloud: PointCloud, index: NeighborIndex):
        x = self._features(cloud, index)
        agg = self._agg_sets(cloud, index)
        z, cache = self._forward(x, agg)
        return z, (agg, cache)

    def param_grad(self, grad_z: np.ndarray, state) -> np.ndarray:
        """Backpropagate d(loss)/dZ to a flat parameter gradient."""
        agg, (x, pre1, h1, a1, pre2, h2, a2) = state
        w1, b1, w2, b2, w3, b3 = self._unpack(self.params)
        m = agg.shape[1]

        g_w3 = grad_z.T @ a2
        g_b3 = grad_z.sum(axis=0)
        g_a2 = grad_z @ w3
        g_h2 = _agg_backward(g_a2, agg, m, h2.shape)
        g_pre2 = g_h2 * (pre2 > 0)
        g_w2 = g_pre2.T @ a1
        g_b2 = g_pre2.sum(axis=0)
        g_a1 = g_pre2 @ w2
        g_h1 = _agg_backward(g_a1, agg, m, h1.shape)
        g_pre1 = g_h1 * (pre1 > 0)
        g_w1 = g_pre1.T @ x
        g_b1 = g_pre1.sum(axis=0)
        return np.concatenate(
            [g_w1.ravel(), g_b1, g_w2.ravel(), g_b2, g_w3.ravel(), g_b3]
        )

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            fh.write(_CKPT_MAGIC)
            fh.write(struct.pack("<III", 1, self.dim, self.hidden))
            fh.write(self.params.astype("<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "TrainedBackend":
        raw = Path(path).read_bytes()
        if raw[:4] != _CKPT_MAGIC:
            raise ValueError("bad checkpoint magic")
        version, dim, hidden = struct.unpack_from("<III", raw, 4)
        if version != 1:
            raise ValueError(f"unsupported checkpoint version {version}")
        params = np.frombuffer(raw, dtype="<f8", offset=16).copy()
        return cls(dim=dim, hidden=hidden, params=params)


def _agg_backward(grad_out: np.ndarray, agg: np.ndarray, m: int, shape) -> np.ndarray:
    grad_in = np.zeros(shape)
    np.add.at(grad_in, agg.ravel(), np.repeat(grad_out / m, m, axis=0))
    return grad_in


@dataclass
class TrainOptions:
    epochs: int = 10
    learning_rate: float = 1e-3
    seed: int = 0
    checkpoint_dir: Path | None = None
    weights: LossWeights = field(default_factory=LossWeights)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, shape_id: int):
        super().__init__(f"NaN loss at epoch {epoch}, shape {shape_id}")
        self.epoch = epoch
        self.shape_id = shape_id


def train(
    backend: TrainedBackend,
    dataset: list[LabeledShape],
    opts: TrainOptions,
) -> tuple[TrainedBackend, list[float]]:
    """Adam over the metric objective, cosine-annealed step size, per-shape steps.

    Batches are whole shapes (the center term needs full segments). Returns the
    backend (mutated in place) and the per-epoch mean loss history.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(opts.seed)
    backend.params = backend._init_params(rng) if backend.params is None else backend.params
    m = np.zeros_like(backend.params)
    v = np.zeros_like(backend.params)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    history: list[float] = []
    caches = [None] * len(dataset)
    total_steps = opts.epochs * len(dataset)
    for epoch in range(opts.epochs):
        losses = []
        order = rng.permutation(len(dataset))
        for shape_idx in order:
            shape = dataset[shape_idx]
            if caches[shape_idx] is None:
                caches[shape_idx] = NeighborIndex.build(shape.cloud)
            index = caches[shape_idx]
            z, state = backend.embed_with_cache(shape.cloud, index)
            value, grad_z = total_loss(z, shape.labels, opts.weights, with_grad=True)
            if not np.isfinite(value):
                raise TrainingDiverged(epoch, int(shape_idx))
            grad_p = backend.param_grad(grad_z, state)
            lr = opts.learning_rate * 0.5 * (1 + np.cos(np.pi * step / max(total_steps, 1)))
            step += 1
            m = beta1 * m + (1 - beta1) * grad_p
            v = beta2 * v + (1 - beta2) * grad_p**2
            m_hat = m / (1 - beta1**step)
            v_hat = v / (1 - beta2**step)
            backend.params = backend.params - lr * m_hat / (np.sqrt(v_hat) + eps)
            losses.append(value)
        history.append(float(np.mean(losses)))
        if opts.checkpoint_dir is not None:
            opts.checkpoint_dir.mkdir(parents=True, exist_ok=True)
            backend.save(opts.checkpoint_dir / f"epoch_{epoch:04d}.ckpt")
    return backend, history


def load_backend(spec: str):
    """Resolve a backend string: "descriptor", "import:<file>", or a checkpoint path."""
    if spec == "descriptor":
        return DescriptorBackend()
    if spec.startswith("import:"):
        return ImportedBackend(spec.split(":", 1)[1])
    if spec.startswith("random"):
        return RandomBackend()
    return TrainedBackend.load(spec)
