"""Procedural primitive patches and their composition into labeled training shapes.

Shapes are assembled by posing a handful of parametric surface patches so that
each new patch's bounding sphere overlaps the ones already placed, pooling
oversampled surface points and farthest-point downsampling with labels kept.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io as cio
from .geometry import PointCloud, fps_indices, normalize_cloud

PRIMITIVE_KINDS = ("plane", "sphere", "cylinder", "cone", "torus")


@dataclass(frozen=True)
class Pose:
    """Rigid pose plus uniform scale: x -> scale * R(quat) x + translation."""

    quat: np.ndarray = field(default_factory=lambda: np.array([1.0, 0, 0, 0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        q = np.asarray(self.quat, dtype=np.float64)
        if abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise ValueError("quaternion must be unit norm")
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "quat", q)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))

    def rotation_matrix(self) -> np.ndarray:
        w, x, y, z = self.quat
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )

    def apply(self, points: np.ndarray, normals: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        r = self.rotation_matrix()
        return self.scale * points @ r.T + self.translation, normals @ r.T


@dataclass(frozen=True)
class PrimitiveSpec:
    """One parametric surface patch: kind, intrinsic sizes, world pose."""

    kind: str
    params: dict[str, float]
    pose: Pose = field(default_factory=Pose)

    def __post_init__(self):
        if self.kind not in PRIMITIVE_KINDS:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        for name, value in self.params.items():
            if value <= 0:
                raise ValueError(f"{self.kind} parameter {name} must be positive, got {value}")

    def bounding_radius(self) -> float:
        """Radius of a local-frame sphere containing the patch, after scale."""
        p = self.params
        if self.kind == "plane":
            r = 0.5 * np.hypot(p["width"], p["height"])
        elif self.kind == "sphere":
            r = p["radius"]
        elif self.kind == "cylinder":
            r = np.hypot(p["radius"], 0.5 * p["height"])
        elif self.kind == "cone":
            r = np.hypot(p["radius"], p["height"])
        else:  # torus
            r = p["ring_radius"] + p["tube_radius"]
        return r * self.pose.scale


@dataclass(frozen=True)
class LabeledShape:
    """Cloud plus per-point primitive-segment labels in [0, K)."""

    cloud: PointCloud
    labels: np.ndarray
    num_segments: int

    def __post_init__(self):
        lab = np.asarray(self.labels, dtype=np.int64)
        if lab.shape != (self.cloud.n,):
            raise ValueError("labels length must equal point count")
        present = np.unique(lab)
        if not np.array_equal(present, np.arange(self.num_segments)):
            raise ValueError("every label in [0, K) must occur at least once")
        lab.setflags(write=False)
        object.__setattr__(self, "labels", lab)

    def segment_mask(self, segment: int) -> np.ndarray:
        return self.labels == segment


def sample_primitive(spec: PrimitiveSpec, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Area-uniform surface samples with analytic outward normals, posed."""
    if n < 16:
        raise ValueError("need at least 16 samples per primitive")
    rng = np.random.default_rng(seed)
    p = spec.params
    if spec.kind == "plane":
        xy = (rng.random((n, 2)) - 0.5) * [p["width"], p["height"]]
        pts = np.column_stack([xy, np.zeros(n)])
        nrm = np.tile([0.0, 0.0, 1.0], (n, 1))
    elif spec.kind == "sphere":
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        pts = p["radius"] * v
        nrm = v
    elif spec.kind == "cylinder":
        theta = rng.random(n) * 2 * np.pi
        z = (rng.random(n) - 0.5) * p["height"]
        nrm = np.column_stack([np.cos(theta), np.sin(theta), np.zeros(n)])
        pts = np.column_stack([p["radius"] * np.cos(theta), p["radius"] * np.sin(theta), z])
    elif spec.kind == "cone":
        # apex at (0,0,h), base circle at z=0; area density grows linearly
        # with distance from the apex along the slant.
        r, h = p["radius"], p["height"]
        s = np.sqrt(rng.random(n))
        theta = rng.random(n) * 2 * np.pi
        pts = np.column_stack([r * s * np.cos(theta), r * s * np.sin(theta), h * (1 - s)])
        slant = np.hypot(r, h)
        nrm = np.column_stack(
            [np.cos(theta) * h / slant, np.sin(theta) * h / slant, np.full(n, r / slant)]
        )
    else:  # torus
        R, r = p["ring_radius"], p["tube_radius"]
        theta = rng.random(n) * 2 * np.pi
        phi = _torus_phi(rng, n, R, r)
        ring = np.column_stack([np.cos(theta), np.sin(theta), np.zeros(n)])
        nrm = ring * np.cos(phi)[:, None]
        nrm[:, 2] = np.sin(phi)
        pts = ring * (R + r * np.cos(phi))[:, None]
        pts[:, 2] = r * np.sin(phi)
    return spec.pose.apply(pts, nrm)


def _torus_phi(rng: np.random.Generator, n: int, ring: float, tube: float) -> np.ndarray:
    """Tube angle with density proportional to (ring + tube*cos(phi))."""
    out = np.empty(0)
    while out.size < n:
        cand = rng.random(n) * 2 * np.pi
        accept = rng.random(n) < (ring + tube * np.cos(cand)) / (ring + tube)
        out = np.concatenate([out, cand[accept]])
    return out[:n]


def surface_residual(spec: PrimitiveSpec, points: np.ndarray) -> np.ndarray:
    """Unsigned distance of world-space points to the primitive's surface."""
    pose = spec.pose
    local = (points - pose.translation) @ pose.rotation_matrix() / pose.scale
    p = spec.params
    if spec.kind == "plane":
        d = np.abs(local[:, 2])
    elif spec.kind == "sphere":
        d = np.abs(np.linalg.norm(local, axis=1) - p["radius"])
    elif spec.kind == "cylinder":
        d = np.abs(np.hypot(local[:, 0], local[:, 1]) - p["radius"])
    elif spec.kind == "cone":
        r, h = p["radius"], p["height"]
        rho = np.hypot(local[:, 0], local[:, 1])
        # distance to the slant line in the (rho, z) half-plane
        d = np.abs(h * rho + r * local[:, 2] - r * h) / np.hypot(r, h)
    else:  # torus
        rho = np.hypot(local[:, 0], local[:, 1])
        d = np.abs(np.hypot(rho - p["ring_radius"], local[:, 2]) - p["tube_radius"])
    return d * pose.scale


@dataclass(frozen=True)
class ForgeConfig:
    """Randomization ranges for reshuffled shape generation."""

    k_range: tuple[int, int] = (3, 12)
    n_points: int = 4096
    noise_sigma: float = 0.0
    min_segment_points: int = 16
    oversample_factor: float = 2.0
    kinds: tuple[str, ...] = PRIMITIVE_KINDS


@dataclass(frozen=True)
class ComposeResult:
    shape: LabeledShape
    specs: tuple[PrimitiveSpec, ...]
    center: np.ndarray   # normalization shift applied to pooled points
    scale: float         # normalization scale divisor
    pooled_positions: np.ndarray  # pre-normalization positions of kept points


def _random_quat(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


def _random_spec(rng: np.random.Generator, kind: str) -> PrimitiveSpec:
    u = rng.uniform
    if kind == "plane":
        params = {"width": u(0.4, 1.0), "height": u(0.4, 1.0)}
    elif kind == "sphere":
        params = {"radius": u(0.2, 0.5)}
    elif kind == "cylinder":
        params = {"radius": u(0.15, 0.4), "height": u(0.4, 1.0)}
    elif kind == "cone":
        params = {"radius": u(0.2, 0.45), "height": u(0.4, 0.9)}
    else:
        ring = u(0.25, 0.45)
        params = {"ring_radius": ring, "tube_radius": u(0.25, 0.6) * ring}
    return PrimitiveSpec(kind, params, Pose(quat=_random_quat(rng)))


def reshuffle_compose(config: ForgeConfig, seed: int) -> LabeledShape:
    """Compose a random labeled shape from posed primitives."""
    return reshuffle_compose_detailed(config, seed).shape


def reshuffle_compose_detailed(config: ForgeConfig, seed: int) -> ComposeResult:
    k_min, k_max = config.k_range
    if k_min < 2:
        raise ValueError("k_range lower bound must be >= 2")
    if config.n_points < k_max * 32:
        raise ValueError("n_points too small for k_range")
    rng = np.random.default_rng(seed)
    for _ in range(10):
        result = _try_compose(config, rng)
        if result is not None:
            return result
    raise RuntimeError("degenerate composition: segment size floor not met after 10 retries")


def _try_compose(config: ForgeConfig, rng: np.random.Generator) -> ComposeResult | None:
    k_min, k_max = config.k_range
    k = int(rng.integers(k_min, k_max + 1))
    specs: list[PrimitiveSpec] = []
    centers: list[np.ndarray] = []
    radii: list[float] = []
    for i in range(k):
        kind = config.kinds[rng.integers(len(config.kinds))]
        spec = _random_spec(rng, kind)
        if i == 0:
            center = np.zeros(3)
        else:
            # place so the new bounding sphere overlaps a previously placed one
            j = int(rng.integers(i))
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            gap = rng.uniform(0.3, 0.9) * (radii[j] + spec.bounding_radius())
            center = centers[j] + direction * gap
        spec = dataclasses.replace(spec, pose=dataclasses.replace(spec.pose, translation=center))
        specs.append(spec)
        centers.append(center)
        radii.append(spec.bounding_radius())

    per_prim = int(np.ceil(config.oversample_factor * config.n_points / k))
    per_prim = max(per_prim, config.min_segment_points)
    pos_pool, nrm_pool, lab_pool = [], [], []
    for i, spec in enumerate(specs):
        pts, nrm = sample_primitive(spec, per_prim, int(rng.integers(2**31)))
        pos_pool.append(pts)
        nrm_pool.append(nrm)
        lab_pool.append(np.full(per_prim, i, dtype=np.int64))
    positions = np.vstack(pos_pool)
    normals = np.vstack(nrm_pool)
    labels = np.concatenate(lab_pool)

    keep = fps_indices(positions, config.n_points, int(rng.integers(2**31)))
    positions, normals, labels = positions[keep], normals[keep], labels[keep]
    counts = np.bincount(labels, minlength=k)
    if counts.min() < config.min_segment_points:
        return None

    if config.noise_sigma > 0:
        positions = positions + rng.normal(scale=config.noise_sigma, size=positions.shape)

    pooled = positions.copy()
    cloud = normalize_cloud(PointCloud(positions, normals))
    center = pooled.mean(axis=0)
    scale = np.linalg.norm(pooled - center, axis=1).max()
    shape = LabeledShape(cloud, labels, k)
    return ComposeResult(shape, tuple(specs), center, scale, pooled)


def _shape_seed(global_seed: int, index: int) -> int:
    digest = hashlib.sha256(f"{global_seed}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2**31)


def save_labeled_shape(shape: LabeledShape, stem: Path) -> None:
    stem.with_suffix(".xyzn").write_text(cio.write_xyzn(shape.cloud))
    cio.write_labels(shape.labels, stem.with_suffix(".labels"))


def load_labeled_shape(stem: Path) -> LabeledShape:
    cloud = cio.read_cloud_file(stem.with_suffix(".xyzn"))
    labels = cio.read_labels(stem.with_suffix(".labels"))
    return LabeledShape(cloud, labels, int(labels.max()) + 1)


def _config_dict(config: ForgeConfig) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(config)))


def generate_dataset(count: int, config: ForgeConfig, out_dir: str | Path, seed: int) -> dict:
    """Write `count` labeled shapes plus a manifest; reruns skip existing files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.json"
    existing = {}
    if manifest_path.exists():
        old = json.loads(manifest_path.read_text())
        if old.get("seed") == seed and old.get("config") == _config_dict(config):
            existing = {e["name"]: e for e in old.get("shapes", [])}

    entries = []
    for i in range(count):
        name = f"shape_{i:05d}"
        stem = out_dir / name
        shape_seed = _shape_seed(seed, i)
        entry = existing.get(name)
        if entry is not None and stem.with_suffix(".xyzn").exists() and stem.with_suffix(".labels").exists():
            entries.append(entry)
            continue
        shape = reshuffle_compose(config, shape_seed)
        save_labeled_shape(shape, stem)
        entries.append(
            {
                "name": name,
                "seed": shape_seed,
                "num_segments": shape.num_segments,
                "n_points": shape.cloud.n,
            }
        )
    manifest = {
        "seed": seed,
        "config": _config_dict(config),
        "count": count,
        "shapes": entries,
    }
    tmp = manifest_path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(manifest, indent=2))
    tmp.replace(manifest_path)
    return manifest
