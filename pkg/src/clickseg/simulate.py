"""Simulated annotator and benchmark harness.

The simulator plays a rational annotator: given the ground-truth part mask it
greedily commits the candidate click with the greatest post-processed IoU
improvement, stopping when nothing strictly improves or the cap is reached.
"""

from __future__ import annotations

import csv
import io as _io
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import Hyperparams
from .forge import LabeledShape
from .geometry import fps_indices, iou
from .interact import Session
from .online_tune import finetune_step
from .postprocess import refine_mask


@dataclass(frozen=True)
class Toggles:
    """Ablation switches: online fine-tune, outlier removal, segment smoothing."""

    online_finetune: bool = True
    outlier_removal: bool = True
    segment_smoothing: bool = True


@dataclass
class TrajectoryStep:
    kind: str
    index: int
    iou_raw: float
    iou_post: float
    seconds: float


@dataclass
class Trajectory:
    """One simulated annotation run; post-processed IoU is non-decreasing."""

    steps: list[TrajectoryStep] = field(default_factory=list)

    @property
    def ious(self) -> list[float]:
        return [s.iou_post for s in self.steps]

    def terminal_iou(self) -> float:
        return self.ious[-1] if self.steps else 0.0


def _refined(session: Session, hp: Hyperparams, toggles: Toggles) -> np.ndarray:
    return refine_mask(
        session.index,
        session.mask,
        session.clicks.positives,
        session.clicks.negatives,
        degree=hp.graph_degree,
        n_smooth=hp.smooth_neighbors,
        gamma=hp.smooth_gamma,
        n_iter=hp.smooth_iters,
        use_or=toggles.outlier_removal,
        use_ss=toggles.segment_smoothing,
    )


def _candidates(pool: np.ndarray, positions: np.ndarray, limit: int, seed: int) -> np.ndarray:
    """Spread up to `limit` candidate indices over the pool via seeded FPS."""
    if pool.size <= limit:
        return pool
    picked = fps_indices(positions[pool], limit, seed)
    return pool[picked]


def simulate_part(
    session: Session,
    gt: np.ndarray,
    cap: int = 15,
    pool_size: int = 32,
    seed: int = 0,
    hp: Hyperparams | None = None,
    toggles: Toggles = Toggles(),
    backend=None,
    exhaustive: bool = False,
) -> Trajectory:
    """Greedy annotator: commit the best strictly IoU-improving candidate click."""
    hp = hp or Hyperparams()
    gt = np.asarray(gt, dtype=bool)
    if not gt.any():
        raise ValueError("ground-truth part is empty")
    if cap < 1:
        raise ValueError("cap must be >= 1")
    traj = Trajectory()
    positions = session.cloud.positions
    current = _refined(session, hp, toggles)
    current_iou = iou(current, gt)
    for step_no in range(cap):
        t0 = time.perf_counter()
        false_neg = np.flatnonzero(gt & ~current)
        false_pos = np.flatnonzero(current & ~gt)
        if exhaustive:
            pos_cand, neg_cand = false_neg, false_pos
        else:
            half = max(pool_size // 2, 1)
            pos_cand = _candidates(false_neg, positions, half, seed + 2 * step_no)
            neg_cand = _candidates(false_pos, positions, half, seed + 2 * step_no + 1)

        best = None  # (iou, kind_rank, index, raw_iou)
        for kind, cand in (("positive", pos_cand), ("negative", neg_cand)):
            rank = 0 if kind == "positive" else 1
            for idx in cand:
                idx = int(idx)
                session.add_click(kind, idx)
                trial_iou = iou(_refined(session, hp, toggles), gt)
                raw_iou = iou(session.mask, gt)
                session.undo()
                key = (trial_iou, -rank, -idx)
                if trial_iou > current_iou and (best is None or key > best[0]):
                    best = (key, kind, idx, raw_iou)
        if best is None:
            break
        _, kind, idx, _ = best
        session.add_click(kind, idx)
        if kind == "negative" and toggles.online_finetune and backend is not None:
            finetune_step(session, backend, steps=hp.finetune_steps,
                          step_size=hp.finetune_step_size, eps=hp.loss.eps_inter)
            if iou(_refined(session, hp, toggles), gt) < best[0][0]:
                # fine-tune hurt this part's IoU; roll back just the tune
                session.undo()
        current = _refined(session, hp, toggles)
        current_iou = iou(current, gt)
        traj.steps.append(
            TrajectoryStep(kind, idx, iou(session.mask, gt), current_iou,
                           time.perf_counter() - t0)
        )
    return traj


def noc(traj: Trajectory, threshold: float, cap: int) -> int | None:
    """Smallest click count reaching threshold percent IoU, or None on failure."""
    if not 0 < threshold < 100:
        raise ValueError("threshold must be in (0, 100)")
    target = threshold / 100.0
    for k, value in enumerate(traj.ious[:cap], start=1):
        if value >= target:
            return k
    return None


def adjacent_part_masks(shape: LabeledShape, nbr_table: np.ndarray, rng: np.random.Generator,
                        max_prims: int = 4, count: int = 1) -> list[tuple[np.ndarray, list[int]]]:
    """Ground-truth parts: random unions of 1..max_prims primitives in contact.

    Two primitives are adjacent when some point of one has a point of the other
    among its spatial nearest neighbors.
    """
    labels = shape.labels
    k = shape.num_segments
    contact = np.zeros((k, k), dtype=bool)
    src = np.repeat(labels, nbr_table.shape[1])
    dst = labels[nbr_table.ravel()]
    contact[src, dst] = True
    contact |= contact.T
    parts = []
    for _ in range(count):
        size = int(rng.integers(1, max_prims + 1))
        start = int(rng.integers(k))
        chosen = [start]
        while len(chosen) < size:
            frontier = [j for j in range(k) if j not in chosen and contact[j, chosen].any()]
            if not frontier:
                break
            chosen.append(int(rng.choice(frontier)))
        mask = np.isin(labels, chosen)
        parts.append((mask, sorted(chosen)))
    return parts


@dataclass
class BenchmarkConfig:
    clicks: int = 10
    cap: int = 15
    pool_size: int = 32
    seed: int = 0
    parts_per_shape: int = 1
    max_part_primitives: int = 4
    toggles: Toggles = field(default_factory=Toggles)
    hp: Hyperparams = field(default_factory=Hyperparams)


@dataclass
class BenchmarkReport:
    categories: dict            # name -> {"miou": float, "noc80": ..., "noc85": ..., "n_parts": int}
    overall_miou: float
    noc80: float | None
    noc85: float | None
    failure_rate80: float
    failure_rate85: float
    config: dict
    curves: dict                # name -> list of mean IoU at click counts 0..cap
    skipped: int = 0

    def to_dict(self) -> dict:
        return {
            "categories": self.categories,
            "overall_miou": self.overall_miou,
            "noc80": self.noc80,
            "noc85": self.noc85,
            "failure_rate80": self.failure_rate80,
            "failure_rate85": self.failure_rate85,
            "config": self.config,
            "curves": self.curves,
            "skipped": self.skipped,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkReport":
        return cls(**d)


def _iou_at(traj: Trajectory, clicks: int) -> float:
    vals = traj.ious[:clicks]
    return vals[-1] if vals else 0.0


def _curve(traj: Trajectory, cap: int) -> list[float]:
    out = [0.0]
    last = 0.0
    for k in range(1, cap + 1):
        if k <= len(traj.steps):
            last = traj.ious[k - 1]
        out.append(last)
    return out


def run_benchmark(
    dataset: list[tuple[str, LabeledShape]],
    backend,
    config: BenchmarkConfig,
    progress_path: str | Path | None = None,
) -> BenchmarkReport:
    """Simulate every (shape, part), aggregate category means and NoC metrics.

    `dataset` pairs each shape with a category tag. When `progress_path` is
    given, per-part results are appended as JSON lines and already-present
    entries are skipped, so interrupted runs resume.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    done: dict[str, dict] = {}
    if progress_path is not None:
        progress_path = Path(progress_path)
        if progress_path.exists():
            for line in progress_path.read_text().splitlines():
                if line.strip():
                    rec = json.loads(line)
                    done[rec["key"]] = rec

    results: list[dict] = []
    skipped = 0
    for shape_no, (category, shape) in enumerate(dataset):
        try:
            shape_seed = config.seed + 7919 * shape_no
            tmp_session = None
            nbr = None
            for part_no in range(config.parts_per_shape):
                key = f"{shape_no}:{part_no}"
                if key in done:
                    results.append(done[key])
                    continue
                if tmp_session is None:
                    emb = _backend_embed(backend, shape)
                    tmp_session = Session(shape.cloud, emb,
                                          history_limit=2 * config.cap * config.pool_size + 8)
                    tmp_session.clicks.alpha = config.hp.click_radius
                    nbr = tmp_session.index.knn_all(8)
                part_rng = np.random.default_rng(shape_seed * 31 + part_no)
                gt, _ = adjacent_part_masks(shape, nbr, part_rng,
                                            config.max_part_primitives, 1)[0]
                session = Session(shape.cloud, tmp_session.embeddings,
                                  history_limit=2 * config.cap * config.pool_size + 8,
                                  index=tmp_session.index)
                session.clicks.alpha = config.hp.click_radius
                saved_params = getattr(backend, "params", None)
                if saved_params is not None:
                    saved_params = saved_params.copy()
                traj = simulate_part(
                    session, gt, cap=config.cap, pool_size=config.pool_size,
                    seed=shape_seed + part_no, hp=config.hp, toggles=config.toggles,
                    backend=backend,
                )
                if saved_params is not None:
                    # per-part copy-on-tune: fine-tuning never leaks across parts
                    backend.params = saved_params
                rec = {
                    "key": key,
                    "category": category,
                    "iou": _iou_at(traj, config.clicks),
                    "noc80": noc(traj, 80, config.cap),
                    "noc85": noc(traj, 85, config.cap),
                    "curve": _curve(traj, config.cap),
                }
                results.append(rec)
                if progress_path is not None:
                    with open(progress_path, "a") as fh:
                        fh.write(json.dumps(rec) + "\n")
        except (OSError, ValueError) as exc:
            import logging

            logging.getLogger(__name__).warning("skipping shape %d: %s", shape_no, exc)
            skipped += 1

    categories: dict[str, dict] = {}
    curves: dict[str, list[float]] = {}
    for cat in sorted({r["category"] for r in results}):
        rows = [r for r in results if r["category"] == cat]
        ious = [r["iou"] for r in rows]
        noc80 = [r["noc80"] for r in rows]
        noc85 = [r["noc85"] for r in rows]
        categories[cat] = {
            "miou": float(np.mean(ious)),
            "noc80": _mean_noc(noc80, config.cap),
            "noc85": _mean_noc(noc85, config.cap),
            "noc80_success_only": _mean_noc(noc80, None),
            "noc85_success_only": _mean_noc(noc85, None),
            "n_parts": len(rows),
        }
        curves[cat] = [float(np.mean([r["curve"][k] for r in rows]))
                       for k in range(config.cap + 1)]
    overall = float(np.mean([c["miou"] for c in categories.values()]))
    all80 = [r["noc80"] for r in results]
    all85 = [r["noc85"] for r in results]
    return BenchmarkReport(
        categories=categories,
        overall_miou=overall,
        noc80=_mean_noc(all80, config.cap),
        noc85=_mean_noc(all85, config.cap),
        failure_rate80=sum(v is None for v in all80) / len(results),
        failure_rate85=sum(v is None for v in all85) / len(results),
        config={
            "clicks": config.clicks,
            "cap": config.cap,
            "pool_size": config.pool_size,
            "seed": config.seed,
            "toggles": {
                "OF": config.toggles.online_finetune,
                "OR": config.toggles.outlier_removal,
                "SS": config.toggles.segment_smoothing,
            },
            "backend": getattr(backend, "identity", "unknown"),
        },
        curves=curves,
        skipped=skipped,
    )


def _backend_embed(backend, shape: LabeledShape) -> np.ndarray:
    from .embedding import OneHotBackend

    if isinstance(backend, OneHotBackend):
        backend = OneHotBackend(shape.labels, shape.num_segments)
    return backend.embed(shape.cloud)


def _mean_noc(values: list, cap: int | None) -> float | None:
    """Mean NoC; failures imputed at cap when given, else dropped."""
    if cap is not None:
        vals = [cap if v is None else v for v in values]
    else:
        vals = [v for v in values if v is not None]
    if not vals:
        return None
    return float(np.mean(vals))


def format_report_table(report: BenchmarkReport) -> str:
    """Plain-text table: categories as columns, one row per metric."""
    cats = list(report.categories)
    widths = [max(len(c), 8) for c in cats]
    header = "category   | " + " | ".join(c.ljust(w) for c, w in zip(cats, widths)) + " | mean"
    lines = [header, "-" * len(header)]
    def row(label, getter, overall):
        cells = []
        for c, w in zip(cats, widths):
            v = getter(report.categories[c])
            cells.append(("-" if v is None else f"{v:.3f}").ljust(w))
        o = "-" if overall is None else f"{overall:.3f}"
        return f"{label:<10} | " + " | ".join(cells) + f" | {o}"
    lines.append(row("mIoU", lambda c: c["miou"], report.overall_miou))
    lines.append(row("NoC@80", lambda c: c["noc80_success_only"], report.noc80))
    lines.append(row("NoC@85", lambda c: c["noc85_success_only"], report.noc85))
    return "\n".join(lines)


def write_report(report: BenchmarkReport, path: str | Path) -> None:
    """JSON report + sibling .txt table + .csv click-vs-IoU curves."""
    if not report.categories:
        raise ValueError("empty report")
    path = Path(path)
    path.write_text(json.dumps(report.to_dict(), indent=2))
    path.with_suffix(".txt").write_text(format_report_table(report) + "\n")
    buf = _io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["category", "clicks", "mean_iou"])
    for cat, curve in report.curves.items():
        for k, v in enumerate(curve):
            writer.writerow([cat, k, f"{v:.6f}"])
    path.with_suffix(".csv").write_text(buf.getvalue())


def read_report(path: str | Path) -> BenchmarkReport:
    return BenchmarkReport.from_dict(json.loads(Path(path).read_text()))
