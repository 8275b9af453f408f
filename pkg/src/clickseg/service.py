"""HTTP session service for browser-driven annotation.

Shapes are content-addressed on disk; sessions live in memory with one FIFO
lock each; committed annotation records are durable (write-then-rename).
The mask exposed to clients is always the post-processed one, so a headless
replay of the same click script reproduces it exactly.
"""

from __future__ import annotations

import base64
import hashlib
import json
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import Body, FastAPI, HTTPException, Request, Response

from . import io as cio
from .config import Hyperparams
from .embedding import DescriptorBackend, load_backend
from .geometry import PointCloud, iou, normalize_cloud
from .interact import ClickError, Session
from .online_tune import finetune_step
from .postprocess import refine_mask


@dataclass
class LiveSession:
    session: Session
    backend: object
    shape_id: str
    lock: threading.Lock = field(default_factory=threading.Lock)
    last_mask: np.ndarray = None
    debug_gt: np.ndarray | None = None
    click_log: list = field(default_factory=list)


def _refined(live: LiveSession, hp: Hyperparams) -> np.ndarray:
    s = live.session
    return refine_mask(
        s.index, s.mask, s.clicks.positives, s.clicks.negatives,
        degree=hp.graph_degree, n_smooth=hp.smooth_neighbors,
        gamma=hp.smooth_gamma, n_iter=hp.smooth_iters,
    )


def create_app(data_dir: str | Path, point_cap: int = 100_000,
               hp: Hyperparams | None = None) -> FastAPI:
    hp = hp or Hyperparams()
    data_dir = Path(data_dir)
    (data_dir / "shapes").mkdir(parents=True, exist_ok=True)
    (data_dir / "annotations").mkdir(parents=True, exist_ok=True)
    app = FastAPI(title="clickseg annotator")
    sessions: dict[str, LiveSession] = {}
    backends: dict[str, object] = {"descriptor": DescriptorBackend()}
    embed_cache: dict[tuple[str, str], np.ndarray] = {}

    def shape_path(shape_id: str) -> Path:
        return data_dir / "shapes" / f"{shape_id}.xyzn"

    def load_shape(shape_id: str) -> PointCloud:
        path = shape_path(shape_id)
        if not path.exists():
            raise HTTPException(404, f"unknown shape {shape_id}")
        return cio.read_cloud_file(path)

    def get_backend(name: str):
        if name not in backends:
            try:
                backends[name] = load_backend(name)
            except (OSError, ValueError) as exc:
                raise HTTPException(409, f"cannot load backend {name!r}: {exc}") from exc
        return backends[name]

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    @app.post("/shapes", status_code=201)
    async def upload_shape(request: Request):
        body = await request.body()
        if len(body) > point_cap * 120:
            raise HTTPException(413, "shape too large")
        try:
            cloud = cio.parse_cloud(body.decode("utf-8", errors="replace"))
            cloud = normalize_cloud(cloud)
        except ValueError as exc:
            raise HTTPException(422, str(exc)) from exc
        if cloud.n > point_cap:
            raise HTTPException(413, f"point cap is {point_cap}, got {cloud.n}")
        shape_id = hashlib.sha256(body).hexdigest()[:16]
        path = shape_path(shape_id)
        if not path.exists():
            tmp = path.with_suffix(".tmp")
            tmp.write_text(cio.write_xyzn(cloud))
            tmp.replace(path)
        return {"id": shape_id, "n": cloud.n}

    @app.get("/shapes/{shape_id}")
    def get_shape(shape_id: str):
        cloud = load_shape(shape_id)
        return {
            "id": shape_id,
            "n": cloud.n,
            "positions_b64": base64.b64encode(
                cloud.positions.astype("<f4").tobytes()).decode(),
            "normals_b64": base64.b64encode(
                cloud.normals.astype("<f4").tobytes()).decode(),
        }

    @app.post("/sessions", status_code=201)
    def create_session(payload: dict = Body(...)):
        shape_id = payload.get("shape_id")
        backend_name = payload.get("backend", "descriptor")
        cloud = load_shape(shape_id)
        backend = get_backend(backend_name)
        cache_key = (shape_id, backend_name)
        if cache_key not in embed_cache:
            embed_cache[cache_key] = backend.embed(cloud)
        session = Session(cloud, embed_cache[cache_key])
        session.clicks.alpha = hp.click_radius
        live = LiveSession(session, backend, shape_id)
        if payload.get("debug_gt"):
            gt = np.zeros(cloud.n, dtype=bool)
            gt[np.asarray(payload["debug_gt"], dtype=int)] = True
            live.debug_gt = gt
        live.last_mask = _refined(live, hp)
        session_id = uuid.uuid4().hex[:12]
        sessions[session_id] = live
        return {"id": session_id, "n": cloud.n}

    def get_live(session_id: str) -> LiveSession:
        live = sessions.get(session_id)
        if live is None:
            raise HTTPException(404, f"unknown session {session_id}")
        return live

    def mask_delta(live: LiveSession, hp: Hyperparams) -> dict:
        new = _refined(live, hp)
        old = live.last_mask
        added = np.flatnonzero(new & ~old)
        removed = np.flatnonzero(old & ~new)
        live.last_mask = new
        out = {"added": added.tolist(), "removed": removed.tolist()}
        if live.debug_gt is not None:
            out["iou"] = iou(new, live.debug_gt)
        return out

    @app.post("/sessions/{session_id}/ops")
    def session_op(session_id: str, payload: dict = Body(...)):
        live = get_live(session_id)
        op = payload.get("op")
        with live.lock:  # FIFO: waiting requests apply in arrival order
            try:
                if op == "add_click":
                    live.session.add_click(payload["kind"], int(payload["index"]))
                elif op == "scribble":
                    live.session.add_scribble([int(i) for i in payload["indices"]])
                elif op == "undo":
                    if not live.session.can_undo():
                        raise HTTPException(409, "nothing to undo")
                    live.session.undo()
                else:
                    raise HTTPException(409, f"unknown op {op!r}")
            except ClickError as exc:
                raise HTTPException(409, str(exc)) from exc
            if op != "undo":
                live.click_log.append({k: payload[k] for k in payload if k != "op"}
                                      | {"op": op})
            elif live.click_log:
                live.click_log.pop()
            return mask_delta(live, hp)

    @app.post("/sessions/{session_id}/finetune")
    def session_finetune(session_id: str, payload: dict = Body(default={})):
        live = get_live(session_id)
        with live.lock:
            steps = int(payload.get("steps", hp.finetune_steps))
            try:
                energy = finetune_step(
                    live.session, live.backend, steps=steps,
                    step_size=hp.finetune_step_size, eps=hp.loss.eps_inter,
                )
            except ValueError as exc:
                raise HTTPException(409, str(exc)) from exc
            out = mask_delta(live, hp)
            out["energy"] = energy
            return out

    @app.get("/sessions/{session_id}/mask")
    def session_mask(session_id: str):
        live = get_live(session_id)
        with live.lock:
            return {"mask": np.flatnonzero(live.last_mask).tolist()}

    @app.post("/sessions/{session_id}/commit", status_code=201)
    def session_commit(session_id: str, payload: dict = Body(...)):
        import time

        live = get_live(session_id)
        with live.lock:
            if not live.last_mask.any():
                raise HTTPException(409, "mask is empty")
            record = {
                "id": uuid.uuid4().hex[:12],
                "shape_id": live.shape_id,
                "label": payload.get("label", ""),
                "mask": np.flatnonzero(live.last_mask).tolist(),
                "clicks": live.click_log,
                "backend": getattr(live.backend, "identity", "unknown"),
                "committed_at": time.time(),
            }
            rec_dir = data_dir / "annotations" / live.shape_id
            rec_dir.mkdir(parents=True, exist_ok=True)
            path = rec_dir / f"{record['id']}.json"
            tmp = path.with_suffix(".tmp")
            tmp.write_text(json.dumps(record))
            tmp.replace(path)
            # reset the session for the next part on the same shape
            n = live.session.cloud.n
            fresh = Session(live.session.cloud, live.session.embeddings,
                            index=live.session.index)
            fresh.clicks.alpha = hp.click_radius
            live.session = fresh
            live.last_mask = np.zeros(n, dtype=bool)
            live.click_log = []
            return {"id": record["id"]}

    def list_records(shape_id: str) -> list[dict]:
        rec_dir = data_dir / "annotations" / shape_id
        if not rec_dir.exists():
            return []
        records = [json.loads(p.read_text()) for p in sorted(rec_dir.glob("*.json"))]
        return sorted(records, key=lambda r: r["committed_at"])

    @app.get("/shapes/{shape_id}/annotations")
    def shape_annotations(shape_id: str):
        load_shape(shape_id)
        return {"annotations": list_records(shape_id)}

    @app.get("/shapes/{shape_id}/labels")
    def shape_labels(shape_id: str):
        """Committed parts as a .labels file: part order = label id, else -1."""
        cloud = load_shape(shape_id)
        labels = np.full(cloud.n, -1, dtype=np.int64)
        for i, rec in enumerate(list_records(shape_id)):
            labels[np.asarray(rec["mask"], dtype=int)] = i
        text = "\n".join(str(int(v)) for v in labels) + "\n"
        return Response(content=text, media_type="text/plain")

    return app
