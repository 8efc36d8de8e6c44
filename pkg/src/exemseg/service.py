"""HTTP session API over the interactive inference engine.

Volumes are uploaded as single-blob bundles, sessions bind a volume to a
model from the registry, and every mutating response carries the session's
new revision so clients can detect staleness (a stale revision echoed back
on a mutation is rejected with 409). With a data directory configured,
volumes and session snapshots persist across restarts and sessions are
restored lazily on first touch.
"""

from __future__ import annotations

import io
import json
import threading
import time
import uuid
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Query, Request, Response
from PIL import Image
from pydantic import BaseModel

from exemseg.clicks import Click
from exemseg.evaluation import fill_holes, remove_small_components
from exemseg.inference import PostprocConfig, Session
from exemseg.model import SliceSegmenter
from exemseg.rle import encode_mask
from exemseg.volume import (Volume, load_volume, normalize_percentile,
                            save_volume, unbundle_volume)
import os


@dataclass(frozen=True)
class ServiceConfig:
    model_path: str | None = None        # checkpoint for the "default" model
    data_dir: str | None = None          # persistence root; None: memory only
    session_ttl_s: float = 24 * 3600.0
    max_sessions: int = 64
    host: str = "127.0.0.1"
    port: int = 8753

    @classmethod
    def from_env(cls) -> "ServiceConfig":
        env = os.environ
        return cls(
            model_path=env.get("EXEMSEG_MODEL") or None,
            data_dir=env.get("EXEMSEG_DATA_DIR") or None,
            session_ttl_s=float(env.get("EXEMSEG_SESSION_TTL", 24 * 3600)),
            max_sessions=int(env.get("EXEMSEG_MAX_SESSIONS", 64)),
            host=env.get("EXEMSEG_HOST", "127.0.0.1"),
            port=int(env.get("EXEMSEG_PORT", 8753)))


class ClickBody(BaseModel):
    x: int
    y: int
    slice: int
    label: int
    revision: int | None = None          # echo of the client's last seen revision


class SessionBody(BaseModel):
    volume_id: str
    model_id: str = "default"


class _SessionRecord:
    def __init__(self, session: Session, volume_id: str, model_id: str):
        self.session = session
        self.volume_id = volume_id
        self.model_id = model_id
        self.lesion_counter = 0
        self.created_at = time.time()
        self.touched_at = self.created_at
        self.lock = threading.Lock()


def _mask_payload(mask: np.ndarray, kind: str, revision: int, **extra) -> dict:
    return {"kind": kind, "revision": revision, "mask": encode_mask(mask), **extra}


class ServiceState:
    def __init__(self, config: ServiceConfig, models: dict[str, SliceSegmenter]):
        self.config = config
        self.models = models
        self.volumes: dict[str, Volume] = {}
        self.sessions: dict[str, _SessionRecord] = {}
        self.registry_lock = threading.Lock()
        self.data_dir = Path(config.data_dir) if config.data_dir else None
        if self.data_dir:
            (self.data_dir / "volumes").mkdir(parents=True, exist_ok=True)
            (self.data_dir / "sessions").mkdir(parents=True, exist_ok=True)
            self._load_persisted()

    # -- persistence ---------------------------------------------------------------

    def _index_path(self) -> Path:
        return self.data_dir / "sessions" / "index.json"

    def _load_persisted(self) -> None:
        for sidecar in sorted((self.data_dir / "volumes").glob("*.json")):
            vid = sidecar.stem
            self.volumes[vid] = load_volume(sidecar.with_suffix(""))
        if not self._index_path().exists():
            return
        index = json.loads(self._index_path().read_text())
        for sid, meta in index.items():
            snap = self.data_dir / "sessions" / f"{sid}.snap"
            if meta["volume_id"] not in self.volumes or not snap.exists():
                continue
            model = self.models.get(meta["model_id"])
            if model is None:
                continue
            rec = _SessionRecord(
                Session.restore(model, self.volumes[meta["volume_id"]], snap),
                meta["volume_id"], meta["model_id"])
            rec.lesion_counter = meta["lesion_counter"]
            rec.created_at = meta["created_at"]
            self.sessions[sid] = rec

    def persist_volume(self, vid: str, vol: Volume) -> None:
        if self.data_dir:
            save_volume(vol, self.data_dir / "volumes" / vid,
                        kind=vol.metadata.get("kind", "intensity"))

    def persist_session(self, sid: str) -> None:
        if not self.data_dir:
            return
        rec = self.sessions[sid]
        rec.session.snapshot(self.data_dir / "sessions" / f"{sid}.snap")
        index = {s: {"volume_id": r.volume_id, "model_id": r.model_id,
                     "lesion_counter": r.lesion_counter, "created_at": r.created_at}
                 for s, r in self.sessions.items()}
        self._index_path().write_text(json.dumps(index))

    def drop_session(self, sid: str) -> None:
        self.sessions.pop(sid, None)
        if self.data_dir:
            snap = self.data_dir / "sessions" / f"{sid}.snap"
            if snap.exists():
                snap.unlink()
            if self._index_path().exists():
                index = json.loads(self._index_path().read_text())
                index.pop(sid, None)
                self._index_path().write_text(json.dumps(index))

    # -- lookup with expiry -----------------------------------------------------------

    def evict_expired(self) -> None:
        now = time.time()
        for sid in [s for s, r in self.sessions.items()
                    if now - r.touched_at > self.config.session_ttl_s]:
            self.drop_session(sid)

    def session(self, sid: str) -> _SessionRecord:
        rec = self.sessions.get(sid)
        if rec is None:
            raise HTTPException(404, f"unknown session {sid}")
        rec.touched_at = time.time()
        return rec

    def volume(self, vid: str) -> Volume:
        vol = self.volumes.get(vid)
        if vol is None:
            raise HTTPException(404, f"unknown volume {vid}")
        return vol

    def model(self, model_id: str) -> SliceSegmenter:
        model = self.models.get(model_id)
        if model is None:
            raise HTTPException(404, f"unknown model {model_id}")
        return model


def create_app(config: ServiceConfig | None = None,
               models: dict[str, SliceSegmenter] | None = None) -> FastAPI:
    config = config or ServiceConfig.from_env()
    if models is None:
        if config.model_path is None:
            raise ValueError("service: provide a model registry or a checkpoint path")
        models = {"default": SliceSegmenter.load(config.model_path)}
    state = ServiceState(config, models)
    app = FastAPI(title="exemseg session service")
    app.state.exemseg = state

    def check_revision(rec: _SessionRecord, supplied: int | None) -> None:
        if supplied is not None and supplied != rec.session.revision:
            raise HTTPException(
                409, f"stale revision {supplied}; session is at {rec.session.revision}")

    # -- volumes -----------------------------------------------------------------------

    @app.post("/volumes", status_code=201)
    async def upload_volume(request: Request):
        blob = await request.body()
        try:
            vol = unbundle_volume(blob)
        except ValueError as e:
            raise HTTPException(400, f"malformed volume bundle: {e}")
        vid = uuid.uuid4().hex[:12]
        state.volumes[vid] = vol
        state.persist_volume(vid, vol)
        return {"volume_id": vid, "shape": list(vol.shape), "spacing": list(vol.spacing)}

    @app.get("/volumes/{vid}")
    def volume_info(vid: str):
        vol = state.volume(vid)
        return {"volume_id": vid, "shape": list(vol.shape),
                "spacing": list(vol.spacing)}

    @app.get("/volumes/{vid}/slices/{d}")
    def slice_image(vid: str, d: int):
        vol = state.volume(vid)
        if not 0 <= d < vol.shape[2]:
            raise HTTPException(400, f"slice {d} outside depth {vol.shape[2]}")
        plane = normalize_percentile(vol).data[:, :, d]
        img = Image.fromarray((plane * 255).astype(np.uint8), mode="L")
        buf = io.BytesIO()
        img.save(buf, format="PNG")
        return Response(buf.getvalue(), media_type="image/png")

    # -- session lifecycle ----------------------------------------------------------------

    @app.post("/sessions", status_code=201)
    def open_session(body: SessionBody):
        state.evict_expired()
        if len(state.sessions) >= config.max_sessions:
            raise HTTPException(429, f"session limit {config.max_sessions} reached")
        vol = state.volume(body.volume_id)
        model = state.model(body.model_id)
        sid = uuid.uuid4().hex[:12]
        state.sessions[sid] = _SessionRecord(Session(model, vol),
                                             body.volume_id, body.model_id)
        state.persist_session(sid)
        rec = state.sessions[sid]
        return {"session_id": sid, "volume_id": body.volume_id,
                "revision": rec.session.revision, "created_at": rec.created_at}

    @app.delete("/sessions/{sid}")
    def close_session(sid: str):
        state.session(sid)
        state.drop_session(sid)
        return {"deleted": sid}

    @app.post("/sessions/{sid}/lesions", status_code=201)
    def new_lesion(sid: str):
        rec = state.session(sid)
        with rec.lock:
            rec.lesion_counter += 1
            state.persist_session(sid)
            return {"lesion_id": rec.lesion_counter, "revision": rec.session.revision}

    # -- interaction -------------------------------------------------------------------------

    @app.post("/sessions/{sid}/lesions/{lid}/clicks")
    def add_click(sid: str, lid: int, body: ClickBody):
        rec = state.session(sid)
        with rec.lock:
            check_revision(rec, body.revision)
            if not 1 <= lid <= rec.lesion_counter:
                raise HTTPException(404, f"unknown lesion {lid}")
            try:
                result = rec.session.apply_click(
                    lid, Click(x=body.x, y=body.y, slice=body.slice, label=body.label))
            except ValueError as e:
                raise HTTPException(400, str(e))
            state.persist_session(sid)
            return _mask_payload(result.mask[:, :, None], "instance", result.revision,
                                 slice=body.slice, warning=result.warning, lesion_id=lid)

    @app.post("/sessions/{sid}/lesions/{lid}/propagate")
    def propagate(sid: str, lid: int, revision: int | None = None):
        rec = state.session(sid)
        with rec.lock:
            check_revision(rec, revision)
            if not 1 <= lid <= rec.lesion_counter:
                raise HTTPException(404, f"unknown lesion {lid}")
            try:
                mask = rec.session.propagate_memory(lid)
            except ValueError as e:
                raise HTTPException(400, str(e))
            state.persist_session(sid)
            return _mask_payload(mask.data, "instance", mask.revision, lesion_id=lid,
                                 provenance=mask.provenance)

    @app.post("/sessions/{sid}/propagate-exemplars")
    def propagate_exemplars(sid: str, revision: int | None = None):
        rec = state.session(sid)
        with rec.lock:
            check_revision(rec, revision)
            mask = rec.session.propagate_exemplars()
            state.persist_session(sid)
            return _mask_payload(mask.data, "semantic", mask.revision,
                                 provenance=mask.provenance)

    @app.get("/sessions/{sid}/exemplars")
    def exemplar_summary(sid: str):
        rec = state.session(sid)
        entries = sorted(rec.session.exemplars.entries,
                         key=lambda e: -e.insertion_counter)
        return {"revision": rec.session.revision,
                "capacity": rec.session.exemplars.capacity,
                "entries": [{"lesion_id": e.lesion_id, "slice": e.slice_index,
                             "prompted": e.prompted, "recency_rank": rank}
                            for rank, e in enumerate(entries)]}

    @app.get("/sessions/{sid}/mask")
    def get_mask(sid: str, kind: str = Query(...), lesion_id: int | None = None):
        rec = state.session(sid)
        sess = rec.session
        if kind == "instance":
            if lesion_id is None:
                raise HTTPException(400, "instance mask requires lesion_id")
            cached = sess.instance_masks.get(lesion_id)
            if cached is None:
                raise HTTPException(404, f"no mask for lesion {lesion_id}")
            return _mask_payload(cached.data, kind, cached.revision, lesion_id=lesion_id,
                                 provenance=cached.provenance)
        if kind == "semantic":
            with rec.lock:
                sem = sess.semantic or sess.propagate_exemplars()
            return _mask_payload(sem.data, kind, sem.revision, provenance=sem.provenance)
        if kind == "final":
            with rec.lock:
                sem = sess.semantic or sess.propagate_exemplars()
                union = sem.data.copy()
                for m in sess.instance_masks.values():
                    union |= m.data
                pp = PostprocConfig()
                final = remove_small_components(union > 0, sess.volume.spacing,
                                                pp.min_component_mm3, pp.connectivity)
                final = fill_holes(final).astype(np.uint8)
            return _mask_payload(final, kind, sess.revision)
        raise HTTPException(400, f"unknown mask kind {kind!r}")

    return app


def main() -> None:
    import uvicorn

    config = ServiceConfig.from_env()
    uvicorn.run(create_app(config), host=config.host, port=config.port)
