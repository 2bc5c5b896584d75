"""HTTP session service for the envelope editing loop.

The workflow it serves: measure or predict an envelope, edit it revision by
revision, generate audio against a chosen revision, audition the result and
its measured envelope, repeat. Sessions, revisions, jobs and audio all live
on disk as JSON and WAV files, so a restart loses nothing; generation runs
on a small worker pool with at most one active job per session.
"""
from __future__ import annotations

import hashlib
import json
import tempfile
import threading
import uuid
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Query, Request, Response
from fastapi.middleware.cors import CORSMiddleware

from .dsp import (
    Envelope,
    RmsConfig,
    Waveform,
    compute_rms,
    invalid_value_index,
    smooth_envelope,
)
from .errors import FoleyError
from .formats import read_tensor, read_wav, write_wav
from .pipeline import GenerationBundle, generate, load_predictor
from .predictor import FeatureSequence, predict_envelope

MAX_BODY_DEFAULT = 32 * 1024 * 1024

_JOB_STATES = ("pending", "running", "done", "failed")


def _envelope_payload(e: Envelope) -> dict:
    return {
        "hop": int(e.hop),
        "source_sample_rate": int(e.source_sample_rate),
        "values": [float(v) for v in e.values],
    }


def _parse_envelope(payload) -> Envelope:
    """Body -> Envelope; 422 with the offending index on bad values."""
    if not isinstance(payload, dict) or "values" not in payload:
        raise HTTPException(422, detail={"message": "expected {values, hop?, source_sample_rate?}"})
    values = np.asarray(payload["values"], dtype=np.float64)
    if values.ndim != 1 or values.size == 0:
        raise HTTPException(422, detail={"message": "values must be a non-empty list"})
    bad = invalid_value_index(values)
    if bad is not None:
        raise HTTPException(
            422,
            detail={
                "message": f"envelope value out of [0, 1]: {values[bad]}",
                "index": int(bad),
            },
        )
    return Envelope(
        values,
        hop=int(payload.get("hop", 1)),
        source_sample_rate=int(payload.get("source_sample_rate", 0)),
    )


class SessionStore:
    """Disk-backed sessions: append-only revisions, jobs, audio artifacts."""

    def __init__(self, root: Path):
        self.root = Path(root)
        (self.root / "sessions").mkdir(parents=True, exist_ok=True)
        (self.root / "jobs").mkdir(parents=True, exist_ok=True)
        self._locks: dict = {}
        self._guard = threading.Lock()

    def lock(self, sid: str) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(sid, threading.Lock())

    # -- sessions ----------------------------------------------------------

    def _session_dir(self, sid: str) -> Path:
        return self.root / "sessions" / sid

    def _meta_path(self, sid: str) -> Path:
        return self._session_dir(sid) / "session.json"

    def meta(self, sid: str) -> dict:
        path = self._meta_path(sid)
        if not path.exists():
            raise HTTPException(404, detail=f"unknown session {sid!r}")
        return json.loads(path.read_text())

    def _write_meta(self, sid: str, meta: dict):
        self._meta_path(sid).write_text(json.dumps(meta, indent=2))

    def create(self, envelope: Envelope, semantic: dict | None) -> dict:
        sid = uuid.uuid4().hex
        d = self._session_dir(sid)
        (d / "artifacts").mkdir(parents=True)
        meta = {
            "id": sid,
            "revision": 1,
            "semantic": semantic,
            "active_job": None,
            "jobs": [],
        }
        (d / "rev0001.json").write_text(json.dumps(_envelope_payload(envelope)))
        self._write_meta(sid, meta)
        return meta

    def envelope(self, sid: str, rev: int | None = None) -> dict:
        meta = self.meta(sid)
        rev = meta["revision"] if rev is None else rev
        path = self._session_dir(sid) / f"rev{rev:04d}.json"
        if not path.exists():
            raise HTTPException(404, detail=f"session has no revision {rev}")
        payload = json.loads(path.read_text())
        payload["revision"] = rev
        return payload

    def put_envelope(self, sid: str, envelope: Envelope) -> dict:
        with self.lock(sid):
            meta = self.meta(sid)
            rev = meta["revision"] + 1
            # append-only: a new revision file, never a rewrite
            path = self._session_dir(sid) / f"rev{rev:04d}.json"
            path.write_text(json.dumps(_envelope_payload(envelope)))
            meta["revision"] = rev
            self._write_meta(sid, meta)
        return {"revision": rev}

    # -- jobs --------------------------------------------------------------

    def _job_path(self, jid: str) -> Path:
        return self.root / "jobs" / f"{jid}.json"

    def job(self, jid: str) -> dict:
        path = self._job_path(jid)
        if not path.exists():
            raise HTTPException(404, detail=f"unknown job {jid!r}")
        return json.loads(path.read_text())

    def write_job(self, job: dict):
        self._job_path(job["id"]).write_text(json.dumps(job, indent=2))

    def create_job(self, sid: str, revision: int, params: dict) -> dict:
        """Register a pending job; refuses if the session already has one."""
        with self.lock(sid):
            meta = self.meta(sid)
            active = meta.get("active_job")
            if active is not None:
                status = self.job(active)["status"]
                if status in ("pending", "running"):
                    raise HTTPException(
                        409, detail=f"job {active!r} is still {status}"
                    )
            job = {
                "id": uuid.uuid4().hex,
                "session": sid,
                "status": "pending",
                "revision": revision,
                "params": params,
                "artifact": None,
                "e_l1_vs_target": None,
                "error": None,
            }
            self.write_job(job)
            meta["active_job"] = job["id"]
            meta["jobs"].append(job["id"])
            self._write_meta(sid, meta)
            return job

    def transition(self, jid: str, status: str, **fields) -> dict:
        if status not in _JOB_STATES:
            raise ValueError(f"bad job status {status!r}")
        job = self.job(jid)
        allowed = {"pending": ("running",), "running": ("done", "failed")}
        if status not in allowed.get(job["status"], ()):
            raise ValueError(f"illegal transition {job['status']} -> {status}")
        job["status"] = status
        job.update(fields)
        self.write_job(job)
        return job

    # -- artifacts ---------------------------------------------------------

    def artifact_key(self, revision: int, params: dict) -> str:
        digest = hashlib.sha256(
            json.dumps(params, sort_keys=True).encode()
        ).hexdigest()[:12]
        return f"rev{revision:04d}-{digest}"

    def artifact_dir(self, sid: str) -> Path:
        return self._session_dir(sid) / "artifacts"

    def artifact_for_rev(self, sid: str, rev: int) -> dict:
        """Most recent finished job for a revision; 404 when none exists."""
        meta = self.meta(sid)
        for jid in reversed(meta["jobs"]):
            job = self.job(jid)
            if job["revision"] == rev and job["status"] == "done":
                return job
        raise HTTPException(404, detail=f"no generated audio for revision {rev}")


def create_app(
    data_dir,
    bundle_path=None,
    predictor_path=None,
    max_body: int = MAX_BODY_DEFAULT,
    workers: int = 2,
) -> FastAPI:
    """Build the service; model checkpoints are loaded once at startup."""
    store = SessionStore(Path(data_dir))
    bundle = GenerationBundle.load(bundle_path) if bundle_path else None
    predictor = load_predictor(predictor_path) if predictor_path else None

    app = FastAPI(title="foleyctl service")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )
    app.state.store = store
    app.state.executor = ThreadPoolExecutor(max_workers=workers)

    async def _limited_body(request: Request) -> bytes:
        body = await request.body()
        if len(body) > max_body:
            raise HTTPException(413, detail=f"body exceeds {max_body} bytes")
        return body

    def _foley_422(exc: FoleyError) -> HTTPException:
        return HTTPException(422, detail={"message": str(exc)})

    # -- stateless envelope helpers ----------------------------------------

    @app.post("/v1/envelopes:extract")
    async def extract(request: Request, window: int = 512, hop: int = 128,
                      smooth: int = 15, normalize: bool = False):
        body = await _limited_body(request)
        try:
            with tempfile.NamedTemporaryFile(suffix=".wav") as f:
                f.write(body)
                f.flush()
                w = read_wav(f.name)
            if normalize:
                from .dsp import normalize_waveform

                w = normalize_waveform(w)
            if w.channels > 1:
                w = Waveform(w.mono(), w.sample_rate)
            cfg = RmsConfig(window=window, hop=hop, smoothing_kernel=smooth)
            env = smooth_envelope(compute_rms(w, cfg), cfg.smoothing_kernel)
        except FoleyError as exc:
            raise _foley_422(exc) from exc
        return _envelope_payload(env)

    @app.post("/v1/envelopes:predict")
    async def predict(request: Request):
        if predictor is None:
            raise HTTPException(409, detail="no predictor checkpoint loaded")
        body = await _limited_body(request)
        model, rms = predictor
        try:
            with tempfile.NamedTemporaryFile(suffix=".ftns") as f:
                f.write(body)
                f.flush()
                feats = FeatureSequence(read_tensor(f.name))
            _, env = predict_envelope(model, feats, rms)
        except FoleyError as exc:
            raise _foley_422(exc) from exc
        return _envelope_payload(env)

    # -- sessions ----------------------------------------------------------

    @app.post("/v1/sessions", status_code=201)
    async def create_session(request: Request):
        body = await _limited_body(request)
        try:
            payload = json.loads(body)
        except json.JSONDecodeError as exc:
            raise HTTPException(422, detail={"message": f"bad JSON: {exc}"}) from exc
        env = _parse_envelope(payload.get("envelope"))
        meta = store.create(env, payload.get("semantic"))
        return {"id": meta["id"], "revision": meta["revision"]}

    @app.get("/v1/sessions/{sid}/envelope")
    def get_envelope(sid: str, rev: int | None = Query(default=None)):
        return store.envelope(sid, rev)

    @app.put("/v1/sessions/{sid}/envelope")
    async def put_envelope(sid: str, request: Request):
        body = await _limited_body(request)
        store.meta(sid)  # 404 before 422 for unknown sessions
        try:
            payload = json.loads(body)
        except json.JSONDecodeError as exc:
            raise HTTPException(422, detail={"message": f"bad JSON: {exc}"}) from exc
        env = _parse_envelope(payload)
        return store.put_envelope(sid, env)

    # -- generation jobs ---------------------------------------------------

    def _run_job(jid: str, sid: str):
        job = store.transition(jid, "running")
        try:
            rev = job["revision"]
            params = job["params"]
            env_payload = store.envelope(sid, rev)
            envelope = Envelope(
                np.asarray(env_payload["values"]),
                hop=env_payload["hop"],
                source_sample_rate=env_payload["source_sample_rate"],
            )
            semantic = None
            if params.get("class") is not None:
                label = int(params["class"])
                if bundle.embeddings is None or not 0 <= label < bundle.num_classes:
                    raise FoleyError(f"unknown class {label}")
                semantic = bundle.embeddings[label]
            elif params.get("embedding_ref"):
                semantic = read_tensor(store.root / params["embedding_ref"])
            result = generate(
                bundle,
                envelope=envelope,
                semantic=semantic,
                seconds_total=params.get("seconds_total"),
                steps=params.get("steps"),
                cfg_scale=params.get("cfg_scale"),
                seed=int(params.get("seed", 0)),
            )
            key = store.artifact_key(rev, params)
            out = store.artifact_dir(sid)
            write_wav(out / f"{key}.wav", result.waveform, bit_depth=32)
            (out / f"{key}.envelope.json").write_text(
                json.dumps(_envelope_payload(result.measured))
            )
            store.transition(jid, "done", artifact=key,
                             e_l1_vs_target=result.e_l1_vs_target)
        except Exception as exc:  # noqa: BLE001 - worker boundary
            store.transition(jid, "failed", error=f"{type(exc).__name__}: {exc}")
        finally:
            with store.lock(sid):
                meta = store.meta(sid)
                if meta.get("active_job") == jid:
                    meta["active_job"] = None
                    store._write_meta(sid, meta)

    @app.post("/v1/sessions/{sid}/generate", status_code=202)
    async def start_generation(sid: str, request: Request):
        if bundle is None:
            raise HTTPException(409, detail="no generation bundle loaded")
        body = await _limited_body(request)
        try:
            params = json.loads(body) if body else {}
        except json.JSONDecodeError as exc:
            raise HTTPException(422, detail={"message": f"bad JSON: {exc}"}) from exc
        if not isinstance(params, dict):
            raise HTTPException(422, detail={"message": "params must be an object"})
        if params.get("class") is not None and params.get("embedding_ref"):
            raise HTTPException(
                422,
                detail={"message": "class and embedding_ref are mutually exclusive"},
            )
        meta = store.meta(sid)
        job = store.create_job(sid, meta["revision"], params)
        app.state.executor.submit(_run_job, job["id"], sid)
        return {"job": job["id"], "revision": job["revision"]}

    @app.get("/v1/jobs/{jid}")
    def job_status(jid: str):
        job = store.job(jid)
        out = {"id": job["id"], "status": job["status"],
               "revision": job["revision"]}
        if job["status"] == "done":
            out["e_l1_vs_target"] = job["e_l1_vs_target"]
            out["artifact"] = job["artifact"]
        if job["status"] == "failed":
            out["error"] = job["error"]
        return out

    # -- artifacts ---------------------------------------------------------

    @app.get("/v1/sessions/{sid}/audio")
    def audio(sid: str, rev: int | None = Query(default=None)):
        meta = store.meta(sid)
        rev = meta["revision"] if rev is None else rev
        job = store.artifact_for_rev(sid, rev)
        path = store.artifact_dir(sid) / f"{job['artifact']}.wav"
        return Response(content=path.read_bytes(), media_type="audio/wav")

    @app.get("/v1/sessions/{sid}/measured-envelope")
    def measured(sid: str, rev: int | None = Query(default=None)):
        meta = store.meta(sid)
        rev = meta["revision"] if rev is None else rev
        job = store.artifact_for_rev(sid, rev)
        path = store.artifact_dir(sid) / f"{job['artifact']}.envelope.json"
        return json.loads(path.read_text())

    return app
