"""HTTP service running the expert-evaluation protocol: pooled generated
images with hidden model identity, batched delivery with a familiarization
phase, durable score persistence, and CSV export.

State is an append-only JSON-lines event log per session plus a JSON
manifest per pool; everything is rebuilt from disk on startup, so the
service is resumable. A score is acknowledged only after its event line
has been flushed and fsynced.
"""

import hashlib
import json
import os
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import Depends, FastAPI, Request
from fastapi.responses import JSONResponse, PlainTextResponse, Response

from .stats import CRITERIA, SCORE_MAX, SCORE_MIN

DEFAULT_PER_MODEL = 25
DEFAULT_FAMILIARIZATION = 10
DEFAULT_BATCH_SIZE = 20


class ApiError(Exception):
    def __init__(self, status, code, message, details=None):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message
        self.details = details or {}


def _chunks(seq, size):
    return [seq[i:i + size] for i in range(0, len(seq), size)]


def _stable_seed(*parts):
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class PoolImage:
    image_id: str
    model_id: str
    path: str
    familiarization: bool


@dataclass
class Pool:
    pool_id: str
    seed: int
    per_model: int
    familiarization_size: int
    images: list  # [PoolImage]

    @property
    def scored_images(self):
        return [im for im in self.images if not im.familiarization]

    def to_json(self):
        return {
            "pool_id": self.pool_id,
            "seed": self.seed,
            "per_model": self.per_model,
            "familiarization_size": self.familiarization_size,
            "images": [vars(im) for im in self.images],
        }

    @classmethod
    def from_json(cls, data):
        return cls(data["pool_id"], data["seed"], data["per_model"],
                   data["familiarization_size"],
                   [PoolImage(**im) for im in data["images"]])


@dataclass
class Session:
    session_id: str
    pool_id: str
    rater_id: str
    seed: int
    batch_size: int
    sequence: list  # image ids, familiarization first
    fam_count: int
    delivered: int = 0  # number of batches handed out
    scores: dict = field(default_factory=dict)  # image_id -> scores dict

    def batches(self):
        fam = _chunks(self.sequence[:self.fam_count], self.batch_size)
        scoring = _chunks(self.sequence[self.fam_count:], self.batch_size)
        out = [("familiarization", b) for b in fam]
        out += [("scoring", b) for b in scoring]
        return out

    @property
    def done(self):
        batches = self.batches()
        return self.delivered >= len(batches) and all(
            img in self.scores for _, batch in batches for img in batch)


def build_pool(pool_id, model_dirs, per_model, familiarization_size, seed):
    """Assemble the hidden pool manifest. Every model contributes
    ``per_model`` scored images; the familiarization set is drawn
    round-robin from the leftovers and stays disjoint from the pool."""
    rng = np.random.default_rng(seed)
    scored = []
    leftovers = []
    for model_id in sorted(model_dirs):
        directory = Path(model_dirs[model_id])
        files = sorted(p for p in directory.glob("*.png"))
        if len(files) < per_model:
            raise ApiError(422, "config_error",
                           f"model {model_id} has {len(files)} images, needs {per_model}",
                           {"model": model_id})
        perm = rng.permutation(len(files))
        chosen = [files[i] for i in perm[:per_model]]
        rest = [files[i] for i in perm[per_model:]]
        scored.append((model_id, chosen))
        leftovers.append((model_id, rest))

    images = []
    for model_id, files in scored:
        for f in files:
            iid = hashlib.sha1(f"{pool_id}/{model_id}/{f.name}".encode()).hexdigest()[:16]
            images.append(PoolImage(iid, model_id, str(f), False))

    fam = []
    cursor = 0
    while len(fam) < familiarization_size:
        progressed = False
        for model_id, rest in leftovers:
            if cursor < len(rest):
                f = rest[cursor]
                iid = hashlib.sha1(f"{pool_id}/{model_id}/fam/{f.name}".encode()).hexdigest()[:16]
                fam.append(PoolImage(iid, model_id, str(f), True))
                progressed = True
                if len(fam) == familiarization_size:
                    break
        if len(fam) == familiarization_size:
            break
        if not progressed:
            raise ApiError(422, "config_error",
                           f"not enough spare images for a familiarization set of "
                           f"{familiarization_size}", {})
        cursor += 1
    return Pool(pool_id, seed, per_model, familiarization_size, images + fam)


def build_sequence(pool: Pool, seed):
    """Familiarization first, then scoring images interleaved round-robin
    across models with a seeded within-round shuffle, so no window of
    (number of models) consecutive images over-represents one model."""
    rng = np.random.default_rng(seed)
    fam = [im.image_id for im in pool.images if im.familiarization]
    fam = [fam[i] for i in rng.permutation(len(fam))]

    by_model = {}
    for im in pool.scored_images:
        by_model.setdefault(im.model_id, []).append(im.image_id)
    models = sorted(by_model)
    for m in models:
        ids = by_model[m]
        by_model[m] = [ids[i] for i in rng.permutation(len(ids))]
    scoring = []
    rounds = max(len(v) for v in by_model.values())
    for r in range(rounds):
        order = rng.permutation(len(models))
        for mi in order:
            ids = by_model[models[mi]]
            if r < len(ids):
                scoring.append(ids[r])
    return fam + scoring, len(fam)


class ServiceState:
    """Disk-backed pools and sessions with per-session write locks."""

    def __init__(self, storage_dir):
        self.storage = Path(storage_dir)
        (self.storage / "pools").mkdir(parents=True, exist_ok=True)
        (self.storage / "sessions").mkdir(parents=True, exist_ok=True)
        self.pools = {}
        self.sessions = {}
        self.image_index = {}  # image_id -> PoolImage
        self.locks = {}
        self._load()

    def _load(self):
        for pool_file in sorted((self.storage / "pools").glob("*/pool.json")):
            with open(pool_file) as fh:
                pool = Pool.from_json(json.load(fh))
            self._index_pool(pool)
        for log_file in sorted((self.storage / "sessions").glob("*.jsonl")):
            session = self._replay(log_file)
            if session is not None:
                self.sessions[session.session_id] = session

    def _index_pool(self, pool):
        self.pools[pool.pool_id] = pool
        for im in pool.images:
            self.image_index[im.image_id] = im

    def _replay(self, log_file):
        session = None
        with open(log_file) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                event = json.loads(line)
                kind = event.get("type")
                if kind == "created":
                    session = Session(event["session_id"], event["pool_id"],
                                      event["rater_id"], event["seed"],
                                      event["batch_size"], event["sequence"],
                                      event["fam_count"])
                elif kind == "batch" and session is not None:
                    session.delivered = max(session.delivered, event["index"] + 1)
                elif kind == "score" and session is not None:
                    session.scores[event["image_id"]] = {
                        "scores": event["scores"], "timestamp": event["timestamp"]}
        return session

    def lock_for(self, session_id):
        return self.locks.setdefault(session_id, threading.Lock())

    def append_event(self, session_id, event):
        path = self.storage / "sessions" / f"{session_id}.jsonl"
        with open(path, "a") as fh:
            fh.write(json.dumps(event, sort_keys=True) + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    def save_pool(self, pool):
        pool_dir = self.storage / "pools" / pool.pool_id
        pool_dir.mkdir(parents=True, exist_ok=True)
        tmp = pool_dir / "pool.json.tmp"
        with open(tmp, "w") as fh:
            json.dump(pool.to_json(), fh)
            fh.flush()
            os.fsync(fh.fileno())
        tmp.replace(pool_dir / "pool.json")
        self._index_pool(pool)


def create_app(storage_dir, token=None) -> FastAPI:
    app = FastAPI(title="radsynth rating service")
    state = ServiceState(storage_dir)
    app.state.service = state

    def authorized(request: Request):
        if token is None:
            return
        header = request.headers.get("authorization", "")
        if header != f"Bearer {token}":
            raise ApiError(401, "unauthorized", "missing or invalid token")

    @app.exception_handler(ApiError)
    def _api_error(request, exc: ApiError):
        return JSONResponse(status_code=exc.status,
                            content={"code": exc.code, "message": exc.message,
                                     "details": exc.details})

    def get_session(session_id) -> Session:
        session = state.sessions.get(session_id)
        if session is None:
            raise ApiError(404, "not_found", f"unknown session {session_id}")
        return session

    @app.post("/pools")
    def create_pool(body: dict, _=Depends(authorized)):
        model_dirs = body.get("model_dirs")
        if not isinstance(model_dirs, dict) or not model_dirs:
            raise ApiError(422, "validation_error", "model_dirs must be a non-empty mapping")
        per_model = int(body.get("per_model", DEFAULT_PER_MODEL))
        fam_size = int(body.get("familiarization", DEFAULT_FAMILIARIZATION))
        seed = int(body.get("seed", 0))
        pool_id = body.get("pool_id") or f"pool-{uuid.uuid4().hex[:12]}"
        if pool_id in state.pools:
            raise ApiError(409, "conflict", f"pool {pool_id} already exists")
        pool = build_pool(pool_id, model_dirs, per_model, fam_size, seed)
        state.save_pool(pool)
        return {"pool_id": pool.pool_id,
                "pool_size": len(pool.scored_images),
                "familiarization_size": fam_size}

    @app.post("/sessions")
    def create_session(body: dict, _=Depends(authorized)):
        pool_id = body.get("pool_id")
        rater_id = body.get("rater_id")
        if not pool_id or not rater_id:
            raise ApiError(422, "validation_error", "pool_id and rater_id are required")
        pool = state.pools.get(pool_id)
        if pool is None:
            raise ApiError(404, "not_found", f"unknown pool {pool_id}")
        batch_size = int(body.get("batch_size", DEFAULT_BATCH_SIZE))
        if batch_size < 1:
            raise ApiError(422, "validation_error", "batch_size must be positive")
        seed = int(body.get("seed", pool.seed))
        sequence, fam_count = build_sequence(pool, _stable_seed(seed, rater_id))
        session = Session(f"session-{uuid.uuid4().hex[:12]}", pool_id, rater_id,
                          seed, batch_size, sequence, fam_count)
        state.sessions[session.session_id] = session
        state.append_event(session.session_id, {
            "type": "created", "session_id": session.session_id,
            "pool_id": pool_id, "rater_id": rater_id, "seed": seed,
            "batch_size": batch_size, "sequence": sequence, "fam_count": fam_count,
        })
        return {"session_id": session.session_id,
                "batch_size": batch_size,
                "familiarization_size": fam_count,
                "pool_size": len(sequence) - fam_count}

    @app.get("/sessions/{session_id}/next-batch")
    def next_batch(session_id: str, _=Depends(authorized)):
        session = get_session(session_id)
        with state.lock_for(session_id):
            batches = session.batches()
            if session.delivered > 0:
                _, current = batches[session.delivered - 1]
                missing = [i for i in current if i not in session.scores]
                if missing:
                    raise ApiError(409, "incomplete_batch",
                                   "previous batch has unsubmitted scores",
                                   {"missing": missing,
                                    "batch_index": session.delivered - 1})
            if session.delivered >= len(batches):
                return {"phase": "done", "images": [], "batch_index": None}
            phase, batch = batches[session.delivered]
            index = session.delivered
            session.delivered += 1
            state.append_event(session_id, {"type": "batch", "index": index})
            phase_batches = [b for p, b in batches if p == phase]
            phase_index = sum(1 for p, _ in batches[:index] if p == phase)
            return {
                "phase": phase,
                "images": batch,
                "batch_index": phase_index + 1,
                "batches_in_phase": len(phase_batches),
                "scored": len(session.scores),
                "total": len(session.sequence),
            }

    @app.get("/images/{image_id}")
    def get_image(image_id: str, _=Depends(authorized)):
        im = state.image_index.get(image_id)
        if im is None:
            raise ApiError(404, "not_found", f"unknown image {image_id}")
        with open(im.path, "rb") as fh:
            return Response(content=fh.read(), media_type="image/png")

    @app.post("/sessions/{session_id}/scores")
    def submit_scores(session_id: str, body: dict, _=Depends(authorized)):
        session = get_session(session_id)
        image_id = body.get("image_id")
        scores = body.get("scores")
        with state.lock_for(session_id):
            if image_id not in session.sequence:
                raise ApiError(404, "not_found", f"image {image_id} is not part of this session")
            if session.delivered == 0:
                raise ApiError(409, "state_error", "no batch delivered yet")
            _, current = session.batches()[session.delivered - 1]
            if image_id not in current:
                raise ApiError(409, "state_error",
                               f"image {image_id} is not in the current batch")
            if image_id in session.scores:
                raise ApiError(409, "conflict", f"scores for image {image_id} already submitted")
            if not isinstance(scores, dict):
                raise ApiError(422, "validation_error", "scores must be a mapping")
            missing = [c for c in CRITERIA if c not in scores]
            if missing:
                raise ApiError(422, "validation_error", f"missing criteria: {missing}",
                               {"missing": missing})
            extra = [c for c in scores if c not in CRITERIA]
            if extra:
                raise ApiError(422, "validation_error", f"unknown criteria: {extra}")
            clean = {}
            for crit in CRITERIA:
                val = scores[crit]
                if not isinstance(val, int) or isinstance(val, bool) or not SCORE_MIN <= val <= SCORE_MAX:
                    raise ApiError(422, "validation_error",
                                   f"criterion {crit} must be an integer in "
                                   f"{SCORE_MIN}..{SCORE_MAX}, got {val!r}",
                                   {"criterion": crit})
                clean[crit] = val
            timestamp = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
            # durable before acknowledged
            state.append_event(session_id, {"type": "score", "image_id": image_id,
                                            "scores": clean, "timestamp": timestamp})
            session.scores[image_id] = {"scores": clean, "timestamp": timestamp}
        return {"status": "ok", "image_id": image_id}

    @app.get("/pools/{pool_id}/export")
    def export_scores(pool_id: str, _=Depends(authorized)):
        pool = state.pools.get(pool_id)
        if pool is None:
            raise ApiError(404, "not_found", f"unknown pool {pool_id}")
        fam_ids = {im.image_id for im in pool.images if im.familiarization}
        model_of = {im.image_id: im.model_id for im in pool.images}
        sessions = [s for s in state.sessions.values() if s.pool_id == pool_id]
        complete = bool(sessions) and all(s.done for s in sessions)
        lines = [f"# complete: {'true' if complete else 'false'}"]
        lines.append(",".join(["rater_id", "image_id", "model_id", *CRITERIA, "timestamp"]))
        for session in sorted(sessions, key=lambda s: s.session_id):
            for image_id in session.sequence:
                if image_id in fam_ids or image_id not in session.scores:
                    continue
                entry = session.scores[image_id]
                row = [session.rater_id, image_id, model_of[image_id]]
                row += [str(entry["scores"][c]) for c in CRITERIA]
                row.append(entry["timestamp"])
                lines.append(",".join(row))
        return PlainTextResponse("\n".join(lines) + "\n", media_type="text/csv")

    return app
