"""Session-oriented HTTP API over the interactive pipeline.

Endpoints: POST /sessions, POST /sessions/{id}/rounds, GET
/sessions/{id}/trace, GET /healthz. Images travel base64-PNG inside JSON
bodies; the conflict map PNG uses the 0/128/255 encoding. Sessions live in
memory with a TTL and optional directory persistence; requests for the same
session are serialized by a per-session lock.
"""

from __future__ import annotations

import base64
import binascii
import json
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from .conflict import ConflictMap, conflict_map_png, empty_conflict_map, update_conflict_map
from .core import AlphaMatte, Image, InstanceMask, decode_image_png, encode_gray_png, encode_image_png
from .prompts import Prompt, PromptError, parse_prompts, prompt_to_dict

DEFAULT_TTL_SECONDS = 3600.0
MAX_SIDE = 4096


@dataclass
class RoundResult:
    round: int
    prompts: list[Prompt]
    mask_png: bytes
    matte_png: bytes
    conflict_png: bytes
    timing_ms: float


@dataclass
class SessionState:
    id: str
    image: Image
    prompt_history: list[list[Prompt]] = field(default_factory=list)
    predictions: list[tuple[InstanceMask, AlphaMatte]] = field(default_factory=list)
    conflict_map: ConflictMap = None
    round: int = 0
    results: list[RoundResult] = field(default_factory=list)
    touched: float = field(default_factory=time.monotonic)
    lock: threading.Lock = field(default_factory=threading.Lock)

    def __post_init__(self):
        if self.conflict_map is None:
            self.conflict_map = empty_conflict_map(self.image.height, self.image.width)


class SessionStore:
    def __init__(self, ttl_seconds: float = DEFAULT_TTL_SECONDS):
        self.ttl = ttl_seconds
        self._sessions: dict[str, SessionState] = {}
        self._lock = threading.Lock()

    def create(self, image: Image) -> SessionState:
        state = SessionState(id=uuid.uuid4().hex, image=image)
        with self._lock:
            self._purge_expired()
            self._sessions[state.id] = state
        return state

    def get(self, session_id: str) -> SessionState:
        with self._lock:
            self._purge_expired()
            state = self._sessions.get(session_id)
        if state is None:
            raise KeyError(session_id)
        state.touched = time.monotonic()
        return state

    def evict(self, session_id: str) -> None:
        with self._lock:
            self._sessions.pop(session_id, None)

    def _purge_expired(self) -> None:
        now = time.monotonic()
        stale = [sid for sid, s in self._sessions.items() if now - s.touched > self.ttl]
        for sid in stale:
            del self._sessions[sid]


class CreateSessionBody(BaseModel):
    image: str


class RoundBody(BaseModel):
    prompts: list[dict]


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def create_app(pipeline, ttl_seconds: float = DEFAULT_TTL_SECONDS,
               persist_dir: str | None = None, max_side: int = MAX_SIDE) -> FastAPI:
    """Build the API over any object exposing predict_round(image, prompts,
    prev_mask, conflict) -> (InstanceMask, AlphaMatte)."""
    app = FastAPI(title="imatte session service")
    store = SessionStore(ttl_seconds)
    app.state.store = store
    persist_root = Path(persist_dir) if persist_dir else None

    def _persist(state: SessionState, result: RoundResult) -> None:
        if persist_root is None:
            return
        root = persist_root / state.id
        root.mkdir(parents=True, exist_ok=True)
        (root / f"round_{result.round}_mask.png").write_bytes(result.mask_png)
        (root / f"round_{result.round}_matte.png").write_bytes(result.matte_png)
        (root / f"round_{result.round}_conflict.png").write_bytes(result.conflict_png)
        (root / "session.json").write_text(json.dumps(_trace_payload(state)))

    def _trace_payload(state: SessionState) -> dict:
        return {
            "id": state.id,
            "rounds": [
                {
                    "round": r.round,
                    "prompts": [prompt_to_dict(p) for p in r.prompts],
                    "mask_png": _b64(r.mask_png),
                    "matte_png": _b64(r.matte_png),
                    "conflict_png": _b64(r.conflict_png),
                    "timing_ms": r.timing_ms,
                }
                for r in state.results
            ],
        }

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    @app.post("/sessions", status_code=201)
    def create_session(body: CreateSessionBody):
        try:
            raw = base64.b64decode(body.image, validate=True)
            image = decode_image_png(raw)
        except (binascii.Error, ValueError, OSError) as exc:
            raise HTTPException(status_code=400, detail=f"undecodable image: {exc}")
        if image.height > max_side or image.width > max_side:
            raise HTTPException(status_code=400,
                                detail=f"image exceeds {max_side}x{max_side} limit")
        state = store.create(image)
        return {"id": state.id, "width": image.width, "height": image.height}

    @app.post("/sessions/{session_id}/rounds")
    def apply_round(session_id: str, body: RoundBody):
        try:
            state = store.get(session_id)
        except KeyError:
            raise HTTPException(status_code=404, detail="unknown session")
        try:
            prompts = parse_prompts({"prompts": body.prompts})
            if not prompts:
                raise PromptError("prompts: at least one prompt per round")
            for p in prompts:
                p.check_bounds(state.image.height, state.image.width)
        except PromptError as exc:
            raise HTTPException(status_code=422, detail=str(exc))

        with state.lock:
            started = time.perf_counter()
            prev_mask = state.predictions[-1][0] if state.predictions else None
            cmap = update_conflict_map(prev_mask, prompts, state.conflict_map)
            mask, matte = pipeline.predict_round(state.image, prompts, prev_mask, cmap)
            elapsed_ms = (time.perf_counter() - started) * 1000.0

            state.round += 1
            state.conflict_map = cmap
            state.prompt_history.append(prompts)
            state.predictions.append((mask, matte))
            result = RoundResult(
                round=state.round,
                prompts=prompts,
                mask_png=encode_gray_png(mask.mask),
                matte_png=encode_gray_png(matte.alpha),
                conflict_png=conflict_map_png(cmap),
                timing_ms=elapsed_ms,
            )
            state.results.append(result)
            _persist(state, result)

        return {
            "round": result.round,
            "mask_png": _b64(result.mask_png),
            "matte_png": _b64(result.matte_png),
            "conflict_png": _b64(result.conflict_png),
            "timing_ms": result.timing_ms,
        }

    @app.get("/sessions/{session_id}/trace")
    def get_trace(session_id: str):
        try:
            state = store.get(session_id)
        except KeyError:
            raise HTTPException(status_code=404, detail="unknown session")
        with state.lock:
            return _trace_payload(state)

    return app
