"""Real-time recognition service: WebSocket frame stream in, prediction
events and assembled text out.

One model instance is loaded at startup and shared read-only across all
sessions; every WebSocket connection owns an isolated SessionState, so
concurrent signers never see each other's text. Frames arrive as compact
binary messages (tag + dimensions + RGB24); commands and replies are JSON.
"""
from __future__ import annotations

import json
import struct
import time
import uuid
from pathlib import Path
from typing import Optional

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from fastapi.responses import HTMLResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .models import Model
from .session import SessionConfig, SessionState, classify_frame, idle_gap, update_session
from .weights_io import load as load_weights

FRAME_TAG = 0x01
FRAME_HEADER = struct.Struct("<BII")  # type tag, width, height


class HealthResponse(BaseModel):
    model: str
    classes: list[str]
    input: list[int]


class FrameReply(BaseModel):
    frame: int
    label: str
    prob: float
    probs: list[float]
    text: str


class ErrorReply(BaseModel):
    error: str


_FALLBACK_PAGE = """<!doctype html>
<html><head><meta charset="utf-8"><title>signforge</title></head>
<body><h1>signforge recognition service</h1>
<p>The web client bundle was not found. Health: <a href="/health">/health</a>;
WebSocket endpoint: <code>/ws</code>.</p></body></html>"""


def decode_frame_message(data: bytes) -> np.ndarray:
    """Binary frame message -> HxWx3 uint8 array; raises ValueError on a
    malformed header or short payload."""
    if len(data) < FRAME_HEADER.size:
        raise ValueError(f"frame message too short: {len(data)} bytes")
    tag, width, height = FRAME_HEADER.unpack_from(data)
    if tag != FRAME_TAG:
        raise ValueError(f"unknown frame type tag 0x{tag:02x}")
    expected = FRAME_HEADER.size + width * height * 3
    if width < 1 or height < 1 or len(data) != expected:
        raise ValueError(f"frame payload size mismatch: got {len(data)} bytes, "
                         f"expected {expected} for {width}x{height} RGB24")
    return np.frombuffer(data, dtype=np.uint8, offset=FRAME_HEADER.size).reshape(height, width, 3)


def encode_frame_message(frame: np.ndarray) -> bytes:
    h, w = frame.shape[0], frame.shape[1]
    return FRAME_HEADER.pack(FRAME_TAG, w, h) + np.ascontiguousarray(frame, np.uint8).tobytes()


def create_app(model: Model, defaults: Optional[SessionConfig] = None,
               static_dir: Optional[str] = None,
               mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5)) -> FastAPI:
    defaults = defaults or SessionConfig()
    app = FastAPI(title="signforge", docs_url=None, redoc_url=None)

    @app.get("/health")
    def health() -> HealthResponse:
        return HealthResponse(model=model.spec.name,
                              classes=model.spec.class_labels(),
                              input=list(model.spec.input))

    @app.websocket("/ws")
    async def ws(socket: WebSocket):
        await socket.accept()
        state = SessionState(
            session_id=uuid.uuid4().hex,
            config=SessionConfig(defaults.stability_k, defaults.confidence_tau,
                                 defaults.idle_gap_ms, defaults.window_capacity))
        frame_no = 0
        try:
            while True:
                message = await socket.receive()
                if message.get("type") == "websocket.disconnect":
                    break
                if message.get("bytes") is not None:
                    now_ms = time.monotonic() * 1000
                    idle_gap(state, now_ms)
                    try:
                        frame = decode_frame_message(message["bytes"])
                    except ValueError as e:
                        await socket.send_text(ErrorReply(error=str(e)).model_dump_json())
                        continue
                    event = classify_frame(model, frame, mean, std,
                                           frame_index=frame_no, timestamp_ms=now_ms)
                    frame_no += 1
                    update_session(state, event)
                    reply = FrameReply(frame=event.frame_index, label=event.label,
                                       prob=round(event.prob, 6),
                                       probs=[round(p, 6) for p in event.probs],
                                       text=state.text)
                    await socket.send_text(reply.model_dump_json())
                elif message.get("text") is not None:
                    try:
                        _apply_command(state, json.loads(message["text"]))
                    except (ValueError, KeyError, TypeError) as e:
                        await socket.send_text(ErrorReply(error=f"bad command: {e}").model_dump_json())
        except WebSocketDisconnect:
            pass

    if static_dir and Path(static_dir).is_dir():
        app.mount("/", StaticFiles(directory=static_dir, html=True), name="webui")
    else:
        @app.get("/")
        def index() -> HTMLResponse:
            return HTMLResponse(_FALLBACK_PAGE)

    return app


def _apply_command(state: SessionState, cmd: dict) -> None:
    verb = cmd.get("cmd")
    if verb == "clear":
        state.clear()
    elif verb == "backspace":
        state.backspace()
    elif verb == "config":
        if "k" in cmd:
            state.config.stability_k = int(cmd["k"])
        if "tau" in cmd:
            state.config.confidence_tau = float(cmd["tau"])
        if "idle_ms" in cmd:
            state.config.idle_gap_ms = float(cmd["idle_ms"])
        if state.config.stability_k < 1 or not (0 <= state.config.confidence_tau <= 1):
            raise ValueError("config out of range")
    else:
        raise ValueError(f"unknown command {verb!r}")


def serve(model_path: str, bind: str = "127.0.0.1:8765",
          defaults: Optional[SessionConfig] = None,
          static_dir: Optional[str] = None) -> None:
    """Load weights, build the app, and run uvicorn until interrupted."""
    import uvicorn

    model = load_weights(model_path)
    host, _, port = bind.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"bind address must be host:port, got {bind!r}")
    app = create_app(model, defaults=defaults, static_dir=static_dir)
    uvicorn.run(app, host=host, port=int(port), log_level="info")
