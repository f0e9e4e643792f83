"""Live-session logic: per-frame classification events, the letter-commitment
state machine, and idle-gap word spacing.

A letter is committed when the same label holds top-1 with probability >= tau
for K consecutive events; every commit clears the run, so holding a sign
keeps committing every K frames (that is how doubled letters are typed). The
state machine is deterministic: replaying an event log reproduces the text.
"""
from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dataset import preprocess
from .models import Model, predict


@dataclass(frozen=True)
class PredictionEvent:
    frame_index: int
    label: str
    prob: float
    probs: tuple[float, ...]
    timestamp_ms: float

    def __post_init__(self):
        total = sum(self.probs)
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"probability vector sums to {total}, expected 1")
        if abs(self.prob - max(self.probs)) > 1e-6:
            raise ValueError("event probability must equal the max of its vector")


@dataclass
class SessionConfig:
    stability_k: int = 8
    confidence_tau: float = 0.6
    idle_gap_ms: float = 1500.0
    window_capacity: int = 32


@dataclass
class SessionState:
    session_id: str
    config: SessionConfig = field(default_factory=SessionConfig)
    window: deque = field(default_factory=lambda: deque(maxlen=32))
    text: str = ""
    run_label: Optional[str] = None
    run_length: int = 0
    last_committed: Optional[str] = None
    last_commit_ms: Optional[float] = None

    def __post_init__(self):
        self.window = deque(self.window, maxlen=self.config.window_capacity)

    def reset_run(self) -> None:
        self.run_label = None
        self.run_length = 0

    def clear(self) -> None:
        self.text = ""
        self.last_committed = None
        self.last_commit_ms = None
        self.window.clear()
        self.reset_run()

    def backspace(self) -> None:
        self.text = self.text[:-1]


def classify_frame(model: Model, frame: np.ndarray, mean, std,
                   frame_index: int = 0,
                   timestamp_ms: Optional[float] = None) -> PredictionEvent:
    """Stateless per-frame classification: resize to the model input,
    standardize with the recorded constants, infer-mode predict."""
    size = (model.spec.input[1], model.spec.input[2])
    x = preprocess(frame, size, mean, std)
    idx, probs = predict(model, x)
    return PredictionEvent(
        frame_index=frame_index,
        label=model.spec.class_labels()[idx],
        prob=float(probs[idx]),
        probs=tuple(float(p) for p in probs),
        timestamp_ms=time.monotonic() * 1000 if timestamp_ms is None else timestamp_ms,
    )


def update_session(state: SessionState, event: PredictionEvent
                   ) -> tuple[SessionState, Optional[str]]:
    """Feed one event through the commitment state machine.

    Returns (state, committed letter or None). An event below the confidence
    threshold breaks the current run.
    """
    state.window.append((event.label, event.prob))
    cfg = state.config
    if event.prob >= cfg.confidence_tau:
        if event.label == state.run_label:
            state.run_length += 1
        else:
            state.run_label = event.label
            state.run_length = 1
    else:
        state.reset_run()
        return state, None
    if state.run_length >= cfg.stability_k:
        letter = state.run_label
        state.text += letter
        state.last_committed = letter
        state.last_commit_ms = event.timestamp_ms
        state.reset_run()  # a repeat needs a fresh full run
        return state, letter
    return state, None


def idle_gap(state: SessionState, now_ms: float) -> SessionState:
    """Append one word-separating space after a commit-free idle period.

    No-op while the text is empty or already ends in a space.
    """
    if not state.text or state.text.endswith(" "):
        return state
    last = state.last_commit_ms
    if last is not None and now_ms - last >= state.config.idle_gap_ms:
        state.text += " "
    return state
