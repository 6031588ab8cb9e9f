"""WebSocket teleoperation service: one live simulation per session.

Each WebSocket connection owns an independent session: its own scenario,
planner, simulation thread, teleop queue, and on-disk log. The simulation is
paced to wall clock (one control step per `dt` seconds, solver permitting) and
streams JSON text frames:

client -> server
    {"type": "start", ...scenario config overrides...}
    {"type": "teleop", "policy": <id | "stop" | "go" | "lane_change">}
    {"type": "set_param", "alpha": <float in (0, 1]>}
    {"type": "pause"}                      # toggles pause/resume
    {"type": "reset"}                      # stops the run; start begins anew

server -> client
    {"type": "state", "t", "ego", "adversary", "active_policy"}
    {"type": "tree", "branches": [{"id", "parent", "policy_id", "weight",
                                   "states"}, ...]}
    {"type": "metrics", ...run summary...}  # once, when the run ends
    {"type": "error", "msg"}                # the session always survives

Commands received before a control step are applied at the next step. A slow
client never stalls the simulation: outbound frames queue in a bounded buffer
that drops oldest first, while the on-disk log stays complete. Between control
steps the latest state frame is re-emitted at a fixed refresh rate so viewers
see a steady stream.
"""

from __future__ import annotations

import asyncio
import json
import threading
import time
import uuid
from collections import deque
from pathlib import Path
from queue import Queue

from fastapi import FastAPI, WebSocket, WebSocketDisconnect

from . import config as config_mod
from . import sim

FRAME_QUEUE_SIZE = 256
STATE_REFRESH_HZ = 20.0
FALLBACK_SCENARIO = {"scenario": "quadruped-waypoint", "adversary_rule": "teleop"}
POLICY_ALIASES = {
    "stop": ("stop", "slow-down"),
    "go": ("constant-forward", "maintain-speed"),
    "lane_change": ("lane-change",),
}


class SessionError(ValueError):
    """Client-visible session failure; reported as an error frame."""


def resolve_policy(scenario: sim.ScenarioConfig, value) -> int:
    """Map a wire policy reference (id or name/alias) to a policy id."""
    names = [p.kind for p in scenario.policies.policies]
    if isinstance(value, bool):
        raise SessionError(f"policy must be an id or name, got {value!r}")
    if isinstance(value, int):
        if 0 <= value < len(names):
            return value
        raise SessionError(f"policy id {value} out of range 0..{len(names) - 1}")
    if isinstance(value, str):
        candidates = (value,) + POLICY_ALIASES.get(value, ())
        for cand in candidates:
            if cand in names:
                return names.index(cand)
        raise SessionError(f"unknown policy {value!r} (available: {names})")
    raise SessionError(f"policy must be an id or name, got {value!r}")


class Session:
    """State of one live connection: scenario, sim thread, and frame buffer."""

    def __init__(self, default_mapping: dict | None, out_dir: Path,
                 queue_size: int = FRAME_QUEUE_SIZE):
        self.id = uuid.uuid4().hex[:8]
        self.default_mapping = dict(default_mapping or FALLBACK_SCENARIO)
        self.out_dir = out_dir
        self.frames: deque = deque(maxlen=queue_size)
        self.teleop: Queue = Queue()
        self.scenario: sim.ScenarioConfig | None = None
        self.last_state: dict | None = None
        self._thread: threading.Thread | None = None
        self._stop = threading.Event()
        self._paused = threading.Event()
        self._pause_total = 0.0

    @property
    def running(self) -> bool:
        return self._thread is not None and self._thread.is_alive()

    @property
    def paused(self) -> bool:
        return self._paused.is_set()

    def start(self, overrides: dict) -> None:
        if self.running:
            raise SessionError("a simulation is already running; reset first")
        mapping = {**self.default_mapping, **overrides}
        try:
            self.scenario = config_mod.scenario_from_mapping(mapping, name="start")
        except config_mod.ConfigError as exc:
            raise SessionError(str(exc)) from exc
        self._stop.clear()
        self._paused.clear()
        self._pause_total = 0.0
        self.teleop = Queue()
        self._thread = threading.Thread(target=self._run, name=f"sim-{self.id}",
                                        daemon=True)
        self._thread.start()

    def toggle_pause(self) -> None:
        if self._paused.is_set():
            self._paused.clear()
        else:
            self._paused.set()

    def reset(self) -> None:
        self._stop.set()
        self._paused.clear()
        if self._thread is not None:
            self._thread.join(timeout=30.0)
        self._thread = None
        self.frames.clear()
        self.last_state = None

    def shutdown(self) -> None:
        self.reset()

    # -- simulation thread ---------------------------------------------------

    def _run(self) -> None:
        scenario = self.scenario
        dt = scenario.planner.dt
        self.out_dir.mkdir(parents=True, exist_ok=True)
        log_path = self.out_dir / f"session-{self.id}-{int(time.time())}.jsonl"
        started = time.monotonic()

        def on_step(rec: sim.SimRecord) -> None:
            frame = {"type": "state", "t": rec.t,
                     "ego": [float(v) for v in rec.x],
                     "adversary": [float(v) for v in rec.z],
                     "active_policy": int(rec.active_policy)}
            self.last_state = frame
            self.frames.append(frame)
            if rec.tree is not None:
                self.frames.append({"type": "tree", "branches": rec.tree["branches"]})
            fh.write(json.dumps(rec.to_dict()) + "\n")
            fh.flush()
            if rec.u is None:  # terminal record: nothing left to pace
                return
            # pace to wall clock: step k is released no earlier than t0 + k dt
            while self._paused.is_set() and not self._stop.is_set():
                pause_begin = time.monotonic()
                time.sleep(0.02)
                self._pause_total += time.monotonic() - pause_begin
            deadline = started + self._pause_total + rec.t + dt
            remaining = deadline - time.monotonic()
            if remaining > 0 and not self._stop.is_set():
                time.sleep(min(remaining, dt))

        try:
            with open(log_path, "w", encoding="utf-8") as fh:
                log = sim.run_closed_loop(scenario, teleop=self.teleop,
                                          on_step=on_step,
                                          should_stop=self._stop.is_set)
            summary = sim.metrics(log)
            self.frames.append({"type": "metrics", **summary.to_dict()})
        except Exception as exc:  # surfaced to the client, session survives
            self.frames.append({"type": "error", "msg": f"simulation failed: {exc}"})


def create_app(*, default_mapping: dict | None = None, out_dir=None,
               refresh_hz: float = STATE_REFRESH_HZ,
               queue_size: int = FRAME_QUEUE_SIZE) -> FastAPI:
    """Build the service; each WebSocket connection gets an isolated session."""
    out = Path(out_dir) if out_dir is not None else Path("runs")
    app = FastAPI(title="branchmpc teleoperation service")

    @app.websocket("/ws")
    async def ws_session(ws: WebSocket) -> None:
        await ws.accept()
        session = Session(default_mapping, out, queue_size=queue_size)
        pump = asyncio.create_task(_pump_frames(ws, session, refresh_hz))
        try:
            while True:
                text = await ws.receive_text()
                reply = _dispatch(session, text)
                if reply is not None:
                    session.frames.append(reply)
        except WebSocketDisconnect:
            pass
        finally:
            pump.cancel()
            session.shutdown()

    return app


def _dispatch(session: Session, text: str) -> dict | None:
    """Apply one client message; returns an error frame for bad input."""
    try:
        msg = json.loads(text)
    except json.JSONDecodeError as exc:
        return {"type": "error", "msg": f"malformed JSON: {exc}"}
    if not isinstance(msg, dict) or not isinstance(msg.get("type"), str):
        return {"type": "error", "msg": "message must be an object with a 'type'"}
    kind = msg["type"]
    try:
        if kind == "start":
            overrides = {k: v for k, v in msg.items() if k != "type"}
            session.start(overrides)
        elif kind == "teleop":
            if not session.running or session.scenario is None:
                raise SessionError("no running simulation")
            pid = resolve_policy(session.scenario, msg.get("policy"))
            session.teleop.put(("policy", pid))
        elif kind == "set_param":
            alpha = msg.get("alpha")
            if isinstance(alpha, bool) or not isinstance(alpha, (int, float)) \
                    or not 0.0 < float(alpha) <= 1.0:
                raise SessionError(f"alpha must be a number in (0, 1], got {alpha!r}")
            if not session.running:
                raise SessionError("no running simulation")
            session.teleop.put(("alpha", float(alpha)))
        elif kind == "pause":
            session.toggle_pause()
        elif kind == "reset":
            session.reset()
        else:
            return {"type": "error", "msg": f"unknown message type {kind!r}"}
    except SessionError as exc:
        return {"type": "error", "msg": str(exc)}
    return None


async def _pump_frames(ws: WebSocket, session: Session, refresh_hz: float) -> None:
    """Drain the frame buffer; re-emit the latest state between control steps."""
    last_refresh = time.monotonic()
    try:
        while True:
            while session.frames:
                frame = session.frames.popleft()
                await ws.send_text(json.dumps(frame))
                last_refresh = time.monotonic()
            now = time.monotonic()
            if (session.running and session.last_state is not None
                    and now - last_refresh >= 1.0 / refresh_hz):
                await ws.send_text(json.dumps(session.last_state))
                last_refresh = now
            await asyncio.sleep(0.005)
    except asyncio.CancelledError:
        raise
    except Exception:
        pass  # connection went away; the receiver loop handles teardown
