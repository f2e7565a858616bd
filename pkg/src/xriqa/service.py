"""Live study server: sessions, bit-exact image delivery, rating ingestion.

HTTP/1.1 with JSON bodies (PNG bytes for images). Endpoints:

    POST /sessions                  create a session (device gate applied)
    GET  /sessions/{id}/current     the slot to rate next
    GET  /images/{image}/{tier}     stored tier PNG, byte-exact; the session
                                    is identified by the X-Session-Id header
                                    (or ?session=) and must be on that slot
    POST /sessions/{id}/ratings     submit a rating, returns the gate decision
    GET  /sessions/{id}/progress    counts only, never rating values

Configuration comes from KONX_DATA_DIR (tier PNGs as <image>_<tier>.png,
tokens.txt, training.csv) and KONX_BIND_ADDR. Accepted batches are appended
to ratings.jsonl; protocol happenings go to sessions.jsonl.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np

from .data import RatingEvent, TIER_NAMES, append_ratings, make_tier_set
from .protocol import (PHASE_DONE, StudySession, TrainingItem, generate_batches,
                       load_training_items)

MIN_VIRTUAL_W = 1920
MIN_VIRTUAL_H = 1080
MIN_DIAGONAL_INCHES = 14.0


@dataclass
class DeviceProfile:
    reported_diagonal_inches: float
    reported_physical: tuple[int, int]
    reported_virtual: tuple[int, int]
    measured_virtual: tuple[int, int]
    measured_pixel_ratio: float
    window_maximized: bool

    @classmethod
    def from_dict(cls, d: dict) -> "DeviceProfile":
        rep, meas = d["reported"], d["measured"]
        return cls(
            reported_diagonal_inches=float(rep["diagonal_inches"]),
            reported_physical=tuple(rep["physical"]),
            reported_virtual=tuple(rep["virtual"]),
            measured_virtual=tuple(meas["virtual"]),
            measured_pixel_ratio=float(meas["pixel_ratio"]),
            window_maximized=bool(meas.get("window_maximized", False)),
        )

    def to_dict(self) -> dict:
        return {
            "reported": {"diagonal_inches": self.reported_diagonal_inches,
                         "physical": list(self.reported_physical),
                         "virtual": list(self.reported_virtual)},
            "measured": {"virtual": list(self.measured_virtual),
                         "pixel_ratio": self.measured_pixel_ratio,
                         "window_maximized": self.window_maximized},
        }


def device_acceptable(device: DeviceProfile) -> bool:
    """The measured virtual resolution governs; the diagonal is self-reported."""
    mw, mh = device.measured_virtual
    if mw < MIN_VIRTUAL_W or mh < MIN_VIRTUAL_H:
        return False
    return device.reported_diagonal_inches > MIN_DIAGONAL_INCHES


@dataclass
class StudyConfig:
    image_ids: list[str]
    tiers: list[str] = field(default_factory=lambda: list(TIER_NAMES))
    training_items: list[TrainingItem] = field(default_factory=list)
    seed: int = 0
    strict_batches: bool = False
    tier_base: tuple[int, int] = (512, 384)


class StudyServer:
    """Session registry plus persistence; the HTTP handler delegates here.

    Per-session operations are serialized by a per-session lock; distinct
    sessions run fully concurrently. Log files are append-only.
    """

    def __init__(self, config: StudyConfig, data_dir: str | Path, tokens: set[str]):
        self.config = config
        self.data_dir = Path(data_dir)
        self.tokens = set(tokens)
        self.tier_geometries = {
            name: (t.width, t.height)
            for name, t in make_tier_set(*config.tier_base).items()}
        self._registry_lock = threading.Lock()
        self._sessions: dict[str, StudySession] = {}
        self._session_locks: dict[str, threading.Lock] = {}
        self._token_of: dict[str, str] = {}
        self._devices: dict[str, DeviceProfile] = {}
        self._log_lock = threading.Lock()
        self._counter = 0

    # -- session lifecycle -------------------------------------------------

    def create_session(self, token: str, device: DeviceProfile) -> dict:
        if token not in self.tokens:
            raise PermissionError("unknown participant token")
        if not device_acceptable(device):
            raise ValueError(
                f"device rejected: need measured virtual >= {MIN_VIRTUAL_W}x"
                f"{MIN_VIRTUAL_H} and diagonal > {MIN_DIAGONAL_INCHES} inches")
        with self._registry_lock:
            for sid, owner in self._token_of.items():
                if owner == token and self._sessions[sid].phase != PHASE_DONE:
                    raise RuntimeError(f"token already has an active session {sid}")
            self._counter += 1
            sid = f"s{self._counter:06d}"
            token_key = int.from_bytes(hashlib.sha256(token.encode()).digest()[:4], "little")
            seed = int(np.random.SeedSequence(
                [self.config.seed, token_key]).generate_state(1)[0])
            batches = generate_batches(self.config.image_ids, self.config.tiers,
                                       seed=seed, strict=self.config.strict_batches)
            session = StudySession(participant_id=token,
                                   training_items=list(self.config.training_items),
                                   batches=batches)
            session.mark_device_checked()
            self._sessions[sid] = session
            self._session_locks[sid] = threading.Lock()
            self._token_of[sid] = token
            self._devices[sid] = device
        self._log({"event": "session_created", "session_id": sid,
                   "device": device.to_dict()})
        return {"session_id": sid, "phase": session.phase}

    def _get(self, session_id: str) -> tuple[StudySession, threading.Lock]:
        with self._registry_lock:
            if session_id not in self._sessions:
                raise KeyError(f"unknown session {session_id!r}")
            return self._sessions[session_id], self._session_locks[session_id]

    # -- endpoints ----------------------------------------------------------

    def current_slot(self, session_id: str) -> dict:
        session, lock = self._get(session_id)
        with lock:
            slot = session.current_slot()
            if slot is None:
                return {"phase": session.phase}
            out = {"phase": slot.phase, "image_id": slot.image_id, "tier": slot.tier,
                   "geometry": list(self.tier_geometries[slot.tier])}
            if slot.batch_id is not None:
                out.update({"batch_id": slot.batch_id, "repetition": slot.repetition,
                            "slot_index": slot.index, "slot_count":
                            len(session.batches[session._batch_pos].slots)})
            return out

    def image_bytes(self, session_id: str, image_id: str, tier: str) -> tuple[bytes, tuple[int, int]]:
        session, lock = self._get(session_id)
        with lock:
            slot = session.current_slot()
            if slot is None or slot.image_id != image_id or slot.tier != tier:
                raise LookupError(
                    "out-of-order image request: only the current slot may be fetched")
        path = self.data_dir / f"{image_id}_{tier}.png"
        if not path.exists():
            raise FileNotFoundError(f"no stored tier image {path.name}")
        return path.read_bytes(), self.tier_geometries[tier]

    def ingest_rating(self, session_id: str, payload: dict) -> dict:
        session, lock = self._get(session_id)
        event = RatingEvent.from_dict(payload)
        event.validate(self.tier_geometries.get(event.tier))
        if event.participant_id != session.participant_id:
            raise ValueError("field 'participant_id': does not match the session")
        with lock:
            decision = session.submit_rating(event)
            accepted = session.pop_newly_accepted()
        if accepted:
            with self._log_lock:
                append_ratings(accepted, self.data_dir / "ratings.jsonl")
        self._log({"event": "rating", "session_id": session_id,
                   "kind": decision.kind, "batch_accepted": decision.batch_accepted,
                   "low_consistency": decision.low_consistency})
        out = {"decision": decision.kind, "batch_accepted": decision.batch_accepted}
        if decision.acceptable_range is not None:
            out["acceptable_range"] = list(decision.acceptable_range)
        if decision.low_consistency:
            out["low_consistency"] = True
        return out

    def progress(self, session_id: str) -> dict:
        session, lock = self._get(session_id)
        with lock:
            return session.progress()

    def _log(self, entry: dict) -> None:
        entry = {"ts": int(time.time() * 1000), **entry}
        with self._log_lock:
            with open(self.data_dir / "sessions.jsonl", "a", encoding="utf-8") as f:
                f.write(json.dumps(entry, separators=(",", ":")) + "\n")


class _Handler(BaseHTTPRequestHandler):
    server_version = "xriqa-study/1"
    study: StudyServer = None  # injected by make_http_server

    def log_message(self, fmt, *args):  # structured log instead of stderr chatter
        self.study._log({"event": "http", "line": fmt % args})

    def _send_json(self, code: int, payload: dict) -> None:
        blob = json.dumps(payload).encode("utf-8")
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(blob)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(blob)

    def _error(self, code: int, message: str) -> None:
        self._send_json(code, {"error": message})

    def _read_body(self) -> dict:
        length = int(self.headers.get("Content-Length", "0"))
        if length == 0:
            return {}
        return json.loads(self.rfile.read(length).decode("utf-8"))

    def _session_param(self) -> str | None:
        sid = self.headers.get("X-Session-Id")
        if sid:
            return sid
        if "?" in self.path:
            query = self.path.split("?", 1)[1]
            for part in query.split("&"):
                if part.startswith("session="):
                    return part[len("session="):]
        return None

    def do_OPTIONS(self):
        self.send_response(204)
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Headers", "Content-Type, X-Session-Id")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
        self.end_headers()

    def do_POST(self):
        parts = self.path.split("?")[0].strip("/").split("/")
        try:
            if parts == ["sessions"]:
                body = self._read_body()
                device = DeviceProfile.from_dict(body["device"])
                out = self.study.create_session(body["participant_token"], device)
                return self._send_json(201, out)
            if len(parts) == 3 and parts[0] == "sessions" and parts[2] == "ratings":
                out = self.study.ingest_rating(parts[1], self._read_body())
                return self._send_json(200, out)
            return self._error(404, f"no such endpoint {self.path}")
        except PermissionError as err:
            return self._error(401, str(err))
        except KeyError as err:
            return self._error(404, str(err))
        except RuntimeError as err:
            return self._error(409, str(err))
        except (ValueError, TypeError) as err:
            return self._error(400, str(err))

    def do_GET(self):
        parts = self.path.split("?")[0].strip("/").split("/")
        try:
            if len(parts) == 3 and parts[0] == "sessions" and parts[2] == "current":
                return self._send_json(200, self.study.current_slot(parts[1]))
            if len(parts) == 3 and parts[0] == "sessions" and parts[2] == "progress":
                return self._send_json(200, self.study.progress(parts[1]))
            if len(parts) == 3 and parts[0] == "images":
                sid = self._session_param()
                if not sid:
                    return self._error(400, "missing X-Session-Id header")
                blob, (w, h) = self.study.image_bytes(sid, parts[1], parts[2])
                self.send_response(200)
                self.send_header("Content-Type", "image/png")
                self.send_header("Content-Length", str(len(blob)))
                self.send_header("X-Image-Width", str(w))
                self.send_header("X-Image-Height", str(h))
                self.send_header("Access-Control-Allow-Origin", "*")
                self.end_headers()
                self.wfile.write(blob)
                return None
            return self._error(404, f"no such endpoint {self.path}")
        except KeyError as err:
            return self._error(404, str(err))
        except FileNotFoundError as err:
            return self._error(404, str(err))
        except LookupError as err:
            return self._error(409, str(err))
        except ValueError as err:
            return self._error(400, str(err))


def make_http_server(study: StudyServer, bind_addr: str = "127.0.0.1:0") -> ThreadingHTTPServer:
    host, _, port = bind_addr.rpartition(":")
    handler = type("BoundHandler", (_Handler,), {"study": study})
    return ThreadingHTTPServer((host or "127.0.0.1", int(port)), handler)


def server_from_env() -> tuple[StudyServer, ThreadingHTTPServer]:
    """Build a server from KONX_DATA_DIR and KONX_BIND_ADDR."""
    data_dir = Path(os.environ.get("KONX_DATA_DIR", "."))
    bind_addr = os.environ.get("KONX_BIND_ADDR", "127.0.0.1:8080")
    tokens_path = data_dir / "tokens.txt"
    tokens = {t.strip() for t in tokens_path.read_text().splitlines() if t.strip()} \
        if tokens_path.exists() else set()
    training_path = data_dir / "training.csv"
    training = load_training_items(training_path) if training_path.exists() else []
    manifest = json.loads((data_dir / "study.json").read_text(encoding="utf-8"))
    config = StudyConfig(image_ids=manifest["image_ids"],
                         tiers=manifest.get("tiers", list(TIER_NAMES)),
                         training_items=training,
                         seed=int(manifest.get("seed", 0)),
                         strict_batches=bool(manifest.get("strict_batches", False)),
                         tier_base=tuple(manifest.get("tier_base", (512, 384))))
    study = StudyServer(config, data_dir, tokens)
    return study, make_http_server(study, bind_addr)
