"""Streaming control protocol between the engine and viewers.

JSON control messages plus binary image payloads over a full-duplex
channel (WebSocket in production, in-memory pairs in tests). Message
types: Hello, SetParams, SetDisplay, SetPlane, RequestSnapshot,
FrameReady, Stats, Error (SetTgc / SetTransmitPower are reserved and
ignored: they act on imaging hardware this engine does not drive).

Every FrameReady is followed by exactly one binary payload: a 16-byte
dims header (Nx, Ny, Nz, reserved u32 LE) then row-major bytes — uint8
for "gray8" (server-side display transform applied), float32 envelope
for "rawf32" snapshots.

Per-section parameter updates funnel through the pipeline's staging, so
they are last-writer-wins between frame boundaries and never tear. A
slow client only ever drops display frames from its own depth-2 queue;
the compute path never waits on a viewer.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from collections import deque
from dataclasses import dataclass, replace
from typing import Optional, Protocol

import numpy as np

from .io import DisplaySettings, display_transform, raw_f32_bytes
from .model import AcquisitionMode, ImageFrame, Interpolation
from .pipeline import (
    ParameterSet,
    Pipeline,
    Section,
    parameter_set_from_dict,
    parameter_set_to_dict,
)

logger = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
CLIENT_QUEUE_DEPTH = 2
STATS_PERIOD_S = 1.0


class Channel(Protocol):
    def send_text(self, text: str) -> None: ...
    def send_binary(self, payload: bytes) -> None: ...
    def recv(self, timeout: Optional[float] = None): ...
    def close(self) -> None: ...


def _dims_header(shape: tuple[int, int, int]) -> bytes:
    import struct

    return struct.pack("<4I", shape[0], shape[1], shape[2], 0)


def encode_gray8(image: ImageFrame, settings: DisplaySettings) -> bytes:
    grid = display_transform(image, settings)
    return _dims_header(grid.shape) + grid.tobytes()


def encode_rawf32(image: ImageFrame) -> bytes:
    return raw_f32_bytes(np.abs(image.values).astype(np.float32))


def _coerce_param_value(key: str, value):
    """JSON-native SetParams values -> the parsed forms read_params produces."""
    if key == "acquisition.mode":
        return AcquisitionMode(value)
    if key == "beamform.interpolation":
        return Interpolation(value).value
    if key in ("beamform.transmit_plane", "beamform.transmit_focus"):
        return tuple(tuple(float(x) for x in t) for t in value)
    if isinstance(value, list):
        return tuple(value)
    return value


@dataclass
class _Stats:
    payload: Optional[dict] = None


class Session:
    """One connected viewer: receiver loop plus a bounded sender queue."""

    def __init__(self, channel: Channel, server: "EngineServer", client_id: int):
        self.channel = channel
        self.server = server
        self.client_id = client_id
        self._frames: deque[ImageFrame] = deque(maxlen=CLIENT_QUEUE_DEPTH)
        self._stats = _Stats()
        self._wake = threading.Condition()
        # keeps header+payload pairs atomic across sender/receiver threads
        self._send_mutex = threading.Lock()
        self._alive = True
        self._last_sent_frame = -1

    # engine side -------------------------------------------------------------

    def enqueue_frame(self, image: ImageFrame) -> None:
        with self._wake:
            self._frames.append(image)  # deque drops the oldest when full
            self._wake.notify()

    def enqueue_stats(self, payload: dict) -> None:
        with self._wake:
            self._stats.payload = payload  # always latest
            self._wake.notify()

    # wire side ---------------------------------------------------------------

    def _send_json(self, obj: dict) -> None:
        with self._send_mutex:
            self.channel.send_text(json.dumps(obj))

    def _send_pair(self, header: dict, payload: bytes) -> None:
        with self._send_mutex:
            self.channel.send_text(json.dumps(header))
            self.channel.send_binary(payload)

    def _send_error(self, code: str, message: str, fld: Optional[str] = None) -> None:
        err = {"type": "Error", "code": code, "message": message}
        if fld:
            err["field"] = fld
        try:
            self._send_json(err)
        except (ConnectionError, OSError):
            self._alive = False

    def _send_frame(self, image: ImageFrame) -> None:
        pset = self.server.find_set(image.params_id)
        settings = pset.display if pset else DisplaySettings()
        payload = encode_gray8(image, settings)
        header = {
            "type": "FrameReady",
            "frame_id": image.frame_id,
            "set_id": image.params_id,
            "dims": list(image.values.shape),
            "encoding": "gray8",
            "region_min": list(pset.beamform.region_min) if pset else None,
            "region_max": list(pset.beamform.region_max) if pset else None,
            "stage_timings": [[name, ns] for name, ns in image.stage_timings],
        }
        self._send_pair(header, payload)
        self._last_sent_frame = image.frame_id

    def _sender_loop(self) -> None:
        while self._alive:
            with self._wake:
                if not self._frames and self._stats.payload is None:
                    self._wake.wait(timeout=0.1)
                image = self._frames.popleft() if self._frames else None
                stats, self._stats.payload = self._stats.payload, None
            try:
                if stats is not None:
                    self._send_json(stats)
                if image is not None:
                    self._send_frame(image)
            except (ConnectionError, OSError):
                self._alive = False

    def _handle_message(self, text: str) -> None:
        try:
            msg = json.loads(text)
        except json.JSONDecodeError as exc:
            self._send_error("bad_json", f"malformed message: {exc}")
            return
        mtype = msg.get("type")
        if mtype == "SetDisplay":
            self._on_set_display(msg)
        elif mtype == "SetPlane":
            self._on_set_plane(msg)
        elif mtype == "SetParams":
            self._on_set_params(msg)
        elif mtype == "RequestSnapshot":
            self._on_snapshot(msg)
        elif mtype in ("SetTgc", "SetTransmitPower"):
            pass  # reserved: hardware controls this engine does not drive
        else:
            self._send_error("bad_type", f"unknown message type {mtype!r}")

    def _active_set(self, msg: dict) -> Optional[ParameterSet]:
        set_id = int(msg.get("set_id", self.server.pipeline.sets[0].id))
        pset = self.server.find_set(set_id)
        if pset is None:
            self._send_error("bad_set", f"no parameter set {set_id}", "set_id")
        return pset

    def _on_set_display(self, msg: dict) -> None:
        pset = self._active_set(msg)
        if pset is None:
            return
        try:
            kind = msg["mode"]
            value = float(msg["value"])
            settings = DisplaySettings(
                kind=kind,
                dynamic_range_db=value if kind == "log" else pset.display.dynamic_range_db,
                power_threshold=value if kind == "power" else pset.display.power_threshold,
            )
        except (KeyError, ValueError) as exc:
            self._send_error("bad_value", str(exc), "mode/value")
            return
        updated = replace(pset, display=settings, dirty=Section.DISPLAY)
        self._stage(updated)

    def _on_set_plane(self, msg: dict) -> None:
        pset = self._active_set(msg)
        if pset is None:
            return
        try:
            transform = np.asarray(msg["output_transform"], dtype=float).reshape(4, 4)
            beamform = replace(pset.beamform, output_transform=transform)
        except (KeyError, ValueError) as exc:
            self._send_error("bad_value", str(exc), "output_transform")
            return
        self._stage(replace(pset, beamform=beamform, dirty=Section.BEAMFORM))

    def _on_set_params(self, msg: dict) -> None:
        pset = self._active_set(msg)
        if pset is None:
            return
        raw = msg.get("params", {})
        base = parameter_set_to_dict(pset)
        try:
            merged = dict(base)
            from .io import _PARAM_KEYS, parse_params_text

            text = "\n".join(f"{k}={v}" for k, v in merged.items())
            parsed = parse_params_text(text)[0]
            for key, value in raw.items():
                if key not in _PARAM_KEYS:
                    raise ValueError(f"unknown key {key!r}")
                parsed[key] = _coerce_param_value(key, value)
            updated = parameter_set_from_dict(pset.id, parsed)
        except Exception as exc:
            self._send_error("bad_params", str(exc))
            return
        self._stage(replace(updated, dirty=Section.ALL))

    def _stage(self, pset: ParameterSet) -> None:
        ack = self.server.pipeline.update_parameters(pset)
        if not ack.accepted:
            self._send_error("rejected", "; ".join(ack.violations))

    def _on_snapshot(self, msg: dict) -> None:
        set_id = int(msg.get("set_id", self.server.pipeline.sets[0].id))
        image = self.server.latest_image(set_id)
        if image is None:
            self._send_error("no_frame", "no frame produced yet")
            return
        pset = self.server.find_set(set_id)
        header = {
            "type": "FrameReady",
            "frame_id": image.frame_id,
            "set_id": set_id,
            "dims": list(image.values.shape),
            "encoding": "rawf32",
            "snapshot": True,
            "region_min": list(pset.beamform.region_min) if pset else None,
            "region_max": list(pset.beamform.region_max) if pset else None,
            "params": parameter_set_to_dict(pset) if pset else {},
        }
        self._send_pair(header, encode_rawf32(image))

    def run(self) -> None:
        """Blocking session driver: hello, spawn sender, pump control messages."""
        hello = {
            "type": "Hello",
            "version": PROTOCOL_VERSION,
            "descriptor": self.server.descriptor_summary(),
            "sets": [parameter_set_to_dict(s) for s in self.server.pipeline.sets],
        }
        try:
            self._send_json(hello)
        except (ConnectionError, OSError):
            return
        sender = threading.Thread(target=self._sender_loop, daemon=True)
        sender.start()
        try:
            while self._alive:
                item = self.channel.recv()
                if item is None:
                    break
                kind, payload = item
                if kind == "text":
                    self._handle_message(payload)
                # binary from clients is not part of the protocol; ignored
        finally:
            self._alive = False
            with self._wake:
                self._wake.notify()
            sender.join(timeout=2)
            self.server.unregister(self)


class EngineServer:
    """Fans pipeline output out to sessions and serializes their updates."""

    def __init__(self, pipeline: Pipeline):
        self.pipeline = pipeline
        self._sessions: list[Session] = []
        self._lock = threading.Lock()
        self._latest: dict[int, ImageFrame] = {}
        self._next_client = 0
        self._last_stats = 0.0
        pipeline.on_image = self.publish_image

    def descriptor_summary(self) -> dict:
        d = self.pipeline.base_descriptor
        return {
            "sample_count": d.sample_count,
            "channel_count": d.channel_count,
            "transmit_count": d.transmit_count,
            "format": d.format.value,
            "sampling_freq": d.sampling_freq,
            "demodulation_freq": d.demodulation_freq,
            "sound_speed": d.sound_speed,
            "mode": d.acquisition_mode.value,
        }

    def find_set(self, set_id: int) -> Optional[ParameterSet]:
        for s in self.pipeline.sets:
            if s.id == set_id:
                return s
        return None

    def latest_image(self, set_id: int) -> Optional[ImageFrame]:
        with self._lock:
            return self._latest.get(set_id)

    def publish_image(self, image: ImageFrame) -> None:
        with self._lock:
            self._latest[image.params_id] = image
            sessions = list(self._sessions)
        for s in sessions:
            s.enqueue_frame(image)
        now = time.monotonic()
        if now - self._last_stats >= STATS_PERIOD_S:
            self._last_stats = now
            stats = self.stats_message()
            for s in sessions:
                s.enqueue_stats(stats)

    def stats_message(self) -> dict:
        snap = self.pipeline.stats_snapshot()
        return {
            "type": "Stats",
            "stages": snap["stages"],
            "upload_interval_ns": snap["upload_interval_ns"],
            "frames_submitted": snap["frames_submitted"],
            "frames_processed": snap["frames_processed"],
        }

    def handle_client(self, channel: Channel) -> Session:
        with self._lock:
            session = Session(channel, self, self._next_client)
            self._next_client += 1
            self._sessions.append(session)
        return session

    def unregister(self, session: Session) -> None:
        with self._lock:
            if session in self._sessions:
                self._sessions.remove(session)

    def run_client(self, channel: Channel) -> None:
        self.handle_client(channel).run()
