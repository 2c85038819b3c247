"""Staged orchestration: ingest -> demodulate -> decode -> DAS -> present.

A fixed-size ring of frame slots (3 by default) keeps RF uploads,
decoding and image formation in flight simultaneously. The producer
(submit_frame) blocks rather than overwrite unprocessed data; the
consumer (process_next) frees each slot as soon as the first compute
stage has consumed it, so a well-paced producer never waits after the
initial warm-up fills.

Parameter updates are staged and applied atomically at frame boundaries.
Changes to frozen constants (data shape, filter taps, interpolation,
demodulation ratio) rebuild the pre-resolved stage closures — the
portable analogue of JIT-specialized kernels — on the compute thread,
never stalling ingest.
"""

from __future__ import annotations

import threading
import time
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum, IntFlag
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import das as das_mod
from . import decode as decode_mod
from . import sigproc
from .io import DisplaySettings
from .model import (
    AcquisitionDescriptor,
    AcquisitionMode,
    ArrayGeometry,
    BeamformParams,
    FilterKind,
    FilterSpec,
    ImageFrame,
    Interpolation,
    PlaneTransmit,
    RfFrame,
    VirtualSourceTransmit,
    validate_descriptor,
)


class SlotState(Enum):
    FREE = "free"
    UPLOADING = "uploading"
    READY = "ready"
    PROCESSING = "processing"


_LEGAL = {
    SlotState.FREE: SlotState.UPLOADING,
    SlotState.UPLOADING: SlotState.READY,
    SlotState.READY: SlotState.PROCESSING,
    SlotState.PROCESSING: SlotState.FREE,
}


class SlotStateError(RuntimeError):
    pass


class PipelineClosed(RuntimeError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, frame_id: int, cause: BaseException):
        super().__init__(f"stage {stage!r} failed on frame {frame_id}: {cause}")
        self.stage = stage
        self.frame_id = frame_id
        self.cause = cause


@dataclass
class RingSlot:
    index: int
    capacity: int
    state: SlotState = SlotState.FREE
    frame_id: int = -1
    data: Optional[np.ndarray] = None
    descriptor: Optional[AcquisitionDescriptor] = None

    def transition(self, to: SlotState) -> None:
        if _LEGAL[self.state] is not to:
            raise SlotStateError(
                f"slot {self.index}: illegal transition {self.state.value} -> {to.value}"
            )
        self.state = to


class Section(IntFlag):
    ACQUISITION = 1
    GEOMETRY = 2
    BEAMFORM = 4
    FILTER = 8
    DISPLAY = 16
    ALL = 31


@dataclass
class ParameterSet:
    """One beamforming configuration, updatable per section at runtime."""

    id: int
    beamform: BeamformParams
    display: DisplaySettings = field(default_factory=DisplaySettings)
    acquisition_overrides: dict = field(default_factory=dict)
    geometry_overrides: dict = field(default_factory=dict)
    dirty: Section = Section.ALL

    def merged_descriptor(self, base: AcquisitionDescriptor) -> AcquisitionDescriptor:
        if not self.acquisition_overrides:
            return base
        return replace(base, **self.acquisition_overrides)

    def merged_geometry(self, base: ArrayGeometry) -> ArrayGeometry:
        if not self.geometry_overrides:
            return base
        kwargs = {
            "row_pitch": base.row_pitch,
            "column_pitch": base.column_pitch,
            "row_count": base.row_count,
            "column_count": base.column_count,
            "global_to_array": base.global_to_array,
        }
        kwargs.update(self.geometry_overrides)
        return ArrayGeometry(**kwargs)


def parameter_set_from_dict(set_id: int, d: dict) -> ParameterSet:
    """Build a ParameterSet from parsed params-file keys (io.read_params)."""
    transmit = None
    if "beamform.transmit_plane" in d:
        planes = [PlaneTransmit(direction=t) for t in d["beamform.transmit_plane"]]
        transmit = planes[0] if len(planes) == 1 else tuple(planes)
    if "beamform.transmit_focus" in d:
        foci = [VirtualSourceTransmit(focus=t) for t in d["beamform.transmit_focus"]]
        transmit = foci[0] if len(foci) == 1 else tuple(foci)

    filter_spec = None
    if any(k.startswith("filter.") for k in d):
        kind = {
            "lowpass": FilterKind.LOW_PASS,
            "chirp": FilterKind.MATCHED_CHIRP,
            "waveform": FilterKind.MATCHED_WAVEFORM,
        }[d.get("filter.kind", "lowpass")]
        filter_spec = FilterSpec(
            kind=kind,
            tap_count=d.get("filter.tap_count", 64),
            passband_fraction=d.get("filter.passband_fraction", 0.5),
            chirp_f_start=d.get("filter.chirp_f_start", 0.0),
            chirp_f_end=d.get("filter.chirp_f_end", 0.0),
            chirp_duration=d.get("filter.chirp_duration", 0.0),
        )

    beamform = BeamformParams(
        region_min=d.get("beamform.region_min", (-0.02, 0.0, 0.005)),
        region_max=d.get("beamform.region_max", (0.02, 0.0, 0.045)),
        points=d.get("beamform.points", (256, 1, 256)),
        f_number=d.get("beamform.f_number", 1.0),
        interpolation=Interpolation(d.get("beamform.interpolation", "cubic")),
        transmit=transmit,
        coherence_weighting=d.get("beamform.coherence_weighting", False),
        decimation_factor=d.get("beamform.decimation_factor", 1),
        filter=filter_spec,
        output_transform=np.asarray(
            d.get("beamform.output_transform", np.eye(4).reshape(16))
        ).reshape(4, 4),
    )
    display = DisplaySettings(
        kind=d.get("display.mode", "log"),
        dynamic_range_db=d.get("display.dynamic_range_db", 60.0),
        power_threshold=d.get("display.power_threshold", 0.1),
    )
    acq = {}
    for key, value in d.items():
        if key.startswith("acquisition."):
            name = key.split(".", 1)[1]
            acq[name if name != "mode" else "acquisition_mode"] = value
    geo = {
        k.split(".", 1)[1]: (np.asarray(v).reshape(4, 4) if k.endswith("global_to_array") else v)
        for k, v in d.items()
        if k.startswith("geometry.")
    }
    return ParameterSet(
        id=set_id,
        beamform=beamform,
        display=display,
        acquisition_overrides=acq,
        geometry_overrides=geo,
    )


def parameter_set_to_dict(s: ParameterSet) -> dict:
    """Inverse of parameter_set_from_dict for write_params round-trips."""
    b = s.beamform
    d = {
        "beamform.region_min": ",".join(f"{v:.9g}" for v in b.region_min),
        "beamform.region_max": ",".join(f"{v:.9g}" for v in b.region_max),
        "beamform.points": ",".join(str(v) for v in b.points),
        "beamform.f_number": f"{b.f_number:.9g}",
        "beamform.interpolation": b.interpolation.value,
        "beamform.coherence_weighting": str(b.coherence_weighting).lower(),
        "beamform.decimation_factor": str(b.decimation_factor),
        "beamform.output_transform": ",".join(
            f"{v:.9g}" for v in np.asarray(b.output_transform).reshape(16)
        ),
        "display.mode": s.display.kind,
        "display.dynamic_range_db": f"{s.display.dynamic_range_db:.9g}",
        "display.power_threshold": f"{s.display.power_threshold:.9g}",
    }
    t = b.transmit
    if t is not None:
        models = t if isinstance(t, tuple) else (t,)
        if isinstance(models[0], PlaneTransmit):
            d["beamform.transmit_plane"] = ";".join(
                ",".join(f"{v:.9g}" for v in m.direction) for m in models
            )
        elif isinstance(models[0], VirtualSourceTransmit):
            d["beamform.transmit_focus"] = ";".join(
                ",".join(f"{v:.9g}" for v in m.focus) for m in models
            )
    if b.filter is not None:
        kind = {
            FilterKind.LOW_PASS: "lowpass",
            FilterKind.MATCHED_CHIRP: "chirp",
            FilterKind.MATCHED_WAVEFORM: "waveform",
        }[b.filter.kind]
        d["filter.kind"] = kind
        d["filter.tap_count"] = str(b.filter.tap_count)
        d["filter.passband_fraction"] = f"{b.filter.passband_fraction:.9g}"
        if b.filter.kind is FilterKind.MATCHED_CHIRP:
            d["filter.chirp_f_start"] = f"{b.filter.chirp_f_start:.9g}"
            d["filter.chirp_f_end"] = f"{b.filter.chirp_f_end:.9g}"
            d["filter.chirp_duration"] = f"{b.filter.chirp_duration:.9g}"
    for name, value in s.acquisition_overrides.items():
        key = "mode" if name == "acquisition_mode" else name
        if isinstance(value, AcquisitionMode):
            value = value.value
        elif isinstance(value, bool):
            value = str(value).lower()
        d[f"acquisition.{key}"] = str(value)
    for name, value in s.geometry_overrides.items():
        if name == "global_to_array":
            value = ",".join(f"{v:.9g}" for v in np.asarray(value).reshape(16))
        d[f"geometry.{name}"] = str(value)
    return d


@dataclass
class UpdateAck:
    accepted: bool
    violations: list[str] = field(default_factory=list)
    respecialization: bool = False


@dataclass
class StageTimings:
    """Last-frame and rolling 32-frame-mean stage timings."""

    window: int = 32
    last: dict = field(default_factory=dict)
    _hist: dict = field(default_factory=dict)
    _uploads: deque = field(default_factory=lambda: deque(maxlen=33))

    def record(self, stage: str, ns: int) -> None:
        self.last[stage] = ns
        self._hist.setdefault(stage, deque(maxlen=self.window)).append(ns)

    def record_upload(self, t_ns: int) -> None:
        self._uploads.append(t_ns)

    def rolling_mean(self) -> dict:
        return {k: sum(v) / len(v) for k, v in self._hist.items() if v}

    def upload_interval_ns(self) -> Optional[float]:
        if len(self._uploads) < 2:
            return None
        gaps = [b - a for a, b in zip(self._uploads, list(self._uploads)[1:])]
        return sum(gaps[-32:]) / len(gaps[-32:])


def apply_channel_map(
    data: np.ndarray, descriptor: AcquisitionDescriptor
) -> tuple[np.ndarray, AcquisitionDescriptor]:
    """Permute channels into array order, dropping dead (-1) inputs.

    Descriptor after mapping carries the compacted channel count and an
    identity map; with an identity input map the payload is returned
    as-is (byte-identical copy path).
    """
    cmap = descriptor.resolved_channel_map()
    if np.array_equal(cmap, np.arange(descriptor.channel_count)):
        return data, descriptor.with_(channel_map=None)
    live_src = np.nonzero(cmap >= 0)[0]
    n_live = live_src.size
    out = np.empty(
        (descriptor.transmit_count, n_live, descriptor.sample_count), dtype=data.dtype
    )
    for src in live_src:
        out[:, cmap[src], :] = data[:, src, :]
    return out, descriptor.with_(channel_count=n_live, channel_map=None)


@dataclass
class _Plan:
    """Pre-resolved stage state over frozen constants."""

    fingerprint: tuple
    filter: Optional[sigproc.FirFilter]
    hadamard: Optional[decode_mod.HadamardMatrix]
    needs_decode: bool
    decimation: int


def _plan_fingerprint(base: AcquisitionDescriptor, s0: ParameterSet) -> tuple:
    """The frozen constants whose change forces respecialization."""
    desc = s0.merged_descriptor(base)
    f = s0.beamform.filter
    fkey = (
        (f.kind.value, f.tap_count, f.passband_fraction, f.chirp_f_start,
         f.chirp_f_end, f.chirp_duration)
        if f
        else None
    )
    return (
        desc.sample_count,
        desc.channel_count,
        desc.transmit_count,
        desc.acquisition_mode.value,
        fkey,
        s0.beamform.interpolation.value,
        desc.sampling_freq / desc.demodulation_freq if desc.demodulation_freq else 0.0,
        s0.beamform.decimation_factor,
    )


def _build_plan(
    base: AcquisitionDescriptor, geometry: ArrayGeometry, s0: ParameterSet
) -> _Plan:
    desc = s0.merged_descriptor(base)
    geom = s0.merged_geometry(geometry)
    fspec = s0.beamform.filter
    filt = (
        sigproc.design_filter(fspec, desc.sampling_freq, desc.demodulation_freq)
        if fspec
        else None
    )
    h = None
    if desc.acquisition_mode.needs_decode:
        if desc.acquisition_mode is AcquisitionMode.UFORCES:
            order = geom.row_count if desc.transmit_rows else geom.column_count
        else:
            order = desc.transmit_count
        h = decode_mod.hadamard(order)
    return _Plan(
        fingerprint=_plan_fingerprint(base, s0),
        filter=filt,
        hadamard=h,
        needs_decode=desc.acquisition_mode.needs_decode,
        decimation=s0.beamform.decimation_factor,
    )


class Pipeline:
    """Three-slot (configurable) frames-in-flight processing pipeline.

    Safe for one producer thread (submit_frame) plus one consumer thread
    (process_next); single-threaded use works identically. ``on_image``
    is called with every produced ImageFrame (one per active parameter
    set); process_next returns the first set's image.
    """

    def __init__(
        self,
        descriptor: AcquisitionDescriptor,
        geometry: ArrayGeometry,
        sets: Union[ParameterSet, Sequence[ParameterSet]],
        slot_count: int = 3,
        on_image: Optional[Callable[[ImageFrame], None]] = None,
        stage_delay: Optional[Callable[[str], None]] = None,
    ):
        if not 2 <= slot_count <= 8:
            raise ValueError("slot_count must be in [2, 8]")
        problems = validate_descriptor(descriptor)
        if problems:
            raise ValueError("invalid descriptor: " + "; ".join(problems))
        self.base_descriptor = descriptor
        self.geometry = geometry
        self.sets: list[ParameterSet] = (
            [sets] if isinstance(sets, ParameterSet) else list(sets)
        )
        if not self.sets:
            raise ValueError("at least one parameter set required")
        self.on_image = on_image
        self._stage_delay = stage_delay

        capacity = descriptor.payload_bytes
        self._slots = [RingSlot(index=i, capacity=capacity) for i in range(slot_count)]
        self._cond = threading.Condition()
        self._write_idx = 0
        self._read_idx = 0
        self._next_frame_id = 0
        self._closed = False

        self._staged: dict[int, ParameterSet] = {}
        self._staged_lock = threading.Lock()

        self.timings = StageTimings()
        self.producer_blocks: list[int] = []  # frame ids that had to wait
        self.frames_submitted = 0
        self.frames_processed = 0

        self._plan = self._specialize()

    # -- parameter management ------------------------------------------------

    def _specialize(self) -> _Plan:
        return _build_plan(self.base_descriptor, self.geometry, self.sets[0])

    def update_parameters(self, pset: ParameterSet) -> UpdateAck:
        """Stage a set atomically; it applies at the next frame boundary.

        Never blocks ingest: validation and staging are cheap, and any
        respecialization happens on the compute thread when the staged
        set is taken up.
        """
        merged = pset.merged_descriptor(self.base_descriptor)
        violations = validate_descriptor(merged)
        if violations:
            return UpdateAck(accepted=False, violations=violations)
        try:
            pset.merged_geometry(self.geometry)
        except ValueError as exc:
            return UpdateAck(accepted=False, violations=[str(exc)])
        with self._staged_lock:
            self._staged[pset.id] = pset
            will_respec = self._would_respecialize(pset)
        return UpdateAck(accepted=True, respecialization=will_respec)

    def _would_respecialize(self, pset: ParameterSet) -> bool:
        if pset.id == self.sets[0].id:
            return _plan_fingerprint(self.base_descriptor, pset) != self._plan.fingerprint
        # secondary sets share the front half; only new set ids add plans
        return pset.id not in [s.id for s in self.sets]

    def _apply_staged(self) -> None:
        with self._staged_lock:
            staged, self._staged = self._staged, {}
        if not staged:
            return
        by_id = {s.id: i for i, s in enumerate(self.sets)}
        for set_id, pset in staged.items():
            applied = replace(pset, dirty=Section(0))
            if set_id in by_id:
                self.sets[by_id[set_id]] = applied
            else:
                self.sets.append(applied)
        if _plan_fingerprint(self.base_descriptor, self.sets[0]) != self._plan.fingerprint:
            self._plan = self._specialize()

    # -- ring buffer ---------------------------------------------------------

    def submit_frame(self, frame: RfFrame, apply_map: bool = True) -> int:
        """Copy a frame into the next free slot; blocks until one frees.

        Unprocessed data is never overwritten. Returns the assigned
        monotonically increasing frame id.
        """
        if frame.descriptor.payload_bytes > self._slots[0].capacity:
            raise ValueError(
                f"frame payload {frame.descriptor.payload_bytes} exceeds slot "
                f"capacity {self._slots[0].capacity}"
            )
        data = frame.data
        desc = frame.descriptor
        if apply_map:
            data, desc = apply_channel_map(data, desc)
        with self._cond:
            slot = self._slots[self._write_idx % len(self._slots)]
            frame_id = self._next_frame_id
            blocked = slot.state is not SlotState.FREE
            while slot.state is not SlotState.FREE:
                if self._closed:
                    raise PipelineClosed
                self._cond.wait()
            if self._closed:
                raise PipelineClosed
            if blocked:
                self.producer_blocks.append(frame_id)
            slot.transition(SlotState.UPLOADING)
            self._write_idx += 1
            self._next_frame_id += 1
        # copy outside the lock: uploading overlaps processing of other slots
        slot.data = np.array(data, copy=True)
        slot.descriptor = desc
        slot.frame_id = frame_id
        with self._cond:
            slot.transition(SlotState.READY)
            self.frames_submitted += 1
            self.timings.record_upload(time.perf_counter_ns())
            self._cond.notify_all()
        return frame_id

    def _take_ready_slot(self) -> RingSlot:
        with self._cond:
            slot = self._slots[self._read_idx % len(self._slots)]
            while slot.state is not SlotState.READY:
                if self._closed:
                    raise PipelineClosed
                self._cond.wait()
            slot.transition(SlotState.PROCESSING)
            self._read_idx += 1
            return slot

    def _free_slot(self, slot: RingSlot) -> None:
        with self._cond:
            slot.data = None
            slot.descriptor = None
            slot.transition(SlotState.FREE)
            self._cond.notify_all()

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    # -- processing ----------------------------------------------------------

    def _timed(self, stage: str, fn, *args):
        if self._stage_delay is not None:
            self._stage_delay(stage)
        t0 = time.perf_counter_ns()
        out = fn(*args)
        self.timings.record(stage, time.perf_counter_ns() - t0)
        return out

    def process_next(self) -> ImageFrame:
        """Process the oldest Ready slot through every active set, FIFO.

        The slot frees as soon as the first stage has consumed its data.
        Stage failures free the slot and raise StageError carrying the
        frame id; the pipeline stays usable.
        """
        self._apply_staged()
        slot = self._take_ready_slot()
        frame_id, desc = slot.frame_id, slot.descriptor
        plan = self._plan
        try:
            if plan.filter is not None:
                order = (
                    sigproc.OutputOrder.TRANSMIT_MAJOR
                    if plan.needs_decode
                    else sigproc.OutputOrder.SAMPLE_MAJOR
                )
                try:
                    block, desc = self._timed(
                        "demodulate",
                        sigproc.demodulate,
                        RfFrame(descriptor=desc, data=slot.data, frame_id=frame_id),
                        plan.filter,
                        None,
                        plan.decimation,
                        order,
                    )
                except Exception as exc:
                    raise StageError("demodulate", frame_id, exc) from exc
                self._free_slot(slot)
                slot = None
            else:
                # no filtering: the copy out of the slot is the first stage
                if plan.needs_decode:
                    try:
                        block = self._timed(
                            "reorder", decode_mod.reorder_transmit_major, slot.data, desc
                        )
                    except Exception as exc:
                        raise StageError("reorder", frame_id, exc) from exc
                else:
                    block = self._timed("copy", np.array, slot.data)
                self._free_slot(slot)
                slot = None

            if plan.needs_decode:
                try:
                    block = self._timed("decode", decode_mod.decode, block, desc, plan.hadamard)
                except Exception as exc:
                    raise StageError("decode", frame_id, exc) from exc
                block = decode_mod.reorder_sample_major(block)

            images = []
            for pset in self.sets:
                geometry = pset.merged_geometry(self.geometry)
                try:
                    img = self._timed(
                        "das",
                        das_mod.das,
                        block,
                        pset.merged_descriptor(desc),
                        geometry,
                        pset.beamform,
                        frame_id,
                        pset.id,
                    )
                except Exception as exc:
                    raise StageError("das", frame_id, exc) from exc
                img.stage_timings = list(self.timings.last.items())
                images.append(img)
                if self.on_image is not None:
                    self.on_image(img)
            self.frames_processed += 1
            return images[0]
        finally:
            if slot is not None:
                self._free_slot(slot)

    def multi_view_process(
        self, sets: Sequence[ParameterSet], frame: RfFrame
    ) -> list[Union[ImageFrame, StageError]]:
        """Beamform one frame once per set; decode runs once, DAS per set.

        A failing set yields its StageError in place of an image without
        affecting the other sets.
        """
        if not sets:
            raise ValueError("at least one parameter set required")
        desc = frame.descriptor
        data = frame.data
        plan = _build_plan(self.base_descriptor, self.geometry, sets[0])
        if plan.filter is not None:
            order = (
                sigproc.OutputOrder.TRANSMIT_MAJOR
                if plan.needs_decode
                else sigproc.OutputOrder.SAMPLE_MAJOR
            )
            block, desc = sigproc.demodulate(
                RfFrame(descriptor=desc, data=data, frame_id=frame.frame_id),
                plan.filter,
                None,
                plan.decimation,
                order,
            )
        else:
            block = (
                decode_mod.reorder_transmit_major(data, desc)
                if plan.needs_decode
                else data
            )
        if plan.needs_decode:
            block = decode_mod.decode(block, desc, plan.hadamard)
            block = decode_mod.reorder_sample_major(block)
        results: list[Union[ImageFrame, StageError]] = []
        for pset in sets:
            try:
                img = das_mod.das(
                    block,
                    pset.merged_descriptor(desc),
                    pset.merged_geometry(self.geometry),
                    pset.beamform,
                    frame.frame_id,
                    pset.id,
                )
                results.append(img)
            except Exception as exc:  # isolate per-set failures
                results.append(StageError("das", frame.frame_id, exc))
        return results

    # -- introspection --------------------------------------------------------

    def stats_snapshot(self) -> dict:
        return {
            "stages": self.timings.rolling_mean(),
            "last": dict(self.timings.last),
            "upload_interval_ns": self.timings.upload_interval_ns(),
            "frames_submitted": self.frames_submitted,
            "frames_processed": self.frames_processed,
            "producer_blocks": list(self.producer_blocks),
        }
