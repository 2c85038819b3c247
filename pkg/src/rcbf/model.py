"""Shared domain types for the beamforming engine.

Everything downstream (sigproc, decode, das, simulator, pipeline, io)
consumes these types. All values are SI units: meters, seconds, Hz, m/s.

Coordinate conventions
----------------------
Array frame: origin at the center of the corner element, z along the
array normal, x along the column pitch direction, y along the row pitch
direction. ``ArrayGeometry.global_to_array`` maps points from the global
frame (in which beamforming regions are defined) into the array frame.

Data layout
-----------
The canonical memory order for raw RF data is sample-fastest, then
channel, then transmit. As a C-contiguous numpy array that is shape
``(transmit, channel, sample)``; ``frame.data[t, c]`` is a contiguous
run of samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Sequence, Union

import numpy as np

# Single-call payload limit in bytes (2 GB).
MAX_PAYLOAD_BYTES = 2**31

# 16-bit complex pairs have no native numpy dtype; a structured pair keeps
# element counts and byte-exact serialization straightforward.
INT16_COMPLEX_DTYPE = np.dtype([("re", "<i2"), ("im", "<i2")])


class SampleFormat(Enum):
    """Numeric format of one stored sample element."""

    INT16 = "int16"
    INT16_COMPLEX = "int16c"
    FLOAT32 = "float32"
    FLOAT32_COMPLEX = "float32c"

    @property
    def itemsize(self) -> int:
        return {
            SampleFormat.INT16: 2,
            SampleFormat.INT16_COMPLEX: 4,
            SampleFormat.FLOAT32: 4,
            SampleFormat.FLOAT32_COMPLEX: 8,
        }[self]

    @property
    def dtype(self) -> np.dtype:
        return {
            SampleFormat.INT16: np.dtype("<i2"),
            SampleFormat.INT16_COMPLEX: INT16_COMPLEX_DTYPE,
            SampleFormat.FLOAT32: np.dtype("<f4"),
            SampleFormat.FLOAT32_COMPLEX: np.dtype("<c8"),
        }[self]

    @property
    def is_complex(self) -> bool:
        return self in (SampleFormat.INT16_COMPLEX, SampleFormat.FLOAT32_COMPLEX)

    @property
    def is_integer(self) -> bool:
        return self in (SampleFormat.INT16, SampleFormat.INT16_COMPLEX)


class AcquisitionMode(Enum):
    FORCES = "forces"
    UFORCES = "uforces"
    HERCULES = "hercules"
    VLS = "vls"
    TPW = "tpw"
    FLASH = "flash"
    RAW_SA = "rawsa"

    @property
    def needs_decode(self) -> bool:
        return self in (
            AcquisitionMode.FORCES,
            AcquisitionMode.UFORCES,
            AcquisitionMode.HERCULES,
        )


class Interpolation(Enum):
    NEAREST = "nearest"
    LINEAR = "linear"
    CUBIC_HERMITE = "cubic"


class FilterKind(Enum):
    LOW_PASS = "lowpass"
    MATCHED_CHIRP = "chirp"
    MATCHED_WAVEFORM = "waveform"


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class AcquisitionDescriptor:
    """Shape, numeric format, timing and transmit sequence of one RF dataset."""

    sample_count: int
    channel_count: int
    transmit_count: int
    format: SampleFormat
    sampling_freq: float
    demodulation_freq: float
    sound_speed: float = 1540.0
    time_offset: float = 0.0  # time of sample 0 relative to the transmit trigger
    acquisition_mode: AcquisitionMode = AcquisitionMode.RAW_SA
    transmit_rows: bool = False
    receive_rows: bool = True
    sparse_transmit_indices: Optional[tuple[int, ...]] = None
    channel_map: Optional[tuple[int, ...]] = None  # None means identity

    def resolved_channel_map(self) -> np.ndarray:
        if self.channel_map is None:
            return np.arange(self.channel_count)
        return np.asarray(self.channel_map, dtype=np.int64)

    @property
    def payload_bytes(self) -> int:
        n = self.sample_count * self.channel_count * self.transmit_count
        return n * self.format.itemsize

    def with_(self, **changes) -> "AcquisitionDescriptor":
        return replace(self, **changes)


def validate_descriptor(d: AcquisitionDescriptor) -> list[str]:
    """Check every descriptor invariant; returns one message per violation.

    Pure and order-independent: callers decide severity.
    """
    violations: list[str] = []
    for name in ("sample_count", "channel_count", "transmit_count"):
        if getattr(d, name) < 1:
            violations.append(f"{name} must be >= 1")
    if d.payload_bytes > MAX_PAYLOAD_BYTES:
        violations.append("payload exceeds 2^31 bytes")
    if d.sampling_freq <= 0:
        violations.append("sampling_freq must be > 0")
    if d.sound_speed <= 0:
        violations.append("sound_speed must be > 0")

    if d.acquisition_mode in (AcquisitionMode.FORCES, AcquisitionMode.HERCULES):
        if not _is_power_of_two(d.transmit_count):
            violations.append("transmit_count not Hadamard order")
    if d.acquisition_mode is AcquisitionMode.UFORCES:
        idx = d.sparse_transmit_indices
        if idx is None:
            violations.append("sparse_transmit_indices missing for uFORCES")
        else:
            if len(idx) != d.transmit_count:
                violations.append("sparse_transmit_indices length != transmit_count")
            if any(b <= a for a, b in zip(idx, idx[1:])):
                violations.append("sparse_transmit_indices not strictly increasing")
            # indices must address rows of some supported Hadamard order
            if idx and (min(idx) < 0 or max(idx) >= 256):
                violations.append("sparse_transmit_indices outside hadamard order")

    if d.channel_map is not None:
        cmap = np.asarray(d.channel_map)
        if cmap.shape != (d.channel_count,):
            violations.append("channel_map length != channel_count")
        else:
            live = cmap[cmap >= 0]
            # -1 marks a dead input channel; live entries must cover
            # [0, n_live) exactly so the compacted data is dense.
            if len(np.unique(live)) != len(live) or (
                len(live) and (live.min() != 0 or live.max() != len(live) - 1)
            ):
                violations.append("channel_map is not a bijection")
    return violations


@dataclass(frozen=True)
class ArrayGeometry:
    """Element pitches and counts plus the global -> array rigid transform."""

    row_pitch: float
    column_pitch: float
    row_count: int
    column_count: int
    global_to_array: np.ndarray = field(
        default_factory=lambda: np.eye(4, dtype=np.float64)
    )

    def __post_init__(self):
        m = np.asarray(self.global_to_array, dtype=np.float64).reshape(4, 4)
        object.__setattr__(self, "global_to_array", m)
        if self.row_pitch <= 0 or self.column_pitch <= 0:
            raise ValueError("pitches must be > 0")
        r = m[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
            raise ValueError("global_to_array upper 3x3 block must be orthonormal")

    def to_array_frame(self, points: np.ndarray) -> np.ndarray:
        """Apply the affine transform to points of shape (..., 3)."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.global_to_array[:3, :3].T + self.global_to_array[:3, 3]


@dataclass(frozen=True)
class ElementTransmit:
    """Transmit from a single (decoded) aperture element."""

    index: int


@dataclass(frozen=True)
class PlaneTransmit:
    """Plane wave along a unit direction, zero-phase at the array origin."""

    direction: tuple[float, float, float]

    def __post_init__(self):
        n = math.sqrt(sum(c * c for c in self.direction))
        if abs(n - 1.0) > 1e-9:
            raise ValueError("plane direction must be unit-norm")


@dataclass(frozen=True)
class VirtualSourceTransmit:
    """Spherical wave from a virtual focal point (meters, array frame)."""

    focus: tuple[float, float, float]


TransmitModel = Union[ElementTransmit, PlaneTransmit, VirtualSourceTransmit]


@dataclass(frozen=True)
class FilterSpec:
    kind: FilterKind
    tap_count: int
    passband_fraction: float = 0.5  # LowPass: fraction of Nyquist
    chirp_f_start: float = 0.0
    chirp_f_end: float = 0.0
    chirp_duration: float = 0.0
    waveform: Optional[tuple[float, ...]] = None

    def __post_init__(self):
        if self.tap_count < 1:
            raise ValueError("tap_count must be >= 1")


@dataclass(frozen=True)
class BeamformParams:
    """Reconstruction region, transmit model and imaging options.

    ``region_min``/``region_max`` and the grid are in global coordinates;
    ``output_transform`` maps the normalized grid point onto the output
    plane/volume (identity keeps the axis-aligned region).
    """

    region_min: tuple[float, float, float]
    region_max: tuple[float, float, float]
    points: tuple[int, int, int]
    f_number: float = 1.0
    interpolation: Interpolation = Interpolation.CUBIC_HERMITE
    transmit: Union[TransmitModel, tuple[TransmitModel, ...], None] = None
    coherence_weighting: bool = False
    decimation_factor: int = 1
    filter: Optional[FilterSpec] = None
    output_transform: np.ndarray = field(
        default_factory=lambda: np.eye(4, dtype=np.float64)
    )

    def __post_init__(self):
        m = np.asarray(self.output_transform, dtype=np.float64).reshape(4, 4)
        object.__setattr__(self, "output_transform", m)
        if self.f_number <= 0:
            raise ValueError("f_number must be > 0")
        if self.decimation_factor < 1:
            raise ValueError("decimation_factor must be >= 1")
        for axis in range(3):
            if self.points[axis] < 1:
                raise ValueError("points must be >= 1")
            if self.points[axis] > 1 and not (
                self.region_min[axis] < self.region_max[axis]
            ):
                raise ValueError("region_min must be < region_max where points > 1")

    def transmit_for(self, index: int, count: int) -> TransmitModel:
        """Resolve the per-transmit model (shared model or one per transmit)."""
        t = self.transmit
        if t is None:
            return ElementTransmit(index)
        if isinstance(t, (ElementTransmit, PlaneTransmit, VirtualSourceTransmit)):
            return t
        if len(t) != count:
            raise ValueError(f"expected {count} transmit models, got {len(t)}")
        return t[index]


def grid_index_to_point(params: BeamformParams, idx: Sequence[int]) -> np.ndarray:
    """Map an output grid index (i, j, k) to a point in meters.

    The normalized point is region_min + idx/(points-1) * (region_max -
    region_min) componentwise (a points==1 axis maps to the region
    midpoint); the 4x4 output transform is then applied. Raises IndexError
    outside the grid.
    """
    idx = np.asarray(idx, dtype=np.int64)
    pts = np.asarray(params.points, dtype=np.int64)
    if np.any(idx < 0) or np.any(idx >= pts):
        raise IndexError(f"grid index {tuple(idx)} outside points {tuple(pts)}")
    lo = np.asarray(params.region_min, dtype=np.float64)
    hi = np.asarray(params.region_max, dtype=np.float64)
    frac = np.where(pts > 1, idx / np.maximum(pts - 1, 1), 0.5)
    p = lo + frac * (hi - lo)
    m = params.output_transform
    return m[:3, :3] @ p + m[:3, 3]


def grid_points(params: BeamformParams) -> np.ndarray:
    """All grid points as shape (Nx, Ny, Nz, 3), same mapping as above."""
    nx, ny, nz = params.points
    lo = np.asarray(params.region_min, dtype=np.float64)
    hi = np.asarray(params.region_max, dtype=np.float64)
    axes = []
    for axis, n in enumerate(params.points):
        if n > 1:
            frac = np.arange(n, dtype=np.float64) / (n - 1)
        else:
            frac = np.array([0.5])
        axes.append(lo[axis] + frac * (hi[axis] - lo[axis]))
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    m = params.output_transform
    return grid @ m[:3, :3].T + m[:3, 3]


@dataclass(frozen=True)
class RfFrame:
    """One acquisition's raw samples plus its descriptor.

    ``data`` has shape (transmit, channel, sample); C-contiguous storage
    gives the canonical sample-fastest wire order.
    """

    descriptor: AcquisitionDescriptor
    data: np.ndarray
    frame_id: int = 0

    def __post_init__(self):
        d = self.descriptor
        expected = (d.transmit_count, d.channel_count, d.sample_count)
        if self.data.shape != expected:
            raise ValueError(
                f"data shape {self.data.shape} != (transmit, channel, sample) "
                f"{expected}"
            )


@dataclass
class ImageFrame:
    """Complex reconstructed grid plus per-frame provenance."""

    values: np.ndarray  # complex64, shape (Nx, Ny, Nz)
    params_id: int
    frame_id: int
    stage_timings: list[tuple[str, int]] = field(default_factory=list)
    points_beamformed: int = 0

    def envelope(self) -> np.ndarray:
        return np.abs(self.values)
