"""Dataset container, parameter files, image export and display transforms.

The dataset container is a bespoke minimal format (magic ``RCBF``), fully
specified here and bit-exact on roundtrip for all four sample formats.
All multi-byte values are little-endian; the payload is stored in the
canonical sample-fastest order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .model import (
    AcquisitionDescriptor,
    AcquisitionMode,
    ArrayGeometry,
    ImageFrame,
    RfFrame,
    SampleFormat,
)

MAGIC = b"RCBF"
VERSION = 1

_FORMAT_CODES = {f: i for i, f in enumerate(SampleFormat)}
_FORMAT_FROM_CODE = {i: f for f, i in _FORMAT_CODES.items()}
_MODE_CODES = {m: i for i, m in enumerate(AcquisitionMode)}
_MODE_FROM_CODE = {i: m for m, i in _MODE_CODES.items()}


class DatasetError(Exception):
    """Base for dataset container failures."""


class BadMagicError(DatasetError):
    pass


class VersionError(DatasetError):
    pass


class TruncatedError(DatasetError):
    def __init__(self, expected: int, actual: int, what: str = "payload"):
        super().__init__(f"truncated {what}: expected {expected} bytes, got {actual}")
        self.expected = expected
        self.actual = actual


# header after magic+version: counts, codes, flags, frequencies
_DESC_FIXED = struct.Struct("<IIIBBBBdddd")
_GEOM_FIXED = struct.Struct("<ddII")


def write_dataset(path: Union[str, Path], frame: RfFrame, geometry: ArrayGeometry) -> None:
    """Serialize one RF frame plus geometry, losslessly."""
    d = frame.descriptor
    payload = np.ascontiguousarray(frame.data, dtype=d.format.dtype).tobytes()
    parts = [MAGIC, struct.pack("<I", VERSION)]
    parts.append(
        _DESC_FIXED.pack(
            d.sample_count,
            d.channel_count,
            d.transmit_count,
            _FORMAT_CODES[d.format],
            _MODE_CODES[d.acquisition_mode],
            1 if d.transmit_rows else 0,
            1 if d.receive_rows else 0,
            d.sampling_freq,
            d.demodulation_freq,
            d.sound_speed,
            d.time_offset,
        )
    )
    sparse = d.sparse_transmit_indices or ()
    parts.append(struct.pack("<H", len(sparse)))
    parts.append(struct.pack(f"<{len(sparse)}H", *sparse))
    if d.channel_map is None:
        parts.append(struct.pack("<B", 0))
    else:
        parts.append(struct.pack("<B", 1))
        parts.append(struct.pack(f"<{len(d.channel_map)}i", *d.channel_map))
    parts.append(
        _GEOM_FIXED.pack(
            geometry.row_pitch,
            geometry.column_pitch,
            geometry.row_count,
            geometry.column_count,
        )
    )
    parts.append(
        struct.pack("<16d", *np.asarray(geometry.global_to_array).reshape(16))
    )
    parts.append(struct.pack("<Q", len(payload)))
    parts.append(payload)
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.blob):
            raise TruncatedError(self.off + n, len(self.blob), what)
        out = self.blob[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, st: struct.Struct, what: str):
        return st.unpack(self.take(st.size, what))


def read_dataset(path: Union[str, Path]) -> tuple[RfFrame, ArrayGeometry]:
    """Inverse of write_dataset; raises distinct errors for magic/version/truncation."""
    r = _Reader(Path(path).read_bytes())
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<I", r.take(4, "version"))
    if version != VERSION:
        raise VersionError(f"unsupported version {version}, expected {VERSION}")
    (
        sample_count,
        channel_count,
        transmit_count,
        fmt_code,
        mode_code,
        tx_rows,
        rx_rows,
        sampling_freq,
        demodulation_freq,
        sound_speed,
        time_offset,
    ) = r.unpack(_DESC_FIXED, "descriptor")
    (n_sparse,) = struct.unpack("<H", r.take(2, "sparse count"))
    sparse = struct.unpack(f"<{n_sparse}H", r.take(2 * n_sparse, "sparse indices"))
    (has_map,) = struct.unpack("<B", r.take(1, "channel map flag"))
    cmap = None
    if has_map:
        cmap = struct.unpack(
            f"<{channel_count}i", r.take(4 * channel_count, "channel map")
        )
    row_pitch, column_pitch, row_count, column_count = r.unpack(_GEOM_FIXED, "geometry")
    transform = np.array(
        struct.unpack("<16d", r.take(16 * 8, "geometry transform"))
    ).reshape(4, 4)
    (payload_len,) = struct.unpack("<Q", r.take(8, "payload length"))
    payload = r.take(payload_len, "payload")

    descriptor = AcquisitionDescriptor(
        sample_count=sample_count,
        channel_count=channel_count,
        transmit_count=transmit_count,
        format=_FORMAT_FROM_CODE[fmt_code],
        sampling_freq=sampling_freq,
        demodulation_freq=demodulation_freq,
        sound_speed=sound_speed,
        time_offset=time_offset,
        acquisition_mode=_MODE_FROM_CODE[mode_code],
        transmit_rows=bool(tx_rows),
        receive_rows=bool(rx_rows),
        sparse_transmit_indices=sparse if n_sparse else None,
        channel_map=cmap,
    )
    expected = descriptor.payload_bytes
    if payload_len != expected:
        raise TruncatedError(expected, payload_len, "payload (descriptor mismatch)")
    data = np.frombuffer(payload, dtype=descriptor.format.dtype).reshape(
        transmit_count, channel_count, sample_count
    )
    geometry = ArrayGeometry(
        row_pitch=row_pitch,
        column_pitch=column_pitch,
        row_count=row_count,
        column_count=column_count,
        global_to_array=transform,
    )
    return RfFrame(descriptor=descriptor, data=data.copy(), frame_id=0), geometry


@dataclass(frozen=True)
class DisplaySettings:
    """Log compression over a dB span, or thresholded power scale."""

    kind: str = "log"  # "log" | "power"
    dynamic_range_db: float = 60.0
    power_threshold: float = 0.1

    def __post_init__(self):
        if self.kind not in ("log", "power"):
            raise ValueError(f"unknown display kind {self.kind!r}")
        if self.kind == "log" and self.dynamic_range_db <= 0:
            raise ValueError("dynamic_range_db must be > 0")
        if self.kind == "power" and not 0 <= self.power_threshold < 1:
            raise ValueError("power_threshold must be in [0, 1)")


def display_transform(
    image: Union[ImageFrame, np.ndarray], settings: DisplaySettings
) -> np.ndarray:
    """Map a complex/real grid to 8-bit grayscale; all-zero maps to all-zero.

    Log: 20 log10(|v|/max) clamped to [-DR, 0] scaled onto [0, 255].
    Power: |v|^2/max^2 above the threshold rescaled onto [0, 255].
    Rounding is to-nearest-even in both modes.
    """
    values = image.values if isinstance(image, ImageFrame) else image
    env = np.abs(values).astype(np.float64)
    peak = env.max() if env.size else 0.0
    if peak == 0.0:
        return np.zeros(env.shape, dtype=np.uint8)
    if settings.kind == "log":
        dr = settings.dynamic_range_db
        with np.errstate(divide="ignore"):
            db = 20.0 * np.log10(env / peak)
        g = np.clip(db, -dr, 0.0) / dr + 1.0
    else:
        thr = settings.power_threshold
        power = env * env / (peak * peak)
        g = np.clip(power - thr, 0.0, 1.0 - thr) / (1.0 - thr)
    return np.rint(g * 255.0).astype(np.uint8)


def export_pgm(grid: np.ndarray, path: Union[str, Path]) -> None:
    """Binary P5 with maxval 255; grid is (rows, cols) uint8."""
    g = np.asarray(grid)
    if g.ndim != 2:
        raise ValueError("PGM export needs a 2D slice")
    g = g.astype(np.uint8)
    header = f"P5\n{g.shape[1]} {g.shape[0]}\n255\n".encode()
    Path(path).write_bytes(header + g.tobytes())


def raw_f32_bytes(values: np.ndarray) -> bytes:
    """16-byte dims header (Nx, Ny, Nz, reserved u32) + little-endian f32."""
    v = np.asarray(values, dtype="<f4")
    if v.ndim == 2:
        v = v[:, None, :]
    if v.ndim != 3:
        raise ValueError("raw export needs a 2D or 3D grid")
    header = struct.pack("<4I", v.shape[0], v.shape[1], v.shape[2], 0)
    return header + v.tobytes()


def export_raw_f32(values: np.ndarray, path: Union[str, Path]) -> None:
    Path(path).write_bytes(raw_f32_bytes(values))


def read_raw_f32(path: Union[str, Path]) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 16:
        raise TruncatedError(16, len(blob), "raw header")
    nx, ny, nz, _ = struct.unpack("<4I", blob[:16])
    expected = 16 + nx * ny * nz * 4
    if len(blob) != expected:
        raise TruncatedError(expected, len(blob), "raw payload")
    return np.frombuffer(blob[16:], dtype="<f4").reshape(nx, ny, nz).copy()


def export_image(
    grid: np.ndarray, path: Union[str, Path], format: str = "pgm"
) -> None:
    """Write a display grid: "pgm" (2D uint8) or "raw" (float32 + dims header)."""
    if format == "pgm":
        export_pgm(grid, path)
    elif format == "raw":
        export_raw_f32(grid, path)
    else:
        raise ValueError(f"unknown export format {format!r}")


# ---------------------------------------------------------------------------
# parameter files


class ParamsError(Exception):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


def _parse_bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_floats(s: str, n: int) -> tuple[float, ...]:
    vals = tuple(float(v) for v in s.split(","))
    if len(vals) != n:
        raise ValueError(f"expected {n} comma-separated values")
    return vals


def _parse_ints(s: str, n: int) -> tuple[int, ...]:
    vals = tuple(int(v) for v in s.split(","))
    if len(vals) != n:
        raise ValueError(f"expected {n} comma-separated values")
    return vals


def _parse_triples(s: str) -> tuple[tuple[float, float, float], ...]:
    return tuple(_parse_floats(part, 3) for part in s.split(";") if part)


# section.key -> value parser; read_params rejects anything else
_PARAM_KEYS = {
    "acquisition.mode": lambda s: AcquisitionMode(s),
    "acquisition.sampling_freq": float,
    "acquisition.demodulation_freq": float,
    "acquisition.sound_speed": float,
    "acquisition.time_offset": float,
    "acquisition.transmit_rows": _parse_bool,
    "acquisition.receive_rows": _parse_bool,
    "geometry.row_pitch": float,
    "geometry.column_pitch": float,
    "geometry.row_count": int,
    "geometry.column_count": int,
    "geometry.global_to_array": lambda s: _parse_floats(s, 16),
    "beamform.region_min": lambda s: _parse_floats(s, 3),
    "beamform.region_max": lambda s: _parse_floats(s, 3),
    "beamform.points": lambda s: _parse_ints(s, 3),
    "beamform.f_number": float,
    "beamform.interpolation": lambda s: {
        "nearest": "nearest",
        "linear": "linear",
        "cubic": "cubic",
    }[s],
    "beamform.coherence_weighting": _parse_bool,
    "beamform.decimation_factor": int,
    "beamform.transmit_plane": _parse_triples,
    "beamform.transmit_focus": _parse_triples,
    "beamform.output_transform": lambda s: _parse_floats(s, 16),
    "filter.kind": str,
    "filter.tap_count": int,
    "filter.passband_fraction": float,
    "filter.chirp_f_start": float,
    "filter.chirp_f_end": float,
    "filter.chirp_duration": float,
    "display.mode": str,
    "display.dynamic_range_db": float,
    "display.power_threshold": float,
}


def parse_params_text(text: str) -> list[dict]:
    """Parse the flat key=value format into per-set dicts of parsed values.

    Keys before the first ``[set N]`` header are shared by every set;
    unknown keys are errors (strict), '#' starts a comment.
    """
    base: dict = {}
    sets: list[dict] = []
    current = base
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            token = line[1:-1].strip()
            if not token.lower().startswith("set"):
                raise ParamsError(line_no, f"unknown section header {line!r}")
            current = dict(base)
            sets.append(current)
            continue
        if "=" not in line:
            raise ParamsError(line_no, f"expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _PARAM_KEYS:
            raise ParamsError(line_no, f"unknown key {key!r}")
        try:
            current[key] = _PARAM_KEYS[key](value)
        except ParamsError:
            raise
        except Exception as exc:
            raise ParamsError(line_no, f"bad value for {key}: {exc}") from exc
    if not sets:
        sets = [base]
    return sets


def read_params(path: Union[str, Path]) -> list:
    """Parse a parameter file into ParameterSets (see pipeline)."""
    from .pipeline import parameter_set_from_dict

    dicts = parse_params_text(Path(path).read_text(encoding="utf-8"))
    return [parameter_set_from_dict(i, d) for i, d in enumerate(dicts)]


def write_params(path: Union[str, Path], sets: list) -> None:
    from .pipeline import parameter_set_to_dict

    lines: list[str] = []
    for i, s in enumerate(sets):
        if len(sets) > 1:
            lines.append(f"[set {i}]")
        d = parameter_set_to_dict(s)
        for key in sorted(d):
            lines.append(f"{key}={d[key]}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
