"""Forward model: encoded RF datasets from point-scatterer phantoms.

This is the ground-truth oracle: every echo is synthesized by evaluating
the excitation waveform at the exact analytic delay (no grid snapping),
with unit spreading and no attenuation, so encode/decode closures hold to
float precision and interpolation error downstream is attributable to the
consumer alone.

Scatterer positions are global-frame; the array geometry's transform
moves them into the array frame where delays are computed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from scipy.signal import gausspulse

from .das import receive_aperture, tof_receive, tof_transmit, transmit_element
from .decode import hadamard
from .model import (
    AcquisitionDescriptor,
    AcquisitionMode,
    ArrayGeometry,
    ElementTransmit,
    PlaneTransmit,
    RfFrame,
    SampleFormat,
    TransmitModel,
    VirtualSourceTransmit,
    validate_descriptor,
)
from .sigproc import to_int16


@dataclass(frozen=True)
class Phantom:
    """Point scatterers: ((x, y, z) meters in the global frame, reflectivity)."""

    scatterers: tuple[tuple[tuple[float, float, float], float], ...]
    sound_speed: float = 1540.0

    def __post_init__(self):
        for pos, rho in self.scatterers:
            if not all(np.isfinite(pos)) or not np.isfinite(rho):
                raise ValueError("scatterer positions and reflectivities must be finite")

    @classmethod
    def points(cls, positions: Sequence[Sequence[float]], reflectivity: float = 1.0,
               sound_speed: float = 1540.0) -> "Phantom":
        return cls(
            scatterers=tuple((tuple(p), reflectivity) for p in positions),
            sound_speed=sound_speed,
        )


@dataclass(frozen=True)
class GaussianPulse:
    """cos carrier under a Gaussian envelope with a -6 dB fractional bandwidth."""

    center_freq: float
    fractional_bandwidth: float = 0.6

    def __post_init__(self):
        if self.center_freq <= 0 or not 0 < self.fractional_bandwidth <= 2:
            raise ValueError("center_freq > 0 and fractional_bandwidth in (0, 2] required")

    def waveform(self, t: np.ndarray) -> np.ndarray:
        return gausspulse(t, fc=self.center_freq, bw=self.fractional_bandwidth)


def _tukey_taper(x: np.ndarray, alpha: float = 0.2) -> np.ndarray:
    """Continuous Tukey window on x in [0, 1], zero outside."""
    w = np.zeros_like(x)
    inside = (x >= 0) & (x <= 1)
    xi = x[inside]
    wi = np.ones_like(xi)
    lo = xi < alpha / 2
    hi = xi > 1 - alpha / 2
    wi[lo] = 0.5 * (1 + np.cos(np.pi * (2 * xi[lo] / alpha - 1)))
    wi[hi] = 0.5 * (1 + np.cos(np.pi * (2 * (1 - xi[hi]) / alpha - 1)))
    w[inside] = wi
    return w


@dataclass(frozen=True)
class Chirp:
    """Tukey(0.2)-tapered linear chirp over [0, duration]."""

    f_start: float
    f_end: float
    duration: float

    def __post_init__(self):
        if self.f_start <= 0 or self.f_end <= 0 or self.duration <= 0:
            raise ValueError("chirp parameters must be positive")

    def waveform(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        rate = (self.f_end - self.f_start) / self.duration
        phase = 2 * np.pi * (self.f_start * t + 0.5 * rate * t * t)
        return np.cos(phase) * _tukey_taper(t / self.duration)


Excitation = Union[GaussianPulse, Chirp]


def element_echoes(
    phantom: Phantom,
    tx_models: Sequence[TransmitModel],
    rx_elements: Sequence,
    descriptor: AcquisitionDescriptor,
    geometry: ArrayGeometry,
    excitation: Excitation,
) -> np.ndarray:
    """Unencoded echoes, shape (len(tx_models), len(rx_elements), samples).

    s[t, j, n] = sum_scatterers rho * p(t0 + n/fs - tof_tx - tof_rx).
    """
    s_count = descriptor.sample_count
    times = descriptor.time_offset + np.arange(s_count) / descriptor.sampling_freq
    c = phantom.sound_speed
    out = np.zeros((len(tx_models), len(rx_elements), s_count), dtype=np.float64)
    for pos, rho in phantom.scatterers:
        q = geometry.to_array_frame(np.asarray(pos, dtype=np.float64))
        tx = np.array(
            [
                tof_transmit(m, q, c, geometry, descriptor.transmit_rows)
                for m in tx_models
            ]
        )
        rx = np.array([tof_receive(e, q, c) for e in rx_elements])
        tau = tx[:, None] + rx[None, :]
        out += rho * excitation.waveform(times[None, None, :] - tau[:, :, None])
    return out


def _hercules_grid_elements(geometry: ArrayGeometry, receive_rows: bool):
    """2D grid points flat-ordered (physical channel outer, encoded inner).

    receive_rows: channels are rows (y), encoding recovers columns (x);
    otherwise channels are columns and encoding recovers rows.
    """
    from .das import PointElement

    elems = []
    if receive_rows:
        for r in range(geometry.row_count):
            for e in range(geometry.column_count):
                elems.append(
                    PointElement(
                        position=(e * geometry.column_pitch, r * geometry.row_pitch, 0.0)
                    )
                )
        return elems, geometry.row_count, geometry.column_count
    for c in range(geometry.column_count):
        for e in range(geometry.row_count):
            elems.append(
                PointElement(
                    position=(c * geometry.column_pitch, e * geometry.row_pitch, 0.0)
                )
            )
    return elems, geometry.column_count, geometry.row_count


def _shared_transmits(
    transmit: Union[TransmitModel, Sequence[TransmitModel], None],
    count: int,
    mode: AcquisitionMode,
) -> list[TransmitModel]:
    if transmit is None:
        raise ValueError(f"{mode.value} simulation requires transmit model(s)")
    if isinstance(transmit, (ElementTransmit, PlaneTransmit, VirtualSourceTransmit)):
        return [transmit] * count
    models = list(transmit)
    if len(models) != count:
        raise ValueError(f"expected {count} transmit models, got {len(models)}")
    return models


def simulate(
    phantom: Phantom,
    geometry: ArrayGeometry,
    descriptor: AcquisitionDescriptor,
    excitation: Excitation,
    noise_rms: float = 0.0,
    seed: int = 0,
    transmit: Union[TransmitModel, Sequence[TransmitModel], None] = None,
) -> RfFrame:
    """Produce one encoded RF frame for the descriptor's acquisition mode.

    Encoding weights follow the mode: identity per-event transmits for
    RawSa/Flash/Tpw/Vls, Hadamard rows across transmit elements for
    (u)FORCES, and receive-side Hadamard weighting across the recovered
    aperture axis for HERCULES. Gaussian noise of the given RMS is added
    per physical (transmit, channel) stream with its own deterministic
    substream of ``seed``.
    """
    problems = validate_descriptor(descriptor)
    if problems:
        raise ValueError("invalid descriptor: " + "; ".join(problems))
    mode = descriptor.acquisition_mode
    t_count = descriptor.transmit_count

    if mode is AcquisitionMode.RAW_SA:
        models = (
            _shared_transmits(transmit, t_count, mode)
            if transmit is not None
            else [ElementTransmit(i) for i in range(t_count)]
        )
        rx = receive_aperture(geometry, descriptor)
        data = element_echoes(phantom, models, rx, descriptor, geometry, excitation)
    elif mode in (AcquisitionMode.FORCES, AcquisitionMode.UFORCES):
        if mode is AcquisitionMode.FORCES:
            order = t_count
            rows = hadamard(order).entries
        else:
            # the decoded aperture is the full transmit-side element set
            order = geometry.row_count if descriptor.transmit_rows else geometry.column_count
            idx = np.asarray(descriptor.sparse_transmit_indices)
            if idx.max() >= order:
                raise ValueError("sparse transmit index outside the aperture's order")
            rows = hadamard(order).entries[idx]
        rx = receive_aperture(geometry, descriptor)
        element_models = [ElementTransmit(e) for e in range(order)]
        g = element_echoes(phantom, element_models, rx, descriptor, geometry, excitation)
        data = np.einsum("te,ecs->tcs", rows.astype(np.float64), g)
    elif mode is AcquisitionMode.HERCULES:
        grid, channels, encoded = _hercules_grid_elements(
            geometry, descriptor.receive_rows
        )
        if descriptor.transmit_count != encoded:
            raise ValueError(
                f"HERCULES transmit_count {descriptor.transmit_count} != encoded axis {encoded}"
            )
        if descriptor.channel_count != channels:
            raise ValueError(
                f"HERCULES channel_count {descriptor.channel_count} != physical channels {channels}"
            )
        models = _shared_transmits(transmit, 1, mode)
        g = element_echoes(phantom, models, grid, descriptor, geometry, excitation)
        g = g.reshape(channels, encoded, descriptor.sample_count)
        h = hadamard(encoded).entries.astype(np.float64)
        data = np.einsum("te,ces->tcs", h, g)
    elif mode in (AcquisitionMode.VLS, AcquisitionMode.TPW, AcquisitionMode.FLASH):
        models = _shared_transmits(transmit, t_count, mode)
        rx = receive_aperture(geometry, descriptor)
        data = element_echoes(phantom, models, rx, descriptor, geometry, excitation)
    else:
        raise ValueError(f"unsupported acquisition mode {mode}")

    if noise_rms > 0:
        for t in range(data.shape[0]):
            for c in range(data.shape[1]):
                rng = np.random.default_rng((seed, t, c))
                data[t, c] += rng.normal(0.0, noise_rms, data.shape[2])

    if descriptor.format is SampleFormat.FLOAT32:
        payload = data.astype(np.float32)
    elif descriptor.format is SampleFormat.INT16:
        payload = to_int16(data)
    else:
        raise ValueError("simulator produces real RF; use Int16 or Float32")
    return RfFrame(descriptor=descriptor, data=payload, frame_id=0)


def hercules_direct_receive(
    phantom: Phantom,
    geometry: ArrayGeometry,
    descriptor: AcquisitionDescriptor,
    excitation: Excitation,
    transmit: TransmitModel,
) -> np.ndarray:
    """Unencoded 2D-receive dataset the HERCULES decode should recover.

    Shape (1, row_count * column_count, samples), channels ordered like
    ``receive_aperture`` for a HERCULES descriptor.
    """
    grid, channels, encoded = _hercules_grid_elements(geometry, descriptor.receive_rows)
    g = element_echoes(phantom, [transmit], grid, descriptor, geometry, excitation)
    g = g.reshape(channels, encoded, descriptor.sample_count)
    if descriptor.receive_rows:
        # (row, col) -> flat j = r * column_count + c, the aperture order
        flat = g.reshape(1, channels * encoded, descriptor.sample_count)
    else:
        flat = g.transpose(1, 0, 2).reshape(1, encoded * channels, descriptor.sample_count)
    return flat
