"""Filter design, quadrature demodulation, matched filtering and decimation.

This is the first pipeline stage: raw RF comes in, complex baseband
(optionally decimated, optionally matched-filtered) comes out. All filters
are FIR and applied in the time domain with zero-padded history before
sample 0, so output length equals input length before decimation.

Every designed filter is normalized so the peak frequency-response
magnitude is 1: filtering never introduces signal gain, which keeps
full-scale 16-bit data representable after filtering.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np
from scipy.signal.windows import tukey

from .model import (
    AcquisitionDescriptor,
    FilterKind,
    FilterSpec,
    RfFrame,
    SampleFormat,
)

FREQ_GRID_POINTS = 4096
INT16_FULL_SCALE = 32767


class OutputOrder(Enum):
    SAMPLE_MAJOR = "sample"  # (transmit, channel, sample), sample-fastest
    TRANSMIT_MAJOR = "transmit"  # (channel, sample, transmit), transmit-fastest


@dataclass(frozen=True)
class FirFilter:
    """Complex FIR taps plus the metadata demodulation needs.

    ``group_delay_samples`` is the effective delay of the filter output:
    (N-1)/2 for the symmetric designs, N-1 for the matched filter whose
    correlation peak lands at the last tap.
    ``passband_fraction`` is the one-sided band edge as a fraction of the
    input Nyquist rate, used for the decimation sanity check.
    """

    taps: np.ndarray
    group_delay_samples: float
    normalized: bool = True
    passband_fraction: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "taps", np.asarray(self.taps, dtype=np.complex128))

    @property
    def tap_count(self) -> int:
        return len(self.taps)

    def frequency_response(self, n_points: int = FREQ_GRID_POINTS) -> np.ndarray:
        """|H| evaluated on an n_points grid over the full digital band."""
        return np.abs(np.fft.fft(self.taps, n_points))


def _normalize_peak(taps: np.ndarray) -> np.ndarray:
    peak = np.abs(np.fft.fft(taps, FREQ_GRID_POINTS)).max()
    if peak == 0:
        raise ValueError("degenerate filter: zero frequency response")
    return taps / peak


def design_lowpass(tap_count: int, cutoff_fraction: float) -> FirFilter:
    """Hamming-windowed sinc low-pass, unity peak gain.

    ``cutoff_fraction`` is the cutoff as a fraction of Nyquist, in (0, 1).
    """
    if tap_count < 3:
        raise ValueError("tap_count must be >= 3")
    if not 0.0 < cutoff_fraction < 1.0:
        raise ValueError("cutoff_fraction must be in (0, 1)")
    n = np.arange(tap_count, dtype=np.float64) - (tap_count - 1) / 2.0
    taps = cutoff_fraction * np.sinc(cutoff_fraction * n) * np.hamming(tap_count)
    taps = _normalize_peak(taps.astype(np.complex128))
    return FirFilter(
        taps=taps,
        group_delay_samples=(tap_count - 1) / 2.0,
        passband_fraction=cutoff_fraction,
    )


def chirp_waveform(
    f_start: float, f_end: float, duration: float, sampling_freq: float
) -> np.ndarray:
    """Tukey(0.2)-tapered linear chirp sampled at sampling_freq."""
    n = int(round(duration * sampling_freq))
    if n < 1:
        raise ValueError("chirp shorter than one sample")
    t = np.arange(n) / sampling_freq
    phase = 2 * np.pi * (f_start * t + (f_end - f_start) / (2 * duration) * t * t)
    return np.cos(phase) * tukey(n, 0.2)


def design_matched(
    chirp: FilterSpec,
    sampling_freq: float,
    demodulation_freq: float,
    tap_count: Optional[int] = None,
) -> FirFilter:
    """Matched filter for a chirp excitation, shifted to baseband.

    The taps are the time-reversed complex conjugate of the
    baseband-shifted tapered chirp, so the same filter acts as the
    demodulation low-pass: applying it during demodulation compresses the
    pulse and band-limits in one pass. The correlation peak lands at lag
    tap_count - 1.
    """
    if tap_count is None:
        tap_count = chirp.tap_count
    length = int(round(chirp.chirp_duration * sampling_freq))
    if tap_count < length:
        raise ValueError(
            f"tap_count {tap_count} shorter than chirp duration ({length} samples)"
        )
    wave = chirp_waveform(
        chirp.chirp_f_start, chirp.chirp_f_end, chirp.chirp_duration, sampling_freq
    )
    n = np.arange(len(wave))
    baseband = wave * np.exp(-2j * np.pi * demodulation_freq / sampling_freq * n)
    padded = np.zeros(tap_count, dtype=np.complex128)
    padded[: len(baseband)] = baseband
    taps = _normalize_peak(np.conj(padded[::-1]))
    half_band = abs(chirp.chirp_f_end - chirp.chirp_f_start) / 2.0
    return FirFilter(
        taps=taps,
        group_delay_samples=float(tap_count - 1),
        passband_fraction=half_band / (sampling_freq / 2.0) if half_band else None,
    )


def design_matched_waveform(
    waveform: np.ndarray, sampling_freq: float, demodulation_freq: float
) -> FirFilter:
    """Matched filter for an arbitrary real excitation waveform."""
    wave = np.asarray(waveform, dtype=np.float64)
    n = np.arange(len(wave))
    baseband = wave * np.exp(-2j * np.pi * demodulation_freq / sampling_freq * n)
    taps = _normalize_peak(np.conj(baseband[::-1]))
    return FirFilter(taps=taps, group_delay_samples=float(len(wave) - 1))


def design_filter(
    spec: FilterSpec, sampling_freq: float, demodulation_freq: float
) -> FirFilter:
    if spec.kind is FilterKind.LOW_PASS:
        return design_lowpass(spec.tap_count, spec.passband_fraction)
    if spec.kind is FilterKind.MATCHED_CHIRP:
        return design_matched(spec, sampling_freq, demodulation_freq)
    if spec.kind is FilterKind.MATCHED_WAVEFORM:
        if spec.waveform is None:
            raise ValueError("MatchedWaveform spec requires a waveform")
        return design_matched_waveform(
            np.asarray(spec.waveform), sampling_freq, demodulation_freq
        )
    raise ValueError(f"unknown filter kind {spec.kind}")


def fir_hilbert(tap_count: int) -> FirFilter:
    """Type-III FIR Hilbert approximator, Hamming windowed, unity peak gain.

    Used for envelope detection when beamforming direct RF.
    """
    if tap_count % 2 == 0:
        raise ValueError("tap_count must be odd for a type-III design")
    center = (tap_count - 1) // 2
    n = np.arange(tap_count) - center
    taps = np.zeros(tap_count, dtype=np.float64)
    odd = n % 2 != 0
    taps[odd] = 2.0 / (np.pi * n[odd])
    taps *= np.hamming(tap_count)
    taps = _normalize_peak(taps.astype(np.complex128))
    return FirFilter(taps=taps, group_delay_samples=float(center))


def to_complex(data: np.ndarray, fmt: SampleFormat) -> np.ndarray:
    """View/convert any of the four sample formats as complex64."""
    if fmt is SampleFormat.INT16_COMPLEX:
        return (
            data["re"].astype(np.float32) + 1j * data["im"].astype(np.float32)
        ).astype(np.complex64)
    if fmt is SampleFormat.FLOAT32_COMPLEX:
        return np.asarray(data, dtype=np.complex64)
    return np.asarray(data, dtype=np.float32).astype(np.complex64)


def to_int16(values: np.ndarray) -> np.ndarray:
    """Round half away from zero and saturate to int16 range.

    Complex input produces the paired int16-complex structured dtype.
    """
    if np.iscomplexobj(values):
        out = np.empty(values.shape, dtype=np.dtype([("re", "<i2"), ("im", "<i2")]))
        out["re"] = to_int16(values.real)
        out["im"] = to_int16(values.imag)
        return out
    rounded = np.sign(values) * np.floor(np.abs(values) + 0.5)
    return np.clip(rounded, -32768, INT16_FULL_SCALE).astype(np.int16)


def _mix_taps(filt: FirFilter, demodulation_freq: float, sampling_freq: float):
    """Baseband-shift the taps so filtering fuses with the mixing step.

    y[m] = sum_k h[k] s[n-k] e^{-j w (n-k)}
         = e^{-j w n} * sum_k (h[k] e^{+j w k}) s[n-k]
    """
    k = np.arange(filt.tap_count)
    w = 2 * np.pi * demodulation_freq / sampling_freq
    return filt.taps * np.exp(1j * w * k)


def _convolve_blocked(
    signal: np.ndarray, taps: np.ndarray, decimation: int, block: int = 1024
) -> np.ndarray:
    """Causal FIR of ``taps`` over axis 0, keeping every ``decimation``-th output.

    Evaluates output samples in blocks of ``block``: each block loads its
    W + N_f input window once and reuses it for every output in the block.
    The per-output reduction is a pairwise sum over the tap axis, so the
    result is identical whichever block size or decimation stride is used.
    """
    n_f = len(taps)
    n_in = signal.shape[0]
    n_out = -(-n_in // decimation)  # ceil
    rev = taps[::-1].astype(np.complex64)
    padded = np.concatenate(
        [np.zeros((n_f - 1,) + signal.shape[1:], dtype=signal.dtype), signal], axis=0
    )
    out = np.empty((n_out,) + signal.shape[1:], dtype=np.complex64)
    for m0 in range(0, n_out, block):
        m1 = min(m0 + block, n_out)
        # kept outputs m -> input index n = m * decimation; window rows in
        # the padded signal start at n and span n_f samples
        first = m0 * decimation
        last = (m1 - 1) * decimation + n_f
        window = np.lib.stride_tricks.sliding_window_view(
            padded[first:last], n_f, axis=0
        )[::decimation]
        out[m0:m1] = np.sum(
            window * rev.reshape((1,) * (signal.ndim) + (n_f,)),
            axis=-1,
            dtype=np.complex64,
        )
    return out


def _convolve_reference(
    signal: np.ndarray, taps: np.ndarray, decimation: int
) -> np.ndarray:
    """Naive per-output convolution; defines correctness for the blocked path."""
    n_f = len(taps)
    n_in = signal.shape[0]
    n_out = -(-n_in // decimation)
    rev = taps[::-1].astype(np.complex64)
    padded = np.concatenate(
        [np.zeros((n_f - 1,) + signal.shape[1:], dtype=signal.dtype), signal], axis=0
    )
    out = np.empty((n_out,) + signal.shape[1:], dtype=np.complex64)
    for m in range(n_out):
        n = m * decimation
        window = np.moveaxis(padded[n : n + n_f], 0, -1)
        out[m] = np.sum(
            window * rev.reshape((1,) * (signal.ndim - 1) + (n_f,)),
            axis=-1,
            dtype=np.complex64,
        )
    return out


def demodulate(
    frame: RfFrame,
    filt: FirFilter,
    demodulation_freq: Optional[float] = None,
    decimation_factor: int = 1,
    output_order: OutputOrder = OutputOrder.SAMPLE_MAJOR,
    _reference: bool = False,
) -> tuple[np.ndarray, AcquisitionDescriptor]:
    """Mix to baseband, filter, decimate; returns (block, updated descriptor).

    Real input is mixed by exp(-j 2 pi f_d n / f_s) and filtered; complex
    input is filter-only (pass demodulation_freq 0 or None). The start of
    the signal is zero-padded, the output sampling rate is divided by the
    decimation factor and the descriptor's time offset absorbs the filter
    group delay. ``output_order`` selects the layout the next stage wants
    so a decode stage never needs a separate reorder pass.
    """
    d = frame.descriptor
    if demodulation_freq is None:
        demodulation_freq = d.demodulation_freq
    if decimation_factor < 1:
        raise ValueError("decimation_factor must be >= 1")
    if d.format.is_complex and demodulation_freq != 0.0:
        raise ValueError("complex input is already baseband; demodulation_freq must be 0")

    if filt.passband_fraction is not None and decimation_factor > 1:
        out_rate = d.sampling_freq / decimation_factor
        band = 2.0 * filt.passband_fraction * (d.sampling_freq / 2.0)
        if out_rate < band:
            warnings.warn(
                f"decimated rate {out_rate:.3g} Hz below the filter band "
                f"{band:.3g} Hz; expect aliasing",
                stacklevel=2,
            )

    # (transmit, channel, sample) -> samples on axis 0 for the convolution
    signal = to_complex(frame.data, d.format)
    signal = np.moveaxis(signal, 2, 0)  # (sample, transmit, channel)

    if demodulation_freq != 0.0:
        taps = _mix_taps(filt, demodulation_freq, d.sampling_freq)
    else:
        taps = filt.taps
    conv = _convolve_reference if _reference else _convolve_blocked
    mixed = conv(signal, taps, decimation_factor)
    if demodulation_freq != 0.0:
        n = np.arange(mixed.shape[0]) * decimation_factor
        carrier = np.exp(
            -2j * np.pi * demodulation_freq / d.sampling_freq * n
        ).astype(np.complex64)
        mixed *= carrier[:, None, None]

    out_desc = d.with_(
        sample_count=mixed.shape[0],
        format=SampleFormat.FLOAT32_COMPLEX,
        sampling_freq=d.sampling_freq / decimation_factor,
        time_offset=d.time_offset - filt.group_delay_samples / d.sampling_freq,
        demodulation_freq=demodulation_freq if demodulation_freq else d.demodulation_freq,
    )
    if output_order is OutputOrder.TRANSMIT_MAJOR:
        # (sample, transmit, channel) -> (channel, sample, transmit)
        block = np.ascontiguousarray(np.moveaxis(mixed, (0, 1, 2), (1, 2, 0)))
    else:
        # -> (transmit, channel, sample)
        block = np.ascontiguousarray(np.moveaxis(mixed, 0, 2))
    return block, out_desc


def quadrature_unpack_ns200(frame: RfFrame) -> tuple[np.ndarray, AcquisitionDescriptor]:
    """Unpack 200%-bandwidth quadrature sampling into baseband IQ.

    The input is real RF sampled at 4x the demodulation frequency: sample
    pairs are 90 degrees apart with every second pair inverted, so
    out[m] = (-1)^m (s[2m] - j s[2m+1]) and the sampling rate halves.
    """
    d = frame.descriptor
    if d.format.is_complex:
        raise ValueError("quadrature unpack expects real input")
    if d.sample_count % 2 != 0:
        raise ValueError("sample_count must be even")
    if abs(d.sampling_freq - 4.0 * d.demodulation_freq) > 0.01 * d.sampling_freq:
        raise ValueError("sampling_freq must be 4x demodulation_freq within 1%")
    s = np.asarray(frame.data, dtype=np.float32)
    i = s[:, :, 0::2]
    q = s[:, :, 1::2]
    sign = np.where(np.arange(i.shape[2]) % 2 == 0, 1.0, -1.0).astype(np.float32)
    out = (i - 1j * q) * sign
    out_desc = d.with_(
        sample_count=i.shape[2],
        format=SampleFormat.FLOAT32_COMPLEX,
        sampling_freq=d.sampling_freq / 2.0,
    )
    return out.astype(np.complex64), out_desc
