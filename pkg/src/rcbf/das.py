"""Delay-and-sum reconstruction.

For every grid point q the optimized path and the naive reference both
compute

    HR(q) = sum_i a_tx,i(q) sum_j a_rx,j(q) rot(tau_ij) r_ij(tau_ij)

with tau_ij the transmit plus receive time of flight, r_ij the (decoded)
per-transmit/channel sample sequence and rot the baseband phase
restoration e^{+j 2 pi f_d tau} (1 for direct RF). Receive apodization is
a constant-F-number Hann window; the |u| >= 0.5 cutoff is tested before
any trigonometric evaluation so zero-weight channels are skipped without
touching sample data. Transmit apodization is applied in hardware
upstream and is identically 1 here.

The optimized path walks the grid in tiles with channel-major outer
passes (transmit inner), so per-point summation order is fixed and
results are independent of tiling. ``das_reference`` is the
straightforward quadruple loop that defines ground truth.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .model import (
    AcquisitionDescriptor,
    AcquisitionMode,
    ArrayGeometry,
    BeamformParams,
    ElementTransmit,
    ImageFrame,
    Interpolation,
    PlaneTransmit,
    TransmitModel,
    VirtualSourceTransmit,
    grid_points,
)
from .sigproc import to_complex

logger = logging.getLogger(__name__)

# Grid points per evaluation tile. Results are tile-size invariant (fixed
# per-point summation order); the default just keeps temporaries cache-sized.
DEFAULT_TILE_POINTS = 4096


@dataclass(frozen=True)
class PointElement:
    position: tuple[float, float, float]
    index: int = 0


@dataclass(frozen=True)
class LineElement:
    """Long row/column electrode, modeled as an infinite line."""

    point: tuple[float, float, float]  # a point on the axis (element center)
    axis: tuple[float, float, float]  # unit direction
    half_length: float
    index: int = 0

    def __post_init__(self):
        n = float(np.linalg.norm(self.axis))
        if abs(n - 1.0) > 1e-9:
            raise ValueError("line axis must be unit-norm")


ReceiveElement = Union[PointElement, LineElement]


def _row_element(geometry: ArrayGeometry, r: int, index: int = 0) -> ReceiveElement:
    # a row electrode spans the columns; with a single column it is a point
    if geometry.column_count == 1:
        return PointElement(position=(0.0, r * geometry.row_pitch, 0.0), index=index)
    cx = (geometry.column_count - 1) * geometry.column_pitch / 2.0
    return LineElement(
        point=(cx, r * geometry.row_pitch, 0.0),
        axis=(1.0, 0.0, 0.0),
        half_length=geometry.column_count * geometry.column_pitch / 2.0,
        index=index,
    )


def _column_element(geometry: ArrayGeometry, c: int, index: int = 0) -> ReceiveElement:
    if geometry.row_count == 1:
        return PointElement(position=(c * geometry.column_pitch, 0.0, 0.0), index=index)
    cy = (geometry.row_count - 1) * geometry.row_pitch / 2.0
    return LineElement(
        point=(c * geometry.column_pitch, cy, 0.0),
        axis=(0.0, 1.0, 0.0),
        half_length=geometry.row_count * geometry.row_pitch / 2.0,
        index=index,
    )


def receive_aperture(
    geometry: ArrayGeometry, descriptor: AcquisitionDescriptor
) -> list[ReceiveElement]:
    """Receive elements in data-channel order (channel_map applied).

    HERCULES resolves to the full row x column point grid; RCA modes give
    row or column line elements per ``receive_rows``.
    """
    if descriptor.acquisition_mode is AcquisitionMode.HERCULES:
        expected = geometry.row_count * geometry.column_count
        base: list[ReceiveElement] = [
            PointElement(
                position=(
                    (j % geometry.column_count) * geometry.column_pitch,
                    (j // geometry.column_count) * geometry.row_pitch,
                    0.0,
                ),
                index=j,
            )
            for j in range(expected)
        ]
    elif descriptor.receive_rows:
        expected = geometry.row_count
        base = [_row_element(geometry, r, r) for r in range(expected)]
    else:
        expected = geometry.column_count
        base = [_column_element(geometry, c, c) for c in range(expected)]
    if descriptor.channel_count != expected:
        raise ValueError(
            f"channel_count {descriptor.channel_count} != expected element count {expected}"
        )
    cmap = descriptor.resolved_channel_map()
    return [base[cmap[i]] for i in range(descriptor.channel_count)]


def transmit_element(
    geometry: ArrayGeometry, index: int, transmit_rows: bool
) -> ReceiveElement:
    """The physical (or decoded-virtual) element behind an Element transmit."""
    if transmit_rows:
        return _row_element(geometry, index, index)
    return _column_element(geometry, index, index)


def _as_points(q) -> np.ndarray:
    return np.atleast_2d(np.asarray(q, dtype=np.float64))


def tof_receive(elem: ReceiveElement, q, c: float):
    """Receive time of flight from points q (..., 3) to an element, seconds."""
    pts = _as_points(q)
    if isinstance(elem, PointElement):
        d = np.linalg.norm(pts - np.asarray(elem.position), axis=-1)
    else:
        rel = pts - np.asarray(elem.point)
        a = np.asarray(elem.axis)
        proj = rel @ a
        d = np.sqrt(np.maximum(np.sum(rel * rel, axis=-1) - proj * proj, 0.0))
    d = d / c
    return d if np.ndim(q) > 1 else float(d[0])


def tof_transmit(
    model: TransmitModel,
    q,
    c: float,
    geometry: ArrayGeometry,
    transmit_rows: bool = False,
):
    """Transmit time of flight to points q, seconds.

    Element -> distance to the element's line/point; Plane -> q . n / c
    with zero phase at the array origin; VirtualSource f ->
    (|f| + sign(q_z - f_z) |q - f|) / c, valid for sources in front of or
    behind the array (points exactly at the focal depth take the + branch).
    """
    pts = _as_points(q)
    if isinstance(model, ElementTransmit):
        elem = transmit_element(geometry, model.index, transmit_rows)
        out = tof_receive(elem, pts, c)
    elif isinstance(model, PlaneTransmit):
        out = pts @ np.asarray(model.direction) / c
    elif isinstance(model, VirtualSourceTransmit):
        f = np.asarray(model.focus, dtype=np.float64)
        dist = np.linalg.norm(pts - f, axis=-1)
        sign = np.where(pts[..., 2] >= f[2], 1.0, -1.0)
        out = (np.linalg.norm(f) + sign * dist) / c
    else:
        raise TypeError(f"unknown transmit model {model!r}")
    return out if np.ndim(q) > 1 else float(np.asarray(out).reshape(-1)[0])


def _lateral_depth(elem: ReceiveElement, pts: np.ndarray):
    if isinstance(elem, PointElement):
        ex, ey, ez = elem.position
        lateral = np.hypot(pts[..., 0] - ex, pts[..., 1] - ey)
        depth = pts[..., 2] - ez
        return lateral, depth
    px, py, pz = elem.point
    ax, ay, _ = elem.axis
    in_plane = np.hypot(ax, ay)
    if in_plane < 1e-12:
        lateral = np.hypot(pts[..., 0] - px, pts[..., 1] - py)
    else:
        # 2D point-to-line distance in the aperture plane
        lateral = np.abs(
            (pts[..., 0] - px) * (ay / in_plane) - (pts[..., 1] - py) * (ax / in_plane)
        )
    return lateral, pts[..., 2] - pz


def apodization(elem: ReceiveElement, q, f_number: float):
    """Constant-F-number Hann receive weight in [0, 1].

    u = F# * |lateral| / |depth|; weight = cos^2(pi u) inside |u| < 0.5,
    0 outside (and 0 on the array face where depth = 0). The cutoff is
    evaluated before cos so skipped channels never pay for the trig.
    """
    pts = _as_points(q)
    lateral, depth = _lateral_depth(elem, pts)
    w = np.zeros(pts.shape[:-1], dtype=np.float64)
    ok = depth != 0
    u = np.full(pts.shape[:-1], np.inf)
    np.divide(f_number * np.abs(lateral), np.abs(depth), out=u, where=ok)
    inside = u < 0.5
    if inside.any():
        w[inside] = np.cos(np.pi * u[inside]) ** 2
    return w if np.ndim(q) > 1 else float(w[0])


def _gather0(samples: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """samples[idx] with out-of-range indices contributing 0."""
    valid = (idx >= 0) & (idx < len(samples))
    out = np.zeros(idx.shape, dtype=samples.dtype)
    if valid.any():
        out[valid] = samples[idx[valid]]
    return out


def interpolate(samples: np.ndarray, t, mode: Interpolation):
    """Sample a sequence at fractional indices; out of range reads 0.

    CubicHermite is the 4-point Catmull-Rom spline with tangents
    m_k = (s_{k+1} - s_{k-1}) / 2, which reproduces quadratics exactly.
    """
    samples = np.asarray(samples)
    tt = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if mode is Interpolation.NEAREST:
        idx = np.round(tt).astype(np.int64)
        out = _gather0(samples, idx)
    elif mode is Interpolation.LINEAR:
        i0 = np.floor(tt).astype(np.int64)
        frac = (tt - i0).astype(samples.real.dtype)
        s0 = _gather0(samples, i0)
        s1 = _gather0(samples, i0 + 1)
        out = s0 * (1 - frac) + s1 * frac
    elif mode is Interpolation.CUBIC_HERMITE:
        i0 = np.floor(tt).astype(np.int64)
        s = (tt - i0).astype(np.float64)
        p0 = _gather0(samples, i0 - 1)
        p1 = _gather0(samples, i0)
        p2 = _gather0(samples, i0 + 1)
        p3 = _gather0(samples, i0 + 2)
        m1 = (p2 - p0) * 0.5
        m2 = (p3 - p1) * 0.5
        s2 = s * s
        s3 = s2 * s
        h00 = 2 * s3 - 3 * s2 + 1
        h10 = s3 - 2 * s2 + s
        h01 = -2 * s3 + 3 * s2
        h11 = s3 - s2
        out = h00 * p1 + h10 * m1 + h01 * p2 + h11 * m2
    else:
        raise ValueError(f"unknown interpolation mode {mode}")
    return out if np.ndim(t) >= 1 else out[0]


def _resolve_transmit_models(
    descriptor: AcquisitionDescriptor, params: BeamformParams, t_count: int
) -> list[TransmitModel]:
    mode = descriptor.acquisition_mode
    if mode in (AcquisitionMode.FORCES, AcquisitionMode.UFORCES, AcquisitionMode.RAW_SA):
        if params.transmit is None:
            return [ElementTransmit(i) for i in range(t_count)]
    if params.transmit is None:
        raise ValueError(f"{mode.value} requires transmit model(s) in BeamformParams")
    return [params.transmit_for(i, t_count) for i in range(t_count)]


def _prepare_block(
    block: np.ndarray,
    descriptor: AcquisitionDescriptor,
    geometry: ArrayGeometry,
) -> tuple[np.ndarray, AcquisitionDescriptor]:
    """Normalize to complex64 (T, C, S) and fold HERCULES decode output.

    HERCULES decoded data carries the recovered aperture axis on the
    transmit axis: (E, C, S) folds to one transmit over the full 2D grid,
    with the flat channel id matching receive_aperture's row-major grid.
    """
    if block.ndim != 3:
        raise ValueError("expected (transmit, channel, sample) block")
    data = to_complex(block, _infer_format(block, descriptor))
    if descriptor.acquisition_mode is AcquisitionMode.HERCULES:
        e, c, s = data.shape
        if descriptor.receive_rows:
            if e != geometry.column_count or c != geometry.row_count:
                raise ValueError(
                    "HERCULES decoded block does not match geometry "
                    f"(decoded {e} x channels {c})"
                )
            data = np.ascontiguousarray(data.transpose(1, 0, 2)).reshape(1, c * e, s)
        else:
            if e != geometry.row_count or c != geometry.column_count:
                raise ValueError(
                    "HERCULES decoded block does not match geometry "
                    f"(decoded {e} x channels {c})"
                )
            data = data.reshape(1, e * c, s)
        descriptor = descriptor.with_(
            channel_count=data.shape[1], transmit_count=1, channel_map=None
        )
    else:
        descriptor = descriptor.with_(
            transmit_count=data.shape[0], channel_count=data.shape[1]
        )
    return data, descriptor


def _infer_format(block: np.ndarray, descriptor: AcquisitionDescriptor):
    from .model import INT16_COMPLEX_DTYPE, SampleFormat

    if block.dtype == np.int16:
        return SampleFormat.INT16
    if block.dtype == INT16_COMPLEX_DTYPE:
        return SampleFormat.INT16_COMPLEX
    if np.iscomplexobj(block):
        return SampleFormat.FLOAT32_COMPLEX
    return SampleFormat.FLOAT32


def _phase_restoration_freq(descriptor: AcquisitionDescriptor) -> float:
    # Baseband IQ needs e^{+j 2 pi f_d tau}; direct RF does not.
    if descriptor.format.is_complex and descriptor.demodulation_freq != 0.0:
        return descriptor.demodulation_freq
    return 0.0


def das(
    block: np.ndarray,
    descriptor: AcquisitionDescriptor,
    geometry: ArrayGeometry,
    params: BeamformParams,
    frame_id: int = 0,
    params_id: int = 0,
    tile_points: int = DEFAULT_TILE_POINTS,
) -> ImageFrame:
    """Tiled delay-and-sum of a (decoded) block onto the output grid."""
    data, desc = _prepare_block(block, descriptor, geometry)
    t_count, c_count, s_count = data.shape
    models = _resolve_transmit_models(desc, params, t_count)
    elements = receive_aperture(geometry, desc)

    grid = grid_points(params)
    shape = grid.shape[:3]
    pts = geometry.to_array_frame(grid.reshape(-1, 3))
    n_points = pts.shape[0]

    fs = desc.sampling_freq
    t0 = desc.time_offset
    fd = _phase_restoration_freq(desc)
    cw = params.coherence_weighting

    acc = np.zeros(n_points, dtype=np.complex128)
    if cw:
        sum_sq = np.zeros(n_points, dtype=np.float64)
        n_terms = np.zeros(n_points, dtype=np.int64)

    for p0 in range(0, n_points, tile_points):
        p1 = min(p0 + tile_points, n_points)
        tile = pts[p0:p1]
        # transmit delays are channel-independent: compute once per tile
        tx_tof = np.stack(
            [
                tof_transmit(m, tile, desc.sound_speed, geometry, desc.transmit_rows)
                for m in models
            ]
        )
        tx_phase = np.exp(2j * np.pi * fd * tx_tof) if fd else None
        for j, elem in enumerate(elements):
            w = apodization(elem, tile, params.f_number)
            live = np.nonzero(w)[0]
            if live.size == 0:
                continue  # one check skips the whole transmit batch
            rx = tof_receive(elem, tile[live], desc.sound_speed)
            wl = w[live]
            # e^{j w (tx+rx)} factors so the exp stays out of the hot loop
            wrot = wl * np.exp(2j * np.pi * fd * rx) if fd else wl
            for i in range(t_count):
                tidx = (tx_tof[i][live] + rx - t0) * fs
                val = interpolate(data[i, j], tidx, params.interpolation)
                if fd:
                    term = wrot * tx_phase[i][live] * val
                else:
                    term = wrot * val
                acc[p0 + live] += term
                if cw:
                    sum_sq[p0 + live] += np.abs(term) ** 2
                    n_terms[p0 + live] += (term != 0).astype(np.int64)

    if cw:
        denom = n_terms * sum_sq
        cf = np.divide(
            np.abs(acc) ** 2, denom, out=np.zeros(n_points), where=denom > 0
        )
        acc = acc * cf

    values = acc.astype(np.complex64).reshape(shape)
    if np.isnan(values).any():
        logger.warning("frame %d: NaN in beamformed output", frame_id)
    return ImageFrame(
        values=values,
        params_id=params_id,
        frame_id=frame_id,
        points_beamformed=n_points,
    )


def das_reference(
    block: np.ndarray,
    descriptor: AcquisitionDescriptor,
    geometry: ArrayGeometry,
    params: BeamformParams,
    frame_id: int = 0,
    params_id: int = 0,
) -> ImageFrame:
    """Quadruple-loop ground truth: point, transmit, channel; no tiling, no skips."""
    data, desc = _prepare_block(block, descriptor, geometry)
    t_count, c_count, s_count = data.shape
    models = _resolve_transmit_models(desc, params, t_count)
    elements = receive_aperture(geometry, desc)

    grid = grid_points(params)
    shape = grid.shape[:3]
    pts = geometry.to_array_frame(grid.reshape(-1, 3))
    fs = desc.sampling_freq
    t0 = desc.time_offset
    fd = _phase_restoration_freq(desc)
    cw = params.coherence_weighting

    out = np.zeros(pts.shape[0], dtype=np.complex128)
    for p in range(pts.shape[0]):
        q = pts[p]
        total = 0.0 + 0.0j
        sum_sq = 0.0
        n_terms = 0
        for i in range(t_count):
            tx = tof_transmit(models[i], q, desc.sound_speed, geometry, desc.transmit_rows)
            for j in range(c_count):
                w = apodization(elements[j], q, params.f_number)
                tau = tx + tof_receive(elements[j], q, desc.sound_speed)
                val = interpolate(data[i, j], (tau - t0) * fs, params.interpolation)
                term = w * val
                if fd:
                    term *= np.exp(2j * np.pi * fd * tau)
                total += term
                sum_sq += abs(term) ** 2
                n_terms += 1 if term != 0 else 0
        if cw:
            denom = n_terms * sum_sq
            total *= (abs(total) ** 2 / denom) if denom > 0 else 0.0
        out[p] = total

    return ImageFrame(
        values=out.astype(np.complex64).reshape(shape),
        params_id=params_id,
        frame_id=frame_id,
        points_beamformed=pts.shape[0],
    )
