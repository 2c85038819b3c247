"""Hadamard generation, transmit-axis reordering and aperture decoding.

Encoded acquisitions record, for each physical transmit, a +/-1-weighted
sum across aperture elements. Decoding multiplies across the transmit
axis by the (scaled) Hadamard transpose, recovering the per-element
dataset. Int16 data is decoded in 32-bit integer arithmetic and divided
by the order with round-half-away-from-zero, making the encode/decode
roundtrip exact.

Blocks enter transmit-major: shape (channel, sample, transmit) with the
transmit axis contiguous, the layout the multiply wants.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
from scipy.linalg import hadamard as _sylvester

from .model import AcquisitionDescriptor, INT16_COMPLEX_DTYPE, SampleFormat

MAX_ORDER = 256

# Below this transmit count the blocked multiply's bookkeeping costs more
# than it saves; a direct per-column accumulation wins. Tunable;
# correctness never depends on it.
SMALL_ORDER_THRESHOLD = 40


@dataclass(frozen=True)
class HadamardMatrix:
    order: int
    entries: np.ndarray  # (order, order) int32, +/-1, Sylvester construction

    def row(self, i: int) -> np.ndarray:
        return self.entries[i]


def hadamard(order: int) -> HadamardMatrix:
    """Sylvester Hadamard matrix of the given power-of-two order (<= 256)."""
    if order < 1 or order > MAX_ORDER or order & (order - 1):
        raise ValueError(f"unsupported Hadamard order {order}")
    return HadamardMatrix(order=order, entries=_sylvester(order, dtype=np.int32))


def reorder_transmit_major(block: np.ndarray, descriptor: AcquisitionDescriptor) -> np.ndarray:
    """Permute a sample-major block (T, C, S) into transmit-major (C, S, T).

    Pure permutation; ``reorder_sample_major`` is its bit-exact inverse.
    """
    expected = (
        descriptor.transmit_count,
        descriptor.channel_count,
        descriptor.sample_count,
    )
    if block.shape != expected:
        raise ValueError(f"block shape {block.shape} != {expected}")
    return np.ascontiguousarray(block.transpose(1, 2, 0))


def reorder_sample_major(block: np.ndarray) -> np.ndarray:
    """Inverse of reorder_transmit_major: (C, S, T) -> (T, C, S)."""
    return np.ascontiguousarray(block.transpose(2, 0, 1))


def _decode_rows(descriptor: AcquisitionDescriptor, h: HadamardMatrix) -> np.ndarray:
    """Rows of H the acquisition actually transmitted (all, or the sparse set)."""
    if descriptor.sparse_transmit_indices is not None:
        rows = np.asarray(descriptor.sparse_transmit_indices, dtype=np.int64)
        if rows.max() >= h.order:
            raise ValueError("sparse transmit index outside Hadamard order")
        return h.entries[rows]
    if descriptor.transmit_count != h.order:
        raise ValueError(
            f"transmit_count {descriptor.transmit_count} != Hadamard order {h.order}"
        )
    return h.entries


def _div_round_half_away(acc: np.ndarray, order: int) -> np.ndarray:
    """Divide int32 accumulators by the order, rounding half away from zero."""
    if order == 1:
        return acc.astype(np.int16)
    half = order // 2
    out = np.where(acc >= 0, (acc + half) // order, -((-acc + half) // order))
    return out.astype(np.int16)


def _decode_int_blocked(block: np.ndarray, rows: np.ndarray, order: int) -> np.ndarray:
    """Blocked integer path: sample pairs share one pass over the Hadamard columns."""
    t = block.shape[-1]
    flat = block.reshape(-1, t).astype(np.int32)
    m = rows.astype(np.int32)
    acc = np.empty((flat.shape[0], order), dtype=np.int32)
    even = flat.shape[0] - flat.shape[0] % 2
    step = 2048  # sample pairs per matmul, keeps temporaries cache-sized
    paired = flat[:even].reshape(-1, 2, t)
    out_paired = acc[:even].reshape(-1, 2, order)
    for i in range(0, paired.shape[0], step):
        out_paired[i : i + step] = paired[i : i + step] @ m
    if even != flat.shape[0]:
        acc[even:] = flat[even:] @ m
    return _div_round_half_away(acc, order).reshape(block.shape[:-1] + (order,))


def _decode_int_small(block: np.ndarray, rows: np.ndarray, order: int) -> np.ndarray:
    """Register-caching analogue for small transmit counts.

    One decoded output column is accumulated at a time from the cached
    input columns; integer addition is associative so this is bit-identical
    to every other strategy.
    """
    t = block.shape[-1]
    cols = [block[..., k].astype(np.int32) for k in range(t)]
    out = np.empty(block.shape[:-1] + (order,), dtype=np.int16)
    for e in range(order):
        acc = np.zeros(block.shape[:-1], dtype=np.int32)
        for k in range(t):
            w = int(rows[k, e])
            if w >= 0:
                acc += cols[k]
            else:
                acc -= cols[k]
        out[..., e] = _div_round_half_away(acc, order)
    return out


def _decode_float(block: np.ndarray, rows: np.ndarray, order: int) -> np.ndarray:
    m = (rows.astype(np.float64) / order).astype(block.real.dtype)
    if np.iscomplexobj(block):
        m = m.astype(block.dtype)
    return block @ m


def decode_reference(
    block: np.ndarray, descriptor: AcquisitionDescriptor, h: HadamardMatrix
) -> np.ndarray:
    """Naive triple loop over (output element, transmit); defines ground truth."""
    rows = _decode_rows(descriptor, h)
    t = block.shape[-1]
    if block.dtype == np.int16:
        out = np.empty(block.shape[:-1] + (h.order,), dtype=np.int16)
        for e in range(h.order):
            acc = np.zeros(block.shape[:-1], dtype=np.int32)
            for k in range(t):
                acc = acc + rows[k, e] * block[..., k].astype(np.int32)
            out[..., e] = _div_round_half_away(acc, h.order)
        return out
    if block.dtype == INT16_COMPLEX_DTYPE:
        re = decode_reference(np.ascontiguousarray(block["re"]), descriptor, h)
        im = decode_reference(np.ascontiguousarray(block["im"]), descriptor, h)
        out = np.empty(re.shape, dtype=INT16_COMPLEX_DTYPE)
        out["re"], out["im"] = re, im
        return out
    out = np.zeros(block.shape[:-1] + (h.order,), dtype=block.dtype)
    for e in range(h.order):
        acc = np.zeros(block.shape[:-1], dtype=block.dtype)
        for k in range(t):
            acc = acc + (rows[k, e] / h.order) * block[..., k]
        out[..., e] = acc
    return out


def decode(
    block: np.ndarray,
    descriptor: AcquisitionDescriptor,
    h: HadamardMatrix,
    strategy: str = "auto",
) -> np.ndarray:
    """Decode a transmit-major block; output keeps the layout, T -> order.

    out[..., e] = (1/order) * sum_k H[row_k, e] * in[..., k], where row_k
    enumerates the acquired transmits (every row, or the sparse subset for
    uFORCES, whose decode applies the selected rows' transpose without
    renormalizing by the subset size).

    ``strategy``: "auto" picks "small" at or below SMALL_ORDER_THRESHOLD
    transmits and "blocked" above; all strategies are bit-identical on
    integer data.
    """
    rows = _decode_rows(descriptor, h)
    if block.shape[-1] != rows.shape[0]:
        raise ValueError(
            f"block transmit axis {block.shape[-1]} != acquired transmits {rows.shape[0]}"
        )
    if strategy == "auto":
        strategy = "small" if block.shape[-1] <= SMALL_ORDER_THRESHOLD else "blocked"
    if strategy not in ("small", "blocked"):
        raise ValueError(f"unknown strategy {strategy!r}")

    if block.dtype == np.int16:
        fn = _decode_int_small if strategy == "small" else _decode_int_blocked
        return fn(block, rows, h.order)
    if block.dtype == INT16_COMPLEX_DTYPE:
        fn = _decode_int_small if strategy == "small" else _decode_int_blocked
        out = np.empty(block.shape[:-1] + (h.order,), dtype=INT16_COMPLEX_DTYPE)
        out["re"] = fn(np.ascontiguousarray(block["re"]), rows, h.order)
        out["im"] = fn(np.ascontiguousarray(block["im"]), rows, h.order)
        return out
    return _decode_float(block, rows, h.order)


def encode(
    block: np.ndarray, descriptor: AcquisitionDescriptor, h: HadamardMatrix
) -> np.ndarray:
    """Forward Hadamard encoding across the last axis (test/simulator helper).

    enc[..., t] = sum_e H[row_t, e] * in[..., e]; int16 input accumulates
    in int32 (no overflow for orders <= 256) and stays int16-exact only
    when the encoded values fit, so callers keep amplitudes small.
    """
    rows = _decode_rows(descriptor, h)
    if block.dtype == np.int16:
        enc = block.astype(np.int32) @ rows.T.astype(np.int32)
        return enc
    return block @ rows.T.astype(np.float64 if not np.iscomplexobj(block) else block.dtype)


@dataclass
class DecodeBenchRow:
    order: int
    mode: str  # "square" or "sparse"
    ns_per_sample: float
    gflops: float
    fraction_of_peak: float


def _estimate_peak_gflops(seconds: float = 0.2) -> float:
    """Rough device peak from a large float32 matmul burst."""
    n = 512
    a = np.random.default_rng(0).standard_normal((n, n), dtype=np.float32)
    flops = 2.0 * n**3
    best = 0.0
    t_end = time.perf_counter() + seconds
    while time.perf_counter() < t_end:
        t0 = time.perf_counter()
        a = a @ a
        np.clip(a, -1.0, 1.0, out=a)
        dt = time.perf_counter() - t0
        best = max(best, flops / dt / 1e9)
    return best


def decode_benchmark(
    orders: Iterable[int],
    sample_count: int = 4096,
    channel_count: Optional[int] = None,
    peak_gflops: Optional[float] = None,
) -> list[DecodeBenchRow]:
    """Time reorder+decode for square and sparse (order/4 transmits) cases.

    Square runs order transmits into order receive channels; sparse is
    uFORCES-shaped, order/4 transmits into order channels. Informational
    only: FLOPs are counted as 2 * order^2 * samples * channels per decode
    (the multiply-adds of the naive loop) and the fraction-of-peak is
    relative to a locally measured matmul burst; no throughput value is
    asserted anywhere.
    """
    rows: list[DecodeBenchRow] = []
    orders = list(orders)
    if not orders:
        return rows
    if peak_gflops is None:
        peak_gflops = _estimate_peak_gflops()
    rng = np.random.default_rng(1234)
    for order in orders:
        h = hadamard(order)
        channels = channel_count or order
        for mode in ("square", "sparse"):
            if mode == "square":
                tx = order
                sparse = None
            else:
                tx = max(order // 4, 1)
                sparse = tuple(range(0, order, max(order // tx, 1)))[:tx]
            desc = AcquisitionDescriptor(
                sample_count=sample_count,
                channel_count=channels,
                transmit_count=tx,
                format=SampleFormat.INT16,
                sampling_freq=1.0,
                demodulation_freq=0.0,
                sparse_transmit_indices=sparse,
            )
            data = rng.integers(-1024, 1024, size=(tx, channels, sample_count)).astype(
                np.int16
            )
            t0 = time.perf_counter_ns()
            tm = reorder_transmit_major(data, desc)
            decode(tm, desc, h)
            elapsed = time.perf_counter_ns() - t0
            n_samples = sample_count * channels * tx
            flops = 2.0 * order * tx * sample_count * channels
            gflops = flops / elapsed
            rows.append(
                DecodeBenchRow(
                    order=order,
                    mode=mode,
                    ns_per_sample=elapsed / n_samples,
                    gflops=gflops,
                    fraction_of_peak=gflops / peak_gflops if peak_gflops else 0.0,
                )
            )
    return rows


def format_benchmark_report(rows: list[DecodeBenchRow]) -> str:
    """Newline-delimited "order,mode,ns_per_sample,gflops" records."""
    return "".join(
        f"{r.order},{r.mode},{r.ns_per_sample:.3f},{r.gflops:.3f}\n" for r in rows
    )
