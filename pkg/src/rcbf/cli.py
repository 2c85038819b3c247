"""Command-line entry points: simulate, beamform, bench, serve.

Exit codes: 0 success, 1 runtime failure, 2 usage errors.
"""

from __future__ import annotations

import argparse
import math
import signal
import sys
import threading
import time
from pathlib import Path

import numpy as np

from . import decode as decode_mod
from . import io as io_mod
from . import report, service, simulator, ws
from .model import (
    AcquisitionDescriptor,
    AcquisitionMode,
    ArrayGeometry,
    BeamformParams,
    FilterKind,
    FilterSpec,
    Interpolation,
    PlaneTransmit,
    RfFrame,
    SampleFormat,
    VirtualSourceTransmit,
)
from .pipeline import ParameterSet, Pipeline, PipelineClosed, StageError


def build_geometry(elements: int, pitch: float, rows: int | None = None) -> ArrayGeometry:
    """Centered N x N RCA: the global origin maps to the aperture center."""
    rows = rows or elements
    transform = np.eye(4)
    transform[0, 3] = (elements - 1) * pitch / 2.0
    transform[1, 3] = (rows - 1) * pitch / 2.0
    return ArrayGeometry(
        row_pitch=pitch,
        column_pitch=pitch,
        row_count=rows,
        column_count=elements,
        global_to_array=transform,
    )


def default_transmits(mode: AcquisitionMode, geometry: ArrayGeometry, count: int):
    """Deterministic transmit models for the unfocused-wave modes.

    simulate and beamform both call this, so a dataset simulated with the
    defaults reconstructs without spelling the models out in a params file.
    """
    aperture = (geometry.column_count - 1) * geometry.column_pitch
    cy = (geometry.row_count - 1) * geometry.row_pitch / 2.0
    if mode is AcquisitionMode.TPW:
        angles = np.linspace(-12.0, 12.0, count) * np.pi / 180.0
        return tuple(
            PlaneTransmit(direction=(math.sin(a), 0.0, math.cos(a))) for a in angles
        )
    if mode is AcquisitionMode.VLS:
        xs = np.linspace(0.0, aperture, count)
        return tuple(
            VirtualSourceTransmit(focus=(float(x), cy, -aperture)) for x in xs
        )
    if mode in (AcquisitionMode.FLASH, AcquisitionMode.HERCULES):
        return PlaneTransmit(direction=(0.0, 0.0, 1.0))
    return None


def parse_excitation(text: str, fc: float):
    if text.startswith("gauss"):
        parts = text.split(":")
        bw = float(parts[1]) if len(parts) > 1 else 0.6
        return simulator.GaussianPulse(center_freq=fc, fractional_bandwidth=bw)
    if text.startswith("chirp"):
        parts = text.split(":")
        if len(parts) != 4:
            raise ValueError("chirp excitation is chirp:F_START:F_END:DURATION")
        return simulator.Chirp(
            f_start=float(parts[1]), f_end=float(parts[2]), duration=float(parts[3])
        )
    raise ValueError(f"unknown excitation {text!r} (gauss[:BW] or chirp:F0:F1:DUR)")


def load_phantom(spec: str, depth: float) -> simulator.Phantom:
    if spec == "builtin:point":
        return simulator.Phantom.points([(0.0, 0.0, 0.02)])
    if spec == "builtin:grid":
        pts = [
            (x * 1e-3, 0.0, z * 1e-3)
            for z in (15.0, 20.0, 25.0)
            for x in (-5.0, 0.0, 5.0)
            if z * 1e-3 < depth
        ]
        return simulator.Phantom.points(pts)
    path = Path(spec)
    scatterers = []
    sound_speed = 1540.0
    for raw in path.read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("c="):
            sound_speed = float(line[2:])
            continue
        vals = [float(v) for v in line.split()]
        if len(vals) not in (3, 4):
            raise ValueError(f"phantom line needs x y z [reflectivity]: {raw!r}")
        scatterers.append((tuple(vals[:3]), vals[3] if len(vals) == 4 else 1.0))
    return simulator.Phantom(scatterers=tuple(scatterers), sound_speed=sound_speed)


def _descriptor_for_mode(
    mode: AcquisitionMode,
    geometry: ArrayGeometry,
    fs: float,
    fc: float,
    sample_count: int,
    fmt: SampleFormat,
    sparse: int | None,
) -> AcquisitionDescriptor:
    if mode is AcquisitionMode.FORCES:
        tx, ch, tx_rows, rx_rows = geometry.column_count, geometry.row_count, False, True
        sparse_idx = None
    elif mode is AcquisitionMode.UFORCES:
        order = geometry.column_count
        n = sparse or max(order // 4, 2)
        step = max(order // n, 1)
        sparse_idx = tuple(range(0, order, step))[:n]
        tx, ch, tx_rows, rx_rows = len(sparse_idx), geometry.row_count, False, True
    elif mode is AcquisitionMode.HERCULES:
        tx, ch, tx_rows, rx_rows = geometry.column_count, geometry.row_count, False, True
        sparse_idx = None
    else:  # vls/tpw/flash/rawsa: receive on columns for lateral focusing
        tx = 1 if mode is AcquisitionMode.FLASH else geometry.column_count
        ch, tx_rows, rx_rows = geometry.column_count, False, False
        sparse_idx = None
    return AcquisitionDescriptor(
        sample_count=sample_count,
        channel_count=ch,
        transmit_count=tx,
        format=fmt,
        sampling_freq=fs,
        demodulation_freq=fc,
        sound_speed=1540.0,
        acquisition_mode=mode,
        transmit_rows=tx_rows,
        receive_rows=rx_rows,
        sparse_transmit_indices=sparse_idx,
    )


def cmd_simulate(args: argparse.Namespace) -> int:
    mode = AcquisitionMode(args.mode)
    fc = args.fc
    fs = args.fs or 4.0 * fc
    pitch = args.pitch or 1540.0 / fc
    geometry = build_geometry(args.elements, pitch)
    excitation = parse_excitation(args.excitation, fc)
    tail = (
        excitation.duration
        if isinstance(excitation, simulator.Chirp)
        else 4.0 / fc
    )
    sample_count = int(math.ceil((2.0 * args.depth / 1540.0 + tail) * fs))
    sample_count += sample_count % 2
    fmt = SampleFormat.INT16 if args.format == "int16" else SampleFormat.FLOAT32
    descriptor = _descriptor_for_mode(
        mode, geometry, fs, fc, sample_count, fmt, args.sparse
    )
    phantom = load_phantom(args.phantom, args.depth)
    if fmt is SampleFormat.INT16:
        phantom = simulator.Phantom(
            scatterers=tuple((p, r * args.int16_scale) for p, r in phantom.scatterers),
            sound_speed=phantom.sound_speed,
        )
    transmit = default_transmits(mode, geometry, descriptor.transmit_count)
    frame = simulator.simulate(
        phantom,
        geometry,
        descriptor,
        excitation,
        noise_rms=args.noise,
        seed=args.seed,
        transmit=transmit,
    )
    io_mod.write_dataset(args.out, frame, geometry)
    print(
        f"wrote {args.out}: mode={mode.value} samples={sample_count} "
        f"channels={descriptor.channel_count} transmits={descriptor.transmit_count} "
        f"format={fmt.value} fs={fs:.3g} fd={fc:.3g} "
        f"payload={descriptor.payload_bytes} bytes"
    )
    if args.params_out:
        sets = [_default_parameter_set(mode, geometry, excitation, fs, args.depth)]
        io_mod.write_params(args.params_out, sets)
        print(f"wrote {args.params_out}")
    return 0


def _default_parameter_set(
    mode: AcquisitionMode,
    geometry: ArrayGeometry,
    excitation,
    fs: float,
    depth: float,
) -> ParameterSet:
    aperture = (geometry.column_count - 1) * geometry.column_pitch
    if isinstance(excitation, simulator.Chirp):
        fspec = FilterSpec(
            kind=FilterKind.MATCHED_CHIRP,
            tap_count=int(math.ceil(excitation.duration * fs)),
            chirp_f_start=excitation.f_start,
            chirp_f_end=excitation.f_end,
            chirp_duration=excitation.duration,
        )
    else:
        fspec = FilterSpec(kind=FilterKind.LOW_PASS, tap_count=36, passband_fraction=0.5)
    count = geometry.column_count
    params = BeamformParams(
        region_min=(-aperture / 2, 0.0, depth * 0.1),
        region_max=(aperture / 2, 0.0, depth),
        points=(256, 1, 256),
        f_number=1.0,
        interpolation=Interpolation.CUBIC_HERMITE,
        transmit=default_transmits(mode, geometry, count),
        filter=fspec,
    )
    return ParameterSet(id=0, beamform=params)


def cmd_beamform(args: argparse.Namespace) -> int:
    frame, geometry = io_mod.read_dataset(args.infile)
    sets = io_mod.read_params(args.params)
    descriptor = frame.descriptor
    # modes with free-standing wavefronts default to the simulate models
    for i, pset in enumerate(sets):
        merged = pset.merged_descriptor(descriptor)
        if pset.beamform.transmit is None and merged.acquisition_mode not in (
            AcquisitionMode.FORCES,
            AcquisitionMode.UFORCES,
            AcquisitionMode.RAW_SA,
        ):
            from dataclasses import replace

            transmit = default_transmits(
                merged.acquisition_mode,
                pset.merged_geometry(geometry),
                merged.transmit_count,
            )
            sets[i] = replace(
                pset, beamform=replace(pset.beamform, transmit=transmit)
            )
    if args.display:
        kind, _, value = args.display.partition(":")
        from dataclasses import replace

        settings = io_mod.DisplaySettings(
            kind=kind,
            dynamic_range_db=float(value) if kind == "log" else 60.0,
            power_threshold=float(value) if kind == "power" else 0.1,
        )
        sets = [replace(s, display=settings) for s in sets]

    images = []
    pipe = Pipeline(descriptor, geometry, sets, on_image=images.append)
    pipe.submit_frame(frame)
    try:
        pipe.process_next()
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        pipe.close()

    total_ns = sum(pipe.timings.last.values())
    for stage, ns in pipe.timings.last.items():
        print(f"{stage}: {ns/1e6:.2f} ms")
    for img in images:
        pset = sets[img.params_id] if img.params_id < len(sets) else sets[0]
        suffix = f".set{img.params_id}" if len(sets) > 1 else ""
        grid = io_mod.display_transform(img, pset.display)
        if args.export in ("pgm", "both"):
            slice2d = grid[:, 0, :].T if grid.shape[1] == 1 else grid[:, :, 0].T
            io_mod.export_pgm(slice2d, f"{args.out}{suffix}.pgm")
        if args.export in ("raw", "both"):
            io_mod.export_raw_f32(np.abs(img.values), f"{args.out}{suffix}.raw")
        if args.figure:
            report.save_image_figure(
                img, pset.beamform, pset.display, f"{args.out}{suffix}.png"
            )
        print(
            f"set {img.params_id}: {img.points_beamformed} points, "
            f"{total_ns / max(img.points_beamformed, 1):.1f} ns/point -> "
            f"{args.out}{suffix}.*"
        )
    return 0


_BENCH_CONFIGS = {
    # Table-III-shaped preset: shape-comparable, never value-asserted
    "table3": dict(samples=2816, channels=128, transmits=128, points=(1024, 1, 1024), taps=166),
    "small": dict(samples=704, channels=64, transmits=64, points=(256, 1, 256), taps=36),
}


def _bench_config(text: str) -> dict:
    if text in _BENCH_CONFIGS:
        return dict(_BENCH_CONFIGS[text])
    if text.startswith("custom:"):
        vals = [int(v) for v in text.split(":", 1)[1].split(",")]
        if len(vals) != 7:
            raise ValueError("custom config is custom:S,C,T,NX,NY,NZ,TAPS")
        s, c, t, nx, ny, nz, taps = vals
        return dict(samples=s, channels=c, transmits=t, points=(nx, ny, nz), taps=taps)
    raise ValueError(f"unknown config {text!r}")


def cmd_bench(args: argparse.Namespace) -> int:
    out = Path(args.out)
    if args.decode:
        orders = [int(v) for v in args.orders.split(",")]
        rows = decode_mod.decode_benchmark(orders, sample_count=args.samples)
        out.write_text(decode_mod.format_benchmark_report(rows))
        print(f"wrote {out}")
        if not args.no_figure:
            fig = out.with_suffix(".png")
            report.save_decode_plot(rows, fig)
            print(f"wrote {fig}")
        return 0

    cfg = _bench_config(args.config)
    n_points = int(np.prod(cfg["points"]))
    payload = cfg["samples"] * cfg["channels"] * cfg["transmits"]
    # decoded complex + accumulators; refuse configs that cannot fit
    need = payload * 2 * 4 * 3 + n_points * 32
    try:
        import psutil

        available = psutil.virtual_memory().available
    except ImportError:
        available = 16 << 30
    if need > available:
        print(
            f"error: config needs ~{need/1e9:.1f} GB but {available/1e9:.1f} GB is "
            'available; try --config small',
            file=sys.stderr,
        )
        return 1

    fs, fc = 20e6, 5e6
    geometry = build_geometry(cfg["channels"], 1540.0 / fc, rows=cfg["channels"])
    descriptor = AcquisitionDescriptor(
        sample_count=cfg["samples"],
        channel_count=cfg["channels"],
        transmit_count=cfg["transmits"],
        format=SampleFormat.INT16,
        sampling_freq=fs,
        demodulation_freq=fc,
        acquisition_mode=AcquisitionMode.FORCES,
        transmit_rows=False,
        receive_rows=True,
    )
    depth_span = cfg["samples"] / fs * 1540.0 / 2.0
    fspec = (
        FilterSpec(
            kind=FilterKind.MATCHED_CHIRP,
            tap_count=cfg["taps"],
            chirp_f_start=3e6,
            chirp_f_end=7e6,
            chirp_duration=cfg["taps"] / fs * 0.9,
        )
        if cfg["taps"] > 64
        else FilterSpec(kind=FilterKind.LOW_PASS, tap_count=cfg["taps"])
    )
    aperture = (cfg["channels"] - 1) * 1540.0 / fc
    params = BeamformParams(
        region_min=(-aperture / 2, 0.0, depth_span * 0.1),
        region_max=(aperture / 2, 0.0, depth_span),
        points=cfg["points"],
        interpolation=Interpolation.CUBIC_HERMITE,
        filter=fspec,
        decimation_factor=args.decimation,
    )
    rng = np.random.default_rng(args.seed)
    data = rng.integers(-8192, 8192, size=(cfg["transmits"], cfg["channels"], cfg["samples"])).astype(np.int16)
    frame = RfFrame(descriptor=descriptor, data=data)

    pipe = Pipeline(descriptor, geometry, ParameterSet(id=0, beamform=params))
    pipe.submit_frame(frame)
    t0 = time.perf_counter_ns()
    try:
        pipe.process_next()
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        pipe.close()
    total = time.perf_counter_ns() - t0

    lines = [
        f"# config={args.config}",
        f"# input_samples={cfg['samples']}",
        f"# channels={cfg['channels']}",
        f"# emissions={cfg['transmits']}",
        f"# total_samples={payload}",
        "# interpolation=cubic",
        f"# filter_length={cfg['taps']}",
        f"# points={cfg['points'][0]}x{cfg['points'][1]}x{cfg['points'][2]}",
        "stage,ns,ns_per_point",
    ]
    for stage, ns in pipe.timings.last.items():
        lines.append(f"{stage},{ns},{ns / n_points:.3f}")
    lines.append(f"total,{total},{total / n_points:.3f}")
    out.write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    print(f"wrote {out}")
    if not args.no_figure:
        fig = out.with_suffix(".png")
        report.save_stage_bars(
            dict(pipe.timings.last), fig, title=f"bench {args.config}"
        )
        print(f"wrote {fig}")
    return 0


def _serve_source(args):
    """Yield (frame, geometry) forever: dataset loop or live simulator."""
    if args.source.startswith("sim:"):
        kind = args.source.split(":", 1)[1]
        mode = AcquisitionMode(args.mode)
        fc = args.fc
        fs = args.fs or 4.0 * fc
        pitch = 1540.0 / fc
        geometry = build_geometry(args.elements, pitch)
        excitation = simulator.GaussianPulse(fc, 0.6)
        sample_count = int(math.ceil((2.0 * args.depth / 1540.0 + 4.0 / fc) * fs))
        sample_count += sample_count % 2
        descriptor = _descriptor_for_mode(
            mode, geometry, fs, fc, sample_count, SampleFormat.FLOAT32, None
        )
        transmit = default_transmits(mode, geometry, descriptor.transmit_count)
        base = load_phantom(
            "builtin:grid" if kind in ("grid", "beating") else "builtin:point",
            args.depth,
        )

        def frames():
            t_start = time.monotonic()
            n = 0
            while True:
                phantom = base
                if kind == "beating":
                    dz = 1e-3 * math.sin(2 * math.pi * 1.0 * (time.monotonic() - t_start))
                    phantom = simulator.Phantom(
                        scatterers=tuple(
                            ((p[0], p[1], p[2] + dz), r) for p, r in base.scatterers
                        ),
                        sound_speed=base.sound_speed,
                    )
                yield simulator.simulate(
                    phantom,
                    geometry,
                    descriptor,
                    excitation,
                    noise_rms=args.noise,
                    seed=args.seed + n,
                    transmit=transmit,
                )
                n += 1

        return frames(), descriptor, geometry
    frame, geometry = io_mod.read_dataset(args.source)

    def frames():
        while True:
            yield frame

    return frames(), frame.descriptor, geometry


def cmd_serve(args: argparse.Namespace) -> int:
    host, _, port = args.listen.rpartition(":")
    host = host or "127.0.0.1"
    frames, descriptor, geometry = _serve_source(args)
    if args.params:
        sets = io_mod.read_params(args.params)
    else:
        sets = [
            _default_parameter_set(
                descriptor.acquisition_mode,
                geometry,
                simulator.GaussianPulse(descriptor.demodulation_freq, 0.6),
                descriptor.sampling_freq,
                args.depth,
            )
        ]
    for i, pset in enumerate(sets):
        if pset.beamform.transmit is None and descriptor.acquisition_mode not in (
            AcquisitionMode.FORCES,
            AcquisitionMode.UFORCES,
            AcquisitionMode.RAW_SA,
        ):
            from dataclasses import replace

            sets[i] = replace(
                pset,
                beamform=replace(
                    pset.beamform,
                    transmit=default_transmits(
                        descriptor.acquisition_mode, geometry, descriptor.transmit_count
                    ),
                ),
            )

    pipe = Pipeline(descriptor, geometry, sets)
    engine = service.EngineServer(pipe)
    try:
        server = ws.WebSocketServer(host, int(port), engine.run_client)
    except OSError as exc:
        print(f"error: cannot bind {args.listen}: {exc}", file=sys.stderr)
        return 1
    server.start()
    print(f"serving on ws://{server.host}:{server.port} (source: {args.source})")

    stop = threading.Event()

    def ingest():
        period = 1.0 / args.rate
        for frame in frames:
            if stop.is_set():
                return
            t0 = time.monotonic()
            try:
                pipe.submit_frame(frame)
            except PipelineClosed:
                return
            sleep = period - (time.monotonic() - t0)
            if sleep > 0:
                stop.wait(sleep)

    def compute():
        while True:
            try:
                pipe.process_next()
            except PipelineClosed:
                return
            except StageError as exc:
                print(f"frame error: {exc}", file=sys.stderr)

    threads = [
        threading.Thread(target=ingest, daemon=True),
        threading.Thread(target=compute, daemon=True),
    ]
    for t in threads:
        t.start()

    def shutdown(*_):
        stop.set()

    signal.signal(signal.SIGINT, shutdown)
    signal.signal(signal.SIGTERM, shutdown)
    try:
        while not stop.is_set():
            time.sleep(0.1)
    except KeyboardInterrupt:
        stop.set()
    # drain: let submitted frames finish before closing the ring
    deadline = time.monotonic() + 5.0
    while pipe.frames_processed < pipe.frames_submitted and time.monotonic() < deadline:
        time.sleep(0.05)
    pipe.close()
    server.stop()
    print("shutdown complete")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rcbf",
        description="Encoded-aperture row-column ultrasound beamforming toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="synthesize an encoded RF dataset")
    sim.add_argument("--phantom", default="builtin:point",
                     help="builtin:point | builtin:grid | path to x y z [rho] file")
    sim.add_argument("--mode", default="forces",
                     choices=[m.value for m in AcquisitionMode])
    sim.add_argument("--elements", type=int, default=64)
    sim.add_argument("--pitch", type=float, default=None, help="meters (default: wavelength)")
    sim.add_argument("--fc", type=float, default=5e6, help="center/demodulation frequency")
    sim.add_argument("--fs", type=float, default=None, help="sampling frequency (default 4*fc)")
    sim.add_argument("--depth", type=float, default=0.045, help="max depth in meters")
    sim.add_argument("--excitation", default="gauss:0.6")
    sim.add_argument("--noise", type=float, default=0.0)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--sparse", type=int, default=None, help="uFORCES transmit count")
    sim.add_argument("--format", default="float32", choices=["float32", "int16"])
    sim.add_argument("--int16-scale", type=float, default=8192.0)
    sim.add_argument("--out", required=True)
    sim.add_argument("--params-out", default=None,
                     help="also write a matching beamform params file")
    sim.set_defaults(fn=cmd_simulate)

    bf = sub.add_parser("beamform", help="offline reconstruction of a dataset")
    bf.add_argument("--in", dest="infile", required=True)
    bf.add_argument("--params", required=True)
    bf.add_argument("--out", required=True, help="output path prefix")
    bf.add_argument("--export", default="pgm", choices=["pgm", "raw", "both"])
    bf.add_argument("--display", default=None, help="log:DB or power:THRESHOLD")
    bf.add_argument("--figure", action="store_true", help="also render a PNG figure")
    bf.set_defaults(fn=cmd_beamform)

    bench = sub.add_parser("bench", help="stage timing / decode throughput reports")
    bench.add_argument("--config", default="small",
                       help="table3 | small | custom:S,C,T,NX,NY,NZ,TAPS")
    bench.add_argument("--decode", action="store_true", help="run the decode benchmark")
    bench.add_argument("--orders", default="16,32,64,128,256")
    bench.add_argument("--samples", type=int, default=4096)
    bench.add_argument("--decimation", type=int, default=1)
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--out", default="bench.csv")
    bench.add_argument("--no-figure", action="store_true")
    bench.set_defaults(fn=cmd_bench)

    srv = sub.add_parser("serve", help="stream live images to viewers")
    srv.add_argument("--listen", default="127.0.0.1:8799")
    srv.add_argument("--source", default="sim:point",
                     help="dataset path | sim:point | sim:grid | sim:beating")
    srv.add_argument("--rate", type=float, default=10.0, help="frames per second")
    srv.add_argument("--params", default=None, help="parameter sets file")
    srv.add_argument("--mode", default="forces",
                     choices=[m.value for m in AcquisitionMode])
    srv.add_argument("--elements", type=int, default=16)
    srv.add_argument("--fc", type=float, default=5e6)
    srv.add_argument("--fs", type=float, default=None)
    srv.add_argument("--depth", type=float, default=0.03)
    srv.add_argument("--noise", type=float, default=0.0)
    srv.add_argument("--seed", type=int, default=0)
    srv.set_defaults(fn=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.fn(args)
    except (ValueError, OSError, io_mod.DatasetError, io_mod.ParamsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
