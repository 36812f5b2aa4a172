"""Command-line surface: phantom generation, reconstruction, benchmarking
and container inspection.

Exit codes: 0 success, 1 usage, 2 I/O, 3 numeric/stage failure,
4 memory-budget refusal.
"""

from __future__ import annotations

import argparse
import os
import sys
import tempfile
import time
from dataclasses import dataclass, replace

import numpy as np

from . import pipeline as _pl
from . import preprocess as _pre
from . import volio as _vol
from .grids import AngleAxis, DetectorAxis, ImageGrid
from .phantom import Ellipsoid, analytic_sinogram

__all__ = ["ReconConfig", "main", "entry"]

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_NUMERIC = 3
EXIT_MEMORY = 4


@dataclass(frozen=True)
class ReconConfig:
    """Everything cmd_reconstruct needs; mirrors the pipeline plan rules."""

    input_path: str
    output_path: str | None
    kernel: str = "bst"
    block_size: int = 10
    workers: int = 2
    queue_capacity: int = 2
    normalize: bool = True
    center: str = "off"  # off | volume | slice
    center_beta: float | None = None
    rings: bool = False
    ring_window: int = 9
    apodize: float = 1.0
    pad_factor: int = 2
    kb_beta: float = 10.0
    kb_support: float = 0.1
    output_n: int | None = None
    memory_budget: int | None = None
    write: bool = True
    i0: float = 10000.0
    dark: float = 0.0


class _Parser(argparse.ArgumentParser):
    """argparse with usage failures mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _build_parser() -> _Parser:
    p = _Parser(prog="tomoblocks", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", help="write an analytic phantom volume")
    ph.add_argument("--output", required=True, help="output TOMOVOL1 path")
    ph.add_argument("--n", type=int, default=256, help="detector samples per frame row")
    ph.add_argument("--angles", type=int, default=256, help="projection angles on [0, pi)")
    ph.add_argument("--slices", type=int, default=8, help="number of slices")
    ph.add_argument("--a", type=float, default=0.5, help="semi-axis along u1")
    ph.add_argument("--b", type=float, default=0.5, help="semi-axis along u2")
    ph.add_argument("--c", type=float, default=0.5, help="semi-axis along the slice axis")
    ph.add_argument("--rho", type=float, default=1.0, help="density")
    ph.add_argument("--center-u1", type=float, default=0.0)
    ph.add_argument("--center-u2", type=float, default=0.0)
    ph.add_argument("--center-s", type=float, default=0.0)
    ph.add_argument(
        "--counts",
        type=float,
        default=0.0,
        metavar="I0",
        help="write transmission counts I0*exp(-y) instead of line integrals",
    )
    ph.add_argument(
        "--shift-bins",
        type=float,
        default=0.0,
        help="simulated center-of-rotation shift in detector bins",
    )

    rc = sub.add_parser("reconstruct", help="run the block pipeline on a volume")
    rc.add_argument("--input", required=True)
    rc.add_argument("--output", help="output volume (required unless --dry-run)")
    rc.add_argument("--kernel", choices=("ss", "bst"), default="bst")
    rc.add_argument("--blocksize", type=int, default=10, metavar="Q")
    rc.add_argument("--workers", type=int, default=2)
    rc.add_argument("--queue", type=int, default=2, help="queue capacity per stage")
    rc.add_argument("--no-normalize", action="store_true")
    rc.add_argument("--center", choices=("off", "volume", "slice"), default="off")
    rc.add_argument("--rings", choices=("off", "on"), default="off")
    rc.add_argument("--ring-window", type=int, default=9)
    rc.add_argument("--apodize", type=float, default=1.0, metavar="F")
    rc.add_argument("--pad-factor", type=int, default=2)
    rc.add_argument("--kb-beta", type=float, default=10.0)
    rc.add_argument("--kb-support", type=float, default=0.1)
    rc.add_argument("--memory-budget", type=int, metavar="BYTES")
    rc.add_argument("--allow-overbudget", action="store_true")
    rc.add_argument("--dry-run", action="store_true")
    rc.add_argument("--metrics", help="metrics CSV path (default OUTPUT.metrics.csv)")
    rc.add_argument("--i0", type=float, default=10000.0, help="flat-field level for -N")
    rc.add_argument("--dark", type=float, default=0.0, help="dark-field level for -N")

    be = sub.add_parser("bench", help="timing sweep over sizes, blocks and kernels")
    be.add_argument("--sizes", default="128,256", help="comma-separated N values")
    be.add_argument("--blocksizes", default="5,10", help="comma-separated Q values")
    be.add_argument("--kernels", default="ss,bst")
    be.add_argument("--repeat", type=int, default=3)
    be.add_argument("--workers", type=int, default=2)
    be.add_argument("--queue", type=int, default=2)
    be.add_argument("--slices", type=int, default=8)
    be.add_argument("--read-only", action="store_true", help="time only the read stage")
    be.add_argument("--output", help="CSV path (default stdout)")

    ins = sub.add_parser("inspect", help="print container header and stats")
    ins.add_argument("input")
    ins.add_argument("--export-slice", type=int, metavar="K")
    ins.add_argument("--format", choices=("pgm16", "csv"), default="pgm16")
    ins.add_argument("--export-path")

    return p


# --------------------------------------------------------------------------
# phantom
# --------------------------------------------------------------------------


def cmd_phantom(args) -> int:
    det = DetectorAxis(args.n)
    ang = AngleAxis(args.angles)
    e = Ellipsoid(
        a=args.a,
        b=args.b,
        c=args.c,
        rho=args.rho,
        center=(args.center_u1, args.center_u2, args.center_s),
    )
    s_values = -1.0 + 2.0 * (np.arange(args.slices) + 0.5) / args.slices
    cube = np.empty((args.angles, args.slices, args.n), dtype=np.float32)
    for k, s in enumerate(s_values):
        y = analytic_sinogram(e, float(s), det, ang).data
        if args.shift_bins:
            y = _shift_rows(y, args.shift_bins)
        if args.counts > 0.0:
            y = args.counts * np.exp(-y)
        cube[:, k, :] = y.astype(np.float32)
    header = _vol.VolumeHeader(layout=_vol.LAYOUT_FRAMES, dims=cube.shape)
    _vol.write_volume(args.output, header, cube)
    print(f"wrote {args.output}: {args.angles} angles x {args.slices} slices x {args.n} bins")
    return EXIT_OK


def _shift_rows(y: np.ndarray, bins: float) -> np.ndarray:
    """Shift rows so features move by +bins along t (linear interpolation)."""
    idx = np.arange(y.shape[1]) - bins
    i0 = np.floor(idx).astype(np.int64)
    fr = idx - i0
    ok0 = (i0 >= 0) & (i0 <= y.shape[1] - 1)
    ok1 = (i0 + 1 >= 0) & (i0 + 1 <= y.shape[1] - 1)
    i0c = np.clip(i0, 0, y.shape[1] - 1)
    i1c = np.clip(i0 + 1, 0, y.shape[1] - 1)
    return y[:, i0c] * np.where(ok0, 1.0 - fr, 0.0) + y[:, i1c] * np.where(ok1, fr, 0.0)


# --------------------------------------------------------------------------
# reconstruct
# --------------------------------------------------------------------------


def _config_from_args(args) -> ReconConfig:
    return ReconConfig(
        input_path=args.input,
        output_path=args.output,
        kernel=args.kernel,
        block_size=args.blocksize,
        workers=args.workers,
        queue_capacity=args.queue,
        normalize=not args.no_normalize,
        center=args.center,
        rings=args.rings == "on",
        ring_window=args.ring_window,
        apodize=args.apodize,
        pad_factor=args.pad_factor,
        kb_beta=args.kb_beta,
        kb_support=args.kb_support,
        memory_budget=args.memory_budget,
        write=True,
        i0=args.i0,
        dark=args.dark,
    )


def _estimate_volume_beta(cfg: ReconConfig) -> float:
    """Estimate the center shift once, from the volume's middle slice."""
    with _vol.BlockReader(cfg.input_path, 1) as reader:
        mid = reader.header.n_slices // 2
        block = reader.read_slices(mid, 1)
    sino = block.slices[0]
    if cfg.normalize:
        frames = _pre.FlatDarkFrames(
            flat=np.full(sino.data.shape, cfg.i0),
            dark=np.full(sino.data.shape, cfg.dark),
        )
        sino = type(sino)(sino.detector, sino.angles, _pre.normalize(sino.data, frames))
    return _pre.estimate_center(sino).beta


def cmd_reconstruct(args) -> int:
    cfg = _config_from_args(args)
    if not args.dry_run and not cfg.output_path:
        print("reconstruct: --output is required unless --dry-run", file=sys.stderr)
        return EXIT_USAGE

    if cfg.center == "volume":
        cfg = replace(cfg, center_beta=_estimate_volume_beta(cfg))

    if args.dry_run:
        plan = _pl.build_reconstruction_pipeline(replace(cfg, write=False))
        try:
            est = _pl.estimate_memory(plan, plan.slice_bytes)
            print("stage plan:", " -> ".join(s.name for s in plan.stages)
                  + (" -> write" if cfg.write else ""))
            print(f"blocksize Q={plan.block_size}, slice bytes={plan.slice_bytes}")
            print(f"memory estimate: {est} bytes"
                  + (f" (budget {cfg.memory_budget})" if cfg.memory_budget else ""))
        finally:
            plan.close_resources()
        return EXIT_OK

    plan = _pl.build_reconstruction_pipeline(cfg)
    n_slices = plan.resources[0].header.n_slices
    done = []
    t0 = time.perf_counter()
    try:
        metrics = _pl.run_pipeline(
            plan,
            _pl.block_descriptors(n_slices, cfg.block_size),
            lambda block: done.append(len(block)),
            allow_overbudget=args.allow_overbudget,
        )
    except _pl.MemoryBudgetError as exc:
        plan.close_resources()
        _remove_quiet(cfg.output_path)
        print(f"refusing to start: {exc}", file=sys.stderr)
        return EXIT_MEMORY
    except _pl.PipelineError as exc:
        plan.close_resources()
        _remove_quiet(cfg.output_path)
        print(f"reconstruction failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        plan.close_resources()
    wall = time.perf_counter() - t0

    metrics_path = args.metrics or (cfg.output_path + ".metrics.csv")
    metrics.write_csv(metrics_path)
    print(metrics.summary())
    print(f"reconstructed {sum(done)} slices in {wall:.3f} s -> {cfg.output_path}")
    return EXIT_OK


def _remove_quiet(path) -> None:
    if path and os.path.exists(path):
        try:
            os.remove(path)
        except OSError:
            pass


# --------------------------------------------------------------------------
# bench
# --------------------------------------------------------------------------


def _parse_int_list(text: str) -> list[int]:
    try:
        return [int(tok) for tok in text.split(",") if tok]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def cmd_bench(args) -> int:
    sizes = _parse_int_list(args.sizes)
    blocksizes = _parse_int_list(args.blocksizes)
    kernels = [k.strip() for k in args.kernels.split(",") if k.strip()]
    for k in kernels:
        if k not in ("ss", "bst"):
            print(f"bench: unknown kernel {k!r}", file=sys.stderr)
            return EXIT_USAGE

    rows = [("size", "q", "kernel", "workers", "rep", "seconds")]
    with tempfile.TemporaryDirectory(prefix="tomoblocks-bench-") as tmp:
        for size in sizes:
            vol_path = os.path.join(tmp, f"phantom_{size}.tomovol")
            ph_args = _build_parser().parse_args(
                [
                    "phantom",
                    "--output", vol_path,
                    "--n", str(size),
                    "--angles", str(size),
                    "--slices", str(args.slices),
                ]
            )
            cmd_phantom(ph_args)
            for q in blocksizes:
                for kernel in kernels:
                    for rep in range(args.repeat):
                        seconds = _bench_cell(vol_path, kernel, q, args)
                        rows.append((size, q, kernel, args.workers, rep, f"{seconds:.6f}"))

    text = "\n".join(",".join(str(v) for v in row) for row in rows) + "\n"
    if args.output:
        with open(args.output, "w") as f:
            f.write(text)
        print(f"wrote {len(rows) - 1} rows to {args.output}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _bench_cell(vol_path: str, kernel: str, q: int, args) -> float:
    if args.read_only:
        reader = _vol.BlockReader(vol_path, q)
        plan = _pl.PipelinePlan(
            stages=[
                _pl.StageSpec(
                    "read", 1, args.queue, lambda d: reader.read_slices(*d), 2.0
                )
            ],
            block_size=q,
        )
        plan.resources.append(reader)
    else:
        cfg = ReconConfig(
            input_path=vol_path,
            output_path=None,
            kernel=kernel,
            block_size=q,
            workers=args.workers,
            queue_capacity=args.queue,
            normalize=False,
            write=False,
        )
        plan = _pl.build_reconstruction_pipeline(cfg)
    n_slices = plan.resources[0].header.n_slices
    t0 = time.perf_counter()
    try:
        _pl.run_pipeline(
            plan, _pl.block_descriptors(n_slices, q), lambda block: None
        )
    finally:
        plan.close_resources()
    return time.perf_counter() - t0


# --------------------------------------------------------------------------
# inspect
# --------------------------------------------------------------------------


def cmd_inspect(args) -> int:
    with _vol.BlockReader(args.input, 1) as reader:
        h = reader.header
        layout_name = "frames [angle][slice][detector]" if h.layout == 0 else "slices [slice][angle][detector]"
        print(f"magic: TOMOVOL1")
        print(f"layout: {h.layout} ({layout_name})")
        print(f"dims: {h.dims}")
        print(f"dtype: float32 little-endian")
        print(f"slices: {h.n_slices}, angles: {h.n_angles}, detector bins: {h.n_t}")
        mid = h.n_slices // 2
        sample = reader.read_slices(mid, 1).slices[0].data
        print(
            f"slice {mid}: min={sample.min():.6g} max={sample.max():.6g} "
            f"mean={sample.mean():.6g}"
        )
        if args.export_slice is not None:
            k = args.export_slice
            if not 0 <= k < h.n_slices:
                print(f"inspect: slice {k} out of range", file=sys.stderr)
                return EXIT_USAGE
            data = reader.read_slices(k, 1).slices[0].data
            ext = "pgm" if args.format == "pgm16" else "csv"
            path = args.export_path or f"{args.input}.slice{k}.{ext}"
            if args.format == "csv":
                np.savetxt(path, data, fmt="%.17g", delimiter=",", newline="\n")
            else:
                if data.shape[0] != data.shape[1]:
                    print(
                        "inspect: pgm16 export needs a square slice; use --format csv",
                        file=sys.stderr,
                    )
                    return EXIT_USAGE
                _vol.export_image(ImageGrid(data.shape[0], data), path, "pgm16")
            print(f"exported slice {k} -> {path}")
    return EXIT_OK


# --------------------------------------------------------------------------


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse --help exits 0, usage errors exit 1
        return int(exc.code or 0)
    try:
        if args.command == "phantom":
            return cmd_phantom(args)
        if args.command == "reconstruct":
            return cmd_reconstruct(args)
        if args.command == "bench":
            return cmd_bench(args)
        if args.command == "inspect":
            return cmd_inspect(args)
    except _vol.VolumeError as exc:
        print(f"tomoblocks: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"tomoblocks: {exc}", file=sys.stderr)
        return EXIT_IO
    except (_pre.CenteringError, FloatingPointError, ValueError) as exc:
        print(f"tomoblocks: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    parser.error(f"unknown command {args.command!r}")
    return EXIT_USAGE


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
