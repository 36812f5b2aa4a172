"""Staged worker-pool pipeline with bounded queues and in-order delivery.

Jobs enter as opaque payloads, pass through every stage in order, and
reach the sink sorted by sequence id (a reordering buffer sits in front
of it).  Each stage owns a pool of identical worker threads consuming
from the stage's bounded input queue and producing into the next stage's
queue; a full queue blocks upstream producers, which is the backpressure
that keeps slow stages from hoarding memory.  Queues are the only
cross-worker communication; a job is held by exactly one stage at a time.

A failing stage aborts the run: remaining jobs are drained (consumed and
counted, not processed) so nothing deadlocks, and ``run_pipeline`` raises
:class:`PipelineError` naming the stage and sequence id.
"""

from __future__ import annotations

import csv
import io
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from . import preprocess as _pre
from . import volio as _vol
from .fourier_bp import FBP_SCALE, BstPlan, FilterPlan, bst_backproject, ramp_filter
from .grids import ImageGrid, Sinogram, StageKind, VolumeBlock
from .projector import backproject_ss

__all__ = [
    "StageSpec",
    "PipelinePlan",
    "JobTicket",
    "StageMetrics",
    "PipelineMetrics",
    "PipelineError",
    "MemoryBudgetError",
    "run_pipeline",
    "estimate_memory",
    "build_reconstruction_pipeline",
]


@dataclass(frozen=True)
class StageSpec:
    """One pipeline stage: a process function plus its pool and queue bound.

    ``workset_multiplier`` states how many slice-sized buffers one job
    needs while inside this stage (input + output = 2 for simple maps);
    it feeds the memory estimate.
    """

    name: str
    workers: int
    queue_capacity: int
    process: Callable[[Any], Any]
    workset_multiplier: float = 2.0

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError(f"stage {self.name!r}: workers must be >= 1")
        if self.queue_capacity < 1:
            raise ValueError(f"stage {self.name!r}: queue_capacity must be >= 1")


@dataclass
class PipelinePlan:
    """Stage graph, block size, memory bookkeeping and worker hints."""

    stages: Sequence[StageSpec]
    block_size: int = 1
    workers_hint: tuple[int, int] | None = None  # (work items, threads) reporting only
    memory_budget: int | None = None
    slice_bytes: int | None = None
    resources: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not self.stages:
            raise ValueError("pipeline needs at least one stage")
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")
        self.stages = tuple(self.stages)

    def close_resources(self) -> None:
        for r in self.resources:
            r.close()


@dataclass
class JobTicket:
    sequence_id: int
    payload: Any
    timestamps: dict = field(default_factory=dict)

    def stamp(self, stage: str, event: str) -> None:
        self.timestamps[(stage, event)] = time.perf_counter()


@dataclass
class StageMetrics:
    name: str
    workers: int
    capacity: int
    jobs: int
    busy_s: float
    idle_s: float
    peak_queue: int
    peak_inflight: int
    drained: int


@dataclass
class PipelineMetrics:
    stages: list[StageMetrics]
    wall_s: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "workers", "capacity", "jobs", "busy_s", "idle_s", "peak_queue"])
        for s in self.stages:
            w.writerow(
                [s.name, s.workers, s.capacity, s.jobs, f"{s.busy_s:.6f}", f"{s.idle_s:.6f}", s.peak_queue]
            )
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_csv())

    def summary(self) -> str:
        lines = [f"pipeline wall time: {self.wall_s:.3f} s"]
        for s in self.stages:
            lines.append(
                f"  {s.name:<12} workers={s.workers} cap={s.capacity} jobs={s.jobs} "
                f"busy={s.busy_s:.3f}s idle={s.idle_s:.3f}s peak_queue={s.peak_queue} "
                f"peak_inflight={s.peak_inflight} drained={s.drained}"
            )
        return "\n".join(lines)


class PipelineError(RuntimeError):
    """A stage's process function failed; the run was drained and stopped."""

    def __init__(self, stage_name: str, sequence_id: int, cause: BaseException, drained_ids, metrics):
        super().__init__(
            f"stage {stage_name!r} failed on job {sequence_id}: {cause!r}"
        )
        self.stage_name = stage_name
        self.sequence_id = sequence_id
        self.cause = cause
        self.drained_ids = sorted(drained_ids)
        self.metrics = metrics


class MemoryBudgetError(RuntimeError):
    """Estimated working set exceeds the configured memory budget."""

    def __init__(self, estimate: int, budget: int):
        super().__init__(
            f"estimated working set {estimate} bytes exceeds budget {budget} bytes"
        )
        self.estimate = estimate
        self.budget = budget


def estimate_memory(plan: PipelinePlan, slice_bytes: int) -> int:
    """Upper bound on bytes held by queued plus in-flight jobs.

    Per stage: (workers + queue_capacity) jobs may be resident at once,
    each holding block_size slices times the stage's working-set
    multiplier.
    """
    total = 0.0
    for s in plan.stages:
        total += (s.workers + s.queue_capacity) * plan.block_size * slice_bytes * s.workset_multiplier
    return int(np.ceil(total))


_SENTINEL = object()


class _StageState:
    def __init__(self, spec: StageSpec):
        self.spec = spec
        self.queue: queue.Queue = queue.Queue(maxsize=spec.queue_capacity)
        self.lock = threading.Lock()
        self.alive = spec.workers
        self.jobs = 0
        self.busy = 0.0
        self.idle = 0.0
        self.inflight = 0
        self.peak_inflight = 0
        self.peak_queue = 0
        self.drained = 0

    def note_depth(self) -> None:
        d = self.queue.qsize()
        if d > self.peak_queue:
            with self.lock:
                self.peak_queue = max(self.peak_queue, d)


class _Run:
    def __init__(self, plan: PipelinePlan, sink):
        self.plan = plan
        self.sink = sink
        self.states = [_StageState(s) for s in plan.stages]
        self.out_queue: queue.Queue = queue.Queue()
        self.abort = threading.Event()
        self.error_lock = threading.Lock()
        self.error: tuple[str, int, BaseException] | None = None
        self.drained_ids: list[int] = []
        self.drain_lock = threading.Lock()

    def _record_drain(self, state: _StageState, seq: int) -> None:
        with self.drain_lock:
            self.drained_ids.append(seq)
        with state.lock:
            state.drained += 1

    def _record_error(self, stage: str, seq: int, exc: BaseException) -> None:
        with self.error_lock:
            if self.error is None:
                self.error = (stage, seq, exc)
        self.abort.set()

    def _put_next(self, index: int, item) -> float:
        """Forward to stage index+1 (or the collector); returns wait time."""
        t0 = time.perf_counter()
        if index + 1 < len(self.states):
            nxt = self.states[index + 1]
            nxt.queue.put(item)
            nxt.note_depth()
        else:
            self.out_queue.put(item)
        return time.perf_counter() - t0

    def worker(self, index: int) -> None:
        state = self.states[index]
        spec = state.spec
        while True:
            t0 = time.perf_counter()
            item = state.queue.get()
            wait = time.perf_counter() - t0
            with state.lock:
                state.idle += wait
            if item is _SENTINEL:
                with state.lock:
                    state.alive -= 1
                    last = state.alive == 0
                if last:
                    count = (
                        self.states[index + 1].spec.workers
                        if index + 1 < len(self.states)
                        else 1
                    )
                    for _ in range(count):
                        self._put_next(index, _SENTINEL)
                return
            ticket: JobTicket = item
            if self.abort.is_set():
                self._record_drain(state, ticket.sequence_id)
                continue
            ticket.stamp(spec.name, "start")
            with state.lock:
                state.inflight += 1
                state.peak_inflight = max(state.peak_inflight, state.inflight)
            t0 = time.perf_counter()
            try:
                result = spec.process(ticket.payload)
            except BaseException as exc:  # noqa: BLE001 - reported via PipelineError
                with state.lock:
                    state.inflight -= 1
                    state.busy += time.perf_counter() - t0
                self._record_error(spec.name, ticket.sequence_id, exc)
                continue
            elapsed = time.perf_counter() - t0
            with state.lock:
                state.inflight -= 1
                state.busy += elapsed
                state.jobs += 1
            ticket.payload = result
            ticket.stamp(spec.name, "finish")
            if index + 1 < len(self.states):
                ticket.stamp(self.states[index + 1].spec.name, "enqueue")
            stall = self._put_next(index, ticket)
            with state.lock:
                state.idle += stall


def run_pipeline(
    plan: PipelinePlan,
    source: Iterable,
    sink: Callable[[Any], None],
    allow_overbudget: bool = False,
) -> PipelineMetrics:
    """Push every payload from ``source`` through the stage chain.

    The sink is called once per job, in sequence order.  Returns the
    per-stage metrics; raises :class:`MemoryBudgetError` before starting
    if the plan carries a budget that the estimate exceeds (unless
    overridden) and :class:`PipelineError` if any stage fails.
    """
    if (
        plan.memory_budget is not None
        and plan.slice_bytes is not None
        and not allow_overbudget
    ):
        est = estimate_memory(plan, plan.slice_bytes)
        if est > plan.memory_budget:
            raise MemoryBudgetError(est, plan.memory_budget)

    run = _Run(plan, sink)
    t_start = time.perf_counter()

    threads = []
    for i, state in enumerate(run.states):
        for w in range(state.spec.workers):
            th = threading.Thread(
                target=run.worker, args=(i,), name=f"{state.spec.name}-{w}", daemon=True
            )
            th.start()
            threads.append(th)

    def feed():
        first = run.states[0]
        for seq, payload in enumerate(source):
            ticket = JobTicket(sequence_id=seq, payload=payload)
            ticket.stamp(first.spec.name, "enqueue")
            first.queue.put(ticket)
            first.note_depth()
        for _ in range(first.spec.workers):
            first.queue.put(_SENTINEL)

    feeder = threading.Thread(target=feed, name="source-feeder", daemon=True)
    feeder.start()

    # collector: reorder buffer keyed by sequence id, flushed in order
    buffered: dict[int, JobTicket] = {}
    next_expected = 0
    delivered = 0
    while True:
        item = run.out_queue.get()
        if item is _SENTINEL:
            break
        buffered[item.sequence_id] = item
        while next_expected in buffered:
            sink(buffered.pop(next_expected).payload)
            delivered += 1
            next_expected += 1
    if run.abort.is_set():
        # deliver whatever completed beyond the failure gap, still ascending
        for seq in sorted(buffered):
            sink(buffered.pop(seq).payload)
            delivered += 1

    feeder.join()
    for th in threads:
        th.join()
    wall = time.perf_counter() - t_start

    metrics = PipelineMetrics(
        stages=[
            StageMetrics(
                name=s.spec.name,
                workers=s.spec.workers,
                capacity=s.spec.queue_capacity,
                jobs=s.jobs,
                busy_s=s.busy,
                idle_s=s.idle,
                peak_queue=s.peak_queue,
                peak_inflight=s.peak_inflight,
                drained=s.drained,
            )
            for s in run.states
        ],
        wall_s=wall,
    )
    if run.error is not None:
        stage_name, seq, exc = run.error
        raise PipelineError(stage_name, seq, exc, run.drained_ids, metrics) from exc
    return metrics


# --------------------------------------------------------------------------
# reconstruction pipeline assembly
# --------------------------------------------------------------------------


def _map_block(block: VolumeBlock, fn, tag: StageKind) -> VolumeBlock:
    return VolumeBlock(
        first_slice=block.first_slice,
        slices=[fn(s) for s in block.slices],
        stage_tag=tag,
    )


def build_reconstruction_pipeline(cfg) -> PipelinePlan:
    """Assemble read -> [N] -> [C] -> [R] -> F -> B -> [S] for a config.

    ``cfg`` is a :class:`tomoblocks.cli.ReconConfig` (or anything with the
    same attributes).  The reader (and writer, when writing is enabled)
    are opened eagerly and registered on ``plan.resources``; the caller
    closes them after the run.

    Optional stages are toggled by the config flags; the two canonical
    shapes are the 4-stage read/N/F/B chain and the full 7-stage chain
    with centering, ring suppression and storage.
    """
    if cfg.kernel not in ("ss", "bst"):
        raise ValueError(f"unknown kernel {cfg.kernel!r}")

    reader = _vol.BlockReader(cfg.input_path, cfg.block_size)
    header = reader.header
    n_t, v, n_slices = header.n_t, header.n_angles, header.n_slices
    out_n = cfg.output_n or n_t
    slice_bytes = v * n_t * 8  # float64 in flight

    plan_bst = BstPlan(
        n_t=n_t,
        n_theta=v,
        pad_factor=cfg.pad_factor,
        kb_beta=cfg.kb_beta,
        kb_support=cfg.kb_support,
        output_n=out_n,
    )
    fplan = (
        FilterPlan(kind="ramp_apodized", rolloff=cfg.apodize)
        if cfg.apodize < 1.0
        else FilterPlan()
    )

    stages: list[StageSpec] = []
    resources: list = [reader]

    def read_stage(desc):
        first, count = desc
        return reader.read_slices(first, count)

    stages.append(StageSpec("read", 1, cfg.queue_capacity, read_stage, 2.0))

    if cfg.normalize:
        flat = np.full((v, n_t), float(cfg.i0))
        dark = np.full((v, n_t), float(cfg.dark))
        frames = _pre.FlatDarkFrames(flat=flat, dark=dark)

        def norm_stage(block):
            return _map_block(
                block,
                lambda s: Sinogram(s.detector, s.angles, _pre.normalize(s.data, frames)),
                StageKind.NORMALIZE,
            )

        stages.append(StageSpec("normalize", cfg.workers, cfg.queue_capacity, norm_stage, 2.0))

    if cfg.center != "off":
        fixed_beta = cfg.center_beta  # precomputed for volume mode

        def center_stage(block):
            def fix(s):
                beta = (
                    fixed_beta
                    if fixed_beta is not None
                    else _pre.estimate_center(s).beta
                )
                return _pre.apply_center(s, beta)

            return _map_block(block, fix, StageKind.CENTER)

        stages.append(StageSpec("center", cfg.workers, cfg.queue_capacity, center_stage, 2.0))

    if cfg.rings:

        def rings_stage(block):
            return _map_block(
                block, lambda s: _pre.suppress_rings(s, cfg.ring_window), StageKind.RINGS
            )

        stages.append(StageSpec("rings", cfg.workers, cfg.queue_capacity, rings_stage, 2.0))

    npad = 2 * (1 << (n_t - 1).bit_length())
    filter_mult = 2.0 + 3.0 * npad / n_t  # complex padded spectra per slice

    def filter_stage(block):
        return _map_block(block, lambda s: ramp_filter(s, fplan), StageKind.FILTER)

    stages.append(StageSpec("filter", cfg.workers, cfg.queue_capacity, filter_stage, filter_mult))

    if cfg.kernel == "ss":
        back_mult = 2.0 + (out_n * out_n) / (v * n_t)

        def back_stage(block):
            return _map_block(
                block,
                lambda s: ImageGrid(out_n, backproject_ss(s, out_n).data * FBP_SCALE),
                StageKind.BACKPROJECT,
            )

    else:
        L = plan_bst.radial_samples
        # polar rows + spectrum + three L^2 complex grids + lookup tables,
        # expressed in slice-sized units (shared tables counted per job,
        # which overestimates and is the safe direction for a guard)
        back_mult = 2.0 + (out_n * out_n + 10.0 * L * L + 6.0 * v * L) / (v * n_t)

        def back_stage(block):
            return _map_block(
                block,
                lambda s: ImageGrid(out_n, bst_backproject(s, plan_bst).data * FBP_SCALE),
                StageKind.BACKPROJECT,
            )

    stages.append(StageSpec("backproject", cfg.workers, cfg.queue_capacity, back_stage, back_mult))

    if cfg.write:
        writer = _vol.VolumeWriter(cfg.output_path, n_slices, out_n)
        resources.append(writer)

        def write_stage(block):
            writer.write_block(block)
            return VolumeBlock(block.first_slice, block.slices, StageKind.WRITE)

        stages.append(StageSpec("write", 1, cfg.queue_capacity, write_stage, 2.0))

    plan = PipelinePlan(
        stages=stages,
        block_size=cfg.block_size,
        workers_hint=(8, 2 * cfg.workers),
        memory_budget=cfg.memory_budget,
        slice_bytes=slice_bytes,
        resources=resources,
    )
    if plan.memory_budget is not None:
        est = estimate_memory(plan, slice_bytes)
        if est > plan.memory_budget:
            import warnings

            warnings.warn(
                f"plan working-set estimate {est} bytes exceeds budget "
                f"{plan.memory_budget} bytes",
                RuntimeWarning,
                stacklevel=2,
            )
    return plan


def block_descriptors(n_slices: int, q: int) -> list[tuple[int, int]]:
    """(first_slice, count) job descriptors covering the volume in Q-blocks."""
    return [(first, min(q, n_slices - first)) for first in range(0, n_slices, q)]
