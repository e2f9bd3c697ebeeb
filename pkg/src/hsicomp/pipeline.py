"""Staged concurrent execution of the preprocessing + inference chain.

The chain is a list of named steps. A :class:`StagePlan` groups consecutive
steps into stages, one worker thread each; neighbouring stages exchange frames
through a two-slot buffer, so a producer can fill one slot while the consumer
still reads the other, and stalls when both are taken.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .errors import PipelineError
from .netgraph.engine import forward
from .netgraph.graph import Kind, NetGraph
from .preprocess import (
    CalibrationPair,
    ChannelStats,
    PreprocessConfig,
    RawFrame,
    active_calibration,
    align_bands,
    clip_and_normalize,
    crop_and_clip,
    demosaic,
    read_raw,
    reflectance_correct,
    symmetric_normalize,
    to_bip_cropped,
)

STEP_NAMES = (
    "Image loading",
    "Cropping and clipping",
    "Reflectance correction",
    "Demosaicing",
    "Spatial bilinear interpolation",
    "Cropping + BSQ to BIP",
    "Clipping + PN",
    "Inference",
)


@dataclass(frozen=True)
class Step:
    name: str
    fn: Callable[[Any], Any]


@dataclass(frozen=True)
class StagePlan:
    """Consecutive step-index groups, one per stage."""

    groups: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        flat = [i for g in self.groups for i in g]
        if not self.groups or any(not g for g in self.groups) or flat != list(range(len(flat))):
            raise PipelineError(f"stage groups {self.groups} do not partition the steps in order")

    @property
    def stage_count(self) -> int:
        return len(self.groups)

    @property
    def steps(self) -> int:
        return sum(len(g) for g in self.groups)

    @classmethod
    def standard(cls, stage_count: int) -> "StagePlan":
        """Plans over the eight-step chain: A = load..interpolation, B = crop..PN, C = inference."""
        plans = {
            1: ((0, 1, 2, 3, 4, 5, 6, 7),),
            2: ((0, 1, 2, 3, 4, 5, 6), (7,)),
            3: ((0, 1, 2, 3, 4), (5, 6), (7,)),
        }
        if stage_count not in plans:
            raise PipelineError(f"stage count must be 1, 2 or 3, got {stage_count}")
        return cls(plans[stage_count])

    @classmethod
    def split(cls, steps: int, stage_count: int) -> "StagePlan":
        """One stage per step when counts match, else everything in one stage."""
        if stage_count == steps:
            return cls(tuple((i,) for i in range(steps)))
        if stage_count == 1:
            return cls((tuple(range(steps)),))
        raise PipelineError(f"cannot split {steps} steps into {stage_count} stages")


# ---------------------------------------------------------------------------
# two-slot handoff


FREE, WRITING, READY, READING = "free", "writing", "ready", "reading"


class _Cancelled(Exception):
    pass


class TwoSlotBuffer:
    """Double buffer between one producer and one consumer, in frame order.

    Each slot carries an owner tag; illegal transitions raise, which is how
    the tests check that a slot is never handed to two parties at once.
    """

    def __init__(self, name: str = "buffer"):
        self.name = name
        self.state = [FREE, FREE]
        self.owner = [None, None]
        self.items = [None, None]
        self._write = 0
        self._read = 0
        self._cv = threading.Condition()
        self.cancelled = False
        self.max_in_flight = 0

    def _transition(self, slot, old, new, who):
        if self.state[slot] != old:
            raise RuntimeError(f"{self.name} slot {slot}: {who} expected {old}, found {self.state[slot]}")
        self.state[slot] = new
        self.owner[slot] = who if new in (WRITING, READING) else None

    def acquire_write(self, who="producer") -> int:
        with self._cv:
            slot = self._write
            self._cv.wait_for(lambda: self.cancelled or self.state[slot] == FREE)
            if self.cancelled:
                raise _Cancelled
            self._transition(slot, FREE, WRITING, who)
            self._write ^= 1
            return slot

    def commit(self, slot: int, item, who="producer") -> None:
        with self._cv:
            if self.owner[slot] != who:
                raise RuntimeError(f"{self.name} slot {slot}: commit by {who}, owned by {self.owner[slot]}")
            self.items[slot] = item
            self._transition(slot, WRITING, READY, who)
            busy = sum(s != FREE for s in self.state)
            self.max_in_flight = max(self.max_in_flight, busy)
            self._cv.notify_all()

    def put(self, item, who="producer") -> None:
        self.commit(self.acquire_write(who), item, who)

    def acquire_read(self, who="consumer"):
        with self._cv:
            slot = self._read
            self._cv.wait_for(lambda: self.cancelled or self.state[slot] == READY)
            if self.cancelled:
                raise _Cancelled
            self._transition(slot, READY, READING, who)
            self._read ^= 1
            return slot, self.items[slot]

    def release(self, slot: int, who="consumer") -> None:
        with self._cv:
            if self.owner[slot] != who:
                raise RuntimeError(f"{self.name} slot {slot}: release by {who}, owned by {self.owner[slot]}")
            self.items[slot] = None
            self._transition(slot, READING, FREE, who)
            self._cv.notify_all()

    def cancel(self) -> None:
        with self._cv:
            self.cancelled = True
            self._cv.notify_all()


# ---------------------------------------------------------------------------
# profiling


@dataclass
class StageProfile:
    step_names: list[str]
    groups: list[list[int]]
    timings: np.ndarray  # (frames, steps) seconds, warm-up excluded
    completions: np.ndarray  # output completion times (monotonic seconds), warm-up excluded

    @property
    def n(self) -> int:
        return int(self.timings.shape[0])

    @property
    def step_mean_ms(self) -> np.ndarray:
        return 1e3 * self.timings.mean(axis=0)

    @property
    def step_std_ms(self) -> np.ndarray:
        return 1e3 * self.timings.std(axis=0)

    @property
    def stage_ms(self) -> list[float]:
        m = self.step_mean_ms
        return [float(sum(m[i] for i in g)) for g in self.groups]

    @property
    def longest_task_ms(self) -> float:
        return max(self.stage_ms)

    @property
    def throughput(self) -> float:
        """Frames per second from the spacing of consecutive outputs."""
        if len(self.completions) >= 2:
            span = self.completions[-1] - self.completions[0]
            return (len(self.completions) - 1) / span if span > 0 else float("inf")
        return 1e3 / self.longest_task_ms

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "stages": len(self.groups),
            "steps": [
                {"name": s, "stage": next(k for k, g in enumerate(self.groups) if i in g),
                 "mean_ms": float(self.step_mean_ms[i]), "std_ms": float(self.step_std_ms[i])}
                for i, s in enumerate(self.step_names)
            ],
            "stage_ms": self.stage_ms,
            "longest_task_ms": self.longest_task_ms,
            "throughput_fps": self.throughput,
        }


def profile_report(profile: StageProfile) -> str:
    if profile.n == 0:
        raise PipelineError("profile holds no measured frames")
    mean, std = profile.step_mean_ms, profile.step_std_ms
    width = max(len(s) for s in profile.step_names) + 2
    lines = [f"{'step':<{width}}{'stage':>6}{'mean ms':>11}{'std ms':>10}", "-" * (width + 27)]
    for k, g in enumerate(profile.groups):
        for i in g:
            lines.append(f"{profile.step_names[i]:<{width}}{k + 1:>6}{mean[i]:>11.3f}{std[i]:>10.3f}")
        lines.append(f"{'  stage ' + str(k + 1) + ' total':<{width}}{'':>6}{profile.stage_ms[k]:>11.3f}")
    lines.append("-" * (width + 27))
    lines.append(f"longest task {profile.longest_task_ms:.3f} ms   throughput {profile.throughput:.3f} fps   "
                 f"({profile.n} frames)")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# executor


def _run_stage(steps: Sequence[Step], indices, item, index, timings):
    for i in indices:
        t0 = time.perf_counter()
        try:
            item = steps[i].fn(item)
        except Exception as exc:
            raise PipelineError(f"{type(exc).__name__}: {exc}", index, steps[i].name) from exc
        timings[index][i] = time.perf_counter() - t0
    return item


def run_pipeline(frames: Sequence, steps: Sequence[Step], plan: StagePlan, n: int | None = None,
                 warmup: int = 3):
    """Process ``warmup + n`` frames (cycling ``frames``) through ``steps`` split by ``plan``.

    Returns ``(outputs, profile)`` with outputs of every processed frame in
    input order. Timings and throughput exclude the warm-up frames.
    """
    if plan.steps != len(steps):
        raise PipelineError(f"plan covers {plan.steps} steps, chain has {len(steps)}")
    frames = list(frames)
    n = len(frames) if n is None else n
    if n <= 0 or not frames:
        raise PipelineError("nothing to run: need at least one frame")
    total = warmup + n
    timings = [[0.0] * len(steps) for _ in range(total)]
    done = [0.0] * total
    outputs = [None] * total
    k = plan.stage_count
    buffers = [TwoSlotBuffer(f"boundary {i}") for i in range(k - 1)]
    errors: list[BaseException] = []
    lock = threading.Lock()

    def fail(exc):
        with lock:
            errors.append(exc)
        for b in buffers:
            b.cancel()

    def worker(s):
        who = f"stage {s}"
        inbox = buffers[s - 1] if s > 0 else None
        outbox = buffers[s] if s < k - 1 else None
        try:
            for index in range(total):
                if inbox is None:
                    item, slot = frames[index % len(frames)], None
                else:
                    slot, item = inbox.acquire_read(who)
                result = _run_stage(steps, plan.groups[s], item, index, timings)
                if outbox is not None:
                    # the finished input is released only once the result is handed on
                    outbox.put(result, who)
                else:
                    outputs[index] = result
                    done[index] = time.perf_counter()
                if slot is not None:
                    inbox.release(slot, who)
        except _Cancelled:
            pass
        except BaseException as exc:  # noqa: BLE001 - surfaced to the caller
            fail(exc)

    if k == 1:
        worker(0)
    else:
        threads = [threading.Thread(target=worker, args=(s,), name=f"stage-{s}", daemon=True) for s in range(k)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    if errors:
        exc = errors[0]
        if isinstance(exc, PipelineError):
            raise exc
        raise PipelineError(f"pipeline worker failed: {exc!r}") from exc
    profile = StageProfile(list(s.name for s in steps), [list(g) for g in plan.groups],
                           np.asarray(timings[warmup:]), np.asarray(done[warmup:]))
    return outputs, profile


# ---------------------------------------------------------------------------
# the standard chain


@dataclass
class ChainConfig:
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    stats: ChannelStats | None = None


def model_runner(g: NetGraph, stats: ChannelStats | None = None, quant_params=None):
    """Inference step: class probabilities (f32) for one BIP cube."""
    needs_norm = not any(n.kind is Kind.NORM for n in g)
    if needs_norm and stats is None:
        raise PipelineError("a graph without a normalization layer needs channel stats")

    def infer(cube):
        if needs_norm:
            cube = symmetric_normalize(cube, stats)
        x = cube.array()
        if quant_params is not None:
            from .quantization import quantized_forward
            return quantized_forward(g, quant_params, x).astype(np.float32)
        return forward(g, x).astype(np.float32)

    return infer


def standard_steps(calib: CalibrationPair, cfg: PreprocessConfig, stats: ChannelStats | None,
                   infer: Callable) -> list[Step]:
    geom = cfg.geometry

    def load(src):
        if isinstance(src, RawFrame):
            return RawFrame(src.data.copy(), src.bit_depth)
        return read_raw(Path(src), cfg.bit_depth)

    window = active_calibration(calib, calib.dark.shape, cfg)  # the correction step sees the cropped frame

    def correct(raw):
        return reflectance_correct(raw, window)

    fns = [
        load,
        lambda raw: crop_and_clip(raw, cfg),
        correct,
        lambda f: demosaic(f, geom),
        lambda c: align_bands(c, geom),
        lambda c: to_bip_cropped(c, cfg.depth),
        lambda c: clip_and_normalize(c, stats),
        infer,
    ]
    return [Step(n, f) for n, f in zip(STEP_NAMES, fns)]


def delay_steps(delays_s: Sequence[float]) -> list[Step]:
    """Identity steps that sleep for fixed durations (throughput-law checks)."""
    def make(d):
        def fn(item):
            time.sleep(d)
            return item
        return fn
    return [Step(f"delay {1e3 * d:g} ms", make(d)) for d in delays_s]


# ---------------------------------------------------------------------------
# comparison matrix


@dataclass
class BenchRow:
    variant: str
    stages: int
    throughput: float
    inference_ms: float
    longest_task_ms: float
    ratio: float = 1.0


def bench_matrix(variants: dict[str, Sequence[Step]], stage_counts: Sequence[int], frames,
                 n: int = 100, warmup: int = 3) -> list[BenchRow]:
    """Throughput of every (variant, plan) pair, normalized to the slowest one."""
    rows = []
    for name, steps in variants.items():
        for k in stage_counts:
            plan = StagePlan.standard(k) if len(steps) == len(STEP_NAMES) else StagePlan.split(len(steps), k)
            _, prof = run_pipeline(frames, steps, plan, n, warmup)
            rows.append(BenchRow(name, k, prof.throughput, float(prof.step_mean_ms[-1]), prof.longest_task_ms))
    slowest = min(r.throughput for r in rows)
    for r in rows:
        r.ratio = r.throughput / slowest
    return rows


def bench_table(rows: list[BenchRow]) -> str:
    lines = [f"{'variant':<20}{'stages':>7}{'fps':>10}{'infer ms':>11}{'longest ms':>12}{'ratio':>8}"]
    for r in rows:
        lines.append(f"{r.variant:<20}{r.stages:>7}{r.throughput:>10.3f}{r.inference_ms:>11.3f}"
                     f"{r.longest_task_ms:>12.3f}{r.ratio:>8.3f}")
    return "\n".join(lines)
