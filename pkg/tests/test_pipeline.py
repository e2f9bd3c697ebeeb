import random
import threading
import time

import numpy as np
import pytest

from hsicomp.data import desk_spec, generate, make_calibration
from hsicomp.errors import PipelineError
from hsicomp.netgraph import build_unet, forward
from hsicomp.pipeline import (
    STEP_NAMES,
    StagePlan,
    StageProfile,
    Step,
    TwoSlotBuffer,
    bench_matrix,
    bench_table,
    delay_steps,
    model_runner,
    profile_report,
    run_pipeline,
    standard_steps,
)
from hsicomp.preprocess import compute_clip_thresholds, run_preprocess, symmetric_normalize


@pytest.fixture(scope="module")
def chain():
    spec = desk_spec()
    calib = make_calibration(spec)
    samples = generate(spec, 5, 20, calib)
    cfg = spec.preprocess_config()
    stats = compute_clip_thresholds([run_preprocess(s.raw, calib, None, cfg) for s in samples[:5]])
    g = build_unet(3, 4, 25, 5, seed=0, input_hw=spec.output_hw())
    steps = standard_steps(calib, cfg, stats, model_runner(g, stats))
    return [s.raw for s in samples], steps, (g, calib, cfg, stats)


def test_standard_plans():
    assert StagePlan.standard(3).groups == ((0, 1, 2, 3, 4), (5, 6), (7,))
    assert StagePlan.standard(2).groups[-1] == (7,)
    assert StagePlan.standard(1).steps == len(STEP_NAMES)
    with pytest.raises(PipelineError):
        StagePlan.standard(4)
    with pytest.raises(PipelineError):
        StagePlan(((0, 2), (1,)))
    with pytest.raises(PipelineError):
        StagePlan.split(3, 2)


def test_outputs_identical_across_plans(chain):
    frames, steps, (g, calib, cfg, stats) = chain
    results = {}
    for k in (1, 2, 3):
        out, prof = run_pipeline(frames, steps, StagePlan.standard(k), n=20, warmup=0)
        assert len(out) == 20 and prof.n == 20
        results[k] = out
    for k in (2, 3):
        assert all(a.tobytes() == b.tobytes() for a, b in zip(results[1], results[k]))
    cube = symmetric_normalize(run_preprocess(frames[7], calib, stats, cfg), stats)
    assert results[3][7].tobytes() == forward(g, cube.array()).astype(np.float32).tobytes()


def test_throughput_law():
    steps = delay_steps([0.060, 0.040, 0.030])
    _, three = run_pipeline([0], steps, StagePlan.split(3, 3), n=20, warmup=3)
    _, one = run_pipeline([0], steps, StagePlan.split(3, 1), n=10, warmup=1)
    assert three.throughput * 0.060 == pytest.approx(1.0, rel=0.10)
    assert one.throughput * 0.130 == pytest.approx(1.0, rel=0.10)
    assert three.throughput / one.throughput >= 1.2
    assert three.longest_task_ms == pytest.approx(60, rel=0.2)


@pytest.mark.parametrize("k", [1, 3])
def test_step_failure_names_frame_and_step(k):
    def boom(item):
        if item == 5:
            raise ValueError("bad frame")
        return item

    steps = [Step("first", lambda x: x), Step("second", boom), Step("third", lambda x: x)]
    with pytest.raises(PipelineError) as info:
        run_pipeline(list(range(10)), steps, StagePlan.split(3, k), warmup=0)
    assert info.value.frame_index == 5 and info.value.step == "second"
    assert "bad frame" in str(info.value)


def test_order_and_slot_ownership_under_jitter():
    rng = random.Random(0)
    buffers = []

    def jitter(item):
        time.sleep(rng.uniform(0, 0.003))
        return item

    orig = TwoSlotBuffer.__init__

    def spy(self, *a, **kw):
        orig(self, *a, **kw)
        buffers.append(self)

    TwoSlotBuffer.__init__ = spy
    try:
        steps = [Step(f"s{i}", jitter) for i in range(3)]
        out, _ = run_pipeline(list(range(40)), steps, StagePlan.split(3, 3), warmup=0)
    finally:
        TwoSlotBuffer.__init__ = orig
    assert out == list(range(40))
    assert len(buffers) == 2 and all(1 <= b.max_in_flight <= 2 for b in buffers)


def test_buffer_rejects_foreign_owner():
    b = TwoSlotBuffer()
    slot = b.acquire_write("p")
    with pytest.raises(RuntimeError):
        b.commit(slot, 1, "intruder")
    b.commit(slot, 1, "p")
    s, item = b.acquire_read("c")
    assert (s, item) == (slot, 1)
    with pytest.raises(RuntimeError):
        b.release(s, "p")
    b.release(s, "c")
    with pytest.raises(RuntimeError):
        b.release(s, "c")


def test_producer_stalls_when_both_slots_taken():
    b = TwoSlotBuffer()
    b.put(1)
    b.put(2)
    third = threading.Event()

    def produce():
        b.put(3)
        third.set()

    t = threading.Thread(target=produce, daemon=True)
    t.start()
    assert not third.wait(0.05)
    slot, item = b.acquire_read()
    assert item == 1
    b.release(slot)
    assert third.wait(1.0)
    t.join()


def test_profile_report_and_dict():
    steps = [Step("a", lambda x: x), Step("b", lambda x: x)]
    _, prof = run_pipeline([1, 2], steps, StagePlan.split(2, 2), n=4, warmup=1)
    text = profile_report(prof)
    assert "stage 2 total" in text and "throughput" in text
    d = prof.to_dict()
    assert d["n"] == 4 and [s["stage"] for s in d["steps"]] == [0, 1]
    empty = StageProfile(["a"], [[0]], np.zeros((0, 1)), np.zeros(0))
    with pytest.raises(PipelineError):
        profile_report(empty)
    with pytest.raises(PipelineError):
        run_pipeline([], steps, StagePlan.split(2, 2))
    with pytest.raises(PipelineError):
        run_pipeline([1], steps, StagePlan.split(3, 1))


def test_model_runner_requires_stats_without_norm_layer():
    with pytest.raises(PipelineError):
        model_runner(build_unet(1, 2, 25, 5))


def test_bench_matrix_ratios():
    variants = {"slow": delay_steps([0.004, 0.004]), "fast": delay_steps([0.001, 0.001])}
    rows = bench_matrix(variants, [1, 2], [0], n=5, warmup=1)
    assert len(rows) == 4 and min(r.ratio for r in rows) == 1.0
    best = max(rows, key=lambda r: r.throughput)
    assert best.variant == "fast"
    assert "ratio" in bench_table(rows)
