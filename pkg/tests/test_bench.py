import numpy as np
import pytest

from rootconv.bench import BenchResult, bench_gemm


def test_reports_requested_repetitions_and_same_checksum():
    res = bench_gemm(dims=(4, 5, 6), batch=8, reps=5, inner=2)
    assert [r.strategy for r in res] == ["looped", "batched"]
    assert all(r.reps == 5 and all(s > 0 for s in r.samples) for r in res)
    assert res[0].checksum == res[1].checksum
    assert res[0].macs == 8 * 4 * 5 * 6
    row = res[1].row()
    assert set(row) >= {"m", "k", "n", "batch", "strategy", "reps", "median_s", "macs_per_s", "checksum"}


def test_batched_throughput_not_below_looped():
    looped, batched = bench_gemm(dims=(16, 16, 16), batch=64, reps=7)
    assert batched.throughput >= looped.throughput


def test_validation():
    with pytest.raises(ValueError):
        bench_gemm(reps=4)
    with pytest.raises(ValueError):
        bench_gemm(dims=(4, 4))
    with pytest.raises(ValueError):
        bench_gemm(strategies=("threaded",))


def test_result_statistics():
    r = BenchResult((2, 2, 2), 10, "looped", [3.0, 1.0, 2.0, 5.0, 4.0])
    assert r.median == 3.0 and r.min == 1.0
    assert r.throughput == pytest.approx(80 / 3.0)
    assert np.isinf(BenchResult((1, 1, 1), 1, "x", [0.0] * 5).throughput)
