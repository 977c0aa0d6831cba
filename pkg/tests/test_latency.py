"""Latency families, binary-search profiling, segmented PWL fitting."""

import math
import random

import pytest

from ragflow.latency import (
    GroundTruthLatency,
    LatencyError,
    ProfilePoint,
    PwlFit,
    PwlLatencyEstimator,
    eval_ground_truth,
    fit_pwl,
    profile,
)


# -- ground truth --------------------------------------------------------


def test_constant_per_query():
    m = GroundTruthLatency(family="constant_per_query", c=2.0)
    assert eval_ground_truth(m, 5, 1) == 10.0


def test_amortized_flat():
    # per-item time 10 at b=1, falls linearly with batch size
    m = GroundTruthLatency(family="amortized_batch", c0=10.0, c1=0.0)
    assert eval_ground_truth(m, 70, 1) == 10.0


def test_sublinear():
    m = GroundTruthLatency(family="sublinear", c=1.0, alpha=0.5)
    assert eval_ground_truth(m, 16, 1) == 4.0


def test_saturating_flat_throughput_past_knee():
    m = GroundTruthLatency(family="saturating", c0=1.0, c1=0.5, b_knee=8)
    knee_t = eval_ground_truth(m, 8, 1)
    # throughput constant past the knee
    for b in (9, 16, 32):
        t = eval_ground_truth(m, b, 1)
        assert abs(b / t - 8 / knee_t) < 1e-12


def test_replica_split():
    m = GroundTruthLatency(family="constant_per_query", c=2.0)
    # per-replica share ceil(8/2)=4
    assert eval_ground_truth(m, 8, 2) == 8.0


def test_noise_lognormal_mean_one():
    m = GroundTruthLatency(family="amortized_batch", c0=5.0, c1=0.0, noise_rel_std=0.3)
    rng = random.Random(0)
    draws = [eval_ground_truth(m, 1, 1, rng) for _ in range(20000)]
    assert all(d > 0 for d in draws)
    assert abs(sum(draws) / len(draws) - 5.0) < 0.1


def test_bad_family_rejected():
    with pytest.raises(LatencyError):
        GroundTruthLatency(family="quadratic")


def test_bad_batch_rejected():
    m = GroundTruthLatency(family="constant_per_query", c=1.0)
    with pytest.raises(LatencyError):
        eval_ground_truth(m, 0, 1)


# -- profiling -----------------------------------------------------------


def probe_bound(m):
    return 2 * math.ceil(math.log2(m)) + 2 if m > 1 else 1


def test_profile_m1_single_point():
    pts = profile(lambda b: 1.0 * b, 1)
    assert len(pts) == 1
    assert pts[0].batch == 1


def test_profile_flat_throughput_collapses_low():
    m = GroundTruthLatency(family="constant_per_query", c=2.0)
    pts = profile(m.mean_batch_time, 64)
    assert len(pts) <= 14
    assert pts[0].batch == 1
    assert pts[-1].batch == 64


def test_profile_amortized_concentrates_high():
    m = GroundTruthLatency(family="amortized_batch", c0=10.0, c1=0.01)
    pts = profile(m.mean_batch_time, 64)
    batches = [p.batch for p in pts]
    assert 64 in batches
    # rising throughput: most probes in the upper half of [1, 64]
    interior = [b for b in batches if b not in (1, 64)]
    assert sum(b > 32 for b in interior) >= len(interior) / 2


def test_profile_probe_bound():
    fams = [
        GroundTruthLatency(family="constant_per_query", c=1.0),
        GroundTruthLatency(family="amortized_batch", c0=10.0, c1=0.1),
        GroundTruthLatency(family="sublinear", c=1.0, alpha=0.5),
        GroundTruthLatency(family="saturating", c0=1.0, c1=0.5, b_knee=8),
    ]
    for m in (2, 4, 8, 16, 64, 128, 1024, 2 ** 20):
        for fam in fams:
            pts = profile(fam.mean_batch_time, m)
            assert len(pts) <= probe_bound(m), (m, fam.family, len(pts))


def test_profile_sorted_and_failure_propagates():
    m = GroundTruthLatency(family="sublinear", c=1.0, alpha=0.5)
    pts = profile(m.mean_batch_time, 32)
    assert [p.batch for p in pts] == sorted(p.batch for p in pts)

    def broken(b):
        if b > 16:
            raise RuntimeError("boom")
        return float(b)

    with pytest.raises(LatencyError):
        profile(broken, 32)


# -- fitting -------------------------------------------------------------


def test_fit_exact_line():
    pts = [ProfilePoint(b, 1, 3.0 + 2.0 * b) for b in (1, 4, 9, 16, 33)]
    fit = fit_pwl(pts, 4)
    assert len(fit.slopes) == 1
    assert abs(fit.slopes[0] - 2.0) < 1e-9
    assert abs(fit.intercepts[0] - 3.0) < 1e-9
    for p in pts:
        assert abs(fit.predict(p.batch, 1) - p.mean_batch_time) < 1e-9


def test_fit_two_regime_knee():
    def two(b):
        return b if b <= 8 else 8 + 4 * (b - 8)

    grid = (1, 2, 4, 6, 8, 10, 12, 16)
    pts = [ProfilePoint(b, 1, float(two(b))) for b in grid]
    fit = fit_pwl(pts, 4, penalty=0.01)
    assert len(fit.slopes) >= 2
    # breakpoint within one grid step of the true knee at b=8
    interior = fit.breakpoints[1:]
    assert any(6 <= bp <= 10 for bp in interior)


def test_fit_two_points():
    pts = [ProfilePoint(1, 1, 2.0), ProfilePoint(8, 1, 9.0)]
    fit = fit_pwl(pts, 4)
    assert len(fit.slopes) == 1
    assert abs(fit.predict(1, 1) - 2.0) < 1e-9
    assert abs(fit.predict(8, 1) - 9.0) < 1e-9


def test_fit_fewer_than_two_points_rejected():
    with pytest.raises(LatencyError):
        fit_pwl([ProfilePoint(1, 1, 2.0)], 4)


def test_fit_infinite_penalty_is_ols_line():
    rng = random.Random(1)
    bs = [1, 3, 7, 12, 20, 32]
    ts = [0.5 * b + 2 + rng.uniform(-0.1, 0.1) for b in bs]
    pts = [ProfilePoint(b, 1, t) for b, t in zip(bs, ts)]
    fit = fit_pwl(pts, 4, penalty=float("inf"))
    assert len(fit.slopes) == 1
    # matches plain least squares
    n = len(bs)
    mx = sum(bs) / n
    my = sum(ts) / n
    slope = sum((b - mx) * (t - my) for b, t in zip(bs, ts)) / sum((b - mx) ** 2 for b in bs)
    assert abs(fit.slopes[0] - slope) < 1e-9


def test_fit_amortized_flat_recovers_constant():
    m = GroundTruthLatency(family="amortized_batch", c0=10.0, c1=0.0)
    pts = profile(m.mean_batch_time, 64)
    fit = fit_pwl(pts, 4)
    for b in (1, 7, 33, 64):
        assert abs(fit.predict(b, 1) - 10.0) < 1e-6


def test_fit_throughput_within_5pct_at_profiled_points():
    fams = [
        GroundTruthLatency(family="constant_per_query", c=2.0),
        GroundTruthLatency(family="amortized_batch", c0=10.0, c1=0.1),
        GroundTruthLatency(family="sublinear", c=1.0, alpha=0.5),
        GroundTruthLatency(family="saturating", c0=1.0, c1=0.5, b_knee=8),
    ]
    for fam in fams:
        pts = profile(fam.mean_batch_time, 64)
        fit = fit_pwl(pts, 4)
        for p in pts:
            got = p.batch / fit.predict(p.batch, 1)
            want = p.batch / fam.mean_batch_time(p.batch)
            assert abs(got - want) / want <= 0.05, (fam.family, p.batch)


# -- prediction ----------------------------------------------------------


def one_segment_fit(slope, intercept, dmax):
    return PwlFit(breakpoints=[1.0], slopes=[slope], intercepts=[intercept],
                  domain_max=dmax)


def test_predict_line():
    fit = one_segment_fit(2.0, 3.0, 64)
    assert fit.predict(10, 1) == 23.0


def test_predict_replica_split():
    fit = one_segment_fit(2.0, 3.0, 64)
    # even split: b=5 per replica
    assert fit.predict(10, 2) == 13.0


def test_predict_domain_errors():
    fit = one_segment_fit(2.0, 3.0, 16)
    with pytest.raises(LatencyError):
        fit.predict(17, 1)
    with pytest.raises(LatencyError):
        fit.predict(0, 1)
    with pytest.raises(LatencyError):
        fit.predict(4, 0)


def test_predict_monotone_in_b_and_a():
    fams = [
        GroundTruthLatency(family="constant_per_query", c=2.0),
        GroundTruthLatency(family="amortized_batch", c0=10.0, c1=0.1),
        GroundTruthLatency(family="sublinear", c=1.0, alpha=0.5),
    ]
    for fam in fams:
        pts = profile(fam.mean_batch_time, 64)
        fit = fit_pwl(pts, 4)
        prev = 0.0
        for b in range(1, 65):
            t = fit.predict(b, 1)
            assert t > 0
            assert t >= prev - 1e-9
            prev = t
        for b in (8, 32, 64):
            for a in (1, 2, 4):
                assert fit.predict(b, a) >= fit.predict(b, a * 2) - 1e-9


def test_fit_continuity_at_breakpoints():
    def two(b):
        return b if b <= 8 else 8 + 4 * (b - 8)

    pts = [ProfilePoint(b, 1, float(two(b))) for b in (1, 2, 4, 6, 8, 10, 12, 16)]
    fit = fit_pwl(pts, 4, penalty=0.01)
    for j, bp in enumerate(fit.breakpoints[1:], start=1):
        left = fit.intercepts[j - 1] + fit.slopes[j - 1] * bp
        right = fit.intercepts[j] + fit.slopes[j] * bp
        assert abs(left - right) <= 1e-6 * max(abs(left), 1.0)


def test_fit_round_trip_dict():
    fit = fit_pwl([ProfilePoint(b, 1, 3.0 + 2.0 * b) for b in (1, 8, 16)], 4)
    again = PwlFit.from_dict(fit.to_dict())
    for b in (1, 5, 16):
        assert again.predict(b, 1) == fit.predict(b, 1)


def test_estimator_wrapper():
    m = GroundTruthLatency(family="amortized_batch", c0=10.0, c1=0.1)
    est = PwlLatencyEstimator(max_segments=4)
    with pytest.raises(LatencyError):
        est.predict(4)
    est.fit(m.mean_batch_time, 64)
    assert abs(est.predict(32) - m.mean_batch_time(32)) / m.mean_batch_time(32) < 0.05
    params = est.get_params()
    assert params["max_segments"] == 4
    assert params["improvement_threshold"] == 0.05
