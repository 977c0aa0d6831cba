"""Synthetic batch-latency models, profiling, and piecewise-linear fitting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class LatencyError(ValueError):
    pass


# -- ground truth --------------------------------------------------------


@dataclass(frozen=True)
class GroundTruthLatency:
    """Closed-form batch-time function used by the simulator in place of a real component.

    family one of:
      constant_per_query: time = c * b           (per-query cost fixed)
      amortized_batch:    time = c0 + c1 * b     (fixed setup amortized over the batch)
      sublinear:          time = c * b ** alpha
      saturating:         time = c0 + c1 * b for b <= b_knee, then throughput flat
    """

    family: str
    c: float = 1.0
    c0: float = 1.0
    c1: float = 0.0
    alpha: float = 0.5
    b_knee: int = 8
    efficiency: float = 1.0  # replica efficiency eta in (0, 1]
    noise_rel_std: float = 0.0

    def __post_init__(self):
        if self.family not in ("constant_per_query", "amortized_batch", "sublinear", "saturating"):
            raise LatencyError("unknown latency family %r" % self.family)
        if not 0.0 < self.efficiency <= 1.0:
            raise LatencyError("efficiency must be in (0, 1]")
        if self.noise_rel_std < 0:
            raise LatencyError("noise std must be >= 0")
        if self.family == "sublinear" and not 0.0 < self.alpha < 1.0:
            raise LatencyError("alpha must be in (0, 1)")

    def mean_batch_time(self, b: int) -> float:
        if b < 1:
            raise LatencyError("batch size must be >= 1")
        if self.family == "constant_per_query":
            return self.c * b
        if self.family == "amortized_batch":
            return self.c0 + self.c1 * b
        if self.family == "sublinear":
            return self.c * b ** self.alpha
        # saturating: linear up to the knee, then time grows proportionally to b
        if b <= self.b_knee:
            return self.c0 + self.c1 * b
        knee_t = self.c0 + self.c1 * self.b_knee
        return knee_t * b / self.b_knee

    def to_dict(self):
        d = {"family": self.family}
        for k in ("c", "c0", "c1", "alpha", "b_knee", "efficiency", "noise_rel_std"):
            d[k] = getattr(self, k)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in d if k in cls.__dataclass_fields__})


def eval_ground_truth(model: GroundTruthLatency, b: int, a: int, rng=None) -> float:
    """Batch time for batch b on a replicas; deterministic mean when rng is None."""
    if b < 1 or a < 1:
        raise LatencyError("b and a must be >= 1")
    per_replica = math.ceil(b / a)
    t = model.mean_batch_time(per_replica)
    if a > 1:
        t /= model.efficiency
    if rng is not None and model.noise_rel_std > 0:
        # lognormal multiplier with mean 1 and relative std sigma
        s2 = math.log(1.0 + model.noise_rel_std ** 2)
        t *= math.exp(rng.gauss(-0.5 * s2, math.sqrt(s2)))
    return t


# -- profiling -----------------------------------------------------------


@dataclass(frozen=True)
class ProfilePoint:
    batch: int
    replicas: int
    mean_batch_time: float
    samples: int = 1


def profile(model, m: int, improvement_threshold: float = 0.05, samples: int = 1, rng=None):
    """Probe batch sizes via binary search on throughput improvement.

    `model` is a callable batch -> time. Always probes b=1 and b=m; at the
    midpoint of the active interval, recurses into the lower half when the
    throughput gain over the interval's lower end falls below the threshold,
    into the upper half otherwise.
    """
    if m < 1:
        raise LatencyError("max batch must be >= 1")
    if not 0.0 < improvement_threshold < 1.0:
        raise LatencyError("improvement threshold must be in (0, 1)")

    cache = {}

    def measure(b):
        if b not in cache:
            vals = []
            for _ in range(samples):
                try:
                    vals.append(float(model(b)) if rng is None else float(model(b, rng)))
                except Exception as exc:
                    raise LatencyError("model evaluation failed at b=%d: %s" % (b, exc)) from exc
            cache[b] = sum(vals) / len(vals)
        return cache[b]

    measure(1)
    if m > 1:
        measure(m)
    lo, hi = 1, m
    while hi - lo > 1:
        mid = (lo + hi) // 2
        t_mid = measure(mid)
        thr_mid = mid / t_mid
        thr_lo = lo / measure(lo)
        if (thr_mid - thr_lo) / thr_lo < improvement_threshold:
            hi = mid
        else:
            lo = mid
    return [
        ProfilePoint(batch=b, replicas=1, mean_batch_time=t, samples=samples)
        for b, t in sorted(cache.items())
    ]


# -- piecewise-linear fit ------------------------------------------------


@dataclass
class PwlFit:
    """Continuous piecewise-linear batch-time model over [1, domain_max].

    breakpoints holds segment boundaries b_0 < ... < b_S (b_0 = smallest
    profiled batch, b_S = domain max); segment j covers [b_j, b_{j+1}] with
    time = intercepts[j] + slopes[j] * b.
    """

    breakpoints: list
    slopes: list
    intercepts: list
    domain_max: int

    MIN_TIME = 1e-12

    def segment_index(self, b):
        for j in range(len(self.slopes) - 1, -1, -1):
            if b >= self.breakpoints[j]:
                return j
        return 0

    def eval_batch(self, b) -> float:
        j = self.segment_index(b)
        return max(self.intercepts[j] + self.slopes[j] * b, self.MIN_TIME)

    def predict(self, b: int, a: int = 1) -> float:
        """Batch time for b items spread evenly over a replicas."""
        if not 1 <= b <= self.domain_max:
            raise LatencyError("batch %d outside fit domain [1, %d]" % (b, self.domain_max))
        if a < 1:
            raise LatencyError("replicas must be >= 1")
        return self.eval_batch(math.ceil(b / a))

    def throughput(self, b: int, a: int = 1) -> float:
        return b / self.predict(b, a)

    def to_dict(self):
        return {
            "breakpoints": list(self.breakpoints),
            "segments": [
                {"slope": s, "intercept": c} for s, c in zip(self.slopes, self.intercepts)
            ],
            "domain_max": self.domain_max,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            breakpoints=list(d["breakpoints"]),
            slopes=[s["slope"] for s in d["segments"]],
            intercepts=[s["intercept"] for s in d["segments"]],
            domain_max=int(d["domain_max"]),
        )


def _hinge_design(bs, knots):
    """Design matrix for a continuous linear spline with interior knots."""
    cols = [np.ones_like(bs), bs]
    for k in knots:
        cols.append(np.maximum(bs - k, 0.0))
    return np.column_stack(cols)


def _spline_sse(bs, ts, knots):
    X = _hinge_design(bs, knots)
    coef, *_ = np.linalg.lstsq(X, ts, rcond=None)
    resid = ts - X @ coef
    return float(resid @ resid), coef


def _segment_sse(bs, ts, i, j):
    # plain least-squares line over points i..j inclusive
    x = bs[i : j + 1]
    y = ts[i : j + 1]
    if len(x) == 1:
        return 0.0
    A = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    r = y - A @ coef
    return float(r @ r)


def fit_pwl(points, max_segments: int = 4, penalty: float | None = None) -> PwlFit:
    """Segmented least squares with breakpoints chosen by dynamic programming.

    The DP scores candidate segmentations with independent per-segment lines;
    the selected breakpoints are then refit as a continuous linear spline.
    Negative slopes are clamped to zero afterwards (batch time never shrinks
    as the batch grows).
    """
    pts = sorted({p.batch: p for p in points}.values(), key=lambda p: p.batch)
    if len(pts) < 2:
        raise LatencyError("need at least 2 profile points with distinct batch sizes")
    bs = np.array([p.batch for p in pts], dtype=float)
    ts = np.array([p.mean_batch_time for p in pts], dtype=float)
    n = len(bs)

    if penalty is None:
        # default: twice a rough residual-variance estimate from a single line
        sse1 = _segment_sse(bs, ts, 0, n - 1)
        penalty = 2.0 * sse1 / max(n - 2, 1)

    max_segments = max(1, min(max_segments, n - 1))

    # DP over prefix splits: cost[s][j] = best SSE using s segments for points 0..j
    seg_cost = {}
    for i in range(n):
        for j in range(i + 1, n):
            seg_cost[(i, j)] = _segment_sse(bs, ts, i, j)
    INF = float("inf")
    cost = [[INF] * n for _ in range(max_segments + 1)]
    back = [[-1] * n for _ in range(max_segments + 1)]
    for j in range(1, n):
        cost[1][j] = seg_cost[(0, j)]
    for s in range(2, max_segments + 1):
        for j in range(s, n):
            for i in range(s - 1, j):
                c = cost[s - 1][i] + seg_cost[(i, j)]
                if c < cost[s][j] - 1e-15:
                    cost[s][j] = c
                    back[s][j] = i

    best_s, best_total = 1, cost[1][n - 1] + penalty
    if math.isfinite(penalty):
        for s in range(2, max_segments + 1):
            total = cost[s][n - 1] + penalty * s
            if total < best_total - 1e-15:
                best_total, best_s = total, s

    # recover interior breakpoints (at profiled batch values)
    knots = []
    s, j = best_s, n - 1
    while s > 1:
        i = back[s][j]
        knots.append(bs[i])
        s, j = s - 1, i
    knots = sorted(knots)

    _, coef = _spline_sse(bs, ts, knots)

    # expand spline coefficients into per-segment slope/intercept
    boundaries = [bs[0]] + knots + [bs[-1]]
    slopes, intercepts = [], []
    slope = coef[1]
    intercept = coef[0]
    slopes.append(slope)
    intercepts.append(intercept)
    for idx, k in enumerate(knots):
        slope = slope + coef[2 + idx]
        intercept = intercept - coef[2 + idx] * k
        slopes.append(slope)
        intercepts.append(intercept)

    # clamp negative slopes to zero, preserving continuity left to right
    for j in range(len(slopes)):
        if slopes[j] < 0:
            left_b = boundaries[j]
            val = intercepts[j] + slopes[j] * left_b if j > 0 else intercepts[0] + slopes[0] * left_b
            slopes[j] = 0.0
            intercepts[j] = val
        if j + 1 < len(slopes):
            # re-anchor the next segment at the (possibly adjusted) boundary value
            b_next = boundaries[j + 1]
            val = intercepts[j] + slopes[j] * b_next
            intercepts[j + 1] = val - slopes[j + 1] * b_next

    return PwlFit(
        breakpoints=[float(b) for b in boundaries[:-1]],
        slopes=[float(s) for s in slopes],
        intercepts=[float(c) for c in intercepts],
        domain_max=int(bs[-1]),
    )


class PwlLatencyEstimator:
    """fit/predict wrapper tying profiling and segmented fitting together."""

    def __init__(self, max_segments=4, penalty=None, improvement_threshold=0.05):
        self.max_segments = max_segments
        self.penalty = penalty
        self.improvement_threshold = improvement_threshold
        self.fit_: PwlFit | None = None
        self.points_: list | None = None

    def get_params(self):
        return {
            "max_segments": self.max_segments,
            "penalty": self.penalty,
            "improvement_threshold": self.improvement_threshold,
        }

    def fit(self, model, m):
        self.points_ = profile(model, m, self.improvement_threshold)
        self.fit_ = fit_pwl(self.points_, self.max_segments, self.penalty)
        return self

    def predict(self, b, a=1):
        if self.fit_ is None:
            raise LatencyError("estimator is not fitted")
        return self.fit_.predict(b, a)
