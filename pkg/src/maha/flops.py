"""Analytical cost model for standard vs multiscale attention, plus a sweep harness.

Two count modes are reported everywhere:

``score_entries``
    the number of attention-matrix cells, ``sum_l n_l**2`` (standard
    attention: ``n**2``);
``full_macs``
    multiply-accumulates for projections, scores, attention-value products,
    downsampling, upsampling and the aggregation solver.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from ._io import write_csv
from .errors import ConfigError

SCORE_ENTRIES = "score_entries"
FULL_MACS = "full_macs"
METRICS = (SCORE_ENTRIES, FULL_MACS)
PROPORTIONAL = "proportional"
ABSOLUTE = "absolute"
POLICIES = (PROPORTIONAL, ABSOLUTE)
# scale lengths used for 512-token inputs in the reference configuration
ABSOLUTE_LENGTHS = (256, 128, 64, 32)

CSV_HEADER = ("n", "policy", "metric", "baseline", "maha", "ratio", "reduction_pct")


@dataclass
class FlopsReport:
    n: int
    lengths: list
    metric: str
    per_scale: list = field(default_factory=list)  # n_l**2 per attention scale
    score_entries: int = 0
    macs: int = 0
    baseline_score_entries: int = 0
    baseline_macs: int = 0

    @property
    def maha(self):
        return self.score_entries if self.metric == SCORE_ENTRIES else self.macs

    @property
    def baseline(self):
        return self.baseline_score_entries if self.metric == SCORE_ENTRIES else self.baseline_macs

    @property
    def ratio(self):
        return self.maha / self.baseline

    @property
    def reduction(self):
        return 1.0 - self.ratio


def mha_score_entries(n):
    if n < 1:
        raise ConfigError(f"sequence length must be >= 1, got {n}")
    return n * n


def mha_macs(n, d, d_k=None, d_v=None):
    d_k = d if d_k is None else d_k
    d_v = d if d_v is None else d_v
    return 2 * n * d * d_k + n * d * d_v + n * n * d_k + n * n * d_v


def maha_cost(lengths, n=None, d=64, d_k=None, d_v=None, metric=SCORE_ENTRIES, k=3,
              kind="strided_conv", iters=50, include_base=False):
    """Cost of one multiscale attention layer over attention scales ``lengths``.

    ``lengths`` may also be a ``ScaleSchedule``.
    ``n`` defaults to the largest given length (a single-scale hierarchy then
    costs exactly as much as standard attention).  ``include_base`` adds the
    full-resolution scale as an attention scale.
    """
    if hasattr(lengths, "lengths"):  # a ScaleSchedule
        n = lengths.n if n is None else n
        include_base = include_base or lengths.include_base_scale
        lengths = lengths.lengths
    lengths = [int(x) for x in lengths]
    if not lengths:
        raise ConfigError("need at least one scale length")
    if metric not in METRICS:
        raise ConfigError(f"unknown metric {metric!r}")
    n = max(lengths) if n is None else int(n)
    if any(x < 1 or x > n for x in lengths):
        raise ConfigError(f"scale lengths {lengths} must lie in 1..{n}")
    d_k = d if d_k is None else d_k
    d_v = d if d_v is None else d_v

    down_lengths = list(lengths)
    attn_lengths = ([n] if include_base and n not in lengths else []) + lengths
    per_scale = [x * x for x in attn_lengths]

    macs = n * d * d_v  # shared value projection
    for n_l in attn_lengths:
        macs += 2 * n_l * d * d_k + n_l * n_l * d_k + n_l * n_l * d_v
    prev = n
    for n_l in sorted(down_lengths, reverse=True):
        if n_l == n:
            continue
        if kind == "strided_conv":
            macs += n_l * k * d * d + n_l * k * d_v * d_v  # input and value pyramids
        else:
            macs += prev * d + prev * d_v
        prev = n_l
    macs += len(attn_lengths) * n * d_v  # nearest-neighbour upsampling
    macs += iters * len(attn_lengths) * n * d  # aggregation solver

    return FlopsReport(
        n=n,
        lengths=attn_lengths,
        metric=metric,
        per_scale=per_scale,
        score_entries=sum(per_scale),
        macs=macs,
        baseline_score_entries=mha_score_entries(n),
        baseline_macs=mha_macs(n, d, d_k, d_v),
    )


def asymptotic_bound(n, r):
    """Geometric-series bound ``n**2 / (r**2 - 1)`` on the summed scale costs."""
    if r < 2:
        raise ConfigError(f"compression ratio must be >= 2, got {r}")
    return n * n / (r * r - 1)


def policy_lengths(n, policy, r=2, L=4, absolute=ABSOLUTE_LENGTHS):
    """Scale lengths for ``n`` under a policy; ``[n]`` when nothing fits (degenerate)."""
    if policy == PROPORTIONAL:
        out, cur = [], n
        for _ in range(L):
            cur //= r
            if cur < 1:
                break
            out.append(cur)
    elif policy == ABSOLUTE:
        out = [x for x in absolute if x < n]
    else:
        raise ConfigError(f"unknown scale policy {policy!r}")
    return out or [n]


@dataclass
class BenchRow:
    n: int
    policy: str
    metric: str
    baseline: int
    maha: int
    degenerate: bool = False

    @property
    def ratio(self):
        return self.maha / self.baseline

    @property
    def reduction_pct(self):
        return 100.0 * (1.0 - self.ratio)

    def as_csv_row(self):
        return (self.n, self.policy, self.metric, self.baseline, self.maha, self.ratio, self.reduction_pct)


def bench_sweep(lengths, d=64, d_k=None, r=2, L=4, policies=POLICIES, metrics=METRICS, k=3,
                kind="strided_conv", iters=50, include_base=False, absolute=ABSOLUTE_LENGTHS):
    """One row per (metric, policy, n), metrics outermost so each metric forms a block."""
    lengths = [int(x) for x in lengths]
    if not lengths:
        raise ConfigError("bench needs at least one sequence length")
    if any(x < 1 for x in lengths) or lengths != sorted(lengths):
        raise ConfigError(f"bench lengths must be positive and ascending, got {lengths}")
    rows = []
    for metric in metrics:
        for policy in policies:
            for n in lengths:
                scales = policy_lengths(n, policy, r, L, absolute)
                rep = maha_cost(scales, n=n, d=d, d_k=d_k, metric=metric, k=k, kind=kind, iters=iters,
                                include_base=include_base)
                degenerate = rep.ratio >= 1.0
                rows.append(BenchRow(n, policy, metric, rep.baseline, rep.maha, degenerate))
    return rows


def write_bench_csv(path, rows):
    return write_csv(path, CSV_HEADER, [row.as_csv_row() for row in rows])


def loglog_slope(ns, values):
    """Least-squares slope of ``log(values)`` against ``log(ns)``."""
    x, y = np.log(np.asarray(ns, dtype=float)), np.log(np.asarray(values, dtype=float))
    return float(np.polyfit(x, y, 1)[0])


def timing_sweep(lengths, d=32, d_k=8, r=2, L=4, policy=PROPORTIONAL, repeats=3, seed=0,
                 absolute=ABSOLUTE_LENGTHS):
    """Median wall-clock ``(n, standard_seconds, maha_seconds)`` of one attention pass.

    The proportional policy downsamples with strided convolutions; the
    absolute policy uses adaptive pooling, which can reach any fixed length.
    """
    from . import tensor as T
    from .attention import init_attention, maha_attention, scaled_dot_attention
    from .pyramid import build_pyramid, init_downsample, make_schedule

    rng = np.random.default_rng(seed)
    rows = []
    for n in lengths:
        if policy == ABSOLUTE:
            scales = [x for x in policy_lengths(n, ABSOLUTE, absolute=absolute) if x < n]
            if not scales:
                raise ConfigError(f"no absolute scale fits n={n}")
            schedule = make_schedule(n, r, len(scales), lengths=scales)
            kind = "adaptive_pool"
        else:
            schedule = make_schedule(n, r, L)
            kind = "strided_conv"
        x = T.Tensor(rng.normal(size=(n, d)))
        down = init_downsample(kind, schedule.L, d, rng)
        attn = init_attention(schedule.L, d, d_k, rng)
        wq, wk, wv = (T.Tensor(rng.normal(size=s)) for s in ((d, d_k), (d, d_k), (d, d)))

        def run_maha():
            maha_attention(build_pyramid(x, down, schedule), attn, down)

        def run_full():
            scaled_dot_attention(x @ wq, x @ wk, d_k) @ (x @ wv)

        with T.no_grad():
            t_full = _median_time(run_full, repeats)
            t_maha = _median_time(run_maha, repeats)
        rows.append((n, t_full, t_maha))
    return rows


TIMING_HEADER = ("n", "policy", "standard_seconds", "maha_seconds")


def _median_time(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))
