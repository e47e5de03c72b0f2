"""Hierarchical scale pyramid: exponential length schedule and learnable downsampling."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

from . import tensor as T
from .errors import ConfigError, ShapeError

STRIDED_CONV = "strided_conv"
ADAPTIVE_POOL = "adaptive_pool"
DOWNSAMPLE_KINDS = (STRIDED_CONV, ADAPTIVE_POOL)


@dataclass(frozen=True)
class ScaleSchedule:
    """Token lengths ``n_1 > n_2 > ... > n_L`` derived from base length ``n``."""

    n: int
    r: int
    L: int
    lengths: tuple
    include_base_scale: bool = False

    def __post_init__(self):
        if len(self.lengths) != self.L:
            raise ConfigError(f"schedule has {len(self.lengths)} lengths for L={self.L}")
        prev = self.n
        for n_l in self.lengths:
            if not n_l < prev:
                raise ConfigError(f"schedule lengths must strictly decrease from n={self.n}: {self.lengths}")
            prev = n_l
        if self.lengths and self.lengths[-1] < 2:
            raise ConfigError(f"coarsest scale must keep at least 2 tokens: {self.lengths}")

    def length(self, level):
        """Length at ``level`` (0 is the base sequence)."""
        return self.n if level == 0 else self.lengths[level - 1]

    @property
    def is_geometric(self):
        prev = self.n
        for n_l in self.lengths:
            if n_l != prev // self.r:
                return False
            prev = n_l
        return True

    @property
    def attention_lengths(self):
        return ((self.n,) if self.include_base_scale else ()) + tuple(self.lengths)

    def to_dict(self, downsample_kind=STRIDED_CONV):
        return {
            "n": self.n,
            "r": self.r,
            "L": self.L,
            "downsample_kind": downsample_kind,
            "include_base_scale": self.include_base_scale,
        }


def max_depth(n, r):
    """Largest L with ``n >= 2 * r**L`` (0 if none)."""
    L = 0
    while n >= 2 * r ** (L + 1):
        L += 1
    return L


def make_schedule(n, r, L, include_base_scale=False, lengths=None):
    """Build the ``n_l = floor(n_{l-1} / r)`` schedule, or validate explicit ``lengths``."""
    if int(r) != r or r < 2:
        raise ConfigError(f"compression ratio must be an integer > 1, got {r}")
    if int(L) != L or L < 1:
        raise ConfigError(f"depth L must be a positive integer, got {L}")
    if lengths is not None:
        return ScaleSchedule(int(n), int(r), len(lengths), tuple(int(x) for x in lengths), include_base_scale)
    if n < 2 * r ** L:
        hint = max_depth(n, r)
        raise ConfigError(
            f"n={n} is too short for L={L} at r={r} (needs n >= {2 * r ** L}); max feasible L is {hint}"
        )
    out, cur = [], n
    for _ in range(L):
        cur //= r
        out.append(cur)
    return ScaleSchedule(int(n), int(r), int(L), tuple(out), include_base_scale)


@dataclass
class DownsampleParams:
    kind: str = STRIDED_CONV
    kernels: list = field(default_factory=list)  # per level, (k, d, d) Tensors

    def __post_init__(self):
        if self.kind not in DOWNSAMPLE_KINDS:
            raise ConfigError(f"unknown downsample kind {self.kind!r}")
        for k in self.kernels:
            if k.shape[0] % 2 == 0:
                raise ConfigError(f"downsampling kernel size must be odd, got {k.shape[0]}")

    def tensors(self):
        return list(self.kernels)


def uniform_init(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_downsample(kind, L, d, rng, k=3):
    if kind == ADAPTIVE_POOL:
        return DownsampleParams(kind, [])
    if k % 2 == 0:
        raise ConfigError(f"kernel size must be odd, got {k}")
    kernels = [T.Tensor(uniform_init(rng, (k, d, d), k * d), requires_grad=True) for _ in range(L)]
    return DownsampleParams(kind, kernels)


@dataclass
class ScalePyramid:
    base: T.Tensor
    levels: list
    schedule: ScaleSchedule
    kind: str = STRIDED_CONV


def downsample(x, level, params, schedule):
    """Apply the level-``level`` operator (1-based) mapping length n_{level-1} to n_level."""
    x = T.as_tensor(x)
    if not 1 <= level <= schedule.L:
        raise ShapeError(f"level {level} outside 1..{schedule.L}")
    expected = schedule.length(level - 1)
    if x.rows != expected:
        raise ShapeError(f"level {level} expects {expected} rows, got {x.rows}")
    target = schedule.length(level)
    if params.kind == ADAPTIVE_POOL:
        return T.adaptive_max_pool(x, target)
    if x.rows // schedule.r != target:
        raise ShapeError(
            f"strided convolution maps {x.rows} rows to {x.rows // schedule.r}, schedule wants {target}"
        )
    return T.conv1d(x, params.kernels[level - 1], stride=schedule.r, dilation=1)


def build_pyramid(x, params, schedule, pre_gate=None):
    """Successively downsample ``x`` into levels ``X_1..X_L``.

    ``pre_gate(coarse, fine)`` optionally rewrites the finer representation
    from a first-pass coarse one; the gated result is then downsampled again
    to give the level actually kept.
    """
    x = T.as_tensor(x)
    if x.rows != schedule.n:
        raise ShapeError(f"pyramid expects {schedule.n} rows, got {x.rows}")
    levels, prev = [], x
    for level in range(1, schedule.L + 1):
        cur = downsample(prev, level, params, schedule)
        if pre_gate is not None:
            cur = downsample(pre_gate(cur, prev), level, params, schedule)
        levels.append(cur)
        prev = cur
    return ScalePyramid(x, levels, schedule, params.kind)


def lengths_of(pyramid):
    return [lvl.rows for lvl in pyramid.levels]

