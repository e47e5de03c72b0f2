"""Per-scale scaled dot-product attention with one shared value projection."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

from . import tensor as T
from .errors import ShapeError
from .pyramid import downsample, uniform_init


@dataclass
class ScaleAttnParams:
    wq: list  # per attention scale, (d, d_k)
    wk: list  # per attention scale, (d, d_k)
    wv: T.Tensor  # shared, (d, d_v)

    def __post_init__(self):
        if len(self.wq) != len(self.wk):
            raise ShapeError(f"{len(self.wq)} query projections but {len(self.wk)} key projections")

    @property
    def d(self):
        return self.wv.shape[0]

    @property
    def d_k(self):
        return self.wq[0].shape[1]

    @property
    def d_v(self):
        return self.wv.shape[1]

    @property
    def n_scales(self):
        return len(self.wq)

    def param_count(self):
        return sum(w.data.size for w in self.wq + self.wk) + self.wv.data.size

    def tensors(self):
        return list(self.wq) + list(self.wk) + [self.wv]


def init_attention(n_scales, d, d_k, rng, d_v=None):
    d_v = d if d_v is None else d_v
    wq = [T.Tensor(uniform_init(rng, (d, d_k), d), requires_grad=True) for _ in range(n_scales)]
    wk = [T.Tensor(uniform_init(rng, (d, d_k), d), requires_grad=True) for _ in range(n_scales)]
    wv = T.Tensor(uniform_init(rng, (d, d_v), d), requires_grad=True)
    return ScaleAttnParams(wq, wk, wv)


@dataclass
class ScaleOutputs:
    attn: list = field(default_factory=list)  # A_l, (n_l, n_l)
    outputs: list = field(default_factory=list)  # O_l, (n_l, d_v)
    upsampled: list = field(default_factory=list)  # U_l(O_l), (n, d_v)
    values: list = field(default_factory=list)  # V_l
    v_base: T.Tensor = None


def scaled_dot_attention(q, k, d_k):
    q, k = T.as_tensor(q), T.as_tensor(k)
    if q.ndim != 2 or k.ndim != 2 or q.cols != d_k or k.cols != d_k or q.rows != k.rows:
        raise ShapeError(f"attention expects matching (n, {d_k}) queries and keys, got {q.shape} and {k.shape}")
    return T.softmax_rows((q @ k.T) * (1.0 / math.sqrt(d_k)))


def shared_values(x0, wv, params, schedule):
    """Return ``(V_base, [V_1..V_L])`` with ``V_base = X W^V`` downsampled level by level."""
    v_base = T.as_tensor(x0) @ wv
    values, cur = [], v_base
    for level in range(1, schedule.L + 1):
        cur = downsample(cur, level, params, schedule)
        values.append(cur)
    return v_base, values


def maha_attention(pyramid, params, down, qk_inputs=None):
    """Attention at every scale of ``pyramid``; outputs are upsampled to the base length.

    ``qk_inputs`` overrides the per-scale representations used for the Q/K
    projections (the values always come from the shared value pathway).
    """
    from .aggregate import nn_upsample

    schedule = pyramid.schedule
    v_base, values = shared_values(pyramid.base, params.wv, down, schedule)
    scales = list(pyramid.levels)
    if schedule.include_base_scale:
        scales = [pyramid.base] + scales
        values = [v_base] + values
    if qk_inputs is not None:
        if len(qk_inputs) != len(scales):
            raise ShapeError(f"{len(qk_inputs)} Q/K inputs for {len(scales)} scales")
        scales = list(qk_inputs)
    if params.n_scales != len(scales):
        raise ShapeError(f"{params.n_scales} Q/K projection pairs for {len(scales)} attention scales")
    out = ScaleOutputs(values=values, v_base=v_base)
    for x_l, wq, wk, v_l in zip(scales, params.wq, params.wk, values):
        a_l = scaled_dot_attention(x_l @ wq, x_l @ wk, params.d_k)
        o_l = a_l @ v_l
        out.attn.append(a_l)
        out.outputs.append(o_l)
        out.upsampled.append(nn_upsample(o_l, schedule.n))
    return out
