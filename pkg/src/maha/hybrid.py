"""The full multiscale layer: gated pyramid, dilated local blocks, attention, aggregation."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .aggregate import AggWeights, SolverConfig, aggregate_outputs, build_target, nn_upsample, solve
from .attention import ScaleAttnParams, ScaleOutputs, init_attention, maha_attention
from .errors import EvaluationError, ShapeError
from .pyramid import DownsampleParams, build_pyramid, init_downsample, uniform_init


@dataclass
class HybridParams:
    conv_kernels: list  # per attention scale, (k, d, d)
    conv_biases: list  # per attention scale, (d,)
    wg: T.Tensor  # (d, d), shared by every level
    attn: ScaleAttnParams
    down: DownsampleParams
    solver: SolverConfig = field(default_factory=SolverConfig)
    gating: bool = True
    dilation: int = 2
    conv_before_qk: bool = True

    def groups(self):
        """Named parameter groups, in a stable order."""
        out = {}
        for i, k in enumerate(self.conv_kernels):
            out[f"dilated_kernel_{i}"] = k
            out[f"dilated_bias_{i}"] = self.conv_biases[i]
        for i, k in enumerate(self.down.kernels):
            out[f"down_kernel_{i + 1}"] = k
        out["w_g"] = self.wg
        for i, (q, k) in enumerate(zip(self.attn.wq, self.attn.wk)):
            out[f"w_q_{i}"] = q
            out[f"w_k_{i}"] = k
        out["w_v"] = self.attn.wv
        return out

    def tensors(self):
        return list(self.groups().values())

    def with_groups(self, values):
        """Copy of these params with the named groups replaced by ``values``."""
        g = {**self.groups(), **values}
        n = len(self.conv_kernels)
        attn = ScaleAttnParams(
            [g[f"w_q_{i}"] for i in range(self.attn.n_scales)],
            [g[f"w_k_{i}"] for i in range(self.attn.n_scales)],
            g["w_v"],
        )
        down = DownsampleParams(self.down.kind, [g[f"down_kernel_{i + 1}"] for i in range(len(self.down.kernels))])
        return replace(
            self,
            conv_kernels=[g[f"dilated_kernel_{i}"] for i in range(n)],
            conv_biases=[g[f"dilated_bias_{i}"] for i in range(n)],
            wg=g["w_g"],
            attn=attn,
            down=down,
        )


def init_hybrid(d, d_k, schedule, rng, kind="strided_conv", solver=None, gating=True, dilation=2,
                conv_before_qk=True, k=3):
    n_scales = schedule.L + (1 if schedule.include_base_scale else 0)
    down = init_downsample(kind, schedule.L, d, rng, k=k)
    kernels = [T.Tensor(uniform_init(rng, (k, d, d), k * d), requires_grad=True) for _ in range(n_scales)]
    biases = [T.Tensor(uniform_init(rng, (d,), k * d), requires_grad=True) for _ in range(n_scales)]
    wg = T.Tensor(uniform_init(rng, (d, d), d), requires_grad=True)
    attn = init_attention(n_scales, d, d_k, rng)
    return HybridParams(kernels, biases, wg, attn, down, solver or SolverConfig(), gating, dilation,
                        conv_before_qk)


@dataclass
class LayerOutput:
    y: T.Tensor
    weights: AggWeights
    scales: ScaleOutputs
    target: T.Tensor = None
    o_star: T.Tensor = None


def dilated_block(x_l, kernel, dilation=2, bias=None):
    """Residual local-context block ``X + ReLU(DilatedConv(X) + b)``."""
    x_l = T.as_tensor(x_l)
    pre = T.conv1d(x_l, kernel, stride=1, dilation=dilation)
    if bias is not None:
        pre = pre + bias
    return x_l + T.relu(pre)


def cross_scale_gate(x_l, x_prev, w_g):
    """Gate the finer level with ``sigmoid(X_l W_g)`` brought up to its length."""
    x_l, x_prev, w_g = T.as_tensor(x_l), T.as_tensor(x_prev), T.as_tensor(w_g)
    if x_l.cols != w_g.shape[0] or x_prev.cols != w_g.shape[1]:
        raise ShapeError(f"gating feature mismatch: {x_l.shape}, {w_g.shape}, {x_prev.shape}")
    if x_l.rows > x_prev.rows:
        raise ShapeError(f"gate source has {x_l.rows} rows, more than the gated {x_prev.rows}")
    gate = T.sigmoid(x_l @ w_g)
    if gate.rows != x_prev.rows:
        gate = nn_upsample(gate, x_prev.rows)
    return gate * x_prev


def _stage(name, fn, *args):
    try:
        return fn(*args)
    except EvaluationError as exc:
        raise EvaluationError(f"non-finite values in stage '{name}': {exc}") from exc


def maha_layer(x, params, schedule, method="co"):
    """Run the multiscale sublayer and return ``x + O*`` with diagnostics."""
    x = T.as_tensor(x)
    if x.rows != schedule.n:
        raise ShapeError(f"layer expects {schedule.n} rows, got {x.rows}")
    pre_gate = None
    if params.gating:
        def pre_gate(coarse, fine):
            return cross_scale_gate(coarse, fine, params.wg)

    pyr = _stage("pyramid", build_pyramid, x, params.down, schedule, pre_gate)
    qk_inputs = None
    if params.conv_before_qk:
        scales = ([x] if schedule.include_base_scale else []) + pyr.levels
        qk_inputs = [
            _stage("dilated_block", dilated_block, s, k, params.dilation, b)
            for s, k, b in zip(scales, params.conv_kernels, params.conv_biases)
        ]
    so = _stage("attention", maha_attention, pyr, params.attn, params.down, qk_inputs)
    target = build_target(x, so.v_base, so.upsampled, params.solver.target_kind)
    weights = _stage("aggregation", solve, method, so.upsampled, target, params.solver)
    o_star = _stage("aggregation", aggregate_outputs, so.upsampled, weights)
    y = _stage("residual", T.add, x, o_star)
    if not np.all(np.isfinite(y.data)):
        raise EvaluationError("non-finite values in stage 'residual'")
    return LayerOutput(y=y, weights=weights, scales=so, target=target, o_star=o_star)
