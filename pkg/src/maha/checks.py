"""Finite-difference suites: one probe per registered backward rule, plus layer-level checks."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .aggregate import SolverConfig, aggregate_outputs, co_solve, max_eig_sym, simplex_project, unrolled_pgd
from .attention import init_attention, maha_attention
from .gradcheck import GradCheckReport, finite_diff_check
from .hybrid import init_hybrid, maha_layer
from .pyramid import build_pyramid, init_downsample, make_schedule

OP_TOL = 1e-4
LAYER_TOL = 1e-3


def _away_from_zero(rng, shape, margin=0.2):
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def op_probes(seed=0):
    """``{op name: (f, params)}`` covering every rule in ``tensor.BACKWARD``.

    Inputs are kept away from the kinks of piecewise ops (relu, clip, max
    pooling, simplex projection) so central differences are meaningful.
    """
    rng = np.random.default_rng(seed)
    count = [0]

    def w(fn):
        # each probe owns its contraction weights, reused on every evaluation
        count[0] += 1
        R = np.random.default_rng([seed, count[0]])
        state = {}

        def f(p):
            out = fn(p)
            if out.data.size == 1:
                return T.reshape(out, ())
            key = out.shape
            if key not in state:
                state[key] = R.normal(size=key)
            return (out * T.Tensor(state[key])).sum()

        return f

    a, b = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    sym = rng.normal(size=(4, 4))
    G = rng.normal(size=(3, 5))
    G = G @ G.T + 0.5 * np.eye(3)
    probes = {
        "add": (w(lambda p: p["a"] + p["b"]), {"a": a, "b": b[0]}),
        "sub": (w(lambda p: p["a"] - p["b"]), {"a": a, "b": b}),
        "mul": (w(lambda p: p["a"] * p["b"]), {"a": a, "b": b[:, :1]}),
        "div": (w(lambda p: p["a"] / p["b"]), {"a": a, "b": np.abs(b) + 0.5}),
        "neg": (w(lambda p: -p["a"]), {"a": a}),
        "exp": (w(lambda p: T.exp(p["a"])), {"a": a}),
        "log": (w(lambda p: T.log(p["a"])), {"a": np.abs(a) + 0.5}),
        "relu": (w(lambda p: T.relu(p["a"])), {"a": _away_from_zero(rng, (4, 3))}),
        "sigmoid": (w(lambda p: T.sigmoid(p["a"])), {"a": a}),
        "clip": (w(lambda p: T.clip(p["a"], -0.5, 0.5)),
                 {"a": np.array([[-0.9, -0.2, 0.1], [0.3, 0.8, -0.4]])}),
        "sum": (w(lambda p: p["a"].sum(axis=0, keepdims=True)), {"a": a}),
        "transpose": (w(lambda p: p["a"].T), {"a": a}),
        "reshape": (w(lambda p: T.reshape(p["a"], (3, 4))), {"a": a}),
        "getitem": (w(lambda p: p["a"][1:3, ::2]), {"a": a}),
        "take_rows": (w(lambda p: T.take_rows(p["a"], np.array([0, 0, 3, 1]))), {"a": a}),
        "stack": (w(lambda p: T.stack([p["a"], p["b"]])), {"a": a, "b": b}),
        "matmul": (w(lambda p: p["a"] @ p["b"]), {"a": a, "b": b.T}),
        "softmax_rows": (w(lambda p: T.softmax_rows(p["a"])), {"a": a}),
        "layer_norm": (w(lambda p: T.layer_norm(p["a"])), {"a": a}),
        "cross_entropy": (lambda p: T.cross_entropy(p["a"], np.array([0, 2, 1, 2])), {"a": a}),
        "conv1d": (w(lambda p: T.stack([T.conv1d(p["x"], p["k"], stride=2), T.conv1d(p["x"], p["k"], stride=2, dilation=2)])),
                   {"x": rng.normal(size=(16, 3)), "k": rng.normal(size=(3, 3, 3))}),
        "adaptive_max_pool": (w(lambda p: T.adaptive_max_pool(p["a"], 5)), {"a": rng.normal(size=(16, 3))}),
        "simplex_project": (w(lambda p: simplex_project(p["a"])), {"a": np.array([0.5, 0.3, -0.4, 0.2])}),
        "max_eig_sym": (lambda p: T.reshape(max_eig_sym((p["m"] + p["m"].T) * 0.5), ()), {"m": sym}),
        # few steps: near the fixed point d(w)/d(s) vanishes and differences are pure roundoff
        "unrolled_pgd": (w(lambda p: unrolled_pgd((p["G"] + p["G"].T) * 0.5, p["b"], p["s"], 0.1, 6)[0]),
                         {"G": G, "b": rng.normal(size=(3, 1)), "s": np.array(0.5 / np.linalg.eigvalsh(G)[-1])}),
    }
    return probes


def check_ops(seed=0, tol=OP_TOL):
    """Run every op probe; rules without a probe are reported as failures."""
    probes = op_probes(seed)
    report = GradCheckReport(tolerance=tol)
    for name in T.BACKWARD:
        if name not in probes:
            report.errors[f"op:{name} (no probe)"] = float("inf")
            continue
        f, params = probes[name]
        sub = finite_diff_check(f, params, tol=tol)
        report.errors[f"op:{name}"] = max(sub.errors.values())
    return report


def _tiny(n, d, d_k, L, seed):
    rng = np.random.default_rng(seed)
    schedule = make_schedule(n, 2, L)
    x = T.Tensor(rng.normal(size=(n, d)))
    return rng, schedule, x


def check_attention(n=16, d=8, d_k=4, L=2, seed=0, tol=OP_TOL):
    """Gradient of a scalar loss through multiscale attention w.r.t. every projection."""
    rng, schedule, x = _tiny(n, d, d_k, L, seed)
    down = init_downsample("strided_conv", L, d, rng)
    attn = init_attention(L, d, d_k, rng)
    pyr = build_pyramid(x, down, schedule)
    weights = rng.normal(size=(n, d))
    params = {f"w_q_{i}": q.data for i, q in enumerate(attn.wq)}
    params.update({f"w_k_{i}": k.data for i, k in enumerate(attn.wk)})
    params["w_v"] = attn.wv.data

    def f(p):
        a = type(attn)([p[f"w_q_{i}"] for i in range(L)], [p[f"w_k_{i}"] for i in range(L)], p["w_v"])
        out = maha_attention(pyr, a, down)
        total = None
        for u in out.upsampled:
            term = (u * T.Tensor(weights)).sum()
            total = term if total is None else total + term
        return total

    return _prefixed(finite_diff_check(f, params, tol=tol), "attention")


def check_layer(n=16, d=8, d_k=4, L=2, seed=0, tol=LAYER_TOL, method="co"):
    """Scalar loss on the full layer output against every parameter group."""
    rng, schedule, x = _tiny(n, d, d_k, L, seed)
    # tol=0 runs every solver iteration so the unrolled map is the same on each evaluation
    hp = init_hybrid(d, d_k, schedule, rng, solver=SolverConfig(tol=0.0))
    weights = rng.normal(size=(n, d))
    params = {k: t.data for k, t in hp.groups().items()}

    def f(p):
        out = maha_layer(x, hp.with_groups(p), schedule, method)
        return (out.y * T.Tensor(weights)).sum()

    return _prefixed(finite_diff_check(f, params, tol=tol), "layer")


def projection_margin(cands, target, cfg):
    """Smallest distance of any pre-projection coordinate to the threshold over a CO run."""
    F = np.stack([np.asarray(c, dtype=np.float64).ravel() for c in cands])
    t = np.asarray(target, dtype=np.float64).ravel()
    G, b = F @ F.T, (F @ t)[:, None]
    L = len(cands)
    s = cfg.step / (2.0 * np.linalg.eigvalsh(G)[-1])
    w = np.full((L, 1), 1.0 / L)
    margin = np.inf
    for _ in range(cfg.iters):
        v = (w - s * (2.0 * (G @ w - b) + cfg.lam)).ravel()
        w_new = simplex_project(v)
        i = int(np.argmax(w_new))
        theta = v[i] - w_new[i]
        margin = min(margin, float(np.min(np.abs(v - theta))))
        w = w_new[:, None]
    return margin


def check_co_layer(n=16, d=8, L=2, seed=0, tol=LAYER_TOL, margin=1e-4, max_draws=100):
    """Gradient of ``||O*(C, w(C, T)) - T'||^2`` through the unrolled CO solver.

    Instances whose iterates pass within ``margin`` of a projection kink are
    redrawn, so the map is smooth around the checked point.
    """
    rng = np.random.default_rng(seed)
    cfg = SolverConfig(tol=0.0)
    for _ in range(max_draws):
        cands = [rng.normal(size=(n, d)) for _ in range(L)]
        target = sum(rng.uniform(0.2, 1.0) * c for c in cands) + 0.3 * rng.normal(size=(n, d))
        if projection_margin(cands, target, cfg) > margin:
            break
    else:
        raise RuntimeError("could not draw an instance away from projection kinks")
    other = rng.normal(size=(n, d))
    params = {f"candidate_{i}": c for i, c in enumerate(cands)}
    params["target"] = target

    def f(p):
        cs = [p[f"candidate_{i}"] for i in range(L)]
        w = co_solve(cs, p["target"], cfg)
        diff = aggregate_outputs(cs, w) - T.Tensor(other)
        return (diff * diff).sum()

    return _prefixed(finite_diff_check(f, params, tol=tol), "co_layer")


def _prefixed(report, prefix):
    return GradCheckReport({f"{prefix}:{k}": v for k, v in report.errors.items()}, report.tolerance)


@dataclass
class SuiteResult:
    name: str
    report: GradCheckReport
    seconds: float


def run_all(n=16, d=8, d_k=4, L=2, seed=0):
    """Every suite in order; each report carries its own tolerance."""
    suites = [
        ("ops", lambda: check_ops(seed)),
        ("attention", lambda: check_attention(n, d, d_k, L, seed)),
        ("layer", lambda: check_layer(n, d, d_k, L, seed)),
        ("co_layer", lambda: check_co_layer(n, d, L, seed)),
    ]
    results = []
    for name, fn in suites:
        t0 = time.perf_counter()
        report = fn()
        results.append(SuiteResult(name, report, time.perf_counter() - t0))
    return results
