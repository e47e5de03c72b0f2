"""A tiny transformer stack built on the multiscale layer, synthetic tasks and ablations."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from ._io import write_csv
from .aggregate import METHODS, SolverConfig
from .errors import ConfigError, DivergenceError, EvaluationError
from .hybrid import init_hybrid, maha_layer
from .pyramid import make_schedule, uniform_init

TASKS = ("copy", "pattern_classify")


@dataclass
class ToyModelConfig:
    layers: int = 2
    d: int = 32
    d_k: int = 8
    vocab: int = 16
    n: int = 32
    r: int = 2
    L: int = 4
    method: str = "co"
    lr: float = 0.1
    steps: int = 500
    batch: int = 4
    seed: int = 0
    task: str = "copy"
    shift: int = 0
    d_ff: int = 64
    downsample_kind: str = "strided_conv"
    include_base_scale: bool = False
    gating: bool = True
    dilation: int = 2
    conv_before_qk: bool = True
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        for name in ("layers", "d", "d_k", "vocab", "n", "L", "d_ff", "batch", "dilation"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value}")
        if self.steps < 0 or self.lr < 0:
            raise ConfigError("steps and learning rate must be non-negative")
        if self.method not in METHODS:
            raise ConfigError(f"unknown aggregation method {self.method!r}")
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        self.schedule()  # raises for infeasible (n, r, L)

    def schedule(self):
        return make_schedule(self.n, self.r, self.L, include_base_scale=self.include_base_scale)

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------- tasks

class Task:
    """Seeded stream of ``(tokens, targets)`` examples.

    ``copy`` targets are the tokens rolled by ``shift`` positions.  A nonzero
    shift needs a full-resolution attention scale (``include_base_scale``):
    the coarse scales alone cannot single out an adjacent token.
    """

    def __init__(self, kind, n, seed=0, vocab=16, shift=0):
        if kind not in TASKS:
            raise ConfigError(f"unknown task {kind!r}")
        if kind == "pattern_classify" and (vocab < 5 or n < 4):
            raise ConfigError("pattern_classify needs vocab >= 5 and n >= 4")
        self.kind, self.n, self.vocab, self.shift = kind, n, vocab, shift
        self.n_classes = vocab if kind == "copy" else 2
        self.rng = np.random.default_rng(seed)

    def sample(self):
        if self.kind == "copy":
            tokens = self.rng.integers(0, self.vocab, size=self.n)
            return tokens, np.roll(tokens, self.shift)
        return self._pattern()

    def batch(self, size):
        return [self.sample() for _ in range(size)]

    def _pattern(self):
        # tokens 0, 1 form the local pair; token 2 is the distant marker; fillers avoid all three
        rng, n = self.rng, self.n
        tokens = rng.integers(3, self.vocab, size=n)
        label = int(rng.random() < 0.5)
        p = int(rng.integers(0, n - 1))
        far = [q for q in range(n) if abs(q - p) >= n // 2 and q not in (p, p + 1)]
        variant = "both" if label else ("none", "local", "global")[int(rng.integers(0, 3))]
        if variant in ("both", "local"):
            tokens[p], tokens[p + 1] = 0, 1
        if variant in ("both", "global"):
            tokens[far[int(rng.integers(0, len(far)))]] = 2
        return tokens, np.array([label])


def make_task(kind, n, seed=0, vocab=16, shift=0):
    return Task(kind, n, seed=seed, vocab=vocab, shift=shift)


# ---------------------------------------------------------------- model

class ToyModel:
    """Embedding -> [pre-norm multiscale sublayer, pre-norm feed-forward] x layers -> head."""

    def __init__(self, cfg, n_classes=None):
        self.cfg = cfg
        self.schedule = cfg.schedule()
        rng = np.random.default_rng(cfg.seed)
        d = cfg.d
        n_classes = n_classes or (cfg.vocab if cfg.task == "copy" else 2)
        self.tok_emb = T.Tensor(rng.uniform(-1.0, 1.0, size=(cfg.vocab, d)), requires_grad=True)
        self.pos_emb = T.Tensor(rng.uniform(-1.0, 1.0, size=(cfg.n, d)), requires_grad=True)
        self.layers = []
        for _ in range(cfg.layers):
            hp = init_hybrid(d, cfg.d_k, self.schedule, rng, kind=cfg.downsample_kind, solver=cfg.solver,
                             gating=cfg.gating, dilation=cfg.dilation, conv_before_qk=cfg.conv_before_qk)
            ffn = {
                "w1": T.Tensor(uniform_init(rng, (d, cfg.d_ff), d), requires_grad=True),
                "b1": T.Tensor(np.zeros(cfg.d_ff), requires_grad=True),
                "w2": T.Tensor(uniform_init(rng, (cfg.d_ff, d), cfg.d_ff), requires_grad=True),
                "b2": T.Tensor(np.zeros(d), requires_grad=True),
            }
            self.layers.append((hp, ffn))
        self.w_out = T.Tensor(uniform_init(rng, (d, n_classes), d), requires_grad=True)
        self.b_out = T.Tensor(np.zeros(n_classes), requires_grad=True)

    def groups(self):
        out = {"tok_emb": self.tok_emb, "pos_emb": self.pos_emb}
        for i, (hp, ffn) in enumerate(self.layers):
            for name, t in hp.groups().items():
                out[f"layer{i}.{name}"] = t
            for name, t in ffn.items():
                out[f"layer{i}.ffn_{name}"] = t
        out["w_out"] = self.w_out
        out["b_out"] = self.b_out
        return out

    def parameters(self):
        return list(self.groups().values())

    def forward(self, tokens, method=None):
        """Return ``(logits, [LayerOutput per layer])``."""
        method = method or self.cfg.method
        h = T.take_rows(self.tok_emb, tokens) + self.pos_emb
        outs = []
        for hp, ffn in self.layers:
            lo = maha_layer(T.layer_norm(h), hp, self.schedule, method)
            h = h + lo.o_star
            z = T.relu(T.layer_norm(h) @ ffn["w1"] + ffn["b1"])
            h = h + z @ ffn["w2"] + ffn["b2"]
            outs.append(lo)
        h = T.layer_norm(h)
        if self.cfg.task == "pattern_classify":
            h = h.mean(axis=0, keepdims=True)
        return h @ self.w_out + self.b_out, outs

    def loss(self, batch, method=None):
        total, weights = None, []
        for tokens, targets in batch:
            logits, outs = self.forward(tokens, method)
            ce = T.cross_entropy(logits, targets)
            total = ce if total is None else total + ce
            weights.append([lo.weights.w for lo in outs])
        return total * (1.0 / len(batch)), np.mean(weights, axis=0)


@dataclass
class TrainTrace:
    losses: list = field(default_factory=list)
    weights: list = field(default_factory=list)  # per step: (layers, L) array
    seconds: float = 0.0
    final_metric: float = float("nan")

    def smoothed(self, window=50):
        x = np.asarray(self.losses)
        if len(x) < window:
            return x.copy()
        return np.convolve(x, np.ones(window) / window, mode="valid")

    def reduction(self, window=50):
        """``1 - last / first`` of the windowed moving-average loss."""
        s = self.smoothed(window)
        return 1.0 - s[-1] / s[0]


def train(cfg, task=None, model=None, log=None):
    """Plain SGD with a fixed learning rate; one trace entry per step."""
    task = task or make_task(cfg.task, cfg.n, seed=cfg.seed + 1, vocab=cfg.vocab, shift=cfg.shift)
    model = model or ToyModel(cfg, n_classes=task.n_classes)
    params = model.parameters()
    trace = TrainTrace()
    t0 = time.perf_counter()
    for step in range(cfg.steps):
        batch = task.batch(cfg.batch)
        try:
            loss, w = model.loss(batch)
        except EvaluationError as exc:
            raise DivergenceError(step, float("nan")) from exc
        value = float(loss.data)
        if not np.isfinite(value) or value > 1e6:
            raise DivergenceError(step, value)
        for p in params:
            p.grad = None
        loss.backward()
        for p in params:
            if p.grad is not None:
                p.data -= cfg.lr * p.grad
        trace.losses.append(value)
        trace.weights.append(w)
        if log is not None:
            log(step, value)
    trace.seconds = time.perf_counter() - t0
    trace.final_metric = evaluate(model, task)
    return trace


def evaluate(model, task, samples=32):
    """Token (copy) or sequence (classification) accuracy on fresh samples."""
    correct = total = 0
    with T.no_grad():
        for tokens, targets in task.batch(samples):
            logits, _ = model.forward(tokens)
            correct += int(np.sum(logits.data.argmax(axis=1) == targets))
            total += len(targets)
    return correct / total


# ---------------------------------------------------------------- ablations

TRACE_HEADER_BASE = ("step", "loss")
ABLATION_HEADER = ("method", "final_loss", "smoothed_reduction", "metric", "seconds_per_step", "wallclock_rel")
SCALES_HEADER = ("L", "final_loss", "metric", "seconds_per_step")


def trace_rows(trace):
    rows = []
    for step, (loss, w) in enumerate(zip(trace.losses, trace.weights)):
        rows.append((step, loss, *np.asarray(w).ravel().tolist()))
    return rows


def trace_header(layers, n_scales):
    return TRACE_HEADER_BASE + tuple(f"layer{i}_w{l + 1}" for i in range(layers) for l in range(n_scales))


def write_trace_csv(path, trace, cfg):
    n_scales = cfg.L + (1 if cfg.include_base_scale else 0)
    return write_csv(path, trace_header(cfg.layers, n_scales), trace_rows(trace))


def ablate_aggregation(cfg, task_kind=None, methods=METHODS):
    """Train one model per aggregation method from the same seed and initialization."""
    traces = {}
    for method in methods:
        run_cfg = _replace(cfg, method=method, task=task_kind or cfg.task)
        traces[method] = train(run_cfg)
    per_step = {m: t.seconds / max(1, len(t.losses)) for m, t in traces.items()}
    ref = per_step["co"] if "co" in per_step else per_step[next(iter(per_step))]
    rows = []
    for m, t in traces.items():
        final = float(np.mean(t.losses[-10:])) if t.losses else float("nan")
        red = t.reduction() if len(t.losses) > 1 else 0.0
        rows.append((m, final, red, t.final_metric, per_step[m], per_step[m] / ref if ref else 1.0))
    return rows, traces


def ablate_scales(cfg, Ls, task_kind=None):
    """Train one model per depth ``L``; no claim is made about which depth wins."""
    rows = []
    for L in Ls:
        run_cfg = _replace(cfg, L=int(L), task=task_kind or cfg.task)
        t = train(run_cfg)
        final = float(np.mean(t.losses[-10:])) if t.losses else float("nan")
        rows.append((int(L), final, t.final_metric, t.seconds / max(1, len(t.losses))))
    return rows


def _replace(cfg, **changes):
    return replace(cfg, **changes)
