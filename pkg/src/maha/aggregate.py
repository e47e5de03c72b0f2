"""Fusion of per-scale outputs into one full-resolution representation.

Three ways to pick simplex mixing weights ``w`` for candidates ``C_l`` and a
target ``T``:

* ``co``: projected gradient descent on ``||sum_l w_l C_l - T||_F^2 + lam*||w||_1``,
  unrolled so that gradients flow through every iteration;
* ``ne``: Gauss-Seidel best-response sweeps in which each scale minimizes
  the same reconstruction error over its own weight;
* ``mean``: uniform weights.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, EvaluationError, ShapeError

METHODS = ("co", "ne", "mean")
TARGET_KINDS = ("value_pathway", "mean_of_scales")
NE_RESPONSES = ("renormalized", "literal")


@dataclass
class SolverConfig:
    lam: float = 0.1
    iters: int = 50
    # fraction of the 1/Lipschitz step for ``co``
    step: float = 1.0
    tol: float = 1e-8
    target_kind: str = "value_pathway"
    ne_response: str = "renormalized"

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if int(self.iters) != self.iters or self.iters < 1:
            raise ConfigError(f"iteration limit must be a positive integer, got {self.iters}")
        if not self.step > 0:
            raise ConfigError(f"step size must be > 0, got {self.step}")
        if self.tol < 0:
            raise ConfigError(f"tolerance must be >= 0, got {self.tol}")
        if self.target_kind not in TARGET_KINDS:
            raise ConfigError(f"unknown target kind {self.target_kind!r}")
        if self.ne_response not in NE_RESPONSES:
            raise ConfigError(f"unknown best-response rule {self.ne_response!r}")


@dataclass
class AggWeights:
    w: np.ndarray
    method: str
    iterations: int = 0
    objective: float = float("nan")
    trajectory: list = field(default_factory=list, repr=False)  # objective per iteration / sweep
    degenerate: list = field(default_factory=list)  # indices of zero-norm candidates
    tensor: T.Tensor = field(default=None, repr=False)  # differentiable weights, shape (L, 1)

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64).ravel()

    def on_simplex(self, tol=1e-9):
        return bool(np.all(self.w >= -tol) and abs(self.w.sum() - 1.0) <= tol)


# ---------------------------------------------------------------- upsampling

def nn_upsample(o, n):
    """Nearest-neighbour upsampling: output row ``i`` copies input row ``floor(i * rows / n)``."""
    o = T.as_tensor(o)
    if int(n) != n or n < o.rows:
        raise ShapeError(f"cannot upsample {o.rows} rows to {n}")
    idx = (np.arange(int(n)) * o.rows) // int(n)
    return T.take_rows(o, idx)


# ---------------------------------------------------------------- simplex projection

def _project(v):
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    k = np.arange(1, v.size + 1)
    rho = np.nonzero(u - (css - 1.0) / k > 0)[0][-1]
    theta = (css[rho] - 1.0) / (rho + 1)
    return np.maximum(v - theta, 0.0)


def simplex_project(v):
    """Euclidean projection onto ``{w : sum(w) = 1, w >= 0}`` by sort-and-threshold.

    Arrays and lists give an ndarray back; a Tensor gives a differentiable Tensor.
    """
    if isinstance(v, T.Tensor):
        if v.data.size == 0:
            raise ShapeError("cannot project an empty vector")
        out = _project(v.data.ravel()).reshape(v.shape)
        return T._make(out, "simplex_project", (v,), out > 0)
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ShapeError("cannot project an empty vector")
    if not np.all(np.isfinite(v)):
        raise EvaluationError("simplex projection of non-finite values")
    return _project(v.ravel()).reshape(v.shape)


@T.backward_rule("simplex_project")
def _simplex_project_bw(support, g, v):
    gs = g * support
    return (gs - support * (gs.sum() / support.sum()),)


def max_eig_sym(m):
    """Largest eigenvalue of a symmetric matrix (gradient ``u u^T``)."""
    m = T.as_tensor(m)
    vals, vecs = np.linalg.eigh(m.data)
    u = vecs[:, -1]
    return T._make(np.asarray(vals[-1]), "max_eig_sym", (m,), np.outer(u, u))


@T.backward_rule("max_eig_sym")
def _max_eig_sym_bw(uut, g, m):
    return (g * uut,)


def unrolled_pgd(G, b, step, lam, iters, tol=0.0):
    """Projected gradient descent on ``w^T G w - 2 b^T w + lam * sum(w)`` over the simplex.

    Runs from uniform weights for at most ``iters`` steps
    ``w <- P(w - step * (2 (G w - b) + lam))``, stopping early once no weight
    moves by ``tol``.  The whole loop is a single op: its backward rule
    replays the recorded iterations in reverse.  ``G`` is ``(L, L)``, ``b``
    is ``(L, 1)``, ``step`` is 0-d.  Returns ``(w, objective trajectory)``.
    """
    G, b, step = T.as_tensor(G), T.as_tensor(b), T.as_tensor(step)
    Gd, bd, s = G.data, b.data, float(step.data)
    L = Gd.shape[0]
    w = np.full((L, 1), 1.0 / L)
    tape, trajectory = [], []
    for _ in range(iters):
        grad = 2.0 * (Gd @ w - bd) + lam
        w_new = _project((w - s * grad).ravel()).reshape(L, 1)
        tape.append((w, grad, w_new > 0))
        moved = np.max(np.abs(w_new - w))
        w = w_new
        trajectory.append(float((w.T @ Gd @ w - 2.0 * bd.T @ w)[0, 0] + lam * w.sum()))
        if moved < tol:
            break
    return T._make(w, "unrolled_pgd", (G, b, step), tape), trajectory


@T.backward_rule("unrolled_pgd")
def _unrolled_pgd_bw(tape, g, G, b, step):
    s = float(step.data)
    gG = np.zeros_like(G.data)
    gb = np.zeros_like(b.data)
    gstep = 0.0
    gw = g
    for w, grad, support in reversed(tape):
        gs = gw * support
        gu = gs - support * (gs.sum() / support.sum())
        gG -= 2.0 * s * (gu @ w.T)
        gb += 2.0 * s * gu
        gstep -= float(np.sum(gu * grad))
        gw = gu - 2.0 * s * (G.data.T @ gu)
    return gG, gb, np.asarray(gstep)


# ---------------------------------------------------------------- objectives

def _as_stack(candidates, target):
    cands = [T.as_tensor(c) for c in candidates]
    if not cands:
        raise ShapeError("need at least one candidate")
    target = T.as_tensor(target)
    for i, c in enumerate(cands):
        if c.shape != target.shape:
            raise ShapeError(f"candidate {i} has shape {c.shape}, target has {target.shape}")
        if not np.all(np.isfinite(c.data)):
            raise EvaluationError(f"candidate {i} is not finite")
    return cands, target


def objective(w, candidates, target, lam=0.0):
    """``||sum_l w_l C_l - T||_F^2 + lam * ||w||_1`` evaluated in plain numpy."""
    w = np.asarray(w, dtype=np.float64).ravel()
    mix = sum(wl * np.asarray(c, dtype=np.float64) for wl, c in zip(w, candidates))
    resid = mix - np.asarray(target, dtype=np.float64)
    return float(np.sum(resid * resid) + lam * np.abs(w).sum())


def gram_system(candidates, target):
    """Gram matrix ``G_lm = <C_l, C_m>``, ``b_l = <C_l, T>`` and ``c = <T, T>`` as arrays."""
    F = np.stack([np.asarray(c, dtype=np.float64).ravel() for c in candidates])
    t = np.asarray(target, dtype=np.float64).ravel()
    return F @ F.T, F @ t, float(t @ t)


# ---------------------------------------------------------------- solvers

def co_solve(candidates, target, cfg=None):
    """Simplex-constrained least squares by unrolled projected gradient descent.

    Starts from uniform weights and takes steps of ``cfg.step / Lip`` where
    ``Lip = 2 * lambda_max(G)`` is the Lipschitz constant of the gradient;
    stops after ``cfg.iters`` steps or once no weight moves by ``cfg.tol``.
    """
    cfg = cfg or SolverConfig()
    cands, target = _as_stack(candidates, target)
    L = len(cands)
    F = T.stack([T.reshape(c, (-1,)) for c in cands])  # (L, n*d)
    t = T.reshape(target, (-1, 1))
    G = F @ F.T
    b = F @ t
    w = T.Tensor(np.full((L, 1), 1.0 / L))
    trajectory = []
    lip = 2.0 * max_eig_sym(G)
    if L > 1 and lip.data > 0:
        w, trajectory = unrolled_pgd(G, b, cfg.step / lip, cfg.lam, cfg.iters, cfg.tol)
    iterations = len(trajectory)
    return AggWeights(
        w=w.data.ravel(),
        method="co",
        iterations=iterations,
        objective=objective(w.data, [c.data for c in cands], target.data, cfg.lam),
        trajectory=trajectory,
        tensor=w,
    )


def _degenerate_players(cands):
    return [i for i, c in enumerate(cands) if not np.any(c.data)]


def ne_solve(candidates, target, cfg=None):
    """Best-response dynamics: each scale in turn minimizes the shared reconstruction error.

    With ``cfg.ne_response == "renormalized"`` (default) player ``l`` picks
    ``w_l`` in ``[0, 1]`` while the other players keep their relative
    proportions and share the remaining ``1 - w_l``, so every response stays on
    the simplex.  ``"literal"`` uses ``w_l = max(0, <T - S_-l, C_l> / ||C_l||^2)``
    with ``S_-l`` the others' unnormalized mixture.  Either way the weights
    are projected onto the simplex after each sweep.
    """
    cfg = cfg or SolverConfig()
    cands, target = _as_stack(candidates, target)
    L = len(cands)
    degenerate = _degenerate_players(cands)
    live = [i for i in range(L) if i not in degenerate] or list(range(L))
    init = np.array([1.0 / len(live) if i in live else 0.0 for i in range(L)])
    w = [T.Tensor(x) for x in init]
    trajectory = []
    iterations = 0
    if len(live) > 1:
        norms2 = [T.inner(c, c) for c in cands]
        respond = _renormalized_response if cfg.ne_response == "renormalized" else _literal_response
        c_np = [c.data for c in cands]
        for sweep in range(cfg.iters):
            before = np.array([x.data for x in w], dtype=np.float64)
            for l in live:
                w = respond(l, w, cands, target, norms2, live)
            w_vec = simplex_project(T.stack(w))
            w = [w_vec[i] for i in range(L)]
            iterations = sweep + 1
            after = w_vec.data
            trajectory.append(objective(after, c_np, target.data, cfg.lam))
            if np.max(np.abs(after - before)) <= cfg.tol:
                break
    w_t = T.reshape(T.stack(w), (L, 1))
    return AggWeights(
        w=w_t.data.ravel(),
        method="ne",
        iterations=iterations,
        objective=objective(w_t.data, [c.data for c in cands], target.data, cfg.lam),
        trajectory=trajectory,
        degenerate=degenerate,
        tensor=w_t,
    )


def _literal_response(l, w, cands, target, norms2, live):
    others = [w[m] * cands[m] for m in live if m != l]
    s = others[0]
    for term in others[1:]:
        s = s + term
    w = list(w)
    w[l] = T.relu(T.inner(target - s, cands[l]) / norms2[l])
    return w


def _renormalized_response(l, w, cands, target, norms2, live):
    others = [m for m in live if m != l]
    rest = 1.0 - w[l]
    if rest.data > 1e-12:
        p = [w[m] / rest for m in others]
    else:
        p = [T.Tensor(1.0 / len(others)) for _ in others]
    s = p[0] * cands[others[0]]
    for pm, m in zip(p[1:], others[1:]):
        s = s + pm * cands[m]
    diff = cands[l] - s
    nn = T.inner(diff, diff)
    if nn.data <= 1e-20 * norms2[l].data:
        return w
    wl = T.clip(T.inner(target - s, diff) / nn, 0.0, 1.0)
    w = list(w)
    w[l] = wl
    for pm, m in zip(p, others):
        w[m] = (1.0 - wl) * pm
    return w


def mean_weights(candidates, target=None, cfg=None):
    cfg = cfg or SolverConfig()
    L = len(candidates)
    if L == 0:
        raise ShapeError("need at least one candidate")
    w = np.full(L, 1.0 / L)
    obj = objective(w, candidates, target, cfg.lam) if target is not None else float("nan")
    return AggWeights(w=w, method="mean", objective=obj, tensor=T.Tensor(w.reshape(L, 1)))


def solve(method, candidates, target, cfg=None):
    if method == "co":
        return co_solve(candidates, target, cfg)
    if method == "ne":
        return ne_solve(candidates, target, cfg)
    if method == "mean":
        return mean_weights(candidates, target, cfg)
    raise ConfigError(f"unknown aggregation method {method!r}; expected one of {METHODS}")


def aggregate_outputs(candidates, w):
    """``O* = sum_l w_l C_l``; differentiable in both candidates and solver weights."""
    if len(candidates) != len(w.w):
        raise ShapeError(f"{len(w.w)} weights for {len(candidates)} candidates")
    weights = w.tensor if w.tensor is not None else T.Tensor(w.w.reshape(-1, 1))
    out = None
    for i, c in enumerate(candidates):
        term = weights[i, 0] * T.as_tensor(c)
        out = term if out is None else out + term
    return out


def build_target(x0, v_base, candidates, kind="value_pathway"):
    """Reconstruction target for the weight solvers.

    ``value_pathway`` returns the full-resolution values ``V_base``;
    ``mean_of_scales`` returns the candidates' plain mean, detached from the graph.
    """
    if kind == "value_pathway":
        return T.as_tensor(v_base)
    if kind == "mean_of_scales":
        return T.Tensor(np.mean([np.asarray(c, dtype=np.float64) for c in candidates], axis=0))
    raise ConfigError(f"unknown target kind {kind!r}")


def nash_certificate(candidates, target, w, delta=0.01, eps=1e-6):
    """Check that no unilateral mass transfer of ``delta`` improves a player's error by > ``eps``.

    Player ``l`` may move ``+-delta`` of mass between itself and any other
    coordinate (staying on the simplex); its error is the full reconstruction
    error of the resulting mixture.  Returns ``(ok, largest_improvement)``.
    """
    w = np.asarray(getattr(w, "w", w), dtype=np.float64).ravel()
    G, b, c = gram_system(candidates, target)

    def err(v):
        return float(v @ G @ v - 2.0 * b @ v + c)

    base = err(w)
    best = 0.0
    for l in range(len(w)):
        for m in range(len(w)):
            if m == l:
                continue
            for d in (delta, -delta):
                v = w.copy()
                v[l] += d
                v[m] -= d
                if v[l] < 0 or v[m] < 0:
                    continue
                best = max(best, base - err(v))
    return best <= eps, best
