"""Independent reference implementations used as test oracles.

Everything here is written with explicit loops over plain numpy arrays and
imports nothing from the package, so agreement with the package is a
cross-check between two separate derivations.
"""
import math

import numpy as np


def softmax_rows(m):
    out = np.empty_like(m, dtype=float)
    for i, row in enumerate(m):
        top = max(row)
        e = [math.exp(v - top) for v in row]
        s = sum(e)
        out[i] = [v / s for v in e]
    return out


def conv(x, kernel, stride, dilation):
    k = kernel.shape[0]
    rows = x.shape[0]
    n_out = rows if stride == 1 else rows // stride
    out = np.zeros((n_out, kernel.shape[2]))
    for j in range(n_out):
        for t in range(k):
            p = j * stride + (t - (k - 1) // 2) * dilation
            if 0 <= p < rows:
                out[j] += x[p] @ kernel[t]
    return out


def pool(x, n_out):
    rows = x.shape[0]
    out = np.empty((n_out, x.shape[1]))
    for i in range(n_out):
        start = math.floor(i * rows / n_out)
        end = math.ceil((i + 1) * rows / n_out)
        out[i] = x[start:end].max(axis=0)
    return out


def upsample(o, n):
    return np.array([o[(i * o.shape[0]) // n] for i in range(n)])


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def schedule(n, r, L):
    out = []
    for _ in range(L):
        n //= r
        out.append(n)
    return out


def down(x, level, kind, kernels, r, length):
    if kind == "adaptive_pool":
        return pool(x, length)
    return conv(x, kernels[level - 1], r, 1)


def attention_pipeline(x, wq, wk, wv, kernels, r, L, kind="strided_conv", qk=None):
    """Per-scale attention matrices, outputs and upsampled outputs for an ungated pyramid."""
    n = x.shape[0]
    lengths = schedule(n, r, L)
    levels, prev = [], x
    for level, length in enumerate(lengths, start=1):
        prev = down(prev, level, kind, kernels, r, length)
        levels.append(prev)
    v_base = x @ wv
    values, prev = [], v_base
    for level, length in enumerate(lengths, start=1):
        prev = down(prev, level, kind, kernels, r, length)
        values.append(prev)
    qk = qk or levels
    attn, outs, ups = [], [], []
    d_k = wq[0].shape[1]
    for l in range(L):
        q, k = qk[l] @ wq[l], qk[l] @ wk[l]
        scores = np.array([[q[i] @ k[j] / math.sqrt(d_k) for j in range(len(k))] for i in range(len(q))])
        a = softmax_rows(scores)
        o = a @ values[l]
        attn.append(a)
        outs.append(o)
        ups.append(upsample(o, n))
    return attn, outs, ups, v_base


def best_pair_weight(c1, c2, target):
    """Exact minimizer of ||w C1 + (1-w) C2 - T||^2 over w in [0, 1]."""
    d = (c1 - c2).ravel()
    e = (target - c2).ravel()
    dd = d @ d
    if dd == 0:
        return 0.5
    return min(1.0, max(0.0, (e @ d) / dd))


def layer(x, p, r, L, dilation=2):
    """Full layer for L = 2: gated pyramid, dilated blocks, attention, exact weights, residual.

    ``p`` holds arrays named like the package's parameter groups.
    """
    assert L == 2
    n = x.shape[0]
    lengths = schedule(n, r, L)
    kernels = [p[f"down_kernel_{i + 1}"] for i in range(L)]
    # levels: first pass, gate the finer level, downsample again
    levels, prev = [], x
    for level, length in enumerate(lengths, start=1):
        pre = down(prev, level, "strided_conv", kernels, r, length)
        gate = upsample(sigmoid(pre @ p["w_g"]), prev.shape[0])
        cur = down(gate * prev, level, "strided_conv", kernels, r, length)
        levels.append(cur)
        prev = cur
    qk = []
    for l, xl in enumerate(levels):
        pre = conv(xl, p[f"dilated_kernel_{l}"], 1, dilation) + p[f"dilated_bias_{l}"]
        qk.append(xl + np.maximum(pre, 0.0))
    wq = [p[f"w_q_{l}"] for l in range(L)]
    wk = [p[f"w_k_{l}"] for l in range(L)]
    _, _, ups, v_base = attention_pipeline(x, wq, wk, p["w_v"], kernels, r, L, qk=qk)
    w1 = best_pair_weight(ups[0], ups[1], v_base)
    o_star = w1 * ups[0] + (1.0 - w1) * ups[1]
    return x + o_star, np.array([w1, 1.0 - w1])


def simplex_grid(L, step=1e-3):
    """All points of the grid ``{k * step}`` on the (L-1)-simplex, for L = 2 or 3."""
    m = int(round(1.0 / step))
    if L == 2:
        a = np.arange(m + 1) * step
        return np.stack([a, 1.0 - a], axis=1)
    i, j = np.meshgrid(np.arange(m + 1), np.arange(m + 1), indexing="ij")
    keep = i + j <= m
    i, j = i[keep], j[keep]
    return np.stack([i * step, j * step, (m - i - j) * step], axis=1)


def grid_minimum(cands, target, lam, step=1e-3):
    """Smallest ``||sum w_l C_l - T||^2 + lam * sum(w)`` over the simplex grid, and its argmin."""
    F = np.stack([c.ravel() for c in cands])
    t = target.ravel()
    G, b, c = F @ F.T, F @ t, t @ t
    W = simplex_grid(len(cands), step)
    obj = np.einsum("ki,ij,kj->k", W, G, W) - 2.0 * W @ b + c + lam * W.sum(axis=1)
    k = int(np.argmin(obj))
    return float(obj[k]), W[k]


def diagonality(a):
    n = len(a)
    return sum(a[i][j] * math.exp(-abs(i - j)) for i in range(n) for j in range(n)) / n
