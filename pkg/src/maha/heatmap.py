"""Grayscale (plain PGM) and CSV export of attention matrices, plus a locality statistic."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._io import csv_text, fmt
from .errors import ConfigError, EvaluationError, ShapeError

NORMALIZATIONS = ("global_max", "per_row")
FORMATS = ("pgm", "csv")
MAXVAL = 255


@dataclass(frozen=True)
class HeatmapSpec:
    scale: int = 1
    normalization: str = "global_max"
    format: str = "pgm"

    def __post_init__(self):
        if self.normalization not in NORMALIZATIONS:
            raise ConfigError(f"unknown normalization {self.normalization!r}; expected one of {NORMALIZATIONS}")
        if self.format not in FORMATS:
            raise ConfigError(f"unknown heatmap format {self.format!r}; expected one of {FORMATS}")
        if int(self.scale) != self.scale or self.scale < 0:
            raise ConfigError(f"scale index must be a non-negative integer, got {self.scale}")

    def check_depth(self, n_scales):
        """Raise unless ``scale`` addresses one of ``n_scales`` attention scales (1-based)."""
        if not 1 <= self.scale <= n_scales:
            raise ConfigError(f"scale {self.scale} outside 1..{n_scales}")


def _square(a):
    a = np.asarray(getattr(a, "data", a), dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.size == 0:
        raise ShapeError(f"expected a non-empty square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise EvaluationError("attention matrix has non-finite entries")
    return a


def quantize(a, normalization="global_max"):
    """Pixel values ``floor(255 * (1 - a / norm) + 0.5)``: the largest weight is black (0)."""
    a = _square(a)
    if normalization == "global_max":
        norm = np.full((a.shape[0], 1), a.max())
    elif normalization == "per_row":
        norm = a.max(axis=1, keepdims=True)
    else:
        raise ConfigError(f"unknown normalization {normalization!r}")
    safe = np.where(norm > 0, norm, 1.0)
    scaled = np.where(norm > 0, a / safe, 0.0)
    pix = np.floor(MAXVAL * (1.0 - scaled) + 0.5)
    return np.clip(pix, 0, MAXVAL).astype(np.int64)


def export_heatmap(a, spec=None):
    """Encode ``a`` as plain-text PGM (P2) or row-major CSV bytes."""
    spec = spec or HeatmapSpec()
    a = _square(a)
    if spec.format == "csv":
        return csv_text(None, [[fmt(x) for x in row] for row in a]).encode("ascii")
    pix = quantize(a, spec.normalization)
    h, w = pix.shape
    lines = ["P2", f"{w} {h}", str(MAXVAL)]
    lines += [" ".join(str(int(v)) for v in row) for row in pix]
    return ("\n".join(lines) + "\n").encode("ascii")


def parse_pgm(data):
    """Decode plain PGM bytes into ``(width, height, maxval, pixels)``."""
    text = data.decode("ascii") if isinstance(data, bytes) else data
    tokens = []
    for line in text.splitlines():
        tokens += line.split("#", 1)[0].split()
    if not tokens or tokens[0] != "P2":
        raise ValueError("not a plain PGM (P2) stream")
    w, h, maxval = (int(t) for t in tokens[1:4])
    values = [int(t) for t in tokens[4:]]
    if len(values) != w * h:
        raise ValueError(f"expected {w * h} pixels, found {len(values)}")
    return w, h, maxval, np.array(values, dtype=np.int64).reshape(h, w)


def diagonality_score(a):
    """``sum_ij a_ij exp(-|i - j|) / n``; 1.0 when all mass sits on the diagonal."""
    a = _square(a)
    n = a.shape[0]
    idx = np.arange(n)
    decay = np.exp(-np.abs(idx[:, None] - idx[None, :]))
    return float(np.sum(a * decay) / n)


def uniform_diagonality(n):
    """Closed form of the score for the uniform ``n x n`` matrix (each entry ``1/n``)."""
    # sum_ij e^{-|i-j|} = n + 2 * sum_{k=1}^{n-1} (n - k) e^{-k}
    total = n + 2.0 * sum((n - k) * math.exp(-k) for k in range(1, n))
    return total / (n * n)
