"""JSON run configuration: documented defaults, strict key checking, flag overrides."""
from __future__ import annotations

import copy
import json

from .aggregate import METHODS, NE_RESPONSES, TARGET_KINDS, SolverConfig
from .errors import ConfigError
from .flops import METRICS, POLICIES
from .heatmap import FORMATS
from .pyramid import ADAPTIVE_POOL, STRIDED_CONV
from .toymodel import TASKS, ToyModelConfig

# Every recognised key with its default.  ``policy: "both"`` benches both scale
# policies; ``method: "all"`` runs co, ne and mean from the same seed.
DEFAULTS = {
    "model": {
        "n": 32,
        "d": 32,
        "d_k": 8,
        "L": 4,
        "r": 2,
        "downsample_kind": STRIDED_CONV,
        "heads": 1,
        "include_base_scale": False,
        "gating": True,
        "dilation": 2,
        "conv_before_qk": True,
        "layers": 2,
        "vocab": 16,
        "d_ff": 64,
    },
    "solver": {
        "method": "co",
        "lambda": 0.1,
        "iters": 50,
        "step": 1.0,
        "tol": 1e-8,
        "target_kind": "value_pathway",
        "ne_response": "renormalized",
    },
    "train": {
        "task": "copy",
        "lr": 0.1,
        "steps": 500,
        "seed": 0,
        "batch": 4,
        "shift": 0,
        "scales": [2, 3, 4],
    },
    "bench": {
        "lengths": [128, 256, 512, 1024, 2048, 4096],
        "policy": "both",
        "metric": "score_entries",
        "d": 64,
        "timing": False,
        "timing_lengths": [256, 512, 1024, 2048],
    },
    "output": {
        "directory": "out",
        "formats": ["pgm"],
        "layer": 0,
        "heatmap_scales": None,
        "normalization": "global_max",
    },
}

GRADCHECK_MODEL = {"n": 16, "d": 8, "d_k": 4, "L": 2}
GRADCHECK_MAX_N = 32


def _merge(base, override, where="config"):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown key {where}.{key}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}.{key} must be an object")
            out[key] = _merge(base[key], value, f"{where}.{key}")
        else:
            out[key] = value
    return out


def load(path=None, text=None):
    """Return ``(resolved, explicit)``: the merged config and the raw user document."""
    raw = {}
    if path is not None:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if text:
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON config: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
    return _merge(DEFAULTS, raw), raw


def override(cfg, section, key, value):
    if value is not None:
        cfg[section][key] = value
    return cfg


def validate(cfg):
    m, s, t, b, o = (cfg[k] for k in ("model", "solver", "train", "bench", "output"))
    if m["heads"] != 1:
        raise ConfigError(f"only a single head is supported, got heads={m['heads']}")
    if m["downsample_kind"] not in (STRIDED_CONV, ADAPTIVE_POOL):
        raise ConfigError(f"unknown downsample_kind {m['downsample_kind']!r}")
    if s["method"] not in METHODS + ("all",):
        raise ConfigError(f"unknown aggregation method {s['method']!r}")
    if s["target_kind"] not in TARGET_KINDS:
        raise ConfigError(f"unknown target_kind {s['target_kind']!r}")
    if s["ne_response"] not in NE_RESPONSES:
        raise ConfigError(f"unknown ne_response {s['ne_response']!r}")
    if t["task"] not in TASKS:
        raise ConfigError(f"unknown task {t['task']!r}")
    if b["policy"] not in POLICIES + ("both",):
        raise ConfigError(f"unknown scale policy {b['policy']!r}")
    if b["metric"] not in METRICS:
        raise ConfigError(f"unknown metric {b['metric']!r}")
    for fmt_name in o["formats"]:
        if fmt_name not in FORMATS:
            raise ConfigError(f"unknown output format {fmt_name!r}")
    return cfg


def solver_config(cfg):
    s = cfg["solver"]
    return SolverConfig(lam=s["lambda"], iters=s["iters"], step=s["step"], tol=s["tol"],
                        target_kind=s["target_kind"], ne_response=s["ne_response"])


def toy_config(cfg, method=None, **changes):
    m, t = cfg["model"], cfg["train"]
    fields = dict(
        layers=m["layers"], d=m["d"], d_k=m["d_k"], vocab=m["vocab"], n=m["n"], r=m["r"], L=m["L"],
        method=method or cfg["solver"]["method"], lr=t["lr"], steps=t["steps"], batch=t["batch"],
        seed=t["seed"], task=t["task"], shift=t["shift"], d_ff=m["d_ff"],
        downsample_kind=m["downsample_kind"], include_base_scale=m["include_base_scale"],
        gating=m["gating"], dilation=m["dilation"], conv_before_qk=m["conv_before_qk"],
        solver=solver_config(cfg),
    )
    fields.update(changes)
    return ToyModelConfig(**fields)


def dumps(cfg):
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"
