"""Flat ``key = value`` run configuration with namespaced dotted keys."""
from __future__ import annotations

from pathlib import Path


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, object] = {
    "seed": 0,
    "out_dir": "runs",
    # synthetic world
    "world.n_classes": 8,
    "world.motifs_per_class": 4,
    "world.dim": 8,
    "world.side": 8,
    "world.rho": 0.5,
    "world.sigma": 0.1,
    "world.concentration": 0.3,
    "world.seed": 0,
    "data.train": 2048,
    "data.val": 256,
    # quantizer
    "vq.n_semantic": 16,
    "vq.n_detail": 64,
    "vq.beta": 0.25,
    "vq.lambda_rec": 1.0,
    "vq.stage1_steps": 500,
    "vq.stage2_steps": 1000,
    "vq.batch_size": 512,
    "vq.lr": 1e-2,
    "vq.dead_code_patience": 1000,
    # autoregressive model
    "ar.d_model": 64,
    "ar.n_layers": 4,
    "ar.n_heads": 4,
    "ar.head_layers": 2,
    "ar.compress_dim": 16,
    "ar.window": 3,
    "ar.cond_tokens": 1,
    "ar.lambda_s": 2.0,
    "ar.lambda_cce": 0.0,
    "ar.n_clusters": 1,
    "ar.mlp_ratio": 4,
    "ar.paradigm": "fused_hierarchical",
    "train.steps": 2000,
    "train.batch_size": 16,
    "train.lr": 1e-4,
    "train.weight_decay": 0.05,
    "train.beta1": 0.9,
    "train.beta2": 0.95,
    "train.eps": 1e-8,
    "train.class_dropout": 0.1,
    "train.eval_every": 200,
    # sampling
    "sample.count": 512,
    "sample.temperature": 1.0,
    "sample.top_k": 0,
    "sample.top_p": 1.0,
    "sample.s_start": 1.75,
    "sample.s_end": 3.0,
    "sample.attention_guided": True,
    "sample.alpha_floor": 0.5,
    "sample.alpha_mode": "normalized",
    "sample.aggregate": "final_mean",
    "sample.fixed_scale": None,
    "sample.guidance": True,
    # experiments
    "rearrange.n_clusters": None,
    "sweep.sizes": [16, 64, 256, 1024],
    "sweep.vq_steps": 1500,
    "sweep.ar_steps": 300,
    "sweep_cfg.starts": [1.5, 1.75, 2.0],
    "sweep_cfg.ends": [2.5, 3.0, 3.5],
    "sweep_cfg.count": 128,
    "code_distance.buckets": [0, 1, 2, 4, 8, 16, 32, 64, 128, 256, 512],
    "code_distance.trials": 100,
}

_OPTIONAL_FLOAT = {"sample.fixed_scale"}
_OPTIONAL_INT = {"rearrange.n_clusters"}


def _parse(key: str, text: str):
    default = DEFAULTS[key]
    text = text.strip()
    try:
        if key in _OPTIONAL_FLOAT or key in _OPTIONAL_INT:
            if text.lower() in ("", "none"):
                return None
            return float(text) if key in _OPTIONAL_FLOAT else int(text)
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0"):
                raise ValueError(text)
            return low in ("true", "1")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, list):
            kind = float if any(isinstance(v, float) for v in default) else int
            return [kind(v) for v in text.split(",") if v.strip()]
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig(dict):
    """Dict of every key in DEFAULTS; unknown keys are rejected."""

    def __init__(self, overrides: dict | None = None):
        super().__init__(DEFAULTS)
        for k, v in (overrides or {}).items():
            self.set(k, v)

    def set(self, key: str, value) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self[key] = _parse(key, value) if isinstance(value, str) else value

    def section(self, prefix: str) -> dict:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.items() if k.startswith(p)}

    def dumps(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.items())

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        cfg = cls()
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in DEFAULTS:
                raise ConfigError(f"line {n}: unknown config key {key!r}")
            cfg.set(key, val)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.loads(Path(path).read_text(encoding="utf-8"))
