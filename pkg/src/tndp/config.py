"""INI-style run configuration with embedded per-task defaults.

A config file has up to five sections::

    [run]    task, seed
    [task]   environment options (horizon, pool size, ...)
    [model]  architecture
    [train]  optimisation
    [eval]   evaluation protocol

Any key not listed in the defaults is rejected with :class:`ConfigError`.
"""
from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field
from typing import Any, Optional

TASK_NAMES = ("toy", "decision_al", "topk")

_RUN = {"task": "toy", "seed": 0}

_MODEL = {
    "embed_dim": 32, "n_layers": 6, "n_heads": 8, "mlp_hidden": 128,
    "embedder_depth": 4, "embedder_hidden": 32, "head_hidden": 32, "std_floor": 1e-4,
}

_TRAIN = {
    "epochs": 10000, "batch_size": 16, "lr": 5e-4, "alpha": 0.99, "checkpoint_every": 500,
    "loss_q_weight": 1.0, "reinforce_baseline": False, "grad_clip": 0.0, "grad_steps": 0, "group_size": 1,
}

_TASK = {
    "toy": {"horizon": 1, "n_init": 3, "n_query": 100, "n_pred": 16, "noise_std": 0.1},
    "decision_al": {"horizon": 10, "pool_size": 100, "n_arms": 4, "n_pred": 16, "noise_std": 0.1,
                    "n_samples": 256},
    "topk": {"horizon": 50, "d_x": 6, "n_rows": 500, "k": 3, "n_init": 5, "train_pred_size": 64,
             "train_query_subsample": 100, "eval_pred_size": 256, "benchmarks": ""},
}

_EVAL = {
    "toy": {"episodes": 200, "methods": "TNDP,TNDP-RS,GP-RS,GP-US"},
    "decision_al": {"episodes": 100, "methods": "TNDP,TNDP-RS,GP-RS,GP-US,GP-DUS", "pool_size": 100},
    # topk: ``episodes`` initial-context splits on each of ``n_tables`` tables
    "topk": {"episodes": 5, "n_tables": 5, "methods": "TNDP,TNDP-RS,GP-RS,GP-UCB,GP-EI,GP-PI"},
}
_EVAL_COMMON = {"workers": 1, "timing_repeats": 10}

_TRAIN_OVERRIDES = {
    "toy": {"epochs": 10000},
    "decision_al": {"epochs": 20000},
    "topk": {"epochs": 2000},
}


class ConfigError(ValueError):
    pass


def _coerce(raw: str, default: Any, where: str):
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {raw!r}")
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: expected {type(default).__name__}, got {raw!r}") from None
    return raw.strip()


@dataclass
class RunConfig:
    task: str
    seed: int
    task_opts: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)

    def sections(self) -> dict[str, dict]:
        return {"run": {"task": self.task, "seed": self.seed}, "task": self.task_opts,
                "model": self.model, "train": self.train, "eval": self.eval}

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for name, values in self.sections().items():
            cp[name] = {k: str(v) for k, v in values.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()[:16]

    @property
    def methods(self) -> list[str]:
        return [m.strip() for m in str(self.eval["methods"]).split(",") if m.strip()]


def defaults(task: str) -> RunConfig:
    if task not in TASK_NAMES:
        raise ConfigError(f"unknown task {task!r}; expected one of {', '.join(TASK_NAMES)}")
    train = dict(_TRAIN, **_TRAIN_OVERRIDES[task])
    return RunConfig(task, _RUN["seed"], dict(_TASK[task]), dict(_MODEL), train,
                     dict(_EVAL[task], **_EVAL_COMMON))


def parse_config(text: str, source: str = "<config>", seed: Optional[int] = None) -> RunConfig:
    """Merge ``text`` over the defaults of the task it names."""
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    allowed = {"run", "task", "model", "train", "eval"}
    unknown = [s for s in cp.sections() if s not in allowed]
    if unknown:
        raise ConfigError(f"{source}: unknown section(s): {', '.join(unknown)}")
    task = cp.get("run", "task", fallback=_RUN["task"]).strip()
    cfg = defaults(task)
    targets = {"run": {"task": task, "seed": cfg.seed}, "task": cfg.task_opts, "model": cfg.model,
               "train": cfg.train, "eval": cfg.eval}
    bad = []
    for sec in cp.sections():
        for key, raw in cp.items(sec):
            if key not in targets[sec]:
                bad.append(f"[{sec}] {key}")
                continue
            targets[sec][key] = _coerce(raw, targets[sec][key], f"{source}: [{sec}] {key}")
    if bad:
        raise ConfigError(f"{source}: invalid key(s) for task {task!r}: {', '.join(bad)}")
    cfg.seed = int(targets["run"]["seed"])
    if seed is not None:
        cfg.seed = int(seed)
    _validate(cfg, source)
    return cfg


def load_config(path: Optional[str], seed: Optional[int] = None, task: Optional[str] = None) -> RunConfig:
    if path is None:
        cfg = defaults(task or _RUN["task"])
        if seed is not None:
            cfg.seed = int(seed)
        return cfg
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, source=path, seed=seed)


def _validate(cfg: RunConfig, source: str) -> None:
    t = cfg.task_opts
    if t["horizon"] < 1:
        raise ConfigError(f"{source}: [task] horizon must be >= 1")
    if cfg.task == "decision_al":
        for key in ("pool_size",):
            if t[key] - t["n_arms"] < t["horizon"] or cfg.eval[key] - t["n_arms"] < t["horizon"]:
                raise ConfigError(f"{source}: pool_size too small for horizon {t['horizon']}")
    if cfg.model["embed_dim"] % cfg.model["n_heads"]:
        raise ConfigError(f"{source}: [model] embed_dim must be divisible by n_heads")
    if not 0.0 <= cfg.train["alpha"] <= 1.0:
        raise ConfigError(f"{source}: [train] alpha must lie in [0, 1]")
    for key in ("epochs", "batch_size", "checkpoint_every"):
        if cfg.train[key] < 1:
            raise ConfigError(f"{source}: [train] {key} must be >= 1")
    if cfg.train["lr"] <= 0:
        raise ConfigError(f"{source}: [train] lr must be positive")
    if cfg.train["group_size"] < 1 or cfg.train["batch_size"] % cfg.train["group_size"]:
        raise ConfigError(f"{source}: [train] group_size must be >= 1 and divide batch_size")
