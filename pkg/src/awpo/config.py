"""Run configuration: one YAML document plus dotted ``key=value`` overrides."""

from __future__ import annotations

import copy
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .advantage import ConfigError, HyperParams
from .sim import EnvSpec, JudgeSettings, TrainerConfig
from .theory import TheoryConfig

JUDGE_ENDPOINT_ENV = "AWPO_JUDGE_ENDPOINT"

_SECTIONS = {"hp": HyperParams, "env": EnvSpec, "judge": JudgeSettings, "theory": TheoryConfig}
_TOP = {"algorithm", "iterations", "checkpoint_every", "early_stop", "early_stop_patience", "output_dir"}


@dataclass(frozen=True)
class RunConfig:
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    theory: TheoryConfig = field(default_factory=TheoryConfig)
    output_dir: str = "runs/default"

    def to_dict(self) -> dict:
        t = asdict(self.trainer)
        t["env"]["difficulty_mix"] = list(t["env"]["difficulty_mix"])
        return {**{k: t[k] for k in ("algorithm", "iterations", "checkpoint_every", "early_stop",
                                      "early_stop_patience")},
                "hp": t["hp"], "env": t["env"], "judge": t["judge"],
                "theory": asdict(self.theory), "output_dir": self.output_dir}

    def dump(self, path):
        with open(path, "w", encoding="utf-8") as f:
            yaml.safe_dump(self.to_dict(), f, sort_keys=True)


def _set_dotted(doc: dict, dotted: str, value: Any):
    parts = dotted.split(".")
    node = doc
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(dotted, "cannot descend into a scalar")
    node[parts[-1]] = value


def parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ConfigError(text, "override must look like key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(text, "empty override key")
    try:
        value = yaml.safe_load(raw) if raw.strip() else ""
    except yaml.YAMLError as exc:
        raise ConfigError(key, f"unparseable value {raw!r}") from exc
    return key, value


def _build_section(name: str, cls, data: Any):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(name, "must be a mapping")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown key")
        kwargs[key] = value
    _check_types(name, cls, data)
    try:
        obj = cls(**kwargs)
    except ConfigError as exc:
        if not exc.key.startswith(name + "."):
            raise ConfigError(f"{name}.{exc.key}", str(exc).split(": ", 1)[-1]) from exc
        raise
    except (ValueError, TypeError) as exc:
        msg = str(exc)
        key = msg.split(":", 1)[0] if ":" in msg else "?"
        raise ConfigError(f"{name}.{key}", msg) from exc
    return obj


def _check_types(name: str, cls, data: dict):
    for f in fields(cls):
        if f.name not in data:
            continue
        v = data[f.name]
        default = f.default
        if isinstance(default, bool):
            if not isinstance(v, bool):
                raise ConfigError(f"{name}.{f.name}", "expected a boolean")
        elif isinstance(default, int):
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConfigError(f"{name}.{f.name}", "expected an integer")
        elif isinstance(default, float):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{name}.{f.name}", "expected a number")
        if isinstance(default, str) and not isinstance(v, str):
            raise ConfigError(f"{name}.{f.name}", "expected a string")


def build_config(doc: dict | None, overrides: list[str] | None = None, env: dict | None = None) -> RunConfig:
    """Validate a config document (after overrides) into a RunConfig."""
    doc = copy.deepcopy(doc or {})
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "config must be a mapping")
    for item in overrides or []:
        key, value = parse_override(item)
        _set_dotted(doc, key, value)
    env = os.environ if env is None else env
    if env.get(JUDGE_ENDPOINT_ENV):
        doc.setdefault("judge", {})
        if isinstance(doc["judge"], dict):
            doc["judge"]["endpoint"] = env[JUDGE_ENDPOINT_ENV]
    for key in doc:
        if key not in _TOP and key not in _SECTIONS:
            raise ConfigError(key, "unknown key")
    sections = {name: _build_section(name, cls, doc.get(name)) for name, cls in _SECTIONS.items()}
    top = {k: doc[k] for k in _TOP - {"output_dir"} if k in doc}
    for k, v in top.items():
        if k == "algorithm" and not isinstance(v, str):
            raise ConfigError(k, "expected a string")
        if k == "early_stop" and not isinstance(v, bool):
            raise ConfigError(k, "expected a boolean")
        if k in ("iterations", "checkpoint_every", "early_stop_patience") and (isinstance(v, bool) or not isinstance(v, int)):
            raise ConfigError(k, "expected an integer")
    trainer = TrainerConfig(hp=sections["hp"], env=sections["env"], judge=sections["judge"], **top)
    out = doc.get("output_dir", RunConfig.output_dir)
    if not isinstance(out, str) or not out:
        raise ConfigError("output_dir", "expected a non-empty path")
    return RunConfig(trainer=trainer, theory=sections["theory"], output_dir=out)


def load_config(path: str | os.PathLike | None, overrides: list[str] | None = None, env: dict | None = None) -> RunConfig:
    doc: Any = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError("--config", f"no such file: {p}")
        try:
            doc = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError("--config", f"not valid YAML: {exc}") from exc
    return build_config(doc, overrides, env)
