"""INI experiment configs: parse with line/key diagnostics, dump round-trip stable.

Sections are ``[stack]``, ``[encoder]``, ``[plan]``, ``[train]`` and
``[experiment]``. Every key is optional; missing keys take the dataclass
defaults. Lists are comma separated, ``none`` stands for an absent value.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from typing import Any

from .decoder import StackConfig
from .encoder import AllocationPlan, EncoderConfig
from .training import TASKS, TrainConfig


class ConfigFileError(ValueError):
    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"key {key!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.line, self.key = line, key


@dataclass
class ExperimentSettings:
    task: str = "regression_stack"
    seeds: list[int] = field(default_factory=lambda: [0])
    label: str = ""
    teacher_gain: float = 0.3
    eval_size: int = 256

    def __post_init__(self):
        self.seeds = list(self.seeds)
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {sorted(TASKS)}, got {self.task!r}")
        if not self.seeds:
            raise ValueError("need at least one seed")
        if self.teacher_gain <= 0 or self.eval_size < 1:
            raise ValueError("teacher_gain and eval_size must be positive")


@dataclass
class ExperimentConfig:
    stack: StackConfig = field(default_factory=StackConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    plan: AllocationPlan = field(default_factory=AllocationPlan)
    train: TrainConfig = field(default_factory=TrainConfig)
    experiment: ExperimentSettings = field(default_factory=ExperimentSettings)

    def encoder_config(self) -> EncoderConfig:
        """The [encoder] section with the [plan] attached when it enables any family."""
        return self.encoder.replace(plan=_enabled(self.plan))


SECTIONS = ("stack", "encoder", "plan", "train", "experiment")
_CLASSES = {
    "stack": StackConfig,
    "encoder": EncoderConfig,
    "plan": AllocationPlan,
    "train": TrainConfig,
    "experiment": ExperimentSettings,
}
_SKIP = {"encoder": {"plan"}}

# Field kinds, spelled out rather than read from string annotations.
_INT_LISTS = {"k_acm", "k_asm", "k_out", "attn_groups", "ffn_groups", "lr_drop_steps", "seeds"}
_OPTIONAL_LISTS = {"k_acm", "k_asm", "k_out", "attn_groups", "ffn_groups"}  # none = built-in default
_FLOAT_PAIRS = {"betas"}
_OPTIONAL_FLOATS = {"grad_clip"}


def _keys(section: str) -> list[str]:
    return [f.name for f in fields(_CLASSES[section]) if f.name not in _SKIP.get(section, ())]


def _default(section: str, key: str) -> Any:
    return getattr(_CLASSES[section](), key)


def _parse_value(section: str, key: str, raw: str) -> Any:
    text = raw.strip()
    if key in _INT_LISTS:
        if text.lower() == "none":
            if key in _OPTIONAL_LISTS:
                return None
            if key == "lr_drop_steps":
                return []
            raise ValueError(f"{key} needs at least one value")
        return [int(t) for t in text.split(",") if t.strip()] if text else []
    if key in _FLOAT_PAIRS:
        parts = [float(t) for t in text.split(",")]
        if len(parts) != 2:
            raise ValueError(f"expected two comma-separated numbers, got {text!r}")
        return tuple(parts)
    if key in _OPTIONAL_FLOATS:
        return None if text.lower() == "none" else float(text)
    default = _default(section, key)
    if isinstance(default, bool):
        if text.lower() in ("true", "yes", "1"):
            return True
        if text.lower() in ("false", "no", "0"):
            return False
        raise ValueError(f"expected true/false, got {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def _format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _line_index(text: str) -> dict[tuple[str, str], int]:
    """Map (section, key) to its 1-based line, for diagnostics configparser cannot give."""
    index: dict[tuple[str, str], int] = {}
    section = None
    for n, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s[0] in "#;":
            continue
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1].strip()
            index[(section, "")] = n
        elif section is not None and ("=" in s or ":" in s):
            key = s.split("=", 1)[0] if "=" in s else s.split(":", 1)[0]
            index.setdefault((section, key.strip().lower()), n)
    return index


def parse(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.DuplicateOptionError as exc:
        raise ConfigFileError(f"duplicate key in [{exc.section}]", exc.lineno, exc.option) from None
    except configparser.DuplicateSectionError as exc:
        raise ConfigFileError(f"duplicate section [{exc.section}]", exc.lineno) from None
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigFileError("key outside any [section]", exc.lineno) from None
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if exc.errors else None
        raise ConfigFileError("malformed line", line) from None
    lines = _line_index(text)
    built: dict[str, Any] = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigFileError(f"unknown section [{section}]; expected one of {list(SECTIONS)}", lines.get((section, "")))
    # [plan] is built before [encoder] so a lors encoder validates against it
    for section in ("stack", "plan", "encoder", "train", "experiment"):
        values = {}
        if parser.has_section(section):
            allowed = _keys(section)
            for key, raw in parser.items(section):
                line = lines.get((section, key))
                if key not in allowed:
                    raise ConfigFileError(f"unknown key in [{section}]", line, key)
                try:
                    values[key] = _parse_value(section, key, raw)
                except ValueError as exc:
                    raise ConfigFileError(str(exc), line, key) from None
        if section == "encoder":
            values["plan"] = _enabled(built["plan"])
        try:
            built[section] = _CLASSES[section](**values)
        except ValueError as exc:
            raise ConfigFileError(f"[{section}] {exc}", lines.get((section, ""))) from None
    return ExperimentConfig(**built)


def _enabled(plan: AllocationPlan) -> AllocationPlan | None:
    return plan if (plan.attn_groups is not None or plan.ffn_groups is not None) else None


def load(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse(fh.read())


def dump(cfg: ExperimentConfig) -> str:
    out = []
    for section in SECTIONS:
        obj = getattr(cfg, section)
        out.append(f"[{section}]")
        out.extend(f"{key} = {_format_value(getattr(obj, key))}" for key in _keys(section))
        out.append("")
    return "\n".join(out)


def apply_overrides(cfg: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    """Apply ``section.key=value`` overrides by re-parsing the dumped document."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.read_string(dump(cfg))
    for item in overrides:
        target, sep, value = item.partition("=")
        section, dot, key = target.strip().partition(".")
        if not sep or not dot:
            raise ConfigFileError(f"override {item!r} is not section.key=value")
        if section not in SECTIONS or key not in _keys(section):
            raise ConfigFileError("unknown override target", key=target.strip())
        parser.set(section, key, value.strip())
    lines = []
    for section in SECTIONS:
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {v}" for k, v in parser.items(section))
    return parse("\n".join(lines) + "\n")
