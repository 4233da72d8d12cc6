"""Run configuration: flat ``key = value`` text with dotted section keys.

Format rules:

* one ``key = value`` per line; blank lines and lines starting with ``#`` are
  ignored, as is anything after `` #`` on a value line;
* keys are dotted (``train.lr``); a key may appear once;
* values parse as ``true``/``false``, ``none``, int, float, or a bare string;
  a value containing commas is a list of such items.

Sections: ``task``, ``data.*``, ``model.*``, ``train.*``, ``augment.*``,
``output.*``, ``synthetic.*``, ``ablation.*``.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional, Sequence, Union

from ..augmentation import AugmentPolicy
from ..errors import BadConfig, ConfigError
from ..training import TrainConfig

TASKS = ("classify", "detect", "segment")
SECTIONS = ("data", "model", "train", "augment", "output", "synthetic", "ablation")
OUT_ENV = "NEUROPIPE_OUT"


def parse_value(text: str) -> Any:
    text = text.strip()
    if "," in text:
        return [parse_value(t) for t in text.split(",") if t.strip()]
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null", ""):
        return None
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, (list, tuple)):
        if len(value) == 1:
            # a trailing comma keeps one-element lists lists
            return format_value(value[0]) + ","
        return ", ".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if " #" in line:
            line = line.split(" #", 1)[0].rstrip()
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = parse_value(value)
    return out


def apply_overrides(values: dict[str, Any], overrides: Sequence[str]) -> dict[str, Any]:
    out = dict(values)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        k, v = (p.strip() for p in item.split("=", 1))
        out[k] = parse_value(v)
    return out


def dump_config(values: dict[str, Any]) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in sorted(values.items()))


def section(values: dict[str, Any], name: str) -> dict[str, Any]:
    prefix = name + "."
    return {k[len(prefix) :]: v for k, v in values.items() if k.startswith(prefix)}


def as_tuple(v):
    if isinstance(v, list):
        return tuple(as_tuple(x) for x in v)
    return v


def _typed_kwargs(cls, values: dict[str, Any], what: str) -> dict[str, Any]:
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown {what} keys: {', '.join(unknown)}")
    return {k: as_tuple(v) for k, v in values.items()}


@dataclass
class RunConfig:
    task: str
    values: dict[str, Any]
    base_dir: Path = field(default_factory=Path.cwd)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {', '.join(TASKS)}, got {self.task!r}")
        for k in self.values:
            head = k.split(".", 1)[0]
            if k != "task" and ("." not in k or head not in SECTIONS):
                raise ConfigError(f"unknown config key {k!r}")
        if self.train.iterations < 1:
            raise ConfigError("train.iterations must be >= 1")

    def _path(self, value) -> Optional[Path]:
        if value is None:
            return None
        p = Path(str(value))
        return p if p.is_absolute() else (self.base_dir / p).resolve()

    @property
    def data(self) -> dict[str, Any]:
        return section(self.values, "data")

    @property
    def model(self) -> dict[str, Any]:
        return {k: as_tuple(v) for k, v in section(self.values, "model").items()}

    @property
    def train(self) -> TrainConfig:
        try:
            return TrainConfig(**_typed_kwargs(TrainConfig, section(self.values, "train"), "train"))
        except BadConfig as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def augment(self) -> Optional[AugmentPolicy]:
        vals = section(self.values, "augment")
        if not vals.pop("enabled", False):
            return None
        try:
            return AugmentPolicy(**_typed_kwargs(AugmentPolicy, vals, "augment"))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def manifest(self) -> Path:
        p = self._path(self.values.get("data.manifest"))
        if p is None:
            raise ConfigError("data.manifest is required")
        return p

    @property
    def out_dir(self) -> Path:
        env = os.environ.get(OUT_ENV)
        if env:
            return Path(env).resolve()
        return self._path(self.values.get("output.dir", "runs/" + self.task))

    def resolved(self) -> dict[str, Any]:
        """Values with paths made absolute: enough to re-run from any directory."""
        out = dict(self.values)
        out["data.manifest"] = str(self.manifest) if "data.manifest" in out else None
        out["output.dir"] = str(self.out_dir)
        return {k: v for k, v in out.items() if v is not None}


def load_config(path: Union[str, os.PathLike], overrides: Sequence[str] = ()) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {p}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config file {p}: {exc}") from exc
    values = apply_overrides(parse_config_text(text, str(p)), overrides)
    task = values.get("task")
    if task is None:
        raise ConfigError(f"{p}: missing 'task'")
    return RunConfig(str(task), values, p.parent.resolve())
