"""Run configuration: flat ``key = value`` text with dotted sections.

Example::

    # comments start with '#'
    seed = 0
    output_dir = runs/sketch
    arch.channels = 128, 128, 64, 64
    [mode]
    name = constant+perp
    freeze_d = 0

A ``[section]`` line prefixes the following keys with ``section.`` until the
next header. Unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union, get_args, get_origin, get_type_hints

from .losses import LossWeights
from .networks import ArchConfig, ConfigError

OUTPUT_ROOT_ENV = "RELOCGAN_OUTPUT_ROOT"

MODES = ("constant", "constant+perp", "constant->alpha", "constant+cl", "unified", "adaptive",
         "full_finetune_baseline")


@dataclass
class DataSection:
    source_dir: str = ""
    target_dir: str = ""
    heldout_dir: str = ""
    shots: int = 0              # 0 = use every image in target_dir
    domain: str = "target"


@dataclass
class ModeSection:
    name: str = "constant"
    freeze_d: int = 0

    def __post_init__(self):
        if self.name not in MODES:
            raise ConfigError(f"unknown mode {self.name!r}; choose from {', '.join(MODES)}")
        if self.freeze_d < 0:
            raise ConfigError("freeze_d must be >= 0")


@dataclass
class BudgetSection:
    kimg: float = 40.0
    pretrain_kimg: float = 200.0
    alpha_kimg: float = 10.0
    batch_size: int = 8


@dataclass
class OptimSection:
    lr: float = 2.5e-3
    lr_alpha: float = 2.5e-4
    beta1: float = 0.0
    beta2: float = 0.99


@dataclass
class EvalSection:
    fid_samples: int = 1000
    lpips_samples: int = 200
    encoder_seed: int = 1234
    repeat: int = 1


@dataclass
class RunConfig:
    arch: ArchConfig = field(default_factory=ArchConfig)
    data: DataSection = field(default_factory=DataSection)
    mode: ModeSection = field(default_factory=ModeSection)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    budget: BudgetSection = field(default_factory=BudgetSection)
    optim: OptimSection = field(default_factory=OptimSection)
    eval: EvalSection = field(default_factory=EvalSection)
    seed: int = 0
    output_dir: str = "runs/default"

    # ------------------------------------------------------------------ io

    def to_flat(self) -> Dict[str, Any]:
        flat: Dict[str, Any] = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                for sub in dataclasses.fields(value):
                    flat[f"{f.name}.{sub.name}"] = getattr(value, sub.name)
            else:
                flat[f.name] = value
        return flat

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in sorted(self.to_flat().items()))

    def config_hash(self) -> str:
        # output_dir does not change what a run computes.
        text = "".join(f"{k} = {_format(v)}\n" for k, v in sorted(self.to_flat().items()) if k != "output_dir")
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]

    def run_dir(self) -> Path:
        root = os.environ.get(OUTPUT_ROOT_ENV)
        out = Path(self.output_dir)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        return cls.from_flat(parse_flat(text))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RunConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    @classmethod
    def from_flat(cls, flat: Dict[str, str]) -> "RunConfig":
        sections: Dict[str, Dict[str, Any]] = {}
        top: Dict[str, Any] = {}
        hints = get_type_hints(cls)
        for key, raw in flat.items():
            name, _, sub = key.partition(".")
            if name not in hints:
                raise ConfigError(f"unknown config key {key!r}")
            sub_cls = hints[name]
            if dataclasses.is_dataclass(sub_cls):
                if not sub:
                    raise ConfigError(f"{key!r} is a section, not a key")
                sub_hints = get_type_hints(sub_cls)
                if sub not in sub_hints:
                    raise ConfigError(f"unknown config key {key!r}")
                sections.setdefault(name, {})[sub] = _parse(raw, sub_hints[sub], key)
            else:
                if sub:
                    raise ConfigError(f"unknown config key {key!r}")
                top[name] = _parse(raw, sub_cls, key)
        kwargs = dict(top)
        for name, values in sections.items():
            try:
                kwargs[name] = hints[name](**values)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid [{name}] section: {exc}") from exc
        return cls(**kwargs)

    def with_overrides(self, **flat: Any) -> "RunConfig":
        current = {k: _format(v) for k, v in self.to_flat().items()}
        for k, v in flat.items():
            current[k.replace("__", ".")] = _format(v)
        return RunConfig.from_flat(current)


def parse_flat(text: str) -> Dict[str, str]:
    out: Dict[str, str] = {}
    prefix = ""
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            prefix = line[1:-1].strip()
            prefix = prefix + "." if prefix else ""
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = prefix + key
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _format(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(raw: str, typ: Any, key: str) -> Any:
    origin = get_origin(typ)
    args = get_args(typ)
    if origin is Union and type(None) in args:
        if raw.strip().lower() in ("none", ""):
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _parse(raw, inner, key)
    try:
        if origin in (tuple, Tuple, list, List):
            item = args[0] if args else str
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            return tuple(_parse(p, item, key) for p in parts)
        if typ is bool:
            low = raw.strip().lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from exc
