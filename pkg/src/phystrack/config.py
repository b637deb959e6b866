"""Run configuration: a preset name plus JSON overrides."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import InvalidInputError, ParseError
from .presets import PRESET_NAMES, Preset, get_preset, with_overrides


@dataclass
class RunConfig:
    preset: str = "toy"
    seed: int = 0
    num_sequences: int | None = None
    seq_duration: float | None = None
    corruption: dict = field(default_factory=dict)
    policy: dict = field(default_factory=dict)
    ppo: dict = field(default_factory=dict)
    pretrain_epochs: int = 30
    pretrain_lr: float = 1e-3

    def __post_init__(self):
        if self.preset not in PRESET_NAMES:
            raise InvalidInputError(f"unknown preset {self.preset!r}; choose from {PRESET_NAMES}")
        if self.pretrain_epochs < 0:
            raise InvalidInputError("pretrain_epochs must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict, path=None) -> "RunConfig":
        if not isinstance(d, dict):
            raise ParseError("run config must be a JSON object", path)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            key = sorted(unknown)[0]
            raise ParseError(f"unknown key {key!r}", path, key)
        for key in ("corruption", "policy", "ppo"):
            if key in d and not isinstance(d[key], dict):
                raise ParseError(f"{key!r} must be an object", path, key)
        try:
            return cls(**d)
        except (TypeError, InvalidInputError) as exc:
            raise ParseError(str(exc), path) from None

    def build_preset(self) -> Preset:
        p = get_preset(self.preset)
        kw = {}
        if self.num_sequences is not None:
            kw["num_sequences"] = int(self.num_sequences)
        if self.seq_duration is not None:
            kw["seq_duration"] = float(self.seq_duration)
        for key in ("corruption", "policy", "ppo"):
            over = getattr(self, key)
            if over:
                kw[key] = {**getattr(p, key), **over}
        return with_overrides(p, **kw) if kw else p


def load_config(path) -> RunConfig:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, path, line=exc.lineno) from exc
    except OSError as exc:
        raise ParseError(f"cannot read config: {exc.strerror}", path) from exc
    return RunConfig.from_dict(d, path)
