"""Typed run configuration and its flat ``[section] key = value`` file format.

Values are written as JSON literals (quoted strings, ``true``/``false``,
numbers, arrays), so the files are also valid TOML.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Tuple

from .errors import ConfigError
from .sampling import PriorEquatorParams, SamplerConfig

LOSS_KINDS = ("norm_in_norm", "l1", "l2")


@dataclass
class ModelConfig:
    backbone: str = "toy"
    backbone_channels: Tuple[int, ...] = (16, 32, 64, 128, 128)
    backbone_reductions: Tuple[int, ...] = (4, 8, 16, 32, 32)
    input_side: int = 224
    freeze_backbone: bool = True
    k_patches: int = 10
    embed_dim: int = 128
    heads: int = 8
    hpa_groups: int = 8
    hpa_gn_groups: int = 4
    dcn_kernel: int = 3
    dcn_groups: int = 4
    ffn_ratio: int = 4
    use_pdff: bool = True
    use_hpa: bool = True
    use_pa: bool = True
    init_seed: int = 0

    def __post_init__(self):
        self.backbone_channels = tuple(int(c) for c in self.backbone_channels)
        self.backbone_reductions = tuple(int(r) for r in self.backbone_reductions)
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.k_patches < 1:
            raise ConfigError("k_patches must be >= 1")
        if self.use_hpa and not self.use_pdff:
            raise ConfigError("use_hpa requires use_pdff (HPA consumes the PDFF output)")


@dataclass
class LossConfig:
    kind: str = "norm_in_norm"
    gamma: float = 1.0
    omega: float = 2.0
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss {self.kind!r}")
        if self.gamma not in (1, 2):
            raise ConfigError("gamma must be 1 or 2")
        if self.omega <= 0 or self.epsilon <= 0:
            raise ConfigError("omega and epsilon must be positive")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 8
    epochs: int = 25
    optimizer: str = "adam"
    train_fraction: float = 0.8
    test_fraction: float = 0.2
    seed: int = 0
    eval_seed: int = 2024
    threads: int = 1

    def __post_init__(self):
        if abs(self.train_fraction + self.test_fraction - 1.0) > 1e-9:
            raise ConfigError("train/test fractions must sum to 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.optimizer != "adam":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")


@dataclass
class RunConfig:
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    prior: PriorEquatorParams = field(default_factory=PriorEquatorParams)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.sampler.k != self.model.k_patches:
            raise ConfigError(f"sampler.k={self.sampler.k} but model.k_patches={self.model.k_patches}")
        if self.sampler.network_side != self.model.input_side:
            raise ConfigError("sampler.network_side must equal model.input_side")

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return {f.name: dataclasses.asdict(getattr(self, f.name)) for f in dataclasses.fields(self)}

    def to_text(self) -> str:
        lines = []
        for section, values in self.to_dict().items():
            lines.append(f"[{section}]")
            for key, val in values.items():
                if isinstance(val, tuple):
                    val = list(val)
                lines.append(f"{key} = {json.dumps(val)}")
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def from_dict(cls, data: Dict[str, Dict[str, Any]]) -> "RunConfig":
        kinds = {f.name: f.default_factory for f in dataclasses.fields(cls)}
        parts = {}
        for section, factory in kinds.items():
            values = dict(data.get(section, {}))
            known = {f.name for f in dataclasses.fields(factory())}
            unknown = set(values) - known
            if unknown:
                raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
            try:
                parts[section] = factory().__class__(**values)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"[{section}]: {exc}") from exc
        extra = set(data) - set(kinds)
        if extra:
            raise ConfigError(f"unknown sections: {sorted(extra)}")
        return cls(**parts)

    @classmethod
    def load(cls, path) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(Path(path).read_text(encoding="utf-8"))
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        data = {}
        for section in parser.sections():
            data[section] = {}
            for key, raw in parser.items(section):
                try:
                    data[section][key] = json.loads(raw)
                except json.JSONDecodeError:
                    raise ConfigError(f"{path}: [{section}] {key}: cannot parse {raw!r}") from None
        return cls.from_dict(data)

    def with_overrides(self, **sections) -> "RunConfig":
        """Copy with per-section field overrides, e.g. ``sampler={"k": 5}``."""
        data = self.to_dict()
        for section, values in sections.items():
            data[section].update(values)
        return RunConfig.from_dict(data)
