"""Checkpoint container: a directory holding ``params.safetensors`` (named
tensors, byte-stable) and ``meta.json`` (format version, config snapshot,
RNG state, epoch counter)."""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import torch
from safetensors.torch import load_file, save_file

from .config import RunConfig
from .errors import CheckpointError
from .model import QualityModel

FORMAT_VERSION = 1
PARAMS_FILE = "params.safetensors"
META_FILE = "meta.json"


@dataclass
class Checkpoint:
    params: Dict[str, torch.Tensor]
    config: RunConfig
    epoch: int = 0
    rng_state: Optional[torch.Tensor] = None
    extra: Dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: QualityModel, config: RunConfig, epoch: int, **extra) -> "Checkpoint":
        return cls(model.named_state(), config, epoch, torch.random.get_rng_state(), dict(extra))

    @property
    def checkpoint_id(self) -> str:
        return f"{self.config.digest()}-e{self.epoch}"

    def save(self, path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        tensors = {k: v.detach().cpu().contiguous() for k, v in self.params.items()}
        save_file(tensors, str(path / PARAMS_FILE))
        meta = {
            "format_version": FORMAT_VERSION,
            "epoch": self.epoch,
            "config": self.config.to_dict(),
            "rng_state": None if self.rng_state is None
            else base64.b64encode(self.rng_state.numpy().tobytes()).decode("ascii"),
            "extra": self.extra,
        }
        (path / META_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        try:
            meta = json.loads((path / META_FILE).read_text(encoding="utf-8"))
            params = load_file(str(path / PARAMS_FILE))
        except (OSError, ValueError) as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
        if meta.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint format {meta.get('format_version')!r}")
        rng = meta.get("rng_state")
        rng_state = None
        if rng is not None:
            rng_state = torch.frombuffer(bytearray(base64.b64decode(rng)), dtype=torch.uint8).clone()
        return cls(params, RunConfig.from_dict(meta["config"]), int(meta["epoch"]), rng_state, meta.get("extra", {}))

    def build_model(self) -> QualityModel:
        model = QualityModel(self.config.model)
        try:
            model.load_state_dict(self.params, strict=True)
        except RuntimeError as exc:
            raise CheckpointError(f"checkpoint does not match the configured model: {exc}") from exc
        model.eval()
        return model
