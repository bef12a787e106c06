"""Flat key=value run configuration with CLI overrides.

One namespace covers model, sampler, and trainer knobs so a manifest can
reproduce a run from a single snapshot.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from . import adapter as adapter_mod
from .model import ModelConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # model geometry
    resolution: int = 128
    channels: int = 64
    heads: int = 2
    mlp_width: int = 128
    n_blocks: int = 2
    n_mask_tokens: int = 4
    connection: str = adapter_mod.PARALLEL
    adapter_blocks: str = "second_only"
    crm: str = adapter_mod.GUIDED_GATE
    # sampler
    n_sample: int = 4
    temperature: float = 1.0
    st_mode: str = "per_step"
    # trainer
    learning_rate: float = 0.001
    batch_size: int = 4
    epochs: int = 60
    adapter_epochs: int = 60
    w_sam: float = 1.0
    w_pa: float = 1.0
    w_u: float = 1.0
    w_iou: float = 1.0
    dilation_d: int = 3
    seed: int = 0

    def model_config(self):
        return ModelConfig(
            resolution=self.resolution,
            channels=self.channels,
            heads=self.heads,
            mlp_width=self.mlp_width,
            n_blocks=self.n_blocks,
            n_mask_tokens=self.n_mask_tokens,
            adapter_connection=self.connection,
            adapter_blocks=self.adapter_blocks,
            crm=self.crm,
        )

    def train_config(self, phase="baseline"):
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs if phase == "baseline" else self.adapter_epochs,
            w_sam=self.w_sam,
            w_pa=self.w_pa,
            w_u=self.w_u,
            w_iou=self.w_iou,
            dilation_d=self.dilation_d,
            seed=self.seed,
            n_sample=self.n_sample,
            temperature=self.temperature,
            st_mode=self.st_mode,
        )

    def to_dict(self):
        return dataclasses.asdict(self)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name, raw, line_no=None):
    field = _FIELDS[name]
    where = f"line {line_no}: " if line_no is not None else ""
    try:
        if field.type in ("int", int):
            return int(raw)
        if field.type in ("float", float):
            return float(raw)
        return str(raw)
    except ValueError as exc:
        raise ConfigError(f"{where}bad value for key {name!r}: {raw!r}") from exc


def parse_config_file(path):
    """key=value lines, '#' comments; returns a plain dict of typed values."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"line {line_no}: expected key=value, got {stripped!r}")
            key, raw = (part.strip() for part in stripped.split("=", 1))
            if key not in _FIELDS:
                raise ConfigError(f"line {line_no}: unknown key {key!r}")
            out[key] = _coerce(key, raw, line_no)
    return out


def build_run_config(file_path=None, overrides=None):
    values = {}
    if file_path is not None:
        values.update(parse_config_file(file_path))
    for key, raw in (overrides or {}).items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, raw) if isinstance(raw, str) else raw
    try:
        return RunConfig(**values)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def write_config_file(path, config):
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in config.to_dict().items():
            fh.write(f"{key} = {value}\n")
