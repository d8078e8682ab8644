"""Experiment configuration: nested dataclasses with a YAML representation."""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from fcsim import channel as ch
from fcsim.objective import LossConfig

MODES = ("e2e", "three_stage", "three_stage_distributed")


class ConfigError(ValueError):
    pass


def _coerce(typ, body: dict) -> dict:
    """Cast numeric strings and ints to the field's declared float type."""
    hints = typing.get_type_hints(typ)
    out = dict(body)
    for name, value in body.items():
        wants_float = float in (typing.get_args(hints[name]) or (hints[name],))
        if wants_float and isinstance(value, (int, str)) and not isinstance(value, bool):
            try:
                out[name] = float(value)
            except ValueError as exc:
                raise ConfigError(f"{name}: expected a number, got {value!r}") from exc
    return out


@dataclass
class ChannelConfig:
    kind: str = "orth_awgn"
    n_nodes: int = 4
    k_n: int = 2
    p_t: float = 1.0
    capacity_bits: float | None = None
    sigma_z2: float | None = None

    def spec(self) -> ch.ChannelSpec:
        return ch.ChannelSpec.make(self.kind, self.n_nodes, self.k_n, self.p_t, self.noise_variance())

    def noise_variance(self) -> float:
        if self.capacity_bits is not None and self.sigma_z2 is not None:
            raise ConfigError("give either capacity_bits or sigma_z2, not both")
        if self.capacity_bits is not None:
            return ch.sigma2_for(self.kind, self.capacity_bits, self.k_n, self.n_nodes, self.p_t)
        return 0.0 if self.sigma_z2 is None else float(self.sigma_z2)


@dataclass
class TrainingConfig:
    mode: str = "e2e"
    decoder: str = "standard"
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    E: int = 5
    max_rounds: int = 10
    stage1_epochs: int = 20
    stage2_epochs: int = 20
    stage3_epochs: int = 10
    stop_delta: float = 0.1
    patience: int = 5
    min_delta: float = 1e-4
    seed: int = 0
    encoder_hidden: list[int] = field(default_factory=lambda: [64, 64])
    decoder_hidden: list[int] = field(default_factory=lambda: [64, 64])
    helper_hidden: int = 32
    inner_dim: int = 16


@dataclass
class DataConfig:
    generator: str = "mixture"
    path: str | None = None
    V_size: int = 4
    latent_dim: int = 16
    view_dim: int = 8
    overlap_frac: float = 0.25
    B: int = 4096
    separation: float = 6.0
    noise_std: float = 0.25
    fn: str = "product"
    seed: int = 0


@dataclass
class OutputConfig:
    dir: str = "runs/default"


@dataclass
class ExperimentConfig:
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def validate(self) -> "ExperimentConfig":
        c, t, d = self.channel, self.training, self.data
        try:
            c.spec()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if t.mode not in MODES:
            raise ConfigError(f"unknown mode {t.mode!r}")
        if d.generator not in ("mixture", "nomographic"):
            raise ConfigError(f"unknown generator {d.generator!r}")
        classification = d.generator == "mixture"
        if t.mode != "e2e" and not classification:
            raise ConfigError("three-stage training needs a classification dataset")
        if classification != (self.loss.distortion == "neg_log_likelihood"):
            raise ConfigError("classification uses neg_log_likelihood, regression squared_error")
        if t.decoder == "poe_shared" and c.kind != "orth_awgn":
            raise ConfigError("the PoE decoder needs the orthogonal AWGN channel")
        if t.mode == "three_stage_distributed" and self.loss.method != "ib":
            raise ConfigError("distributed stage 3 uses the IB loss")
        if t.mode == "three_stage_distributed" and (c.kind == "orth_awgn") != (t.decoder == "poe_shared"):
            raise ConfigError("distributed stage 3 pairs AWGN with poe_shared and GMAC with standard")
        for name in ("epochs", "E", "max_rounds", "stage1_epochs", "stage2_epochs", "stage3_epochs"):
            if getattr(t, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if t.batch_size < 1 or t.lr < 0:
            raise ConfigError("batch_size must be positive and lr non-negative")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = raw or {}
        unknown = set(raw) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown sections {sorted(unknown)}")
        sections = {
            "channel": ChannelConfig, "loss": LossConfig, "training": TrainingConfig,
            "data": DataConfig, "output": OutputConfig,
        }
        kw = {}
        for name, typ in sections.items():
            body = raw.get(name) or {}
            names = {f.name for f in dataclasses.fields(typ)}
            bad = set(body) - names
            if bad:
                raise ConfigError(f"unknown keys in {name}: {sorted(bad)}")
            try:
                kw[name] = typ(**_coerce(typ, body))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{name}: {exc}") from exc
        return cls(**kw)

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(yaml.safe_load(text))

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.loads(Path(path).read_text())

    def dump(self, path: str | Path):
        Path(path).write_text(self.dumps())
