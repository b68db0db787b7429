"""Strict YAML experiment configuration.

Every section is optional except ``population`` and ``strategy``; omitted
values fall back to the defaults below (GasTurbine-scale population and device
laws, EMNIST-style class imbalance). Unknown keys are rejected.
"""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .cost_model import DeviceLaw, PowerModel
from .data_synth import NOISE_KINDS, PopulationConfig, SizeLaw
from .errors import ConfigError
from .federation import FederationConfig
from .nn_core import CaptureSelector, ModelSpec
from .selection import STRATEGIES


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class PopulationSection(_Strict):
    n_clients: int = Field(50, ge=1)
    n_classes: int = 10
    feature_dim: int = Field(16, ge=1)
    size_mean: float = 514.0
    size_std: float = Field(101.0, ge=0)
    size_min: int = Field(64, ge=1)
    total_samples: Optional[int] = Field(None, ge=1)
    dominant_class_fraction: Optional[float] = 0.6
    validation_size: int = Field(2000, ge=1)


class NoiseEntry(_Strict):
    kind: str
    fraction: float = Field(ge=0, le=1)
    params: dict = Field(default_factory=dict)

    @field_validator("kind")
    @classmethod
    def _known(cls, v):
        if v not in NOISE_KINDS or v == "clean":
            raise ValueError(f"unknown noise kind {v!r}")
        return v


class ModelSection(_Strict):
    hidden: list[int] = Field(default_factory=lambda: [32])
    activation: Literal["relu", "sigmoid", "tanh", "identity"] = "relu"


class AdamSection(_Strict):
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.99, ge=0, lt=1)
    server_lr: float = Field(0.01, gt=0)
    eps: float = Field(1e-3, gt=0)


class StrategySection(_Strict):
    name: Optional[str] = None
    names: Optional[list[str]] = None
    aggregation: Optional[Literal["full", "partial", "momentum"]] = None
    alpha: Union[float, Literal["optimal"]] = 10.0
    kl_variant: Literal["canonical", "paper_eq4"] = "canonical"
    prox_mu: float = Field(0.01, ge=0)
    afl_temperature: float = Field(1.0, gt=0)
    adam: AdamSection = Field(default_factory=AdamSection)

    @model_validator(mode="after")
    def _one_of(self):
        names = self.strategy_names
        if not names:
            raise ValueError("give 'name' or 'names'")
        for n in names:
            if n not in STRATEGIES:
                raise ValueError(f"unknown strategy {n!r}; choose from {sorted(STRATEGIES)}")
        if isinstance(self.alpha, float) and self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        return self

    @property
    def strategy_names(self) -> list[str]:
        if self.names:
            return list(self.names)
        return [self.name] if self.name else []


class TrainingSection(_Strict):
    C: float = 0.2
    T_max: int = Field(100, ge=1)
    local_epochs: int = Field(2, ge=1)
    # two batch sizes are listed per task; a single local batch size is used here
    batch_size: int = Field(32, ge=1)
    lr: float = Field(5e-3, gt=0)
    lr_decay: float = Field(0.994, gt=0, le=1)
    target: Optional[float] = None
    stop_at_target: bool = False


class ProfilingSection(_Strict):
    layer: int = -2
    stage: Literal["pre_activation", "post_activation"] = "pre_activation"
    fusion: Literal["none", "sum_all"] = "none"
    groups: int = Field(1, ge=1)


class DeviceSection(_Strict):
    s_mean: float = Field(0.5, gt=0)
    s_std: float = Field(0.1, ge=0)
    bw_mean: float = Field(0.7, gt=0)
    bw_std: float = Field(0.1, ge=0)
    snr_db: float = 7.0
    bps: float = Field(352.0, gt=0)
    cpb: float = Field(300.0, gt=0)
    p_trans: float = Field(0.75, gt=0)
    p_f: float = Field(0.7, gt=0)


class OutputSection(_Strict):
    dir: str = "runs/out"
    plot: bool = False
    diagnostics: bool = True


class ExperimentConfig(_Strict):
    population: PopulationSection
    strategy: StrategySection
    noise: list[NoiseEntry] = Field(default_factory=list)
    model: ModelSection = Field(default_factory=ModelSection)
    training: TrainingSection = Field(default_factory=TrainingSection)
    profiling: ProfilingSection = Field(default_factory=ProfilingSection)
    devices: DeviceSection = Field(default_factory=DeviceSection)
    seeds: list[int] = Field(default_factory=lambda: [0])
    output: OutputSection = Field(default_factory=OutputSection)

    @model_validator(mode="after")
    def _cross_field(self):
        if self.training.C <= 0 or self.training.C * self.population.n_clients < 1 - 1e-12:
            raise ValueError("C must yield K ≥ 1")
        if self.training.C > 1:
            raise ValueError("C must not exceed 1")
        if sum(n.fraction for n in self.noise) > 1 + 1e-12:
            raise ValueError("noise fractions sum to more than 1")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        return self

    # -- conversions to the runtime objects -------------------------------------------------

    def population_config(self, seed: int) -> PopulationConfig:
        p = self.population
        return PopulationConfig(
            n_clients=p.n_clients,
            n_classes=p.n_classes,
            feature_dim=p.feature_dim,
            size_law=SizeLaw(p.size_mean, p.size_std, p.size_min),
            total_samples=p.total_samples,
            dominant_class_fraction=p.dominant_class_fraction if p.n_classes >= 2 else None,
            validation_size=p.validation_size,
            seed=seed,
        )

    def noise_triples(self):
        return [(n.kind, n.fraction, dict(n.params)) for n in self.noise]

    def model_spec(self) -> ModelSpec:
        p = self.population
        out = p.n_classes if p.n_classes >= 2 else 1
        sizes = (p.feature_dim, *self.model.hidden, out)
        head = "softmax_nll" if p.n_classes >= 2 else "linear_mse"
        return ModelSpec(sizes, (self.model.activation,) * len(self.model.hidden), head)

    def device_law(self) -> DeviceLaw:
        d = self.devices
        return DeviceLaw(d.s_mean, d.s_std, d.bw_mean, d.bw_std, d.snr_db, d.bps, d.cpb)

    def federation_config(self, strategy: str) -> FederationConfig:
        s, t, pr = self.strategy, self.training, self.profiling
        spec = self.model_spec()
        layer = pr.layer if pr.layer >= 0 else max(spec.n_layers + pr.layer, 0)
        return FederationConfig(
            strategy=strategy,
            aggregation=s.aggregation,
            C=t.C,
            T_max=t.T_max,
            local_epochs=t.local_epochs,
            batch_size=t.batch_size,
            lr=t.lr,
            lr_decay=t.lr_decay,
            alpha=s.alpha,
            kl_variant=s.kl_variant,
            capture=CaptureSelector(layer, pr.stage, pr.fusion, pr.groups),
            prox_mu=s.prox_mu,
            adam_beta1=s.adam.beta1,
            adam_beta2=s.adam.beta2,
            server_lr=s.adam.server_lr,
            adam_eps=s.adam.eps,
            afl_temperature=s.afl_temperature,
            target=t.target,
            stop_at_target=t.stop_at_target,
            metric="accuracy" if self.population.n_classes >= 2 else "mse",
            power=PowerModel(self.devices.p_trans, self.devices.p_f),
        )


def _key_path(loc) -> str:
    return ".".join(str(p) for p in loc) or "<root>"


def config_from_dict(data) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a mapping at the top level")
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        err = exc.errors()[0]
        path = _key_path(err["loc"])
        if err["type"] == "extra_forbidden":
            raise ConfigError(f"unknown key '{err['loc'][-1]}'", path) from None
        if err["type"] == "missing":
            raise ConfigError("missing required key", path) from None
        msg = err["msg"].removeprefix("Value error, ")
        raise ConfigError(msg, path if err["loc"] else None) from None


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path} is not valid YAML: {exc}") from None
    return config_from_dict(data)
