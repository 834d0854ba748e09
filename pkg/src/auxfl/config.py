"""Experiment configuration: a strict JSON schema and the data pipeline it drives."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .costs import DeviceProfile
from .data import FlowDataset, SynthSpec, derive_aux_labels, load_flows, partition, synth_generate, train_val_test
from .errors import ConfigError
from .mtl import AUXILIARY, MAIN, TaskSpec
from .sim import Experiment, RoundConfig, build_model, parse_baseline

CSV_AUX_COLUMNS = ("duration", "bandwidth")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SynthOptions(_Strict):
    n_samples: int = Field(3000, ge=1)
    n_features: int = Field(32, ge=1)
    noise: float = Field(2.0, ge=0)
    label_noise: float = Field(0.1, ge=0, le=1)


class DatasetOptions(_Strict):
    source: Literal["synth", "csv"] = "synth"
    csv_path: Optional[str] = None
    synth: SynthOptions = SynthOptions()
    test_fraction: float = Field(0.1, gt=0, lt=1)
    validation_fraction: float = Field(0.1, ge=0, lt=1)
    input_channels: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _csv_needs_path(self):
        if self.source == "csv" and not self.csv_path:
            raise ValueError("dataset.source 'csv' requires dataset.csv_path")
        return self


class TaskOptions(_Strict):
    id: str = Field(min_length=1)
    role: Literal["main", "auxiliary"]
    num_classes: int = Field(ge=2)


class ModelOptions(_Strict):
    trunk: list[dict[str, Any]]
    head: list[dict[str, Any]] = []


class PartitionOptions(_Strict):
    mode: Literal["iid", "dirichlet"] = "dirichlet"
    alpha: float = Field(0.5, gt=0)
    stations: int = Field(6, ge=1)


class TrainingOptions(_Strict):
    rounds: int = Field(100, ge=1)
    eta: float = Field(0.005, ge=0)
    batch_size: int = Field(32, ge=1)
    epochs: int = Field(20, ge=1)
    participation: float = Field(1.0, gt=0, le=1)
    record_wall_clock: bool = False


class WeightingOptions(_Strict):
    rlw_resample: Literal["batch", "epoch", "round"] = "batch"
    mtdnn_elw: Literal["sum", "mean"] = "sum"


class DeviceOptions(_Strict):
    cycles_per_bit: float = Field(40.0, gt=0)
    cpu_freq: float = Field(2.0e9, gt=0)
    capacitance_coeff: float = Field(2e-28, gt=0)


class CostOptions(_Strict):
    bytes_per_param: int = Field(4, ge=1)
    mb_definition: float = Field(1e6, gt=0)


DEFAULT_TRUNK = [
    {"kind": "conv1d", "in_channels": 1, "out_channels": 8, "kernel_size": 5},
    {"kind": "relu"},
    {"kind": "maxpool1d", "pool_size": 2},
    {"kind": "flatten"},
    {"kind": "dense", "in_features": 112, "out_features": 32},
    {"kind": "relu"},
]

DEFAULT_TASKS = [
    TaskOptions(id="service", role="main", num_classes=5),
    TaskOptions(id="duration", role="auxiliary", num_classes=3),
    TaskOptions(id="bandwidth", role="auxiliary", num_classes=3),
]


class ExperimentConfig(_Strict):
    seed: int = Field(0, ge=0)
    output_dir: str = "runs/default"
    dataset: DatasetOptions = DatasetOptions()
    tasks: list[TaskOptions] = DEFAULT_TASKS
    model: ModelOptions = ModelOptions(trunk=DEFAULT_TRUNK)
    partition: PartitionOptions = PartitionOptions()
    baselines: list[str] = ["fedaux-rlw", "fedaux-elw", "mtdnn-rlw", "mtdnn-elw", "fedavg-single", "baseline-iid"]
    training: TrainingOptions = TrainingOptions()
    weighting: WeightingOptions = WeightingOptions()
    device: DeviceOptions = DeviceOptions()
    costs: CostOptions = CostOptions()
    targets: dict[str, float] = {"service": 0.8}

    @field_validator("baselines")
    @classmethod
    def _known_baselines(cls, value):
        if not value:
            raise ValueError("at least one baseline is required")
        for name in value:
            _parse(name)
        if len(set(value)) != len(value):
            raise ValueError("duplicate baseline names")
        return value

    @model_validator(mode="after")
    def _cross_checks(self):
        ids = [t.id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate task ids {ids}")
        if sum(t.role == MAIN for t in self.tasks) != 1:
            raise ValueError("exactly one task must have role 'main'")
        for name in self.baselines:
            _, task = _parse(name)
            if task is not None and task not in ids:
                raise ValueError(f"baseline {name!r} refers to undefined task {task!r}")
        for tid, kappa in self.targets.items():
            if tid not in ids:
                raise ValueError(f"target for undefined task {tid!r}")
            if not 0 < kappa < 1:
                raise ValueError(f"target accuracy for {tid!r} must lie in (0, 1)")
        if self.dataset.source == "csv":
            for t in self.tasks:
                if t.role == AUXILIARY and t.id not in CSV_AUX_COLUMNS:
                    raise ValueError(f"csv auxiliary tasks must be one of {CSV_AUX_COLUMNS}, got {t.id!r}")
        return self

    @property
    def main_task(self) -> str:
        return next(t.id for t in self.tasks if t.role == MAIN)


def _parse(name):
    try:
        return parse_baseline(name)
    except ConfigError as exc:
        raise ValueError(str(exc)) from None


def _format_validation(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{loc}: {err['msg']}")
    return "invalid config: " + "; ".join(lines)


def parse_config(text: str) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate_json(text)
    except ValidationError as exc:
        raise ConfigError(_format_validation(exc)) from None


def emit_config(config: ExperimentConfig) -> str:
    return json.dumps(config.model_dump(mode="json"), indent=2) + "\n"


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)


def override(config: ExperimentConfig, **changes) -> ExperimentConfig:
    """Return a re-validated copy with top-level fields replaced."""
    doc = config.model_dump(mode="json")
    doc.update({k: v for k, v in changes.items() if v is not None})
    try:
        return ExperimentConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(_format_validation(exc)) from None


def input_shape(config: ExperimentConfig, n_features: int) -> tuple:
    first = str(config.model.trunk[0].get("kind", "")).lower() if config.model.trunk else ""
    if first == "conv1d":
        c = config.dataset.input_channels
        if n_features % c:
            raise ConfigError(f"{n_features} features do not divide into {c} input channels")
        return (c, n_features // c)
    return (n_features,)


def task_specs(config: ExperimentConfig) -> list:
    specs = [TaskSpec(t.id, t.role, t.num_classes) for t in config.tasks]
    return sorted(specs, key=lambda t: t.role != MAIN)


def load_dataset(config: ExperimentConfig):
    """Build the train/validation/test split with every task's labels attached."""
    specs = task_specs(config)
    ds = config.dataset
    if ds.source == "synth":
        data = synth_generate(
            SynthSpec(
                classes=tuple(t.num_classes for t in specs),
                task_ids=tuple(t.id for t in specs),
                n_samples=ds.synth.n_samples,
                n_features=ds.synth.n_features,
                noise=ds.synth.noise,
                label_noise=ds.synth.label_noise,
                seed=config.seed,
            )
        )
        return train_val_test(data, ds.test_fraction, ds.validation_fraction, config.seed)

    flows, raw = load_flows(ds.csv_path)
    main = specs[0]
    n_classes = len(flows.class_names)
    if n_classes != main.num_classes:
        raise ConfigError(f"main task declares {main.num_classes} classes but {ds.csv_path} has {n_classes}")
    flows = FlowDataset(flows.x, {main.id: flows.labels["service"]}, main.id, flows.class_names)
    # split row indices first so auxiliary bins are fitted on training rows only
    probe = FlowDataset(np.arange(len(flows), dtype=np.float64)[:, None], {main.id: flows.labels[main.id]}, main.id)
    parts = train_val_test(probe, ds.test_fraction, ds.validation_fraction, config.seed)
    train_rows = parts.train.x[:, 0].astype(np.int64)
    bins = {t.id: t.num_classes for t in specs[1:]}
    aux, _ = derive_aux_labels({k: v[train_rows] for k, v in raw.items()}, raw, bins)
    flows.labels.update(aux)
    split = [flows.subset(p.x[:, 0].astype(np.int64)) for p in (parts.train, parts.validation, parts.test)]
    return type(parts)(*split)


def make_partition(config: ExperimentConfig, train: FlowDataset, mode: str | None = None):
    p = config.partition
    return partition(train.labels[config.main_task], p.stations, mode or p.mode, p.alpha, config.seed)


def build_experiment(config: ExperimentConfig, plan=None) -> Experiment:
    """Everything ``run_experiment`` needs. ``plan`` overrides the configured partition."""
    split = load_dataset(config)
    if plan is None:
        plan = make_partition(config, split.train)
    elif sum(len(s) for s in plan.shards) != len(split.train):
        raise ConfigError("partition manifest does not match the training split size")
    needs_iid = any(parse_baseline(b)[0] == "baseline-iid" for b in config.baselines)
    iid = make_partition(config, split.train, "iid").shards if needs_iid else None
    specs = task_specs(config)
    shape = input_shape(config, split.train.n_features)
    build_model(config.model.trunk, config.model.head, specs, shape)  # fail fast on shape errors
    t = config.training
    return Experiment(
        trunk_layers=config.model.trunk,
        head_layers=config.model.head,
        tasks=specs,
        input_shape=shape,
        train=split.train,
        validation=split.validation,
        test=split.test,
        shards=plan.shards,
        iid_shards=iid,
        round_config=RoundConfig(
            rounds=t.rounds,
            eta=t.eta,
            batch_size=t.batch_size,
            epochs=t.epochs,
            participation=t.participation,
            seed=config.seed,
            record_wall_clock=t.record_wall_clock,
        ),
        profile=DeviceProfile(config.device.cycles_per_bit, config.device.cpu_freq, config.device.capacitance_coeff),
        bytes_per_param=config.costs.bytes_per_param,
        mb_definition=config.costs.mb_definition,
        resample=config.weighting.rlw_resample,
        mtdnn_elw=config.weighting.mtdnn_elw,
    )

