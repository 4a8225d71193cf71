"""Experiment configuration files.

A config is a YAML mapping with the sections ``model``, ``sampler``,
``protocol``, ``run`` and ``output``. A comparison file instead holds a
top-level ``model`` (optional), a list ``arms`` whose entries carry ``name``,
``sampler``, ``protocol`` and optionally ``model`` and ``run``, plus shared
``run``, ``output`` and ``compare`` sections. Unknown keys are rejected and
every field below documents its default.

Model kinds::

    gaussian    mean (default zeros of length dim), cov (scalar, diagonal or
                full; default 1.0), dim (default 2), grad_noise (default 0.0)
    quadratic   same fields as gaussian; its minimum value is 0
    classifier  layers (default [4, 16, 2]), prior_precision (1e-5),
                batch_size (100), activation ("relu") and a data block:
                n_train (500), n_eval (1000), separation (2.0), seed (0),
                train_csv / eval_csv (unset; override the synthetic blobs)

Sampler kinds::

    sghmc       epsilon, mass (1.0), V (1.0), noise_scaling ("linear")
    ec_sghmc    as sghmc plus alpha (1.0), C (1.0),
                noise_scaling ("quadratic"), worker_noise_includes_center (true)
    ec_momentum, eamsgd
                epsilon, alpha (1.0), xi (0.1)

``sghmc`` pairs with the ``independent`` and ``naive_async`` schemes,
``ec_sghmc`` with ``elastic`` and the two optimizers with ``optimizer``.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ContractError

Scalarish = Union[float, list[float], list[list[float]]]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DataSpec(_Strict):
    n_train: int = Field(500, ge=2, description="training points")
    n_eval: int = Field(1000, ge=1, description="held-out points")
    separation: float = Field(2.0, gt=0, description="distance between class centres")
    seed: int = Field(0, ge=0, description="data seed, shared by every arm")
    train_csv: Optional[str] = Field(None, description="load training data instead of blobs")
    eval_csv: Optional[str] = Field(None, description="load evaluation data instead of blobs")


class ModelSpec(_Strict):
    kind: Literal["gaussian", "quadratic", "classifier"] = "gaussian"
    dim: int = Field(2, ge=1, description="dimension when mean is omitted")
    mean: Optional[list[float]] = Field(None, description="defaults to zeros(dim)")
    cov: Scalarish = Field(1.0, description="scalar, diagonal or full covariance")
    grad_noise: float = Field(0.0, ge=0, description="synthetic gradient-noise variance")
    layers: list[int] = Field([4, 16, 2], min_length=2, description="network widths")
    prior_precision: float = Field(1e-5, gt=0)
    batch_size: int = Field(100, ge=1)
    activation: Literal["relu", "tanh"] = "relu"
    data: DataSpec = DataSpec()

    @model_validator(mode="after")
    def _shape(self):
        if self.mean is not None and len(self.mean) != self.dim and "dim" in self.model_fields_set:
            raise ValueError("dim does not match the length of mean")
        return self


class SamplerSpec(_Strict):
    kind: Literal["sghmc", "ec_sghmc", "ec_momentum", "eamsgd"] = "sghmc"
    epsilon: float = Field(1e-2, gt=0, description="step size / learning rate")
    mass: Union[float, list[float]] = Field(1.0, description="diagonal mass M")
    V: Union[float, list[float]] = Field(1.0, description="gradient-noise matrix (diagonal)")
    C: Union[float, list[float]] = Field(1.0, description="centre noise matrix (diagonal)")
    alpha: float = Field(1.0, ge=0, description="elastic coupling strength")
    xi: float = Field(0.1, ge=0, le=1, description="optimizer momentum friction")
    noise_scaling: Optional[Literal["linear", "quadratic"]] = Field(
        None, description="defaults to linear for sghmc and quadratic for ec_sghmc"
    )
    worker_noise_includes_center: bool = Field(True, description="EC worker noise V + C")

    @property
    def resolved_scaling(self) -> str:
        if self.noise_scaling is not None:
            return self.noise_scaling
        return "quadratic" if self.kind == "ec_sghmc" else "linear"


class DelaySpec(_Strict):
    kind: Literal["constant", "uniform"] = "constant"
    base: Union[float, list[float]] = Field(1.0, description="per-step compute time")
    jitter: float = Field(0.0, ge=0, description="uniform jitter half-width")


class ProtocolSpec(_Strict):
    scheme: Literal["independent", "naive_async", "elastic", "optimizer"] = "independent"
    workers: int = Field(1, ge=1, description="K")
    comm_period: int = Field(1, ge=1, description="s, local steps per exchange")
    wait_count: int = Field(1, ge=1, description="O, reports averaged per server step")
    delay: DelaySpec = DelaySpec()
    latency: float = Field(0.0, ge=0, description="one-way message latency")

    @model_validator(mode="after")
    def _wait(self):
        if self.wait_count > self.workers:
            raise ValueError("wait_count must not exceed workers")
        return self


class RunSpec(_Strict):
    steps: int = Field(1000, ge=1, description="steps per worker")
    burn_in: int = Field(0, ge=0, description="steps dropped from summaries")
    thin: int = Field(1, ge=1, description="keep every thin-th step")
    seed: int = Field(0, ge=0, description="master seed")
    init: Optional[list[float]] = Field(None, description="initial position, default model init")
    init_spread: float = Field(1.0, ge=0, description="optimizer start spread around init")
    threshold: float = Field(1e-6, gt=0, description="optimizer loss target")


class OutputSpec(_Strict):
    dir: str = Field("runs", description="output directory (overridden by --out)")
    trace: bool = Field(True, description="write trace.csv")
    samples: bool = Field(True, description="write samples.jsonl")


class ExperimentConfig(_Strict):
    model: ModelSpec = ModelSpec()
    sampler: SamplerSpec = SamplerSpec()
    protocol: ProtocolSpec = ProtocolSpec()
    run: RunSpec = RunSpec()
    output: OutputSpec = OutputSpec()

    @model_validator(mode="after")
    def _pairing(self):
        allowed = {
            "sghmc": ("independent", "naive_async"),
            "ec_sghmc": ("elastic",),
            "ec_momentum": ("optimizer",),
            "eamsgd": ("optimizer",),
        }[self.sampler.kind]
        if self.protocol.scheme not in allowed:
            raise ValueError(
                f"sampler {self.sampler.kind!r} needs protocol.scheme in {list(allowed)}"
            )
        if self.run.burn_in >= self.run.steps and self.protocol.scheme != "naive_async":
            raise ValueError("run.burn_in must be smaller than run.steps")
        return self


class ArmSpec(_Strict):
    name: str = Field(min_length=1)
    model: Optional[ModelSpec] = None
    sampler: SamplerSpec
    protocol: ProtocolSpec = ProtocolSpec()
    run: Optional[RunSpec] = None


class CompareSpec(_Strict):
    grid_step: float = Field(100.0, gt=0, description="spacing of the aligned time grid")
    burn_in_time: float = Field(0.0, ge=0, description="virtual time dropped before averaging")


class CompareConfig(_Strict):
    model: Optional[ModelSpec] = None
    arms: list[ArmSpec] = Field(min_length=2)
    run: RunSpec = RunSpec()
    output: OutputSpec = OutputSpec()
    compare: CompareSpec = CompareSpec()

    @model_validator(mode="after")
    def _names(self):
        names = [a.name for a in self.arms]
        if len(set(names)) != len(names):
            raise ValueError("arm names must be unique")
        return self

    def experiments(self) -> list[tuple[str, ExperimentConfig]]:
        """One resolved :class:`ExperimentConfig` per arm.

        Raises :class:`ConfigError` when arms end up with different models.
        """
        out = []
        for arm in self.arms:
            model = arm.model or self.model
            if model is None:
                raise ConfigError(f"arms.{arm.name}.model: no model given and no shared model")
            try:
                cfg = ExperimentConfig(
                    model=model, sampler=arm.sampler, protocol=arm.protocol,
                    run=arm.run or self.run, output=self.output,
                )
            except ValidationError as exc:
                raise ConfigError(_format(exc, prefix=f"arms.{arm.name}")) from None
            out.append((arm.name, cfg))
        first = out[0][1].model
        for name, cfg in out[1:]:
            if cfg.model != first:
                raise ConfigError(f"arms.{name}.model: differs from arm {out[0][0]!r}; "
                                  "all arms must share one model")
        return out


class ConfigError(ContractError):
    """Invalid configuration; the message names the offending field path."""


def _format(exc: ValidationError, prefix: str = "") -> str:
    lines = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"])
        if prefix:
            path = f"{prefix}.{path}" if path else prefix
        lines.append(f"{path or '<root>'}: {err['msg']}")
    return "\n".join(lines)


def _load_mapping(source) -> dict:
    if isinstance(source, dict):
        return source
    path = Path(source)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def is_compare(source) -> bool:
    return "arms" in _load_mapping(source)


def load_experiment(source) -> ExperimentConfig:
    """Parse and fully validate a single-experiment config (path or dict)."""
    data = _load_mapping(source)
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format(exc)) from None


def load_compare(source) -> CompareConfig:
    data = _load_mapping(source)
    try:
        return CompareConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format(exc)) from None


def with_seed(cfg, seed: int):
    """Copy of ``cfg`` with the master seed replaced (re-validated)."""
    data = cfg.model_dump()
    data["run"]["seed"] = seed
    if isinstance(cfg, CompareConfig):
        for arm in data["arms"]:
            if arm.get("run") is not None:
                arm["run"]["seed"] = seed
    try:
        return type(cfg).model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format(exc)) from None


def resolved_dict(cfg) -> dict:
    """JSON-ready dump with every default filled in."""
    return json.loads(cfg.model_dump_json())
