"""JSON run configurations for the command line."""
from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .chain import ACTIVATIONS, LOSSES, ChainSpec
from .engines import canonical_variant


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SpecConfig(_Strict):
    layer_dims: Optional[List[int]] = None
    depth: int = Field(4, ge=1)
    width: int = Field(32, ge=1)
    activation: Union[str, List[str]] = "tanh"
    output_activation: Optional[str] = "identity"
    loss: str = "softmax-cross-entropy"
    bias: bool = True

    @field_validator("loss")
    @classmethod
    def _loss(cls, v):
        if v not in LOSSES:
            raise ValueError(f"must be one of {LOSSES}")
        return v

    @field_validator("output_activation")
    @classmethod
    def _out_act(cls, v):
        if v is not None and v not in ACTIVATIONS:
            raise ValueError(f"must be one of {ACTIVATIONS}")
        return v


class DatasetConfig(_Strict):
    source: Literal["synthetic", "mnist"] = "synthetic"
    seed: Optional[int] = None
    d_in: int = Field(20, ge=1)
    n_classes: int = Field(4, ge=2)
    n_train: int = Field(3000, ge=1)
    n_validation: int = Field(500, ge=1)
    n_test: int = Field(500, ge=1)
    data_dir: Optional[str] = None


class SweepConfig(_Strict):
    depths: Optional[List[int]] = None
    gammas: List[float] = [1.0]
    rel_steps: List[float] = [1.0]
    variants: Optional[List[str]] = None

    @field_validator("depths")
    @classmethod
    def _depths(cls, v):
        if v is not None and any(d < 1 for d in v):
            raise ValueError("depths must be >= 1")
        return v

    @field_validator("gammas")
    @classmethod
    def _gammas(cls, v):
        if any(not g > 0 for g in v):
            raise ValueError("gammas must be > 0")
        return v

    @field_validator("rel_steps")
    @classmethod
    def _rel(cls, v):
        if any(r < 0 for r in v):
            raise ValueError("rel_steps must be >= 0")
        return v

    @field_validator("variants")
    @classmethod
    def _variants(cls, v):
        return None if v is None else [canonical_variant(x) for x in v]


class RunConfig(_Strict):
    spec: SpecConfig = SpecConfig()
    dataset: DatasetConfig = DatasetConfig()
    variant: str = "fpa"
    gamma: float = Field(1.0, gt=0)
    steps: Optional[int] = Field(None, ge=0)
    rel_steps: float = Field(1.0, ge=0)
    k: float = Field(1.0, ge=1)
    stop_tol: Optional[float] = Field(None, gt=0)
    learning_rate: float = Field(0.1, gt=0)
    epochs: int = Field(10, ge=0)
    batch_size: int = Field(32, ge=1)
    seed: int = Field(0, ge=0)
    probe_size: int = Field(64, ge=0)
    repetitions: int = Field(5, ge=3)
    sweep: Optional[SweepConfig] = None
    output: Optional[str] = None

    @field_validator("variant")
    @classmethod
    def _variant(cls, v):
        return canonical_variant(v)

    def chain_spec(self, d_in: int, d_out: int, depth: Optional[int] = None) -> ChainSpec:
        s = self.spec
        if s.layer_dims is not None and depth is None:
            acts = s.activation
            return ChainSpec(tuple(s.layer_dims), acts, s.loss) if not isinstance(acts, str) \
                else _uniform_acts(tuple(s.layer_dims), acts, s.output_activation, s.loss)
        if not isinstance(s.activation, str):
            raise ConfigError("spec.activation: a per-layer list needs explicit spec.layer_dims")
        return ChainSpec.uniform(depth or s.depth, d_in, s.width, d_out, s.activation,
                                 s.output_activation, s.loss)

    def steps_for(self, depth: int, rel: Optional[float] = None) -> int:
        if rel is None and self.steps is not None:
            return self.steps
        return relative_steps(depth, self.rel_steps if rel is None else rel)

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def _uniform_acts(dims, act, out_act, loss):
    acts = [act] * (len(dims) - 1)
    if out_act is not None:
        acts[-1] = out_act
    return ChainSpec(dims, tuple(acts), loss)


def relative_steps(depth: int, rel: float) -> int:
    """Inference steps T = floor(rel * L)."""
    return int(math.floor(rel * depth + 1e-9))


def _error_paths(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{path}: {err['msg']}")
    return "; ".join(lines)


def load_config(path=None, seed: Optional[int] = None) -> RunConfig:
    """Read and validate a JSON config; unknown keys are errors."""
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
    if seed is not None:
        raw["seed"] = seed
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(_error_paths(exc)) from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
