"""Run configuration: a single JSON document validated by pydantic.

Presets ``desk`` and ``paper-scale`` ship as JSON files next to this module;
a user config is deep-merged over the chosen preset.
"""

from __future__ import annotations

import hashlib
import json
from importlib import resources
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigurationError


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelConfig(_Strict):
    d_model: int = Field(32, gt=0)
    d_hidden: int = Field(128, gt=0)
    heads: list[int] = [2, 4, 8]
    kernels: list[int] = [15, 23, 31]
    mac_menu: list[Literal["ff_half", "identity"]] = ["ff_half", "identity"]
    cell_final_norm: bool = True
    ffc_half_step: bool = True
    dropout: float = Field(0.0, ge=0.0, lt=1.0)
    search_cells: int = Field(1, ge=1)
    positional: bool = True

    @model_validator(mode="after")
    def _menus(self):
        if not self.heads or not self.kernels or not self.mac_menu:
            raise ValueError("operation menus must be non-empty")
        bad_k = [k for k in self.kernels if k <= 0 or k % 2 == 0]
        if bad_k:
            raise ValueError(f"kernel sizes must be odd and positive: {bad_k}")
        bad_h = [h for h in self.heads if h <= 0 or self.d_model % h]
        if bad_h:
            raise ValueError(f"head counts must divide d_model={self.d_model}: {bad_h}")
        return self


class TaskConfig(_Strict):
    kind: Literal["planted-filter", "pattern-ctc"] = "pattern-ctc"
    vocab: int = Field(4, ge=1)
    d_in: int = Field(8, gt=0)
    t_min: int = Field(24, ge=1)
    t_max: int = Field(40, ge=1)
    noise: float = Field(0.5, ge=0.0)
    seed: int | None = None
    n_utterances: int = Field(1000, ge=2)
    val_fraction: float = Field(0.1, gt=0.0, lt=1.0)
    eval_utterances: int = Field(200, ge=1)
    # pattern-ctc
    tokens_min: int = Field(2, ge=1)
    tokens_max: int = Field(5, ge=1)
    run_min: int = Field(2, ge=1)
    run_max: int = Field(4, ge=1)
    gap_min: int = Field(1, ge=1)
    gap_max: int = Field(3, ge=1)
    # planted-filter
    planted_kernel: int = 15
    amplitude: float = Field(2.0, gt=0.0)
    event_spacing: int = Field(3, ge=2)

    @model_validator(mode="after")
    def _ranges(self):
        if self.t_min > self.t_max:
            raise ValueError("t_min must not exceed t_max")
        if self.tokens_min > self.tokens_max or self.run_min > self.run_max or self.gap_min > self.gap_max:
            raise ValueError("min/max ranges are inverted")
        if self.d_in < self.vocab + 1:
            raise ValueError("d_in must be at least vocab + 1 so class patterns stay orthogonal")
        if self.planted_kernel <= 0 or self.planted_kernel % 2 == 0:
            raise ValueError("planted_kernel must be odd")
        return self


class SearchConfig(_Strict):
    max_epochs: int = Field(20, ge=0)
    steps_per_epoch: int = Field(100, ge=1)
    batch_size: int = Field(8, ge=1)
    lr_w: float = Field(3e-4, gt=0.0)
    lr_alpha: float = Field(2e-4, gt=0.0)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    freeze_epochs: int = Field(3, ge=0)
    xi: float = Field(0.0, ge=0.0)
    alpha_loss: Literal["mixed", "ctc"] = "mixed"
    grad_clip: float = Field(5.0, ge=0.0)


class LossConfig(_Strict):
    ctc_weight: float = Field(0.7, ge=0.0, le=1.0)
    ce_weight: float = Field(0.3, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _sum(self):
        if abs(self.ctc_weight + self.ce_weight - 1.0) > 1e-12:
            raise ValueError("ctc_weight + ce_weight must equal 1")
        return self


class TrainConfig(_Strict):
    n_layers: int = Field(2, ge=1)
    epochs: int = Field(10, ge=0)
    steps_per_epoch: int = Field(100, ge=1)
    batch_size: int = Field(8, ge=1)
    lr: float = Field(1e-3, gt=0.0)
    grad_clip: float = Field(5.0, ge=0.0)


class RunConfig(_Strict):
    preset: str = "desk"
    seed: int = 0
    model: ModelConfig = ModelConfig()
    task: TaskConfig = TaskConfig()
    search: SearchConfig = SearchConfig()
    loss: LossConfig = LossConfig()
    train: TrainConfig = TrainConfig()

    @property
    def task_seed(self) -> int:
        return self.seed if self.task.seed is None else self.task.seed

    def to_json(self) -> str:
        return json.dumps(self.model_dump(), indent=2, sort_keys=True)

    def config_hash(self) -> str:
        canonical = json.dumps(self.model_dump(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]


PRESETS = ("desk", "paper-scale")


def preset_dict(name: str) -> dict[str, Any]:
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    text = resources.files("dcnas.presets").joinpath(f"{name}.json").read_text()
    return json.loads(text)


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(
    preset: str | None = None,
    path: str | Path | None = None,
    seed: int | None = None,
    overrides: dict[str, Any] | None = None,
) -> RunConfig:
    """Resolve preset <- config file <- explicit overrides <- seed, then validate."""
    user: dict[str, Any] = {}
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    name = preset or user.get("preset") or "desk"
    data = _merge(preset_dict(name), user)
    data["preset"] = name
    if overrides:
        data = _merge(data, overrides)
    if seed is not None:
        data["seed"] = seed
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigurationError(str(exc)) from exc
