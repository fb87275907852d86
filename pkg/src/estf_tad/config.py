"""Experiment configuration: one JSON document, every key optional.

Missing keys fall back to the dataclass defaults.  Unknown keys and values of
the wrong type are rejected before any work starts, and the first problem is
reported with a JSON-pointer path such as ``/train/lr``.

Two presets ship with the package: ``easy`` (the desk-scale synthetic setup
used by the acceptance suite) and ``paper-shape`` (full-size input geometry,
for shape checks only; far too large to train in numpy).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any

from pydantic import ConfigDict, TypeAdapter, ValidationError

from .detector import DetectorConfig, InferenceConfig, TrainConfig
from .estf import BackboneConfig, EstfConfig
from .numerics import ConfigError
from .ssm import SsmConfig
from .synthdata import SpecError, SynthSpec

PRESETS = ("easy", "paper-shape")


class ConfigValidationError(ConfigError):
    """Carries the JSON pointer of the offending value."""

    def __init__(self, pointer: str, message: str, source: str = "<config>"):
        super().__init__(f"{source}: {pointer or '/'}: {message}")
        self.pointer = pointer
        self.source = source
        self.detail = message


@dataclass
class DataConfig:
    train: SynthSpec = field(default_factory=SynthSpec)
    val_videos: int = 32

    def val_spec(self) -> SynthSpec:
        return replace(self.train, split=1, n_videos=self.val_videos)


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    adapter: EstfConfig | None = field(default_factory=EstfConfig)  # None trains the head alone
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)

    def validate(self, source: str = "<config>") -> None:
        """Section checks plus the cross-section shape agreements."""
        checks = [
            ("/backbone", self.backbone.validate),
            ("/detector", self.detector.validate),
            ("/data/train", self.data.train.validate),
        ]
        if self.adapter is not None:
            checks += [("/adapter", self.adapter.validate), ("/adapter/ssm", self.adapter.ssm.validate)]
        for pointer, check in checks:
            try:
                check()
            except (ConfigError, SpecError) as exc:
                raise ConfigValidationError(pointer, str(exc), source) from exc
        _validate_train(self.train, self.inference, source)
        if self.data.val_videos < 1:
            raise ConfigValidationError("/data/val_videos", "must be at least 1", source)
        spec = self.data.train
        shape = (spec.frames, spec.height, spec.width, spec.channels)
        if tuple(self.backbone.input_shape) != shape:
            raise ConfigValidationError(
                "/backbone/input_shape",
                f"{list(self.backbone.input_shape)} does not match the data (frames, height, width, channels) {list(shape)}",
                source,
            )
        if self.detector.n_classes != spec.n_classes:
            raise ConfigValidationError(
                "/detector/n_classes", f"{self.detector.n_classes} but the data has {spec.n_classes} classes", source
            )
        if self.adapter is not None and self.adapter.d_model != self.backbone.d_model:
            raise ConfigValidationError(
                "/adapter/d_model",
                f"{self.adapter.d_model} must equal /backbone/d_model ({self.backbone.d_model})",
                source,
            )
        if self.adapter is not None:
            (_, h, w), (fh, fw) = self.backbone.grid(), self.adapter.pool_factor
            if fh < 1 or fw < 1 or h % fh or w % fw:
                raise ConfigValidationError(
                    "/adapter/pool_factor", f"{list(self.adapter.pool_factor)} must divide the token grid {h}x{w}", source
                )

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))


def _validate_train(tc: TrainConfig, ic: InferenceConfig, source: str) -> None:
    rules = [
        ("/train/epochs", tc.epochs >= 1, "must be at least 1"),
        ("/train/batch_size", tc.batch_size >= 1, "must be at least 1"),
        ("/train/lr", tc.lr > 0, "must be positive"),
        ("/train/warmup_epochs", 0 <= tc.warmup_epochs <= tc.epochs, "must lie in [0, epochs]"),
        ("/train/weight_decay", tc.weight_decay >= 0, "must be non-negative"),
        ("/train/betas", all(0 <= b < 1 for b in tc.betas), "each beta must lie in [0, 1)"),
        ("/train/grad_clip", tc.grad_clip is None or tc.grad_clip > 0, "must be positive or null"),
        ("/train/eval_every", tc.eval_every >= 1, "must be at least 1"),
        ("/inference/nms_method", ic.nms_method in ("gaussian", "linear", "hard"), "must be gaussian, linear or hard"),
        ("/inference/nms_sigma", ic.nms_sigma > 0, "must be positive"),
        ("/inference/pre_nms_topk", ic.pre_nms_topk >= 1, "must be at least 1"),
        ("/inference/max_instances", ic.max_instances >= 1, "must be at least 1"),
    ]
    for pointer, ok, message in rules:
        if not ok:
            raise ConfigValidationError(pointer, message, source)


# Every nested config rejects unknown keys.
for _cls in (
    SynthSpec,
    DataConfig,
    BackboneConfig,
    SsmConfig,
    EstfConfig,
    DetectorConfig,
    TrainConfig,
    InferenceConfig,
    ExperimentConfig,
):
    _cls.__pydantic_config__ = ConfigDict(extra="forbid")

_ADAPTER = TypeAdapter(ExperimentConfig)
_SPEC_ADAPTER = TypeAdapter(SynthSpec)


def _pointer(loc: tuple) -> str:
    return "".join("/" + str(part).replace("~", "~0").replace("/", "~1") for part in loc)


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and obj == float("inf"):
        return "inf"
    return obj


def config_from_dict(doc: Any, source: str = "<config>") -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigValidationError("", f"expected a JSON object, got {type(doc).__name__}", source)
    try:
        cfg = _ADAPTER.validate_python(doc)
    except ValidationError as exc:
        err = exc.errors()[0]
        raise ConfigValidationError(_pointer(tuple(err["loc"])), err["msg"], source) from None
    cfg.validate(source)
    return cfg


def spec_from_dict(doc: Any, source: str = "<spec>") -> SynthSpec:
    """A synthetic-data spec on its own, validated like a config section."""
    if not isinstance(doc, dict):
        raise ConfigValidationError("", f"expected a JSON object, got {type(doc).__name__}", source)
    try:
        spec = _SPEC_ADAPTER.validate_python(doc)
    except ValidationError as exc:
        err = exc.errors()[0]
        raise ConfigValidationError(_pointer(tuple(err["loc"])), err["msg"], source) from None
    try:
        spec.validate()
    except SpecError as exc:
        raise ConfigValidationError("", str(exc), source) from exc
    return spec


def read_json(path: str | Path) -> Any:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigValidationError("", f"cannot read file: {exc.strerror}", str(path)) from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigValidationError("", f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}", str(path)) from None


def load_config(path: str | Path) -> ExperimentConfig:
    return config_from_dict(read_json(path), str(path))


def preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigValidationError("", f"unknown preset {name!r}; choose from {', '.join(PRESETS)}", name)
    ref = resources.files("estf_tad") / "presets" / f"{name.replace('-', '_')}.json"
    return config_from_dict(json.loads(ref.read_text()), f"preset:{name}")


def resolve_config(ref: str | Path | None) -> ExperimentConfig:
    """A preset name, a path to a JSON file, or ``None`` for the easy preset."""
    if ref is None:
        return preset("easy")
    if str(ref) in PRESETS and not Path(ref).exists():
        return preset(str(ref))
    return load_config(ref)


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")


def describe_shapes(cfg: ExperimentConfig) -> dict:
    """Token grid and pyramid lengths implied by a config, computed without
    allocating any activations."""
    cfg.backbone.validate()
    t, h, w = cfg.backbone.grid()
    lengths = [t]
    for _ in range(cfg.detector.n_levels - 1):
        lengths.append(-(-lengths[-1] // 2))
    out = {
        "grid": [t, h, w],
        "tokens": t * h * w,
        "d_model": cfg.backbone.d_model,
        "pyramid": lengths,
        "head_outputs": cfg.detector.n_classes + 1,
    }
    if cfg.adapter is not None:
        ph, pw = cfg.adapter.pool_factor
        out["adapter_rank"] = cfg.adapter.rank
        out["ssm_sequences"] = (h // ph) * (w // pw)
        out["ssm_length"] = t
    return out


__all__ = [
    "PRESETS",
    "ConfigValidationError",
    "DataConfig",
    "ExperimentConfig",
    "config_from_dict",
    "describe_shapes",
    "load_config",
    "preset",
    "resolve_config",
    "read_json",
    "save_config",
    "spec_from_dict",
]
