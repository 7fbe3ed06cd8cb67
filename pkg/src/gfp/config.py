"""Run configuration: one JSON document, schema-validated before any work starts."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import jsonschema

from .backbone import TransformerConfig
from .errors import ValidationError
from .model import ModelConfig
from .objective import LossWeights
from .predictor import HierarchySpec
from .skeldata import SyntheticSpec
from .targetnet import TgnConfig
from .trainer import TrainConfig, desk_train_config

SCHEMA_VERSION = 1

_num = {"type": "number"}
_pos_int = {"type": "integer", "minimum": 1}
_nonneg_int = {"type": "integer", "minimum": 0}


def _obj(props: dict, required: tuple[str, ...] = ()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


SCHEMA = _obj(
    {
        "schema_version": {"const": SCHEMA_VERSION},
        "data": _obj(
            {
                "num_classes": {"type": "integer", "minimum": 2},
                "samples_per_class": _pos_int,
                "frames": {"type": "integer", "minimum": 2},
                "joints": _pos_int,
                "channels": _pos_int,
                "base_pose": {"type": ["array", "null"], "items": {"type": "array", "items": _num}},
                "class_frequencies": {"type": "array", "items": _num, "minItems": 2},
                "amplitude": _num,
                "noise_std": {"type": "number", "minimum": 0},
                "seed": _nonneg_int,
            },
            required=("num_classes", "samples_per_class", "frames", "joints", "channels", "class_frequencies"),
        ),
        "model": _obj(
            {
                "frames": {"type": "integer", "minimum": 2},
                "joints": _pos_int,
                "channels": _pos_int,
                "patch_len": _pos_int,
                "encoder": _obj({
                    "width": _pos_int, "heads": _pos_int, "ffn_hidden": _pos_int,
                    "layers": _nonneg_int, "layer_norm_eps": {"type": "number", "exclusiveMinimum": 0},
                }),
                "hierarchy": _obj({
                    "levels": {"type": "array", "items": _pos_int},
                    "include_global": {"type": "boolean"},
                    "predictor_width": _pos_int, "target_width": _pos_int,
                    "projector_hidden": _pos_int, "projector_depth": _pos_int,
                    "global_hidden": _pos_int, "global_depth": _pos_int,
                }),
                "tgn": _obj({
                    "local_hidden": _pos_int, "global_hidden": _pos_int, "depth": {"type": "integer", "minimum": 2},
                    "input_variant": {"enum": ["motion", "joint", "masked_joint"]},
                }),
                "decoder_heads": _pos_int,
                "decoder_ffn_hidden": _pos_int,
                "objective": {"enum": ["gfp", "eq1"]},
                "recon_layers": _nonneg_int,
                "loss_positions": {"enum": ["all", "masked"]},
            }
        ),
        "train": _obj(
            {
                "epochs": _pos_int,
                "batch_size": {"type": "integer", "minimum": 2},
                "peak_lr": {"type": "number", "exclusiveMinimum": 0},
                "final_lr": {"type": "number", "exclusiveMinimum": 0},
                "warmup_epochs": {"type": "number", "minimum": 0},
                "weight_decay": {"type": "number", "minimum": 0},
                "betas": {"type": "array", "items": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                          "minItems": 2, "maxItems": 2},
                "adam_eps": {"type": "number", "exclusiveMinimum": 0},
                "seed": _nonneg_int,
                "mask_ratio": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "mask_strategy": {"enum": ["motion", "uniform"]},
                "mask_temperature": {"type": "number", "exclusiveMinimum": 0},
                "weights": _obj({k: {"type": "number", "minimum": 0} for k in ("lam", "alpha", "beta", "gamma")}),
                "grad_clip": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "augment": {"type": "boolean"},
                "collapse_threshold": {"type": "number", "minimum": 0},
                "collapse_patience": _pos_int,
                "checkpoint_every": _nonneg_int,
            }
        ),
        "eval": _obj(
            {
                "feature_pool": {"enum": ["mean", "max"]},
                "probe_lr": {"type": "number", "exclusiveMinimum": 0},
                "probe_max_iter": _pos_int,
                "probe_weight_decay": {"type": "number", "minimum": 0},
                "flops_mask_ratio": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "flops_bodies": _pos_int,
            }
        ),
    },
    required=("schema_version",),
)


@dataclass(frozen=True)
class EvalOptions:
    feature_pool: str = "mean"
    probe_lr: float = 0.5
    probe_max_iter: int = 3000
    probe_weight_decay: float = 1e-4
    flops_mask_ratio: float = 0.9
    flops_bodies: int = 1


@dataclass(frozen=True)
class RunConfig:
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=desk_train_config)
    eval: EvalOptions = field(default_factory=EvalOptions)
    checkpoint_every: int = 0
    raw: dict = field(default_factory=dict, compare=False)

    @property
    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()[:16]


def schema_errors(doc: dict) -> list[str]:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    out = []
    for err in sorted(validator.iter_errors(doc), key=lambda e: list(e.path)):
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        out.append(f"{where}: {err.message}")
    return out


def parse_config(doc: dict) -> RunConfig:
    """Validate a config document and build typed sections; missing sections take defaults."""
    errors = schema_errors(doc)
    if errors:
        raise ValidationError("invalid config:\n  " + "\n  ".join(errors))
    kw = {}
    if "data" in doc:
        d = dict(doc["data"])
        d["class_frequencies"] = tuple(d["class_frequencies"])
        kw["data"] = SyntheticSpec(**d)
        kw["data"].validate()
    if "model" in doc:
        kw["model"] = ModelConfig.from_dict(doc["model"])
    kw["model"] = kw.get("model", ModelConfig())
    kw["model"].validate()
    if "train" in doc:
        t = dict(doc["train"])
        kw["checkpoint_every"] = t.pop("checkpoint_every", 0)
        base = desk_train_config().to_dict()
        base.update(t)
        kw["train"] = TrainConfig.from_dict(base)
    kw["train"] = kw.get("train", desk_train_config())
    kw["train"].validate()
    if "eval" in doc:
        kw["eval"] = EvalOptions(**doc["eval"])
    return RunConfig(raw=doc, **kw)


def load_config(path: str | Path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ValidationError("config must be a JSON object")
    return parse_config(doc)


def default_config_document() -> dict:
    """The desk-scale configuration as a complete JSON document."""
    data = asdict(SyntheticSpec())
    data["class_frequencies"] = list(data["class_frequencies"])
    train = desk_train_config().to_dict()
    train["betas"] = list(train["betas"])
    model = ModelConfig().to_dict()
    model["hierarchy"]["levels"] = list(model["hierarchy"]["levels"])
    return {
        "schema_version": SCHEMA_VERSION,
        "data": data,
        "model": model,
        "train": train,
        "eval": asdict(EvalOptions()),
    }


__all__ = [
    "SCHEMA",
    "SCHEMA_VERSION",
    "EvalOptions",
    "RunConfig",
    "default_config_document",
    "load_config",
    "parse_config",
    "schema_errors",
    # re-exported so callers can build configs from one import
    "HierarchySpec",
    "LossWeights",
    "TgnConfig",
    "TransformerConfig",
]
