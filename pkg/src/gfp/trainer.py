"""Optimization: warmup+cosine schedule, AdamW, gradient checking, pretraining loop, checkpoints."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensorio
from .backbone import ModelParams
from .errors import FormatError, NumericError, ValidationError
from .model import GFPModel, ModelConfig
from .objective import LossWeights
from .skeldata import SkeletonSequence, center_crop, temporal_crop_resample
from .tokenizer import MaskPlan, motion_intensity, sample_mask

log = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "lr", "l_pred", "l_var", "l_cov", "l_reg", "l_total")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 400
    batch_size: int = 32
    peak_lr: float = 1e-3
    final_lr: float = 5e-4
    warmup_epochs: float = 20
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.95)
    adam_eps: float = 1e-8
    seed: int = 0
    mask_ratio: float = 0.9
    mask_strategy: str = "motion"
    mask_temperature: float = 1.0
    weights: LossWeights = field(default_factory=LossWeights)
    grad_clip: float | None = None
    augment: bool = True
    collapse_threshold: float = 0.01
    collapse_patience: int = 5

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 2:
            raise ValidationError("epochs >= 1 and batch_size >= 2 required")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValidationError("warmup_epochs must lie in [0, epochs)")
        if not 0 < self.final_lr <= self.peak_lr:
            raise ValidationError("need 0 < final_lr <= peak_lr")
        if not (0 <= self.betas[0] < 1 and 0 <= self.betas[1] < 1):
            raise ValidationError("Adam betas must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be >= 0")
        if self.mask_strategy not in ("motion", "uniform"):
            raise ValidationError(f"unknown mask strategy {self.mask_strategy!r}")
        if not 0 < self.mask_ratio < 1:
            raise ValidationError("mask_ratio must lie in (0, 1)")
        self.weights.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "weights" in d:
            d["weights"] = LossWeights(**d["weights"])
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


def desk_train_config(**overrides) -> TrainConfig:
    """Laptop-scale schedule: 100 epochs with a 10-epoch warmup."""
    base = dict(epochs=100, warmup_epochs=10, batch_size=32)
    base.update(overrides)
    return TrainConfig(**base)


def config_hash(model_cfg: ModelConfig, train_cfg: TrainConfig) -> str:
    blob = json.dumps({"model": model_cfg.to_dict(), "train": train_cfg.to_dict()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def lr_at(epoch: float, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to ``peak_lr``, then cosine decay to ``final_lr``."""
    if not 0 <= epoch <= cfg.epochs:
        raise ValidationError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    if epoch <= cfg.warmup_epochs:
        if cfg.warmup_epochs == 0:
            return cfg.peak_lr
        return cfg.peak_lr * epoch / cfg.warmup_epochs
    progress = (epoch - cfg.warmup_epochs) / (cfg.epochs - cfg.warmup_epochs)
    return cfg.final_lr + 0.5 * (cfg.peak_lr - cfg.final_lr) * (1.0 + math.cos(math.pi * progress))


# -- AdamW --------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamState":
        return cls(params.zeros_like(), params.zeros_like(), 0)


def decays(path: str) -> bool:
    """Weight decay applies to weight matrices only, not to biases, norms, positions or the mask token."""
    parts = path.split(".")
    if parts[-1] == "bias" or path == "mask_token":
        return False
    if parts[0] in ("pos", "dec_pos"):
        return False
    return not any(p.startswith("norm") for p in parts)


def adamw_step(params: ModelParams, grads: dict[str, np.ndarray], state: AdamState, lr: float,
               cfg: TrainConfig) -> None:
    b1, b2 = cfg.betas
    state.step += 1
    t = state.step
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for path in params:
        g = grads[path]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {path}", path)
        m = state.m[path] = b1 * state.m[path] + (1.0 - b1) * g
        v = state.v[path] = b2 * state.v[path] + (1.0 - b2) * g * g
        p = params[path]
        if cfg.weight_decay and decays(path):
            p = p * (1.0 - lr * cfg.weight_decay)
        params[path] = p - lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


# -- gradient checking --------------------------------------------------------


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_path: str
    worst_index: tuple
    checked: int
    per_path: dict[str, float]
    below_atol: int = 0

    def as_dict(self) -> dict:
        return {
            "max_rel_error": self.max_rel_error,
            "worst_path": self.worst_path,
            "worst_index": list(self.worst_index),
            "checked": self.checked,
            "below_atol": self.below_atol,
            "per_path": self.per_path,
        }


def grad_check(
    loss_fn: Callable[[ModelParams], float],
    params: ModelParams,
    analytic: dict[str, np.ndarray],
    epsilon: float = 1e-5,
    samples: int = 200,
    rng: np.random.Generator | None = None,
    paths: Sequence[str] | None = None,
    atol: float = 1e-8,
) -> GradCheckResult:
    """Central differences against analytic gradients on sampled coordinates.

    Relative error is ``|a - n| / max(|a|, |n|)``. Coordinates where both
    values are below ``atol`` (e.g. key biases, whose gradient is exactly zero)
    are compared in absolute terms and count as relative error 0 if they agree
    within ``atol``.
    """
    rng = rng or np.random.default_rng(0)
    paths = list(paths or params.paths())
    per = max(1, math.ceil(samples / len(paths)))
    worst = (0.0, "", ())
    per_path: dict[str, float] = {}
    checked = tiny = 0
    for path in paths:
        arr = params[path]
        flat_idx = rng.choice(arr.size, size=min(per, arr.size), replace=False)
        path_worst = 0.0
        for fi in flat_idx:
            idx = np.unravel_index(int(fi), arr.shape)
            old = arr[idx]
            arr[idx] = old + epsilon
            lp = loss_fn(params)
            arr[idx] = old - epsilon
            lm = loss_fn(params)
            arr[idx] = old
            num = (lp - lm) / (2.0 * epsilon)
            a = float(analytic[path][idx])
            scale = max(abs(a), abs(num))
            if scale < atol:
                tiny += 1
                rel = 0.0 if abs(a - num) < atol else float("inf")
            else:
                rel = abs(a - num) / scale
            checked += 1
            path_worst = max(path_worst, rel)
            if rel > worst[0] or not worst[1]:
                worst = (rel, path, tuple(int(i) for i in idx))
        per_path[path] = path_worst
    return GradCheckResult(worst[0], worst[1], worst[2], checked, per_path, tiny)


MLP_PREFIXES = ("tgn.", "decoder.proj_", "decoder.global_mlp")


def condition_params(params: ModelParams, scale: float) -> None:
    """Scale the small-init (std 0.02) weight matrices in place.

    At initial scale most activations sit in the linear regime and many
    gradients are tiny, so finite differences are dominated by roundoff.
    Fan-in initialized MLP heads and norm parameters are left alone.
    """
    for path, value in params.items():
        if path.endswith("weight") and "norm" not in path and not path.startswith(MLP_PREFIXES):
            params[path] = value * scale


def model_grad_check(model: GFPModel, params: ModelParams, X: np.ndarray, plans: list[MaskPlan],
                     epsilon: float = 1e-5, samples: int = 200, rng=None,
                     analytic: dict[str, np.ndarray] | None = None) -> GradCheckResult:
    if analytic is None:
        _, analytic = model.loss_and_grads(params, X, plans)
    return grad_check(lambda p: model.loss(p, X, plans), params, analytic, epsilon, samples, rng)


# -- batches ------------------------------------------------------------------


def make_plans(X: np.ndarray, cfg: TrainConfig, patch_len: int, rng: np.random.Generator) -> list[MaskPlan]:
    return [
        sample_mask(motion_intensity(x, patch_len), cfg.mask_ratio, rng, cfg.mask_temperature, cfg.mask_strategy)
        for x in X
    ]


def make_batch(seqs: Sequence[SkeletonSequence], frames: int, augment: bool, rng) -> np.ndarray:
    if augment:
        return np.stack([np.asarray(temporal_crop_resample(s, frames, rng).data) for s in seqs])
    return np.stack([center_crop(s, frames) for s in seqs])


def batch_slices(n: int, batch_size: int) -> list[slice]:
    """Contiguous batches; a trailing batch with fewer than 2 samples is dropped."""
    out = [slice(i, min(i + batch_size, n)) for i in range(0, n, batch_size)]
    return [s for s in out if s.stop - s.start >= 2]


# -- checkpoints --------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"__array__": [int(x) for x in obj.ravel()], "dtype": str(obj.dtype), "shape": list(obj.shape)}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _from_jsonable(obj):
    if isinstance(obj, dict):
        if "__array__" in obj:
            return np.array(obj["__array__"], dtype=obj["dtype"]).reshape(obj["shape"])
        return {k: _from_jsonable(v) for k, v in obj.items()}
    return obj


@dataclass
class Checkpoint:
    params: ModelParams
    adam: AdamState
    epoch: int
    model_config: ModelConfig
    train_config: TrainConfig
    rng_states: dict = field(default_factory=dict)
    collapse_run: int = 0

    @property
    def config_hash(self) -> str:
        return config_hash(self.model_config, self.train_config)

    def save(self, path: str | Path) -> None:
        tensors = {}
        for p, v in self.params.items():
            tensors[f"param/{p}"] = v
        for p in self.params:
            tensors[f"adam_m/{p}"] = self.adam.m[p]
            tensors[f"adam_v/{p}"] = self.adam.v[p]
        header = {
            "epoch": self.epoch,
            "step": self.adam.step,
            "config_hash": self.config_hash,
            "model_config": self.model_config.to_dict(),
            "train_config": self.train_config.to_dict(),
            "rng_states": _jsonable(self.rng_states),
            "collapse_run": self.collapse_run,
        }
        tensorio.save(path, tensors, header, tensorio.KIND_CHECKPOINT)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        tensors, header = tensorio.load(path, tensorio.KIND_CHECKPOINT)
        try:
            mcfg = ModelConfig.from_dict(header["model_config"])
            tcfg = TrainConfig.from_dict(header["train_config"])
        except (KeyError, TypeError) as exc:
            raise FormatError(f"checkpoint header is missing config fields: {exc}") from None
        params = ModelParams({k[6:]: v for k, v in tensors.items() if k.startswith("param/")})
        m = {k[7:]: v for k, v in tensors.items() if k.startswith("adam_m/")}
        v = {k[7:]: v for k, v in tensors.items() if k.startswith("adam_v/")}
        ck = cls(params, AdamState(m, v, header["step"]), header["epoch"], mcfg, tcfg,
                 _from_jsonable(header["rng_states"]), header.get("collapse_run", 0))
        if ck.config_hash != header["config_hash"]:
            raise FormatError("checkpoint config hash mismatch")
        return ck


# -- pretraining --------------------------------------------------------------


@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    history: list[dict]

    @property
    def params(self) -> ModelParams:
        return self.checkpoint.params

    @property
    def collapse_alarm(self) -> bool:
        return any(h["collapse_alarm"] for h in self.history)


def _rngs(seed: int):
    init_ss, data_ss, mask_ss = np.random.SeedSequence(seed).spawn(3)
    return tuple(np.random.Generator(np.random.Philox(s)) for s in (init_ss, data_ss, mask_ss))


def initial_checkpoint(model_cfg: ModelConfig, train_cfg: TrainConfig) -> Checkpoint:
    """Epoch-0 checkpoint holding the seeded initialization, as ``pretrain`` would start from."""
    train_cfg.validate()
    init_rng, data_rng, mask_rng = _rngs(train_cfg.seed)
    params = GFPModel(model_cfg, train_cfg.weights).init_params(init_rng)
    return Checkpoint(params, AdamState.zeros(params), 0, model_cfg, train_cfg,
                      {"data": data_rng.bit_generator.state, "mask": mask_rng.bit_generator.state})


def pretrain(
    sequences: Sequence[SkeletonSequence],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    out_dir: str | Path | None = None,
    resume: Checkpoint | None = None,
    stop_after: int | None = None,
    checkpoint_every: int = 0,
) -> PretrainResult:
    """Jointly train encoder, predictor and target network (or the reconstruction decoder).

    Writes ``metrics.jsonl``/``metrics.csv`` and ``checkpoint.skt`` to ``out_dir``
    when given. ``stop_after`` ends the run after that many total epochs, for
    interrupt/resume testing.
    """
    if not sequences:
        raise ValidationError("pretraining needs a non-empty dataset")
    train_cfg.validate()
    model = GFPModel(model_cfg, train_cfg.weights)
    init_rng, data_rng, mask_rng = _rngs(train_cfg.seed)
    if resume is None:
        params = model.init_params(init_rng)
        adam = AdamState.zeros(params)
        start, collapse_run = 0, 0
    else:
        if resume.config_hash != config_hash(model_cfg, train_cfg):
            raise ValidationError("checkpoint was produced by a different configuration")
        params, adam = resume.params.copy(), AdamState(
            {k: v.copy() for k, v in resume.adam.m.items()},
            {k: v.copy() for k, v in resume.adam.v.items()},
            resume.adam.step,
        )
        data_rng.bit_generator.state = resume.rng_states["data"]
        mask_rng.bit_generator.state = resume.rng_states["mask"]
        start, collapse_run = resume.epoch, resume.collapse_run

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if start == 0:
            (out / "metrics.jsonl").write_text("")
    n = len(sequences)
    slices = batch_slices(n, train_cfg.batch_size)
    if not slices:
        raise ValidationError("dataset too small for one batch of >= 2 samples")
    history = []
    end = train_cfg.epochs if stop_after is None else min(stop_after, train_cfg.epochs)
    ckpt = None
    for epoch in range(start, end):
        order = data_rng.permutation(n)
        sums: dict[str, float] = {}
        std_sums: dict[str, float] = {}
        lr = 0.0
        for s, sl in enumerate(slices):
            batch = [sequences[i] for i in order[sl]]
            X = make_batch(batch, model_cfg.frames, train_cfg.augment, data_rng)
            plans = make_plans(X, train_cfg, model_cfg.patch_len, mask_rng)
            report, grads = model.loss_and_grads(params, X, plans)
            if train_cfg.grad_clip:
                clip_grads(grads, train_cfg.grad_clip)
            lr = lr_at(epoch + s / len(slices), train_cfg)
            adamw_step(params, grads, adam, lr, train_cfg)
            for key in METRIC_FIELDS[2:]:
                sums[key] = sums.get(key, 0.0) + getattr(report, key)
            for lvl, v in report.target_std.items():
                std_sums[lvl] = std_sums.get(lvl, 0.0) + v
        k = len(slices)
        row = {"epoch": epoch + 1, "lr": lr}
        row.update({key: sums[key] / k for key in METRIC_FIELDS[2:]})
        row["target_std"] = {lvl: v / k for lvl, v in std_sums.items()}
        if row["target_std"] and all(v < train_cfg.collapse_threshold for v in row["target_std"].values()):
            collapse_run += 1
        else:
            collapse_run = 0
        row["collapse_alarm"] = collapse_run >= train_cfg.collapse_patience
        if collapse_run == train_cfg.collapse_patience:
            log.warning("collapse alarm at epoch %d: target stds %s", epoch + 1, row["target_std"])
        history.append(row)
        log.info("epoch %d lr %.2e l_total %.4f", epoch + 1, lr, row["l_total"])
        ckpt = Checkpoint(params, adam, epoch + 1, model_cfg, train_cfg,
                          {"data": data_rng.bit_generator.state, "mask": mask_rng.bit_generator.state},
                          collapse_run)
        if out is not None:
            with open(out / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
            if checkpoint_every and (epoch + 1) % checkpoint_every == 0:
                ckpt.save(out / f"checkpoint_e{epoch + 1:04d}.skt")
    if ckpt is None:
        ckpt = resume or Checkpoint(params, adam, start, model_cfg, train_cfg,
                                    {"data": data_rng.bit_generator.state, "mask": mask_rng.bit_generator.state})
    if out is not None:
        ckpt.save(out / "checkpoint.skt")
        write_metrics_csv(out / "metrics.jsonl", out / "metrics.csv")
    return PretrainResult(ckpt, history)


def write_metrics_csv(jsonl: Path, csv_path: Path) -> None:
    rows = [json.loads(line) for line in Path(jsonl).read_text().splitlines() if line.strip()]
    levels = sorted({lvl for r in rows for lvl in r.get("target_std", {})})
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*METRIC_FIELDS, *(f"std_{lvl}" for lvl in levels), "collapse_alarm"])
        for r in rows:
            w.writerow([*(r[f] for f in METRIC_FIELDS),
                        *(r["target_std"].get(lvl, "") for lvl in levels), r["collapse_alarm"]])
