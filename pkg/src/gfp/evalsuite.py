"""Frozen-encoder evaluation (linear probe, cosine retrieval) and analytic FLOPs accounting."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import log_softmax, softmax

from . import tensorio
from .backbone import ModelParams
from .errors import ValidationError
from .model import GFPModel, ModelConfig
from .skeldata import UNLABELED, SkeletonSequence, center_crop
from .tokenizer import num_masked

log = logging.getLogger(__name__)


@dataclass
class FeatureBank:
    features: np.ndarray
    labels: np.ndarray
    sample_ids: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise ValidationError("feature matrix and labels are misaligned")
        if not self.sample_ids:
            self.sample_ids = [str(i) for i in range(len(self.labels))]
        if len(self.sample_ids) != len(self.labels):
            raise ValidationError("sample ids and labels are misaligned")
        if not np.all(np.isfinite(self.features)):
            raise ValidationError("feature bank contains non-finite values")

    def __len__(self) -> int:
        return len(self.labels)

    def save(self, path: str | Path) -> None:
        tensorio.save(path, {"features": self.features, "labels": self.labels},
                      {"sample_ids": self.sample_ids}, tensorio.KIND_FEATURES)

    @classmethod
    def load(cls, path: str | Path) -> "FeatureBank":
        tensors, header = tensorio.load(path, tensorio.KIND_FEATURES)
        return cls(tensors["features"], tensors["labels"], list(header["sample_ids"]))


def encode_features(seq: SkeletonSequence, model: GFPModel, params: ModelParams, pool: str = "mean") -> np.ndarray:
    """Mean-pooled encoder output of the unmasked, center-cropped sequence."""
    cfg = model.cfg
    if (seq.joints, seq.channels) != (cfg.joints, cfg.channels):
        raise ValidationError(
            f"sequence has V={seq.joints}, C={seq.channels}; model expects V={cfg.joints}, C={cfg.channels}"
        )
    return model.encode(params, center_crop(seq, cfg.frames)[None], pool)[0]


def extract_features(
    seqs: Sequence[SkeletonSequence],
    model: GFPModel,
    params: ModelParams,
    pool: str = "mean",
    batch_size: int = 64,
) -> FeatureBank:
    cfg = model.cfg
    for s in seqs:
        if (s.joints, s.channels) != (cfg.joints, cfg.channels):
            raise ValidationError(f"sequence {s.sample_id!r} does not match the model's joints/channels")
    chunks = []
    for i in range(0, len(seqs), batch_size):
        X = np.stack([center_crop(s, cfg.frames) for s in seqs[i : i + batch_size]])
        chunks.append(model.encode(params, X, pool))
    feats = np.concatenate(chunks) if chunks else np.zeros((0, cfg.encoder.width))
    labels = [UNLABELED if s.label is None else s.label for s in seqs]
    return FeatureBank(feats, labels, [s.sample_id for s in seqs])


# -- linear probe ---------------------------------------------------------------


@dataclass(frozen=True)
class ProbeConfig:
    lr: float = 0.5
    max_iter: int = 3000
    weight_decay: float = 1e-4
    tol: float = 1e-7
    patience: int = 20


@dataclass
class ProbeResult:
    accuracy: float
    train_accuracy: float
    iterations: int
    final_loss: float


def linear_probe(train: FeatureBank, test: FeatureBank, cfg: ProbeConfig = ProbeConfig()) -> ProbeResult:
    """Softmax regression on standardized features, fit by full-batch gradient descent.

    Stops when the training loss improves by less than ``tol`` for
    ``patience`` consecutive iterations.
    """
    classes = np.unique(train.labels)
    if len(classes) < 2:
        raise ValidationError("linear probe needs at least two classes in the training set")
    K = int(max(train.labels.max(), test.labels.max() if len(test) else 0)) + 1
    mu = train.features.mean(axis=0)
    sd = train.features.std(axis=0)
    sd[sd == 0] = 1.0
    Xtr = (train.features - mu) / sd
    Xte = (test.features - mu) / sd
    n, d = Xtr.shape
    Y = np.zeros((n, K))
    Y[np.arange(n), train.labels] = 1.0
    W = np.zeros((d, K))
    b = np.zeros(K)
    prev, stall, it, loss = np.inf, 0, 0, np.inf
    for it in range(1, cfg.max_iter + 1):
        logits = Xtr @ W + b
        loss = float(-(Y * log_softmax(logits, axis=1)).sum() / n + 0.5 * cfg.weight_decay * (W * W).sum())
        G = (softmax(logits, axis=1) - Y) / n
        W -= cfg.lr * (Xtr.T @ G + cfg.weight_decay * W)
        b -= cfg.lr * G.sum(axis=0)
        stall = stall + 1 if prev - loss < cfg.tol else 0
        if stall >= cfg.patience:
            break
        prev = loss
    train_acc = float(np.mean(np.argmax(Xtr @ W + b, axis=1) == train.labels))
    test_acc = float(np.mean(np.argmax(Xte @ W + b, axis=1) == test.labels)) if len(test) else float("nan")
    return ProbeResult(test_acc, train_acc, it, loss)


# -- retrieval ------------------------------------------------------------------


def knn_retrieve(queries: FeatureBank, gallery: FeatureBank) -> float:
    """Top-1 accuracy of labelling each query by its cosine-nearest gallery item."""
    if len(gallery) == 0:
        raise ValidationError("retrieval gallery is empty")
    overlap = set(queries.sample_ids) & set(gallery.sample_ids)
    if overlap:
        raise ValidationError(f"{len(overlap)} query ids also appear in the gallery, e.g. {sorted(overlap)[0]!r}")
    qn = np.linalg.norm(queries.features, axis=1)
    gn = np.linalg.norm(gallery.features, axis=1)
    qkeep, gkeep = qn > 0, gn > 0
    if not qkeep.all() or not gkeep.all():
        log.warning("excluding %d query and %d gallery features with zero norm",
                    int((~qkeep).sum()), int((~gkeep).sum()))
    if not gkeep.any() or not qkeep.any():
        raise ValidationError("no non-zero features left for retrieval")
    Q = queries.features[qkeep] / qn[qkeep, None]
    G = gallery.features[gkeep] / gn[gkeep, None]
    nearest = np.argmax(Q @ G.T, axis=1)
    return float(np.mean(gallery.labels[gkeep][nearest] == queries.labels[qkeep]))


# -- FLOPs ----------------------------------------------------------------------


@dataclass(frozen=True)
class FlopsReport:
    encoder_flops: float
    decoder_flops: float
    tgn_flops: float

    def as_dict(self, unit: float = 1e9) -> dict:
        return {
            "encoder_gflops": self.encoder_flops / unit,
            "decoder_gflops": self.decoder_flops / unit,
            "tgn_gflops": self.tgn_flops / unit,
        }


def block_macs(n: int, d: int, ffn: int) -> int:
    """QKV + output projections, score and mix products, two FFN maps."""
    return 4 * n * d * d + 2 * n * n * d + 2 * n * d * ffn


def mlp_macs(n: int, dims: Sequence[int]) -> int:
    return n * sum(a * b for a, b in zip(dims[:-1], dims[1:]))


def flops_account(cfg: ModelConfig, mask_ratio: float = 0.9, bodies: int = 1) -> FlopsReport:
    """Per-sequence FLOPs (2 per multiply-accumulate) of encoder, decoder and target network.

    Embedding, normalization, activations and loss arithmetic are excluded.
    ``bodies`` multiplies everything, for datasets that store several
    skeletons per action sequence.
    """
    N = cfg.Te * cfg.joints
    enc = cfg.encoder
    n_vis = N - num_masked(N, mask_ratio)
    encoder = enc.layers * block_macs(n_vis, enc.width, enc.ffn_hidden)
    h = cfg.hierarchy
    Cp = h.predictor_width
    proj = [Cp] + [h.projector_hidden] * (h.projector_depth - 1) + [h.target_width]
    decoder = tgn = 0
    if cfg.objective == "eq1":
        if cfg.recon_layers:
            decoder = (N * enc.width * Cp + cfg.recon_layers * block_macs(N, Cp, cfg.decoder_ffn_hidden)
                       + N * Cp * cfg.patch_len * cfg.channels)
    elif h.levels or h.include_global:
        decoder = N * enc.width * Cp
        T_cur = cfg.Te
        for t, k in zip(h.levels, h.kernels()):
            T_cur //= k
            n = T_cur * cfg.joints
            decoder += block_macs(n, Cp, cfg.decoder_ffn_hidden) + mlp_macs(n, proj)
        if h.include_global:
            decoder += mlp_macs(1, [Cp] + [h.global_hidden] * (h.global_depth - 1) + [Cp]) + mlp_macs(1, proj)
        g = cfg.tgn
        for t in h.levels:
            dims = [t * cfg.patch_len * cfg.channels] + [g.local_hidden] * (g.depth - 1) + [h.target_width]
            tgn += mlp_macs((cfg.Te // t) * cfg.joints, dims)
        if h.include_global:
            dims = [cfg.frames * cfg.joints * cfg.channels] + [g.global_hidden] * (g.depth - 1) + [h.target_width]
            tgn += mlp_macs(1, dims)
    scale = 2 * bodies
    return FlopsReport(float(scale * encoder), float(scale * decoder), float(scale * tgn))
