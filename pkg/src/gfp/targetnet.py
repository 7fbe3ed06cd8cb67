"""Target generation network: per-level MLP extractors over transformed skeletons."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backbone as bb
from .backbone import ModelParams
from .errors import ValidationError
from .predictor import HierarchySpec
from .tokenizer import patchify, unpatchify

INPUT_VARIANTS = ("motion", "joint", "masked_joint")


@dataclass(frozen=True)
class TgnConfig:
    local_hidden: int = 512
    global_hidden: int = 2048
    depth: int = 3
    input_variant: str = "motion"

    def validate(self) -> None:
        if self.depth < 2:
            raise ValidationError("extractor depth must be >= 2")
        if self.input_variant not in INPUT_VARIANTS:
            raise ValidationError(f"unknown TGN input {self.input_variant!r}; choose from {INPUT_VARIANTS}")


def assemble_level_input(X: np.ndarray, span: int, patch_len: int) -> np.ndarray:
    """``(..., T, V, C)`` -> ``(..., (T_e / span) * V, span * l * C)``.

    Each token concatenates ``span * l`` consecutive frames of one joint,
    frame-major, in the same time-major token order as the predictor.
    """
    T = np.shape(X)[-3]
    if T % (span * patch_len):
        raise ValidationError(f"span {span} x patch length {patch_len} does not divide {T} frames")
    return patchify(X, span * patch_len)


def assemble_global_input(X: np.ndarray) -> np.ndarray:
    """Flatten each ``(T, V, C)`` sample in ``(t, v, c)`` order."""
    X = np.asarray(X)
    return X.reshape(*X.shape[:-3], -1)


def unflatten_global_input(vec: np.ndarray, frames: int, joints: int, channels: int) -> np.ndarray:
    return np.asarray(vec).reshape(*np.shape(vec)[:-1], frames, joints, channels)


def mask_patches(X: np.ndarray, masked_index: np.ndarray, patch_len: int) -> np.ndarray:
    """Zero the frames of masked patches; ``masked_index`` is ``(B, n_masked)``."""
    B, T, V, C = X.shape
    tokens = patchify(X, patch_len).copy()
    np.put_along_axis(tokens, np.asarray(masked_index)[..., None], 0.0, axis=1)
    return unpatchify(tokens, V, patch_len)


class TargetNetwork:
    def __init__(self, cfg: TgnConfig, spec: HierarchySpec, frames: int, joints: int, channels: int, patch_len: int):
        cfg.validate()
        self.cfg = cfg
        self.spec = spec
        self.frames, self.joints, self.channels, self.patch_len = frames, joints, channels, patch_len
        spec.validate(frames // patch_len)

    def level_input_dim(self, span: int) -> int:
        return span * self.patch_len * self.channels

    def init(self, params: ModelParams, rng) -> None:
        c = self.cfg
        for t in self.spec.levels:
            dims = [self.level_input_dim(t)] + [c.local_hidden] * (c.depth - 1) + [self.spec.target_width]
            bb.init_mlp(params, f"tgn.t{t}", dims, rng)
        if self.spec.include_global:
            d_in = self.frames * self.joints * self.channels
            dims = [d_in] + [c.global_hidden] * (c.depth - 1) + [self.spec.target_width]
            bb.init_mlp(params, "tgn.global", dims, rng)

    def extract_targets(self, params: ModelParams, X: np.ndarray):
        """Targets for a ``(B, T, V, C)`` batch of (already transformed) inputs."""
        if X.shape[-3:] != (self.frames, self.joints, self.channels):
            raise ValidationError(
                f"TGN expects (T, V, C)={(self.frames, self.joints, self.channels)}, got {X.shape[-3:]}"
            )
        out, caches = {}, {}
        for t in self.spec.levels:
            inp = assemble_level_input(X, t, self.patch_len)
            out[f"t{t}"], caches[f"t{t}"] = bb.mlp_forward(params, f"tgn.t{t}", inp, self.cfg.depth)
        if self.spec.include_global:
            inp = assemble_global_input(X)[..., None, :]
            out["global"], caches["global"] = bb.mlp_forward(params, "tgn.global", inp, self.cfg.depth)
        return out, caches

    def backward(self, params: ModelParams, caches, dZ: dict[str, np.ndarray], grads) -> None:
        for name, cache in caches.items():
            bb.mlp_backward(params, f"tgn.{name}", cache, dZ[name], grads)
