"""Hierarchical feature predictor: mask-token assembly, pooling cascade, projectors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import backbone as bb
from .backbone import ModelParams, TransformerConfig
from .errors import ValidationError
from .tokenizer import position_grid


@dataclass(frozen=True)
class HierarchySpec:
    """Temporal spans (in patches) of the local levels plus an optional global level."""

    levels: tuple[int, ...] = (5, 10, 30)
    include_global: bool = True
    predictor_width: int = 256
    target_width: int = 256
    projector_hidden: int = 512
    projector_depth: int = 3
    global_hidden: int = 2048
    global_depth: int = 2

    def validate(self, Te: int) -> None:
        levels = list(self.levels)
        if not levels and not self.include_global:
            raise ValidationError("hierarchy needs at least one level")
        if any(b <= a for a, b in zip(levels, levels[1:])) or (levels and levels[0] < 1):
            raise ValidationError(f"levels must be strictly increasing positive spans: {levels}")
        for t in levels:
            if Te % t:
                raise ValidationError(f"level span {t} does not divide T_e={Te}")
        if self.projector_depth < 1 or self.global_depth < 1:
            raise ValidationError("projector and global MLP depths must be >= 1")

    def kernels(self) -> list[int]:
        """Pooling kernel of each stage: ratio of consecutive spans."""
        spans = [1, *self.levels]
        return [b // a for a, b in zip(spans[:-1], spans[1:])]

    def level_names(self) -> list[str]:
        names = [f"t{t}" for t in self.levels]
        if self.include_global:
            names.append("global")
        return names

    def token_counts(self, Te: int, V: int) -> dict[str, int]:
        counts = {f"t{t}": (Te // t) * V for t in self.levels}
        if self.include_global:
            counts["global"] = 1
        return counts

    def num_targets(self, Te: int, V: int) -> int:
        return sum(self.token_counts(Te, V).values())


@dataclass
class HierarchyOutputs:
    """Per-level predictions ``(B, n_i, C_t)``; the global level is ``(B, 1, C_t)``."""

    levels: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def num_targets(self) -> int:
        return sum(z.shape[-2] for z in self.levels.values())


def assemble_full(
    visible_features: np.ndarray,
    visible_index: np.ndarray,
    num_tokens: int,
    mask_token: np.ndarray,
    temporal: np.ndarray,
    spatial: np.ndarray,
) -> np.ndarray:
    """Scatter visible features into a full grid of mask tokens and re-add positions.

    ``visible_features`` is ``(B, n_vis, C_e)`` and ``visible_index`` the
    matching ``(B, n_vis)`` token indices.
    """
    B, n_vis, d = visible_features.shape
    visible_index = np.asarray(visible_index)
    if visible_index.shape != (B, n_vis):
        raise ValidationError(
            f"{n_vis} visible features but mask plan lists {visible_index.shape[-1]} visible tokens"
        )
    if n_vis and (visible_index.min() < 0 or visible_index.max() >= num_tokens):
        raise ValidationError("visible index outside the token range")
    full = np.broadcast_to(mask_token.reshape(1, 1, d), (B, num_tokens, d)).copy()
    np.put_along_axis(full, visible_index[..., None], visible_features, axis=1)
    return full + position_grid(temporal, spatial)


def temporal_pool(tokens: np.ndarray, joints: int, kernel: int) -> np.ndarray:
    """Average non-overlapping windows of ``kernel`` time steps, per joint."""
    *lead, n, d = tokens.shape
    if n % joints:
        raise ValidationError(f"{n} tokens do not split over {joints} joints")
    T = n // joints
    if kernel < 1 or T % kernel:
        raise ValidationError(f"pool kernel {kernel} does not divide temporal length {T}")
    x = tokens.reshape(*lead, T // kernel, kernel, joints, d)
    return x.mean(axis=-3).reshape(*lead, (T // kernel) * joints, d)


def temporal_pool_backward(dy: np.ndarray, joints: int, kernel: int) -> np.ndarray:
    *lead, n, d = dy.shape
    x = dy.reshape(*lead, n // joints, 1, joints, d) / kernel
    x = np.broadcast_to(x, (*lead, n // joints, kernel, joints, d))
    return x.reshape(*lead, n * kernel, d)


class HierarchicalPredictor:
    """Decoder that predicts features at every temporal level of a ``HierarchySpec``."""

    def __init__(
        self,
        spec: HierarchySpec,
        encoder_width: int,
        Te: int,
        joints: int,
        heads: int = 8,
        ffn_hidden: int = 1024,
        layer_norm_eps: float = 1e-6,
    ):
        spec.validate(Te)
        self.spec = spec
        self.Te = Te
        self.V = joints
        self.encoder_width = encoder_width
        self.block_cfg = TransformerConfig(
            spec.predictor_width, heads, ffn_hidden, 1, layer_norm_eps
        )
        self.block_cfg.validate()

    def init(self, params: ModelParams, rng) -> None:
        s = self.spec
        Cp = s.predictor_width
        bb.init_linear(params, "decoder.embed", self.encoder_width, Cp, rng)
        for t in s.levels:
            bb.init_block(params, f"decoder.stage_t{t}", self.block_cfg, rng)
            bb.init_mlp(params, f"decoder.proj_t{t}", self._proj_dims(), rng)
        if s.include_global:
            dims = [Cp] + [s.global_hidden] * (s.global_depth - 1) + [Cp]
            bb.init_mlp(params, "decoder.global_mlp", dims, rng)
            bb.init_mlp(params, "decoder.proj_global", self._proj_dims(), rng)

    def _proj_dims(self) -> list[int]:
        s = self.spec
        return [s.predictor_width] + [s.projector_hidden] * (s.projector_depth - 1) + [s.target_width]

    def forward(self, params: ModelParams, full: np.ndarray):
        """``full`` is the assembled ``(B, T_e * V, C_e)`` sequence."""
        if full.shape[-2] != self.Te * self.V:
            raise ValidationError(f"predictor expects {self.Te * self.V} tokens, got {full.shape[-2]}")
        h, c_embed = bb.linear_forward(params, "decoder.embed", full)
        out = HierarchyOutputs()
        stage_caches = []
        for t, k in zip(self.spec.levels, self.spec.kernels()):
            pooled = temporal_pool(h, self.V, k)
            h, c_blk = bb.block_forward(params, f"decoder.stage_t{t}", pooled, self.block_cfg)
            z, c_proj = bb.mlp_forward(params, f"decoder.proj_t{t}", h, self.spec.projector_depth)
            out.levels[f"t{t}"] = z
            stage_caches.append((t, k, c_blk, c_proj))
        c_global = None
        if self.spec.include_global:
            n_last = h.shape[-2]
            agg = h.mean(axis=-2, keepdims=True)
            g, c_mlp = bb.mlp_forward(params, "decoder.global_mlp", agg, self.spec.global_depth)
            z, c_proj = bb.mlp_forward(params, "decoder.proj_global", g, self.spec.projector_depth)
            out.levels["global"] = z
            c_global = (n_last, c_mlp, c_proj)
        return out, (c_embed, stage_caches, c_global, h.shape)

    def backward(self, params: ModelParams, cache, dZ: dict[str, np.ndarray], grads) -> np.ndarray:
        c_embed, stage_caches, c_global, last_shape = cache
        dh = np.zeros(last_shape)
        if c_global is not None:
            n_last, c_mlp, c_proj = c_global
            dg = bb.mlp_backward(params, "decoder.proj_global", c_proj, dZ["global"], grads)
            dagg = bb.mlp_backward(params, "decoder.global_mlp", c_mlp, dg, grads)
            dh = dh + np.broadcast_to(dagg / n_last, last_shape)
        for t, k, c_blk, c_proj in reversed(stage_caches):
            dh = dh + bb.mlp_backward(params, f"decoder.proj_t{t}", c_proj, dZ[f"t{t}"], grads)
            dpooled = bb.block_backward(params, f"decoder.stage_t{t}", c_blk, dh, grads)
            dh = temporal_pool_backward(dpooled, self.V, k)
        return bb.linear_backward(params, "decoder.embed", c_embed, dh, grads)


class ReconstructionDecoder:
    """Patch-level decoder for the reconstruction baseline: blocks over all tokens, linear head."""

    def __init__(self, cfg: TransformerConfig, encoder_width: int, patch_features: int):
        cfg.validate()
        self.cfg = cfg
        self.encoder_width = encoder_width
        self.patch_features = patch_features

    def init(self, params: ModelParams, rng) -> None:
        bb.init_linear(params, "recon.embed", self.encoder_width, self.cfg.width, rng)
        bb.init_stack(params, "recon", self.cfg, rng)
        bb.init_linear(params, "recon.head", self.cfg.width, self.patch_features, rng)

    def forward(self, params: ModelParams, full: np.ndarray):
        h, c_embed = bb.linear_forward(params, "recon.embed", full)
        h, c_stack = bb.stack_forward(params, "recon", h, self.cfg)
        y, c_head = bb.linear_forward(params, "recon.head", h)
        return y, (c_embed, c_stack, c_head)

    def backward(self, params: ModelParams, cache, dy: np.ndarray, grads) -> np.ndarray:
        c_embed, c_stack, c_head = cache
        dh = bb.linear_backward(params, "recon.head", c_head, dy, grads)
        dh = bb.stack_backward(params, "recon", c_stack, dh, grads)
        return bb.linear_backward(params, "recon.embed", c_embed, dh, grads)
