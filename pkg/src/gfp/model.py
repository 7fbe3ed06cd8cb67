"""End-to-end pretraining model: tokenizer, encoder, predictor/decoder, target network and loss."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import backbone as bb
from .backbone import ModelParams, TransformerConfig
from .errors import StateError, ValidationError
from .objective import (
    LossWeights,
    prediction_loss,
    reconstruction_loss,
    reg_terms,
    target_std,
    total_loss,
)
from .predictor import HierarchicalPredictor, HierarchySpec, ReconstructionDecoder, assemble_full
from .skeldata import motion_transform
from .targetnet import TargetNetwork, TgnConfig, mask_patches
from .tokenizer import MaskPlan, embed, patchify, position_grid_backward

OBJECTIVES = ("gfp", "eq1")
LOSS_POSITIONS = ("all", "masked")


@dataclass(frozen=True)
class ModelConfig:
    frames: int = 40
    joints: int = 10
    channels: int = 3
    patch_len: int = 4
    encoder: TransformerConfig = field(default_factory=lambda: TransformerConfig(64, 4, 256, 4))
    hierarchy: HierarchySpec = field(
        default_factory=lambda: HierarchySpec(
            levels=(5, 10),
            predictor_width=64,
            # L_pred sums over target dims while the variance hinge averages over them,
            # so the equilibrium target std shrinks like 1/C_t; 2 keeps it O(1) here
            target_width=2,
            projector_hidden=128,
            global_hidden=256,
        )
    )
    tgn: TgnConfig = field(default_factory=lambda: TgnConfig(local_hidden=128, global_hidden=256))
    decoder_heads: int = 4
    decoder_ffn_hidden: int = 256
    objective: str = "gfp"
    recon_layers: int = 2
    loss_positions: str = "all"

    @property
    def Te(self) -> int:
        return self.frames // self.patch_len

    @property
    def num_tokens(self) -> int:
        return self.Te * self.joints

    def validate(self) -> None:
        if self.frames % self.patch_len:
            raise ValidationError(f"patch length {self.patch_len} does not divide {self.frames} frames")
        if self.objective not in OBJECTIVES:
            raise ValidationError(f"objective must be one of {OBJECTIVES}")
        if self.loss_positions not in LOSS_POSITIONS:
            raise ValidationError(f"loss_positions must be one of {LOSS_POSITIONS}")
        self.encoder.validate()
        if self.objective == "gfp":
            self.hierarchy.validate(self.Te)
            self.tgn.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "encoder" in d:
            d["encoder"] = TransformerConfig(**d["encoder"])
        if "hierarchy" in d:
            h = dict(d["hierarchy"])
            h["levels"] = tuple(h.get("levels", HierarchySpec.levels))
            d["hierarchy"] = HierarchySpec(**h)
        if "tgn" in d:
            d["tgn"] = TgnConfig(**d["tgn"])
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def ntu_config() -> ModelConfig:
    """Full-size NTU configuration (120 frames, 25 joints, l=4) used for compute accounting."""
    return ModelConfig(
        frames=120,
        joints=25,
        channels=3,
        patch_len=4,
        encoder=TransformerConfig(256, 8, 1024, 8),
        hierarchy=HierarchySpec(levels=(5, 10, 30), include_global=True, predictor_width=256,
                                target_width=256, projector_hidden=512, global_hidden=2048),
        tgn=TgnConfig(local_hidden=512, global_hidden=2048),
        decoder_heads=8,
        decoder_ffn_hidden=1024,
        recon_layers=5,
    )


@dataclass
class Tape:
    """Activations recorded by ``GFPModel.forward``; consumed by ``backward``."""

    params: ModelParams
    caches: dict
    consumed: bool = False


class GFPModel:
    def __init__(self, cfg: ModelConfig, weights: LossWeights | None = None):
        cfg.validate()
        self.cfg = cfg
        self.weights = weights or LossWeights()
        self.weights.validate()
        c = cfg
        self.predictor = None
        self.tgn = None
        self.recon = None
        if c.objective == "gfp":
            self.predictor = HierarchicalPredictor(
                c.hierarchy, c.encoder.width, c.Te, c.joints, c.decoder_heads, c.decoder_ffn_hidden,
                c.encoder.layer_norm_eps,
            )
            self.tgn = TargetNetwork(c.tgn, c.hierarchy, c.frames, c.joints, c.channels, c.patch_len)
        else:
            dec_cfg = TransformerConfig(
                c.hierarchy.predictor_width, c.decoder_heads, c.decoder_ffn_hidden, c.recon_layers,
                c.encoder.layer_norm_eps,
            )
            self.recon = ReconstructionDecoder(dec_cfg, c.encoder.width, c.patch_len * c.channels)

    # -- parameters ---------------------------------------------------------

    def init_params(self, seed_or_rng) -> ModelParams:
        rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) else np.random.Generator(
            np.random.Philox(seed_or_rng)
        )
        c = self.cfg
        d = c.encoder.width
        p = ModelParams()
        bb.init_linear(p, "embed", c.patch_len * c.channels, d, rng)
        p.add("pos.temporal", bb.trunc_normal(rng, (c.Te, d)))
        p.add("pos.spatial", bb.trunc_normal(rng, (c.joints, d)))
        bb.init_stack(p, "encoder", c.encoder, rng)
        p.add("mask_token", rng.normal(0.0, bb.INIT_STD, d))
        p.add("dec_pos.temporal", bb.trunc_normal(rng, (c.Te, d)))
        p.add("dec_pos.spatial", bb.trunc_normal(rng, (c.joints, d)))
        if self.predictor is not None:
            self.predictor.init(p, rng)
            self.tgn.init(p, rng)
        else:
            self.recon.init(p, rng)
        return p

    # -- forward / backward -------------------------------------------------

    def forward(self, params: ModelParams, X: np.ndarray, plans: list[MaskPlan]):
        """Loss on a ``(B, T, V, C)`` batch under fixed mask plans.

        Returns ``(LossReport, Tape)``.
        """
        c = self.cfg
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 4 or X.shape[1:] != (c.frames, c.joints, c.channels):
            raise ValidationError(
                f"batch must be (B, {c.frames}, {c.joints}, {c.channels}), got {X.shape}"
            )
        if len(plans) != X.shape[0]:
            raise ValidationError(f"{len(plans)} mask plans for a batch of {X.shape[0]}")
        N = c.num_tokens
        for plan in plans:
            plan.validate(N)
        vis = np.stack([p.visible for p in plans])
        if vis.shape[1] == 0:
            raise ValidationError("mask plan leaves no visible token")

        patches = patchify(X, c.patch_len)
        H, c_enc = self._encode_visible(params, patches, vis)
        full = assemble_full(H, vis, N, params["mask_token"],
                             params["dec_pos.temporal"], params["dec_pos.spatial"])
        caches = {"patches": patches, "vis": vis, "enc": c_enc}

        w = self.weights
        if self.predictor is None:
            decoded, c_dec = self.recon.forward(params, full)
            l_pred, d_dec = reconstruction_loss(decoded, patches, return_grad=True)
            report = total_loss(l_pred, 0.0, w)
            caches.update(dec=c_dec, d_out=w.lam * d_dec)
            return report, Tape(params, caches)

        preds, c_pred = self.predictor.forward(params, full)
        tgn_in = self.tgn_input(X, plans)
        targets, c_tgn = self.tgn.extract_targets(params, tgn_in)
        pos_w = self._loss_position_weights(plans) if c.loss_positions == "masked" else None
        l_pred, dP, dT = prediction_loss(preds.levels, targets, pos_w, return_grad=True)
        (l_reg, l_var, l_cov), dR = reg_terms(targets, w, return_grad=True)
        stds = {k: target_std(z) for k, z in targets.items()}
        report = total_loss(l_pred, l_reg, w, l_var, l_cov, stds)
        dZp = {k: w.lam * v for k, v in dP.items()}
        dZt = {k: w.lam * dT[k] + dR[k] for k in dT}
        caches.update(pred=c_pred, tgn=c_tgn, dZp=dZp, dZt=dZt, preds=preds, targets=targets)
        return report, Tape(params, caches)

    def backward(self, tape: Tape | None) -> dict[str, np.ndarray]:
        """Gradients of ``l_total`` for every registry path."""
        if tape is None or tape.consumed:
            raise StateError("backward needs a fresh tape from forward")
        tape.consumed = True
        params, k = tape.params, tape.caches
        grads: dict[str, np.ndarray] = {}
        if self.predictor is None:
            dfull = self.recon.backward(params, k["dec"], k["d_out"], grads)
        else:
            self.tgn.backward(params, k["tgn"], k["dZt"], grads)
            dfull = self.predictor.backward(params, k["pred"], k["dZp"], grads)
        c = self.cfg
        vis = k["vis"]
        dt, ds = position_grid_backward(dfull, c.Te, c.joints)
        bb.accumulate(grads, "dec_pos.temporal", dt)
        bb.accumulate(grads, "dec_pos.spatial", ds)
        dH = np.take_along_axis(dfull, vis[..., None], axis=1)
        bb.accumulate(grads, "mask_token", dfull.sum(axis=(0, 1)) - dH.sum(axis=(0, 1)))
        dEv = bb.stack_backward(params, "encoder", k["enc"], dH, grads)
        dE = np.zeros(dfull.shape)
        np.put_along_axis(dE, vis[..., None], dEv, axis=1)
        patches = k["patches"]
        bb.accumulate(grads, "embed.weight", patches.reshape(-1, patches.shape[-1]).T @ dE.reshape(-1, dE.shape[-1]))
        bb.accumulate(grads, "embed.bias", dE.sum(axis=(0, 1)))
        dt, ds = position_grid_backward(dE, c.Te, c.joints)
        bb.accumulate(grads, "pos.temporal", dt)
        bb.accumulate(grads, "pos.spatial", ds)
        for path in params:
            if path not in grads:
                grads[path] = np.zeros_like(params[path])
        return grads

    def loss_and_grads(self, params: ModelParams, X: np.ndarray, plans: list[MaskPlan]):
        report, tape = self.forward(params, X, plans)
        return report, self.backward(tape)

    def loss(self, params: ModelParams, X: np.ndarray, plans: list[MaskPlan]) -> float:
        return self.forward(params, X, plans)[0].l_total

    def _encode_visible(self, params: ModelParams, patches: np.ndarray, vis: np.ndarray):
        E = embed(patches, params["embed.weight"], params["embed.bias"],
                  params["pos.temporal"], params["pos.spatial"])
        Ev = np.take_along_axis(E, vis[..., None], axis=1)
        return bb.stack_forward(params, "encoder", Ev, self.cfg.encoder)

    def encode_visible(self, params: ModelParams, X: np.ndarray, plans: list[MaskPlan]) -> np.ndarray:
        """Encoder outputs ``(B, n_visible, C_e)`` for the visible tokens only, in plan order."""
        c = self.cfg
        for plan in plans:
            plan.validate(c.num_tokens)
        vis = np.stack([p.visible for p in plans])
        if vis.shape[1] == 0:
            raise ValidationError("mask plan leaves no visible token")
        return self._encode_visible(params, patchify(np.asarray(X, dtype=np.float64), c.patch_len), vis)[0]

    # -- helpers ------------------------------------------------------------

    def tgn_input(self, X: np.ndarray, plans: list[MaskPlan]) -> np.ndarray:
        variant = self.cfg.tgn.input_variant
        if variant == "motion":
            return motion_transform(X)
        if variant == "joint":
            return X
        masked = np.stack([p.masked for p in plans])
        return mask_patches(X, masked, self.cfg.patch_len)

    def _loss_position_weights(self, plans: list[MaskPlan]) -> dict[str, np.ndarray]:
        """A level token counts if any patch it covers was masked; the global level always counts."""
        c = self.cfg
        B = len(plans)
        patch_masked = np.zeros((B, c.num_tokens))
        for b, p in enumerate(plans):
            patch_masked[b, p.masked] = 1.0
        grid = patch_masked.reshape(B, c.Te, c.joints)
        out = {}
        for t in c.hierarchy.levels:
            out[f"t{t}"] = grid.reshape(B, c.Te // t, t, c.joints).max(axis=2).reshape(B, -1)
        if c.hierarchy.include_global:
            out["global"] = np.ones((B, 1))
        return out

    def encode(self, params: ModelParams, X: np.ndarray, pool: str = "mean") -> np.ndarray:
        """Frozen-encoder features of unmasked ``(B, T, V, C)`` inputs, pooled over tokens."""
        c = self.cfg
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-3:] != (c.frames, c.joints, c.channels):
            raise ValidationError(
                f"encoder trained on (T, V, C)={(c.frames, c.joints, c.channels)}, got {X.shape[-3:]}"
            )
        E = embed(patchify(X, c.patch_len), params["embed.weight"], params["embed.bias"],
                  params["pos.temporal"], params["pos.spatial"])
        H, _ = bb.stack_forward(params, "encoder", E, c.encoder)
        if pool == "mean":
            return H.mean(axis=-2)
        if pool == "max":
            return H.max(axis=-2)
        raise ValidationError(f"unknown feature pool {pool!r}")
