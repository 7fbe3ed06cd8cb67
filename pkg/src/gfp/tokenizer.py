"""Temporal patchify, patch embedding with factored positions, and masking.

Token ``n`` of a sequence with ``V`` joints is patch ``(n // V, n % V)``:
time-major over patches, then joints. Inside a token the ``l`` frames are
laid out frame-major, so feature ``f * C + c`` is frame offset ``f``,
channel ``c``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .skeldata import motion_transform


@dataclass(frozen=True)
class MaskPlan:
    visible: np.ndarray
    masked: np.ndarray
    ratio: float

    @property
    def num_tokens(self) -> int:
        return len(self.visible) + len(self.masked)

    def validate(self, num_tokens: int) -> None:
        allidx = np.concatenate([self.visible, self.masked])
        if len(allidx) != num_tokens or not np.array_equal(np.sort(allidx), np.arange(num_tokens)):
            raise ValidationError(f"mask plan does not partition {num_tokens} tokens")


def num_masked(num_tokens: int, ratio: float) -> int:
    # round-half-up so 0.9 * 750 = 675 regardless of float noise
    return int(np.floor(ratio * num_tokens + 0.5 + 1e-9))


def patchify(X: np.ndarray, patch_len: int) -> np.ndarray:
    """``(..., T, V, C)`` -> ``(..., T_e * V, l * C)``."""
    X = np.asarray(X)
    *lead, T, V, C = X.shape
    if patch_len < 1 or T % patch_len:
        raise ValidationError(f"patch length {patch_len} does not divide {T} frames")
    Te = T // patch_len
    x = X.reshape(*lead, Te, patch_len, V, C)
    x = np.moveaxis(x, -2, -3)  # (..., Te, V, l, C)
    return x.reshape(*lead, Te * V, patch_len * C)


def unpatchify(tokens: np.ndarray, joints: int, patch_len: int) -> np.ndarray:
    tokens = np.asarray(tokens)
    *lead, N, F = tokens.shape
    if N % joints or F % patch_len:
        raise ValidationError("token layout does not match joints / patch length")
    Te, C = N // joints, F // patch_len
    x = tokens.reshape(*lead, Te, joints, patch_len, C)
    x = np.moveaxis(x, -3, -2)  # (..., Te, l, V, C)
    return x.reshape(*lead, Te * patch_len, joints, C)


def position_grid(temporal: np.ndarray, spatial: np.ndarray) -> np.ndarray:
    """Additive positional term for every token, shape ``(T_e * V, C_e)``."""
    Te, V = temporal.shape[0], spatial.shape[0]
    return (temporal[:, None, :] + spatial[None, :, :]).reshape(Te * V, -1)


def position_grid_backward(dpos: np.ndarray, Te: int, V: int) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the temporal and spatial tables from a ``(..., N, C_e)`` gradient."""
    d = dpos.reshape(-1, Te, V, dpos.shape[-1])
    return d.sum(axis=(0, 2)), d.sum(axis=(0, 1))


def embed(
    patches: np.ndarray,
    weight: np.ndarray,
    bias: np.ndarray,
    temporal: np.ndarray,
    spatial: np.ndarray,
) -> np.ndarray:
    """Affine patch embedding plus ``temporal[t_e] + spatial[v]``."""
    if patches.shape[-1] != weight.shape[0]:
        raise ValidationError(
            f"patch features {patches.shape[-1]} do not match embedding input {weight.shape[0]}"
        )
    N = patches.shape[-2]
    if temporal.shape[0] * spatial.shape[0] != N:
        raise ValidationError(
            f"positional tables cover {temporal.shape[0]}x{spatial.shape[0]} tokens, got {N}"
        )
    return patches @ weight + bias + position_grid(temporal, spatial)


def motion_intensity(X: np.ndarray, patch_len: int) -> np.ndarray:
    """Mean absolute frame difference of each patch, shape ``(..., T_e * V)``."""
    motion = np.abs(motion_transform(X))
    return patchify(motion, patch_len).mean(axis=-1)


def sample_mask(
    intensity: np.ndarray,
    ratio: float,
    rng: np.random.Generator,
    temperature: float = 1.0,
    strategy: str = "motion",
) -> MaskPlan:
    """Gumbel-top-k masking over standardized motion intensity.

    The ``round(ratio * N)`` tokens with the largest
    ``z(intensity) + temperature * gumbel`` are masked. ``strategy="uniform"``
    (or constant intensity) reduces to uniform random masking.
    """
    if not 0.0 < ratio < 1.0:
        raise ValidationError(f"mask ratio must lie in (0, 1), got {ratio}")
    if temperature <= 0:
        raise ValidationError("temperature must be positive")
    intensity = np.asarray(intensity, dtype=np.float64)
    N = intensity.shape[0]
    k = num_masked(N, ratio)
    if k >= N:
        raise ValidationError(f"ratio {ratio} leaves no visible token out of {N}")
    score = np.zeros(N)
    if strategy == "motion":
        std = intensity.std()
        if std > 0:
            score = (intensity - intensity.mean()) / std
    elif strategy != "uniform":
        raise ValidationError(f"unknown mask strategy {strategy!r}")
    keys = score + temperature * rng.gumbel(size=N)
    order = np.argsort(-keys, kind="stable")
    masked = np.sort(order[:k])
    visible = np.sort(order[k:])
    return MaskPlan(visible, masked, ratio)
