"""Loss terms: hierarchical prediction, patch reconstruction, variance/covariance regularizers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

VAR_EPS = 1e-4


@dataclass(frozen=True)
class LossWeights:
    lam: float = 5.0  # prediction weight
    alpha: float = 5.0  # covariance weight
    beta: float = 1.0  # variance weight
    gamma: float = 1.0  # std threshold of the variance hinge

    def validate(self) -> None:
        if min(self.lam, self.alpha, self.beta, self.gamma) < 0:
            raise ValidationError("loss weights must be non-negative")


@dataclass
class LossReport:
    l_pred: float
    l_var: float
    l_cov: float
    l_reg: float
    l_total: float
    target_std: dict[str, float] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "l_pred": self.l_pred,
            "l_var": self.l_var,
            "l_cov": self.l_cov,
            "l_reg": self.l_reg,
            "l_total": self.l_total,
            "target_std": dict(self.target_std),
        }


def _check_pairs(preds: dict, targets: dict) -> None:
    if preds.keys() != targets.keys():
        raise ValidationError(f"prediction levels {sorted(preds)} != target levels {sorted(targets)}")
    for k in preds:
        if np.shape(preds[k]) != np.shape(targets[k]):
            raise ValidationError(
                f"level {k}: prediction shape {np.shape(preds[k])} != target shape {np.shape(targets[k])}"
            )


def prediction_loss(preds, targets, weights=None, return_grad: bool = False):
    """Batch mean of ``(1/M) * sum_j ||Zp_j - Zt_j||_F^2``.

    Each level is ``(B, n_j, C_t)``. ``weights`` optionally maps a level to a
    ``(B, n_j)`` 0/1 array selecting which tokens count; ``M`` is then the
    per-sample count of selected tokens.
    """
    _check_pairs(preds, targets)
    B = next(iter(preds.values())).shape[0]
    sq, M = np.zeros(B), np.zeros(B)
    for k in preds:
        diff = preds[k] - targets[k]
        w = np.ones(diff.shape[:-1]) if weights is None or k not in weights else weights[k]
        sq += (w * (diff * diff).sum(axis=-1)).sum(axis=-1)
        M += w.sum(axis=-1)
    if np.any(M <= 0):
        raise ValidationError("prediction loss has no target tokens for some sample")
    loss = float(np.mean(sq / M))
    if not return_grad:
        return loss
    dpred = {}
    for k in preds:
        w = np.ones(preds[k].shape[:-1]) if weights is None or k not in weights else weights[k]
        scale = (2.0 / (B * M))[:, None, None] * w[..., None]
        dpred[k] = scale * (preds[k] - targets[k])
    return loss, dpred, {k: -v for k, v in dpred.items()}


def reconstruction_loss(decoded: np.ndarray, patches: np.ndarray, return_grad: bool = False):
    """Batch mean of ``(1/N) * ||f(E_N) - X_e||_F^2`` over ``(..., N, l*C)`` arrays."""
    decoded, patches = np.asarray(decoded), np.asarray(patches)
    if decoded.shape != patches.shape:
        raise ValidationError(f"decoded shape {decoded.shape} != patch shape {patches.shape}")
    N = decoded.shape[-2]
    diff = decoded - patches
    per_sample = (diff * diff).sum(axis=(-1, -2)) / N
    loss = float(np.mean(per_sample))
    if not return_grad:
        return loss
    return loss, 2.0 * diff / (N * per_sample.size)


def _samples(Z) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2:
        raise ValidationError(f"regularizers take a (samples, dims) matrix, got shape {Z.shape}")
    if Z.shape[0] < 2:
        raise ValidationError(f"need at least 2 samples for batch statistics, got {Z.shape[0]}")
    return Z


def variance_loss(Z, gamma: float = 1.0, eps: float = VAR_EPS, return_grad: bool = False):
    """Mean over dimensions of ``max(0, gamma - sqrt(Var + eps))`` (unbiased variance)."""
    Z = _samples(Z)
    n, C = Z.shape
    Zc = Z - Z.mean(axis=0)
    std = np.sqrt((Zc * Zc).sum(axis=0) / (n - 1) + eps)
    hinge = np.maximum(0.0, gamma - std)
    loss = float(hinge.sum() / C)
    if not return_grad:
        return loss
    active = (gamma - std > 0).astype(np.float64)
    return loss, -(active / (C * (n - 1) * std)) * Zc


def covariance_loss(Z, return_grad: bool = False):
    """``(1/C) * sum_{i != j} Cov_ij^2`` over ordered pairs, unbiased covariance."""
    Z = _samples(Z)
    n, C = Z.shape
    Zc = Z - Z.mean(axis=0)
    cov = Zc.T @ Zc / (n - 1)
    off = cov - np.diag(np.diag(cov))
    loss = float((off * off).sum() / C)
    if not return_grad:
        return loss
    return loss, (4.0 / (C * (n - 1))) * (Zc @ off)


def regularization_samples(Z: np.ndarray) -> np.ndarray:
    """Flatten ``(B, n, C_t)`` targets to ``(B * n, C_t)`` regularization samples."""
    return np.asarray(Z).reshape(-1, np.shape(Z)[-1])


def reg_loss(targets: dict, weights: LossWeights) -> float:
    """``sum_j alpha * L_cov(Z_j) + beta * L_var(Z_j)`` over the target levels."""
    return reg_terms(targets, weights)[0]


def reg_terms(targets: dict, weights: LossWeights, return_grad: bool = False):
    """``(l_reg, sum of L_var, sum of L_cov)``, plus per-level gradients if asked."""
    l_reg = l_var = l_cov = 0.0
    grads = {}
    for k, Z in targets.items():
        S = regularization_samples(Z)
        v, dv = variance_loss(S, weights.gamma, return_grad=True)
        c, dc = covariance_loss(S, return_grad=True)
        l_var += v
        l_cov += c
        l_reg += weights.alpha * c + weights.beta * v
        if return_grad:
            grads[k] = (weights.alpha * dc + weights.beta * dv).reshape(np.shape(Z))
    if return_grad:
        return (l_reg, l_var, l_cov), grads
    return l_reg, l_var, l_cov


def target_std(Z: np.ndarray) -> float:
    """Mean per-dimension standard deviation over regularization samples."""
    S = regularization_samples(Z)
    if S.shape[0] < 2:
        return 0.0
    return float(S.std(axis=0, ddof=1).mean())


def total_loss(l_pred: float, l_reg: float, weights: LossWeights, l_var: float = 0.0,
               l_cov: float = 0.0, target_stds: dict[str, float] | None = None) -> LossReport:
    return LossReport(
        l_pred=l_pred,
        l_var=l_var,
        l_cov=l_cov,
        l_reg=l_reg,
        l_total=weights.lam * l_pred + l_reg,
        target_std=dict(target_stds or {}),
    )
