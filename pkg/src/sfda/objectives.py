"""Adaptation losses.

All losses take torch tensors and return 0-dim tensors so they can be
combined and back-propagated by the training loop.  Probabilities are
row-stochastic ``B x K`` matrices (the classification response of a batch).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import NumericError, ValidationError

_ROW_TOL = 1e-6


@dataclass(frozen=True)
class LossWeights:
    lambda_nm: float = 1.0
    lambda_pl: float = 0.3
    lambda_cons: float = 1.0

    def __post_init__(self):
        for name in ("lambda_nm", "lambda_pl", "lambda_cons"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be nonnegative, got {getattr(self, name)}")


def _check_response(A: torch.Tensor) -> None:
    if A.ndim != 2:
        raise ValidationError(f"classification response must be B x K, got shape {tuple(A.shape)}")
    if A.shape[0] == 0:
        raise ValidationError("classification response has an empty batch")


def check_row_stochastic(A, tol: float = _ROW_TOL) -> None:
    A = torch.as_tensor(A)
    _check_response(A)
    if (A < -tol).any() or (A > 1 + tol).any():
        raise ValidationError("response entries must lie in [0, 1]")
    sums = A.sum(dim=1)
    bad = torch.nonzero((sums - 1).abs() > tol)
    if len(bad):
        i = int(bad[0])
        raise ValidationError(f"row {i} sums to {float(sums[i]):.8f}, expected 1")


def frobenius_norm(A: torch.Tensor) -> torch.Tensor:
    A = torch.as_tensor(A)
    _check_response(A)
    return torch.sqrt((A * A).sum())


def nm_loss(A: torch.Tensor) -> torch.Tensor:
    """Negative Frobenius norm of the batch response.

    Frobenius norm lower-bounds the nuclear norm, so minimizing this both
    sharpens individual predictions and keeps the batch spread across classes.
    """
    return -frobenius_norm(A)


def nuclear_norm_check(A, slack: float = 1e-8) -> tuple[float, float, int]:
    """Return ``(fro, nuc, rank)`` and assert ``fro <= nuc <= sqrt(rank) * fro``.

    Diagnostic only; works on a detached float64 copy.
    """
    M = np.asarray(torch.as_tensor(A).detach().cpu().double().numpy())
    if not np.all(np.isfinite(M)):
        raise NumericError("nuclear_norm_check needs a finite matrix")
    try:
        s = np.linalg.svd(M, compute_uv=False)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"SVD did not converge: {exc}") from exc
    fro = float(np.sqrt((M * M).sum()))
    nuc = float(s.sum())
    tol = max(M.shape) * np.finfo(float).eps * (s[0] if len(s) else 0.0)
    rank = int((s > tol).sum())
    if not (fro <= nuc + slack and nuc <= np.sqrt(rank) * fro + slack):
        raise NumericError(f"norm sandwich violated: fro={fro}, nuc={nuc}, rank={rank}")
    return fro, nuc, rank


def _soft_ce(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    return -(targets * F.log_softmax(logits, dim=1)).sum(dim=1).mean()


def pseudo_ce_loss(logits: torch.Tensor, pseudo: torch.Tensor) -> torch.Tensor:
    """Cross-entropy against pseudo-labels.

    ``pseudo`` is either a length-B integer vector of hard labels or a
    ``B x K`` row-stochastic matrix of soft (refined) labels.
    """
    logits = torch.as_tensor(logits)
    pseudo = torch.as_tensor(pseudo)
    K = logits.shape[1]
    if pseudo.ndim == 1:
        if pseudo.dtype.is_floating_point:
            raise ValidationError("hard pseudo-labels must be integers")
        if (pseudo < 0).any() or (pseudo >= K).any():
            bad = int(torch.nonzero((pseudo < 0) | (pseudo >= K))[0])
            raise ValidationError(f"pseudo-label {int(pseudo[bad])} at index {bad} outside [0, {K})")
        return F.cross_entropy(logits, pseudo.long())
    if pseudo.shape != logits.shape:
        raise ValidationError(f"soft labels shape {tuple(pseudo.shape)} != logits {tuple(logits.shape)}")
    check_row_stochastic(pseudo.detach())
    return _soft_ce(logits, pseudo.to(logits.dtype))


def expectation_ratio(global_mean: torch.Tensor, batch_mean: torch.Tensor) -> torch.Tensor:
    zero = torch.nonzero(batch_mean <= 0)
    if len(zero):
        raise NumericError(f"batch mean of class {int(zero[0])} is zero; expectation ratio undefined")
    if (global_mean <= 0).any():
        raise NumericError(f"global mean of class {int(torch.nonzero(global_mean <= 0)[0])} is not positive")
    return global_mean / batch_mean


def normalize_weak(weak_probs: torch.Tensor, global_mean: torch.Tensor, mode: str = "softmax") -> torch.Tensor:
    """Debias weak-branch predictions by the dataset/batch expectation ratio.

    ``mode="softmax"`` applies softmax to ``weak * ratio`` row-wise;
    ``mode="divide"`` rescales and divides by the row sum instead.
    """
    ratio = expectation_ratio(global_mean.to(weak_probs.dtype), weak_probs.mean(dim=0))
    scaled = weak_probs * ratio
    if mode == "softmax":
        return torch.softmax(scaled, dim=1)
    if mode == "divide":
        return scaled / scaled.sum(dim=1, keepdim=True)
    raise ValidationError(f"unknown weak normalization {mode!r}")


def consistency_loss(weak_probs, strong_probs, global_mean, mode: str = "softmax") -> torch.Tensor:
    """Soft cross-entropy of strong-view predictions against debiased weak-view ones.

    The weak branch is a target: it is detached after normalization, so
    gradients reach the model only through ``strong_probs``.
    """
    weak_probs = torch.as_tensor(weak_probs)
    strong_probs = torch.as_tensor(strong_probs)
    global_mean = torch.as_tensor(global_mean)
    if weak_probs.shape != strong_probs.shape:
        raise ValidationError("weak and strong responses must have the same shape")
    target = normalize_weak(weak_probs.detach(), global_mean.detach(), mode).detach()
    log_strong = torch.log(strong_probs)
    # 0 * log 0 contributes nothing
    terms = torch.where(target > 0, target * log_strong, torch.zeros_like(log_strong))
    return -terms.sum(dim=1).mean()


class ExpectationTracker:
    """Running estimate of the dataset-level mean prediction.

    Updated with an exponential moving average of weak-branch batch means and
    reset from a full pass at every epoch boundary.
    """

    def __init__(self, num_classes: int, momentum: float = 0.9):
        self.momentum = momentum
        self.mean = torch.full((num_classes,), 1.0 / num_classes)

    def reset(self, full_pass_probs: torch.Tensor) -> None:
        self.mean = full_pass_probs.detach().mean(dim=0).clone()

    def update(self, batch_probs: torch.Tensor) -> torch.Tensor:
        batch_mean = batch_probs.detach().mean(dim=0)
        self.mean = self.momentum * self.mean + (1 - self.momentum) * batch_mean
        return self.mean


def total_loss(nm, pl, cons, w: LossWeights):
    return w.lambda_nm * nm + w.lambda_pl * pl + w.lambda_cons * cons


def _check_lam(lam) -> None:
    lam_t = torch.as_tensor(lam)
    if ((lam_t < 0) | (lam_t > 1)).any():
        raise ValidationError(f"mixup coefficient must lie in [0, 1], got {lam}")


def mixup_pair(x_i, y_i, x_j, y_j, lam: float):
    _check_lam(lam)
    if lam == 1.0:
        return x_i, y_i
    if lam == 0.0:
        return x_j, y_j
    return lam * x_i + (1 - lam) * x_j, lam * y_i + (1 - lam) * y_j


def _per_sample_ce(logits, targets):
    if targets.ndim == 1:
        targets = F.one_hot(targets.long(), logits.shape[1])
    return -(targets.to(logits.dtype) * F.log_softmax(logits, dim=1)).sum(dim=1)


def mkd_loss(student_logits, y_i, y_j, lam) -> torch.Tensor:
    """MixUp distillation loss on a batch of mixed images.

    ``lam`` is a scalar or one coefficient per row.  The value equals
    ``pseudo_ce_loss(student_logits, lam * y_i + (1 - lam) * y_j)`` because
    cross-entropy is linear in its target.
    """
    _check_lam(lam)
    if isinstance(lam, (int, float)):
        return lam * pseudo_ce_loss(student_logits, y_i) + (1 - lam) * pseudo_ce_loss(student_logits, y_j)
    lam = torch.as_tensor(lam, dtype=student_logits.dtype)
    per_sample = lam * _per_sample_ce(student_logits, y_i) + (1 - lam) * _per_sample_ce(student_logits, y_j)
    return per_sample.mean()


def im_loss(probs: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    # information maximization baseline: mean entropy minus marginal entropy
    ent = -(probs * torch.log(probs + eps)).sum(dim=1).mean()
    marginal = probs.mean(dim=0)
    return ent + (marginal * torch.log(marginal + eps)).sum()
