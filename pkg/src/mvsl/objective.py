"""Teacher-student supervision and the weighted training objective."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, InputError, NonFiniteLossError
from .mgcl import cosine_matrix

COMPONENTS = ("l_global", "l_local", "l_mse", "l_kl", "l_dsg")


@dataclass(frozen=True)
class LossWeights:
    """Weights for the MSE, KL and DSG terms.

    With ``tie_lambda13`` (the default) the DSG weight follows the MSE weight.
    """

    lambda1: float = 0.5
    lambda2: float = 0.25
    lambda3: float | None = None
    tie_lambda13: bool = True

    def __post_init__(self):
        if self.lambda3 is None or self.tie_lambda13:
            object.__setattr__(self, "lambda3", self.lambda1)
        for name in ("lambda1", "lambda2", "lambda3"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ConfigurationError(f"{name} must be a finite non-negative number, got {v}")


def teacher_logits(frozen_cls: torch.Tensor, class_mean: torch.Tensor) -> torch.Tensor:
    """Cosine logits of the frozen image features against teacher class means."""
    with torch.no_grad():
        return cosine_matrix(frozen_cls, class_mean)


def kl_alignment_loss(teacher: torch.Tensor, student: torch.Tensor, tau: float) -> torch.Tensor:
    """Batch-mean KL(softmax(teacher/tau) || softmax(student/tau))."""
    if teacher.shape != student.shape:
        raise InputError(f"shape mismatch: {tuple(teacher.shape)} vs {tuple(student.shape)}")
    log_q = F.log_softmax(student / tau, dim=1)
    log_p = F.log_softmax(teacher.detach() / tau, dim=1)
    return F.kl_div(log_q, log_p, reduction="batchmean", log_target=True)


def mse_alignment_loss(student_text: torch.Tensor, class_mean: torch.Tensor) -> torch.Tensor:
    """Squared L2 distance per class, averaged over classes (not over D)."""
    if student_text.shape != class_mean.shape:
        raise InputError(
            f"shape mismatch: {tuple(student_text.shape)} vs {tuple(class_mean.shape)}")
    diff = student_text - class_mean.detach()
    return (diff * diff).sum(dim=1).mean()


@dataclass
class LossReport:
    l_global: torch.Tensor
    l_local: torch.Tensor
    l_mse: torch.Tensor
    l_kl: torch.Tensor
    l_dsg: torch.Tensor
    total: torch.Tensor
    has_grad: dict[str, bool] = field(default_factory=dict)
    # optional cross-entropy on the fused scores; already folded into ``total``
    l_fusion: torch.Tensor | None = None

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in (*COMPONENTS, "total")}


def _as_tensor(v) -> torch.Tensor:
    return v if isinstance(v, torch.Tensor) else torch.tensor(float(v), dtype=torch.float64)


def total_loss(components: dict, weights: LossWeights, step: int = -1) -> LossReport:
    """Combine components; missing components count as zero.

    Raises :class:`NonFiniteLossError` naming the first non-finite component.
    """
    unknown = set(components) - set(COMPONENTS)
    if unknown:
        raise InputError(f"unknown loss components: {sorted(unknown)}")
    vals = {k: _as_tensor(components.get(k, 0.0)) for k in COMPONENTS}
    for k in COMPONENTS:
        if not bool(torch.isfinite(vals[k]).all()):
            raise NonFiniteLossError(k, step)
    total = (vals["l_global"] + vals["l_local"] + weights.lambda1 * vals["l_mse"]
             + weights.lambda2 * vals["l_kl"] + weights.lambda3 * vals["l_dsg"])
    return LossReport(**vals, total=total,
                      has_grad={k: vals[k].requires_grad for k in COMPONENTS})
