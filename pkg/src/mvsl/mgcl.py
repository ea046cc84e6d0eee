"""Multi-granularity contrastive learning: global/patch similarities and losses."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .encoders import DTYPE
from .errors import ConfigurationError, InputError, NumericError

EPS = 1e-12


@dataclass(frozen=True)
class Temperatures:
    tau_contrastive: float = 0.07
    tau_graph: float = 1.0
    tau_kl: float = 1.0

    def __post_init__(self):
        for name in ("tau_contrastive", "tau_graph", "tau_kl"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be > 0")


class FusionCoefficients(nn.Module):
    """Local/global fusion weights, both initialised to 0.5 and unconstrained."""

    def __init__(self, beta1: float = 0.5, beta2: float = 0.5, trainable: bool = True):
        super().__init__()
        self.beta1 = nn.Parameter(torch.tensor(float(beta1), dtype=DTYPE), requires_grad=trainable)
        self.beta2 = nn.Parameter(torch.tensor(float(beta2), dtype=DTYPE), requires_grad=trainable)


@dataclass
class SimilaritySet:
    S_global: torch.Tensor  # (B, C)
    S_patch: torch.Tensor  # (B, N-1, C)
    S_local: torch.Tensor  # (B, C)
    S_final: torch.Tensor  # (B, C)


def l2_normalize(x: torch.Tensor, strict: bool = True) -> torch.Tensor:
    """Row-wise L2 normalisation over the last axis.

    With ``strict`` a zero-norm row raises; otherwise it passes through as zeros.
    """
    if strict and x.numel() and bool((x.detach().norm(dim=-1) == 0).any()):
        raise NumericError("zero-norm feature row; cosine similarity undefined")
    return F.normalize(x, dim=-1, eps=EPS)


def cosine_matrix(a: torch.Tensor, b: torch.Tensor, strict: bool = True) -> torch.Tensor:
    if a.shape[-1] != b.shape[-1]:
        raise InputError(f"feature dims differ: {a.shape[-1]} vs {b.shape[-1]}")
    return l2_normalize(a, strict) @ l2_normalize(b, strict).T


def global_similarity(img: torch.Tensor, txt: torch.Tensor, strict: bool = True) -> torch.Tensor:
    """Cosine similarity between image rows (B, D) and class rows (C, D)."""
    return cosine_matrix(img, txt, strict)


def patch_similarity(patches: torch.Tensor, txt: torch.Tensor, strict: bool = True) -> torch.Tensor:
    """Per-patch cosine similarity: (B, P, D) x (C, D) -> (B, P, C)."""
    if patches.ndim != 3:
        raise InputError(f"patch features must be (B, P, D), got {tuple(patches.shape)}")
    return cosine_matrix(patches, txt, strict)


def _check_labels(labels: torch.Tensor, n_classes: int, batch: int) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.shape != (batch,):
        raise InputError(f"labels shape {tuple(labels.shape)} != ({batch},)")
    if batch < 1:
        raise InputError("contrastive loss needs at least one sample")
    if bool(((labels < 0) | (labels >= n_classes)).any()):
        raise InputError(f"label outside [0, {n_classes})")
    return labels


def global_contrastive_loss(s_global: torch.Tensor, labels, tau: float) -> torch.Tensor:
    labels = _check_labels(labels, s_global.shape[1], s_global.shape[0])
    return F.cross_entropy(s_global / tau, labels)


def local_contrastive_loss(s_patch: torch.Tensor, labels, tau: float) -> torch.Tensor:
    """Cross-entropy averaged over every (image, patch) pair."""
    b, p, c = s_patch.shape
    labels = _check_labels(labels, c, b)
    return F.cross_entropy((s_patch / tau).reshape(b * p, c), labels.repeat_interleave(p))


def aggregate_local(s_patch: torch.Tensor) -> torch.Tensor:
    if s_patch.ndim != 3 or s_patch.shape[1] < 1:
        raise InputError("aggregate_local needs at least one patch")
    return s_patch.mean(dim=1)


def fuse(s_local: torch.Tensor, s_global: torch.Tensor, beta: FusionCoefficients) -> torch.Tensor:
    if s_local.shape != s_global.shape:
        raise InputError(f"shape mismatch: {tuple(s_local.shape)} vs {tuple(s_global.shape)}")
    return beta.beta1 * s_local + beta.beta2 * s_global


def classify(s_final: torch.Tensor) -> torch.Tensor:
    """Row-wise argmax; ties resolve to the lowest class index."""
    return torch.argmax(s_final.detach(), dim=1)


def similarity_set(cls_feat: torch.Tensor, patch_feat: torch.Tensor, txt: torch.Tensor,
                   beta: FusionCoefficients) -> SimilaritySet:
    s_global = global_similarity(cls_feat, txt)
    # ReLU patch features can be exactly zero; let those contribute zero similarity
    s_patch = patch_similarity(patch_feat, txt, strict=False)
    s_local = aggregate_local(s_patch)
    return SimilaritySet(s_global, s_patch, s_local, fuse(s_local, s_global, beta))
