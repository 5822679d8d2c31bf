"""Evidential classification head for the binary (Beta) case.

Evidence ``e = (e_0, e_1)`` parameterizes ``p ~ Beta(e_1 + 1, e_0 + 1)`` for
the cancer probability, i.e. concentrations ``alpha_j = e_j + 1`` with total
``S = e_0 + e_1 + 2``. Loss functions work on torch tensors of shape
``(..., 2)`` and return one value per sample so the co-teaching trainer can
rank them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch.nn import functional as F

from .domain import EvidenceOutput


@dataclass(frozen=True)
class EdlLossConfig:
    kl_anneal_epochs: int = 10
    kl_max_weight: float = 1.0
    activation: str = "softplus"  # or "relu"

    def __post_init__(self):
        if self.kl_anneal_epochs < 1:
            raise ValueError("kl_anneal_epochs must be >= 1")
        if self.activation not in ("softplus", "relu"):
            raise ValueError(f"unknown evidence activation {self.activation!r}")


def _tensor(x) -> torch.Tensor:
    if torch.is_tensor(x):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def logits_to_evidence(logits, activation: str = "softplus"):
    """Nonnegative evidence from raw logits; numpy in gives numpy out."""
    if not torch.is_tensor(logits):
        return logits_to_evidence(_tensor(logits), activation).numpy()
    if activation == "relu":
        return F.relu(logits)
    return F.softplus(logits)


def evidence_to_output(evidence) -> EvidenceOutput:
    e0, e1 = (float(v) for v in np.asarray(evidence, dtype=np.float64).reshape(2))
    if e0 < 0 or e1 < 0 or not np.isfinite(e0 + e1):
        raise ValueError(f"evidence must be finite and nonnegative, got {(e0, e1)}")
    s = e0 + e1 + 2.0
    return EvidenceOutput(
        evidence=(e0, e1),
        belief=(e0 / s, e1 / s),
        uncertainty=2.0 / s,
        predicted_label=int(e1 > e0),
    )


def evidence_summary(evidence: np.ndarray) -> dict[str, np.ndarray]:
    """Vectorized belief/uncertainty for an ``(n, 2)`` evidence array.

    ``prob_cancer`` is the Beta mean ``alpha_1 / S``.
    """
    e = np.asarray(evidence, dtype=np.float64)
    if np.any(e < 0):
        raise ValueError("evidence must be nonnegative")
    s = e.sum(axis=1) + 2.0
    u = 2.0 / s
    return {
        "belief": e / s[:, None],
        "uncertainty": u,
        "confidence": 1.0 - u,
        "prob_cancer": (e[:, 1] + 1.0) / s,
        "predicted_label": (e[:, 1] > e[:, 0]).astype(np.int64),
    }


def _one_hot(labels, like: torch.Tensor) -> torch.Tensor:
    y = torch.as_tensor(labels).long()
    return F.one_hot(y, 2).to(like.dtype)


def bayes_risk_loss(evidence, labels) -> torch.Tensor:
    """Closed-form ``E_{p~Beta}|p - y|^2`` summed over both classes."""
    e = _tensor(evidence)
    y = _one_hot(labels, e)
    alpha = e + 1.0
    s = alpha.sum(-1, keepdim=True)
    p = alpha / s
    err = (y - p) ** 2
    var = alpha * (s - alpha) / (s * s * (s + 1.0))
    return (err + var).sum(-1)


def kl_to_uniform(alpha) -> torch.Tensor:
    """KL(Beta(alpha_0, alpha_1) || Beta(1, 1)) in closed form."""
    a = _tensor(alpha)
    s = a.sum(-1)
    lbeta = torch.lgamma(a).sum(-1) - torch.lgamma(s)
    return -lbeta + ((a - 1.0) * (torch.digamma(a) - torch.digamma(s)[..., None])).sum(-1)


def kl_weight(epoch: int, config: EdlLossConfig) -> float:
    return config.kl_max_weight * min(1.0, epoch / config.kl_anneal_epochs)


def kl_regularizer(evidence, labels, epoch: int, config: EdlLossConfig = EdlLossConfig()) -> torch.Tensor:
    """Annealed KL penalty on evidence pointing at the wrong class."""
    e = _tensor(evidence)
    y = _one_hot(labels, e)
    alpha_tilde = y + (1.0 - y) * (e + 1.0)
    return kl_weight(epoch, config) * kl_to_uniform(alpha_tilde)


def edl_sample_loss(logits, labels, epoch: int, config: EdlLossConfig = EdlLossConfig()) -> torch.Tensor:
    e = logits_to_evidence(_tensor(logits), config.activation)
    return bayes_risk_loss(e, labels) + kl_regularizer(e, labels, epoch, config)


def edl_total_loss(logits, labels, epoch: int, config: EdlLossConfig = EdlLossConfig()) -> torch.Tensor:
    logits = _tensor(logits)
    if logits.shape[0] == 0:
        raise ValueError("empty batch")
    if logits.shape[:-1] != torch.as_tensor(labels).shape:
        raise ValueError(f"logits {tuple(logits.shape)} and labels {tuple(torch.as_tensor(labels).shape)} disagree")
    return edl_sample_loss(logits, labels, epoch, config).mean()
