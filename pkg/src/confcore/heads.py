"""Map backbone logits to per-patch probability, confidence and label."""

from __future__ import annotations

import numpy as np
from scipy.special import softmax

from .edl import evidence_summary, logits_to_evidence

HEADS = ("edl", "softmax")


def binary_entropy_confidence(prob) -> np.ndarray:
    """``1 - H(p) / ln 2``: 0 at p = 0.5, 1 at p in {0, 1}."""
    p = np.clip(np.asarray(prob, dtype=np.float64), 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -(np.where(p > 0, p * np.log(p), 0.0) + np.where(p < 1, (1 - p) * np.log1p(-p), 0.0))
    return np.clip(1.0 - h / np.log(2.0), 0.0, 1.0)


def label_from_prob(prob) -> np.ndarray:
    # exactly 0.5 resolves to benign
    return (np.asarray(prob) > 0.5).astype(np.int64)


def softmax_outputs(logits: np.ndarray) -> dict[str, np.ndarray]:
    prob = softmax(np.asarray(logits, dtype=np.float64), axis=1)[:, 1]
    return {
        "prob_cancer": prob,
        "confidence": binary_entropy_confidence(prob),
        "predicted_label": label_from_prob(prob),
    }


def edl_outputs(logits: np.ndarray, activation: str = "softplus") -> dict[str, np.ndarray]:
    evidence = logits_to_evidence(np.asarray(logits, dtype=np.float64), activation)
    out = evidence_summary(evidence)
    out["evidence"] = evidence
    return out


def head_outputs(logits: np.ndarray, head: str) -> dict[str, np.ndarray]:
    if head == "edl":
        return edl_outputs(logits)
    if head == "softmax":
        return softmax_outputs(logits)
    raise ValueError(f"unknown head {head!r}")
