"""Comparison uncertainty methods: softmax confidence, MC Dropout, deep ensembles.

All of them report confidence as one minus the normalized binary entropy of
the (averaged) cancer probability so that curves are comparable with the
evidential head.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .coteach import Checkpoint, CoteachConfig, train
from .domain import TrainingView
from .heads import binary_entropy_confidence, label_from_prob, softmax_outputs
from .model import BackboneConfig, architecture_fingerprint, forward, predict_logits, set_dropout


@dataclass(frozen=True)
class ProbOutput:
    prob_cancer: float
    confidence: float
    predicted_label: int


def _as_outputs(prob: np.ndarray) -> list[ProbOutput]:
    conf = binary_entropy_confidence(prob)
    labels = label_from_prob(prob)
    return [ProbOutput(float(p), float(c), int(l)) for p, c, l in zip(prob, conf, labels)]


def softmax_prob(model: nn.Module, pixels) -> np.ndarray:
    return softmax_outputs(predict_logits(model, np.asarray(pixels)))["prob_cancer"]


def mc_dropout_prob(model: nn.Module, pixels, passes: int = 20, seed: int = 0) -> np.ndarray:
    """Mean softmax cancer probability over ``passes`` dropout-active forward passes."""
    rate = getattr(model.config, "dropout_rate", 0.0)
    if rate <= 0:
        raise ValueError("MC Dropout needs a model with dropout_rate > 0")
    if passes < 1:
        raise ValueError("passes must be >= 1")
    pixels = np.asarray(pixels)
    total = np.zeros(len(pixels))
    model.eval()
    set_dropout(model, True)
    try:
        with torch.random.fork_rng(devices=[]), torch.no_grad():
            torch.manual_seed(seed)
            for _ in range(passes):
                for i in range(0, len(pixels), 512):
                    logits = forward(model, pixels[i:i + 512]).double().numpy()
                    total[i:i + 512] += softmax_outputs(logits)["prob_cancer"]
    finally:
        model.eval()
    return total / passes


def mc_dropout_predict(model: nn.Module, batch, passes: int = 20, seed: int = 0) -> list[ProbOutput]:
    return _as_outputs(mc_dropout_prob(model, batch, passes, seed))


def ensemble_prob(models: Sequence[nn.Module], pixels) -> np.ndarray:
    if not models:
        raise ValueError("empty ensemble")
    ref = architecture_fingerprint(models[0])
    if any(architecture_fingerprint(m) != ref for m in models[1:]):
        raise ValueError("ensemble members must share one architecture")
    probs = np.stack([softmax_prob(m, pixels) for m in models])
    # sorting makes the mean exactly invariant to member order
    return np.sort(probs, axis=0).sum(axis=0) / len(models)


def ensemble_predict(models: Sequence[nn.Module], batch) -> list[ProbOutput]:
    return _as_outputs(ensemble_prob(models, batch))


def prob_outputs(prob: np.ndarray) -> dict[str, np.ndarray]:
    return {
        "prob_cancer": prob,
        "confidence": binary_entropy_confidence(prob),
        "predicted_label": label_from_prob(prob),
    }


def train_baseline(
    train_view: TrainingView,
    val_view: TrainingView | None,
    config: CoteachConfig,
    backbone: BackboneConfig,
    seed: int = 0,
    members: int = 1,
    on_epoch=None,
) -> list[Checkpoint]:
    """Cross-entropy training of ``members`` independently seeded models.

    ``config.coteaching`` selects plain or co-teaching training per member.
    """
    if members < 1:
        raise ValueError("members must be >= 1")
    config = replace(config, loss_kind="cross_entropy")
    checkpoints = []
    for m in range(members):
        member_seed = seed if members == 1 else 1000 * (seed + 1) + m
        _, ckpt = train(train_view, val_view, config, backbone, member_seed,
                        on_epoch=None if on_epoch is None else (lambda rec, m=m: on_epoch({"member": m, **rec})))
        checkpoints.append(ckpt)
    return checkpoints
