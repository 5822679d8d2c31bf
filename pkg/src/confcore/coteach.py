"""Two-peer co-teaching with small-loss sample exchange.

Each peer ranks the batch by its own per-sample loss, keeps the
``R(e) * N`` smallest and hands those indices to the other peer for its
update. ``R(e) = 1 - min(e / e_max, gamma)`` with 0-indexed epochs.
Setting ``coteaching=False`` trains a single model on full batches, which is
the ablation arm.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .domain import TrainingView
from .edl import EdlLossConfig, edl_sample_loss
from .evaluation import roc_auc
from .heads import head_outputs
from .model import BackboneConfig, clone_with_new_init, forward, predict_logits

log = logging.getLogger(__name__)

LOSS_KINDS = ("edl", "cross_entropy")


@dataclass(frozen=True)
class CoteachConfig:
    gamma: float = 0.4
    max_epochs: int = 30
    batch_size: int = 64
    optimizer: str = "adamw"
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    loss_kind: str = "edl"
    coteaching: bool = True
    edl: EdlLossConfig = field(default_factory=EdlLossConfig)

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.max_epochs < 0 or self.batch_size < 1:
            raise ValueError("max_epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}")
        if self.optimizer not in ("adamw", "adam"):
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")

    @property
    def head(self) -> str:
        return "edl" if self.loss_kind == "edl" else "softmax"


def selection_ratio(epoch: int, max_epochs: int, gamma: float) -> float:
    if max_epochs < 1:
        raise ValueError("max_epochs must be >= 1")
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return 1.0 - min(epoch / max_epochs, gamma)


def select_small_loss(losses, ratio: float) -> np.ndarray:
    """Indices of the ``max(1, floor(ratio * N))`` smallest losses, ascending by index.

    Equal losses are broken by the lower index.
    """
    losses = np.asarray(losses, dtype=np.float64).ravel()
    if losses.size == 0:
        raise ValueError("no losses to select from")
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must lie in (0, 1], got {ratio}")
    k = max(1, math.floor(ratio * losses.size + 1e-9))
    order = np.argsort(losses, kind="stable")
    return np.sort(order[:k])


@dataclass
class TrainState:
    model_a: nn.Module
    model_b: nn.Module | None
    optimizer_a: torch.optim.Optimizer
    optimizer_b: torch.optim.Optimizer | None
    config: CoteachConfig
    epoch: int = 0
    history: list[dict] = field(default_factory=list)
    last_selection: dict[str, np.ndarray] = field(default_factory=dict)
    last_losses: dict[str, float] = field(default_factory=dict)


def per_sample_loss(logits: torch.Tensor, labels: torch.Tensor, epoch: int, config: CoteachConfig) -> torch.Tensor:
    if config.loss_kind == "edl":
        return edl_sample_loss(logits, labels, epoch, config.edl)
    return F.cross_entropy(logits, labels, reduction="none")


def make_optimizer(model: nn.Module, config: CoteachConfig) -> torch.optim.Optimizer:
    # decoupled weight decay stands in for NovoGrad, which torch does not ship
    if config.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    return torch.optim.AdamW(model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)


def init_state(backbone: BackboneConfig, config: CoteachConfig, seed: int) -> TrainState:
    model_a = clone_with_new_init(backbone, 2 * seed + 1)
    model_b = clone_with_new_init(backbone, 2 * seed + 2) if config.coteaching else None
    return TrainState(
        model_a=model_a,
        model_b=model_b,
        optimizer_a=make_optimizer(model_a, config),
        optimizer_b=make_optimizer(model_b, config) if model_b is not None else None,
        config=config,
    )


def coteach_step(state: TrainState, batch_x, batch_y, epoch: int) -> TrainState:
    """One exchange: both selections come from pre-update weights."""
    cfg = state.config
    y = torch.as_tensor(np.asarray(batch_y), dtype=torch.long)
    if y.numel() == 0:
        raise ValueError("empty batch")
    x = torch.as_tensor(np.asarray(batch_x))

    state.model_a.train()
    loss_a = per_sample_loss(forward(state.model_a, x), y, epoch, cfg)
    if state.model_b is None:
        state.optimizer_a.zero_grad()
        loss_a.mean().backward()
        state.optimizer_a.step()
        state.last_selection = {"a": np.arange(len(y))}
        state.last_losses = {"a": float(loss_a.detach().mean())}
        return state

    state.model_b.train()
    loss_b = per_sample_loss(forward(state.model_b, x), y, epoch, cfg)
    ratio = selection_ratio(epoch, max(cfg.max_epochs, 1), cfg.gamma)
    picked_by_a = select_small_loss(loss_a.detach().numpy(), ratio)
    picked_by_b = select_small_loss(loss_b.detach().numpy(), ratio)

    update_b = loss_b[torch.as_tensor(picked_by_a)].mean()
    update_a = loss_a[torch.as_tensor(picked_by_b)].mean()
    state.optimizer_a.zero_grad()
    state.optimizer_b.zero_grad()
    update_a.backward()
    update_b.backward()
    state.optimizer_a.step()
    state.optimizer_b.step()
    state.last_selection = {"a": picked_by_a, "b": picked_by_b}
    state.last_losses = {"a": float(update_a.detach()), "b": float(update_b.detach())}
    return state


def validation_auc(model: nn.Module, view: TrainingView, head: str) -> float:
    """Core-level AUC with every patch retained (no confidence threshold)."""
    out = head_outputs(predict_logits(model, view.pixels), head)
    n_cores = len(view.core_ids)
    sums = np.bincount(view.core_index, weights=out["prob_cancer"], minlength=n_cores)
    counts = np.bincount(view.core_index, minlength=n_cores)
    try:
        return roc_auc(sums / counts, view.core_labels)
    except ValueError:
        return float("nan")


@dataclass
class Checkpoint:
    state_dict: dict
    backbone: BackboneConfig
    peer: str
    epoch: int
    val_auc: float

    def to_model(self) -> nn.Module:
        model = clone_with_new_init(self.backbone, 0)
        model.load_state_dict(self.state_dict)
        model.eval()
        return model


def train(
    train_view: TrainingView,
    val_view: TrainingView | None,
    config: CoteachConfig,
    backbone: BackboneConfig,
    seed: int = 0,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[TrainState, Checkpoint]:
    """Run ``max_epochs`` epochs; keep the peer/epoch with the best validation core AUC.

    Equal AUCs favour the later epoch, and peer b over peer a within an epoch.

    Without a validation set the final model A is returned.
    """
    if len(train_view) == 0:
        raise ValueError("empty training split")
    if val_view is not None and len(val_view) == 0:
        raise ValueError("empty validation split")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        state = init_state(backbone, config, seed)
        rng = np.random.default_rng([seed, 0xC07E])
        peers = {"a": state.model_a} if state.model_b is None else {"a": state.model_a, "b": state.model_b}
        best = Checkpoint(copy.deepcopy(state.model_a.state_dict()), backbone, "a", -1, float("-inf"))
        n = len(train_view)
        for epoch in range(config.max_epochs):
            order = rng.permutation(n)
            totals = {k: 0.0 for k in peers}
            n_batches = 0
            for start in range(0, n, config.batch_size):
                idx = order[start:start + config.batch_size]
                coteach_step(state, train_view.pixels[idx], train_view.weak_labels[idx], epoch)
                for k in peers:
                    totals[k] += state.last_losses[k]
                n_batches += 1
            state.epoch = epoch + 1
            record = {
                "epoch": epoch,
                "selection_ratio": selection_ratio(epoch, config.max_epochs, config.gamma) if config.coteaching else 1.0,
                "train_loss": {k: v / n_batches for k, v in totals.items()},
            }
            if val_view is not None:
                aucs = {k: validation_auc(m, val_view, config.head) for k, m in peers.items()}
                record["val_auc"] = aucs
                for k, auc in aucs.items():
                    # ties go to the later epoch: core AUC saturates early on easy data
                    if auc >= best.val_auc:
                        best = Checkpoint(copy.deepcopy(peers[k].state_dict()), backbone, k, epoch, auc)
            state.history.append(record)
            log.debug("epoch %d %s", epoch, json.dumps(record))
            if on_epoch is not None:
                on_epoch(record)
        if val_view is None or best.epoch < 0:
            best = Checkpoint(copy.deepcopy(state.model_a.state_dict()), backbone, "a",
                              config.max_epochs - 1, float("nan"))
    return state, best


def config_to_dict(config: CoteachConfig) -> dict:
    return asdict(config)
