"""Classifier backbones emitting two unconstrained logits per patch."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

BACKBONES = ("small_cnn", "half_resnet18")


@dataclass(frozen=True)
class BackboneConfig:
    kind: str = "small_cnn"
    dropout_rate: float = 0.0
    input_size: tuple[int, int] = (32, 32)
    output_dim: int = 2
    width: int = 16

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        if self.kind not in BACKBONES:
            raise ValueError(f"unknown backbone {self.kind!r}; choose from {BACKBONES}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.output_dim != 2:
            raise ValueError("binary task: output_dim must be 2")


class SmallCNN(nn.Module):
    """Three conv/ReLU/max-pool blocks, global average pooling, linear head."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        w = config.width
        layers = []
        in_ch = 1
        for out_ch in (w, 2 * w, 4 * w):
            layers += [nn.Conv2d(in_ch, out_ch, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2, ceil_mode=True)]
            in_ch = out_ch
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.dropout = nn.Dropout(config.dropout_rate)
        self.head = nn.Linear(in_ch, config.output_dim)

    def forward(self, x):
        h = self.pool(self.features(x)).flatten(1)
        return self.head(self.dropout(h))


class BasicBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.relu = nn.ReLU()
        self.shortcut = nn.Identity()
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, stride, bias=False), nn.BatchNorm2d(out_ch))

    def forward(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.shortcut(x))


class HalfResNet18(nn.Module):
    """ResNet18 layout with one basic block per stage instead of two."""

    blocks_per_stage = (1, 1, 1, 1)

    def __init__(self, config: BackboneConfig):
        super().__init__()
        w = config.width
        self.stem = nn.Sequential(
            nn.Conv2d(1, w, 7, 2, 3, bias=False), nn.BatchNorm2d(w), nn.ReLU(), nn.MaxPool2d(3, 2, 1)
        )
        stages, in_ch = [], w
        for i, n_blocks in enumerate(self.blocks_per_stage):
            out_ch = w * 2**i
            blocks = [BasicBlock(in_ch, out_ch, 1 if i == 0 else 2)]
            blocks += [BasicBlock(out_ch, out_ch) for _ in range(n_blocks - 1)]
            stages.append(nn.Sequential(*blocks))
            in_ch = out_ch
        self.stages = nn.Sequential(*stages)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.dropout = nn.Dropout(config.dropout_rate)
        self.head = nn.Linear(in_ch, config.output_dim)

    def forward(self, x):
        h = self.pool(self.stages(self.stem(x))).flatten(1)
        return self.head(self.dropout(h))


def clone_with_new_init(config: BackboneConfig, seed: int) -> nn.Module:
    """Fresh model whose weights depend only on ``seed``; global RNG untouched."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = (SmallCNN if config.kind == "small_cnn" else HalfResNet18)(config)
    model.config = config
    return model


build_model = clone_with_new_init


def forward(model: nn.Module, batch) -> torch.Tensor:
    """Logits ``(n, 2)`` for a batch of ``(n, h, w)`` patches."""
    x = torch.as_tensor(np.asarray(batch) if not torch.is_tensor(batch) else batch)
    dtype = next(model.parameters()).dtype
    x = x.to(dtype)
    expected = tuple(model.config.input_size)
    if x.ndim != 3 or tuple(x.shape[1:]) != expected:
        raise ValueError(f"expected batch of shape (n, {expected[0]}, {expected[1]}), got {tuple(x.shape)}")
    if x.shape[0] == 0:
        return torch.zeros((0, model.config.output_dim), dtype=dtype)
    return model(x[:, None])


def predict_logits(model: nn.Module, pixels: np.ndarray, batch_size: int = 512) -> np.ndarray:
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(pixels), batch_size):
            out.append(forward(model, pixels[i:i + batch_size]).double().numpy())
    return np.concatenate(out) if out else np.zeros((0, 2))


def architecture_fingerprint(model: nn.Module) -> list[tuple[str, tuple[int, ...]]]:
    return [(name, tuple(p.shape)) for name, p in model.state_dict().items()]


def count_residual_blocks(model: nn.Module) -> list[int]:
    if not isinstance(model, HalfResNet18):
        return []
    return [sum(isinstance(m, BasicBlock) for m in stage) for stage in model.stages]


def set_dropout(model: nn.Module, active: bool) -> None:
    for m in model.modules():
        if isinstance(m, nn.Dropout):
            m.train(active)


def save_checkpoint(model: nn.Module, path: str | os.PathLike, **meta) -> None:
    """npz archive: one float32 array per parameter/buffer plus a JSON header."""
    arrays = {}
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy()
        arrays[f"param/{name}"] = arr.astype(np.float32) if arr.dtype.kind == "f" else arr
    header = {"config": asdict(model.config), "meta": meta}
    arrays["__header__"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | os.PathLike) -> tuple[nn.Module, dict]:
    with np.load(path) as data:
        header = json.loads(data["__header__"].tobytes().decode())
        cfg = header["config"]
        model = clone_with_new_init(BackboneConfig(**cfg), 0)
        state = {k[len("param/"):]: torch.from_numpy(data[k].copy()) for k in data.files if k.startswith("param/")}
    model.load_state_dict(state)
    model.eval()
    return model, header["meta"]
