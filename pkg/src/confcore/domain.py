"""Shared data types for weakly-labelled biopsy cores and their predictions.

Ground-truth information produced by the synthetic generator (the real
patch label and the OOD flag) lives in :class:`PatchOracle`, which training
code never sees: trainers consume a :class:`TrainingView`, evaluation code
may additionally request an :class:`OracleView`.

On-disk dataset layout (a directory)::

    metadata.jsonl     one record per core: core_id, patient_id, weak_label,
                       involvement, patch_file
    oracle.jsonl       optional, one record per core: core_id, true_labels, is_ood
    patches/<id>.bin   patch stack: 3 little-endian int32 (n, height, width)
                       followed by n*height*width little-endian float32, row-major
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

HEADER_DTYPE = np.dtype("<i4")
PIXEL_DTYPE = np.dtype("<f4")

BENIGN = 0
CANCER = 1


class DatasetError(ValueError):
    """Raised for malformed datasets or violated domain invariants."""


def _check_binary(value, name: str) -> int:
    if value not in (0, 1) or isinstance(value, float):
        raise DatasetError(f"{name} must be 0 or 1, got {value!r}")
    return int(value)


@dataclass(frozen=True)
class PatchOracle:
    """Synthetic ground truth for one patch; evaluation-only."""

    true_label: int
    is_ood: bool = False


@dataclass(frozen=True, eq=False)
class Patch:
    pixels: np.ndarray
    weak_label: int
    core_id: str
    oracle: PatchOracle | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        pixels = np.asarray(self.pixels)
        if pixels.ndim != 2 or pixels.size == 0:
            raise DatasetError(f"patch pixels must be a non-empty 2-D array, got shape {pixels.shape}")
        pixels.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)
        object.__setattr__(self, "weak_label", _check_binary(self.weak_label, "weak_label"))


@dataclass(frozen=True)
class BiopsyCore:
    """A needle core: ordered patches that all inherit one pathology label.

    ``involvement`` is the cancer length over core length; benign cores
    always carry 0.
    """

    core_id: str
    patient_id: str
    patches: tuple[Patch, ...]
    weak_label: int
    involvement: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "patches", tuple(self.patches))
        label = _check_binary(self.weak_label, "weak_label")
        object.__setattr__(self, "weak_label", label)
        if not self.patches:
            raise DatasetError(f"core {self.core_id} has no patches")
        if not 0.0 <= self.involvement <= 1.0:
            raise DatasetError(f"core {self.core_id}: involvement {self.involvement} outside [0, 1]")
        if label == BENIGN and self.involvement != 0.0:
            raise DatasetError(f"benign core {self.core_id} must have involvement 0")
        for p in self.patches:
            if p.weak_label != label:
                raise DatasetError(f"core {self.core_id}: patch weak label differs from core label")
            if p.core_id != self.core_id:
                raise DatasetError(f"core {self.core_id}: patch back-reference is {p.core_id}")

    @property
    def n_patches(self) -> int:
        return len(self.patches)

    def stack(self) -> np.ndarray:
        return np.stack([p.pixels for p in self.patches])


@dataclass(frozen=True)
class EvidenceOutput:
    evidence: tuple[float, float]
    belief: tuple[float, float]
    uncertainty: float
    predicted_label: int

    @property
    def confidence(self) -> float:
        return 1.0 - self.uncertainty


@dataclass(frozen=True)
class CorePrediction:
    core_id: str
    status: str  # "predicted" | "uncertain"
    score: float | None
    retained_fraction: float
    threshold: float

    def __post_init__(self):
        if self.status not in ("predicted", "uncertain"):
            raise ValueError(f"unknown status {self.status!r}")
        if (self.status == "predicted") != (self.score is not None):
            raise ValueError("score must be present iff status is 'predicted'")

    @property
    def predicted_label(self) -> int | None:
        if self.score is None:
            return None
        return int(self.score > 0.5)


@dataclass(frozen=True)
class CalibrationBin:
    lower: float
    upper: float
    count: int
    confidence: float | None
    accuracy: float | None


@dataclass(frozen=True)
class CalibrationReport:
    bins: tuple[CalibrationBin, ...]
    ece: float
    total: int


@dataclass(frozen=True)
class TrainingView:
    """Arrays a trainer is allowed to see."""

    pixels: np.ndarray  # (n, h, w) float32
    weak_labels: np.ndarray  # (n,) int64
    core_index: np.ndarray  # (n,) position of the owning core in ``core_ids``
    core_ids: tuple[str, ...]
    core_labels: np.ndarray  # (n_cores,) weak label per core

    def __len__(self):
        return len(self.weak_labels)


@dataclass(frozen=True)
class OracleView:
    true_labels: np.ndarray  # (n,) int64
    is_ood: np.ndarray  # (n,) bool


def training_view(cores: Sequence[BiopsyCore]) -> TrainingView:
    if not cores:
        raise DatasetError("no cores")
    pixels, labels, index = [], [], []
    for i, core in enumerate(cores):
        pixels.append(core.stack())
        labels.extend([core.weak_label] * core.n_patches)
        index.extend([i] * core.n_patches)
    return TrainingView(
        pixels=np.concatenate(pixels).astype(np.float32, copy=False),
        weak_labels=np.asarray(labels, dtype=np.int64),
        core_index=np.asarray(index, dtype=np.int64),
        core_ids=tuple(c.core_id for c in cores),
        core_labels=np.asarray([c.weak_label for c in cores], dtype=np.int64),
    )


def oracle_view(cores: Sequence[BiopsyCore]) -> OracleView:
    """Hidden labels in the same patch order as :func:`training_view`."""
    true, ood = [], []
    for core in cores:
        for p in core.patches:
            if p.oracle is None:
                raise DatasetError(f"core {core.core_id} has no oracle labels")
            true.append(p.oracle.true_label)
            ood.append(p.oracle.is_ood)
    return OracleView(np.asarray(true, dtype=np.int64), np.asarray(ood, dtype=bool))


# ---------------------------------------------------------------------------
# binary array stacks


def write_array_stack(path: str | os.PathLike, stack: np.ndarray) -> None:
    stack = np.asarray(stack)
    if stack.ndim == 2:
        stack = stack[None]
    if stack.ndim != 3:
        raise DatasetError(f"expected a 3-D stack, got shape {stack.shape}")
    with open(path, "wb") as fh:
        fh.write(np.asarray(stack.shape, dtype=HEADER_DTYPE).tobytes())
        fh.write(np.ascontiguousarray(stack, dtype=PIXEL_DTYPE).tobytes())


def read_array_stack(path: str | os.PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise DatasetError(f"{path}: truncated header")
    shape = tuple(int(v) for v in np.frombuffer(raw[:12], dtype=HEADER_DTYPE))
    if min(shape) < 0:
        raise DatasetError(f"{path}: negative dimension in header {shape}")
    expected = 12 + PIXEL_DTYPE.itemsize * int(np.prod(shape))
    if len(raw) != expected:
        raise DatasetError(f"{path}: expected {expected} bytes for shape {shape}, found {len(raw)}")
    return np.frombuffer(raw[12:], dtype=PIXEL_DTYPE).reshape(shape).astype(np.float32)


# ---------------------------------------------------------------------------
# dataset directories


def _safe_name(core_id: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in core_id)


def save_dataset(cores: Iterable[BiopsyCore], directory: str | os.PathLike) -> Path:
    directory = Path(directory)
    (directory / "patches").mkdir(parents=True, exist_ok=True)
    meta_lines, oracle_lines = [], []
    for core in cores:
        rel = f"patches/{_safe_name(core.core_id)}.bin"
        write_array_stack(directory / rel, core.stack())
        meta_lines.append(json.dumps({
            "core_id": core.core_id,
            "patient_id": core.patient_id,
            "weak_label": core.weak_label,
            "involvement": core.involvement,
            "patch_file": rel,
        }))
        if all(p.oracle is not None for p in core.patches):
            oracle_lines.append(json.dumps({
                "core_id": core.core_id,
                "true_labels": [p.oracle.true_label for p in core.patches],
                "is_ood": [bool(p.oracle.is_ood) for p in core.patches],
            }))
    (directory / "metadata.jsonl").write_text("".join(line + "\n" for line in meta_lines))
    oracle_path = directory / "oracle.jsonl"
    if oracle_lines and len(oracle_lines) == len(meta_lines):
        oracle_path.write_text("".join(line + "\n" for line in oracle_lines))
    elif oracle_path.exists():
        oracle_path.unlink()
    return directory


def _read_jsonl(path: Path) -> list[dict]:
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def load_dataset(directory: str | os.PathLike) -> list[BiopsyCore]:
    directory = Path(directory)
    meta_path = directory / "metadata.jsonl"
    if not meta_path.exists():
        raise DatasetError(f"{directory} has no metadata.jsonl")
    oracle = {}
    if (directory / "oracle.jsonl").exists():
        oracle = {rec["core_id"]: rec for rec in _read_jsonl(directory / "oracle.jsonl")}
    cores = []
    for rec in _read_jsonl(meta_path):
        stack = read_array_stack(directory / rec["patch_file"])
        orc = oracle.get(rec["core_id"])
        patches = []
        for j, pixels in enumerate(stack):
            po = PatchOracle(int(orc["true_labels"][j]), bool(orc["is_ood"][j])) if orc else None
            patches.append(Patch(pixels, rec["weak_label"], rec["core_id"], po))
        cores.append(BiopsyCore(
            core_id=rec["core_id"],
            patient_id=rec["patient_id"],
            patches=tuple(patches),
            weak_label=rec["weak_label"],
            involvement=float(rec["involvement"]),
        ))
    return cores
