"""Synthetic biopsy cores with weak labels, controllable involvement and OOD tissue.

Each tissue family is a Gaussian random field (white noise passed through a
Gaussian kernel) that differs from the others only in its second-order
statistics, so per-patch normalization cannot give the class away:

* benign: isotropic correlation length ``BASE_SIGMA``
* cancer: correlation stretched laterally by ``class_separation``
* ood:    correlation stretched axially, unlike either labelled class

These families are a stand-in; they make no claim about real tissue.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .domain import BENIGN, CANCER, BiopsyCore, DatasetError, Patch, PatchOracle
from .preprocess import RfImage, normalize_patch

BASE_SIGMA = 1.0
TISSUE_KINDS = ("benign", "cancer", "ood")


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int = 40
    cores_per_patient: int = 5
    patches_per_core: int = 32
    # uniform(lo, hi); lo == hi gives a fixed involvement
    involvement: tuple[float, float] = (0.4, 1.0)
    ood_fraction: float = 0.0
    class_separation: float = 1.0
    image_size: tuple[int, int] = (32, 32)
    cancer_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "involvement", tuple(float(v) for v in self.involvement))
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        for name in ("n_patients", "cores_per_patient", "patches_per_core"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        lo, hi = self.involvement
        if not (0.0 <= lo <= hi <= 1.0):
            raise ValueError(f"involvement support {self.involvement} must lie within [0, 1]")
        if not 0.0 <= self.ood_fraction < 1.0:
            raise ValueError("ood_fraction must lie in [0, 1)")
        if not 0.0 <= self.cancer_fraction <= 1.0:
            raise ValueError("cancer_fraction must lie in [0, 1]")
        if self.class_separation < 0:
            raise ValueError("class_separation must be non-negative")
        if min(self.image_size) < 2:
            raise ValueError("image_size must be at least 2x2")


def texture_sigma(kind: str, separation: float) -> tuple[float, float]:
    """(axial, lateral) correlation lengths of each tissue family."""
    if kind == "benign":
        return (BASE_SIGMA, BASE_SIGMA)
    if kind == "cancer":
        return (BASE_SIGMA, BASE_SIGMA + separation)
    if kind == "ood":
        return (BASE_SIGMA + 1.0 + separation, BASE_SIGMA)
    raise ValueError(f"unknown tissue kind {kind!r}")


def tissue_field(kind: str, shape: tuple[int, int], rng: np.random.Generator, separation: float) -> np.ndarray:
    white = rng.standard_normal(shape)
    return ndimage.gaussian_filter(white, texture_sigma(kind, separation), mode="wrap")


def tissue_patch(kind: str, shape, rng: np.random.Generator, separation: float) -> np.ndarray:
    return normalize_patch(tissue_field(kind, shape, rng, separation)).astype(np.float32)


def _core_rng(seed: int, core_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, core_index])


def generate_dataset(config: SynthConfig) -> list[BiopsyCore]:
    """Build cores; cancer patches within a cancer core form one contiguous run."""
    master = np.random.default_rng([config.seed, 0x5EED])
    n_cores = config.n_patients * config.cores_per_patient
    n_cancer = int(round(config.cancer_fraction * n_cores))
    labels = np.zeros(n_cores, dtype=int)
    labels[master.permutation(n_cores)[:n_cancer]] = CANCER
    lo, hi = config.involvement
    involvements = master.uniform(lo, hi, size=n_cores) if hi > lo else np.full(n_cores, lo)

    n = config.patches_per_core
    cores = []
    for idx in range(n_cores):
        patient = idx // config.cores_per_patient
        core_id = f"p{patient:04d}-c{idx % config.cores_per_patient:02d}"
        rng = _core_rng(config.seed, idx)
        if labels[idx] == CANCER:
            involvement = float(involvements[idx])
            k = int(round(involvement * n))
            start = int(rng.integers(0, n - k + 1))
            kinds = ["benign"] * n
            kinds[start:start + k] = ["cancer"] * k
        else:
            involvement = 0.0
            kinds = ["benign"] * n
            n_ood = int(round(config.ood_fraction * n))
            for j in rng.choice(n, size=n_ood, replace=False):
                kinds[j] = "ood"
        label = int(labels[idx])
        patches = tuple(
            Patch(
                tissue_patch(kind, config.image_size, rng, config.class_separation),
                label,
                core_id,
                PatchOracle(int(kind == "cancer"), kind == "ood"),
            )
            for kind in kinds
        )
        cores.append(BiopsyCore(core_id, f"p{patient:04d}", patches, label, involvement))
    return cores


def filter_by_involvement(cores, min_involvement: float = 0.4) -> list[BiopsyCore]:
    """Drop cancer cores below ``min_involvement`` (inclusive boundary)."""
    # tolerance keeps 0.4 stored as 0.39999999999999997 on the retained side
    return [c for c in cores if c.weak_label == BENIGN or c.involvement >= min_involvement - 1e-12]


def balance_cores(cores, seed: int = 0) -> list[BiopsyCore]:
    """Uniformly under-sample the majority class; original order is kept."""
    cores = list(cores)
    by_class = {BENIGN: [], CANCER: []}
    for i, c in enumerate(cores):
        by_class[c.weak_label].append(i)
    if not by_class[BENIGN] or not by_class[CANCER]:
        raise DatasetError("balancing needs at least one core of each class")
    n = min(len(v) for v in by_class.values())
    rng = np.random.default_rng(seed)
    keep = set()
    for idx in by_class.values():
        keep.update(rng.choice(idx, size=n, replace=False).tolist() if len(idx) > n else idx)
    return [c for i, c in enumerate(cores) if i in keep]


def split_by_patient(cores, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Patient-disjoint (train, val, test) split.

    Patient counts per split are ``floor(f * n_patients)`` with the remainder
    handed out by largest fractional part, so they always sum to the total.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ValueError(f"fractions must be three non-negative numbers, got {fractions}")
    if not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    patients = sorted({c.patient_id for c in cores})
    order = np.random.default_rng(seed).permutation(len(patients))
    shuffled = [patients[i] for i in order]
    raw = [f * len(patients) for f in fractions]
    counts = [int(math.floor(r + 1e-9)) for r in raw]
    for i in sorted(range(3), key=lambda i: counts[i] - raw[i])[: len(patients) - sum(counts)]:
        counts[i] += 1
    bounds = np.cumsum([0] + counts)
    assignment = {}
    for split, (a, b) in enumerate(zip(bounds[:-1], bounds[1:])):
        for p in shuffled[a:b]:
            assignment[p] = split
    out = ([], [], [])
    for c in cores:
        out[assignment[c.patient_id]].append(c)
    return out


@dataclass(frozen=True)
class SyntheticFrame:
    image: RfImage
    cancer_mask: np.ndarray = field(repr=False)


def synth_rf_frame(
    shape: tuple[int, int] = (96, 192),
    cancer_cols: tuple[int, int] | None = (64, 128),
    class_separation: float = 1.0,
    spacing_mm: float = 5.0 / 32,
    seed: int = 0,
) -> SyntheticFrame:
    """Whole frame of benign texture with a lateral run of cancer texture.

    Spacing defaults to 5 mm over 32 px so a 5 mm window equals a 32x32 patch.
    """
    rng = np.random.default_rng([seed, 0xF4A3])
    benign = normalize_patch(tissue_field("benign", shape, rng, class_separation))
    cancer = normalize_patch(tissue_field("cancer", shape, rng, class_separation))
    mask = np.zeros(shape, dtype=bool)
    if cancer_cols is not None:
        mask[:, cancer_cols[0]:cancer_cols[1]] = True
    samples = np.where(mask, cancer, benign)
    image = RfImage(
        samples=samples,
        axial_spacing_mm=spacing_mm,
        lateral_spacing_mm=spacing_mm,
        prostate_mask=np.ones(shape, dtype=bool),
        needle_angle_deg=0.0,
        needle_entry=(shape[0] / 2.0, 0.0),
    )
    return SyntheticFrame(image, mask)
