"""Experiment orchestration and the ``confcore`` command line.

A run is one (method, seed) pair. Its directory holds::

    epochs.jsonl      one record per epoch (per ensemble member if several)
    checkpoint*.npz   trained weights
    predictions.csv   per test patch outputs
    metrics.json      test metrics, no timestamps
    curve.csv         core balanced accuracy / retention against tau
    reliability.csv   calibration bins
    *.png             reliability diagram and curve

``run`` executes the whole method grid and writes ``summary.json`` (mean and
population std across seeds per metric) plus ``manifest.json``.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import plotting
from .baselines import ensemble_prob, mc_dropout_prob, prob_outputs, softmax_prob, train_baseline
from .coteach import CoteachConfig, train
from .domain import BiopsyCore, DatasetError, load_dataset, oracle_view, save_dataset, training_view, write_array_stack
from .edl import EdlLossConfig
from .evaluation import (
    PatchPrediction,
    accuracy_vs_confidence_curve,
    aggregate_cores,
    balanced_accuracy,
    core_metrics,
    ece,
    mean_std,
    ood_auroc,
    read_curve_csv,
    write_curve_csv,
    write_reliability_csv,
)
from .heads import head_outputs
from .model import BackboneConfig, load_checkpoint, predict_logits, save_checkpoint
from .preprocess import PatchGrid, RfImage, extract_patches, image_to_patches
from .synthgen import SynthConfig, filter_by_involvement, generate_dataset, split_by_patient, synth_rf_frame

log = logging.getLogger("confcore")

# method name -> (family, co-teaching)
METHODS = {
    "edl": ("edl", False),
    "edl_coteach": ("edl", True),
    "ce": ("ce", False),
    "ce_coteach": ("ce", True),
    "mc_dropout": ("mc_dropout", False),
    "mc_dropout_coteach": ("mc_dropout", True),
    "ensemble": ("ensemble", False),
    "ensemble_coteach": ("ensemble", True),
}

DEFAULT_TAU_GRID = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.85, 0.9, 0.95)


@dataclass(frozen=True)
class ExperimentConfig:
    synth: SynthConfig | None = field(default_factory=SynthConfig)
    dataset: str | None = None
    methods: tuple[str, ...] = ("edl", "edl_coteach")
    coteach: CoteachConfig = field(default_factory=CoteachConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    seeds: tuple[int, ...] = (0,)
    tau_grid: tuple[float, ...] = DEFAULT_TAU_GRID
    split: tuple[float, float, float] = (0.7, 0.15, 0.15)
    min_involvement: float | None = None
    mc_passes: int = 20
    mc_dropout_rate: float = 0.3
    ensemble_members: int = 5
    output_dir: str = "runs"

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "tau_grid", tuple(float(t) for t in self.tau_grid))
        object.__setattr__(self, "split", tuple(float(s) for s in self.split))
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise ValueError(f"unknown method(s) {bad}; choose from {sorted(METHODS)}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if not self.tau_grid or any(not 0.0 <= t <= 1.0 for t in self.tau_grid):
            raise ValueError("tau_grid must be a non-empty subset of [0, 1]")
        if (self.synth is None) == (self.dataset is None):
            raise ValueError("give exactly one of synth or dataset")
        if self.mc_passes < 1 or self.ensemble_members < 1:
            raise ValueError("mc_passes and ensemble_members must be >= 1")
        if not 0.0 < self.mc_dropout_rate < 1.0:
            raise ValueError("mc_dropout_rate must lie in (0, 1)")

    def to_dict(self) -> dict:
        return _jsonable(dataclasses.asdict(self))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# data


def load_cores(config: ExperimentConfig) -> list[BiopsyCore]:
    cores = load_dataset(config.dataset) if config.dataset else generate_dataset(config.synth)
    if config.min_involvement is not None:
        cores = filter_by_involvement(cores, config.min_involvement)
    return cores


def _backbone_for(config: ExperimentConfig, family: str, cores) -> BackboneConfig:
    shape = cores[0].patches[0].pixels.shape
    dropout = config.mc_dropout_rate if family == "mc_dropout" else config.backbone.dropout_rate
    return replace(config.backbone, input_size=tuple(shape), dropout_rate=dropout)


# ---------------------------------------------------------------------------
# prediction shared by eval and heatmaps


def predict_patches(models, family: str, pixels, mc_passes: int = 20, seed: int = 0) -> dict[str, np.ndarray]:
    """prob_cancer, confidence, predicted_label (and EDL uncertainty) per patch."""
    if family == "edl":
        out = head_outputs(predict_logits(models[0], pixels), "edl")
        return {k: out[k] for k in ("prob_cancer", "confidence", "predicted_label", "uncertainty")}
    if family == "ce":
        prob = softmax_prob(models[0], pixels)
    elif family == "mc_dropout":
        prob = mc_dropout_prob(models[0], pixels, mc_passes, seed)
    elif family == "ensemble":
        prob = ensemble_prob(models, pixels)
    else:
        raise ValueError(f"unknown method family {family!r}")
    return prob_outputs(prob)


# ---------------------------------------------------------------------------
# one run


def _splits(config: ExperimentConfig, seed: int):
    cores = load_cores(config)
    train_c, val_c, test_c = split_by_patient(cores, config.split, seed)
    if not train_c or not test_c:
        raise DatasetError("train or test split is empty; use more patients or other fractions")
    return cores, train_c, val_c, test_c


def train_run(config: ExperimentConfig, method: str, seed: int, run_dir: Path) -> list[Path]:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    family, coteaching = METHODS[method]
    cores, train_c, val_c, _ = _splits(config, seed)
    backbone = _backbone_for(config, family, cores)
    tv = training_view(train_c)
    vv = training_view(val_c) if val_c else None
    cfg = replace(config.coteach, coteaching=coteaching)
    run_dir.mkdir(parents=True, exist_ok=True)
    records = []
    if family == "edl":
        _, best = train(tv, vv, replace(cfg, loss_kind="edl"), backbone, seed, on_epoch=records.append)
        checkpoints = [best]
    else:
        members = config.ensemble_members if family == "ensemble" else 1
        checkpoints = train_baseline(tv, vv, cfg, backbone, seed, members, on_epoch=records.append)
    with open(run_dir / "epochs.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(_jsonable(rec), sort_keys=True) + "\n")
    paths = []
    for i, ckpt in enumerate(checkpoints):
        path = run_dir / ("checkpoint.npz" if len(checkpoints) == 1 else f"checkpoint_{i}.npz")
        save_checkpoint(ckpt.to_model(), path, method=method, family=family, seed=seed,
                        epoch=ckpt.epoch, peer=ckpt.peer, val_auc=ckpt.val_auc,
                        optimizer=cfg.optimizer)
        paths.append(path)
    return paths


def _load_run_models(run_dir: Path):
    paths = sorted(run_dir.glob("checkpoint*.npz"))
    if not paths:
        raise FileNotFoundError(f"no checkpoint in {run_dir}")
    loaded = [load_checkpoint(p) for p in paths]
    return [m for m, _ in loaded], loaded[0][1]


def _write_predictions(path: Path, preds: Sequence[PatchPrediction], uncertainty) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["core_id", "weak_label", "true_label", "is_ood", "prob_cancer", "confidence",
                    "predicted_label", "uncertainty"])
        for p, u in zip(preds, uncertainty):
            w.writerow([p.core_id, p.weak_label, "" if p.true_label is None else p.true_label,
                        "" if p.is_ood is None else int(p.is_ood), repr(p.prob_cancer), repr(p.confidence),
                        p.predicted_label, "" if u is None else repr(float(u))])


def read_predictions(path) -> list[PatchPrediction]:
    with open(path, newline="") as fh:
        return [
            PatchPrediction(float(r["prob_cancer"]), float(r["confidence"]), int(r["predicted_label"]),
                            r["core_id"], int(r["weak_label"]),
                            int(r["true_label"]) if r["true_label"] else None,
                            bool(int(r["is_ood"])) if r["is_ood"] else None)
            for r in csv.DictReader(fh)
        ]


def _or_none(fn, *args):
    try:
        return fn(*args)
    except ValueError as exc:
        log.warning("%s undefined: %s", fn.__name__, exc)
        return None


def evaluate_run(config: ExperimentConfig, method: str, seed: int, run_dir: Path) -> dict:
    family, _ = METHODS[method]
    _, _, _, test_c = _splits(config, seed)
    models, _ = _load_run_models(run_dir)
    view = training_view(test_c)
    try:
        orc = oracle_view(test_c)
    except DatasetError:
        orc = None
    out = predict_patches(models, family, view.pixels, config.mc_passes, seed)
    preds = [
        PatchPrediction(float(out["prob_cancer"][i]), float(out["confidence"][i]), int(out["predicted_label"][i]),
                        view.core_ids[view.core_index[i]], int(view.weak_labels[i]),
                        None if orc is None else int(orc.true_labels[i]),
                        None if orc is None else bool(orc.is_ood[i]))
        for i in range(len(view))
    ]
    uncertainty = out.get("uncertainty", [None] * len(preds))
    _write_predictions(run_dir / "predictions.csv", preds, uncertainty)

    label = view.weak_labels if orc is None else orc.true_labels
    correct = out["predicted_label"] == label
    ece_value, report = ece(out["confidence"], correct)
    write_reliability_csv(report, run_dir / "reliability.csv")
    core_labels = dict(zip(view.core_ids, view.core_labels.tolist()))
    # single-class test splits leave these undefined; they are written as null
    cm = _or_none(core_metrics, aggregate_cores(preds, 0.0), core_labels) or {}
    metrics = {
        "method": method,
        "seed": seed,
        "label_source": "weak" if orc is None else "oracle",
        "patch_balanced_accuracy": _or_none(balanced_accuracy, out["predicted_label"], label),
        "patch_balanced_accuracy_weak": _or_none(balanced_accuracy, out["predicted_label"], view.weak_labels),
        "ece": ece_value,
        "core_auc": cm.get("auc"),
        "core_balanced_accuracy": cm.get("balanced_accuracy"),
        "core_sensitivity": cm.get("sensitivity"),
        "core_specificity": cm.get("specificity"),
        "n_test_cores": len(test_c),
        "n_test_patches": len(preds),
    }
    if orc is not None and orc.is_ood.any() and not orc.is_ood.all():
        score = out["uncertainty"] if "uncertainty" in out else 1.0 - out["confidence"]
        metrics["ood_auroc"] = ood_auroc(score, orc.is_ood)
        metrics["mean_uncertainty_ood"] = float(np.mean(score[orc.is_ood]))
        metrics["mean_uncertainty_id"] = float(np.mean(score[~orc.is_ood]))
    curve = accuracy_vs_confidence_curve(preds, config.tau_grid, core_labels)
    write_curve_csv(curve, run_dir / "curve.csv")
    _write_json(run_dir / "metrics.json", metrics)
    plotting.reliability_diagram(report, run_dir / "reliability.png", f"{method} seed {seed}: ECE {ece_value:.4f}")
    plotting.confidence_curves({method: curve}, run_dir / "curve.png")
    return metrics


def curve_from_predictions(run_dir: Path, tau_grid: Sequence[float]) -> Path:
    preds = read_predictions(run_dir / "predictions.csv")
    core_labels = {p.core_id: p.weak_label for p in preds}
    curve = accuracy_vs_confidence_curve(preds, tau_grid, core_labels)
    write_curve_csv(curve, run_dir / "curve.csv")
    plotting.confidence_curves({run_dir.name: curve}, run_dir / "curve.png")
    return run_dir / "curve.csv"


# ---------------------------------------------------------------------------
# grid


def run_dir_for(output_dir, method: str, seed: int) -> Path:
    return Path(output_dir) / method / f"seed_{seed}"


def summarize(output_dir) -> dict:
    """Mean and population std per numeric metric across the seeds of each method."""
    output_dir = Path(output_dir)
    summary = {}
    for method_dir in sorted(p for p in output_dir.iterdir() if p.is_dir()):
        runs = [json.loads(p.read_text()) for p in sorted(method_dir.glob("seed_*/metrics.json"))]
        if not runs:
            continue
        keys = sorted({k for r in runs for k, v in r.items() if isinstance(v, (int, float)) and k != "seed"})
        entry = {"seeds": [r["seed"] for r in runs]}
        for k in keys:
            mean, std = mean_std([r.get(k) for r in runs])
            entry[k] = {"mean": mean, "std": std}
        summary[method_dir.name] = entry
    if not summary:
        raise FileNotFoundError(f"no metrics.json under {output_dir}")
    _write_json(output_dir / "summary.json", summary)
    with open(output_dir / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        metrics = sorted({k for e in summary.values() for k in e if k != "seeds"})
        w.writerow(["method"] + [f"{m}_{s}" for m in metrics for s in ("mean", "std")])
        for method, e in summary.items():
            w.writerow([method] + [e.get(m, {}).get(s, "") for m in metrics for s in ("mean", "std")])
    plotting.ece_bars({m: (e["ece"]["mean"], e["ece"]["std"]) for m, e in summary.items() if "ece" in e},
                      output_dir / "ece.png")
    curves = {}
    for method in summary:
        first = sorted((output_dir / method).glob("seed_*/curve.csv"))
        if first:
            curves[method] = read_curve_csv(first[0])
    if curves:
        plotting.confidence_curves(curves, output_dir / "curves.png")
    return summary


def run_experiment(config: ExperimentConfig) -> dict:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = []
    for method in config.methods:
        for seed in config.seeds:
            run_dir = run_dir_for(out, method, seed)
            log.info("training %s seed %d", method, seed)
            train_run(config, method, seed, run_dir)
            evaluate_run(config, method, seed, run_dir)
            artifacts += [str(p.relative_to(out)) for p in sorted(run_dir.iterdir())]
    summary = summarize(out)
    artifacts += ["summary.json", "summary.csv", "ece.png"] + (["curves.png"] if (out / "curves.png").exists() else [])
    _write_json(out / "manifest.json", {"config": config.to_dict(), "artifacts": artifacts})
    return summary


# ---------------------------------------------------------------------------
# heatmaps


@dataclass(frozen=True)
class HeatmapGrid:
    origins: np.ndarray  # (n, 2) row, col of each window
    window: tuple[int, int]
    prob_cancer: np.ndarray
    confidence: np.ndarray
    taus: tuple[float, ...]
    retained: np.ndarray  # (n_tau, n) bool

    def opaque_counts(self) -> list[int]:
        return [int(r.sum()) for r in self.retained]


def sliding_window_heatmap(
    checkpoint,
    image: RfImage,
    grid: PatchGrid,
    tau_list: Sequence[float],
    output_dir=None,
    lateral_factor: float = 1,
    axial_factor: float = 1,
    mc_passes: int = 20,
) -> HeatmapGrid:
    """Predict every window of the frame; one overlay per tau plus a CSV grid.

    ``checkpoint`` is a path or a list of paths (an ensemble).
    """
    paths = [checkpoint] if isinstance(checkpoint, (str, Path)) else list(checkpoint)
    loaded = [load_checkpoint(p) for p in paths]
    models = [m for m, _ in loaded]
    meta = loaded[0][1]
    family = meta.get("family", "edl")
    if tuple(models[0].config.input_size) != tuple(grid.output_size_px):
        raise ValueError(f"checkpoint expects {models[0].config.input_size} patches, grid gives {grid.output_size_px}")
    window = grid.window_px(image)
    if window[0] > image.shape[0] or window[1] > image.shape[1]:
        raise ValueError(f"image {image.shape} is smaller than the window {window}")
    pixels, origins = image_to_patches(image, grid, lateral_factor=lateral_factor,
                                       axial_factor=axial_factor, use_roi=False)
    if len(origins) != len(extract_patches(image, None, grid)[1]):
        log.warning("some windows were degenerate and are left blank")
    out = predict_patches(models, family, pixels, mc_passes, meta.get("seed", 0))
    taus = tuple(float(t) for t in tau_list)
    retained = np.stack([out["confidence"] >= t for t in taus]) if taus else np.zeros((0, len(origins)), bool)
    hm = HeatmapGrid(origins, window, out["prob_cancer"], out["confidence"], taus, retained)
    if output_dir is not None:
        write_heatmap(hm, image, output_dir)
    return hm


def write_heatmap(hm: HeatmapGrid, image: RfImage, output_dir) -> list[Path]:
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    with open(output_dir / "heatmap.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "col", "prob_cancer", "confidence"] + [f"retained_{t:g}" for t in hm.taus])
        for i, (r, c) in enumerate(hm.origins):
            w.writerow([int(r), int(c), repr(float(hm.prob_cancer[i])), repr(float(hm.confidence[i]))]
                       + [int(x) for x in hm.retained[:, i]])
    paths = [output_dir / "heatmap.csv"]
    for t in hm.taus:
        rgba = plotting.heatmap_rgba(image.shape, hm.origins, hm.window, hm.prob_cancer, hm.confidence, t)
        paths.append(plotting.heatmap_overlay(image.samples, rgba, output_dir / f"heatmap_tau_{t:g}.png",
                                              f"tau = {t:g}"))
    return paths


def save_frame(image: RfImage, path, cancer_mask=None) -> None:
    arrays = dict(samples=image.samples, prostate_mask=image.prostate_mask,
                  spacing_mm=np.array([image.axial_spacing_mm, image.lateral_spacing_mm]),
                  needle_angle_deg=np.array(image.needle_angle_deg), needle_entry=np.array(image.needle_entry))
    if cancer_mask is not None:
        arrays["cancer_mask"] = cancer_mask
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_frame(path) -> RfImage:
    with np.load(path) as d:
        samples = d["samples"]
        return RfImage(
            samples=samples,
            axial_spacing_mm=float(d["spacing_mm"][0]),
            lateral_spacing_mm=float(d["spacing_mm"][1]),
            prostate_mask=d["prostate_mask"] if "prostate_mask" in d.files else np.ones(samples.shape, bool),
            needle_angle_deg=float(d["needle_angle_deg"]) if "needle_angle_deg" in d.files else 0.0,
            needle_entry=tuple(d["needle_entry"]) if "needle_entry" in d.files else (samples.shape[0] / 2, 0.0),
        )


# ---------------------------------------------------------------------------
# config parsing


def _parse_value(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, tuple):
        items = [s for s in raw.replace(" ", "").split(",") if s]
        kind = type(default[0]) if default else float
        return tuple(kind(s) for s in items)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if raw.lower() in ("", "none"):
        return None
    return raw


# INI section -> (dataclass, ExperimentConfig attribute or None for top level)
SECTIONS = {
    "synth": SynthConfig,
    "train": CoteachConfig,
    "edl": EdlLossConfig,
    "backbone": BackboneConfig,
}
TOP_DEFAULTS = {
    "dataset": "",
    "methods": ("edl",),
    "seeds": (0,),
    "tau_grid": DEFAULT_TAU_GRID,
    "split": (0.7, 0.15, 0.15),
    "min_involvement": 0.4,
    "mc_passes": 20,
    "mc_dropout_rate": 0.3,
    "ensemble_members": 5,
    "output_dir": "runs",
}


def _field_defaults(cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:
            out[f.name] = f.default_factory()
    return out


def build_config(ini_path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Read the flat INI (sections experiment, synth, train, edl, backbone), then apply overrides.

    Override keys are bare field names; a name shared by two sections applies to both.
    """
    values = {name: {} for name in SECTIONS}
    values["experiment"] = {}
    parser = configparser.ConfigParser()
    if ini_path is not None:
        if not parser.read(ini_path):
            raise FileNotFoundError(f"cannot read config {ini_path}")
        unknown = set(parser.sections()) - set(values)
        if unknown:
            raise ValueError(f"unknown config section(s) {sorted(unknown)}")
    defaults = {name: _field_defaults(cls) for name, cls in SECTIONS.items()}
    defaults["experiment"] = TOP_DEFAULTS
    for section in parser.sections():
        for key, raw in parser.items(section):
            if key not in defaults[section]:
                raise ValueError(f"unknown key {key!r} in [{section}]")
            values[section][key] = _parse_value(raw, defaults[section][key])
    for key, value in (overrides or {}).items():
        hit = [s for s in defaults if key in defaults[s] and not isinstance(defaults[s][key], EdlLossConfig)]
        if not hit:
            raise ValueError(f"unknown option {key!r}")
        for s in hit:
            values[s][key] = _parse_value(value, defaults[s][key]) if isinstance(value, str) else value
    top = {**TOP_DEFAULTS, **values["experiment"]}
    edl = EdlLossConfig(**values["edl"])
    train_cfg = CoteachConfig(**{**values["train"], "edl": edl})
    synth = None if top["dataset"] else SynthConfig(**values["synth"])
    return ExperimentConfig(
        synth=synth,
        dataset=top["dataset"] or None,
        methods=top["methods"],
        coteach=train_cfg,
        backbone=BackboneConfig(**values["backbone"]),
        seeds=top["seeds"],
        tau_grid=top["tau_grid"],
        split=top["split"],
        min_involvement=top["min_involvement"] if top["min_involvement"] >= 0 else None,
        mc_passes=top["mc_passes"],
        mc_dropout_rate=top["mc_dropout_rate"],
        ensemble_members=top["ensemble_members"],
        output_dir=top["output_dir"],
    )


def _option_names() -> dict[str, object]:
    names = dict(TOP_DEFAULTS)
    for cls in SECTIONS.values():
        for k, v in _field_defaults(cls).items():
            if not isinstance(v, EdlLossConfig):
                names.setdefault(k, v)
    return names


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI file; flags of the same name override it")
    for name in sorted(_option_names()):
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, default=None, metavar="VALUE")


def _overrides(args) -> dict:
    return {k: getattr(args, k) for k in _option_names() if getattr(args, k, None) is not None}


# ---------------------------------------------------------------------------
# commands


def _cmd_synth(args) -> None:
    config = build_config(args.config, _overrides(args))
    out = Path(config.output_dir)
    cores = generate_dataset(config.synth)
    save_dataset(cores, out)
    artifacts = ["metadata.jsonl", "oracle.jsonl"] + [f"patches/{p.name}" for p in sorted((out / "patches").iterdir())]
    if args.frame:
        frame = synth_rf_frame(class_separation=config.synth.class_separation, seed=config.synth.seed)
        save_frame(frame.image, out / "frame.npz", frame.cancer_mask)
        artifacts.append("frame.npz")
    _write_json(out / "manifest.json", {"config": config.to_dict(), "artifacts": artifacts})
    print(f"wrote {len(cores)} cores to {out}")


def _cmd_preprocess(args) -> None:
    image = load_frame(args.frame)
    grid = PatchGrid(args.patch_size_mm, args.overlap, (args.output_px, args.output_px))
    pixels, origins = image_to_patches(image, grid, args.band_width_mm, args.lateral_factor,
                                       args.axial_factor, use_roi=not args.no_roi)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_array_stack(out / "patches.bin", pixels)
    np.savetxt(out / "origins.csv", origins, fmt="%d", delimiter=",", header="row,col", comments="")
    _write_json(out / "manifest.json", {"config": vars(args) | {"func": None}, "artifacts": ["patches.bin", "origins.csv"]})
    print(f"wrote {len(pixels)} patches to {out}")


def _cmd_train(args) -> None:
    config = build_config(args.config, _overrides(args))
    for method in config.methods:
        for seed in config.seeds:
            paths = train_run(config, method, seed, run_dir_for(config.output_dir, method, seed))
            print("\n".join(str(p) for p in paths))


def _cmd_eval(args) -> None:
    config = build_config(args.config, _overrides(args))
    for method in config.methods:
        for seed in config.seeds:
            m = evaluate_run(config, method, seed, run_dir_for(config.output_dir, method, seed))
            print(json.dumps(_jsonable(m), sort_keys=True))


def _cmd_curve(args) -> None:
    taus = _parse_value(args.tau_grid, DEFAULT_TAU_GRID) if args.tau_grid else DEFAULT_TAU_GRID
    print(curve_from_predictions(Path(args.run_dir), taus))


def _cmd_heatmap(args) -> None:
    if args.frame:
        image = load_frame(args.frame)
    else:
        image = synth_rf_frame(seed=args.synthetic_seed).image
    model, _ = load_checkpoint(args.checkpoint[0])
    grid = PatchGrid(args.patch_size_mm, args.overlap, tuple(model.config.input_size))
    hm = sliding_window_heatmap(args.checkpoint, image, grid, _parse_value(args.tau, (0.0,)), args.output_dir,
                                args.lateral_factor, args.axial_factor)
    print(f"{len(hm.origins)} windows; opaque per tau: {hm.opaque_counts()}")


def _cmd_summarize(args) -> None:
    summary = summarize(args.output_dir)
    for method, entry in summary.items():
        if "ece" in entry:
            pb = entry.get("patch_balanced_accuracy", {})
            print(f"{method}: ECE {entry['ece']['mean']:.4f} ± {entry['ece']['std']:.4f}, "
                  f"patch bacc {pb.get('mean', float('nan')):.4f} ± {pb.get('std', float('nan')):.4f}")


def _cmd_run(args) -> None:
    config = build_config(args.config, _overrides(args))
    summary = run_experiment(config)
    print(json.dumps(_jsonable(summary), indent=2, sort_keys=True))


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="confcore", description="Evidential co-teaching experiments on weakly labelled cores.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic core dataset")
    _add_config_flags(p)
    p.add_argument("--frame", action="store_true", help="also write a whole synthetic frame (frame.npz)")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("preprocess", help="cut normalized patches from a frame (.npz)")
    p.add_argument("frame")
    p.add_argument("--output-dir", required=True)
    p.add_argument("--patch-size-mm", type=float, default=5.0)
    p.add_argument("--overlap", type=float, default=0.9)
    p.add_argument("--output-px", type=int, default=256)
    p.add_argument("--band-width-mm", type=float, default=2.5)
    p.add_argument("--lateral-factor", type=float, default=5)
    p.add_argument("--axial-factor", type=float, default=5)
    p.add_argument("--no-roi", action="store_true", help="keep every window instead of the needle band")
    p.set_defaults(func=_cmd_preprocess)

    for name, func, text in (("train", _cmd_train, "train each (method, seed)"),
                             ("eval", _cmd_eval, "evaluate trained runs on the test split"),
                             ("run", _cmd_run, "train, evaluate and summarize the whole grid")):
        p = sub.add_parser(name, help=text)
        _add_config_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("curve", help="recompute curve.csv from a run's predictions")
    p.add_argument("run_dir")
    p.add_argument("--tau-grid")
    p.set_defaults(func=_cmd_curve)

    p = sub.add_parser("heatmap", help="sliding-window heatmaps of a frame")
    p.add_argument("checkpoint", nargs="+")
    p.add_argument("--frame", help="frame .npz; a synthetic frame is used when omitted")
    p.add_argument("--synthetic-seed", type=int, default=0)
    p.add_argument("--tau", default="0,0.7,0.8,0.85,0.9")
    p.add_argument("--patch-size-mm", type=float, default=5.0)
    p.add_argument("--overlap", type=float, default=0.75)
    p.add_argument("--lateral-factor", type=float, default=1)
    p.add_argument("--axial-factor", type=float, default=1)
    p.add_argument("--output-dir", required=True)
    p.set_defaults(func=_cmd_heatmap)

    p = sub.add_parser("summarize", help="mean and std across seeds for every method")
    p.add_argument("output_dir")
    p.set_defaults(func=_cmd_summarize)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (ValueError, FileNotFoundError, DatasetError, OSError, KeyError) as exc:
        print(f"confcore {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
