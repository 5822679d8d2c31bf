"""Acceptance suite: one test per criterion, each logging a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the verdicts are
repeated in an "acceptance criteria" section at the end of the session.
Criteria 7 to 9 train real models and take roughly 20 minutes on one CPU.
"""

import json
import math
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
import torch
from scipy import integrate, stats

from confcore.cli import ExperimentConfig, run_experiment
from confcore.coteach import CoteachConfig, select_small_loss, selection_ratio
from confcore.edl import bayes_risk_loss, edl_total_loss, evidence_summary, kl_regularizer
from confcore.evaluation import PatchPrediction, accuracy_vs_confidence_curve, aggregate_core, ece, read_curve_csv
from confcore.model import BackboneConfig
from confcore.preprocess import DegeneratePatchError, PatchGrid, RfImage, extract_patches, normalize_patch
from confcore.synthgen import SynthConfig

# ---------------------------------------------------------------------------
# fast, exact criteria


def test_c01_evidence_formulas(record_criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    ev = np.concatenate([rng.exponential(5.0, size=(990, 2)), rng.uniform(0, 1e6, size=(5, 2)), np.zeros((5, 2))])
    out = evidence_summary(ev)
    worst_sum = worst_u = 0.0
    for (e0, e1), b, u in zip(ev, out["belief"], out["uncertainty"]):
        # exact rational oracle
        s = Fraction(e0) + Fraction(e1) + 2
        worst_u = max(worst_u, abs(float(Fraction(2) / s) - u))
        worst_sum = max(worst_sum, abs(b[0] + b[1] + u - 1.0))
    elapsed = time.perf_counter() - t0
    ok = worst_sum <= 1e-9 and worst_u <= 1e-9 and elapsed < 1.0
    assert record_criterion(1, "EDL formula exactness", ok,
                            f"max|b0+b1+U-1|={worst_sum:.2e}, max|U-2/S|={worst_u:.2e}, {elapsed:.2f}s")


def _mc_bayes_risk(e, y, n, rng):
    p1 = rng.beta(e[1] + 1.0, e[0] + 1.0, size=n)
    sq = (p1 - (y == 1)) ** 2 + ((1.0 - p1) - (y == 0)) ** 2
    return sq.mean(), sq.std(ddof=1) / math.sqrt(n)


def _quad_kl_uniform(a, b):
    def integrand(x):
        logpdf = stats.beta.logpdf(x, a, b)
        return math.exp(logpdf) * logpdf if np.isfinite(logpdf) else 0.0

    return integrate.quad(integrand, 0.0, 1.0, limit=200, epsabs=1e-12, epsrel=1e-12)[0]


def test_c02_loss_oracles(record_criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    worst_z = 0.0
    for _ in range(100):
        e = rng.exponential(4.0, size=2)
        y = int(rng.integers(0, 2))
        closed = bayes_risk_loss(e[None], [y]).item()
        mc, se = _mc_bayes_risk(e, y, 10**6, rng)
        worst_z = max(worst_z, abs(closed - mc) / se)
    worst_kl = 0.0
    for _ in range(20):
        y = int(rng.integers(0, 2))
        e = rng.exponential(3.0, size=2)
        # weight 1 after annealing; alpha-tilde keeps only the wrong-class evidence
        closed = kl_regularizer(e[None], [y], epoch=100).item()
        wrong = e[1 - y] + 1.0
        a, b = (1.0, wrong) if y == 1 else (wrong, 1.0)  # Beta(alpha_1, alpha_0)
        worst_kl = max(worst_kl, abs(closed - _quad_kl_uniform(a, b)))
    elapsed = time.perf_counter() - t0
    ok = worst_z <= 3.0 and worst_kl <= 1e-4 and elapsed < 120
    assert record_criterion(2, "loss oracles", ok,
                            f"bayes-risk max |z|={worst_z:.2f} (<=3), KL max err={worst_kl:.2e}, {elapsed:.1f}s")


def test_c03_gradient_check(record_criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(303)
    worst = 0.0
    for b in range(20):
        logits = torch.tensor(rng.normal(0, 2, size=(4, 2)), dtype=torch.float64, requires_grad=True)
        y = torch.as_tensor(rng.integers(0, 2, size=4))
        epoch = int(rng.integers(0, 15))
        edl_total_loss(logits, y, epoch).backward()
        analytic = logits.grad.numpy()
        x = logits.detach().numpy()
        numeric = np.zeros_like(x)
        h = 1e-6
        for idx in np.ndindex(x.shape):
            up, down = x.copy(), x.copy()
            up[idx] += h
            down[idx] -= h
            numeric[idx] = (edl_total_loss(torch.tensor(up), y, epoch).item()
                            - edl_total_loss(torch.tensor(down), y, epoch).item()) / (2 * h)
        rel = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-8)
        worst = max(worst, float(np.max(np.where(np.abs(numeric) > 1e-8, rel, 0.0))))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-4 and elapsed < 60
    assert record_criterion(3, "gradient check", ok, f"max relative error {worst:.2e}, {elapsed:.1f}s")


def test_c04_schedule_and_selection(record_criterion):
    t0 = time.perf_counter()
    schedule_ok = selection_ratio(0, 100, 0.4) == 1.0
    for gamma, e_max in ((0.4, 100), (0.25, 40), (0.5, 30), (0.1, 10)):
        schedule_ok &= selection_ratio(round(gamma * e_max), e_max, gamma) == pytest.approx(1 - gamma, abs=1e-15)
    rng = np.random.default_rng(404)
    mismatches = 0
    for i in range(1000):
        n = int(rng.integers(1, 65))
        losses = rng.integers(0, 8, size=n) / 4.0 if i % 2 else rng.normal(size=n)  # odd draws carry ties
        ratio = float(rng.uniform(0.05, 1.0))
        k = max(1, math.floor(ratio * n + 1e-9))
        oracle = sorted(sorted(range(n), key=lambda j: (losses[j], j))[:k])
        mismatches += select_small_loss(losses, ratio).tolist() != oracle
    elapsed = time.perf_counter() - t0
    ok = schedule_ok and mismatches == 0 and elapsed < 5
    assert record_criterion(4, "schedule and selection", ok,
                            f"R endpoints exact={schedule_ok}, {mismatches}/1000 selection mismatches, {elapsed:.2f}s")


def test_c05_ece(record_criterion):
    t0 = time.perf_counter()
    fixture, _ = ece([0.95, 0.95, 0.65, 0.65], [1, 0, 1, 1])
    rng = np.random.default_rng(505)
    conf = rng.uniform(0.0, 1.0, size=10**4)
    calibrated, _ = ece(conf, rng.uniform(size=conf.size) < conf)
    elapsed = time.perf_counter() - t0
    ok = abs(fixture - 0.4) < 1e-12 and calibrated < 0.02 and elapsed < 5
    assert record_criterion(5, "ECE", ok, f"fixture {fixture:.12f} (0.4), calibrated N=1e4 {calibrated:.4f} (<0.02)")


def _pp(prob, conf, core="c"):
    return PatchPrediction(prob, conf, int(prob > 0.5), core, 1)


def test_c06_aggregation(record_criterion):
    t0 = time.perf_counter()
    a = aggregate_core([_pp(1.0, 1.0)] * 10, 0.9)
    b = aggregate_core([_pp(0.9, 0.5)] * 5 + [_pp(0.9, 0.95)] * 5, 0.7)
    kept = [_pp(p, 0.95) for p in (0.2, 0.9, 0.9, 0.9, 0.9, 0.9)]
    c = aggregate_core(kept + [_pp(0.1, 0.3)] * 4, 0.7)
    examples = (a.status == "predicted" and a.score == 1.0
                and b.status == "uncertain" and b.retained_fraction == 0.5
                and c.status == "predicted" and c.score == pytest.approx(4.7 / 6, abs=1e-12) and c.predicted_label == 1)
    rng = np.random.default_rng(606)
    grid = np.round(np.linspace(0, 1, 21), 10)
    violations = 0
    for _ in range(100):
        n_cores = int(rng.integers(1, 12))
        preds = [_pp(float(rng.uniform()), float(rng.uniform()), f"k{i}")
                 for i in range(n_cores) for _ in range(int(rng.integers(1, 15)))]
        labels = {f"k{i}": int(rng.integers(0, 2)) for i in range(n_cores)}
        kept = [p.retained_cores for p in accuracy_vs_confidence_curve(preds, grid, labels)]
        violations += any(x < y for x, y in zip(kept, kept[1:]))
    elapsed = time.perf_counter() - t0
    ok = examples and violations == 0 and elapsed < 5
    assert record_criterion(6, "aggregation rules", ok,
                            f"examples hold={examples}, monotonicity violations {violations}/100, {elapsed:.2f}s")


def _brute_windows(roi, window, stride):
    h, w = roi.shape
    out = []
    for r in range(0, h - window[0] + 1, stride[0]):
        for c in range(0, w - window[1] + 1, stride[1]):
            if 2 * int(roi[r:r + window[0], c:c + window[1]].sum()) >= window[0] * window[1]:
                out.append((r, c))
    return out


def test_c11_preprocessing(record_criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1111)
    count_mismatch = 0
    for _ in range(20):
        shape = tuple(int(v) for v in rng.integers(20, 70, size=2))
        spacing = tuple(float(v) for v in rng.uniform(0.2, 0.6, size=2))
        roi = np.zeros(shape, bool)
        r0, c0 = rng.integers(0, shape[0] // 2), rng.integers(0, shape[1] // 2)
        roi[r0:r0 + rng.integers(5, shape[0]), c0:c0 + rng.integers(5, shape[1])] = True
        roi &= rng.uniform(size=shape) < 0.9
        image = RfImage(rng.normal(size=shape), spacing[0], spacing[1], np.ones(shape, bool))
        grid = PatchGrid(patch_size_mm=float(rng.uniform(2, 5)), overlap_fraction=float(rng.uniform(0, 0.9)))
        window = grid.window_px(image)
        if window[0] > shape[0] or window[1] > shape[1]:
            grid = PatchGrid(patch_size_mm=1.5, overlap_fraction=grid.overlap_fraction)
            window = grid.window_px(image)
        _, origins = extract_patches(image, roi, grid)
        oracle = _brute_windows(roi, window, grid.stride_px(window))
        count_mismatch += [tuple(o) for o in origins.tolist()] != oracle
    x = rng.normal(3.0, 2.0, size=(32, 32))
    once = normalize_patch(x)
    idempotent = np.allclose(normalize_patch(once), once, atol=1e-6)
    try:
        normalize_patch(np.full((8, 8), 7.0))
        degenerate = False
    except DegeneratePatchError:
        degenerate = True
    elapsed = time.perf_counter() - t0
    ok = count_mismatch == 0 and idempotent and degenerate and elapsed < 10
    assert record_criterion(11, "preprocessing", ok,
                            f"{count_mismatch}/20 window mismatches, idempotent={idempotent}, "
                            f"degenerate rejected={degenerate}, {elapsed:.2f}s")


def test_c10_reproducibility(record_criterion, tmp_path):
    t0 = time.perf_counter()
    base = dict(
        synth=SynthConfig(n_patients=8, cores_per_patient=3, patches_per_core=8, image_size=(16, 16),
                          involvement=(0.7, 0.7), seed=3),
        coteach=CoteachConfig(max_epochs=3, learning_rate=1e-3),
        backbone=BackboneConfig(width=8),
        methods=("edl", "edl_coteach", "mc_dropout"),
        seeds=(0, 1),
        mc_passes=5,
    )
    run_experiment(ExperimentConfig(**base, output_dir=str(tmp_path / "a")))
    run_experiment(ExperimentConfig(**base, output_dir=str(tmp_path / "b")))
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("metrics.json"))
    same = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)
    elapsed = time.perf_counter() - t0
    ok = same and len(files) == 6 and elapsed < 300
    assert record_criterion(10, "reproducibility", ok, f"{len(files)} metric JSONs byte-identical={same}, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# trained-model criteria

CLASS_SEPARATION = 0.1
LEARNING_RATE = 1e-3
WIDTH = 16

# 200 cores of 20 patches; fixed involvement 0.7 gives 30% wrong weak labels inside cancer cores
NOISY_SYNTH = dict(n_patients=40, cores_per_patient=5, patches_per_core=20, involvement=(0.7, 0.7),
                   image_size=(32, 32), class_separation=CLASS_SEPARATION)
TRAINING = CoteachConfig(max_epochs=30, learning_rate=LEARNING_RATE, batch_size=64, gamma=0.4)
SEEDS = (0, 1, 2)


def _metrics(root: Path, method: str) -> list[dict]:
    return [json.loads((root / method / f"seed_{s}" / "metrics.json").read_text()) for s in SEEDS]


@pytest.fixture(scope="module")
def coteaching_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("coteaching")
    t0 = time.perf_counter()
    run_experiment(ExperimentConfig(
        synth=SynthConfig(**NOISY_SYNTH, seed=7),
        coteach=TRAINING,
        backbone=BackboneConfig(kind="small_cnn", width=WIDTH),
        methods=("edl", "edl_coteach"),
        seeds=SEEDS,
        tau_grid=(0.0, 0.5, 0.7, 0.8, 0.9),
        output_dir=str(root),
    ))
    return root, time.perf_counter() - t0


def test_c07_coteaching_benefit(record_criterion, coteaching_runs):
    root, elapsed = coteaching_runs
    alone, paired = _metrics(root, "edl"), _metrics(root, "edl_coteach")
    bacc = [np.mean([m["patch_balanced_accuracy"] for m in runs]) for runs in (alone, paired)]
    cal = [np.mean([m["ece"] for m in runs]) for runs in (alone, paired)]
    gain = 100 * (bacc[1] - bacc[0])
    ok = gain >= 3.0 and cal[1] < cal[0] and elapsed < 1800
    assert record_criterion(7, "co-teaching benefit", ok,
                            f"oracle patch bacc EDL {bacc[0]:.4f} vs EDL+co-teaching {bacc[1]:.4f} "
                            f"(gain {gain:+.2f} pts, need >= 3); ECE {cal[0]:.4f} vs {cal[1]:.4f}; {elapsed / 60:.1f} min")


def test_c09_accuracy_vs_confidence(record_criterion, coteaching_runs):
    root, _ = coteaching_runs
    details, ok = [], True
    for method in ("edl", "edl_coteach"):
        for s in SEEDS:
            curve = {p.tau: p for p in read_curve_csv(root / method / f"seed_{s}" / "curve.csv")}
            low, high = curve[0.0], curve[0.9]
            acc_ok = high.balanced_accuracy is not None and high.balanced_accuracy >= low.balanced_accuracy
            ret_ok = high.retained_cores <= low.retained_cores
            ok &= acc_ok and ret_ok
            hb = "n/a" if high.balanced_accuracy is None else f"{high.balanced_accuracy:.3f}"
            details.append(f"{method}/{s}: {low.balanced_accuracy:.3f}->{hb}, "
                           f"cores {low.retained_cores}->{high.retained_cores}")
    assert record_criterion(9, "accuracy vs confidence", ok, "; ".join(details))


def test_c08_ood_uncertainty(record_criterion, tmp_path):
    t0 = time.perf_counter()
    run_experiment(ExperimentConfig(
        synth=SynthConfig(**{**NOISY_SYNTH, "ood_fraction": 0.1}, seed=8),
        coteach=TRAINING,
        backbone=BackboneConfig(kind="small_cnn", width=WIDTH),
        methods=("edl",),
        seeds=SEEDS,
        output_dir=str(tmp_path),
    ))
    elapsed = time.perf_counter() - t0
    runs = _metrics(tmp_path, "edl")
    per_seed = [(m["mean_uncertainty_ood"], m["mean_uncertainty_id"], m["ood_auroc"]) for m in runs]
    ok = all(u_ood > u_id and auc > 0.7 for u_ood, u_id, auc in per_seed) and elapsed < 900
    detail = "; ".join(f"seed {s}: U ood {a:.3f} vs id {b:.3f}, AUROC {c:.3f}" for s, (a, b, c) in zip(SEEDS, per_seed))
    assert record_criterion(8, "OOD uncertainty", ok, f"{detail}; {elapsed / 60:.1f} min")
