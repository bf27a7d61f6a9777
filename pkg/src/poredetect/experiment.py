"""End-to-end study drivers: overfit sanity and the domain-transfer gap.

Both studies run entirely on synthetic fingerprints at reduced width so they
finish on a single desktop CPU core. The domain study trains the same
architecture twice per seed — once with the reversal coupling active
(lam = 0.005) and once with it disabled (lam = 0) — and compares target-domain
micro F-scores at each model's own validation-chosen operating point.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, replace

import numpy as np

from .dataprep import (DOMAIN_SOURCE, DOMAIN_TARGET, DomainSample, SynthConfig,
                       labeled_patches, pore_label_image, synth_dataset,
                       to_unit, unlabeled_patches)
from .detector import local_maxima, predict_map
from .evalkit import evaluate_maps, match_pores
from .ndgrad import Grid4
from .porenet import DomainHeadConfig, PoreModel, ResPoreConfig, build_model
from .trainer import AdamState, TrainConfig, train, train_pore_step

# The two synthetic sensors differ in ridge period and pore radius only:
# the target's wider ridges carry much smaller pores, so a source-only
# detector under-responds on target prints.
SOURCE_SYNTH = SynthConfig()
TARGET_SYNTH = replace(SOURCE_SYNTH, ridge_period=15.0, pore_radius=1.0)


# ---------------------------------------------------------------------------
# overfit sanity study

@dataclass
class OverfitResult:
    final_mse: float
    recall: float
    steps: int
    seconds: float
    threshold: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def overfit_study(seed: int = 0, n_patches: int = 10, patch_size: int = 40,
                  width: float = 0.125, learning_rate: float = 3e-3,
                  max_steps: int = 400, mse_target: float = 8e-4,
                  threshold: float = 0.5) -> OverfitResult:
    """Memorize a handful of patch-sized synthetic prints with the pore branch.

    Trains full-batch until the map MSE drops below mse_target (or max_steps),
    then checks how many planted pores the detection pipeline recovers from
    the fitted maps.
    """
    t0 = time.perf_counter()
    synth_cfg = replace(SOURCE_SYNTH, height=patch_size, width=patch_size,
                        n_pores=4, margin=7, min_separation=8.0)
    images = synth_dataset(synth_cfg, n_patches, seed, DOMAIN_SOURCE)
    patches = np.stack([to_unit(im.pixels) for im in images])[:, None]
    labels = np.stack([pore_label_image(im.shape, im.pores) for im in images])[:, None]

    model_cfg = ResPoreConfig(input_size=patch_size, width_multiplier=width)
    head_cfg = DomainHeadConfig(input_dim=patch_size ** 2, hidden_dims=(16, 8))
    model = build_model(model_cfg, head_cfg, seed)
    cfg = TrainConfig(batch_size=n_patches, learning_rate=learning_rate,
                      lam=0.0, epochs=1, seed=seed)
    opt = AdamState()
    steps, mse = 0, float("inf")
    while steps < max_steps and mse >= mse_target:
        steps += 1
        mse = train_pore_step(model, cfg, opt, patches, labels, steps).loss_pore

    true = total = 0
    for im in images:
        pore_map = predict_map(model, im.pixels)
        detected = local_maxima(pore_map, threshold)
        result = match_pores(detected, im.pores)
        true += result.n_true
        total += result.n_gt
    return OverfitResult(final_mse=mse, recall=true / total, steps=steps,
                         seconds=time.perf_counter() - t0, threshold=threshold)


# ---------------------------------------------------------------------------
# domain-transfer study

@dataclass(frozen=True)
class DomainStudyConfig:
    patch_size: int = 32
    width: float = 0.125
    batch_size: int = 4
    epochs: int = 6
    learning_rate: float = 1e-3
    head_hidden: tuple[int, ...] = (256, 64)
    n_source_train: int = 6
    n_target_train: int = 8
    n_target_val: int = 4
    n_target_test: int = 5
    source_step: int = 16
    source_synth: SynthConfig = SOURCE_SYNTH
    target_synth: SynthConfig = TARGET_SYNTH
    val_thresholds: tuple[float, ...] = tuple(
        float(t) for t in np.round(np.linspace(0.05, 0.95, 19), 4))


@dataclass
class DomainRunResult:
    seed: int
    lam: float
    threshold: float
    val_f_score: float
    test_f_score: float
    test_true_rate: float
    test_false_rate: float
    iterations: int
    seconds: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _target_eval_split(study: DomainStudyConfig, seed: int):
    val = synth_dataset(study.target_synth, study.n_target_val, seed,
                        DOMAIN_TARGET, start=1000)
    test = synth_dataset(study.target_synth, study.n_target_test, seed,
                         DOMAIN_TARGET, start=2000)
    return val, test


def _best_threshold(model: PoreModel, images, thresholds) -> tuple[float, float]:
    maps = [predict_map(model, im.pixels) for im in images]
    truths = [im.pores for im in images]
    best_th, best_f = thresholds[0], -1.0
    for th in thresholds:
        f = evaluate_maps(maps, truths, float(th)).f_score
        if f > best_f:
            best_th, best_f = float(th), f
    return best_th, best_f


def domain_run(seed: int, lam: float,
               study: DomainStudyConfig = DomainStudyConfig()) -> DomainRunResult:
    """Train one model at the given reversal strength and score it on the
    held-out target split at its validation-chosen threshold."""
    t0 = time.perf_counter()
    source_images = synth_dataset(study.source_synth, study.n_source_train,
                                  seed, DOMAIN_SOURCE)
    target_images = synth_dataset(study.target_synth, study.n_target_train,
                                  seed, DOMAIN_TARGET)
    source = [s for im in source_images
              for s in labeled_patches(im, study.patch_size, study.source_step)]
    target = [s for im in target_images
              for s in unlabeled_patches(im, study.patch_size)]

    model_cfg = ResPoreConfig(input_size=study.patch_size,
                              width_multiplier=study.width)
    head_cfg = DomainHeadConfig(input_dim=study.patch_size ** 2,
                                hidden_dims=study.head_hidden)
    model = build_model(model_cfg, head_cfg, seed)
    cfg = TrainConfig(batch_size=study.batch_size,
                      learning_rate=study.learning_rate, lam=lam,
                      epochs=study.epochs, seed=seed)
    logs = train(model, source, target, cfg)

    val, test = _target_eval_split(study, seed)
    threshold, val_f = _best_threshold(model, val, study.val_thresholds)
    test_maps = [predict_map(model, im.pixels) for im in test]
    report = evaluate_maps(test_maps, [im.pores for im in test], threshold)
    return DomainRunResult(seed=seed, lam=lam, threshold=threshold,
                           val_f_score=val_f, test_f_score=report.f_score,
                           test_true_rate=report.true_rate,
                           test_false_rate=report.false_rate,
                           iterations=len(logs),
                           seconds=time.perf_counter() - t0)


@dataclass
class DomainStudyResult:
    runs: list[DomainRunResult]
    mean_gap: float            # mean over seeds of F(lam) - F(0)
    lam: float

    def to_dict(self) -> dict:
        return {"runs": [r.to_dict() for r in self.runs],
                "mean_gap": self.mean_gap, "lam": self.lam}


def domain_study(seeds=(0, 1, 2), lam: float = 0.005,
                 study: DomainStudyConfig = DomainStudyConfig(),
                 progress=None) -> DomainStudyResult:
    """The transfer claim at desk scale: adversarial coupling on vs off."""
    runs = []
    gaps = []
    for seed in seeds:
        pair = {}
        for run_lam in (lam, 0.0):
            result = domain_run(seed, run_lam, study)
            runs.append(result)
            pair[run_lam] = result.test_f_score
            if progress is not None:
                progress(result)
        gaps.append(pair[lam] - pair[0.0])
    return DomainStudyResult(runs=runs, mean_gap=float(np.mean(gaps)), lam=lam)
