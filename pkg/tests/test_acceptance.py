"""Acceptance criteria, each run at its stated tolerance.

Every test records a one-line PASS/FAIL summary (shown at the end of the pytest
run) before asserting.
"""

import functools
import math
import time

import numpy as np
import pytest

from arcconv import analysis, archive, datagen
from arcconv.cli import main, toy_datasets
from arcconv.layer import ArcLayerConfig
from arcconv.model import TrainConfig, evaluate, model_from_config, resnet50_descriptor, train
from arcconv.rotation import rotate_plane

PER_EXPERT_DELTA = (52.25 - 41.18) * 1e6
SEEDS = (0, 1, 2)
# Toy runs use a 0.1 rad angle coefficient: at this 32x32 scale larger bounds
# (up to pi) let the router blur every kernel at the start of training.
TOY_COEFFICIENT = 0.1
TOY_EPOCHS = 8


# ------------------------------------------------------------------ 1


def test_criterion_1_rotation_identity_and_quarter_turns(criterion_report):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    worst, identity = 0.0, True
    for k in (1, 2, 3, 4, 5, 7):
        w = rng.standard_normal((k, k))
        identity &= rotate_plane(w, 0.0).tobytes() == w.tobytes()
        for turns, angle in ((1, math.pi / 2), (-1, -math.pi / 2), (2, math.pi), (2, -math.pi)):
            worst = max(worst, float(np.max(np.abs(rotate_plane(w, angle) - np.rot90(w, turns)))))
    elapsed = time.perf_counter() - start
    ok = identity and worst <= 1e-15 and elapsed < 1.0
    criterion_report(1, ok, f"identity bitwise={identity}, quarter-turn max err {worst:.1e}, {elapsed:.2f}s")
    assert ok


# ------------------------------------------------------------------ 2


def test_criterion_2_combined_equals_naive(criterion_report):
    start = time.perf_counter()
    r64 = analysis.check_equivalence(dtype=np.float64)
    r32 = analysis.check_equivalence(dtype=np.float32)
    elapsed = time.perf_counter() - start
    ok = r64.metric <= 1e-12 and r32.metric <= 1e-5 and elapsed < 30
    criterion_report(2, ok, f"binary64 max abs {r64.metric:.1e}, binary32 max rel {r32.metric:.1e}, "
                            f"{len(r64.details)} cases, {elapsed:.1f}s")
    assert ok


# ------------------------------------------------------------------ 3


def test_criterion_3_full_stack_gradcheck(criterion_report):
    start = time.perf_counter()
    reports = [analysis.gradcheck(t, eps=1e-5, tol=1e-5) for t in analysis.GRADCHECK_TARGETS]
    elapsed = time.perf_counter() - start
    worst = max(r.metric for r in reports)
    ok = all(r.passed for r in reports) and worst <= 1e-5 and elapsed < 120
    criterion_report(3, ok, ", ".join(f"{r.name} {r.metric:.1e}" for r in reports) + f", {elapsed:.1f}s")
    assert ok


# ------------------------------------------------------------------ 4


def _resnet_params(n, include_strided):
    return analysis.estimate_cost(resnet50_descriptor((2, 3, 4), n=n, include_strided=include_strided),
                                  (1024, 1024)).params


def test_criterion_4_parameter_delta(criterion_report):
    start = time.perf_counter()
    errors = {}
    for flag in (False, True):
        delta = _resnet_params(2, flag) - _resnet_params(1, flag)
        errors[flag] = delta / PER_EXPERT_DELTA - 1
    elapsed = time.perf_counter() - start
    ok = abs(errors[True]) <= 0.03 and elapsed < 1.0
    criterion_report(4, ok, f"per-expert delta error {errors[True]:+.2%} with strided convs replaced "
                            f"({errors[False]:+.2%} without), {elapsed:.2f}s")
    assert ok


# ------------------------------------------------------------------ 5


def test_criterion_5_flop_overhead_growth(criterion_report):
    start = time.perf_counter()
    growth = {}
    for flag in (True, False):
        e1 = analysis.estimate_cost(resnet50_descriptor((2, 3, 4), n=1, include_strided=flag), (1024, 1024))
        e6 = analysis.estimate_cost(resnet50_descriptor((2, 3, 4), n=6, include_strided=flag), (1024, 1024))
        growth[flag] = (analysis.arc_overhead_flops(e6) - analysis.arc_overhead_flops(e1)) / \
            analysis.backbone_conv_flops(e1)
    elapsed = time.perf_counter() - start
    ok = growth[True] <= 0.0015 and elapsed < 1.0
    criterion_report(5, ok, f"overhead growth n=1->6 is {growth[True]:.4%} of backbone conv FLOPs "
                            f"({growth[False]:.4%} without strided convs), limit 0.15%, {elapsed:.2f}s")
    assert ok


# ------------------------------------------------------------------ 6


def test_criterion_6_efficiency_direction(criterion_report):
    start = time.perf_counter()
    four = analysis.bench(ArcLayerConfig(64, 64, n=4, padding=1), (1, 64, 56, 56), trials=7, warmup=2)
    one = analysis.bench(ArcLayerConfig(64, 64, n=1, padding=1), (1, 64, 56, 56), trials=7, warmup=2)
    elapsed = time.perf_counter() - start
    naive_ratio = four.ratios["naive/combined"]
    static_ratio = one.ratios["combined/static"]
    ok = naive_ratio >= 1.5 and static_ratio <= 1.5 and four.state_unchanged and one.state_unchanged \
        and elapsed < 60
    criterion_report(6, ok, f"n=4 naive/combined {naive_ratio:.2f} (>=1.5), "
                            f"n=1 combined/static {static_ratio:.2f} (<=1.5), {elapsed:.1f}s")
    assert ok


# ------------------------------------------------------------------ 7 / 8


@functools.lru_cache(maxsize=None)
def toy_run(mode, stages, seed):
    """Final test accuracy and wall time of one toy training run."""
    train_set, test_set = toy_datasets(seed, 1600, 400, 8)
    cfg = TrainConfig(epochs=TOY_EPOCHS, seed=seed, mode=mode, n=4, stages=tuple(stages),
                      angle_coefficient=TOY_COEFFICIENT)
    start = time.perf_counter()
    history = train(model_from_config(cfg), train_set, test_set, cfg)
    return history[-1].test_acc, time.perf_counter() - start


def mean_accuracy(mode, stages="ABC"):
    return float(np.mean([toy_run(mode, stages, s)[0] for s in SEEDS]))


def overfit_single_batch(mode):
    data = datagen.generate(datagen.DatasetConfig(seed=0), 32)
    cfg = TrainConfig(epochs=200, batch_size=32, mode=mode, seed=0, optimizer="adam", lr=0.01)
    net = model_from_config(cfg)
    history = train(net, data, None, cfg)
    return min(history[-1].train_acc, evaluate(net, data))


@pytest.mark.slow
def test_criterion_7_toy_training_benefit(criterion_report):
    start = time.perf_counter()
    static, arc = mean_accuracy("static"), mean_accuracy("arc")
    overfit = {mode: overfit_single_batch(mode) for mode in ("static", "arc")}
    elapsed = time.perf_counter() - start
    ok = arc >= static and min(arc, static) >= 0.70 and all(v == 1.0 for v in overfit.values())
    per_seed = "/".join(f"{toy_run('arc', 'ABC', s)[0]:.3f}" for s in SEEDS)
    criterion_report(7, ok, f"mean test acc ARC {arc:.4f} (seeds {per_seed}) vs static {static:.4f}; "
                            f"single-batch overfit static {overfit['static']:.2f}, arc {overfit['arc']:.2f}; "
                            f"{elapsed / 60:.1f} min")
    assert ok


@pytest.mark.slow
def test_criterion_8_stage_ablation(criterion_report):
    means = {st: mean_accuracy("arc", st) for st in ("C", "BC", "ABC")}
    static = mean_accuracy("static")
    monotone = means["C"] <= means["BC"] <= means["ABC"]
    within_noise = means["C"] <= means["BC"] + 0.015 and means["BC"] <= means["ABC"] + 0.015
    ok = means["ABC"] >= static
    note = "monotone" if monotone else ("inversion within noise" if within_noise else "inversion beyond noise")
    seeds = "; ".join(f"{st}: " + "/".join(f"{toy_run('arc', st, s)[0]:.3f}" for s in SEEDS) for st in means)
    criterion_report(8, ok, f"{{C}} {means['C']:.4f} -> {{B,C}} {means['BC']:.4f} -> {{A,B,C}} {means['ABC']:.4f} "
                            f"({note}); static {static:.4f}; per seed {seeds}")
    assert ok


# ------------------------------------------------------------------ 9


TINY = ["--train-count", "64", "--test-count", "32", "--epochs", "2", "--batch-size", "16"]


def test_criterion_9_determinism_and_persistence(criterion_report, tmp_path):
    start = time.perf_counter()
    paths = [tmp_path / "a.csv", tmp_path / "b.csv"]
    for p in paths:
        assert main(["train", "--mode", "arc", "--seed", "7", "--out", str(p), *TINY]) == 0
    csv_identical = paths[0].read_bytes() == paths[1].read_bytes()
    weights_identical = (tmp_path / "a.arcw").read_bytes() == (tmp_path / "b.arcw").read_bytes()

    entries = archive.load_archive(str(tmp_path / "a.arcw"))
    round_trip = archive.encode_archive(entries) == (tmp_path / "a.arcw").read_bytes()

    samples = datagen.generate(datagen.DatasetConfig(seed=0), 10)
    golden = "324a90023a2fc174b2efba230238a91737739da0ce08f136267fa16c613f7997"
    checksum_stable = datagen.dataset_checksum(samples) == golden
    elapsed = time.perf_counter() - start
    ok = csv_identical and weights_identical and round_trip and checksum_stable and elapsed < 60
    criterion_report(9, ok, f"metrics CSV identical={csv_identical}, weights identical={weights_identical}, "
                            f"archive round trip={round_trip}, manifest checksum golden={checksum_stable}, "
                            f"{elapsed:.1f}s")
    assert ok
