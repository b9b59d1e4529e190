"""Acceptance gate: one test and one PASS/FAIL line per criterion.

The training criteria run desk-scale protocols from ``acceptance_protocols``
and take a few hours on one CPU core in total.
"""

import os
import time

import numpy as np
import pytest

import acceptance_protocols as ap
import oracles
from gradcheck import check_gradients, weighted_sum
from test_autodiff import PRIMITIVES, composite, composite_inputs
from datw import attention as at
from datw import autodiff as ad
from datw import classic
from datw import cli
from datw import evaluate as ev

SEEDS = range(10)


def test_criterion_01_dtw_matches_exhaustive_paths(acceptance_report):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    mismatches = 0
    for _ in range(200):
        n, m = rng.integers(1, 9, size=2)
        a, b = rng.standard_normal(n), rng.standard_normal(m)
        mismatches += classic.dtw_distance(a, b) != oracles.exhaustive_dtw(a, b)
    seconds = time.perf_counter() - t0
    ok = acceptance_report(1, mismatches == 0 and seconds < 10,
                           f"{200 - mismatches}/200 exact matches in {seconds:.1f} s")
    assert ok


def test_criterion_02_soft_dtw_bounds(acceptance_report):
    rng = np.random.default_rng(7)
    worst_excess = -np.inf
    for _ in range(100):
        a = rng.standard_normal(rng.integers(2, 12))
        b = rng.standard_normal(rng.integers(2, 12))
        hard = classic.dtw_distance(a, b)
        for gamma in (0.1, 1.0, 10.0):
            worst_excess = max(worst_excess, classic.soft_dtw(a, b, gamma) - hard)
    worst_gap = 0.0
    for _ in range(100):
        a = rng.integers(-3, 4, rng.integers(2, 10)).astype(float)
        b = rng.integers(-3, 4, rng.integers(2, 10)).astype(float)
        worst_gap = max(worst_gap, abs(classic.soft_dtw(a, b, 1e-3) - classic.dtw_distance(a, b)))
    ok = acceptance_report(2, worst_excess <= 0 and worst_gap <= 1e-2,
                           f"max soft-hard {worst_excess:.3g} (<= 0), "
                           f"integer-cost gap at gamma=1e-3 {worst_gap:.3g} (<= 1e-2)")
    assert ok


def test_criterion_03_gradients_match_finite_differences(acceptance_report):
    t0 = time.perf_counter()
    worst = 0.0
    for name, make, op in PRIMITIVES:
        for seed in range(100):
            arrays = make(np.random.default_rng(seed))
            out_shape = op([ad.tensor(a) for a in arrays]).shape
            probe = np.random.default_rng(seed + 10_000).standard_normal(out_shape)
            worst = max(worst, *check_gradients(lambda n: weighted_sum(op(n), probe), arrays))
    for seed in range(100):
        worst = max(worst, *check_gradients(composite, composite_inputs(np.random.default_rng(seed))))
    seconds = time.perf_counter() - t0
    ok = acceptance_report(3, worst <= 1e-4 and seconds < 60,
                           f"{len(PRIMITIVES)} primitives + composite x 100 seeds, "
                           f"max relative error {worst:.2e} in {seconds:.1f} s")
    assert ok


def test_criterion_04_correspondence_rows_are_distributions(acceptance_report):
    rng = np.random.default_rng(0)
    worst = 0.0
    for seed in range(30):
        model = at.AttentionModel(at.ArchConfig(**ap.DESK_ARCH), np.random.default_rng(seed))
        a, b = rng.standard_normal(rng.integers(2, 40)), rng.standard_normal(rng.integers(2, 40))
        cm = at.attend(model, a, b)
        worst = max(worst, np.abs(cm.p_s.sum(axis=1) - 1).max(), np.abs(cm.p_t.sum(axis=1) - 1).max())
    zero = at.AttentionModel(at.ArchConfig(zero_head=True, **ap.DESK_ARCH), rng)
    cm = at.attend(zero, rng.standard_normal(9), rng.standard_normal(13))
    # the network computes in float32; every entry must be the rounded 1/J
    uniform = bool(np.all(cm.p_s == np.float32(1) / np.float32(13))
                   and np.all(cm.p_t == np.float32(1) / np.float32(9)))
    ok = acceptance_report(4, worst <= 1e-6 and uniform,
                           f"max |row sum - 1| {worst:.1e}; zero head uniform: {uniform}")
    assert ok


def test_criterion_05_pretraining_mimics_dtw(acceptance_report):
    res = ap.pretrain_mimic()
    ok = acceptance_report(
        5, res.agreement >= 0.8 and res.final_loss < res.initial_loss / 2
        and res.iterations <= 2000 and res.seconds < 600,
        f"argmax on DTW path {res.agreement:.1%} (>= 80%), L_pre {res.initial_loss:.4f} -> "
        f"{res.final_loss:.4f}, {res.iterations} iterations in {res.seconds:.0f} s")
    assert ok


@pytest.fixture(scope="module")
def standalone_runs():
    runs = []
    for seed in SEEDS:
        with_pre = ap.standalone(seed, pretrain=True)
        without = ap.standalone(seed, pretrain=False, dtw_error=with_pre.dtw_test_error)
        runs.append((with_pre, without))
    return runs


def test_criterion_06_contrastive_matches_dtw_baseline(standalone_runs, acceptance_report):
    wins = sum(w.test_error <= w.dtw_test_error for w, _ in standalone_runs)
    slowest = max(w.seconds for w, _ in standalone_runs)
    detail = ", ".join(f"{w.test_error:.2f}/{w.dtw_test_error:.2f}" for w, _ in standalone_runs)
    ok = acceptance_report(6, wins >= 7 and slowest < 1800,
                           f"learned <= DTW 1-NN test error in {wins}/10 seeds "
                           f"(learned/DTW: {detail}); slowest seed {slowest:.0f} s")
    assert ok


def test_criterion_07_pretraining_helps_validation(standalone_runs, acceptance_report):
    wins = sum(w.val_error <= wo.val_error for w, wo in standalone_runs)
    detail = ", ".join(f"{w.val_error:.2f}/{wo.val_error:.2f}" for w, wo in standalone_runs)
    ok = acceptance_report(7, wins >= 7,
                           f"with <= without pre-training validation error in {wins}/10 seeds "
                           f"(with/without: {detail})")
    assert ok


def test_criterion_08_eer(acceptance_report):
    separated = ev.eer(genuine=[0.1, 0.2, 0.3], forgery=[0.7, 0.8, 0.9])
    same = ev.eer(genuine=[1.0, 2.0, 3.0, 4.0], forgery=[1.0, 2.0, 3.0, 4.0])
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(100):
        g = rng.integers(0, 60, rng.integers(1, 25)) / 10.0
        f = rng.integers(0, 60, rng.integers(1, 25)) / 10.0 + rng.integers(0, 3)
        worst = max(worst, abs(ev.eer(genuine=g, forgery=f) - oracles.brute_force_eer(g, f)))
    ok = acceptance_report(8, separated == 0.0 and same == 0.5 and worst <= 1e-6,
                           f"separated {separated}, identical {same}, "
                           f"max deviation from 1e4-point sweep {worst:.1e}")
    assert ok


def test_criterion_09_mcnemar(acceptance_report):
    exact = ev.mcnemar(ev.ContingencyTable2x2(3, 0, 8, 9), "exact")
    symmetric = [ev.mcnemar(ev.ContingencyTable2x2(1, k, k, 2), mode)
                 for k in (1, 4, 9) for mode in ("exact", "corrected_chi2")]
    chi2 = ev.mcnemar_test(ev.ContingencyTable2x2(0, 5, 15, 0), "corrected_chi2").statistic
    ok = acceptance_report(9, exact == 0.0078125 and all(p == 1.0 for p in symmetric)
                           and chi2 == 4.05,
                           f"exact p(0,8) = {exact!r}, symmetric p = {sorted(set(symmetric))}, "
                           f"chi2(5,15) = {chi2!r}")
    assert ok


def test_criterion_10_plugin_schedule(acceptance_report):
    runs = [ap.plugin(seed) for seed in SEEDS]
    wins = sum(r.step3_eer <= r.step1_eer for r in runs)
    frozen = all(r.frozen for r in runs)
    slowest = max(r.seconds for r in runs)
    detail = ", ".join(f"{r.step3_eer:.3f}/{r.step1_eer:.3f}" for r in runs)
    ok = acceptance_report(10, wins >= 7 and frozen and slowest < 2700,
                           f"Step-3 <= Step-1 EER in {wins}/10 seeds (step3/step1: {detail}); "
                           f"encoder bit-identical: {frozen}; slowest seed {slowest:.0f} s")
    assert ok


def test_criterion_11_ecg200(acceptance_report):
    roots = [os.environ.get("DATW_UCR_DIR"), os.environ.get("UCR_ROOT"),
             "data", "data/UCR", os.path.expanduser("~/UCR")]
    found = ap.find_ucr_dataset("ECG200", roots)
    if found is None:
        print("SKIP criterion 11: ECG200 not found (set DATW_UCR_DIR)")
        pytest.skip("ECG200 data not present; set DATW_UCR_DIR to the UCR archive")
    res = ap.ucr_run(*found)
    ok = acceptance_report(11, res.test_error < res.dtw_test_error and res.seconds < 4 * 3600,
                           f"learned 1-NN error {res.test_error:.3f} vs DTW "
                           f"{res.dtw_test_error:.3f} in {res.seconds:.0f} s")
    assert ok


def test_criterion_12_commands_are_deterministic(tmp_path, capsys, acceptance_report):
    def run(*argv):
        assert cli.main([str(a) for a in argv]) == 0
        return capsys.readouterr().out

    outputs = {}
    for rep in ("a", "b"):
        ws = tmp_path / rep
        synth = run("synth", "--classes", 2, "--per-class", 12, "--length", 24, "--seed", 3,
                    "--split", "0.5,0.25", "--out-dir", ws / "d")
        args = ["--train", ws / "d/synth_TRAIN.tsv", "--val", ws / "d/synth_VAL.tsv",
                "--set", "arch.channels=[4,8,16]", "--seed", 5, "--out-dir", ws / "o"]
        pre = run("pretrain", *args, "--max-iter", 20, "--batch-size", 6, "--lr", 3e-3,
                  "--val-interval", 10)
        con = run("train", *args, "--max-iter", 20, "--batch-size", 6, "--lr", 1e-3,
                  "--val-interval", 10, "--init", ws / "o/pretrain.ckpt")
        evaluation = run("eval", "--checkpoint", ws / "o/contrastive.ckpt",
                         "--train", ws / "d/synth_TRAIN.tsv", "--test", ws / "d/synth_TEST.tsv",
                         "--knn", 1, "--out-dir", ws / "e")
        outputs[rep] = [synth.replace(str(ws), ""), pre, con, evaluation]
    identical = outputs["a"] == outputs["b"]
    ok = acceptance_report(12, identical, "synth, pretrain, train and eval metric summaries "
                                          f"bit-identical across reruns: {identical}")
    assert ok
