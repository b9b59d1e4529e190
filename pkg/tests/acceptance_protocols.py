"""Desk-scale experiment protocols behind the training acceptance criteria.

Every run derives independent generators for data, initialization and each
training phase from one integer seed, so arms of an ablation share data and
initial weights.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from datw import attention as at
from datw import classic
from datw import data as dd
from datw import evaluate as ev
from datw import train as tr

# attention network used by all desk-scale runs: five resolution levels keep
# the receptive field wide enough for length-64 series at a small width
DESK_ARCH = dict(channels=(4, 8, 16, 32, 64))


def phase_rngs(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


# --------------------------------------------------------------------------
# pre-training mimics DTW
# --------------------------------------------------------------------------

@dataclass
class MimicResult:
    agreement: float
    initial_loss: float
    final_loss: float
    iterations: int
    seconds: float


def argmax_agreement(model: at.AttentionModel, pairs) -> float:
    """Fraction of rows whose P_s argmax lies on the DTW path, averaged over pairs."""
    scores = []
    for a, b in pairs:
        target = classic.dtw_target_matrix(a, b)
        cols = at.attend(model, a, b).p_s.argmax(axis=1)
        scores.append(target[np.arange(len(a)), cols].mean())
    return float(np.mean(scores))


def pretrain_mimic(seed: int = 0, n_pairs: int = 20, length: int = 32,
                   max_iter: int = 300, lr: float = 3e-3) -> MimicResult:
    r_data, r_init, r_train = phase_rngs(seed, 3)
    ds = dd.znormalize(dd.synth_warped_classes(r_data, 2, n_pairs, length))
    # a frozen set of pairs, half same-class and half cross-class
    order = r_data.permutation(len(ds))
    first, second = order[:n_pairs], order[n_pairs:2 * n_pairs]
    pool = tr.PairBatch(first, second, ds.labels[first] == ds.labels[second])
    model = at.AttentionModel(at.ArchConfig(**DESK_ARCH), r_init)
    t0 = time.perf_counter()
    res = tr.run_pretrain(model, ds, tr.TrainConfig(lr=lr, max_iter=max_iter,
                                                    batch_size=n_pairs), r_train,
                          pair_pool=pool)
    pairs = [(ds[i].values, ds[j].values) for i, j in zip(first, second)]
    return MimicResult(argmax_agreement(model, pairs), res.losses[0],
                       float(np.mean(res.losses[-20:])), len(res.losses),
                       time.perf_counter() - t0)


# --------------------------------------------------------------------------
# stand-alone scenario
# --------------------------------------------------------------------------

STANDALONE = dict(
    pretrain=tr.TrainConfig(lr=3e-3, max_iter=200, batch_size=8),
    contrastive=tr.TrainConfig(lr=1e-3, max_iter=300, batch_size=12, margin=1.0,
                               val_interval=50),
)


@dataclass
class StandaloneResult:
    val_error: float
    test_error: float
    dtw_test_error: float
    seconds: float


def standalone_data(seed: int):
    r_data = phase_rngs(seed, 1)[0]
    ds = dd.znormalize(dd.synth_warped_classes(r_data, 2, 40, 64))
    return dd.split(ds, dd.SplitSpec(0.5, 0.25, seed=seed))


def dtw_test_error(train: dd.Dataset, test: dd.Dataset) -> float:
    dist = classic.pairwise(classic.dtw_distance, [s.values for s in test],
                            [s.values for s in train])
    return ev.error_rate(ev.knn_classify(dist, train.labels, 1), test.labels)


def standalone(seed: int, pretrain: bool = True, dtw_error: float | None = None
               ) -> StandaloneResult:
    train, val, test = standalone_data(seed)
    _, r_init, r_pre, r_con = phase_rngs(seed, 4)
    model = at.AttentionModel(at.ArchConfig(**DESK_ARCH), r_init)
    t0 = time.perf_counter()
    if pretrain:
        tr.run_pretrain(model, train, STANDALONE["pretrain"], r_pre)
    res = tr.run_contrastive(model, train, STANDALONE["contrastive"], r_con, val=val)
    dist = at.distance_matrix(model, test, train)
    test_err = ev.error_rate(ev.knn_classify(dist, train.labels, 1), test.labels)
    if dtw_error is None:
        dtw_error = dtw_test_error(train, test)
    return StandaloneResult(res.best_score[0], test_err, dtw_error,
                            time.perf_counter() - t0)


# --------------------------------------------------------------------------
# plug-in scenario
# --------------------------------------------------------------------------

PLUGIN = tr.PluginConfig(
    step1=tr.TrainConfig(lr=1e-2, max_iter=150, batch_size=12, margin=1.4, val_interval=50),
    step2=tr.TrainConfig(lr=3e-3, max_iter=300, batch_size=6),
    step3=tr.TrainConfig(lr=1e-3, max_iter=300, batch_size=6, margin=1.4, val_interval=50),
)


@dataclass
class PluginRunResult:
    step1_eer: float
    step3_eer: float
    frozen: bool
    seconds: float


def plugin(seed: int, cfg: tr.PluginConfig = PLUGIN) -> PluginRunResult:
    r_data, r_enc, r_att, r_train = phase_rngs(seed, 4)
    ds = dd.synth_subjects(r_data, 10, 10, 10, 128)
    ds = dd.znormalize(ds)
    train, val, test = dd.split_subjects(ds, [0.5, 0.2, 0.3])
    enc = tr.SiameseEncoder(ds.dim, out_dim=4, hidden=16, kernel=5, rng=r_enc)
    model = at.AttentionModel(at.ArchConfig(in_dim=4, **DESK_ARCH), r_att)
    t0 = time.perf_counter()
    eers = {}

    def evaluate(step):
        if step == 1:
            eers[1] = tr.verification_eer_dtw(enc, test)
        elif step == 3:
            eers[3] = tr.verification_eer_attention(enc, model, test)

    res = tr.run_plugin_three_step(enc, model, train, cfg, r_train, val=val, on_step=evaluate)
    frozen = res.encoder_digest_before_step3 == res.encoder_digest_after_step3
    return PluginRunResult(eers[1], eers[3], frozen, time.perf_counter() - t0)


# --------------------------------------------------------------------------
# UCR ECG200 (only when the archive is available locally)
# --------------------------------------------------------------------------

ECG200 = dict(
    pretrain=tr.TrainConfig(lr=3e-3, max_iter=300, batch_size=8),
    contrastive=tr.TrainConfig(lr=1e-3, max_iter=1500, batch_size=12, margin=1.0,
                               val_interval=100),
)


def find_ucr_dataset(name: str, roots) -> tuple | None:
    """(train path, test path) of a UCR 2015/2018 dataset under any of ``roots``."""
    from pathlib import Path

    for root in roots:
        if not root:
            continue
        for folder in (Path(root) / name, Path(root)):
            for ext in (".tsv", ".txt", ""):
                tr_path = folder / f"{name}_TRAIN{ext}"
                te_path = folder / f"{name}_TEST{ext}"
                if tr_path.is_file() and te_path.is_file():
                    return tr_path, te_path
    return None


@dataclass
class UCRResult:
    test_error: float
    dtw_test_error: float
    seconds: float


def ucr_run(train_path, test_path, seed: int = 0) -> UCRResult:
    full_train = dd.znormalize(dd.load_ucr_tsv(train_path))
    test = dd.znormalize(dd.load_ucr_tsv(test_path))
    train, val = dd.split(full_train, dd.SplitSpec(0.8, 0.2, seed=seed))
    _, r_init, r_pre, r_con = phase_rngs(seed, 4)
    model = at.AttentionModel(at.ArchConfig(**DESK_ARCH), r_init)
    t0 = time.perf_counter()
    tr.run_pretrain(model, train, ECG200["pretrain"], r_pre)
    tr.run_contrastive(model, train, ECG200["contrastive"], r_con, val=val)
    dist = at.distance_matrix(model, test, full_train)
    err = ev.error_rate(ev.knn_classify(dist, full_train.labels, 1), test.labels)
    return UCRResult(err, dtw_test_error(full_train, test), time.perf_counter() - t0)
