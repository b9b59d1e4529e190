"""Losses, pair sampling, Adam and the training schedules.

Two schedules are provided for the stand-alone distance (DTW-mimic
pre-training followed by dual contrastive training) and a three-step
schedule for the plug-in setting, where a small Siamese encoder produces
the feature sequences that the attention module aligns.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .attention import AttentionModel, distance_matrix
from .autodiff import Node
from .classic import dtw
from .data import Dataset, as_array
from .evaluate import eer, knn_classify, verification_scores
from .nn import Conv2d, Module

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def _batched(x) -> Node:
    node = x if isinstance(x, Node) else ad.Node(np.asarray(x, dtype=np.float64))
    if node.value.ndim == 2:
        node = ad.reshape(node, (1,) + node.shape)
    return node


def reconstruction_error(a, p: Node, b) -> Node:
    """Per-pair ``|A - P B|_F^2 / (I D)`` for batched inputs."""
    a, p, b = _batched(a), _batched(p), _batched(b)
    n, d = a.shape[1:]
    if p.shape[1:] != (n, b.shape[1]):
        raise ValueError(f"correspondence {p.shape} does not fit series {a.shape}, {b.shape}")
    diff = ad.sub(a, ad.matmul(p, b))
    return ad.scale(ad.frobenius_sq(diff, keep_batch=True), 1.0 / (n * d))


def contrastive_terms(err: Node, same_class, margin: float) -> Node:
    """``err`` for same-class pairs, ``max(0, margin - err)`` otherwise."""
    same = np.broadcast_to(np.asarray(same_class, dtype=err.dtype), err.shape)
    hinge = ad.relu(ad.sub(ad.Node(np.asarray(margin, dtype=err.dtype)), err))
    return ad.add(ad.mul(err, same), ad.mul(hinge, 1.0 - same))


def loss_contrastive_s(a, b, p_s: Node, same_class, margin: float) -> Node:
    """Directional contrastive loss for ``P_s`` (mean over the batch)."""
    return ad.mean_all(contrastive_terms(reconstruction_error(a, p_s, b), same_class, margin))


def loss_dual(a, b, p_s: Node, p_t: Node, same_class, margin: float) -> Node:
    """Sum of both directional losses: ``A ~ P_s B`` and ``B ~ P_t A``."""
    return ad.add(loss_contrastive_s(a, b, p_s, same_class, margin),
                  loss_contrastive_s(b, a, p_t, same_class, margin))


def loss_pretrain(p_s: Node, p_dtw) -> Node:
    """``|P_s - P_DTW|_F^2 / (I J)``, averaged over the batch."""
    p_s = _batched(p_s)
    target = np.asarray(p_dtw, dtype=p_s.dtype)
    if target.ndim == 2:
        target = target[None]
    if target.shape != p_s.shape:
        raise ValueError(f"shape mismatch: {p_s.shape} vs target {target.shape}")
    n, m = p_s.shape[1:]
    per_pair = ad.frobenius_sq(ad.sub(p_s, target), keep_batch=True)
    return ad.scale(ad.mean_all(per_pair), 1.0 / (n * m))


# --------------------------------------------------------------------------
# pair sampling
# --------------------------------------------------------------------------

@dataclass
class PairBatch:
    first: np.ndarray
    second: np.ndarray
    same: np.ndarray

    def __len__(self) -> int:
        return len(self.first)

    def materialize(self, ds: Dataset) -> list[tuple[np.ndarray, np.ndarray, bool]]:
        return [(ds[i].values, ds[j].values, bool(s))
                for i, j, s in zip(self.first, self.second, self.same)]


def _ratio_counts(batch_size: int, ratio: Sequence[int]) -> tuple[int, int]:
    rs, rd = ratio
    if rs < 1 or rd < 1:
        raise ValueError(f"ratio components must be >= 1, got {ratio}")
    n_same = int(round(batch_size * rs / (rs + rd)))
    return n_same, batch_size - n_same


def sample_pairs(labels, rng: np.random.Generator, batch_size: int,
                 ratio: Sequence[int] = (1, 2)) -> PairBatch:
    """Same- and different-class index pairs in the configured ratio.

    Each group is drawn uniformly (with replacement) over all eligible
    ordered pairs.
    """
    labels = np.asarray(labels.labels if isinstance(labels, Dataset) else labels)
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2:
        raise ValueError("need at least two classes to form different-class pairs")
    n = len(labels)
    same_w = counts * (counts - 1.0)
    diff_w = counts * (n - counts.astype(float))
    if same_w.sum() == 0:
        raise ValueError(f"no class has two samples (class sizes {dict(zip(classes.tolist(), counts.tolist()))}); "
                         "same-class pairs are impossible")
    members = [np.flatnonzero(labels == c) for c in classes]
    others = [np.flatnonzero(labels != c) for c in classes]
    n_same, n_diff = _ratio_counts(batch_size, ratio)
    first, second, same = [], [], []
    for c in rng.choice(len(classes), size=n_same, p=same_w / same_w.sum()):
        i, j = rng.choice(members[c], size=2, replace=False)
        first.append(i); second.append(j); same.append(True)
    for c in rng.choice(len(classes), size=n_diff, p=diff_w / diff_w.sum()):
        first.append(rng.choice(members[c])); second.append(rng.choice(others[c]))
        same.append(False)
    return PairBatch(np.array(first, dtype=int), np.array(second, dtype=int),
                     np.array(same, dtype=bool))


def sample_any_pairs(n: int, rng: np.random.Generator, batch_size: int) -> PairBatch:
    """Label-blind pairs of distinct samples (used for pre-training)."""
    if n < 2:
        raise ValueError("need at least two samples")
    first = rng.integers(n, size=batch_size)
    second = (first + 1 + rng.integers(n - 1, size=batch_size)) % n
    return PairBatch(first, second, np.zeros(batch_size, dtype=bool))


def sample_verification_pairs(ds: Dataset, rng: np.random.Generator, batch_size: int,
                              ratio: Sequence[int] = (1, 2)) -> PairBatch:
    """Positive pairs are two genuine samples of one subject; negatives pair a
    genuine sample with a forgery of the same subject or with another
    subject's genuine sample (equal odds when both exist)."""
    labels = ds.labels
    genuine = np.array([bool(s.genuine) for s in ds])
    subjects = [c for c in ds.classes if np.sum(genuine & (labels == c)) >= 2]
    if len(subjects) < 2:
        raise ValueError("need two subjects with at least two genuine samples each")
    n_same, n_diff = _ratio_counts(batch_size, ratio)
    first, second, same = [], [], []
    for _ in range(n_same):
        s = subjects[rng.integers(len(subjects))]
        i, j = rng.choice(np.flatnonzero(genuine & (labels == s)), size=2, replace=False)
        first.append(i); second.append(j); same.append(True)
    for _ in range(n_diff):
        s = subjects[rng.integers(len(subjects))]
        i = rng.choice(np.flatnonzero(genuine & (labels == s)))
        forged = np.flatnonzero(~genuine & (labels == s))
        if forged.size and rng.random() < 0.5:
            j = rng.choice(forged)
        else:
            j = rng.choice(np.flatnonzero(genuine & (labels != s)))
        first.append(i); second.append(j); same.append(False)
    return PairBatch(np.array(first, dtype=int), np.array(second, dtype=int),
                     np.array(same, dtype=bool))


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

class Adam:
    """Bias-corrected Adam over named parameter nodes.

    A parameter whose ``grad`` is ``None`` is treated as having a zero gradient.
    """

    def __init__(self, named_params, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params: list[tuple[str, Node]] = list(named_params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.value) for name, p in self.params}
        self.v = {name: np.zeros_like(p.value) for name, p in self.params}

    def step(self) -> None:
        grads = {}
        for name, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.value)
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
            grads[name] = g
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params:
            g = grads[name]
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1 ** t)
            v_hat = self.v[name] / (1 - b2 ** t)
            p.value = (p.value - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)
            if not np.all(np.isfinite(p.value)):
                raise FloatingPointError(f"parameter {name!r} became non-finite at step {t}")

    def zero_grad(self) -> None:
        ad.zero_grad(p for _, p in self.params)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for name, p in self.params:
            self.m[name] = arrays[f"adam.m.{name}"].astype(p.dtype)
            self.v[name] = arrays[f"adam.v.{name}"].astype(p.dtype)
        self.step_count = step_count


def adam_step(opt: Adam) -> None:
    opt.step()


def gradients(loss: Node, params: Sequence[Node]) -> list[np.ndarray]:
    """Back-propagate ``loss`` and return d loss / d p for each parameter
    (zeros for parameters the loss does not depend on)."""
    ad.zero_grad(params)
    ad.backward(loss)
    return [p.grad.copy() if p.grad is not None else np.zeros_like(p.value) for p in params]


# --------------------------------------------------------------------------
# training phases
# --------------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Settings of one training phase.

    ``margin`` is the contrastive margin; ``ratio`` the same:different pair
    ratio of each batch. Validation runs every ``val_interval`` iterations
    (and at iterations 0 and ``max_iter``) and the best validated weights
    are restored at the end.
    """

    lr: float = 1e-4
    max_iter: int = 1000
    batch_size: int = 30
    ratio: tuple[int, int] = (1, 2)
    margin: float = 1.0
    val_interval: int = 50
    val_pairs: int = 32
    val_seed: int = 0
    knn_k: int = 1
    window: int | None = None
    metric: str = "sqeuclid"
    checkpoint_interval: int = 0
    n_refs: int = 5

    def __post_init__(self):
        self.ratio = tuple(int(r) for r in self.ratio)
        if self.margin <= 0:
            raise ValueError(f"margin must be positive, got {self.margin}")
        if self.batch_size < 1 or self.max_iter < 0:
            raise ValueError("batch_size must be >= 1 and max_iter >= 0")


@dataclass
class PhaseState:
    """Mutable progress of a phase; enough to resume it."""

    phase: str
    optimizer: Adam
    iteration: int = 0
    best_score: tuple | None = None
    best_iter: int = 0
    best_state: dict | None = None
    losses: list = field(default_factory=list)
    records: list = field(default_factory=list)


@dataclass
class PhaseResult:
    phase: str
    losses: list
    records: list
    best_iter: int
    best_score: tuple | None


Logger = Callable[[dict], None]


def _stack_pairs(arrays_a, arrays_b):
    return np.stack(arrays_a), np.stack(arrays_b)


def _group_by_shape(pairs):
    groups: dict[tuple, list[int]] = {}
    for k, (a, b, *_rest) in enumerate(pairs):
        groups.setdefault((a.shape, b.shape), []).append(k)
    return list(groups.values())


def _finish(model, state: PhaseState, cfg: TrainConfig, validate, log_fn, checkpoint_fn) -> PhaseResult:
    if validate is not None:
        if not state.records or state.records[-1].get("iter") != state.iteration \
                or "val_metric" not in state.records[-1]:
            _validate(model, state, validate, log_fn)
        if state.best_state is not None:
            model.load_state_dict(state.best_state)
    if checkpoint_fn is not None:
        checkpoint_fn(state, final=True)
    return PhaseResult(state.phase, state.losses, state.records, state.best_iter, state.best_score)


def _validate(model, state: PhaseState, validate, log_fn) -> None:
    score = validate()
    rec = {"phase": state.phase, "iter": state.iteration, "val_metric": float(score[0]),
           "val_tiebreak": float(score[1])}
    state.records.append(rec)
    if log_fn:
        log_fn(rec)
    if state.best_score is None or score < state.best_score:
        state.best_score = tuple(float(s) for s in score)
        state.best_iter = state.iteration
        state.best_state = model.state_dict()


def _run_phase(model, state: PhaseState, cfg: TrainConfig, step_fn, validate,
               log_fn, checkpoint_fn) -> PhaseResult:
    if validate is not None and state.iteration == 0 and state.best_score is None:
        _validate(model, state, validate, log_fn)
    while state.iteration < cfg.max_iter:
        state.optimizer.zero_grad()
        loss, parts = step_fn()
        ad.backward(loss)
        state.optimizer.step()
        state.iteration += 1
        value = float(loss.value)
        if not np.isfinite(value):
            raise FloatingPointError(f"{state.phase}: loss became {value} at iteration "
                                     f"{state.iteration}")
        state.losses.append(value)
        rec = {"phase": state.phase, "iter": state.iteration, "loss": value, **parts}
        state.records.append(rec)
        if log_fn:
            log_fn(rec)
        if validate is not None and cfg.val_interval and state.iteration % cfg.val_interval == 0:
            _validate(model, state, validate, log_fn)
        if checkpoint_fn is not None and cfg.checkpoint_interval \
                and state.iteration % cfg.checkpoint_interval == 0:
            checkpoint_fn(state, final=False)
    return _finish(model, state, cfg, validate, log_fn, checkpoint_fn)


class _TargetCache:
    """Memoized DTW path matrices for (i, j) sample pairs."""

    def __init__(self, series: Sequence[np.ndarray], window, metric):
        self.series, self.window, self.metric = series, window, metric
        self.cache: dict[tuple[int, int], np.ndarray] = {}

    def __call__(self, i: int, j: int) -> np.ndarray:
        key = (int(i), int(j))
        if key not in self.cache:
            self.cache[key] = dtw(self.series[i], self.series[j], self.window,
                                  self.metric)[1].matrix()
        return self.cache[key]


def _pretrain_loss(model: AttentionModel, series, batch: PairBatch, targets: _TargetCache,
                   training: bool) -> Node:
    pairs = [(series[i], series[j], i, j) for i, j in zip(batch.first, batch.second)]
    total = None
    for idx in _group_by_shape(pairs):
        a, b = _stack_pairs([pairs[k][0] for k in idx], [pairs[k][1] for k in idx])
        p_s, _, _ = model.correspondences(a, b, training)
        target = np.stack([targets(pairs[k][2], pairs[k][3]) for k in idx])
        term = ad.scale(loss_pretrain(p_s, target), len(idx) / len(pairs))
        total = term if total is None else ad.add(total, term)
    return total


def new_state(phase: str, model, cfg: TrainConfig) -> PhaseState:
    return PhaseState(phase, Adam(model.named_parameters(), lr=cfg.lr))


def run_pretrain(model: AttentionModel, train: Dataset, cfg: TrainConfig,
                 rng: np.random.Generator, val: Dataset | None = None,
                 log_fn: Logger | None = None, checkpoint_fn=None,
                 state: PhaseState | None = None, series=None,
                 val_series=None, pair_pool: PairBatch | None = None) -> PhaseResult:
    """Train the attention module to reproduce DTW path matrices.

    Pairs are drawn label-blind from ``train``, or from the fixed
    ``pair_pool`` when one is given (a batch at least as large as the pool
    uses the whole pool). With ``val`` given, the weights with the lowest
    validation pre-training loss are kept. ``series``/``val_series``
    override the raw sample values (plug-in use).
    """
    state = state or new_state("pretrain", model, cfg)
    series = series if series is not None else [s.values for s in train]
    targets = _TargetCache(series, cfg.window, cfg.metric)

    def draw() -> PairBatch:
        if pair_pool is None:
            return sample_any_pairs(len(series), rng, cfg.batch_size)
        n = len(pair_pool)
        idx = np.arange(n) if cfg.batch_size >= n else rng.choice(n, cfg.batch_size,
                                                                   replace=False)
        return PairBatch(pair_pool.first[idx], pair_pool.second[idx], pair_pool.same[idx])

    def step():
        return _pretrain_loss(model, series, draw(), targets, training=True), {}

    validate = None
    if val is not None or val_series is not None:
        vseries = val_series if val_series is not None else [s.values for s in val]
        vbatch = sample_any_pairs(len(vseries), np.random.default_rng(cfg.val_seed),
                                  cfg.val_pairs)
        vtargets = _TargetCache(vseries, cfg.window, cfg.metric)

        def validate():
            with ad.no_grad():
                value = float(_pretrain_loss(model, vseries, vbatch, vtargets, False).value)
            return (value, 0.0)

    return _run_phase(model, state, cfg, step, validate, log_fn, checkpoint_fn)


def _contrastive_loss(model: AttentionModel, series, batch: PairBatch, margin: float,
                      training: bool) -> tuple[Node, dict]:
    pairs = [(series[i], series[j], s) for i, j, s in zip(batch.first, batch.second, batch.same)]
    total = None
    same_sum = diff_sum = 0.0
    for idx in _group_by_shape(pairs):
        a, b = _stack_pairs([pairs[k][0] for k in idx], [pairs[k][1] for k in idx])
        same = np.array([pairs[k][2] for k in idx])
        p_s, p_t, _ = model.correspondences(a, b, training)
        terms = ad.add(
            contrastive_terms(reconstruction_error(a, p_s, b), same, margin),
            contrastive_terms(reconstruction_error(b, p_t, a), same, margin))
        same_sum += float(np.sum(terms.value[same]))
        diff_sum += float(np.sum(terms.value[~same]))
        term = ad.scale(ad.sum_all(terms), 1.0 / len(pairs))
        total = term if total is None else ad.add(total, term)
    n = len(pairs)
    return total, {"loss_same": same_sum / n, "loss_diff": diff_sum / n}


def knn_validation_score(model: AttentionModel, queries: Dataset, references: Dataset,
                         k: int = 1) -> tuple[float, float]:
    """(k-NN error of ``queries`` against ``references``, same/different distance ratio)."""
    dist = distance_matrix(model, queries, references)
    pred = knn_classify(dist, references.labels, k)
    err = float(np.mean(pred != queries.labels))
    same = queries.labels[:, None] == references.labels[None, :]
    ratio = float(dist[same].mean() / max(dist[~same].mean(), 1e-12)) if same.any() and (~same).any() else 0.0
    return err, ratio


def run_contrastive(model: AttentionModel, train: Dataset, cfg: TrainConfig,
                    rng: np.random.Generator, val: Dataset | None = None,
                    log_fn: Logger | None = None, checkpoint_fn=None,
                    state: PhaseState | None = None) -> PhaseResult:
    """Dual contrastive training; validation selects by k-NN error on ``val``."""
    state = state or new_state("contrastive", model, cfg)
    series = [s.values for s in train]

    def step():
        batch = sample_pairs(train.labels, rng, cfg.batch_size, cfg.ratio)
        return _contrastive_loss(model, series, batch, cfg.margin, training=True)

    validate = None
    if val is not None:
        def validate():
            return knn_validation_score(model, val, train, cfg.knn_k)

    return _run_phase(model, state, cfg, step, validate, log_fn, checkpoint_fn)


# --------------------------------------------------------------------------
# plug-in scenario
# --------------------------------------------------------------------------

class SiameseEncoder(Module):
    """Two stride-1 1-D convolutions (time axis) with a ReLU in between.

    Maps ``B x I x D`` to ``B x I x out_dim``; the length is unchanged.
    """

    def __init__(self, in_dim: int, out_dim: int = 4, hidden: int = 16, kernel: int = 5,
                 rng: np.random.Generator | None = None, dtype: str = "float32"):
        rng = rng if rng is not None else np.random.default_rng(0)
        dt = np.dtype(dtype)
        self.in_dim, self.out_dim, self.hidden, self.kernel = in_dim, out_dim, hidden, kernel
        self.dtype = dtype
        self.conv1 = Conv2d(in_dim, hidden, (kernel, 1), rng, dt)
        self.conv2 = Conv2d(hidden, out_dim, (kernel, 1), rng, dt)

    def config(self) -> dict:
        return {"in_dim": self.in_dim, "out_dim": self.out_dim, "hidden": self.hidden,
                "kernel": self.kernel, "dtype": self.dtype}

    def __call__(self, x) -> Node:
        x = x if isinstance(x, Node) else ad.Node(np.asarray(x, dtype=self.dtype))
        bsz, n, d = x.shape
        h = ad.reshape(ad.transpose2d(x), (bsz, d, n, 1))
        h = self.conv2(ad.relu(self.conv1(h)))
        return ad.transpose2d(ad.reshape(h, (bsz, self.out_dim, n)))

    def embed(self, series: Sequence[np.ndarray]) -> list[np.ndarray]:
        """Feature sequences for each series, computed without a graph."""
        out = []
        with ad.no_grad():
            for s in series:
                out.append(self(as_array(s)[None]).value[0].astype(np.float64))
        return out


def dtw_embedding_distance(fa: np.ndarray, fb: np.ndarray, window=None) -> float:
    """Mean squared local cost along the DTW path, per feature dimension."""
    total, path = dtw(fa, fb, window)
    return total / (len(path) * fa.shape[1])


def _path_selectors(paths, n: int, m: int):
    kmax = max(len(p) for p in paths)
    sa = np.zeros((len(paths), kmax, n))
    sb = np.zeros((len(paths), kmax, m))
    lengths = np.zeros(len(paths))
    for b, p in enumerate(paths):
        rows, cols = zip(*p.steps)
        sa[b, np.arange(len(p)), rows] = 1.0
        sb[b, np.arange(len(p)), cols] = 1.0
        lengths[b] = len(p)
    return sa, sb, lengths


def encoder_dtw_loss(encoder: SiameseEncoder, a: np.ndarray, b: np.ndarray, same,
                     margin: float, window=None) -> Node:
    """Contrastive loss on DTW-aligned embeddings (the path is held fixed)."""
    fa, fb = encoder(a), encoder(b)
    paths = [dtw(x, y, window)[1] for x, y in zip(fa.value, fb.value)]
    sa, sb, lengths = _path_selectors(paths, a.shape[1], b.shape[1])
    dt = fa.dtype
    diff = ad.sub(ad.matmul(ad.Node(sa.astype(dt)), fa), ad.matmul(ad.Node(sb.astype(dt)), fb))
    err = ad.mul(ad.frobenius_sq(diff, keep_batch=True),
                 (1.0 / (lengths * encoder.out_dim)).astype(dt))
    return ad.mean_all(contrastive_terms(err, same, margin))


@dataclass
class PluginConfig:
    step1: TrainConfig
    step2: TrainConfig
    step3: TrainConfig


@dataclass
class PluginResult:
    step1: PhaseResult
    step2: PhaseResult
    step3: PhaseResult
    encoder_digest_before_step3: str
    encoder_digest_after_step3: str


def parameter_digest(module: Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, p in sorted(module.named_parameters()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.value).tobytes())
    return h.hexdigest()


def _dtw_feature_scores(encoder: SiameseEncoder, ds: Dataset, n_refs: int, window):
    feats = {id(s): f for s, f in zip(ds, encoder.embed([s.values for s in ds]))}

    def dm(qs, rs):
        return np.array([[dtw_embedding_distance(feats[id(q)], feats[id(r)], window)
                          for r in rs] for q in qs])

    return verification_scores(ds, dm, n_refs)


def _attention_feature_scores(encoder: SiameseEncoder, model: AttentionModel, ds: Dataset,
                              n_refs: int):
    feats = {id(s): f for s, f in zip(ds, encoder.embed([s.values for s in ds]))}

    def dm(qs, rs):
        return distance_matrix(model, [feats[id(q)] for q in qs], [feats[id(r)] for r in rs])

    return verification_scores(ds, dm, n_refs)


def verification_eer_dtw(encoder: SiameseEncoder, ds: Dataset, n_refs: int = 5,
                         window=None) -> float:
    return eer(_dtw_feature_scores(encoder, ds, n_refs, window))


def verification_eer_attention(encoder: SiameseEncoder, model: AttentionModel, ds: Dataset,
                               n_refs: int = 5) -> float:
    return eer(_attention_feature_scores(encoder, model, ds, n_refs))


def verification_selection_score(scores) -> tuple[float, float]:
    """(EER, mean genuine score / mean forgery score); lower is better for both."""
    genuine = scores.scores[scores.genuine].mean()
    forgery = scores.scores[~scores.genuine].mean()
    return eer(scores), float(genuine / max(forgery, 1e-12))


def run_encoder_step(encoder: SiameseEncoder, train: Dataset, cfg: TrainConfig,
                     rng: np.random.Generator, val: Dataset | None = None,
                     log_fn: Logger | None = None, state: PhaseState | None = None,
                     checkpoint_fn=None) -> PhaseResult:
    """Step 1: train the encoder with standard DTW on its features."""
    state = state or PhaseState("plugin-step1", Adam(encoder.named_parameters(), lr=cfg.lr))

    def step():
        batch = sample_verification_pairs(train, rng, cfg.batch_size, cfg.ratio)
        a = np.stack([train[i].values for i in batch.first])
        b = np.stack([train[j].values for j in batch.second])
        return encoder_dtw_loss(encoder, a, b, batch.same, cfg.margin, cfg.window), {}

    validate = None
    if val is not None:
        def validate():
            scores = _dtw_feature_scores(encoder, val, cfg.n_refs, cfg.window)
            return verification_selection_score(scores)

    return _run_phase(encoder, state, cfg, step, validate, log_fn, checkpoint_fn)


def run_attention_on_features(encoder: SiameseEncoder, model: AttentionModel, train: Dataset,
                              cfg: TrainConfig, rng: np.random.Generator,
                              val: Dataset | None = None, log_fn: Logger | None = None,
                              state: PhaseState | None = None, checkpoint_fn=None) -> PhaseResult:
    """Step 3: contrastive training of the attention module on frozen encoder features.

    The encoder takes no gradient step, so its features are computed once.
    """
    state = state or PhaseState("plugin-step3", Adam(model.named_parameters(), lr=cfg.lr))
    feats = encoder.embed([s.values for s in train])

    def step():
        batch = sample_verification_pairs(train, rng, cfg.batch_size, cfg.ratio)
        return _contrastive_loss(model, feats, batch, cfg.margin, training=True)

    validate = None
    if val is not None:
        def validate():
            scores = _attention_feature_scores(encoder, model, val, cfg.n_refs)
            return verification_selection_score(scores)

    return _run_phase(model, state, cfg, step, validate, log_fn, checkpoint_fn)


def run_plugin_three_step(encoder: SiameseEncoder, model: AttentionModel, train: Dataset,
                          cfg: PluginConfig, rng: np.random.Generator,
                          val: Dataset | None = None, log_fn: Logger | None = None,
                          on_step: Callable[[int], None] | None = None) -> PluginResult:
    """Encoder first (DTW on features), then DTW-mimic pre-training of the
    attention module on feature pairs, then contrastive training of the
    attention module with the encoder frozen.

    ``on_step(k)`` is called after step ``k`` finishes (e.g. to evaluate).
    """
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(
        int(rng.integers(2 ** 63))).spawn(3)]
    r1 = run_encoder_step(encoder, train, cfg.step1, rngs[0], val, log_fn)
    if on_step:
        on_step(1)
    feats = encoder.embed([s.values for s in train])
    vfeats = encoder.embed([s.values for s in val]) if val is not None else None
    r2 = run_pretrain(model, train, cfg.step2, rngs[1], log_fn=log_fn,
                      state=PhaseState("plugin-step2", Adam(model.named_parameters(),
                                                            lr=cfg.step2.lr)),
                      series=feats, val_series=vfeats)
    if on_step:
        on_step(2)
    before = parameter_digest(encoder)
    r3 = run_attention_on_features(encoder, model, train, cfg.step3, rngs[2], val, log_fn)
    after = parameter_digest(encoder)
    if on_step:
        on_step(3)
    return PluginResult(r1, r2, r3, before, after)
