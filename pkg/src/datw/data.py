"""Time series containers, file loaders, preprocessing and synthetic data."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class DataFormatError(ValueError):
    """Raised when an input file is malformed; the message carries the location."""


@dataclass(frozen=True)
class TimeSeries:
    """An ``I x D`` real-valued sequence with optional metadata.

    ``genuine`` is only used by verification data (``None`` elsewhere).
    """

    values: np.ndarray
    label: int | None = None
    id: str | None = None
    genuine: bool | None = None

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.ndim != 2:
            raise ValueError(f"time series must be I x D, got shape {arr.shape}")
        if arr.shape[0] < 2 or arr.shape[1] < 1:
            raise ValueError(f"time series needs I >= 2 and D >= 1, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"time series {self.id!r} contains NaN or Inf")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def with_values(self, values: np.ndarray) -> "TimeSeries":
        return replace(self, values=values)


def as_array(x) -> np.ndarray:
    """Return an ``I x D`` float array for a TimeSeries or array-like."""
    if isinstance(x, TimeSeries):
        return x.values
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError(f"expected an I x D array, got shape {arr.shape}")
    return arr


@dataclass
class Dataset:
    samples: list[TimeSeries]
    name: str = "dataset"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.samples:
            dims = {s.dim for s in self.samples}
            if len(dims) != 1:
                raise ValueError(f"dataset {self.name!r} mixes channel counts {sorted(dims)}")

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)

    @property
    def dim(self) -> int:
        return self.samples[0].dim

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples])

    @property
    def classes(self) -> list:
        return sorted({s.label for s in self.samples})

    def subset(self, indices: Iterable[int], name: str | None = None) -> "Dataset":
        return Dataset([self.samples[i] for i in indices], name or self.name, dict(self.meta))

    def map(self, fn) -> "Dataset":
        return Dataset([s.with_values(fn(s.values)) for s in self.samples], self.name,
                       dict(self.meta))

    def stacked(self) -> np.ndarray:
        """N x I x D array; requires equal lengths."""
        lengths = {s.length for s in self.samples}
        if len(lengths) != 1:
            raise ValueError(f"samples have differing lengths {sorted(lengths)}")
        return np.stack([s.values for s in self.samples])


# --------------------------------------------------------------------------
# loaders
# --------------------------------------------------------------------------

def load_ucr_tsv(path) -> Dataset:
    """Read a UCR-style file: one series per line, integer label first."""
    path = Path(path)
    samples = []
    width = None
    with open(path, encoding="ascii") as fh:
        for lineno, line in enumerate(fh, 1):
            fields = line.replace(",", " ").split()
            if not fields:
                continue
            try:
                label_f = float(fields[0])
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: non-numeric label {fields[0]!r}") from None
            if label_f != int(label_f):
                raise DataFormatError(f"{path}:{lineno}: label {fields[0]!r} is not an integer")
            try:
                values = np.array([float(v) for v in fields[1:]])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: non-numeric value ({exc})") from None
            if len(values) < 2:
                raise DataFormatError(f"{path}:{lineno}: need at least two values")
            if width is None:
                width = len(values)
            elif len(values) != width:
                raise DataFormatError(f"{path}:{lineno}: ragged row ({len(values)} values, "
                                      f"expected {width})")
            if not np.all(np.isfinite(values)):
                raise DataFormatError(f"{path}:{lineno}: NaN or Inf value")
            samples.append(TimeSeries(values, int(label_f), f"{path.stem}:{lineno}"))
    if not samples:
        raise DataFormatError(f"{path}: empty file")
    return Dataset(samples, path.stem)


def save_ucr_tsv(ds: Dataset, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for s in ds:
            if s.dim != 1:
                raise ValueError("UCR TSV holds univariate series only")
            row = [str(int(s.label))] + [repr(float(v)) for v in s.values[:, 0]]
            fh.write("\t".join(row) + "\n")


def load_multivariate_json(path) -> Dataset:
    """Read ``[{"label":..., "id":..., "channels": [[...], ...]}, ...]``."""
    path = Path(path)
    try:
        records = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(records, list) or not records:
        raise DataFormatError(f"{path}: expected a non-empty array of records")
    samples = []
    for k, rec in enumerate(records):
        where = f"{path}: record {k}"
        if not isinstance(rec, dict) or "label" not in rec:
            raise DataFormatError(f"{where}: missing 'label'")
        channels = rec.get("channels")
        if not isinstance(channels, list) or not channels:
            raise DataFormatError(f"{where}: missing or empty 'channels'")
        lengths = {len(c) for c in channels}
        if len(lengths) != 1:
            raise DataFormatError(f"{where}: unequal channel lengths {sorted(lengths)}")
        try:
            values = np.array(channels, dtype=np.float64).T
            ts = TimeSeries(values, int(rec["label"]), rec.get("id", f"{path.stem}:{k}"),
                            rec.get("genuine"))
        except (TypeError, ValueError) as exc:
            raise DataFormatError(f"{where}: {exc}") from None
        samples.append(ts)
    try:
        return Dataset(samples, path.stem)
    except ValueError as exc:
        raise DataFormatError(f"{path}: {exc}") from None


def save_multivariate_json(ds: Dataset, path) -> None:
    records = []
    for s in ds:
        rec = {"label": int(s.label), "id": s.id,
               "channels": [[float(v) for v in s.values[:, d]] for d in range(s.dim)]}
        if s.genuine is not None:
            rec["genuine"] = bool(s.genuine)
        records.append(rec)
    Path(path).write_text(json.dumps(records))


# --------------------------------------------------------------------------
# preprocessing (all per sample unless stated)
# --------------------------------------------------------------------------

def znormalize(ds: Dataset, eps: float = 1e-8, per: str = "sample") -> Dataset:
    """Standardize each channel to zero mean, unit variance.

    ``per="sample"`` (default) uses each series' own statistics;
    ``per="dataset"`` pools statistics per channel over the whole set.
    Channels with standard deviation below ``eps`` map to zeros.
    """
    if per == "sample":
        def fn(x):
            mu = x.mean(axis=0)
            sd = x.std(axis=0)
            return np.where(sd > eps, (x - mu) / np.where(sd > eps, sd, 1.0), 0.0)
        return ds.map(fn)
    if per == "dataset":
        allv = np.concatenate([s.values for s in ds])
        mu, sd = allv.mean(axis=0), allv.std(axis=0)
        safe = np.where(sd > eps, sd, 1.0)
        return ds.map(lambda x: np.where(sd > eps, (x - mu) / safe, 0.0))
    raise ValueError(f"per must be 'sample' or 'dataset', got {per!r}")


def range_normalize(ds: Dataset, lo: float = -1.0, hi: float = 1.0) -> Dataset:
    if not lo < hi:
        raise ValueError(f"need lo < hi, got {lo}, {hi}")

    def fn(x):
        mn, mx = x.min(axis=0), x.max(axis=0)
        span = mx - mn
        flat = span == 0
        scaled = lo + (x - mn) * (hi - lo) / np.where(flat, 1.0, span)
        return np.where(flat, 0.5 * (lo + hi), scaled)

    return ds.map(fn)


def resample_linear(x, target_len: int):
    """Piecewise-linear resampling to ``target_len`` frames (endpoints kept)."""
    if target_len < 2:
        raise ValueError(f"target_len must be >= 2, got {target_len}")
    arr = as_array(x)
    n = arr.shape[0]
    if n == target_len:
        out = arr.copy()
    else:
        pos = np.linspace(0.0, n - 1, target_len)
        grid = np.arange(n)
        out = np.stack([np.interp(pos, grid, arr[:, d]) for d in range(arr.shape[1])], axis=1)
        out[0], out[-1] = arr[0], arr[-1]
    return x.with_values(out) if isinstance(x, TimeSeries) else out


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.8
    val: float = 0.2
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        if self.train < 0 or self.val < 0 or self.train + self.val > 1 + 1e-12:
            raise ValueError(f"invalid split fractions train={self.train}, val={self.val}")


def _split_counts(n: int, spec: SplitSpec) -> tuple[int, int, int]:
    test_frac = max(0.0, 1.0 - spec.train - spec.val)
    n_val = int(round(spec.val * n))
    n_test = int(round(test_frac * n))
    n_train = n - n_val - n_test
    if n_train < 1 and n > 0 and spec.train > 0:
        # a lone sample (or rounding) never leaves the training part empty
        take = 1 - n_train
        if n_test >= take:
            n_test -= take
        else:
            n_val -= take - n_test
            n_test = 0
        n_train = 1
    return n_train, n_val, n_test


def split(ds: Dataset, spec: SplitSpec):
    """Partition into (train, val) or, when fractions leave a remainder, (train, val, test)."""
    rng = np.random.default_rng(spec.seed)
    parts: list[list[int]] = [[], [], []]
    if spec.stratified:
        labels = ds.labels
        groups = [np.flatnonzero(labels == c) for c in ds.classes]
    else:
        groups = [np.arange(len(ds))]
    for idx in groups:
        idx = rng.permutation(idx)
        n_train, n_val, _ = _split_counts(len(idx), spec)
        parts[0].extend(idx[:n_train])
        parts[1].extend(idx[n_train:n_train + n_val])
        parts[2].extend(idx[n_train + n_val:])
    names = ("train", "val", "test")
    out = [ds.subset(sorted(int(i) for i in p), f"{ds.name}-{nm}") for p, nm in zip(parts, names)]
    if spec.train + spec.val >= 1 - 1e-12:
        return out[0], out[1]
    return tuple(out)


# --------------------------------------------------------------------------
# synthetic data
# --------------------------------------------------------------------------

def _prototype(rng: np.random.Generator, dim: int, n_waves: int = 3):
    """Random smooth function on [0, 1]: per channel a sum of sinusoids."""
    freqs = rng.uniform(0.5, 3.0, size=(dim, n_waves))
    phases = rng.uniform(0, 2 * np.pi, size=(dim, n_waves))
    amps = rng.uniform(0.5, 1.5, size=(dim, n_waves))

    def f(t):
        t = np.asarray(t)[:, None, None]
        return np.sum(amps * np.sin(2 * np.pi * freqs * t + phases), axis=-1)

    return f


def random_warp(rng: np.random.Generator, length: int, strength: float,
                n_knots: int = 4) -> np.ndarray:
    """Monotone map of [0, 1] onto itself sampled at ``length`` points.

    Built as the normalized cumulative sum of positive increments
    ``exp(strength * s(t))`` where ``s`` is a smooth random curve.
    """
    t = np.linspace(0.0, 1.0, length)
    knots = rng.standard_normal(n_knots)
    smooth = np.interp(t, np.linspace(0, 1, n_knots), knots)
    inc = np.exp(strength * smooth)
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (inc[1:] + inc[:-1]))])
    return cum / cum[-1]


def synth_warped_classes(rng: np.random.Generator, n_classes: int, n_per_class: int,
                         length: int, warp_strength: float = 1.0, noise: float = 0.1,
                         dim: int = 1) -> Dataset:
    """Classes of randomly time-warped, noisy copies of smooth prototypes."""
    if min(n_classes, n_per_class, length) < 1 or warp_strength < 0 or noise < 0:
        raise ValueError("synth_warped_classes needs positive sizes and non-negative "
                         "warp_strength/noise")
    protos = [_prototype(rng, dim) for _ in range(n_classes)]
    samples = []
    for c, f in enumerate(protos):
        for k in range(n_per_class):
            tau = random_warp(rng, length, warp_strength)
            x = f(tau) + noise * rng.standard_normal((length, dim))
            samples.append(TimeSeries(x, c, f"c{c}-{k}"))
    return Dataset(samples, "synth-warped")


def synth_subjects(rng: np.random.Generator, n_subjects: int, genuine_per: int,
                   forgery_per: int, length: int, forgery_weight: float = 0.5,
                   warp_strength: float = 1.0, noise: float = 0.1,
                   dim: int = 2) -> Dataset:
    """Toy verification data: genuine samples and skilled-style forgeries per subject.

    A forgery of subject ``s`` is a warped, noised copy of
    ``(1 - w) * proto_s + w * proto_t`` for a random other subject ``t``.
    """
    if n_subjects < 2:
        raise ValueError("synth_subjects needs at least two subjects")
    if not 0.0 <= forgery_weight <= 1.0:
        raise ValueError(f"forgery_weight must lie in [0, 1], got {forgery_weight}")
    protos = [_prototype(rng, dim) for _ in range(n_subjects)]
    samples = []
    for s, f in enumerate(protos):
        for k in range(genuine_per):
            tau = random_warp(rng, length, warp_strength)
            x = f(tau) + noise * rng.standard_normal((length, dim))
            samples.append(TimeSeries(x, s, f"s{s}-g{k}", True))
        for k in range(forgery_per):
            other = int(rng.integers(n_subjects - 1))
            other += other >= s
            g = protos[other]
            tau = random_warp(rng, length, warp_strength)
            x = ((1 - forgery_weight) * f(tau) + forgery_weight * g(tau)
                 + noise * rng.standard_normal((length, dim)))
            samples.append(TimeSeries(x, s, f"s{s}-f{k}", False))
    return Dataset(samples, "synth-subjects")


def split_subjects(ds: Dataset, fractions: Sequence[float]) -> list[Dataset]:
    """Split by subject in label order (first subjects train, as in verification protocols)."""
    subjects = ds.classes
    n = len(subjects)
    bounds = np.round(np.cumsum([0.0, *fractions]) * n).astype(int)
    bounds[-1] = min(bounds[-1], n)
    out = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        keep = set(subjects[a:b])
        out.append(ds.subset([i for i, s in enumerate(ds) if s.label in keep],
                             f"{ds.name}-{a}:{b}"))
    return out
