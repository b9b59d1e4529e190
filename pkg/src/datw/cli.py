"""Command-line entry point: ``datw <command> [options]``.

Commands
--------
synth     write synthetic datasets (UCR TSV or JSON)
pretrain  DTW-mimic pre-training of the attention module
train     contrastive training (optionally starting from a pre-trained checkpoint)
plugin    three-step plug-in schedule with a Siamese encoder
eval      k-NN error, EER or McNemar comparison for a checkpoint or the DTW baseline
dist      distance between two series, optionally dumping P_s / P_t

Exit codes: 0 success, 1 usage error, 2 data or configuration error,
3 numerical failure. Metrics are printed to stdout as ``key=value`` lines.
The default output directory is taken from ``DATW_OUTPUT_DIR`` (else ``runs``).
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import re
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import attention as at
from . import classic
from . import data as dd
from . import evaluate as ev
from . import train as tr

log = logging.getLogger("datw")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CONFIG_VERSION = 1
OUTPUT_ENV = "DATW_OUTPUT_DIR"

# child index of the root seed sequence used by each stochastic phase
RNG_STREAMS = {"split": 0, "init": 1, "pretrain": 2, "contrastive": 3, "plugin": 4,
               "encoder": 5}


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

def _phase_defaults(**over) -> dict:
    d = {"lr": 1e-4, "max_iter": 1000, "batch_size": 30, "ratio": [1, 2], "margin": 1.0,
         "val_interval": 100, "val_pairs": 32, "val_seed": 0, "knn_k": 1, "window": None,
         "metric": "sqeuclid", "checkpoint_interval": 0, "n_refs": 5}
    d.update(over)
    return d


DEFAULT_CONFIG = {
    "version": CONFIG_VERSION,
    "name": "run",
    "seed": 0,
    "output_dir": None,
    "data": {
        "train": None,
        "val": None,
        "test": None,
        "normalize": "zscore",
        "split": {"train": 0.8, "val": 0.2, "stratified": True},
    },
    "arch": at.ArchConfig().to_dict(),
    "pretrain": _phase_defaults(max_iter=1000),
    "contrastive": _phase_defaults(max_iter=10000),
    "plugin": {
        "encoder": {"out_dim": 4, "hidden": 16, "kernel": 5},
        "val_subjects": 0.2,
        "lr_grid": [0.1, 0.01, 0.001],
        "step1": _phase_defaults(max_iter=10000, margin=1.4),
        "step2": _phase_defaults(max_iter=1000, lr=1e-3),
        "step3": _phase_defaults(max_iter=10000, margin=1.4),
    },
}

# keys whose values are free-form (not checked against the defaults' structure)
_OPEN_KEYS = {"data.train", "data.val", "data.test", "output_dir", "plugin.lr_grid"}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and where not in _OPEN_KEYS:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def load_config(path: str | None, overrides: list[str]) -> dict:
    """Defaults, then the JSON file, then ``key.path=value`` overrides."""
    user = {}
    if path:
        try:
            user = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be an object")
        if user.get("version", CONFIG_VERSION) != CONFIG_VERSION:
            raise ConfigError(f"{path}: unsupported config version {user.get('version')!r}")
    cfg = _merge(DEFAULT_CONFIG, user)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        nested: dict = {}
        cur = nested
        parts = key.split(".")
        for p in parts[:-1]:
            cur = cur.setdefault(p, {})
        cur[parts[-1]] = value
        cfg = _merge(cfg, nested)
    return cfg


def config_digest(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def train_config(section: dict) -> tr.TrainConfig:
    try:
        return tr.TrainConfig(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid training settings: {exc}") from None


def arch_config(section: dict) -> at.ArchConfig:
    try:
        return at.ArchConfig.from_dict(section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid architecture: {exc}") from None


def root_rng(seed: int, stream: str) -> np.random.Generator:
    children = np.random.SeedSequence(int(seed)).spawn(len(RNG_STREAMS))
    return np.random.default_rng(children[RNG_STREAMS[stream]])


# --------------------------------------------------------------------------
# data and output helpers
# --------------------------------------------------------------------------

def read_dataset(path) -> dd.Dataset:
    if path is None:
        raise ConfigError("no dataset path given")
    p = Path(path)
    if not p.exists():
        raise dd.DataFormatError(f"{p}: no such file")
    if p.suffix.lower() == ".json":
        return dd.load_multivariate_json(p)
    return dd.load_ucr_tsv(p)


def write_dataset(ds: dd.Dataset, path: Path) -> None:
    if path.suffix.lower() == ".json":
        dd.save_multivariate_json(ds, path)
    else:
        dd.save_ucr_tsv(ds, path)


def normalize(ds: dd.Dataset, mode: str) -> dd.Dataset:
    if mode == "zscore":
        return dd.znormalize(ds)
    if mode == "zscore-dataset":
        return dd.znormalize(ds, per="dataset")
    if mode == "range":
        return dd.range_normalize(ds)
    if mode == "none":
        return ds
    raise ConfigError(f"unknown normalization {mode!r} "
                      f"(zscore, zscore-dataset, range, none)")


def train_val(cfg: dict) -> tuple[dd.Dataset, dd.Dataset | None]:
    dcfg = cfg["data"]
    train = normalize(read_dataset(dcfg["train"]), dcfg["normalize"])
    if dcfg["val"]:
        return train, normalize(read_dataset(dcfg["val"]), dcfg["normalize"])
    sp = dcfg["split"]
    if sp["val"] <= 0:
        return train, None
    seed = int(root_rng(cfg["seed"], "split").integers(2 ** 31))
    spec = dd.SplitSpec(sp["train"], sp["val"], seed, sp["stratified"])
    parts = dd.split(train, spec)
    return parts[0], parts[1]


def output_dir(cfg: dict) -> Path:
    out = cfg["output_dir"] or os.path.join(os.environ.get(OUTPUT_ENV, "runs"), cfg["name"])
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def atomic_json(path: Path, obj) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def emit_metrics(metrics: dict) -> None:
    for key in sorted(metrics):
        value = metrics[key]
        if isinstance(value, float):
            value = repr(value)
        print(f"{key}={value}")


class Run:
    """Output directory bookkeeping for one command invocation."""

    def __init__(self, cfg: dict, command: str):
        self.cfg = cfg
        self.command = command
        self.dir = output_dir(cfg)
        self.checkpoints: dict[str, list[str]] = {}
        atomic_json(self.dir / f"{command}_config.json", cfg)
        self.trace_path = self.dir / "trace.ndjson"

    def trace(self, record: dict) -> None:
        with open(self.trace_path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def add_checkpoint(self, phase: str, path: Path) -> None:
        self.checkpoints.setdefault(phase, [])
        if str(path) not in self.checkpoints[phase]:
            self.checkpoints[phase].append(str(path))

    def finish(self, metrics: dict) -> None:
        existing = {ph: [p for p in paths if Path(p).exists()]
                    for ph, paths in self.checkpoints.items()}
        path = self.dir / "manifest.json"
        manifest = {"commands": {}}
        if path.exists():
            try:
                manifest = json.loads(path.read_text())
            except json.JSONDecodeError:
                log.warning("replacing unreadable manifest %s", path)
        manifest.setdefault("commands", {})[self.command] = {
            "config": f"{self.command}_config.json",
            "config_digest": config_digest(self.cfg),
            "code_version": __version__,
            "checkpoints": existing,
            "metrics": metrics,
        }
        atomic_json(path, manifest)
        emit_metrics(metrics)


# --------------------------------------------------------------------------
# checkpoints with resumable phase state
# --------------------------------------------------------------------------

_ITER_RE = re.compile(r"_iter(\d+)\.ckpt$")


def latest_checkpoint(directory: Path, phase: str) -> Path | None:
    found = []
    for p in directory.glob(f"{phase}_iter*.ckpt"):
        m = _ITER_RE.search(p.name)
        if m:
            found.append((int(m.group(1)), p))
    return max(found)[1] if found else None


def save_phase_checkpoint(path: Path, model, state: tr.PhaseState, rng: np.random.Generator,
                          extra_meta: dict | None = None) -> None:
    meta = {"phase": state.phase, "iteration": state.iteration,
            "adam_step": state.optimizer.step_count,
            "best_iter": state.best_iter, "best_score": state.best_score,
            "rng_state": rng.bit_generator.state, **(extra_meta or {})}
    extra = state.optimizer.state_arrays()
    if state.best_state is not None:
        extra.update({f"best.{k}": v for k, v in state.best_state.items()})
    at.save_model(model, path, meta=meta, extra=extra)


def restore_phase(path: Path, model, state: tr.PhaseState, rng: np.random.Generator) -> None:
    loaded, meta, extra = at.load_model(path)
    if loaded.cfg != model.cfg:
        raise ConfigError(f"{path}: architecture {loaded.cfg} differs from configured {model.cfg}")
    model.load_state_dict(loaded.state_dict())
    state.iteration = int(meta["iteration"])
    state.optimizer.load_state_arrays(extra, int(meta["adam_step"]))
    state.best_iter = int(meta["best_iter"])
    state.best_score = tuple(meta["best_score"]) if meta["best_score"] is not None else None
    best = {k[5:]: v for k, v in extra.items() if k.startswith("best.")}
    if best:
        state.best_state = {k: v.astype(model.state_dict()[k].dtype) for k, v in best.items()}
    rng.bit_generator.state = meta["rng_state"]


def phase_checkpointer(run: Run, phase: str, model, rng: np.random.Generator):
    def save(state: tr.PhaseState, final: bool) -> None:
        if final:
            path = run.dir / f"{phase}.ckpt"
            at.save_model(model, path, meta={"phase": phase, "iteration": state.iteration,
                                             "best_iter": state.best_iter})
        else:
            path = run.dir / f"{phase}_iter{state.iteration}.ckpt"
            save_phase_checkpoint(path, model, state, rng)
        run.add_checkpoint(phase, path)
    return save


def load_attention(path) -> at.AttentionModel:
    try:
        model, _, _ = at.load_model(path)
    except OSError as exc:
        raise dd.DataFormatError(f"cannot read checkpoint {path}: {exc}") from None
    return model


def check_dims(model: at.AttentionModel, ds: dd.Dataset, what: str) -> None:
    if model.cfg.in_dim != ds.dim:
        raise ConfigError(f"checkpoint expects series with D={model.cfg.in_dim} "
                          f"(input tensor 2D={2 * model.cfg.in_dim}) but {what} has "
                          f"D={ds.dim} (series shape {ds[0].values.shape})")


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_synth(args) -> int:
    rng = np.random.default_rng(args.seed)
    if args.kind == "classes":
        ds = dd.synth_warped_classes(rng, args.classes, args.per_class, args.length,
                                     args.warp, args.noise, args.dim or 1)
    else:
        ds = dd.synth_subjects(rng, args.classes, args.genuine, args.forgeries, args.length,
                               args.forgery_weight, args.warp, args.noise, args.dim or 2)
    fmt = args.format or ("json" if args.kind == "subjects" or ds.dim > 1 else "tsv")
    if fmt == "tsv" and ds.dim > 1:
        raise ConfigError("TSV output holds univariate series only; use --format json")
    out = Path(args.out_dir or os.environ.get(OUTPUT_ENV, "."))
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    if args.split:
        fr = [float(x) for x in args.split.split(",")]
        if args.kind == "subjects":
            fr.append(max(0.0, 1.0 - sum(fr)))
            parts = dd.split_subjects(ds, fr)
        else:
            parts = dd.split(ds, dd.SplitSpec(fr[0], fr[1] if len(fr) > 1 else 1 - fr[0],
                                              seed=args.seed))
        for tag, part in zip(("TRAIN", "VAL", "TEST"), parts):
            if len(part):
                files[tag.lower()] = out / f"{args.name}_{tag}.{fmt}"
                write_dataset(part, files[tag.lower()])
    else:
        files["all"] = out / f"{args.name}.{fmt}"
        write_dataset(ds, files["all"])
    digests = {k: hashlib.sha256(p.read_bytes()).hexdigest() for k, p in files.items()}
    atomic_json(out / f"{args.name}_manifest.json", {
        "command": "synth", "code_version": __version__, "args": vars_clean(args),
        "files": {k: str(p) for k, p in files.items()}, "sha256": digests})
    metrics = {f"file_{k}": str(p) for k, p in files.items()}
    metrics.update(samples=len(ds), classes=len(ds.classes), length=args.length, dim=ds.dim)
    emit_metrics(metrics)
    return EXIT_OK


def vars_clean(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def _apply_phase_flags(target: dict, args) -> None:
    for flag in ("lr", "max_iter", "batch_size", "checkpoint_interval", "val_interval",
                 "margin"):
        value = getattr(args, flag, None)
        if value is not None:
            target[flag] = value


def _resolve(args, sections: list[list[str]]) -> dict:
    cfg = load_config(args.config, args.set or [])
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.train is not None:
        cfg["data"]["train"] = args.train
    if getattr(args, "val", None) is not None:
        cfg["data"]["val"] = args.val
    if args.out_dir is not None:
        cfg["output_dir"] = args.out_dir
    for path in sections:
        target = cfg
        for key in path:
            target = target[key]
        _apply_phase_flags(target, args)
    return cfg


def _model_for(cfg: dict, ds: dd.Dataset, init: str | None) -> at.AttentionModel:
    arch = dict(cfg["arch"])
    arch["in_dim"] = ds.dim
    if init:
        model = load_attention(init)
        check_dims(model, ds, "the training data")
        return model
    return at.AttentionModel(arch_config(arch), root_rng(cfg["seed"], "init"))


def _run_attention_phase(args, phase: str) -> int:
    cfg = _resolve(args, [[phase]])
    train, val = train_val(cfg)
    model = _model_for(cfg, train, getattr(args, "init", None))
    cfg["arch"] = model.cfg.to_dict()
    run = Run(cfg, phase)
    tcfg = train_config(cfg[phase])
    rng = root_rng(cfg["seed"], phase)
    state = tr.new_state(phase, model, tcfg)
    if args.resume:
        ckpt = latest_checkpoint(run.dir, phase)
        if ckpt is None:
            log.warning("no %s checkpoint in %s; starting fresh", phase, run.dir)
        else:
            restore_phase(ckpt, model, state, rng)
            run.add_checkpoint(phase, ckpt)
            log.info("resumed %s from %s at iteration %d", phase, ckpt, state.iteration)
    if state.iteration == 0:
        init_path = run.dir / f"{phase}_iter0.ckpt"
        save_phase_checkpoint(init_path, model, state, rng)
        run.add_checkpoint(phase, init_path)
    saver = phase_checkpointer(run, phase, model, rng)
    runner = tr.run_pretrain if phase == "pretrain" else tr.run_contrastive
    res = runner(model, train, tcfg, rng, val=val, log_fn=run.trace, checkpoint_fn=saver,
                 state=state)
    metrics = {"phase": phase, "iterations": state.iteration, "best_iter": res.best_iter,
               "final_loss": float(res.losses[-1]) if res.losses else float("nan")}
    if res.best_score is not None:
        metrics["best_val_metric"] = float(res.best_score[0])
    run.finish(metrics)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    return _run_attention_phase(args, "pretrain")


def cmd_train(args) -> int:
    return _run_attention_phase(args, "contrastive")


def cmd_plugin(args) -> int:
    cfg = _resolve(args, [["plugin", f"step{k}"] for k in (1, 2, 3)])
    if args.lr_grid is not None:
        cfg["plugin"]["lr_grid"] = [float(x) for x in args.lr_grid.split(",") if x.strip()]
    pcfg = cfg["plugin"]
    ds = normalize(read_dataset(cfg["data"]["train"]), cfg["data"]["normalize"])
    if any(s.genuine is None for s in ds):
        raise ConfigError("plug-in training needs verification data with genuine flags (JSON)")
    if cfg["data"]["val"]:
        train = ds
        val = normalize(read_dataset(cfg["data"]["val"]), cfg["data"]["normalize"])
    else:
        v = pcfg["val_subjects"]
        train, val = dd.split_subjects(ds, [1 - v, v])
    run = Run(cfg, "plugin")
    rng = root_rng(cfg["seed"], "plugin")
    seeds = np.random.SeedSequence(int(rng.integers(2 ** 63))).spawn(3)
    enc_cfg = pcfg["encoder"]
    arch = dict(cfg["arch"], in_dim=enc_cfg["out_dim"])
    grid = pcfg["lr_grid"] or [None]

    def new_encoder():
        return tr.SiameseEncoder(ds.dim, enc_cfg["out_dim"], enc_cfg["hidden"], enc_cfg["kernel"],
                                 rng=root_rng(cfg["seed"], "encoder"), dtype=cfg["arch"]["dtype"])

    def new_attention():
        return at.AttentionModel(arch_config(arch), root_rng(cfg["seed"], "init"))

    metrics = {}
    enc_path = run.dir / "plugin_step1_encoder.ckpt"
    if args.resume and enc_path.exists():
        encoder = new_encoder()
        header, arrays = at.load_checkpoint(enc_path)
        if header.get("encoder") != encoder.config():
            raise ConfigError(f"{enc_path}: encoder {header.get('encoder')} differs from "
                              f"configured {encoder.config()}")
        encoder.load_state_dict(arrays)
        metrics["step1_lr"] = header["meta"]["lr"]
        metrics["step1_val_eer"] = header["meta"]["val_eer"]
    else:
        best = None
        for lr in grid:
            enc = new_encoder()
            c1 = train_config(dict(pcfg["step1"], **({"lr": lr} if lr else {})))
            tr.run_encoder_step(enc, train, c1, np.random.default_rng(seeds[0]), val,
                                lambda r: run.trace(dict(r, lr=c1.lr)))
            score = tr.verification_eer_dtw(enc, val, c1.n_refs, c1.window)
            run.trace({"phase": "plugin-step1", "lr": c1.lr, "val_eer": score})
            if best is None or score < best[0]:
                best = (score, c1.lr, enc)
        metrics["step1_val_eer"], metrics["step1_lr"], encoder = best
        at.save_checkpoint(enc_path, {"kind": "encoder", "encoder": encoder.config(),
                                      "meta": {"lr": metrics["step1_lr"],
                                               "val_eer": metrics["step1_val_eer"]}},
                           encoder.state_dict())
    run.add_checkpoint("plugin-step1", enc_path)

    before = tr.parameter_digest(encoder)
    feats = encoder.embed([s.values for s in train])
    vfeats = encoder.embed([s.values for s in val])
    pre_path = run.dir / "plugin_step2.ckpt"
    if args.resume and pre_path.exists():
        pretrained = load_attention(pre_path)
    else:
        pretrained = new_attention()
        c2 = train_config(pcfg["step2"])
        tr.run_pretrain(pretrained, train, c2, np.random.default_rng(seeds[1]), log_fn=run.trace,
                        state=tr.PhaseState("plugin-step2", tr.Adam(pretrained.named_parameters(),
                                                                     lr=c2.lr)),
                        series=feats, val_series=vfeats)
        at.save_model(pretrained, pre_path, meta={"phase": "plugin-step2"})
    run.add_checkpoint("plugin-step2", pre_path)

    best = None
    for lr in grid:
        model = new_attention()
        model.load_state_dict(pretrained.state_dict())
        c3 = train_config(dict(pcfg["step3"], **({"lr": lr} if lr else {})))
        tr.run_attention_on_features(encoder, model, train, c3, np.random.default_rng(seeds[2]),
                                     val, lambda r: run.trace(dict(r, lr=c3.lr)))
        score = tr.verification_eer_attention(encoder, model, val, c3.n_refs)
        run.trace({"phase": "plugin-step3", "lr": c3.lr, "val_eer": score})
        if best is None or score < best[0]:
            best = (score, c3.lr, model)
    metrics["step3_val_eer"], metrics["step3_lr"], model = best
    final = run.dir / "plugin_step3.ckpt"
    at.save_model(model, final, meta={"phase": "plugin-step3", "lr": metrics["step3_lr"]})
    run.add_checkpoint("plugin-step3", final)
    metrics["encoder_frozen"] = str(before == tr.parameter_digest(encoder)).lower()
    run.finish(metrics)
    return EXIT_OK


def _distance_fn(args, in_dim: int):
    """Returns (name, fn(queries, references) -> matrix, model or None)."""
    if args.baseline == "dtw":
        def dm(qs, rs):
            return classic.pairwise(classic.dtw_distance, [dd.as_array(q) for q in qs],
                                    [dd.as_array(r) for r in rs], window=args.window,
                                    metric=args.metric)
        return "dtw", dm, None
    if not args.checkpoint:
        raise UsageError("give --checkpoint or --baseline dtw")
    model = load_attention(args.checkpoint)
    if model.cfg.in_dim != in_dim:
        raise ConfigError(f"checkpoint expects D={model.cfg.in_dim} (input tensor "
                          f"2D={2 * model.cfg.in_dim}) but the data has D={in_dim}")

    def dm(qs, rs):
        return at.distance_matrix(model, qs, rs, workers=args.workers)
    return "attention", dm, model


def _read_predictions(path) -> dict:
    out = {}
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if header[:3] != ["id", "true", "pred"]:
            raise dd.DataFormatError(f"{path}: expected header id,true,pred[,...]")
        for lineno, line in enumerate(fh, 2):
            fields = line.strip().split(",")
            if len(fields) < 3:
                raise dd.DataFormatError(f"{path}:{lineno}: expected at least 3 fields")
            out[fields[0]] = (fields[1], fields[2])
    return out


def cmd_eval(args) -> int:
    if not (args.knn or args.eer):
        raise UsageError("choose --knn K and/or --eer")
    if args.mcnemar and not args.knn:
        raise UsageError("--mcnemar compares k-NN predictions; add --knn K")
    norm = args.normalize
    test = normalize(read_dataset(args.test), norm)
    name, dm, model = _distance_fn(args, test.dim)
    out = Path(args.out_dir or os.environ.get(OUTPUT_ENV, "runs")) / "eval"
    out.mkdir(parents=True, exist_ok=True)
    metrics = {"distance": name}
    if args.knn:
        if not args.train:
            raise UsageError("--knn needs --train (reference set)")
        train = normalize(read_dataset(args.train), norm)
        if train.dim != test.dim:
            raise ConfigError(f"train D={train.dim} and test D={test.dim} differ")
        dist = np.asarray(dm(list(test), list(train)))
        pred = ev.knn_classify(dist, train.labels, args.knn)
        err = ev.error_rate(pred, test.labels)
        metrics.update(knn_k=args.knn, error_rate=err, n_test=len(test))
        with open(out / "predictions.csv", "w") as fh:
            fh.write("id,true,pred,correct\n")
            for s, p in zip(test, pred):
                fh.write(f"{s.id},{s.label},{p},{int(p == s.label)}\n")
        same = test.labels[:, None] == train.labels[None, :]
        if same.any() and (~same).any():
            hist = ev.histogram_export(dist[same], dist[~same], bins=args.bins)
            (out / "histograms.csv").write_text(hist.to_csv())
        if args.mcnemar:
            other = _read_predictions(args.mcnemar)
            missing = [s.id for s in test if s.id not in other]
            if missing:
                raise dd.DataFormatError(f"{args.mcnemar}: no prediction for ids {missing[:5]}")
            other_pred = [other[s.id][1] for s in test]
            truth = [str(s.label) for s in test]
            table = ev.ContingencyTable2x2.from_predictions(
                np.array(other_pred), np.array([str(p) for p in pred]), np.array(truth))
            res = ev.mcnemar_test(table, args.mcnemar_mode)
            (out / "mcnemar.txt").write_text(res.report() + "\n")
            metrics.update({f"mcnemar_{k}": v for k, v in
                            (line.split("=", 1) for line in res.report().splitlines())})
    if args.eer:
        scores = ev.verification_scores(test, dm, args.n_refs)
        metrics["eer"] = ev.eer(scores)
        (out / "scores.csv").write_text(ev.scores_csv(scores))
        g, f = scores.scores[scores.genuine], scores.scores[~scores.genuine]
        (out / "histograms_verification.csv").write_text(
            ev.histogram_export(g, f, bins=args.bins).to_csv())
    if args.dump_attn:
        if model is None:
            raise UsageError("--dump-attn needs an attention checkpoint")
        refs = normalize(read_dataset(args.train), norm) if args.train else test
        for spec in args.dump_attn:
            i, j = (int(x) for x in spec.split(":"))
            cm = at.attend(model, test[i].values, refs[j].values)
            at.dump_matrix_csv(out / f"attn_{i}_{j}_P_s.csv", cm.p_s, "P_s")
            at.dump_matrix_csv(out / f"attn_{i}_{j}_P_t.csv", cm.p_t, "P_t")
    emit_metrics(metrics)
    return EXIT_OK


def cmd_dist(args) -> int:
    a_ds = normalize(read_dataset(args.a), args.normalize)
    b_ds = normalize(read_dataset(args.b), args.normalize)
    a, b = a_ds[args.index_a], b_ds[args.index_b]
    if a.dim != b.dim:
        raise ConfigError(f"series dimensions differ: {a.values.shape} vs {b.values.shape}")
    name, dm, model = _distance_fn(args, a.dim)
    metrics = {"distance_kind": name, "distance": float(np.asarray(dm([a], [b]))[0, 0])}
    if args.dump_attn:
        if model is None:
            raise UsageError("--dump-attn needs an attention checkpoint")
        out = Path(args.dump_attn)
        out.mkdir(parents=True, exist_ok=True)
        cm = at.attend(model, a.values, b.values)
        at.dump_matrix_csv(out / "P_s.csv", cm.p_s, "P_s")
        at.dump_matrix_csv(out / "P_t.csv", cm.p_t, "P_t")
    emit_metrics(metrics)
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text):
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return value


def _training_flags(p):
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config entry, e.g. --set contrastive.margin=1.4")
    p.add_argument("--train", help="training data (UCR TSV or JSON)")
    p.add_argument("--val", help="validation data; default: split from --train")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", help=f"output directory (default ${OUTPUT_ENV}/<name>)")
    p.add_argument("--max-iter", type=_positive_int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=_positive_int)
    p.add_argument("--margin", type=float)
    p.add_argument("--val-interval", type=_positive_int)
    p.add_argument("--checkpoint-interval", type=_positive_int)
    p.add_argument("--resume", action="store_true",
                   help="continue from the latest checkpoint in the output directory")


def _distance_flags(p):
    p.add_argument("--checkpoint", help="attention checkpoint")
    p.add_argument("--baseline", choices=["dtw"], help="use classic DTW instead of a checkpoint")
    p.add_argument("--window", type=_positive_int, default=None, help="Sakoe-Chiba band width")
    p.add_argument("--metric", choices=list(classic.METRICS), default="sqeuclid")
    p.add_argument("--normalize", choices=["zscore", "zscore-dataset", "range", "none"],
                   default="zscore")
    p.add_argument("--workers", type=_positive_int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="datw", description=__doc__.split("\n\n")[0])
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write synthetic datasets")
    p.add_argument("--kind", choices=["classes", "subjects"], default="classes")
    p.add_argument("--classes", type=_positive_int, default=2,
                   help="number of classes (or subjects)")
    p.add_argument("--per-class", type=_positive_int, default=20)
    p.add_argument("--genuine", type=_positive_int, default=10)
    p.add_argument("--forgeries", type=_positive_int, default=10)
    p.add_argument("--forgery-weight", type=float, default=0.5)
    p.add_argument("--length", type=_positive_int, default=64)
    p.add_argument("--dim", type=_positive_int, default=None,
                   help="channels (default 1 for classes, 2 for subjects)")
    p.add_argument("--warp", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", help="fractions, e.g. 0.5,0.25 (remainder is test)")
    p.add_argument("--format", choices=["tsv", "json"])
    p.add_argument("--name", default="synth")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="DTW-mimic pre-training")
    _training_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="contrastive training")
    _training_flags(p)
    p.add_argument("--init", help="start from this checkpoint (e.g. pretrain.ckpt)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("plugin", help="three-step plug-in training")
    _training_flags(p)
    p.add_argument("--lr-grid", help="comma-separated learning rates for steps 1 and 3 "
                                     "(empty string: use the configured lr)")
    p.set_defaults(func=cmd_plugin)

    p = sub.add_parser("eval", help="evaluate a checkpoint or the DTW baseline")
    _distance_flags(p)
    p.add_argument("--train", help="reference set for k-NN")
    p.add_argument("--test", required=True)
    p.add_argument("--knn", type=_positive_int, metavar="K")
    p.add_argument("--eer", action="store_true")
    p.add_argument("--n-refs", type=_positive_int, default=5)
    p.add_argument("--mcnemar", metavar="PREDICTIONS_CSV",
                   help="compare with another method's predictions.csv")
    p.add_argument("--mcnemar-mode", choices=["exact", "corrected_chi2"], default="exact")
    p.add_argument("--bins", type=_positive_int, default=30)
    p.add_argument("--dump-attn", action="append", metavar="I:J",
                   help="write P_s/P_t for test sample I against reference J")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dist", help="distance between two series")
    _distance_flags(p)
    p.add_argument("a", help="file holding series A")
    p.add_argument("b", help="file holding series B")
    p.add_argument("--index-a", type=_positive_int, default=0)
    p.add_argument("--index-b", type=_positive_int, default=0)
    p.add_argument("--dump-attn", metavar="DIR", help="write P_s.csv and P_t.csv here")
    p.set_defaults(func=cmd_dist)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"datw: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"datw: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, dd.DataFormatError, ValueError, KeyError, OSError) as exc:
        print(f"datw: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
