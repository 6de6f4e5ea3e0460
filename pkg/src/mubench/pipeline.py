"""Four-phase benchmark pipeline over one output directory.

Phase 1 splits the data, phase 2 trains the original/retrained reference
pair per seed, phase 3 sweeps and finalizes each unlearning method, and
phase 4 evaluates everything into the report tables.  A manifest records
every artifact with its content hash plus per-phase completion flags, so
each phase can refuse to run before its inputs exist and reruns without
--force are byte-exact no-ops.

All randomness is derived from named streams of the config seeds, and with
rte_clock "steps" every number in the evaluation CSV is a pure function of
the config, so two runs of the same config produce identical bytes.
"""

from __future__ import annotations

import json
import math
import os
import platform
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .attacks import (
    build_shadow_ensemble,
    consistent_unforgettability,
    make_loss_pair,
    per_sample_losses,
    ulira,
    umia,
    umia_with_predictions,
)
from .config import BenchConfig, config_hash
from .data import (
    Corpus,
    SplitSet,
    load_cifar,
    load_idx,
    make_splits,
    normalize_images,
    read_splits,
    synth_blobs,
    write_splits,
)
from .errors import (
    AllTrialsFailed,
    ConfigError,
    MissingArtifacts,
    MubenchError,
    PhaseOrderError,
)
from .methods import CostMeter, TrainRecipe, UnlearnRequest, run_method
from .methods.common import train_classifier
from .metrics import (
    AccuracyBundle,
    EvalRecord,
    accuracy_bundle,
    discernibility,
    l2_distance,
    mean_by_method,
    retention,
    rte,
    sweep_losses,
    write_eval_csv,
    write_eval_jsonl,
)
from .ranking import (
    GroupAssignment,
    cluster_groups,
    count_groups,
    pareto_frontier,
    rank_methods,
)
from .rng import stream
from .sweep import SearchSpace, TrialEval, run_sweep, select_best
from .zoo import (
    ArchitectureDescriptor,
    Model,
    checkpoint_hash,
    load_checkpoint,
    mlp_descriptor,
    save_checkpoint,
)

MANIFEST_NAME = "manifest.json"

# manifest updates are load-modify-save; concurrent per-method phases share
# this lock so no flag write is lost
_MANIFEST_LOCK = threading.Lock()


class Workspace:
    """Path layout of one output directory."""

    def __init__(self, out_dir):
        self.root = Path(out_dir)

    @property
    def manifest(self) -> Path:
        return self.root / MANIFEST_NAME

    @property
    def splits(self) -> Path:
        return self.root / "splits.txt"

    def original_ckpt(self, seed: int) -> Path:
        return self.root / "refs" / f"original_s{seed}.ckpt"

    def retrain_ckpt(self, seed: int) -> Path:
        return self.root / "refs" / f"retrain_s{seed}.ckpt"

    def sweep_log(self, method: str) -> Path:
        return self.root / "sweeps" / f"{method}.jsonl"

    def best_json(self, method: str) -> Path:
        return self.root / "sweeps" / f"{method}_best.json"

    def unlearn_ckpt(self, method: str, seed: int) -> Path:
        return self.root / "unlearned" / f"{method}_s{seed}.ckpt"

    def unlearn_meta(self, method: str) -> Path:
        return self.root / "unlearned" / f"{method}.json"

    def lira_json(self, method: str) -> Path:
        return self.root / f"lira_{method}.json"

    @property
    def eval_csv(self) -> Path:
        return self.root / "eval.csv"

    @property
    def eval_jsonl(self) -> Path:
        return self.root / "eval.jsonl"

    @property
    def summary_json(self) -> Path:
        return self.root / "summary.json"

    @property
    def l2_csv(self) -> Path:
        return self.root / "l2.csv"

    @property
    def groups_json(self) -> Path:
        return self.root / "groups.json"

    @property
    def rank_csv(self) -> Path:
        return self.root / "rank.csv"

    @property
    def frontier_csv(self) -> Path:
        return self.root / "frontier.csv"

    @property
    def unforgettability_json(self) -> Path:
        return self.root / "unforgettability.json"

    @property
    def report_txt(self) -> Path:
        return self.root / "report.txt"

    @property
    def report_json(self) -> Path:
        return self.root / "report.json"

    @property
    def means_csv(self) -> Path:
        return self.root / "means.csv"


@dataclass
class RunManifest:
    """Completion flags and hashed artifact index for one workspace."""

    config_hash: str
    version: str = __version__
    host: dict = field(default_factory=dict)
    phases: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    dataset: dict = field(default_factory=dict)

    def __post_init__(self):
        base = {"prepare": False, "train_refs": False, "sweep": {}, "unlearn": {},
                "attack_lira": {}, "evaluate": False, "report": False}
        base.update(self.phases)
        self.phases = base

    def to_json_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "version": self.version,
            "host": self.host,
            "phases": self.phases,
            "artifacts": self.artifacts,
            "timings": self.timings,
            "dataset": self.dataset,
        }

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json_dict(), sort_keys=True, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "RunManifest":
        try:
            doc = json.loads(Path(path).read_text())
            return cls(
                config_hash=doc["config_hash"],
                version=doc.get("version", ""),
                host=dict(doc.get("host", {})),
                phases=dict(doc.get("phases", {})),
                artifacts=dict(doc.get("artifacts", {})),
                timings=dict(doc.get("timings", {})),
                dataset=dict(doc.get("dataset", {})),
            )
        except (OSError, ValueError, KeyError) as exc:
            raise MissingArtifacts(f"unreadable manifest {path}: {exc}") from exc


def _host_fingerprint() -> dict:
    return {
        "platform": platform.platform(),
        "python": platform.python_version(),
        "machine": platform.machine(),
        "cpus": os.cpu_count() or 1,
    }


def _file_sha256(path) -> str:
    return checkpoint_hash(path)


def _record_artifact(man: RunManifest, ws: Workspace, key: str, path: Path):
    man.artifacts[key] = {
        "path": str(path.relative_to(ws.root)),
        "sha256": _file_sha256(path),
    }


def _drop_artifacts(man: RunManifest, prefixes):
    man.artifacts = {
        k: v for k, v in man.artifacts.items()
        if not any(k == p or k.startswith(p) for p in prefixes)
    }


def check_artifacts(ws: Workspace, man: RunManifest, prefixes=None):
    """Verify that manifest-listed artifacts exist with their recorded hashes."""
    for key, entry in sorted(man.artifacts.items()):
        if prefixes is not None and not any(key == p or key.startswith(p) for p in prefixes):
            continue
        path = ws.root / entry["path"]
        if not path.exists():
            raise MissingArtifacts(f"artifact {key} missing: {path}")
        if _file_sha256(path) != entry["sha256"]:
            raise MissingArtifacts(f"artifact {key} changed on disk: {path}")


def _require(flag: bool, message: str):
    if not flag:
        raise PhaseOrderError(message)


def _load_manifest(ws: Workspace, cfg: BenchConfig) -> RunManifest:
    if not ws.manifest.exists():
        raise PhaseOrderError(f"no manifest in {ws.root}; run prepare first")
    man = RunManifest.load(ws.manifest)
    if man.config_hash != config_hash(cfg):
        raise ConfigError(
            f"{ws.root} was prepared under a different config "
            f"({man.config_hash[:12]} != {config_hash(cfg)[:12]}); "
            "use a fresh out_dir or rerun prepare --force"
        )
    return man


def _update_manifest(ws: Workspace, cfg: BenchConfig, mutate):
    """Serialized load-modify-save so concurrent method phases keep all flags."""
    with _MANIFEST_LOCK:
        man = _load_manifest(ws, cfg)
        mutate(man)
        man.save(ws.manifest)


# --- data and model construction ---------------------------------------------


_MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def _existing_file(base: Path, name: str) -> Path:
    for cand in (base / name, base / (name + ".gz")):
        if cand.exists():
            return cand
    raise ConfigError(f"missing dataset file {base / name} (or .gz)")


def load_corpus(cfg: BenchConfig):
    """Build the (dev, test) corpora for the configured dataset, already
    standardized per channel; test is None when the dev corpus is split."""
    if cfg.dataset == "synth_blobs":
        dev = synth_blobs(cfg.n_samples, cfg.n_classes, dim=cfg.dim,
                          separation=cfg.separation, seed=cfg.data_seed,
                          label_noise=cfg.label_noise)
        test = None
    elif cfg.dataset == "mnist":
        base = Path(cfg.data_path)
        dev = load_idx(_existing_file(base, _MNIST_FILES["train_images"]),
                       _existing_file(base, _MNIST_FILES["train_labels"]),
                       name="mnist", class_count=10)
        test = load_idx(_existing_file(base, _MNIST_FILES["test_images"]),
                        _existing_file(base, _MNIST_FILES["test_labels"]),
                        name="mnist_test", class_count=10)
    elif cfg.dataset == "cifar10":
        base = Path(cfg.data_path)
        dev = load_cifar([_existing_file(base, f"data_batch_{i}.bin") for i in range(1, 6)])
        test = load_cifar(_existing_file(base, "test_batch.bin"), name="cifar10_test")
    else:
        base = Path(cfg.data_path)
        dev = load_cifar(_existing_file(base, "train.bin"), fine_labels=True)
        test = load_cifar(_existing_file(base, "test.bin"), fine_labels=True, name="cifar100_test")

    mean = dev.images.mean(axis=(0, 2, 3))
    # dividing the deviations by input_contrast leaves channels at
    # std == input_contrast instead of exactly 1
    std = np.maximum(dev.images.std(axis=(0, 2, 3)), 1e-12) / cfg.input_contrast
    dev.images = normalize_images(dev.images, mean, std)
    if test is not None:
        test.images = normalize_images(test.images, mean, std)
    return dev, test


def build_descriptor(cfg: BenchConfig, corpus: Corpus) -> ArchitectureDescriptor:
    if cfg.arch == "mlp":
        return mlp_descriptor(corpus.input_shape, corpus.class_count,
                              hidden_widths=cfg.hidden_widths)
    return ArchitectureDescriptor(
        kind="small_cnn",
        input_shape=corpus.input_shape,
        class_count=corpus.class_count,
        conv_channels=cfg.conv_channels,
        hidden_widths=cfg.hidden_widths,
        pool=cfg.pool,
    )


def build_recipe(cfg: BenchConfig) -> TrainRecipe:
    return TrainRecipe(
        epochs=cfg.epochs,
        learning_rate=cfg.lr,
        batch_size=cfg.batch_size,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
        augment=cfg.augment,
    )


@dataclass
class BenchData:
    """Corpus plus materialized per-split (x, y) arrays."""

    corpus: Corpus
    splits: SplitSet
    retain: tuple
    forget: tuple
    val: tuple
    test: tuple
    train: tuple


def load_bench_data(cfg: BenchConfig, ws: Workspace) -> BenchData:
    dev, test_corpus = load_corpus(cfg)
    splits = read_splits(ws.splits)
    test = (test_corpus.images, test_corpus.labels) if splits.separate_test else dev.gather(splits.test)
    return BenchData(
        corpus=dev,
        splits=splits,
        retain=dev.gather(splits.retain),
        forget=dev.gather(splits.forget),
        val=dev.gather(splits.val),
        test=test,
        train=dev.gather(splits.train_indices()),
    )


# --- phase 1: prepare ---------------------------------------------------------


def cmd_prepare(cfg: BenchConfig, force: bool = False) -> int:
    """Split the dataset and initialize the manifest."""
    ws = Workspace(cfg.out_dir)
    if ws.manifest.exists():
        man = RunManifest.load(ws.manifest)
        if man.config_hash == config_hash(cfg) and man.phases["prepare"] and not force:
            return 0
        if man.config_hash != config_hash(cfg) and not force:
            raise ConfigError(
                f"{ws.root} already holds a run with a different config; "
                "use --force to start over or pick a fresh out_dir"
            )
    ws.root.mkdir(parents=True, exist_ok=True)
    dev, test_corpus = load_corpus(cfg)
    splits = make_splits(dev, test_corpus, seed=cfg.split_seed)
    write_splits(splits, ws.splits)
    man = RunManifest(config_hash=config_hash(cfg), host=_host_fingerprint())
    man.dataset = {
        "name": dev.name,
        "classes": dev.class_count,
        "input_shape": list(dev.input_shape),
        "sizes": {"retain": len(splits.retain), "forget": len(splits.forget),
                  "val": len(splits.val), "test": len(splits.test)},
        "separate_test": splits.separate_test,
    }
    _record_artifact(man, ws, "splits", ws.splits)
    man.phases["prepare"] = True
    man.save(ws.manifest)
    return 0


# --- phase 2: reference models --------------------------------------------------


def cmd_train_refs(cfg: BenchConfig, force: bool = False) -> int:
    """Train the original and retrained model pair for every seed."""
    ws = Workspace(cfg.out_dir)
    man = _load_manifest(ws, cfg)
    _require(man.phases["prepare"], "train-refs needs prepare to have run")
    if man.phases["train_refs"] and not force:
        return 0
    check_artifacts(ws, man, prefixes=("splits",))
    data = load_bench_data(cfg, ws)
    descriptor = build_descriptor(cfg, data.corpus)
    recipe = build_recipe(cfg)
    ws.original_ckpt(0).parent.mkdir(parents=True, exist_ok=True)

    from .zoo import init_model

    timings = {}
    artifacts = {}
    for s in cfg.seeds:
        for role, arrays, path in (
            ("original", data.train, ws.original_ckpt(s)),
            ("retrain", data.retain, ws.retrain_ckpt(s)),
        ):
            meter = CostMeter()
            t0 = time.perf_counter()
            try:
                model = train_classifier(init_model(descriptor, seed=s), arrays[0], arrays[1],
                                         recipe, stream(s, "train"), meter)
            except MubenchError as exc:
                raise type(exc)(f"reference training failed at seed {s} ({role}): {exc}") from exc
            elapsed = time.perf_counter() - t0
            model.provenance = {"role": role, "seed": int(s)}
            save_checkpoint(model, path)
            entry = timings.setdefault(str(s), {})
            entry[f"{role}_seconds"] = elapsed
            entry[f"{role}_steps"] = meter.cost
            artifacts[f"refs/{role}_s{s}"] = path

    def mutate(m):
        m.phases["train_refs"] = True
        m.phases["sweep"] = {}
        m.phases["unlearn"] = {}
        m.phases["attack_lira"] = {}
        m.phases["evaluate"] = False
        m.phases["report"] = False
        _drop_artifacts(m, ("refs/", "sweeps/", "unlearned/", "eval/", "lira/", "report/"))
        m.timings["refs"] = timings
        for key, path in artifacts.items():
            _record_artifact(m, ws, key, path)

    _update_manifest(ws, cfg, mutate)
    return 0


def _load_refs(ws: Workspace, seeds):
    return {s: (load_checkpoint(ws.original_ckpt(s)), load_checkpoint(ws.retrain_ckpt(s)))
            for s in seeds}


# --- phase 3: sweep and finalize -------------------------------------------------


@dataclass
class SweepContext:
    seed: int
    original: Model
    retrain: Model
    acc_r: AccuracyBundle


def _make_request(method: str, config: dict, data: BenchData, recipe: TrainRecipe,
                  original: Model, seed: int) -> UnlearnRequest:
    return UnlearnRequest(
        original=original,
        retain_x=data.retain[0], retain_y=data.retain[1],
        forget_x=data.forget[0], forget_y=data.forget[1],
        val_x=data.val[0], val_y=data.val[1],
        method_id=method,
        hyperparams=dict(config),
        seed=int(seed),
        recipe=recipe,
    )


def cmd_sweep(cfg: BenchConfig, method: str, force: bool = False) -> int:
    """Random-search the method's hyperparameters over the sweep contexts."""
    ws = Workspace(cfg.out_dir)
    man = _load_manifest(ws, cfg)
    _require(man.phases["train_refs"], f"sweep {method} needs train-refs to have run")
    space = SearchSpace.for_method(method)
    if man.phases["sweep"].get(method) and not force:
        return 0
    check_artifacts(ws, man, prefixes=("refs/",))
    if force and ws.sweep_log(method).exists():
        ws.sweep_log(method).unlink()

    data = load_bench_data(cfg, ws)
    recipe = build_recipe(cfg)
    context_seeds = [cfg.seeds[i % len(cfg.seeds)] for i in range(cfg.sweeps)]
    refs = _load_refs(ws, sorted(set(context_seeds)))
    contexts = [
        SweepContext(seed=s, original=refs[s][0], retrain=refs[s][1],
                     acc_r=accuracy_bundle(refs[s][1], data.retain, data.forget, data.test, data.val))
        for s in context_seeds
    ]

    def objective(config, ctx, trial_seed):
        out = run_method(_make_request(method, config, data, recipe, ctx.original, ctx.seed))
        runtime = float(out.step_cost) if cfg.rte_clock == "steps" else out.runtime_seconds
        if out.failed or out.model is None:
            return TrialEval(losses=None, runtime=runtime, reason=out.failure_reason or "failed")
        acc_u = accuracy_bundle(out.model, data.retain, data.forget, data.test, data.val)
        fl = per_sample_losses(out.model, *data.forget)
        vl = per_sample_losses(out.model, *data.val)
        vmia = umia(make_loss_pair(fl, vl, trim_seed=ctx.seed),
                    folds=cfg.umia_folds, fold_seed=ctx.seed)
        return TrialEval(losses=sweep_losses(acc_u, ctx.acc_r, vmia), runtime=runtime)

    ws.sweep_log(method).parent.mkdir(parents=True, exist_ok=True)
    try:
        result = run_sweep(method, space, objective, contexts, trials=cfg.trials,
                           master_seed=cfg.master_seed, log_path=str(ws.sweep_log(method)))
    except AllTrialsFailed:
        # the trial log is complete at this point; the method is simply F
        result = None
    if result is not None:
        best = result.best
        doc = {"method": method, "failed": False, "config": best.config,
               "sweep": best.sweep, "trial": best.trial, "seed": best.seed,
               "total": best.total, "l_valmia": best.l_valmia}
        code = 0
    else:
        doc = {"method": method, "failed": True, "config": None,
               "reason": "every sweep trial failed"}
        code = 1
    ws.best_json(method).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")

    def mutate(m):
        m.phases["sweep"][method] = True
        m.phases["unlearn"].pop(method, None)
        m.phases["attack_lira"].pop(method, None)
        _drop_artifacts(m, (f"sweeps/{method}/", f"unlearned/{method}/", f"lira/{method}",))
        _record_artifact(m, ws, f"sweeps/{method}/log", ws.sweep_log(method))
        _record_artifact(m, ws, f"sweeps/{method}/best", ws.best_json(method))

    _update_manifest(ws, cfg, mutate)
    return code


def _read_best(ws: Workspace, method: str) -> dict:
    try:
        return json.loads(ws.best_json(method).read_text())
    except (OSError, ValueError) as exc:
        raise MissingArtifacts(f"unreadable sweep result for {method}: {exc}") from exc


def cmd_unlearn(cfg: BenchConfig, method: str, force: bool = False) -> int:
    """Run the method once per seed with its swept-best hyperparameters."""
    ws = Workspace(cfg.out_dir)
    man = _load_manifest(ws, cfg)
    _require(man.phases["sweep"].get(method, False),
             f"unlearn {method} needs its sweep to have run")
    if man.phases["unlearn"].get(method) and not force:
        return 0
    check_artifacts(ws, man, prefixes=("refs/", f"sweeps/{method}/"))
    best = _read_best(ws, method)
    ws.unlearn_meta(method).parent.mkdir(parents=True, exist_ok=True)

    outcomes = {}
    artifacts = {}
    if best["failed"]:
        for s in cfg.seeds:
            outcomes[str(s)] = {"failed": True, "reason": "no usable sweep trial",
                                "runtime_seconds": None, "step_cost": None, "checkpoint": None}
    else:
        data = load_bench_data(cfg, ws)
        recipe = build_recipe(cfg)
        refs = _load_refs(ws, cfg.seeds)
        for s in cfg.seeds:
            out = run_method(_make_request(method, best["config"], data, recipe, refs[s][0], s))
            entry = {"failed": out.failed, "reason": out.failure_reason,
                     "runtime_seconds": out.runtime_seconds, "step_cost": out.step_cost,
                     "checkpoint": None}
            if not out.failed and out.model is not None:
                path = ws.unlearn_ckpt(method, s)
                out.model.provenance = {"role": "unlearned", "method": method, "seed": int(s)}
                save_checkpoint(out.model, path)
                entry["checkpoint"] = str(path.relative_to(ws.root))
                artifacts[f"unlearned/{method}/s{s}"] = path
            outcomes[str(s)] = entry

    meta = {"method": method, "config": best.get("config"), "clock": cfg.rte_clock,
            "outcomes": outcomes}
    ws.unlearn_meta(method).write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    all_failed = all(o["failed"] for o in outcomes.values())

    def mutate(m):
        m.phases["unlearn"][method] = True
        m.phases["evaluate"] = False
        m.phases["report"] = False
        _drop_artifacts(m, (f"unlearned/{method}/", "eval/", "report/"))
        _record_artifact(m, ws, f"unlearned/{method}/meta", ws.unlearn_meta(method))
        for key, path in artifacts.items():
            _record_artifact(m, ws, key, path)

    _update_manifest(ws, cfg, mutate)
    return 1 if all_failed else 0


# --- phase 4: evaluate ------------------------------------------------------------


def _sanitize(value):
    """Make a JSON document strictly valid: non-finite floats become null."""
    if isinstance(value, dict):
        return {k: _sanitize(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_sanitize(v) for v in value]
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def _safe_groups(values: dict, better: str, metric: str) -> GroupAssignment:
    if any(v is not None and math.isfinite(float(v)) for v in values.values()):
        return cluster_groups(values, better=better, metric=metric)
    return GroupAssignment(metric=metric, better=better,
                           groups={m: "F" for m in values}, means={}, degenerate=True)


def _attack_model(model: Model, data: BenchData, seed: int, folds: int):
    """Forget-vs-test membership attack; returns (accuracy, detected flags)."""
    fl = per_sample_losses(model, *data.forget)
    tl = per_sample_losses(model, *data.test)
    pair = make_loss_pair(fl, tl, trim_seed=seed)
    acc, detected = umia_with_predictions(pair, folds=folds, fold_seed=seed)
    full = np.zeros(len(fl), dtype=bool)
    full[pair.forget_kept] = detected
    return acc, full


def _ref_cost(man: RunManifest, seed: int, role: str, clock: str) -> float:
    entry = man.timings.get("refs", {}).get(str(seed), {})
    key = f"{role}_steps" if clock == "steps" else f"{role}_seconds"
    value = entry.get(key)
    if value is None:
        raise MissingArtifacts(f"manifest lacks {key} for seed {seed}")
    return float(value)


def cmd_evaluate(cfg: BenchConfig, force: bool = False) -> int:
    """Score references and every finalized method into the report tables."""
    ws = Workspace(cfg.out_dir)
    man = _load_manifest(ws, cfg)
    _require(man.phases["train_refs"], "evaluate needs train-refs to have run")
    done = [m for m in cfg.methods if man.phases["unlearn"].get(m)]
    missing = [m for m in cfg.methods if m not in done]
    if cfg.methods and not done:
        raise PhaseOrderError("evaluate needs at least one unlearned method; run sweep and unlearn")
    if man.phases["evaluate"] and not force:
        return 0
    check_artifacts(ws, man, prefixes=("refs/",) + tuple(f"unlearned/{m}/" for m in done))

    data = load_bench_data(cfg, ws)
    refs = _load_refs(ws, cfg.seeds)
    acc_r = {s: accuracy_bundle(refs[s][1], data.retain, data.forget, data.test, data.val)
             for s in cfg.seeds}
    denom = {s: _ref_cost(man, s, "retrain", cfg.rte_clock) for s in cfg.seeds}

    records = []
    detected = {}
    l2_rows = []

    def add_row(name, seed, model, cost, wall=None):
        bundle = accuracy_bundle(model, data.retain, data.forget, data.test, data.val)
        ret = retention(bundle, acc_r[seed])
        tmia, flags = _attack_model(model, data, seed, cfg.umia_folds)
        _, indisc = discernibility(tmia)
        rec = EvalRecord(
            method=name, seed=seed,
            ra=bundle.ra, fa=bundle.fa, ta=bundle.ta,
            rr=ret.rr, fr=ret.fr, tr=ret.tr, retdev=ret.retdev,
            indisc=indisc, tmia=tmia, rte=rte(denom[seed], cost),
            extras={"va": bundle.va},
        )
        if wall is not None:
            rec.extras["runtime_seconds"] = wall
        records.append(rec)
        detected.setdefault(name, {})[seed] = flags
        l2_rows.append((name, seed, l2_distance(model, refs[seed][1])))

    for s in cfg.seeds:
        add_row("original", s, refs[s][0], _ref_cost(man, s, "original", cfg.rte_clock))
    for s in cfg.seeds:
        add_row("retrain", s, refs[s][1], denom[s])
    for method in done:
        meta = json.loads(ws.unlearn_meta(method).read_text())
        for s in cfg.seeds:
            entry = meta["outcomes"][str(s)]
            if entry["failed"]:
                records.append(EvalRecord(method=method, seed=s, failed=True,
                                          extras={"reason": entry["reason"]}))
                continue
            model = load_checkpoint(ws.root / entry["checkpoint"])
            cost = float(entry["step_cost"]) if cfg.rte_clock == "steps" else float(entry["runtime_seconds"])
            add_row(method, s, model, cost, wall=entry["runtime_seconds"])

    write_eval_csv(records, ws.eval_csv)
    write_eval_jsonl(records, ws.eval_jsonl)
    with open(ws.l2_csv, "w") as fh:
        fh.write("method,seed,l2\n")
        for name, seed, value in l2_rows:
            fh.write(f"{name},{seed},{value:.6f}\n")

    summary = mean_by_method(records)
    failed_methods = [m for m in done if summary[m]["failed"] == summary[m]["seeds"]]

    assignments = []
    if done:
        retdev_vals = {m: summary[m]["mean_retdev"] for m in done}
        indisc_vals = {m: summary[m]["mean_indisc"] for m in done}
        assignments = [
            _safe_groups(retdev_vals, better="lower", metric="retdev"),
            _safe_groups(indisc_vals, better="higher", metric="indisc"),
        ]
        groups_doc = {
            a.metric: {"better": a.better, "groups": a.groups,
                       "means": a.means, "degenerate": a.degenerate}
            for a in assignments
        }
        ws.groups_json.write_text(json.dumps(_sanitize(groups_doc), sort_keys=True, indent=2) + "\n")

        rank_rows = rank_methods(count_groups(assignments, methods=done))
        with open(ws.rank_csv, "w") as fh:
            fh.write("rank,method,g1,g2,g3,f\n")
            for row in rank_rows:
                fh.write(f"{row.rank},{row.method},{row.g1},{row.g2},{row.g3},{row.f}\n")

        points = {m: (summary[m]["mean_retdev"], summary[m]["mean_indisc"])
                  for m in done if m not in failed_methods}
        frontier = pareto_frontier(points) if points else frozenset()
        with open(ws.frontier_csv, "w") as fh:
            fh.write("method,retdev,indisc,frontier\n")
            for m in done:
                if m in failed_methods:
                    continue
                rd, ind = points[m]
                fh.write(f"{m},{rd:.6f},{ind:.6f},{1 if m in frontier else 0}\n")

    unf = {}
    for name, per_seed in detected.items():
        flags = [per_seed[s] for s in sorted(per_seed)]
        res = consistent_unforgettability(flags)
        unf[name] = {
            "n_seeds": res.n_seeds,
            "histogram": res.histogram,
            "always_detected": res.always_detected,
            "never_detected": res.never_detected,
            "counts": res.counts.tolist(),
        }
    agg = None
    for m in done:
        if m in failed_methods or m not in unf:
            continue
        mask = np.asarray(unf[m]["counts"]) == unf[m]["n_seeds"]
        agg = mask if agg is None else (agg & mask)
    always_ids = data.splits.forget[np.flatnonzero(agg)].tolist() if agg is not None else []
    unf_doc = {"per_method": unf, "forget_ids": data.splits.forget.tolist(),
               "always_all_methods": always_ids}
    ws.unforgettability_json.write_text(json.dumps(_sanitize(unf_doc), sort_keys=True, indent=2) + "\n")

    summary_doc = {
        "config_hash": man.config_hash,
        "dataset": man.dataset,
        "methods": done,
        "missing_methods": missing,
        "failed_methods": failed_methods,
        "by_method": summary,
    }
    ws.summary_json.write_text(json.dumps(_sanitize(summary_doc), sort_keys=True, indent=2) + "\n")

    def mutate(m):
        m.phases["evaluate"] = True
        m.phases["report"] = False
        _drop_artifacts(m, ("eval/", "report/"))
        _record_artifact(m, ws, "eval/csv", ws.eval_csv)
        _record_artifact(m, ws, "eval/jsonl", ws.eval_jsonl)
        _record_artifact(m, ws, "eval/l2", ws.l2_csv)
        _record_artifact(m, ws, "eval/summary", ws.summary_json)
        _record_artifact(m, ws, "eval/unforgettability", ws.unforgettability_json)
        if done:
            _record_artifact(m, ws, "eval/groups", ws.groups_json)
            _record_artifact(m, ws, "eval/rank", ws.rank_csv)
            _record_artifact(m, ws, "eval/frontier", ws.frontier_csv)

    _update_manifest(ws, cfg, mutate)
    return 1 if (missing or failed_methods) else 0


# --- shadow-model attack -----------------------------------------------------------


def cmd_attack_lira(cfg: BenchConfig, method: str, force: bool = False) -> int:
    """Per-sample likelihood-ratio attack over a shadow-model ensemble."""
    ws = Workspace(cfg.out_dir)
    man = _load_manifest(ws, cfg)
    _require(man.phases["sweep"].get(method, False),
             f"attack-lira {method} needs its sweep to have run")
    if man.phases["attack_lira"].get(method) and not force:
        return 0
    best = _read_best(ws, method)
    if best["failed"]:
        print(f"attack-lira: {method} has no usable hyperparameters (all sweep trials failed)")
        return 1

    data = load_bench_data(cfg, ws)
    descriptor = build_descriptor(cfg, data.corpus)
    recipe = build_recipe(cfg)
    ensemble = build_shadow_ensemble(
        data.corpus.images, data.corpus.labels,
        scored=data.splits.forget, backing=data.splits.retain, val=data.splits.val,
        descriptor=descriptor, recipe=recipe,
        method_id=method, hyperparams=best["config"],
        n_models=cfg.lira_models, splits_per_model=cfg.lira_splits,
        seed=cfg.master_seed,
    )
    result = ulira(ensemble)
    doc = {
        "method": method,
        "n_models": cfg.lira_models,
        "splits_per_model": cfg.lira_splits,
        "n_samples": result.n_samples,
        "mean_accuracy": result.mean_accuracy,
        "std_accuracy": result.std_accuracy,
        "per_sample_accuracy": {str(k): v for k, v in result.per_sample_accuracy.items()},
    }
    ws.lira_json(method).write_text(json.dumps(_sanitize(doc), sort_keys=True, indent=2) + "\n")

    def mutate(m):
        m.phases["attack_lira"][method] = True
        _record_artifact(m, ws, f"lira/{method}", ws.lira_json(method))

    _update_manifest(ws, cfg, mutate)
    return 0


# --- consolidated report -----------------------------------------------------------


def _fmt_pm(entry, col) -> str:
    mean, std = entry.get(f"mean_{col}"), entry.get(f"std_{col}")
    if mean is None:
        return "-"
    return f"{mean:.3f}±{std:.3f}"


def cmd_report(cfg: BenchConfig, force: bool = False) -> int:
    """Condense the evaluation artifacts into one text + JSON + CSV summary."""
    ws = Workspace(cfg.out_dir)
    man = _load_manifest(ws, cfg)
    _require(man.phases["evaluate"], "report needs evaluate to have run")
    if man.phases["report"] and not force:
        return 0
    check_artifacts(ws, man, prefixes=("eval/",))
    summary_doc = json.loads(ws.summary_json.read_text())
    by_method = summary_doc["by_method"]
    methods = summary_doc["methods"]

    order = [m for m in ("original", "retrain") if m in by_method]
    order += [m for m in methods if m in by_method]

    with open(ws.means_csv, "w") as fh:
        cols = ("retdev", "indisc", "tmia", "rte", "ra", "fa", "ta")
        fh.write("method,seeds,failed," + ",".join(f"mean_{c},std_{c}" for c in cols) + "\n")
        for m in order:
            e = by_method[m]
            cells = [m, str(e["seeds"]), str(e["failed"])]
            for c in cols:
                for key in (f"mean_{c}", f"std_{c}"):
                    v = e.get(key)
                    cells.append("" if v is None else f"{v:.6f}")
            fh.write(",".join(cells) + "\n")

    lines = [
        "unlearning benchmark report",
        f"config {summary_doc['config_hash'][:12]}  dataset {summary_doc['dataset'].get('name', '?')}"
        f"  arch {cfg.arch}  seeds {len(cfg.seeds)}",
        "",
        f"{'method':10s} {'retdev':>13s} {'indisc':>13s} {'tmia':>13s} {'rte':>10s} {'fail':>4s}",
    ]
    for m in order:
        e = by_method[m]
        rte_mean = e.get("mean_rte")
        lines.append(
            f"{m:10s} {_fmt_pm(e, 'retdev'):>13s} {_fmt_pm(e, 'indisc'):>13s}"
            f" {_fmt_pm(e, 'tmia'):>13s} {('-' if rte_mean is None else format(rte_mean, '.2f')):>10s}"
            f" {e['failed']:>4d}"
        )
    if summary_doc["failed_methods"]:
        lines += ["", "failed methods: " + ", ".join(summary_doc["failed_methods"])]
    if summary_doc["missing_methods"]:
        lines += ["", "not yet unlearned: " + ", ".join(summary_doc["missing_methods"])]

    doc = {"config_hash": summary_doc["config_hash"], "summary": by_method, "order": order,
           "failed_methods": summary_doc["failed_methods"],
           "missing_methods": summary_doc["missing_methods"]}
    if ws.rank_csv.exists():
        lines += ["", ws.rank_csv.read_text().rstrip()]
        doc["rank_csv"] = ws.rank_csv.read_text()
    if ws.frontier_csv.exists():
        frontier = [r.split(",")[0] for r in ws.frontier_csv.read_text().splitlines()[1:]
                    if r.endswith(",1")]
        lines += ["", "pareto frontier: " + (", ".join(sorted(frontier)) if frontier else "(empty)")]
        doc["frontier"] = sorted(frontier)
    lira_docs = {}
    for m in sorted(man.phases["attack_lira"]):
        if man.phases["attack_lira"][m] and ws.lira_json(m).exists():
            lira = json.loads(ws.lira_json(m).read_text())
            lira_docs[m] = {"mean_accuracy": lira["mean_accuracy"],
                            "std_accuracy": lira["std_accuracy"]}
            lines.append(f"per-sample attack {m}: mean {lira['mean_accuracy']:.3f}"
                         f" std {lira['std_accuracy']:.3f}")
    if lira_docs:
        doc["lira"] = lira_docs

    ws.report_txt.write_text("\n".join(lines) + "\n")
    ws.report_json.write_text(json.dumps(_sanitize(doc), sort_keys=True, indent=2) + "\n")

    def mutate(m):
        m.phases["report"] = True
        _record_artifact(m, ws, "report/txt", ws.report_txt)
        _record_artifact(m, ws, "report/json", ws.report_json)
        _record_artifact(m, ws, "report/means", ws.means_csv)

    _update_manifest(ws, cfg, mutate)
    return 0
