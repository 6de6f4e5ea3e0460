"""Run configuration: a small TOML-style parser, schema validation, presets.

Config files are flat ``key = value`` text. Supported value forms: quoted
strings, integers, floats, ``true``/``false``, and flat lists like
``[1, 2, 3]`` or ``["ft", "ga"]``. ``#`` starts a comment. Section headers
are not part of the schema; unknown keys are rejected so typos surface
immediately. The MUB_OUT environment variable overrides ``out_dir``.

Schema (defaults in parentheses):
  dataset        "synth_blobs" | "mnist" | "cifar10" | "cifar100"
  data_path      directory holding the dataset files ("" for synthetic)
  n_samples      synthetic sample count (4000)
  n_classes      synthetic class count (10)
  dim            synthetic feature dimension (48)
  separation     synthetic class-center spread (5.0)
  label_noise    synthetic fraction of labels flipped to a wrong class (0.2)
  input_contrast per-channel standard deviation after normalization (0.8)
  data_seed      synthetic draw seed (11)
  arch           "small_cnn" | "mlp"
  conv_channels  conv widths ([8, 16])
  hidden_widths  dense widths after the conv stack ([64])
  pool           conv pooling window, 1 disables spatial pooling (1)
  epochs/lr/batch_size/momentum/weight_decay/augment   training recipe
  methods        unlearning methods to benchmark (all approximate methods)
  seeds          reference/evaluation seeds ([0..9])
  sweeps/trials  hyperparameter search budget (3 x 100)
  split_seed     dataset split seed (123)
  master_seed    sweep sampling seed (0)
  umia_folds     attack cross-validation folds (10)
  lira_models/lira_splits  shadow ensemble size (16 x 4)
  rte_clock      "wall" | "steps" efficiency denominator ("wall")
  out_dir        artifact directory ("runs/bench")
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Tuple

from .errors import ConfigError
from .methods import METHOD_IDS, UNLEARN_METHOD_IDS

# desk preset shape constants: 48 dims fold into 3x4x4 images; the wide
# separation makes clean samples predictable from geometry alone, so the
# flipped fraction is the only membership signal and retraining stays
# seed-stable, and the sub-unit contrast keeps the optimizer in the
# well-behaved part of the loss surface
DESK_DIM = 48
DESK_SEPARATION = 5.0
DESK_HIDDEN = (64,)
DESK_LABEL_NOISE = 0.2
DESK_CONTRAST = 0.8
DESK_POOL = 1


@dataclass(frozen=True)
class BenchConfig:
    dataset: str = "synth_blobs"
    data_path: str = ""
    n_samples: int = 4000
    n_classes: int = 10
    dim: int = DESK_DIM
    separation: float = DESK_SEPARATION
    label_noise: float = DESK_LABEL_NOISE
    input_contrast: float = DESK_CONTRAST
    data_seed: int = 11
    arch: str = "small_cnn"
    conv_channels: Tuple[int, ...] = (8, 16)
    hidden_widths: Tuple[int, ...] = DESK_HIDDEN
    pool: int = DESK_POOL
    epochs: int = 30
    lr: float = 0.05
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 5e-4
    augment: bool = False
    methods: Tuple[str, ...] = tuple(UNLEARN_METHOD_IDS)
    seeds: Tuple[int, ...] = tuple(range(10))
    sweeps: int = 3
    trials: int = 100
    split_seed: int = 123
    master_seed: int = 0
    umia_folds: int = 10
    lira_models: int = 16
    lira_splits: int = 4
    rte_clock: str = "wall"
    out_dir: str = "runs/bench"

    def validate(self) -> "BenchConfig":
        if self.dataset not in ("synth_blobs", "mnist", "cifar10", "cifar100"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.dataset != "synth_blobs":
            if not self.data_path:
                raise ConfigError(f"dataset {self.dataset!r} needs data_path")
            if not os.path.exists(self.data_path):
                raise ConfigError(f"data_path does not exist: {self.data_path}")
        if self.arch not in ("small_cnn", "mlp"):
            raise ConfigError(f"unknown arch {self.arch!r}")
        if self.rte_clock not in ("wall", "steps"):
            raise ConfigError(f"rte_clock must be 'wall' or 'steps', got {self.rte_clock!r}")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"duplicate seeds in {list(self.seeds)}")
        unknown = [m for m in self.methods if m not in METHOD_IDS]
        if unknown:
            raise ConfigError(f"unknown methods {unknown}; known: {sorted(METHOD_IDS)}")
        for name in ("n_samples", "n_classes", "epochs", "batch_size", "sweeps", "trials",
                     "umia_folds", "lira_models", "lira_splits", "pool"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0.0 <= self.label_noise < 1.0:
            raise ConfigError(f"label_noise must be in [0, 1), got {self.label_noise}")
        if self.input_contrast <= 0:
            raise ConfigError("input_contrast must be positive")
        if not self.out_dir:
            raise ConfigError("out_dir must be set")
        return self

    def to_json_dict(self) -> dict:
        return asdict(self)


def desk_config(out_dir: str = "runs/desk", **overrides) -> BenchConfig:
    """The reduced-scale preset: 4,000 synthetic samples, 10 classes, the
    small CNN recipe (30 epochs, lr 0.05, batch 64), 5 seeds, 3x10-trial
    sweeps, and deterministic step-count RTE."""
    cfg = BenchConfig(
        dataset="synth_blobs",
        n_samples=4000,
        n_classes=10,
        dim=DESK_DIM,
        separation=DESK_SEPARATION,
        label_noise=DESK_LABEL_NOISE,
        input_contrast=DESK_CONTRAST,
        arch="small_cnn",
        hidden_widths=DESK_HIDDEN,
        pool=DESK_POOL,
        epochs=30,
        lr=0.05,
        batch_size=64,
        seeds=(0, 1, 2, 3, 4),
        sweeps=3,
        trials=10,
        rte_clock="steps",
        out_dir=out_dir,
    )
    if overrides:
        cfg = replace(cfg, **overrides)
    return cfg


def _parse_scalar(token: str, path: str, lineno: int):
    token = token.strip()
    if not token:
        raise ConfigError(f"{path}:{lineno}: empty value")
    if token.startswith('"') or token.startswith("'"):
        quote = token[0]
        if len(token) < 2 or not token.endswith(quote):
            raise ConfigError(f"{path}:{lineno}: unterminated string {token}")
        return token[1:-1]
    if token == "true":
        return True
    if token == "false":
        return False
    try:
        return int(token)
    except ValueError:
        pass
    try:
        return float(token)
    except ValueError:
        raise ConfigError(f"{path}:{lineno}: cannot parse value {token!r}") from None


def _strip_comment(line: str) -> str:
    out = []
    quote = None
    for ch in line:
        if quote:
            out.append(ch)
            if ch == quote:
                quote = None
            continue
        if ch in "\"'":
            quote = ch
            out.append(ch)
            continue
        if ch == "#":
            break
        out.append(ch)
    return "".join(out)


def parse_config_text(text: str, path: str = "<config>") -> dict:
    """Flat key/value parser for the documented config schema."""
    doc = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        if line.startswith("["):
            raise ConfigError(f"{path}:{lineno}: section headers are not supported; use flat keys")
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key.replace("_", "").isalnum():
            raise ConfigError(f"{path}:{lineno}: bad key {key!r}")
        if key in doc:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        if value.startswith("["):
            if not value.endswith("]"):
                raise ConfigError(f"{path}:{lineno}: unterminated list {value!r}")
            inner = value[1:-1].strip()
            doc[key] = [] if not inner else [
                _parse_scalar(tok, path, lineno) for tok in inner.split(",")
            ]
        else:
            doc[key] = _parse_scalar(value, path, lineno)
    return doc


_LIST_FIELDS = {"conv_channels", "hidden_widths", "methods", "seeds"}
_FIELD_TYPES = {f.name: f.type for f in BenchConfig.__dataclass_fields__.values()}


def _coerce(key: str, value, path: str):
    if key in _LIST_FIELDS:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: {key} must be a list, got {value!r}")
        return tuple(value)
    if isinstance(value, list):
        raise ConfigError(f"{path}: {key} takes a single value, got a list")
    return value


def config_from_dict(doc: dict, path: str = "<config>", base: Optional[BenchConfig] = None) -> BenchConfig:
    cfg = base if base is not None else BenchConfig()
    known = set(_FIELD_TYPES)
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {unknown}")
    fields = {k: _coerce(k, v, path) for k, v in doc.items()}
    return replace(cfg, **fields)


def load_config(path: Optional[str] = None, desk: bool = False, **overrides) -> BenchConfig:
    """Resolve the effective config: preset/defaults, then file, then explicit
    overrides, then the MUB_OUT environment variable."""
    base = desk_config() if desk else BenchConfig()
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        base = config_from_dict(parse_config_text(text, path), path, base=base)
    if overrides:
        base = replace(base, **overrides)
    env_out = os.environ.get("MUB_OUT")
    if env_out:
        base = replace(base, out_dir=env_out)
    return base.validate()


def config_hash(cfg: BenchConfig) -> str:
    canon = json.dumps(cfg.to_json_dict(), sort_keys=True)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()
