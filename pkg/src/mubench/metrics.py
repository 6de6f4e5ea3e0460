"""Scalar evaluation metrics: accuracy bundles, retention ratios, attack
discernibility, runtime efficiency, the four-term search objective, and the
EvalRecord export format.

Everything here is a pure reduction; batching never changes a value.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DescriptorMismatch,
    EmptySplit,
    NonPositiveTime,
    OutOfRange,
    ZeroReference,
)
from .zoo import Model, predict_labels

EVAL_COLUMNS = (
    "method",
    "seed",
    "ra",
    "fa",
    "ta",
    "rr",
    "fr",
    "tr",
    "retdev",
    "indisc",
    "tmia",
    "rte",
    "failed",
)


@dataclass(frozen=True)
class AccuracyBundle:
    """Per-split accuracies: retain, forget, test, validation."""

    ra: float
    fa: float
    ta: float
    va: float


@dataclass(frozen=True)
class RetentionBundle:
    rr: float
    fr: float
    tr: float
    dr: float
    df: float
    dt: float
    retdev: float


@dataclass(frozen=True)
class SweepLosses:
    l_retain: float
    l_forget: float
    l_val: float
    l_valmia: float
    total: float


def accuracy(model: Model, x: np.ndarray, y: np.ndarray, batch_size: int = 512) -> float:
    """Fraction of argmax-correct predictions on one split."""
    y = np.asarray(y)
    if len(y) == 0:
        raise EmptySplit("accuracy needs a nonempty split")
    correct = 0
    for i in range(0, len(y), batch_size):
        correct += int((predict_labels(model, x[i : i + batch_size]) == y[i : i + batch_size]).sum())
    return correct / len(y)


def accuracy_bundle(model: Model, retain, forget, test, val, batch_size: int = 512) -> AccuracyBundle:
    """Evaluate one model on all four (x, y) splits."""
    return AccuracyBundle(
        ra=accuracy(model, *retain, batch_size=batch_size),
        fa=accuracy(model, *forget, batch_size=batch_size),
        ta=accuracy(model, *test, batch_size=batch_size),
        va=accuracy(model, *val, batch_size=batch_size),
    )


def retention(acc_u: AccuracyBundle, acc_r: AccuracyBundle) -> RetentionBundle:
    """Accuracy ratios of the unlearned model against the retrained reference,
    and their cumulative deviation from 1."""
    for name, ref in (("ra", acc_r.ra), ("fa", acc_r.fa), ("ta", acc_r.ta)):
        if ref <= 0:
            raise ZeroReference(f"reference {name} is {ref}; retention undefined")
    rr = acc_u.ra / acc_r.ra
    fr = acc_u.fa / acc_r.fa
    tr = acc_u.ta / acc_r.ta
    dr, df, dt = abs(rr - 1.0), abs(fr - 1.0), abs(tr - 1.0)
    return RetentionBundle(rr=rr, fr=fr, tr=tr, dr=dr, df=df, dt=dt, retdev=dr + df + dt)


def discernibility(mia_accuracy: float) -> tuple:
    """How far a membership attack sits from coin flipping, and its complement."""
    a = float(mia_accuracy)
    if not (0.0 <= a <= 1.0):
        raise OutOfRange(f"attack accuracy {a} outside [0, 1]")
    disc = abs(2.0 * a - 1.0)
    return disc, 1.0 - disc


def rte(rt_retrain: float, rt_method: float) -> float:
    """Relative speedup over retraining; > 1 means faster than retraining."""
    if rt_retrain <= 0 or rt_method <= 0:
        raise NonPositiveTime(f"runtimes must be positive, got {rt_retrain} / {rt_method}")
    return rt_retrain / rt_method


def sweep_losses(
    acc_u: AccuracyBundle,
    acc_r: AccuracyBundle,
    val_mia_accuracy: float,
    alpha: float = 1.0 / 3.0,
    beta: float = 1.0 / 3.0,
    gamma: float = 1.0 / 3.0,
    eta: float = 1.0,
) -> SweepLosses:
    """Four-term search objective: weighted accuracy gaps to the retrained
    reference plus the validation-attack discernibility."""
    l_retain = alpha * abs(acc_u.ra - acc_r.ra)
    l_forget = beta * abs(acc_u.fa - acc_r.fa)
    l_val = gamma * abs(acc_u.va - acc_r.va)
    disc, _ = discernibility(val_mia_accuracy)
    l_valmia = eta * disc
    return SweepLosses(
        l_retain=l_retain,
        l_forget=l_forget,
        l_val=l_val,
        l_valmia=l_valmia,
        total=l_retain + l_forget + l_val + l_valmia,
    )


def l2_distance(model_a: Model, model_b: Model) -> float:
    if model_a.descriptor != model_b.descriptor:
        raise DescriptorMismatch("parameter distance needs identical architectures")
    diff = [a.data.reshape(-1) - b.data.reshape(-1) for a, b in zip(model_a.param_tensors(), model_b.param_tensors())]
    return float(np.linalg.norm(np.concatenate(diff)))


@dataclass
class EvalRecord:
    """One (method, seed) evaluation row; extras carry fields that stay out of
    the fixed-column CSV (e.g. wall-clock time, validation metrics)."""

    method: str
    seed: int
    ra: float = math.nan
    fa: float = math.nan
    ta: float = math.nan
    rr: float = math.nan
    fr: float = math.nan
    tr: float = math.nan
    retdev: float = math.nan
    indisc: float = math.nan
    tmia: float = math.nan
    rte: float = math.nan
    failed: bool = False
    extras: dict = field(default_factory=dict)

    def csv_cells(self) -> list:
        cells = [self.method, str(int(self.seed))]
        for col in EVAL_COLUMNS[2:-1]:
            v = getattr(self, col)
            cells.append("" if math.isnan(v) else f"{v:.6f}")
        cells.append("1" if self.failed else "0")
        return cells

    def to_json_dict(self) -> dict:
        row = {"method": self.method, "seed": int(self.seed), "failed": bool(self.failed)}
        for col in EVAL_COLUMNS[2:-1]:
            v = getattr(self, col)
            row[col] = None if math.isnan(v) else v
        for k, v in self.extras.items():
            row[k] = None if isinstance(v, float) and math.isnan(v) else v
        return row


def write_eval_csv(records, path):
    lines = [",".join(EVAL_COLUMNS)]
    lines += [",".join(r.csv_cells()) for r in records]
    Path(path).write_text("\n".join(lines) + "\n")


def write_eval_jsonl(records, path):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json_dict(), sort_keys=True) + "\n")


def mean_by_method(records) -> dict:
    """Per-method means of every numeric column over non-failed seeds, plus
    seed and failure counts."""
    out = {}
    for r in records:
        out.setdefault(r.method, []).append(r)
    summary = {}
    for method, rows in out.items():
        ok = [r for r in rows if not r.failed]
        entry = {"seeds": len(rows), "failed": len(rows) - len(ok)}
        for col in EVAL_COLUMNS[2:-1]:
            vals = [getattr(r, col) for r in ok if not math.isnan(getattr(r, col))]
            entry[f"mean_{col}"] = float(np.mean(vals)) if vals else math.nan
            entry[f"std_{col}"] = float(np.std(vals)) if vals else math.nan
        summary[method] = entry
    return summary
