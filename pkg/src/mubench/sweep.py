"""Random-search hyperparameter sweeps with a resumable append-only trial log.

Selection pools every trial from every sweep into a single argmin over the
combined objective. Failed trials are kept in the log with whatever partial
data they produced, but compete with total = +inf so they are never chosen.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

from .errors import AllTrialsFailed, SweepLogMismatch, UnknownMethod
from .methods import METHODS, HyperRange, UnlearnOutcome, UnlearnRequest, run_method
from .metrics import SweepLosses
from .rng import stream


@dataclass(frozen=True)
class SearchSpace:
    """The sampling domain for one method's hyperparameters."""

    method_id: str
    ranges: tuple

    def __post_init__(self):
        object.__setattr__(self, "ranges", tuple(self.ranges))
        for h in self.ranges:
            if not isinstance(h, HyperRange):
                raise TypeError(f"expected HyperRange, got {type(h).__name__}")

    @classmethod
    def for_method(cls, method_id: str) -> "SearchSpace":
        spec = METHODS.get(method_id)
        if spec is None:
            raise UnknownMethod(f"no method registered under {method_id!r}")
        return cls(method_id=method_id, ranges=spec.hyperparams)


def sample_config(space: SearchSpace, trial_seed: int) -> dict:
    """Independent uniform draws on each hyperparameter's declared scale."""
    config = {}
    for h in space.ranges:
        gen = stream(trial_seed, "hpo", space.method_id, h.name).generator()
        if h.scale == "categorical":
            config[h.name] = h.choices[int(gen.integers(0, len(h.choices)))]
        elif h.scale == "integer":
            config[h.name] = int(gen.integers(int(h.low), int(h.high) + 1))
        elif h.scale == "log":
            config[h.name] = float(math.exp(gen.uniform(math.log(h.low), math.log(h.high))))
        else:
            config[h.name] = float(gen.uniform(h.low, h.high))
    return config


@dataclass(frozen=True)
class TrialRecord:
    sweep: int
    trial: int
    seed: int
    method_id: str
    config: dict
    l_retain: Optional[float]
    l_forget: Optional[float]
    l_val: Optional[float]
    l_valmia: Optional[float]
    total: float
    runtime: float
    failed: bool
    reason: str = ""

    def to_json_line(self) -> str:
        d = dataclasses.asdict(self)
        # JSON has no +inf; the failed flag carries the information instead
        d["total"] = None if not math.isfinite(self.total) else self.total
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json_line(cls, line: str) -> "TrialRecord":
        try:
            d = json.loads(line)
            total = d["total"]
            return cls(
                sweep=int(d["sweep"]),
                trial=int(d["trial"]),
                seed=int(d["seed"]),
                method_id=d["method_id"],
                config=dict(d["config"]),
                l_retain=d["l_retain"],
                l_forget=d["l_forget"],
                l_val=d["l_val"],
                l_valmia=d["l_valmia"],
                total=float("inf") if total is None else float(total),
                runtime=float(d["runtime"]),
                failed=bool(d["failed"]),
                reason=d.get("reason", ""),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SweepLogMismatch(f"unreadable sweep log line: {exc}") from exc


@dataclass(frozen=True)
class TrialEval:
    """What the objective callback reports for one sampled config."""

    losses: Optional[SweepLosses]
    runtime: float
    reason: str = ""

    @property
    def failed(self) -> bool:
        return bool(self.reason)


@dataclass(frozen=True)
class SweepResult:
    method_id: str
    best: TrialRecord
    records: tuple

    @property
    def best_config(self) -> dict:
        return dict(self.best.config)


def _trial_seed(master_seed: int, sweep: int, trial: int) -> int:
    gen = stream(master_seed, "sweep", sweep, "trial", trial).generator()
    return int(gen.integers(0, 2**31))


def _selection_key(rec: TrialRecord):
    valmia = rec.l_valmia if rec.l_valmia is not None else float("inf")
    return (rec.total, valmia, rec.runtime)


def select_best(records: Sequence[TrialRecord]) -> TrialRecord:
    """Argmin over total; ties fall to lower L_valmia, then runtime, then
    the earlier trial."""
    best = None
    for rec in records:
        if not math.isfinite(rec.total):
            continue
        if best is None or _selection_key(rec) < _selection_key(best):
            best = rec
    if best is None:
        raise AllTrialsFailed(f"no usable trial among {len(records)} records")
    return best


def _load_log(log_path: str, method_id: str) -> list:
    if not os.path.exists(log_path):
        return []
    records = []
    with open(log_path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = TrialRecord.from_json_line(line)
            if rec.method_id != method_id:
                raise SweepLogMismatch(
                    f"log belongs to {rec.method_id!r}, sweeping {method_id!r}"
                )
            records.append(rec)
    return records


def _check_resumed(rec: TrialRecord, sweep: int, trial: int, seed: int, space: SearchSpace):
    if (rec.sweep, rec.trial) != (sweep, trial):
        raise SweepLogMismatch(
            f"log line out of order: found sweep {rec.sweep} trial {rec.trial}, "
            f"expected sweep {sweep} trial {trial}"
        )
    if rec.seed != seed:
        raise SweepLogMismatch(
            f"sweep {sweep} trial {trial}: logged seed {rec.seed} != derived {seed} "
            "(master seed or search space changed)"
        )
    expected = sample_config(space, seed)
    if set(rec.config) != set(expected) or any(
        rec.config[k] != expected[k] for k in expected
    ):
        raise SweepLogMismatch(
            f"sweep {sweep} trial {trial}: logged config does not match the "
            "seeded sampler output"
        )


def run_sweep(
    method_id: str,
    space: SearchSpace,
    objective: Callable,
    contexts: Sequence,
    trials: int = 100,
    master_seed: int = 0,
    log_path: Optional[str] = None,
) -> SweepResult:
    """Run len(contexts) sweeps of `trials` trials each and return the pooled
    argmin. `objective(config, context, trial_seed) -> TrialEval` supplies the
    measured losses; contexts carry the per-sweep reference state (typically
    the differently-initialized original plus its retrained counterpart).

    With log_path set, finished trials append one JSON line each; on rerun the
    existing lines are trusted and skipped, so an interrupted sweep resumes
    where it stopped.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if not contexts:
        raise ValueError("at least one sweep context is required")
    existing = _load_log(log_path, method_id) if log_path else []
    budget = len(contexts) * trials
    if len(existing) > budget:
        raise SweepLogMismatch(
            f"log holds {len(existing)} trials but the budget is {budget}"
        )

    records = []
    log_fh = None
    try:
        idx = 0
        for s, ctx in enumerate(contexts):
            for t in range(trials):
                seed = _trial_seed(master_seed, s, t)
                if idx < len(existing):
                    rec = existing[idx]
                    _check_resumed(rec, s, t, seed, space)
                    records.append(rec)
                    idx += 1
                    continue
                config = sample_config(space, seed)
                ev = objective(config, ctx, seed)
                total = float("inf")
                if not ev.failed and ev.losses is not None:
                    total = float(ev.losses.total)
                rec = TrialRecord(
                    sweep=s,
                    trial=t,
                    seed=seed,
                    method_id=method_id,
                    config=config,
                    l_retain=None if ev.losses is None else float(ev.losses.l_retain),
                    l_forget=None if ev.losses is None else float(ev.losses.l_forget),
                    l_val=None if ev.losses is None else float(ev.losses.l_val),
                    l_valmia=None if ev.losses is None else float(ev.losses.l_valmia),
                    total=total,
                    runtime=float(ev.runtime),
                    failed=ev.failed or ev.losses is None,
                    reason=ev.reason,
                )
                if log_path:
                    if log_fh is None:
                        log_fh = open(log_path, "a", encoding="utf-8")
                    log_fh.write(rec.to_json_line() + "\n")
                    log_fh.flush()
                records.append(rec)
                idx += 1
    finally:
        if log_fh is not None:
            log_fh.close()

    best = select_best(records)
    return SweepResult(method_id=method_id, best=best, records=tuple(records))


def finalize(
    method_id: str,
    best_config: dict,
    requests: Sequence[UnlearnRequest],
) -> list:
    """One unlearning run per original-model seed with the frozen best config.

    Failures stay contained inside the returned outcomes; downstream grouping
    files them under F.
    """
    outcomes = []
    for req in requests:
        outcomes.append(
            run_method(
                dataclasses.replace(
                    req, method_id=method_id, hyperparams=dict(best_config)
                )
            )
        )
    return outcomes
