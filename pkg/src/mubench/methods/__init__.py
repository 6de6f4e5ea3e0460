"""Method registry and dispatcher.

Each method is a pure transformation (original model, splits, hyperparams,
seed) -> model, wrapped here with hyperparameter validation, wall-clock and
step-cost accounting, and failure containment: any benchmark error raised
while a method runs becomes a failed outcome rather than a crash.

Search ranges are declared per method (the underlying techniques do not
publish canonical ranges).  Validation accepts any value in [0, high]: zero is
always a legal off-switch so reduced variants stay expressible, while sampling
during sweeps stays within [low, high].
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..engine import cross_entropy, no_grad
from ..errors import BadHyperparams, MubenchError, NonFiniteLoss, UnknownMethod
from ..zoo import Model, forward
from .common import CostMeter, Deadline, TrainRecipe, UnlearnOutcome, UnlearnRequest
from . import baselines, competition, literature


@dataclass(frozen=True)
class HyperRange:
    name: str
    low: float
    high: float
    scale: str = "linear"  # linear | log | integer | categorical
    choices: tuple = ()

    def __post_init__(self):
        if self.scale not in ("linear", "log", "integer", "categorical"):
            raise BadHyperparams(f"{self.name}: unknown scale {self.scale!r}")
        if self.scale == "categorical":
            if not self.choices:
                raise BadHyperparams(f"{self.name}: categorical range needs choices")
            return
        if not (np.isfinite(self.low) and np.isfinite(self.high)) or self.low > self.high:
            raise BadHyperparams(f"{self.name}: bad bounds [{self.low}, {self.high}]")
        if self.scale == "log" and self.low <= 0:
            raise BadHyperparams(f"{self.name}: log scale needs positive bounds")


@dataclass(frozen=True)
class MethodSpec:
    method_id: str
    fn: Callable
    hyperparams: tuple
    requires_conv: bool = False


def _ranges(*rs) -> tuple:
    return tuple(HyperRange(*r) for r in rs)

_EPOCHS = ("epochs", 1, 8, "integer")
_LR = ("lr", 5e-3, 0.2, "log")
_WD = ("wd", 1e-6, 5e-3, "log")

METHODS: dict = {}


def _register(method_id, fn, ranges, requires_conv=False):
    METHODS[method_id] = MethodSpec(method_id, fn, _ranges(*ranges), requires_conv)


_register("retrain", baselines.retrain, ())
_register("ft", baselines.finetune_ft, (_EPOCHS, _LR, _WD))
_register("srl", baselines.srl, (_EPOCHS, _LR, _WD))
_register("ga", baselines.ga, (("epochs", 1, 3, "integer"), ("lr", 1e-5, 5e-3, "log"), ("wd", 1e-6, 1e-3, "log")))
_register("ng_plus", baselines.ng_plus, (_EPOCHS, _LR, _WD, ("lambda_f", 0.0, 0.6)))
_register(
    "fcs",
    competition.fcs,
    (("phase1_epochs", 1, 3, "integer"), ("phase2_epochs", 1, 6, "integer"), ("lr", 5e-3, 0.1, "log"), _WD, ("contrastive_weight", 0.0, 1.0)),
)
_register("msg", competition.msg, (_EPOCHS, _LR, _WD, ("rho", 0.0, 0.8), ("dampening", 0.2, 1.0)))
_register(
    "cfw",
    competition.cfw,
    (("epochs", 2, 8, "integer"), ("final_epochs", 1, 2, "integer"), _LR, _WD, ("sigma1", 1e-3, 0.3, "log"), ("sigma2", 1e-4, 0.1, "log")),
    requires_conv=True,
)
_register("prmq", competition.prmq, (_EPOCHS, _LR, _WD, ("prune_fraction", 0.0, 0.8), ("mu", 1e-3, 3.0, "log")))
_register("ct", competition.ct, (_EPOCHS, _LR, _WD), requires_conv=True)
_register(
    "kde",
    competition.kde,
    (
        ("phase1_epochs", 1, 3, "integer"),
        ("phase2_epochs", 1, 6, "integer"),
        ("lr", 5e-3, 0.1, "log"),
        _WD,
        ("w1", 0.0, 1.0),
        ("w2", 0.0, 1.0),
        ("w3", 0.0, 1.0),
        ("temperature", 1.0, 8.0, "log"),
    ),
)
_register("rni", competition.rni, (_EPOCHS, _LR, _WD, ("sigma", 1e-4, 0.3, "log")))
_register("ff", literature.fisher_forgetting, (("lambda", 1e-10, 1e-4, "log"), ("fisher_samples", 32, 96, "integer")))
_register(
    "iu",
    literature.influence_unlearning,
    (("alpha", 1e-2, 3.0, "log"), ("damping", 1e-3, 1.0, "log"), ("fisher_samples", 32, 96, "integer")),
)
_register("cf_k", literature.cf_k, (("k", 1, 3, "integer"), _EPOCHS, _LR, _WD))
_register("eu_k", literature.eu_k, (("k", 1, 3, "integer"), _EPOCHS, _LR, _WD))
_register(
    "scrub",
    literature.scrub,
    (("max_epochs", 0, 3, "integer"), _EPOCHS, ("lr", 1e-3, 0.1, "log"), _WD, ("w_kl", 0.1, 2.0), ("w_ce", 0.1, 2.0)),
)
_register("salun", literature.salun, (_EPOCHS, _LR, _WD, ("rho", 0.1, 1.0)))
_register("bt", literature.bad_teacher, (_EPOCHS, ("lr", 1e-3, 0.1, "log"), _WD, ("w_r", 0.2, 2.0), ("w_f", 0.0, 1.0)))

METHOD_IDS = tuple(METHODS)
UNLEARN_METHOD_IDS = tuple(m for m in METHODS if m != "retrain")


def validate_hyperparams(spec: MethodSpec, hyperparams: dict):
    for r in spec.hyperparams:
        if r.name not in hyperparams:
            raise BadHyperparams(f"{spec.method_id}: missing hyperparameter {r.name!r}")
        v = hyperparams[r.name]
        if r.scale == "categorical":
            if v not in r.choices:
                raise BadHyperparams(f"{spec.method_id}: {r.name}={v!r} not in {r.choices}")
            continue
        v = float(v)
        if not np.isfinite(v) or v < 0 or v > r.high:
            raise BadHyperparams(f"{spec.method_id}: {r.name}={v} outside [0, {r.high}]")
        if r.scale == "integer" and v != int(v):
            raise BadHyperparams(f"{spec.method_id}: {r.name}={v} must be an integer")
        if r.scale == "log" and v != 0 and v < r.low:
            raise BadHyperparams(f"{spec.method_id}: {r.name}={v} below {r.low} (or exactly 0)")


def catalog() -> dict:
    """Machine-readable method catalog: ids, search ranges, structural needs."""
    return {
        "methods": [
            {
                "id": spec.method_id,
                "requires_conv": spec.requires_conv,
                "hyperparams": [
                    {"name": r.name, "low": r.low, "high": r.high, "scale": r.scale}
                    | ({"choices": list(r.choices)} if r.scale == "categorical" else {})
                    for r in spec.hyperparams
                ],
            }
            for spec in METHODS.values()
        ]
    }


def _probe_usable(model: Model, req: UnlearnRequest, probe: int = 64):
    """A usable model has finite parameters and finite losses on every split."""
    for t in model.param_tensors():
        if not np.isfinite(t.data).all():
            raise NonFiniteLoss("unlearned model contains non-finite parameters")
    with no_grad():
        for x, y in ((req.retain_x, req.retain_y), (req.forget_x, req.forget_y), (req.val_x, req.val_y)):
            if len(y) == 0:
                continue
            loss = cross_entropy(forward(model, x[:probe]), y[:probe])
            if not np.isfinite(loss.data).all():
                raise NonFiniteLoss("unlearned model yields non-finite loss")


def run_method(req: UnlearnRequest) -> UnlearnOutcome:
    """Execute one unlearning request with timing and failure containment."""
    spec = METHODS.get(req.method_id)
    if spec is None:
        raise UnknownMethod(f"no method registered under {req.method_id!r}")
    validate_hyperparams(spec, req.hyperparams)
    meter = CostMeter()
    deadline = Deadline(req.wall_clock_budget)
    start = time.perf_counter()
    model = None
    failed = False
    reason = ""
    try:
        model = spec.fn(req, meter, deadline)
        elapsed = time.perf_counter() - start
        _probe_usable(model, req)
    except MubenchError as exc:
        elapsed = time.perf_counter() - start
        model = None
        failed = True
        reason = f"{type(exc).__name__}: {exc}"
    return UnlearnOutcome(
        model=model,
        failed=failed,
        method_id=req.method_id,
        seed=req.seed,
        runtime_seconds=max(elapsed, 1e-9),
        step_cost=meter.cost,
        failure_reason=reason,
    )


__all__ = [
    "CostMeter",
    "HyperRange",
    "METHODS",
    "METHOD_IDS",
    "MethodSpec",
    "TrainRecipe",
    "UNLEARN_METHOD_IDS",
    "UnlearnOutcome",
    "UnlearnRequest",
    "catalog",
    "run_method",
    "validate_hyperparams",
]
