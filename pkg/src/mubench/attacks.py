"""Privacy attacks against unlearned models.

Three layers: a population membership attack (loss-feature logistic regression
under 10-fold cross-validation), a per-sample likelihood-ratio attack backed by
a shadow-model ensemble, and the per-image detection-count analysis built on
the population attack's out-of-fold predictions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .engine import no_grad, softmax
from .errors import (
    CountMismatch,
    DegenerateLabels,
    IncompleteCoverage,
    InsufficientShadowCoverage,
    NonFiniteLoss,
    TooFewSamplesForAttack,
)
from .methods import METHODS, CostMeter, Deadline, UnlearnRequest
from .methods.common import train_classifier
from .rng import stream
from .zoo import Model, forward, init_model

PROB_CLAMP = 1e-7
VARIANCE_FLOOR = 1e-6
LOSS_LOG_OFFSET = 1e-6
MIN_SIDE = 20
MIN_SHADOW_SCORES = 8


def per_sample_losses(model: Model, x: np.ndarray, y: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Per-example cross-entropy losses, the feature the population attack sees."""
    y = np.asarray(y, dtype=np.int64)
    out = np.empty(len(y))
    with no_grad():
        for i in range(0, len(y), batch_size):
            logits = forward(model, x[i : i + batch_size])
            probs = softmax(logits).data
            p = probs[np.arange(len(probs)), y[i : i + batch_size]]
            out[i : i + batch_size] = -np.log(np.maximum(p, 1e-300))
    return out


def logit_confidences(model: Model, x: np.ndarray, y: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Logit-transformed true-class confidence phi(p) = ln(p / (1 - p)),
    clamped so the score is always finite."""
    y = np.asarray(y, dtype=np.int64)
    out = np.empty(len(y))
    with no_grad():
        for i in range(0, len(y), batch_size):
            probs = softmax(forward(model, x[i : i + batch_size])).data
            p = probs[np.arange(len(probs)), y[i : i + batch_size]]
            p = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
            out[i : i + batch_size] = np.log(p / (1.0 - p))
    return out


@dataclass
class LossPair:
    """Forget-side and reference-side loss values, trimmed to equal size."""

    forget_losses: np.ndarray
    reference_losses: np.ndarray
    trim_seed: int
    forget_kept: np.ndarray  # indices into the original forget array that survived trimming

    def __post_init__(self):
        if len(self.forget_losses) != len(self.reference_losses):
            raise CountMismatch("loss pair sides must match after trimming")
        both = np.concatenate([self.forget_losses, self.reference_losses])
        if not np.isfinite(both).all():
            raise NonFiniteLoss("attack features must be finite")


def make_loss_pair(forget_losses, reference_losses, trim_seed: int) -> LossPair:
    """Shuffle the longer side with a seeded stream and trim it to the shorter
    side's length; kept forget indices are tracked for coverage analysis."""
    f = np.asarray(forget_losses, dtype=np.float64)
    r = np.asarray(reference_losses, dtype=np.float64)
    kept = np.arange(len(f))
    if len(f) > len(r):
        perm = stream(int(trim_seed), "trim", "forget").generator().permutation(len(f))
        kept = np.sort(perm[: len(r)])
        f = f[kept]
    elif len(r) > len(f):
        perm = stream(int(trim_seed), "trim", "reference").generator().permutation(len(r))
        r = r[np.sort(perm[: len(f)])]
    return LossPair(forget_losses=f, reference_losses=r, trim_seed=int(trim_seed), forget_kept=kept)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _newton_logistic(x: np.ndarray, y: np.ndarray, l2: float = 1.0) -> tuple:
    """Two-parameter logistic fit (intercept, slope) on a standardized scalar
    feature; the L2 penalty applies to the slope only."""
    mu = float(x.mean())
    sd = max(float(x.std()), 1e-12)
    xs = (x - mu) / sd
    beta = np.zeros(2)
    design = np.stack([np.ones_like(xs), xs], axis=1)
    for _ in range(100):
        p = _sigmoid(design @ beta)
        grad = design.T @ (p - y) + l2 * np.array([0.0, beta[1]])
        w = np.maximum(p * (1.0 - p), 1e-12)
        hess = design.T @ (design * w[:, None]) + np.diag([1e-10, l2])
        step = np.linalg.solve(hess, grad)
        beta -= step
        if np.abs(step).max() < 1e-8:
            break
    return beta, mu, sd


def _predict_logistic(fit, x: np.ndarray) -> np.ndarray:
    beta, mu, sd = fit
    z = beta[0] + beta[1] * (x - mu) / sd
    return (z >= 0.0).astype(np.int64)


def _fold_ids(n: int, folds: int, seed: int) -> np.ndarray:
    """Seeded round-robin assignment over a shuffled index list."""
    perm = stream(int(seed), "folds").generator().permutation(n)
    ids = np.empty(n, dtype=np.int64)
    ids[perm] = np.arange(n) % folds
    return ids


def logistic_cv(features: np.ndarray, labels: np.ndarray, folds: int = 10, seed: int = 0) -> tuple:
    """Cross-validated scalar logistic regression.

    Returns (mean fold accuracy, out-of-fold predictions); every sample is
    predicted exactly once, by the model that never saw it.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise DegenerateLabels("logistic fit needs both classes present")
    if len(y) < folds:
        raise TooFewSamplesForAttack(f"{len(y)} samples cannot fill {folds} folds")
    ids = _fold_ids(len(y), folds, seed)
    oof = np.empty(len(y), dtype=np.int64)
    accs = []
    for k in range(folds):
        hold = ids == k
        fit = _newton_logistic(x[~hold], y[~hold])
        pred = _predict_logistic(fit, x[hold])
        oof[hold] = pred
        accs.append(float((pred == y[hold]).mean()))
    return float(np.mean(accs)), oof


def logistic_fit(features, labels, folds: int = 10, seed: int = 0) -> float:
    acc, _ = logistic_cv(features, labels, folds=folds, seed=seed)
    return acc


def _loss_features(values: np.ndarray) -> np.ndarray:
    """Log-compress losses before the logistic fit.

    Cross-entropy losses are so heavy-tailed that a linear logistic is steered
    by a few large values; on small samples that drags cross-validated
    accuracy measurably below chance even when both sides are identically
    distributed.  The compression is monotone, so separated distributions stay
    separated."""
    return np.log(np.maximum(values, 0.0) + LOSS_LOG_OFFSET)


def umia_with_predictions(pair: LossPair, folds: int = 10, fold_seed: int = 0) -> tuple:
    """Population membership attack on a loss pair.

    Returns (attack accuracy, boolean detected flags aligned to
    pair.forget_losses).
    """
    n = len(pair.forget_losses)
    if n < MIN_SIDE:
        raise TooFewSamplesForAttack(f"need >= {MIN_SIDE} samples per side, got {n}")
    features = _loss_features(np.concatenate([pair.forget_losses, pair.reference_losses]))
    labels = np.concatenate([np.ones(n, dtype=np.int64), np.zeros(n, dtype=np.int64)])
    acc, oof = logistic_cv(features, labels, folds=folds, seed=fold_seed)
    return acc, oof[:n] == 1


def umia(pair: LossPair, folds: int = 10, fold_seed: int = 0) -> float:
    acc, _ = umia_with_predictions(pair, folds=folds, fold_seed=fold_seed)
    return acc


@dataclass
class ShadowEnsemble:
    """Per-sample attack scores collected from shadow models.

    in_scores[i][j] is sample i's score under the unlearned model of shadow j
    where i sat in the forget split; out_scores[i][j] lists i's scores under
    every unlearned checkpoint of shadow j where i was never trained on.
    """

    sample_ids: list
    in_scores: dict
    out_scores: dict
    manifest: dict = field(default_factory=dict)

    def coverage(self, sample_id) -> tuple:
        n_in = len(self.in_scores.get(sample_id, {}))
        n_out = sum(len(v) for v in self.out_scores.get(sample_id, {}).values())
        return n_in, n_out


@dataclass
class UliraResult:
    per_sample_accuracy: dict
    mean_accuracy: float
    std_accuracy: float
    n_samples: int
    n_in: dict
    n_out: dict


def _gauss_logpdf(v: float, scores: np.ndarray) -> float:
    m = float(scores.mean())
    var = max(float(scores.var()), VARIANCE_FLOOR)
    return -0.5 * math.log(2.0 * math.pi * var) - (v - m) ** 2 / (2.0 * var)


def ulira(ensemble: ShadowEnsemble, variance_floor: float = VARIANCE_FLOOR) -> UliraResult:
    """Per-sample likelihood-ratio attack, leave-one-shadow-out.

    For every scored sample and every shadow model, the held-out shadow's score
    is classified against in/out Gaussians fitted on the remaining shadows'
    scores; per-sample accuracy is the fraction of shadows classified
    correctly.
    """
    per_sample = {}
    n_in_map, n_out_map = {}, {}
    for sid in ensemble.sample_ids:
        ins = ensemble.in_scores.get(sid, {})
        outs = ensemble.out_scores.get(sid, {})
        n_in, n_out = ensemble.coverage(sid)
        n_in_map[sid], n_out_map[sid] = n_in, n_out
        if n_in < MIN_SHADOW_SCORES or n_out < MIN_SHADOW_SCORES:
            raise InsufficientShadowCoverage(f"sample {sid}: {n_in} in / {n_out} out scores, need {MIN_SHADOW_SCORES}")
        trials = []
        for j, target in ins.items():
            fit_in = np.array([v for jj, v in ins.items() if jj != j])
            fit_out = np.concatenate([np.asarray(v) for jj, v in outs.items()])
            predict_in = _gauss_logpdf(target, fit_in) > _gauss_logpdf(target, fit_out)
            trials.append(predict_in)
        for j, scores in outs.items():
            fit_in = np.array(list(ins.values()))
            rest = [np.asarray(v) for jj, v in outs.items() if jj != j]
            fit_out = np.concatenate(rest)
            target = float(np.asarray(scores)[0])
            predict_in = _gauss_logpdf(target, fit_in) > _gauss_logpdf(target, fit_out)
            trials.append(not predict_in)
        per_sample[sid] = float(np.mean(trials))
    accs = np.array(list(per_sample.values()))
    return UliraResult(
        per_sample_accuracy=per_sample,
        mean_accuracy=float(accs.mean()),
        std_accuracy=float(accs.std()),
        n_samples=len(accs),
        n_in=n_in_map,
        n_out=n_out_map,
    )


def build_shadow_ensemble(
    images: np.ndarray,
    labels: np.ndarray,
    scored: np.ndarray,
    backing: np.ndarray,
    val: np.ndarray,
    descriptor,
    recipe,
    method_id: str,
    hyperparams: dict,
    n_models: int = 16,
    splits_per_model: int = 4,
    seed: int = 0,
) -> ShadowEnsemble:
    """Train shadow models over randomized in/out memberships of the scored
    samples, unlearn each forget split, and collect logit-confidence scores.

    Each scored sample is an in-member of exactly half the shadows, giving
    n_models/2 in-scores and (n_models/2) * splits_per_model out-scores.
    """
    scored = np.asarray(scored, dtype=np.int64)
    backing = np.asarray(backing, dtype=np.int64)
    val = np.asarray(val, dtype=np.int64)
    half = n_models // 2
    membership = {}
    for sid in scored:
        gen = stream(int(seed), "shadow_member", int(sid)).generator()
        membership[sid] = set(gen.choice(n_models, size=half, replace=False).tolist())
    in_scores = {int(s): {} for s in scored}
    out_scores = {int(s): {} for s in scored}
    manifest = {"n_models": n_models, "splits_per_model": splits_per_model, "seed": int(seed), "models": []}
    fn = METHODS[method_id].fn
    vx, vy = images[val], labels[val]
    for j in range(n_models):
        members = np.array([s for s in scored if j in membership[int(s)]], dtype=np.int64)
        outsiders = np.array([s for s in scored if j not in membership[int(s)]], dtype=np.int64)
        train_idx = np.concatenate([backing, members])
        model = init_model(descriptor, seed=int(stream(int(seed), "shadow_init", j).generator().integers(0, 2**31)))
        train_classifier(
            model,
            images[train_idx],
            labels[train_idx],
            recipe,
            stream(int(seed), "shadow_train", j),
            CostMeter(),
        )
        perm = stream(int(seed), "shadow_split", j).generator().permutation(len(members))
        split_lists = [members[np.sort(perm[k::splits_per_model])] for k in range(splits_per_model)]
        manifest["models"].append(
            {
                "model": j,
                "train_count": int(len(train_idx)),
                "splits": [s.tolist() for s in split_lists],
            }
        )
        for k, forget_idx in enumerate(split_lists):
            retain_idx = np.setdiff1d(train_idx, forget_idx)
            req = UnlearnRequest(
                original=model,
                retain_x=images[retain_idx],
                retain_y=labels[retain_idx],
                forget_x=images[forget_idx],
                forget_y=labels[forget_idx],
                val_x=vx,
                val_y=vy,
                method_id=method_id,
                hyperparams=hyperparams,
                seed=int(stream(int(seed), "shadow_unlearn", j, k).generator().integers(0, 2**31)),
                recipe=recipe,
            )
            unlearned = fn(req, CostMeter(), Deadline(None))
            if len(forget_idx):
                for sid, score in zip(forget_idx, logit_confidences(unlearned, images[forget_idx], labels[forget_idx])):
                    in_scores[int(sid)][j] = float(score)
            if len(outsiders):
                for sid, score in zip(outsiders, logit_confidences(unlearned, images[outsiders], labels[outsiders])):
                    out_scores[int(sid)].setdefault(j, []).append(float(score))
    return ShadowEnsemble(
        sample_ids=[int(s) for s in scored],
        in_scores=in_scores,
        out_scores=out_scores,
        manifest=manifest,
    )


@dataclass
class UnforgettabilityResult:
    counts: np.ndarray        # per forget image, seeds where membership was inferred
    n_seeds: int
    histogram: dict           # detection count -> number of images
    always_detected: float    # fraction detected under every seed
    never_detected: float


def consistent_unforgettability(per_seed_detected) -> UnforgettabilityResult:
    """Per-image detection counts across seeds for one method.

    Input: one boolean array per seed, aligned to the full forget set; any
    missing entry (negative or NaN) means some forget element never received an
    out-of-fold prediction.
    """
    arrays = [np.asarray(a) for a in per_seed_detected]
    if not arrays:
        raise IncompleteCoverage("no per-seed predictions given")
    n = len(arrays[0])
    for a in arrays:
        if len(a) != n:
            raise IncompleteCoverage("per-seed prediction arrays disagree in length")
        if a.dtype.kind == "f" and not np.isfinite(a).all():
            raise IncompleteCoverage("missing predictions for some forget elements")
        if a.dtype.kind != "b" and ((a < 0) | (a > 1)).any():
            raise IncompleteCoverage("predictions must be 0/1 per forget element")
    counts = np.sum([a.astype(np.int64) for a in arrays], axis=0)
    n_seeds = len(arrays)
    hist = {int(k): int((counts == k).sum()) for k in range(n_seeds + 1)}
    return UnforgettabilityResult(
        counts=counts,
        n_seeds=n_seeds,
        histogram=hist,
        always_detected=float((counts == n_seeds).mean()),
        never_detected=float((counts == 0).mean()),
    )


def always_detected_intersection(per_method_counts: dict, n_seeds: int) -> np.ndarray:
    """Indices detected under every seed by every method."""
    masks = [np.asarray(c) == n_seeds for c in per_method_counts.values()]
    if not masks:
        return np.array([], dtype=np.int64)
    agg = masks[0]
    for m in masks[1:]:
        agg = agg & m
    return np.flatnonzero(agg)
