"""Shared plumbing for unlearning methods: request/outcome types, cost metering,
the reference training loop, and reusable differentiable loss pieces."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .. import engine
from ..data import augment_batch
from ..engine import SgdConfig, SgdState, Tape, Tensor, backward, cross_entropy, no_grad
from ..errors import BudgetExceeded, NonFiniteLoss
from ..rng import RngStream, stream
from ..zoo import Model, forward


@dataclass
class TrainRecipe:
    """The original-training recipe; retraining reuses it unchanged."""

    epochs: int
    learning_rate: float
    batch_size: int
    momentum: float = 0.9
    weight_decay: float = 5e-4
    augment: bool = False


@dataclass
class UnlearnRequest:
    """Everything a method may access: the original model, D_R, D_F, D_V, and its knobs."""

    original: Model
    retain_x: np.ndarray
    retain_y: np.ndarray
    forget_x: np.ndarray
    forget_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    method_id: str
    hyperparams: dict
    seed: int
    recipe: TrainRecipe
    wall_clock_budget: Optional[float] = None


@dataclass
class UnlearnOutcome:
    model: Optional[Model]
    failed: bool
    method_id: str
    seed: int
    runtime_seconds: float
    step_cost: int
    failure_reason: str = ""


class CostMeter:
    """Deterministic work counter: sample-passes, with backward passes weighted double."""

    def __init__(self):
        self.forward_samples = 0
        self.backward_samples = 0

    def fwd(self, n: int):
        self.forward_samples += int(n)

    def step(self, n: int):
        self.forward_samples += int(n)
        self.backward_samples += int(n)

    @property
    def cost(self) -> int:
        return self.forward_samples + 2 * self.backward_samples


class Deadline:
    """Optional wall-clock budget checked between batches."""

    def __init__(self, budget_seconds: Optional[float]):
        self.start = time.perf_counter()
        self.budget = budget_seconds

    def check(self):
        if self.budget is not None and time.perf_counter() - self.start > self.budget:
            raise BudgetExceeded(f"wall-clock budget {self.budget}s exceeded")


def check_finite_loss(loss: Tensor):
    if not np.isfinite(loss.data).all():
        raise NonFiniteLoss("loss became non-finite")


def epoch_batches(n: int, batch_size: int, gen) -> list:
    perm = gen.permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, max(1, int(batch_size)))]


def retain_stream(seed: int) -> RngStream:
    """Batch-order stream shared by every method that sweeps D_R, so reduced
    variants (e.g. a method with its extra term switched off) reproduce the
    plain fine-tuning trajectory bit-exactly."""
    return stream(int(seed), "retain_batches")


def sgd_config(hyperparams: dict, recipe: TrainRecipe, direction: str = "descent") -> SgdConfig:
    return SgdConfig(
        learning_rate=float(hyperparams.get("lr", recipe.learning_rate)),
        momentum=float(hyperparams.get("momentum", recipe.momentum)),
        weight_decay=float(hyperparams.get("wd", recipe.weight_decay)),
        direction=direction,
    )


def annealed(cfg: SgdConfig, epoch: int, epochs: int) -> SgdConfig:
    """Half-cosine learning-rate decay shared by every epoch loop in the
    harness, so reduced method variants still reproduce each other bit for bit."""
    lr = cfg.learning_rate * 0.5 * (1.0 + np.cos(np.pi * epoch / max(1, epochs)))
    return SgdConfig(
        learning_rate=float(lr),
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
        direction=cfg.direction,
    )


def train_classifier(
    model: Model,
    x: np.ndarray,
    y: np.ndarray,
    recipe: TrainRecipe,
    rng: RngStream,
    meter: CostMeter,
    deadline: Optional[Deadline] = None,
    class_weights=None,
    layers=None,
) -> Model:
    """Plain SGD cross-entropy training; the reference recipe for originals and retraining.

    The learning rate follows half-cosine annealing from recipe.learning_rate
    to zero, so the final iterates settle instead of oscillating around the
    minimum; without it the learned function varies noticeably across seeds.
    """
    params = model.param_tensors(layers)
    state = SgdState()
    base = SgdConfig(recipe.learning_rate, recipe.momentum, recipe.weight_decay)
    for epoch in range(recipe.epochs):
        cfg = annealed(base, epoch, recipe.epochs)
        gen = rng.child("retain_batches", epoch).generator()
        for bi, idx in enumerate(epoch_batches(len(y), recipe.batch_size, gen)):
            if deadline is not None:
                deadline.check()
            xb, yb = x[idx], y[idx]
            if recipe.augment:
                xb = augment_batch(xb, rng.child("augment", epoch, bi))
            with Tape():
                logits = forward(model, xb)
                loss = cross_entropy(logits, yb) if class_weights is None else weighted_ce(logits, yb, class_weights)
                check_finite_loss(loss)
                backward(loss)
            engine.sgd_step(params, None, state, cfg)
            meter.step(len(idx))
    return model


def weighted_ce(logits: Tensor, labels, class_weights: np.ndarray) -> Tensor:
    """Cross-entropy with per-class weights, normalized by the batch's total weight."""
    y = np.asarray(labels, dtype=np.int64)
    probs = engine.softmax(logits)
    nc = logits.data.shape[1]
    onehot = np.zeros((y.size, nc))
    onehot[np.arange(y.size), y] = 1.0
    nll = engine.scale(engine.matmul(engine.mul(engine.log(engine.add(probs, Tensor(1e-12))), Tensor(onehot)), Tensor(np.ones((nc, 1)))), -1.0)
    w = np.asarray(class_weights, dtype=np.float64)[y].reshape(1, -1)
    total = engine.matmul(Tensor(w), nll)
    return engine.mean(engine.scale(total, 1.0 / w.sum()))


def inverse_frequency_weights(labels: np.ndarray, class_count: int) -> np.ndarray:
    """Class weights proportional to inverse frequency, normalized to mean 1."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=class_count).astype(np.float64)
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0)
    present = inv[counts > 0]
    return inv / present.mean() if present.size else np.ones(class_count)


def entropy_column(logits: Tensor) -> Tensor:
    """Per-sample Shannon entropy of the softmax outputs, as a [B, 1] tensor."""
    s = engine.softmax(logits)
    plogp = engine.mul(s, engine.log(engine.add(s, Tensor(1e-12))))
    nc = logits.data.shape[1]
    return engine.scale(engine.matmul(plogp, Tensor(np.ones((nc, 1)))), -1.0)


def soft_cross_entropy(student_logits: Tensor, teacher_logits: np.ndarray, temperature: float) -> Tensor:
    """Distillation loss: -mean over batch of sum_c teacher_T(c) * log student_T(c)."""
    t = float(temperature)
    with no_grad():
        teacher = engine.softmax(engine.scale(Tensor(teacher_logits), 1.0 / t)).data
    logq = engine.log(engine.add(engine.softmax(engine.scale(student_logits, 1.0 / t)), Tensor(1e-12)))
    nc = teacher.shape[1]
    rows = engine.matmul(engine.mul(Tensor(teacher), logq), Tensor(np.ones((nc, 1))))
    return engine.scale(engine.mean(rows), -1.0)


def mean_cosine_similarity(emb_a: Tensor, emb_b: Tensor) -> Tensor:
    """Mean pairwise cosine similarity between two embedding batches.

    Row norms are treated as constants so the value stays in [-1, 1] while the
    gradient pushes the direction vectors apart.
    """
    na = np.maximum(np.linalg.norm(emb_a.data, axis=1, keepdims=True), 1e-12)
    nb = np.maximum(np.linalg.norm(emb_b.data, axis=1, keepdims=True), 1e-12)
    ea = engine.mul(emb_a, Tensor(1.0 / na))
    eb = engine.mul(emb_b, Tensor(1.0 / nb))
    ba, dim = ea.data.shape
    bb = eb.data.shape[0]
    ma = engine.matmul(Tensor(np.full((1, ba), 1.0 / ba)), ea)
    mb = engine.matmul(Tensor(np.full((1, bb), 1.0 / bb)), eb)
    return engine.scale(engine.mean(engine.mul(ma, mb)), float(dim))


def fisher_diagonal(model: Model, x: np.ndarray, meter: CostMeter, max_samples: int, rng: RngStream) -> list:
    """Diagonal Fisher information per parameter: for each sample, the
    model-expectation over classes of the squared cross-entropy gradient."""
    params = model.param_tensors()
    acc = [np.zeros_like(p.data) for p in params]
    n = x.shape[0]
    idx = np.arange(n)
    if max_samples and n > max_samples:
        idx = np.sort(rng.generator().choice(n, size=int(max_samples), replace=False))
    nc = model.descriptor.class_count
    for i in idx:
        xi = x[i : i + 1]
        with no_grad():
            probs = engine.softmax(forward(model, xi)).data[0]
        meter.fwd(1)
        for c in range(nc):
            if probs[c] < 1e-12:
                continue
            with Tape():
                backward(cross_entropy(forward(model, xi), np.array([c])))
            meter.step(1)
            for a, p in zip(acc, params):
                a += probs[c] * p.grad * p.grad
    return [a / len(idx) for a in acc]


def mean_grads(model: Model, x: np.ndarray, y: np.ndarray, meter: CostMeter) -> list:
    """Gradient of mean cross-entropy over one full batch."""
    with Tape():
        loss = cross_entropy(forward(model, x), y)
        check_finite_loss(loss)
        backward(loss)
    meter.step(len(y))
    return [p.grad.copy() for p in model.param_tensors()]


def masked_sgd_step(params, state: SgdState, cfg: SgdConfig, masks):
    """SGD where the applied update is scaled elementwise by each mask entry;
    momentum buffers are maintained for every entry regardless."""
    for i, (p, m) in enumerate(zip(params, masks)):
        g = p.grad + cfg.weight_decay * p.data
        v = state.velocity.get(i)
        v = g if v is None else cfg.momentum * v + g
        state.velocity[i] = v
        p.data = p.data - cfg.learning_rate * v * m
