"""Methods adapted from the wider unlearning literature."""

from __future__ import annotations

import math

import numpy as np

from .. import engine
from ..engine import SgdState, Tape, Tensor, backward, cross_entropy, kl_divergence, no_grad
from ..rng import stream
from ..zoo import Model, clone_model, forward, fresh_layer_values, init_model, layer_partition
from .common import (
    CostMeter,
    Deadline,
    UnlearnRequest,
    check_finite_loss,
    epoch_batches,
    fisher_diagonal,
    annealed,
    masked_sgd_step,
    mean_grads,
    sgd_config,
    train_classifier,
)
from .baselines import _hp_recipe

FISHER_FLOOR = 1e-8


def fisher_forgetting(req: UnlearnRequest, meter: CostMeter, deadline: Deadline) -> Model:
    """Perturb every parameter with noise scaled by the inverse fourth root of
    its diagonal Fisher information."""
    model = clone_model(req.original)
    lam = float(req.hyperparams.get("lambda", 1e-6))
    if lam == 0:
        return model
    samples = int(req.hyperparams.get("fisher_samples", 64))
    fisher = fisher_diagonal(model, req.retain_x, meter, samples, stream(int(req.seed), "fisher"))
    deadline.check()
    for i, (p, f) in enumerate(zip(model.param_tensors(), fisher)):
        std = math.sqrt(lam) * np.power(np.maximum(f, FISHER_FLOOR), -0.25)
        gen = stream(int(req.seed), "ff", "noise", i).generator()
        p.data = p.data + std * gen.normal(size=p.data.shape)
    return model


def influence_unlearning(req: UnlearnRequest, meter: CostMeter, deadline: Deadline) -> Model:
    """One-shot parameter update along the damped-inverse-Fisher-preconditioned
    forget-set gradient."""
    model = clone_model(req.original)
    alpha = float(req.hyperparams.get("alpha", 1.0))
    if alpha == 0:
        return model
    gamma = float(req.hyperparams.get("damping", 0.1))
    samples = int(req.hyperparams.get("fisher_samples", 64))
    grads = mean_grads(model, req.forget_x, req.forget_y, meter)
    fisher = fisher_diagonal(model, req.retain_x, meter, samples, stream(int(req.seed), "fisher"))
    deadline.check()
    n_f, n_r = len(req.forget_y), len(req.retain_y)
    for p, g, f in zip(model.param_tensors(), grads, fisher):
        delta = (g * n_f) / (n_r * (f + gamma))
        p.data = p.data + alpha * delta
    return model


def _last_k_training(req: UnlearnRequest, meter: CostMeter, deadline: Deadline, reinit: bool) -> Model:
    model = clone_model(req.original)
    names = model.layer_names()
    k = min(int(req.hyperparams.get("k", 1)), len(names))
    _, trainable = layer_partition(model, k)
    if reinit:
        for name in trainable:
            w_new, b_new = fresh_layer_values(model.descriptor, name, stream(int(req.seed), "euk", "reinit", name))
            model.params[name]["w"].data = w_new
            model.params[name]["b"].data = b_new
    return train_classifier(
        model,
        req.retain_x,
        req.retain_y,
        _hp_recipe(req),
        stream(int(req.seed)),
        meter,
        deadline,
        layers=trainable,
    )


def cf_k(req: UnlearnRequest, meter: CostMeter, deadline: Deadline) -> Model:
    """Catastrophic forgetting: fine-tune only the last k layers on retain."""
    return _last_k_training(req, meter, deadline, reinit=False)


def eu_k(req: UnlearnRequest, meter: CostMeter, deadline: Deadline) -> Model:
    """Exact unlearning of the last k layers: reinitialize them, then train them on retain."""
    return _last_k_training(req, meter, deadline, reinit=True)


def scrub(req: UnlearnRequest, meter: CostMeter, deadline: Deadline) -> Model:
    """Alternating teacher-student distillation: push the student away from the
    teacher on forget batches, pull it back with KL + CE on retain batches."""
    model = clone_model(req.original)
    hp = req.hyperparams
    recipe = _hp_recipe(req)
    max_epochs = int(hp.get("max_epochs", 1))
    w_kl = float(hp.get("w_kl", 1.0))
    w_ce = float(hp.get("w_ce", 1.0))
    params = model.param_tensors()
    state = SgdState()
    cfg_min = sgd_config(hp, req.recipe)
    cfg_max = sgd_config(hp, req.recipe, direction="ascent")

    def teacher_logits(xb):
        with no_grad():
            out = forward(req.original, xb).data
        meter.fwd(len(xb))
        return out

    for epoch in range(recipe.epochs):
        acfg_max = annealed(cfg_max, epoch, recipe.epochs)
        acfg_min = annealed(cfg_min, epoch, recipe.epochs)
        if epoch < max_epochs:
            gen = stream(int(req.seed), "forget_batches", epoch).generator()
            for idx in epoch_batches(len(req.forget_y), recipe.batch_size, gen):
                deadline.check()
                xb = req.forget_x[idx]
                with Tape():
                    loss = kl_divergence(forward(model, xb), Tensor(teacher_logits(xb)))
                    check_finite_loss(loss)
                    backward(loss)
                engine.sgd_step(params, None, state, acfg_max)
                meter.step(len(idx))
        gen = stream(int(req.seed), "retain_batches", epoch).generator()
        for idx in epoch_batches(len(req.retain_y), recipe.batch_size, gen):
            deadline.check()
            xb, yb = req.retain_x[idx], req.retain_y[idx]
            with Tape():
                logits = forward(model, xb)
                loss = engine.add(
                    engine.scale(kl_divergence(logits, Tensor(teacher_logits(xb))), w_kl),
                    engine.scale(cross_entropy(logits, yb), w_ce),
                )
                check_finite_loss(loss)
                backward(loss)
            engine.sgd_step(params, None, state, acfg_min)
            meter.step(len(idx))
    return model


def salun(req: UnlearnRequest, meter: CostMeter, deadline: Deadline) -> Model:
    """Random-label training where only the globally most forget-salient
    fraction of parameters receives updates."""
    model = clone_model(req.original)
    hp = req.hyperparams
    rho = float(hp.get("rho", 0.5))
    recipe = _hp_recipe(req)
    grads = mean_grads(clone_model(req.original), req.forget_x, req.forget_y, meter)
    flat = np.concatenate([np.abs(g).reshape(-1) for g in grads])
    m = int(math.floor(rho * flat.size))
    chosen = np.zeros(flat.size, dtype=bool)
    if m:
        chosen[np.argsort(-flat, kind="stable")[:m]] = True
    masks = []
    offset = 0
    for g in grads:
        masks.append(chosen[offset : offset + g.size].reshape(g.shape).astype(np.float64))
        offset += g.size
    params = model.param_tensors()
    state = SgdState()
    cfg = sgd_config(hp, req.recipe)
    x_all = np.concatenate([req.retain_x, req.forget_x])
    n_r, n_f = len(req.retain_y), len(req.forget_y)
    nc = model.descriptor.class_count
    for epoch in range(recipe.epochs):
        acfg = annealed(cfg, epoch, recipe.epochs)
        rand = stream(int(req.seed), "srl_labels", epoch).generator().integers(0, nc, size=n_f)
        y_all = np.concatenate([req.retain_y, rand])
        gen = stream(int(req.seed), "joint_batches", epoch).generator()
        for idx in epoch_batches(n_r + n_f, recipe.batch_size, gen):
            deadline.check()
            with Tape():
                loss = cross_entropy(forward(model, x_all[idx]), y_all[idx])
                check_finite_loss(loss)
                backward(loss)
            masked_sgd_step(params, state, acfg, masks)
            meter.step(len(idx))
    return model


def bad_teacher(req: UnlearnRequest, meter: CostMeter, deadline: Deadline) -> Model:
    """Distill toward the original on retain batches and toward a randomly
    initialized teacher on forget batches."""
    model = clone_model(req.original)
    hp = req.hyperparams
    recipe = _hp_recipe(req)
    w_r = float(hp.get("w_r", 1.0))
    w_f = float(hp.get("w_f", 0.5))
    bad_seed = int(stream(int(req.seed), "bt", "teacher").generator().integers(0, 2**31))
    bad = init_model(req.original.descriptor, bad_seed)
    params = model.param_tensors()
    state = SgdState()
    cfg = sgd_config(hp, req.recipe)
    n_f = len(req.forget_y)
    for epoch in range(recipe.epochs):
        acfg = annealed(cfg, epoch, recipe.epochs)
        rgen = stream(int(req.seed), "retain_batches", epoch).generator()
        fbatches = epoch_batches(n_f, recipe.batch_size, stream(int(req.seed), "forget_batches", epoch).generator())
        for bi, idx in enumerate(epoch_batches(len(req.retain_y), recipe.batch_size, rgen)):
            deadline.check()
            xb = req.retain_x[idx]
            with no_grad():
                t_logits = forward(req.original, xb).data
            meter.fwd(len(idx))
            with Tape():
                loss = engine.scale(kl_divergence(forward(model, xb), Tensor(t_logits)), w_r)
                check_finite_loss(loss)
                backward(loss)
            engine.sgd_step(params, None, state, acfg)
            meter.step(len(idx))
            if w_f > 0:
                fidx = fbatches[bi % len(fbatches)]
                xf = req.forget_x[fidx]
                with no_grad():
                    b_logits = forward(bad, xf).data
                meter.fwd(len(fidx))
                with Tape():
                    loss = engine.scale(kl_divergence(forward(model, xf), Tensor(b_logits)), w_f)
                    check_finite_loss(loss)
                    backward(loss)
                engine.sgd_step(params, None, state, acfg)
                meter.step(len(fidx))
    return model
