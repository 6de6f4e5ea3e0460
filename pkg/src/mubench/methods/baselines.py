"""Exact retraining and the gradient-based baseline methods."""

from __future__ import annotations

import numpy as np

from .. import engine
from ..engine import SgdState, Tape, Tensor, backward, cross_entropy
from ..rng import stream
from ..zoo import Model, clone_model, forward, init_model
from .common import (
    CostMeter,
    Deadline,
    TrainRecipe,
    UnlearnRequest,
    annealed,
    check_finite_loss,
    epoch_batches,
    sgd_config,
    train_classifier,
)


def _hp_recipe(req: UnlearnRequest) -> TrainRecipe:
    hp = req.hyperparams
    return TrainRecipe(
        epochs=int(hp.get("epochs", req.recipe.epochs)),
        learning_rate=float(hp.get("lr", req.recipe.learning_rate)),
        batch_size=req.recipe.batch_size,
        momentum=float(hp.get("momentum", req.recipe.momentum)),
        weight_decay=float(hp.get("wd", req.recipe.weight_decay)),
    )


def retrain(req: UnlearnRequest, meter: CostMeter, deadline: Deadline) -> Model:
    """Train a fresh model on the retain set with the original recipe."""
    model = init_model(req.original.descriptor, req.seed)
    return train_classifier(model, req.retain_x, req.retain_y, req.recipe, stream(int(req.seed)), meter, deadline)


def finetune_ft(req: UnlearnRequest, meter: CostMeter, deadline: Deadline) -> Model:
    """Continue training the original model on the retain set only."""
    model = clone_model(req.original)
    return train_classifier(model, req.retain_x, req.retain_y, _hp_recipe(req), stream(int(req.seed)), meter, deadline)


def srl(req: UnlearnRequest, meter: CostMeter, deadline: Deadline) -> Model:
    """Joint training on retain (true labels) and forget (labels redrawn uniformly each epoch)."""
    model = clone_model(req.original)
    recipe = _hp_recipe(req)
    params = model.param_tensors()
    state = SgdState()
    cfg = sgd_config(req.hyperparams, req.recipe)
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
            engine.sgd_step(params, None, state, acfg)
            meter.step(len(idx))
    return model


def ga(req: UnlearnRequest, meter: CostMeter, deadline: Deadline) -> Model:
    """Gradient ascent on the forget set only."""
    model = clone_model(req.original)
    recipe = _hp_recipe(req)
    params = model.param_tensors()
    state = SgdState()
    cfg = sgd_config(req.hyperparams, req.recipe, direction="ascent")
    for epoch in range(recipe.epochs):
        acfg = annealed(cfg, epoch, recipe.epochs)
        gen = stream(int(req.seed), "forget_batches", epoch).generator()
        for idx in epoch_batches(len(req.forget_y), recipe.batch_size, gen):
            deadline.check()
            with Tape():
                loss = cross_entropy(forward(model, req.forget_x[idx]), req.forget_y[idx])
                check_finite_loss(loss)
                backward(loss)
            engine.sgd_step(params, None, state, acfg)
            meter.step(len(idx))
    return model


def ng_plus(req: UnlearnRequest, meter: CostMeter, deadline: Deadline) -> Model:
    """Descent on retain batches interleaved with weighted ascent on forget batches.

    With forget_weight == 0 the ascent steps are skipped entirely, so the
    trajectory reduces to plain fine-tuning bit-exactly.
    """
    model = clone_model(req.original)
    recipe = _hp_recipe(req)
    lam = float(req.hyperparams.get("lambda_f", 0.5))
    params = model.param_tensors()
    state = SgdState()
    cfg_down = sgd_config(req.hyperparams, req.recipe)
    cfg_up = sgd_config(req.hyperparams, req.recipe, direction="ascent")
    n_f = len(req.forget_y)
    for epoch in range(recipe.epochs):
        acfg_down = annealed(cfg_down, epoch, recipe.epochs)
        acfg_up = annealed(cfg_up, epoch, recipe.epochs)
        rgen = stream(int(req.seed), "retain_batches", epoch).generator()
        fbatches = epoch_batches(n_f, recipe.batch_size, stream(int(req.seed), "forget_batches", epoch).generator())
        for bi, idx in enumerate(epoch_batches(len(req.retain_y), recipe.batch_size, rgen)):
            deadline.check()
            with Tape():
                loss = cross_entropy(forward(model, req.retain_x[idx]), req.retain_y[idx])
                check_finite_loss(loss)
                backward(loss)
            engine.sgd_step(params, None, state, acfg_down)
            meter.step(len(idx))
            if lam > 0:
                fidx = fbatches[bi % len(fbatches)]
                with Tape():
                    loss = engine.scale(cross_entropy(forward(model, req.forget_x[fidx]), req.forget_y[fidx]), lam)
                    check_finite_loss(loss)
                    backward(loss)
                engine.sgd_step(params, None, state, acfg_up)
                meter.step(len(fidx))
    return model
