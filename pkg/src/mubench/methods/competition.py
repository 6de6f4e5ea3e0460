"""Competition-born methods: forgetting phases, weight surgery, noise schedules."""

from __future__ import annotations

import math

import numpy as np

from .. import engine
from ..engine import SgdState, Tape, Tensor, backward, cross_entropy, inject_noise, kl_divergence, no_grad
from ..errors import MethodInapplicable
from ..rng import stream
from ..zoo import Model, clone_model, forward, forward_embedding, fresh_layer_values
from .common import (
    CostMeter,
    Deadline,
    UnlearnRequest,
    check_finite_loss,
    entropy_column,
    epoch_batches,
    inverse_frequency_weights,
    annealed,
    masked_sgd_step,
    mean_cosine_similarity,
    mean_grads,
    sgd_config,
    soft_cross_entropy,
    train_classifier,
    weighted_ce,
)
from .baselines import _hp_recipe


def _conv_layers(model: Model) -> list:
    return [n for n in model.layer_names() if n.startswith("conv")]


def _require_conv(model: Model, method_id: str) -> list:
    convs = _conv_layers(model)
    if not convs:
        raise MethodInapplicable(f"{method_id} requires convolutional layers, model has none")
    return convs


def fcs(req: UnlearnRequest, meter: CostMeter, deadline: Deadline) -> Model:
    """Phase 1 pushes forget-set outputs toward uniform; phase 2 fine-tunes on
    retain while separating retain/forget embeddings."""
    model = clone_model(req.original)
    hp = req.hyperparams
    p1 = int(hp.get("phase1_epochs", 1))
    p2 = int(hp.get("phase2_epochs", 1))
    weight = float(hp.get("contrastive_weight", 0.5))
    recipe = _hp_recipe(req)
    params = model.param_tensors()
    state = SgdState()
    cfg = sgd_config(hp, req.recipe)
    nc = model.descriptor.class_count
    n_f = len(req.forget_y)
    for epoch in range(p1):
        acfg = annealed(cfg, epoch, p1)
        gen = stream(int(req.seed), "forget_batches", epoch).generator()
        for idx in epoch_batches(n_f, recipe.batch_size, gen):
            deadline.check()
            with Tape():
                logits = forward(model, req.forget_x[idx])
                loss = kl_divergence(logits, Tensor(np.zeros(logits.data.shape)))
                check_finite_loss(loss)
                backward(loss)
            engine.sgd_step(params, None, state, acfg)
            meter.step(len(idx))
    for epoch in range(p2):
        acfg = annealed(cfg, epoch, p2)
        rgen = stream(int(req.seed), "retain_batches", epoch).generator()
        fbatches = epoch_batches(n_f, recipe.batch_size, stream(int(req.seed), "forget_pairs", epoch).generator())
        for bi, idx in enumerate(epoch_batches(len(req.retain_y), recipe.batch_size, rgen)):
            deadline.check()
            with Tape():
                xb = req.retain_x[idx]
                loss = cross_entropy(forward(model, xb), req.retain_y[idx])
                if weight > 0:
                    fidx = fbatches[bi % len(fbatches)]
                    sim = mean_cosine_similarity(forward_embedding(model, xb), forward_embedding(model, req.forget_x[fidx]))
                    loss = engine.add(loss, engine.scale(sim, weight))
                    meter.fwd(len(idx) + len(fidx))
                check_finite_loss(loss)
                backward(loss)
            engine.sgd_step(params, None, state, acfg)
            meter.step(len(idx))
    return model


def _layer_reinit_mask(model: Model, grads: list, rho: float) -> list:
    """Per layer (weights and bias concatenated), mark the floor(rho * n) entries
    with smallest absolute gradient signal."""
    masks = []
    tensors = model.param_tensors()
    for li, name in enumerate(model.layer_names()):
        gw, gb = grads[2 * li], grads[2 * li + 1]
        flat = np.concatenate([np.abs(gw).reshape(-1), np.abs(gb).reshape(-1)])
        m = int(math.floor(rho * flat.size))
        mask = np.zeros(flat.size, dtype=bool)
        if m:
            mask[np.argsort(flat, kind="stable")[:m]] = True
        wsize = gw.size
        masks.append(mask[:wsize].reshape(gw.shape))
        masks.append(mask[wsize:].reshape(gb.shape))
    assert len(masks) == len(tensors)
    return masks


def msg(req: UnlearnRequest, meter: CostMeter, deadline: Deadline) -> Model:
    """Reinitialize the weights with the smallest |retain-sum - forget-sum| gradient
    signal, then fine-tune on retain with dampened updates elsewhere."""
    model = clone_model(req.original)
    hp = req.hyperparams
    rho = float(hp.get("rho", 0.3))
    damp = float(hp.get("dampening", 1.0))
    recipe = _hp_recipe(req)
    gr = mean_grads(model, req.retain_x, req.retain_y, meter)
    gf = mean_grads(model, req.forget_x, req.forget_y, meter)
    signal = [a * len(req.retain_y) - b * len(req.forget_y) for a, b in zip(gr, gf)]
    reinit = _layer_reinit_mask(model, signal, rho)
    for li, name in enumerate(model.layer_names()):
        wmask, bmask = reinit[2 * li], reinit[2 * li + 1]
        if wmask.any() or bmask.any():
            w_new, b_new = fresh_layer_values(model.descriptor, name, stream(int(req.seed), "msg", "reinit", name))
            wt, bt = model.params[name]["w"], model.params[name]["b"]
            wt.data = np.where(wmask, w_new, wt.data)
            bt.data = np.where(bmask, b_new, bt.data)
    params = model.param_tensors()
    scales = [np.where(m, 1.0, damp) for m in reinit]
    state = SgdState()
    cfg = sgd_config(hp, req.recipe)
    for epoch in range(recipe.epochs):
        acfg = annealed(cfg, epoch, recipe.epochs)
        gen = stream(int(req.seed), "retain_batches", epoch).generator()
        for idx in epoch_batches(len(req.retain_y), recipe.batch_size, gen):
            deadline.check()
            with Tape():
                loss = cross_entropy(forward(model, req.retain_x[idx]), req.retain_y[idx])
                check_finite_loss(loss)
                backward(loss)
            masked_sgd_step(params, state, acfg, scales)
            meter.step(len(idx))
    return model


def cfw(req: UnlearnRequest, meter: CostMeter, deadline: Deadline) -> Model:
    """Noise the conv layers, train with inverse-frequency class-weighted CE,
    noise again toward the end, then finish training."""
    convs = _require_conv(req.original, "cfw")
    model = clone_model(req.original)
    hp = req.hyperparams
    recipe = _hp_recipe(req)
    sigma1 = float(hp.get("sigma1", 0.01))
    sigma2 = float(hp.get("sigma2", 0.01))
    final_epochs = min(int(hp.get("final_epochs", 1)), recipe.epochs)
    conv_tensors = [t for name in convs for t in (model.params[name]["w"], model.params[name]["b"])]
    inject_noise(conv_tensors, sigma1, stream(int(req.seed), "cfw", "noise1"))
    weights = inverse_frequency_weights(req.retain_y, model.descriptor.class_count)
    params = model.param_tensors()
    state = SgdState()
    cfg = sgd_config(hp, req.recipe)

    def weighted_epochs(start, stop):
        for epoch in range(start, stop):
            acfg = annealed(cfg, epoch, recipe.epochs)
            gen = stream(int(req.seed), "retain_batches", epoch).generator()
            for idx in epoch_batches(len(req.retain_y), recipe.batch_size, gen):
                deadline.check()
                with Tape():
                    loss = weighted_ce(forward(model, req.retain_x[idx]), req.retain_y[idx], weights)
                    check_finite_loss(loss)
                    backward(loss)
                engine.sgd_step(params, None, state, acfg)
                meter.step(len(idx))

    weighted_epochs(0, recipe.epochs - final_epochs)
    inject_noise(conv_tensors, sigma2, stream(int(req.seed), "cfw", "noise2"))
    weighted_epochs(recipe.epochs - final_epochs, recipe.epochs)
    return model


def prmq(req: UnlearnRequest, meter: CostMeter, deadline: Deadline) -> Model:
    """Prune small weights globally, reinitialize the head, train with an
    entropy-matching term against the original, then round through float16."""
    model = clone_model(req.original)
    hp = req.hyperparams
    frac = float(hp.get("prune_fraction", 0.3))
    mu = float(hp.get("mu", 0.1))
    recipe = _hp_recipe(req)
    weight_tensors = [model.params[name]["w"] for name in model.layer_names()]
    flat = np.concatenate([np.abs(t.data).reshape(-1) for t in weight_tensors])
    m = int(math.floor(frac * flat.size))
    if m:
        cut = np.zeros(flat.size, dtype=bool)
        cut[np.argsort(flat, kind="stable")[:m]] = True
        offset = 0
        for t in weight_tensors:
            n = t.data.size
            t.data = np.where(cut[offset : offset + n].reshape(t.data.shape), 0.0, t.data)
            offset += n
    head = model.layer_names()[-1]
    w_new, b_new = fresh_layer_values(model.descriptor, head, stream(int(req.seed), "prmq", "reinit"))
    model.params[head]["w"].data = w_new
    model.params[head]["b"].data = b_new
    params = model.param_tensors()
    state = SgdState()
    cfg = sgd_config(hp, req.recipe)
    for epoch in range(recipe.epochs):
        acfg = annealed(cfg, epoch, recipe.epochs)
        gen = stream(int(req.seed), "retain_batches", epoch).generator()
        for idx in epoch_batches(len(req.retain_y), recipe.batch_size, gen):
            deadline.check()
            xb, yb = req.retain_x[idx], req.retain_y[idx]
            with no_grad():
                ent_o = entropy_column(forward(req.original, xb)).data
            meter.fwd(len(idx))
            with Tape():
                logits = forward(model, xb)
                loss = cross_entropy(logits, yb)
                if mu > 0:
                    diff = engine.add(entropy_column(logits), Tensor(-ent_o))
                    loss = engine.add(loss, engine.scale(engine.mean(engine.mul(diff, diff)), mu))
                check_finite_loss(loss)
                backward(loss)
            engine.sgd_step(params, None, state, acfg)
            meter.step(len(idx))
    for t in model.param_tensors():
        t.data = t.data.astype(np.float16).astype(np.float64)
    return model


def ct(req: UnlearnRequest, meter: CostMeter, deadline: Deadline) -> Model:
    """Swap the spatial axes of every conv kernel, then fine-tune on retain."""
    convs = _require_conv(req.original, "ct")
    model = clone_model(req.original)
    for name in convs:
        w = model.params[name]["w"]
        w.data = np.ascontiguousarray(w.data.swapaxes(2, 3))
    return train_classifier(
        model, req.retain_x, req.retain_y, _hp_recipe(req), stream(int(req.seed)), meter, deadline
    )


def kde(req: UnlearnRequest, meter: CostMeter, deadline: Deadline) -> Model:
    """Distill the original (teacher) into a student whose first and last layers
    are reinitialized: KL on validation, then a three-term loss on retain."""
    model = clone_model(req.original)
    hp = req.hyperparams
    recipe = _hp_recipe(req)
    names = model.layer_names()
    for name in (names[0], names[-1]):
        w_new, b_new = fresh_layer_values(model.descriptor, name, stream(int(req.seed), "kde", "reinit", name))
        model.params[name]["w"].data = w_new
        model.params[name]["b"].data = b_new
    params = model.param_tensors()
    state = SgdState()
    cfg = sgd_config(hp, req.recipe)
    p1 = int(hp.get("phase1_epochs", 1))
    p2 = int(hp.get("phase2_epochs", 1))
    w1 = float(hp.get("w1", 1.0))
    w2 = float(hp.get("w2", 1.0))
    w3 = float(hp.get("w3", 1.0))
    temp = float(hp.get("temperature", 2.0))
    for epoch in range(p1):
        acfg = annealed(cfg, epoch, p1)
        gen = stream(int(req.seed), "val_batches", epoch).generator()
        for idx in epoch_batches(len(req.val_y), recipe.batch_size, gen):
            deadline.check()
            xb = req.val_x[idx]
            with no_grad():
                t_logits = forward(req.original, xb).data
            meter.fwd(len(idx))
            with Tape():
                loss = kl_divergence(forward(model, xb), Tensor(t_logits))
                check_finite_loss(loss)
                backward(loss)
            engine.sgd_step(params, None, state, acfg)
            meter.step(len(idx))
    for epoch in range(p2):
        acfg = annealed(cfg, epoch, p2)
        gen = stream(int(req.seed), "retain_batches", epoch).generator()
        for idx in epoch_batches(len(req.retain_y), recipe.batch_size, gen):
            deadline.check()
            xb, yb = req.retain_x[idx], req.retain_y[idx]
            with no_grad():
                t_logits = forward(req.original, xb).data
            meter.fwd(len(idx))
            with Tape():
                logits = forward(model, xb)
                loss = engine.add(
                    engine.add(
                        engine.scale(soft_cross_entropy(logits, t_logits, temp), w1),
                        engine.scale(cross_entropy(logits, yb), w2),
                    ),
                    engine.scale(kl_divergence(logits, Tensor(t_logits)), w3),
                )
                check_finite_loss(loss)
                backward(loss)
            engine.sgd_step(params, None, state, acfg)
            meter.step(len(idx))
    return model


def rni(req: UnlearnRequest, meter: CostMeter, deadline: Deadline) -> Model:
    """Reinitialize the head, then train epoch-by-epoch with noise injected into
    one uniformly drawn layer before each epoch."""
    model = clone_model(req.original)
    hp = req.hyperparams
    recipe = _hp_recipe(req)
    sigma = float(hp.get("sigma", 0.01))
    names = model.layer_names()
    head = names[-1]
    w_new, b_new = fresh_layer_values(model.descriptor, head, stream(int(req.seed), "rni", "reinit"))
    model.params[head]["w"].data = w_new
    model.params[head]["b"].data = b_new
    params = model.param_tensors()
    state = SgdState()
    cfg = sgd_config(hp, req.recipe)
    for epoch in range(recipe.epochs):
        acfg = annealed(cfg, epoch, recipe.epochs)
        pick = int(stream(int(req.seed), "rni", "layer", epoch).generator().integers(0, len(names)))
        layer = model.params[names[pick]]
        inject_noise([layer["w"], layer["b"]], sigma, stream(int(req.seed), "rni", "noise", epoch))
        gen = stream(int(req.seed), "retain_batches", epoch).generator()
        for idx in epoch_batches(len(req.retain_y), recipe.batch_size, gen):
            deadline.check()
            with Tape():
                loss = cross_entropy(forward(model, req.retain_x[idx]), req.retain_y[idx])
                check_finite_loss(loss)
                backward(loss)
            engine.sgd_step(params, None, state, acfg)
            meter.step(len(idx))
    return model
