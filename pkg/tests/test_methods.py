"""Unlearning method behavior: reduction identities, frozen regions, masks,
Fisher math, and dispatcher containment.

The reduction identities double as fast exactness checks: with its budget or
extra term zeroed, each method must reproduce either the untouched original or
the plain fine-tuning trajectory bit for bit.
"""

import numpy as np
import pytest

from mubench.data import make_splits, synth_blobs
from mubench.errors import BadHyperparams, MethodInapplicable, UnknownMethod
from mubench.methods import (
    METHODS,
    CostMeter,
    Deadline,
    TrainRecipe,
    UnlearnRequest,
    catalog,
    run_method,
    validate_hyperparams,
)
from mubench.methods import baselines, competition, literature
from mubench.methods.common import fisher_diagonal
from mubench.rng import stream
from mubench.zoo import (
    clone_model,
    forward,
    init_model,
    mlp_descriptor,
    small_cnn_descriptor,
)

SMOKE_HP = {
    "retrain": {},
    "ft": {"epochs": 1, "lr": 0.05, "wd": 5e-4},
    "srl": {"epochs": 1, "lr": 0.05, "wd": 5e-4},
    "ga": {"epochs": 1, "lr": 1e-4, "wd": 1e-5},
    "ng_plus": {"epochs": 1, "lr": 0.05, "wd": 5e-4, "lambda_f": 0.2},
    "fcs": {"phase1_epochs": 1, "phase2_epochs": 1, "lr": 0.02, "wd": 5e-4, "contrastive_weight": 0.5},
    "msg": {"epochs": 1, "lr": 0.05, "wd": 5e-4, "rho": 0.3, "dampening": 0.5},
    "cfw": {"epochs": 2, "final_epochs": 1, "lr": 0.05, "wd": 5e-4, "sigma1": 0.05, "sigma2": 0.01},
    "prmq": {"epochs": 1, "lr": 0.05, "wd": 5e-4, "prune_fraction": 0.3, "mu": 0.1},
    "ct": {"epochs": 1, "lr": 0.05, "wd": 5e-4},
    "kde": {
        "phase1_epochs": 1,
        "phase2_epochs": 1,
        "lr": 0.02,
        "wd": 5e-4,
        "w1": 0.5,
        "w2": 0.5,
        "w3": 0.3,
        "temperature": 2.0,
    },
    "rni": {"epochs": 1, "lr": 0.05, "wd": 5e-4, "sigma": 0.05},
    "ff": {"lambda": 1e-6, "fisher_samples": 16},
    "iu": {"alpha": 0.5, "damping": 0.1, "fisher_samples": 16},
    "cf_k": {"k": 1, "epochs": 1, "lr": 0.05, "wd": 5e-4},
    "eu_k": {"k": 1, "epochs": 1, "lr": 0.05, "wd": 5e-4},
    "scrub": {"max_epochs": 1, "epochs": 1, "lr": 0.02, "wd": 5e-4, "w_kl": 0.5, "w_ce": 1.0},
    "salun": {"epochs": 1, "lr": 0.05, "wd": 5e-4, "rho": 0.5},
    "bt": {"epochs": 1, "lr": 0.02, "wd": 5e-4, "w_r": 1.0, "w_f": 0.5},
}


def to_vec(model) -> np.ndarray:
    return np.concatenate([t.data.reshape(-1) for t in model.param_tensors()])


@pytest.fixture(scope="module")
def bench():
    corpus = synth_blobs(300, 10, dim=48, separation=6.0, seed=7)
    splits = make_splits(corpus, seed=123)
    desc = small_cnn_descriptor(corpus.input_shape, 10)
    original = init_model(desc, seed=0)
    recipe = TrainRecipe(epochs=2, learning_rate=0.05, batch_size=64)
    rx, ry = corpus.gather(splits.retain)
    fx, fy = corpus.gather(splits.forget)
    vx, vy = corpus.gather(splits.val)
    return {"original": original, "recipe": recipe, "rx": rx, "ry": ry, "fx": fx, "fy": fy, "vx": vx, "vy": vy}


def make_req(bench, method_id, hp, seed=5, original=None, budget=None):
    return UnlearnRequest(
        original=original if original is not None else bench["original"],
        retain_x=bench["rx"],
        retain_y=bench["ry"],
        forget_x=bench["fx"],
        forget_y=bench["fy"],
        val_x=bench["vx"],
        val_y=bench["vy"],
        method_id=method_id,
        hyperparams=hp,
        seed=seed,
        recipe=bench["recipe"],
        wall_clock_budget=budget,
    )


def run_fn(bench, method_id, hp, **kw):
    req = make_req(bench, method_id, hp, **kw)
    return METHODS[method_id].fn(req, CostMeter(), Deadline(None))


class TestReductionIdentities:
    """Zero budgets and switched-off terms must reproduce exact reference trajectories."""

    @pytest.mark.parametrize(
        "method_id,hp",
        [
            ("ft", {"epochs": 0, "lr": 0.05, "wd": 5e-4}),
            ("srl", {"epochs": 0, "lr": 0.05, "wd": 5e-4}),
            ("ga", {"epochs": 0, "lr": 1e-4, "wd": 1e-5}),
            ("ng_plus", {"epochs": 0, "lr": 0.05, "wd": 5e-4, "lambda_f": 0.2}),
            ("scrub", {"max_epochs": 0, "epochs": 0, "lr": 0.02, "wd": 5e-4, "w_kl": 0.5, "w_ce": 1.0}),
            ("bt", {"epochs": 0, "lr": 0.02, "wd": 5e-4, "w_r": 1.0, "w_f": 0.5}),
            ("salun", {"epochs": 2, "lr": 0.05, "wd": 5e-4, "rho": 0.0}),
            ("ff", {"lambda": 0.0, "fisher_samples": 16}),
            ("iu", {"alpha": 0.0, "damping": 0.1, "fisher_samples": 16}),
            ("cf_k", {"k": 1, "epochs": 0, "lr": 0.05, "wd": 5e-4}),
            ("fcs", {"phase1_epochs": 0, "phase2_epochs": 0, "lr": 0.02, "wd": 5e-4, "contrastive_weight": 0.5}),
            ("kde", {"phase1_epochs": 0, "phase2_epochs": 0, "lr": 0.02, "wd": 5e-4, "w1": 1.0, "w2": 1.0, "w3": 1.0, "temperature": 2.0}),
            ("rni", {"epochs": 0, "lr": 0.05, "wd": 5e-4, "sigma": 0.05}),
            ("msg", {"epochs": 0, "lr": 0.05, "wd": 5e-4, "rho": 0.0, "dampening": 1.0}),
            ("prmq", {"epochs": 0, "lr": 0.05, "wd": 5e-4, "prune_fraction": 0.0, "mu": 0.1}),
        ],
    )
    def test_zero_budget_matches_original(self, bench, method_id, hp):
        before = to_vec(bench["original"])
        model = run_fn(bench, method_id, hp)
        after = to_vec(model)
        names = model.layer_names()
        if method_id in ("kde", "rni", "prmq"):
            # These reinitialize a fixed layer set before any training; the
            # untouched remainder must stay bit-identical.
            reinit = {names[0], names[-1]} if method_id == "kde" else {names[-1]}
            for name in names:
                w_o = bench["original"].params[name]["w"].data
                w_u = model.params[name]["w"].data
                if name in reinit:
                    assert not np.array_equal(w_u, w_o)
                else:
                    if method_id == "prmq":
                        w_o = w_o.astype(np.float16).astype(np.float64)
                    assert np.array_equal(w_u, w_o)
        else:
            assert np.array_equal(after, before)
        assert np.array_equal(to_vec(bench["original"]), before), "original must never be mutated"

    def test_ng_plus_reduces_to_ft(self, bench):
        hp = {"epochs": 2, "lr": 0.05, "wd": 5e-4}
        ft = run_fn(bench, "ft", hp)
        ng = run_fn(bench, "ng_plus", hp | {"lambda_f": 0.0})
        assert np.array_equal(to_vec(ft), to_vec(ng))

    def test_fcs_reduces_to_ft(self, bench):
        ft = run_fn(bench, "ft", {"epochs": 2, "lr": 0.02, "wd": 5e-4})
        fcs = run_fn(
            bench,
            "fcs",
            {"phase1_epochs": 0, "phase2_epochs": 2, "lr": 0.02, "wd": 5e-4, "contrastive_weight": 0.0},
        )
        assert np.array_equal(to_vec(ft), to_vec(fcs))

    def test_msg_reduces_to_ft(self, bench):
        hp = {"epochs": 2, "lr": 0.05, "wd": 5e-4}
        ft = run_fn(bench, "ft", hp)
        msg = run_fn(bench, "msg", hp | {"rho": 0.0, "dampening": 1.0})
        assert np.array_equal(to_vec(ft), to_vec(msg))

    def test_salun_full_mask_is_srl(self, bench):
        hp = {"epochs": 2, "lr": 0.05, "wd": 5e-4}
        srl = run_fn(bench, "srl", hp)
        sal = run_fn(bench, "salun", hp | {"rho": 1.0})
        assert np.array_equal(to_vec(srl), to_vec(sal))

    def test_cfw_zero_noise_is_weighted_ft(self, bench):
        a = run_fn(bench, "cfw", {"epochs": 2, "final_epochs": 1, "lr": 0.05, "wd": 5e-4, "sigma1": 0.0, "sigma2": 0.0})
        b = run_fn(bench, "cfw", {"epochs": 2, "final_epochs": 2, "lr": 0.05, "wd": 5e-4, "sigma1": 0.0, "sigma2": 0.0})
        # with both noise injections disabled the phase boundary is invisible
        assert np.array_equal(to_vec(a), to_vec(b))


class TestStructuralEdits:
    def test_ct_transposes_conv_kernels_only(self, bench):
        model = run_fn(bench, "ct", {"epochs": 0, "lr": 0.05, "wd": 5e-4})
        for name in model.layer_names():
            w_o = bench["original"].params[name]["w"].data
            w_u = model.params[name]["w"].data
            if name.startswith("conv"):
                assert np.array_equal(w_u, w_o.swapaxes(2, 3))
            else:
                assert np.array_equal(w_u, w_o)

    def test_ct_twice_restores_kernels(self, bench):
        once = run_fn(bench, "ct", {"epochs": 0, "lr": 0.05, "wd": 5e-4})
        again = run_fn(bench, "ct", {"epochs": 0, "lr": 0.05, "wd": 5e-4}, original=once)
        assert np.array_equal(to_vec(again), to_vec(bench["original"]))

    @pytest.mark.parametrize("method_id", ["ct", "cfw"])
    def test_conv_methods_reject_mlp(self, bench, method_id):
        desc = mlp_descriptor((1, 1, 48), 10, hidden_widths=(16,))
        mlp = init_model(desc, seed=0)
        req = make_req(bench, method_id, SMOKE_HP[method_id], original=mlp)
        with pytest.raises(MethodInapplicable):
            METHODS[method_id].fn(req, CostMeter(), Deadline(None))
        out = run_method(req)
        assert out.failed and "MethodInapplicable" in out.failure_reason

    def test_cf_k_freezes_early_layers(self, bench):
        model = run_fn(bench, "cf_k", {"k": 1, "epochs": 2, "lr": 0.05, "wd": 5e-4})
        names = model.layer_names()
        for name in names[:-1]:
            assert np.array_equal(model.params[name]["w"].data, bench["original"].params[name]["w"].data)
        assert not np.array_equal(model.params[names[-1]]["w"].data, bench["original"].params[names[-1]]["w"].data)

    def test_eu_k_reinitializes_trained_block(self, bench):
        frozen = run_fn(bench, "eu_k", {"k": 2, "epochs": 0, "lr": 0.05, "wd": 5e-4})
        names = frozen.layer_names()
        for name in names[:-2]:
            assert np.array_equal(frozen.params[name]["w"].data, bench["original"].params[name]["w"].data)
        for name in names[-2:]:
            assert not np.array_equal(frozen.params[name]["w"].data, bench["original"].params[name]["w"].data)

    def test_eu_k_differs_from_cf_k(self, bench):
        hp = {"k": 1, "epochs": 1, "lr": 0.05, "wd": 5e-4}
        assert not np.array_equal(to_vec(run_fn(bench, "cf_k", hp)), to_vec(run_fn(bench, "eu_k", hp)))

    def test_prmq_prunes_expected_count(self, bench):
        frac = 0.5
        model = run_fn(bench, "prmq", {"epochs": 0, "lr": 0.05, "wd": 5e-4, "prune_fraction": frac, "mu": 0.0})
        names = bench["original"].layer_names()
        weights = [bench["original"].params[n]["w"].data for n in names]
        flat = np.concatenate([np.abs(w).reshape(-1) for w in weights])
        m = int(np.floor(frac * flat.size))
        cut = np.zeros(flat.size, dtype=bool)
        cut[np.argsort(flat, kind="stable")[:m]] = True
        offset = 0
        for name, w in zip(names, weights):
            mask = cut[offset : offset + w.size].reshape(w.shape)
            offset += w.size
            if name == names[-1]:
                continue  # head is reinitialized after pruning
            expect = np.where(mask, 0.0, w).astype(np.float16).astype(np.float64)
            assert np.array_equal(model.params[name]["w"].data, expect)

    def test_prmq_half_precision_idempotent(self, bench):
        model = run_fn(bench, "prmq", SMOKE_HP["prmq"])
        for t in model.param_tensors():
            assert np.array_equal(t.data, t.data.astype(np.float16).astype(np.float64))

    def test_msg_mask_counts_per_layer(self, bench):
        rho = 0.4
        grads = [np.abs(np.random.default_rng(0).normal(size=s)) for s in [(4, 3), (3,), (6, 2), (2,)]]

        class Fake:
            def layer_names(self):
                return ["conv1", "fc1"]

            def param_tensors(self):
                return list(range(4))

        masks = competition._layer_reinit_mask(Fake(), grads, rho)
        for li in range(2):
            total = grads[2 * li].size + grads[2 * li + 1].size
            marked = int(masks[2 * li].sum()) + int(masks[2 * li + 1].sum())
            assert marked == int(np.floor(rho * total))
        # marked entries carry the smallest absolute signal
        flat = np.concatenate([np.abs(grads[0]).reshape(-1), np.abs(grads[1])])
        chosen = np.concatenate([masks[0].reshape(-1), masks[1]])
        if chosen.any() and (~chosen).any():
            assert flat[chosen].max() <= flat[~chosen].min()


class TestFisher:
    def test_matches_logistic_closed_form(self):
        """For a linear softmax model the diagonal Fisher of parameter W[j, c]
        is exactly p_c (1 - p_c) x_j^2, and 1-sample estimates must hit it."""
        desc = mlp_descriptor((1, 1, 3), 2, hidden_widths=())
        model = init_model(desc, seed=1)
        gen = np.random.default_rng(2)
        x = gen.normal(size=(1, 1, 1, 3))
        logits = forward(model, x).data[0]
        e = np.exp(logits - logits.max())
        p = e / e.sum()
        fw, fb = fisher_diagonal(model, x, CostMeter(), max_samples=0, rng=stream(0, "f"))
        xj = x.reshape(3)
        expect_w = np.outer(xj**2, p * (1 - p))
        expect_b = p * (1 - p)
        assert np.allclose(fw, expect_w, atol=1e-10)
        assert np.allclose(fb, expect_b, atol=1e-10)

    def test_multi_sample_average(self):
        desc = mlp_descriptor((1, 1, 2), 2, hidden_widths=())
        model = init_model(desc, seed=3)
        gen = np.random.default_rng(4)
        x = gen.normal(size=(3, 1, 1, 2))
        full = fisher_diagonal(model, x, CostMeter(), max_samples=0, rng=stream(0, "f"))
        singles = [fisher_diagonal(model, x[i : i + 1], CostMeter(), max_samples=0, rng=stream(0, "f")) for i in range(3)]
        for k in range(2):
            assert np.allclose(full[k], np.mean([s[k] for s in singles], axis=0), atol=1e-12)

    def test_subsample_deterministic(self, bench):
        a = fisher_diagonal(bench["original"], bench["rx"], CostMeter(), max_samples=8, rng=stream(0, "f"))
        b = fisher_diagonal(bench["original"], bench["rx"], CostMeter(), max_samples=8, rng=stream(0, "f"))
        for u, v in zip(a, b):
            assert np.array_equal(u, v)

    def test_iu_update_linear_in_alpha(self, bench):
        base = to_vec(bench["original"])
        hp = {"damping": 0.1, "fisher_samples": 16}
        one = to_vec(run_fn(bench, "iu", hp | {"alpha": 0.5}))
        two = to_vec(run_fn(bench, "iu", hp | {"alpha": 1.0}))
        assert np.allclose(two - base, 2.0 * (one - base), atol=1e-12)

    def test_iu_damping_shrinks_update(self, bench):
        hp = {"alpha": 1.0, "fisher_samples": 16}
        base = to_vec(bench["original"])
        soft = np.linalg.norm(to_vec(run_fn(bench, "iu", hp | {"damping": 0.01})) - base)
        hard = np.linalg.norm(to_vec(run_fn(bench, "iu", hp | {"damping": 100.0})) - base)
        assert hard < soft / 50

    def test_ff_noise_scales_with_lambda(self, bench):
        base = to_vec(bench["original"])
        hp = {"fisher_samples": 16}
        small = np.linalg.norm(to_vec(run_fn(bench, "ff", hp | {"lambda": 1e-8})) - base)
        large = np.linalg.norm(to_vec(run_fn(bench, "ff", hp | {"lambda": 1e-4})) - base)
        assert large > small * 10


class TestDispatcher:
    def test_all_methods_deterministic(self, bench):
        for method_id in METHODS:
            a = run_method(make_req(bench, method_id, SMOKE_HP[method_id]))
            b = run_method(make_req(bench, method_id, SMOKE_HP[method_id]))
            assert not a.failed and not b.failed, method_id
            assert np.array_equal(to_vec(a.model), to_vec(b.model)), method_id
            assert a.step_cost == b.step_cost, method_id

    def test_seed_changes_stochastic_methods(self, bench):
        a = run_method(make_req(bench, "ft", SMOKE_HP["ft"], seed=5))
        b = run_method(make_req(bench, "ft", SMOKE_HP["ft"], seed=6))
        assert not np.array_equal(to_vec(a.model), to_vec(b.model))

    def test_retrain_ignores_original_weights(self, bench):
        other = init_model(bench["original"].descriptor, seed=99)
        a = run_method(make_req(bench, "retrain", {}))
        b = run_method(make_req(bench, "retrain", {}, original=other))
        assert np.array_equal(to_vec(a.model), to_vec(b.model))

    def test_unknown_method(self, bench):
        with pytest.raises(UnknownMethod):
            run_method(make_req(bench, "mystery", {}))

    def test_missing_hyperparam(self, bench):
        with pytest.raises(BadHyperparams):
            run_method(make_req(bench, "ft", {"lr": 0.05, "wd": 5e-4}))

    def test_out_of_range_hyperparam(self, bench):
        with pytest.raises(BadHyperparams):
            run_method(make_req(bench, "ft", {"epochs": 1, "lr": 5.0, "wd": 5e-4}))

    def test_non_integer_epochs(self, bench):
        with pytest.raises(BadHyperparams):
            run_method(make_req(bench, "ft", {"epochs": 1.5, "lr": 0.05, "wd": 5e-4}))

    def test_zero_allowed_for_log_scale(self, bench):
        out = run_method(make_req(bench, "ff", {"lambda": 0.0, "fisher_samples": 16}))
        assert not out.failed
        assert np.array_equal(to_vec(out.model), to_vec(bench["original"]))

    def test_below_log_low_rejected(self, bench):
        with pytest.raises(BadHyperparams):
            run_method(make_req(bench, "ff", {"lambda": 1e-30, "fisher_samples": 16}))

    def test_budget_exceeded_is_contained(self, bench):
        out = run_method(make_req(bench, "ft", SMOKE_HP["ft"], budget=0.0))
        assert out.failed and "BudgetExceeded" in out.failure_reason
        assert out.model is None
        assert out.runtime_seconds > 0

    def test_non_finite_model_is_contained(self, bench):
        broken = clone_model(bench["original"])
        broken.params[broken.layer_names()[0]]["w"].data[0] = np.nan
        out = run_method(make_req(bench, "ft", {"epochs": 0, "lr": 0.05, "wd": 5e-4}, original=broken))
        assert out.failed and "NonFiniteLoss" in out.failure_reason

    def test_step_cost_counts_sample_passes(self, bench):
        out = run_method(make_req(bench, "ft", {"epochs": 1, "lr": 0.05, "wd": 5e-4}))
        assert out.step_cost == 3 * len(bench["ry"])
        out0 = run_method(make_req(bench, "ft", {"epochs": 0, "lr": 0.05, "wd": 5e-4}))
        assert out0.step_cost == 0

    def test_catalog_covers_registry(self):
        cat = catalog()
        ids = [m["id"] for m in cat["methods"]]
        assert ids == list(METHODS)
        by_id = {m["id"]: m for m in cat["methods"]}
        assert by_id["cfw"]["requires_conv"] and by_id["ct"]["requires_conv"]
        assert not by_id["ft"]["requires_conv"]
        assert {h["name"] for h in by_id["scrub"]["hyperparams"]} == {"max_epochs", "epochs", "lr", "wd", "w_kl", "w_ce"}

    def test_validate_accepts_registered_smoke_configs(self):
        for method_id, hp in SMOKE_HP.items():
            validate_hyperparams(METHODS[method_id], hp)
