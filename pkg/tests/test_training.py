import itertools

import numpy as np
import pytest

from gslmpp.config import RunConfig
from gslmpp.data import SplitMask, from_smiles
from gslmpp.tensor import Tape, Tensor, backward
from gslmpp.training import (Adam, DivergenceError, LossConfig, Model, ScheduleConfig, build_context,
                             compute_losses, fit, forward, gsl_loss_classification, gsl_loss_regression,
                             pred_loss, predict, sample_upper_pairs, total_loss)

from oracles import central_difference

SIX = ["CCO", "CCN", "c1ccccc1O", "CC(=O)O", "CCCCl", "c1ccncc1"]
TEN = SIX + ["CC(C)O", "OCCO", "c1ccccc1C", "CC#N"]


class TestPredict:
    def test_zero_head_gives_half_probability(self):
        out = predict(Tensor(np.ones((3, 4))), Tensor(np.zeros((4, 2))), Tensor(np.zeros(2))).data
        np.testing.assert_array_equal(out, 0.0)

    def test_scalar_head(self):
        out = predict(Tensor(np.array([[2.0]])), Tensor(np.array([[1.5]])), Tensor(np.array([-0.5]))).data
        assert out[0, 0] == 2.5

    def test_width_is_task_count(self):
        out = predict(Tensor(np.ones((3, 4))), Tensor(np.ones((4, 27))), Tensor(np.zeros(27)))
        assert out.shape == (3, 27)


class TestPredLoss:
    def test_regression_identity(self):
        y = np.array([[1.0], [2.0], [-3.0]])
        loss = pred_loss(Tensor(y.copy()), y, np.ones_like(y, dtype=bool), [0, 1, 2], "regression")
        assert float(loss.data) == 0.0

    def test_classification_two_samples(self):
        y = np.array([[1.0], [0.0]])
        loss = pred_loss(Tensor(np.zeros((2, 1))), y, np.ones((2, 1), dtype=bool), [0, 1], "classification")
        assert float(loss.data) == pytest.approx(np.log(2.0), abs=1e-15)

    def test_missing_labels_are_masked(self):
        y = np.array([[1.0, np.nan], [0.0, 1.0]])
        present = ~np.isnan(y)
        z = Tensor(np.array([[0.0, 100.0], [0.0, 0.0]]))
        loss = pred_loss(z, y, present, [0, 1], "classification")
        assert float(loss.data) == pytest.approx(np.log(2.0), abs=1e-12)

    def test_only_selected_rows(self):
        y = np.array([[0.0], [5.0]])
        loss = pred_loss(Tensor(np.zeros((2, 1))), y, np.ones((2, 1), dtype=bool), [0], "regression")
        assert float(loss.data) == 0.0

    def test_empty_mask_raises(self):
        with pytest.raises(ValueError):
            pred_loss(Tensor(np.zeros((2, 1))), np.zeros((2, 1)), np.ones((2, 1), dtype=bool), [], "regression")


class TestGslLosses:
    def test_perfect_adjacency_gives_zero(self):
        y = np.array([1.0, 1.0, 0.0, 0.0])
        a_star = (y[:, None] == y[None, :]).astype(float)
        loss = gsl_loss_classification(Tensor(a_star), y, np.ones(4, dtype=bool), [0, 1, 2, 3])
        assert float(loss.data) == 0.0

    def test_same_label_missing_edge_costs_one(self):
        y = np.array([1.0, 1.0])
        loss = gsl_loss_classification(Tensor(np.eye(2)), y, np.ones(2, dtype=bool), [0, 1], raw_sum=True)
        assert float(loss.data) == 1.0

    def test_three_molecule_pair_enumeration(self):
        y = np.array([1.0, 1.0, 0.0])
        a = np.array([[1.0, 0.3, 0.6], [0.3, 1.0, 0.2], [0.6, 0.2, 1.0]])
        expected = sum((a[i, j] - float(y[i] == y[j])) ** 2 for i, j in itertools.combinations(range(3), 2))
        loss = gsl_loss_classification(Tensor(a), y, np.ones(3, dtype=bool), [0, 1, 2], raw_sum=True)
        assert float(loss.data) == pytest.approx(expected, abs=1e-15)
        mean = gsl_loss_classification(Tensor(a), y, np.ones(3, dtype=bool), [0, 1, 2])
        assert float(mean.data) == pytest.approx(expected / 3, abs=1e-15)

    def test_multitask_target_is_agreement_fraction(self):
        y = np.array([[1.0, 0.0, np.nan], [1.0, 1.0, 1.0]])
        present = ~np.isnan(y)
        loss = gsl_loss_classification(Tensor(np.zeros((2, 2))), y, present, [0, 1], raw_sum=True)
        assert float(loss.data) == pytest.approx(0.25)

    def test_regression_all_zero(self):
        y = np.array([0.0, 1.0, 2.0])
        loss = gsl_loss_regression(Tensor(np.zeros((3, 3))), y, np.ones(3, dtype=bool), [0, 1, 2], 0.01)
        assert float(loss.data) == 0.0

    def test_regression_close_targets_give_empty_set(self):
        y = np.array([0.0, 0.005, 0.009])
        loss = gsl_loss_regression(Tensor(np.ones((3, 3))), y, np.ones(3, dtype=bool), [0, 1, 2], 0.01)
        assert float(loss.data) == 0.0

    def test_regression_pair_selection(self):
        y = np.array([0.0, 1.0, 1.005])
        a = np.array([[1.0, 0.4, 0.7], [0.4, 1.0, 0.9], [0.7, 0.9, 1.0]])
        loss = gsl_loss_regression(Tensor(a), y, np.ones(3, dtype=bool), [0, 1, 2], 0.01, raw_sum=True)
        assert float(loss.data) == pytest.approx(0.4 ** 2 + 0.7 ** 2, abs=1e-15)

    def test_total_loss_combination(self):
        assert float(total_loss(Tensor(np.asarray(1.0)), Tensor(np.asarray(2.0)), 0.3).data) == pytest.approx(1.6)
        assert float(total_loss(Tensor(np.asarray(1.0)), Tensor(np.asarray(2.0)), 0.0).data) == 1.0
        assert float(total_loss(Tensor(np.asarray(1.0)), Tensor(np.asarray(0.0)), 1.0).data) == 1.0

    def test_loss_config_validation(self):
        with pytest.raises(ValueError):
            LossConfig("regression", eps_y=0.0)


class TestSchedule:
    def test_warmup_reaches_max(self):
        s = ScheduleConfig(max_lr=1e-3)
        assert s.lr_at(0) == pytest.approx(5e-4)
        assert s.lr_at(1) == 1e-3

    def test_last_epoch_is_final_lr(self):
        assert ScheduleConfig(max_lr=1e-3).lr_at(299) == 1e-9

    def test_midpoint(self):
        s = ScheduleConfig(max_lr=1e-3, max_epoch=7)
        # decay runs over epochs 2..6, so epoch 4 is halfway
        assert s.lr_at(4) == pytest.approx((1e-3 + 1e-9) / 2, abs=1e-12)

    def test_monotone_decay(self):
        s = ScheduleConfig(max_lr=1e-2)
        lrs = [s.lr_at(e) for e in range(2, 300)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            ScheduleConfig().lr_at(300)
        with pytest.raises(ValueError):
            ScheduleConfig().lr_at(-1)


class TestAdam:
    def test_first_step_moves_by_lr(self):
        p = Tensor(np.array([1.0, -1.0]), requires_grad=True)
        p.grad = np.array([0.5, -2.0])
        Adam([p]).step(0.1)
        np.testing.assert_allclose(p.data, [0.9, -0.9], atol=1e-7)

    def test_skips_params_without_grad(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        Adam([p], weight_decay=0.1).step(0.1)
        assert p.data[0] == 1.0

    def test_minimises_quadratic(self):
        p = Tensor(np.array([3.0, -2.0]), requires_grad=True)
        opt = Adam([p])
        for _ in range(500):
            p.grad = 2 * p.data
            opt.step(0.05)
        assert np.abs(p.data).max() < 1e-2


def _toy(task, smiles=SIX):
    if task == "classification":
        labels = [1, 0, 1, 0, 1, 1, 0, 1, 1, 0][:len(smiles)]
    else:
        labels = [-0.3, 0.8, 2.1, -1.4, 0.2, 1.1, 0.6, -2.0, 1.7, 0.1][:len(smiles)]
    return from_smiles(smiles, labels, task)


def _gradient_check(task, cfg: RunConfig, split: SplitMask):
    ds = _toy(task)
    ctx = build_context(ds, cfg, split, rng=np.random.default_rng(0))
    model = Model.init(ctx.batch.features.shape[1], 1, cfg, np.random.default_rng(1))

    def loss_value():
        fwd = forward(model, ctx, cfg, training=False, inference_graph=False)
        return float(compute_losses(model, fwd, ctx, cfg).total.data)

    with Tape():
        fwd = forward(model, ctx, cfg, training=False, inference_graph=False)
        losses = compute_losses(model, fwd, ctx, cfg)
        backward(losses.total)
    assert losses.gsl is not None and float(losses.gsl.data) > 0
    worst = {}
    rng = np.random.default_rng(2)
    for name, p in model.named_parameters():
        assert p.grad is not None, name
        flat = list(np.ndindex(p.shape))
        picks = [flat[i] for i in rng.choice(len(flat), size=min(6, len(flat)), replace=False)]
        picks.append(np.unravel_index(np.argmax(np.abs(p.grad)), p.shape))
        for idx in picks:
            fd = central_difference(loss_value, p.data, idx, step=1e-5)
            an = p.grad[idx]
            err = abs(an - fd) / max(abs(fd), abs(an), 1e-6)
            worst[name] = max(worst.get(name, 0.0), err)
    return worst


GRAD_CFG = dict(dropout=0.0, gin_hidden_size=32, gsl_hidden_size=32, gin_layers=2, gsl_perspective=2,
                tc_epsilon=0.0, gsl_coff=0.9)


class TestPairSampling:
    def test_pairs_are_ordered_and_uniform(self):
        rows = np.array([3, 7, 9, 12])
        ri, ci = sample_upper_pairs(rows, 60_000, np.random.default_rng(0))
        assert np.all(ri < ci) and set(ri) | set(ci) <= set(rows)
        _, counts = np.unique(np.stack([ri, ci]), axis=1, return_counts=True)
        assert len(counts) == 6
        assert np.abs(counts / 60_000 - 1 / 6).max() < 0.01

    def test_large_anchor_runs_do_not_list_pairs(self):
        ds = _toy("classification", TEN)
        split = SplitMask(range(8), [8], [9])
        ctx = build_context(ds, RunConfig(anchors=3, gsl_loss_pairs=10), split, rng=np.random.default_rng(0))
        assert ctx.sampled_pairs and len(ctx.pair_rows) == 0
        dense = build_context(ds, RunConfig(gsl_loss_pairs=10), split)
        assert not dense.sampled_pairs and len(dense.pair_rows) > 10

    def test_sampled_raw_sum_is_unbiased(self):
        ds = _toy("classification", TEN)
        split = SplitMask(range(8), [8], [9])
        base = dict(anchors=3, gsl_loss_raw_sum=True, dropout=0.0)
        full_cfg = RunConfig(gsl_loss_pairs=10_000, **base)
        samp_cfg = RunConfig(gsl_loss_pairs=7, **base)
        ctx_full = build_context(ds, full_cfg, split, rng=np.random.default_rng(0))
        ctx_samp = build_context(ds, samp_cfg, split, rng=np.random.default_rng(0))
        model = Model.init(ctx_full.batch.features.shape[1], 1, full_cfg, np.random.default_rng(1))
        fwd = forward(model, ctx_full, full_cfg, training=False, inference_graph=False)
        exact = float(compute_losses(model, fwd, ctx_full, full_cfg).gsl.data)
        rng = np.random.default_rng(2)
        draws = [float(compute_losses(model, fwd, ctx_samp, samp_cfg, rng).gsl.data) for _ in range(4000)]
        assert np.mean(draws) == pytest.approx(exact, rel=0.03)


class TestTotalLossGradients:
    @pytest.mark.parametrize("task", ["classification", "regression"])
    def test_dense(self, task):
        worst = _gradient_check(task, RunConfig(**GRAD_CFG), SplitMask([0, 1, 2, 3], [4], [5]))
        assert max(worst.values()) < 1e-4, worst

    @pytest.mark.parametrize("norm", ["sym", "separate"])
    def test_other_normalizations(self, norm):
        cfg = RunConfig(gsl_adj_norm=norm, **GRAD_CFG)
        worst = _gradient_check("classification", cfg, SplitMask([0, 1, 2, 3], [4], [5]))
        assert max(worst.values()) < 1e-4, worst

    def test_anchor_mode(self):
        worst = _gradient_check("regression", RunConfig(anchors=3, **GRAD_CFG), SplitMask([0, 1, 2, 3], [4], [5]))
        assert max(worst.values()) < 1e-4, worst

    def test_anchor_mode_with_sampled_pairs(self):
        cfg = RunConfig(anchors=3, gsl_loss_pairs=5, **GRAD_CFG)
        worst = _gradient_check("classification", cfg, SplitMask([0, 1, 2, 3], [4], [5]))
        assert max(worst.values()) < 1e-4, worst


class TestFit:
    def test_toy_regression_loss_halves(self):
        ds = _toy("regression", TEN)
        split = SplitMask(range(8), [8], [9])
        cfg = RunConfig(max_epoch=50, max_lr=1e-2, dropout=0.0, gin_hidden_size=32, gsl_hidden_size=32)
        result = fit(ds, cfg, split, seed=0)
        first, last = result.history[0]["train_loss"], result.history[-1]["train_loss"]
        assert last <= 0.5 * first

    def test_seeded_rerun_is_identical(self):
        ds = _toy("classification", TEN)
        split = SplitMask(range(6), [6, 7], [8, 9])
        cfg = RunConfig(max_epoch=5, gin_hidden_size=32, gsl_hidden_size=32)
        a = fit(ds, cfg, split, seed=3)
        b = fit(ds, cfg, split, seed=3)
        assert a.history == b.history
        np.testing.assert_array_equal(a.evaluation.predictions, b.evaluation.predictions)

    def test_no_gsl_loss_equals_mu_zero(self):
        ds = _toy("regression", TEN)
        split = SplitMask(range(8), [8], [9])
        base = dict(max_epoch=4, gin_hidden_size=32, gsl_hidden_size=32)
        a = fit(ds, RunConfig(variant="no-gsl-loss", **base), split, seed=1)
        assert all(h["gsl_loss"] == 0.0 for h in a.history)
        b = fit(ds, RunConfig(variant="full", **base), split, seed=1)
        assert any(h["gsl_loss"] > 0.0 for h in b.history)

    @pytest.mark.parametrize("variant", ["not-any", "only-a0", "only-gsl", "no-gsl-loss", "full"])
    @pytest.mark.parametrize("anchors", [0, 4])
    def test_variants_run(self, variant, anchors):
        ds = _toy("classification", TEN)
        split = SplitMask(range(6), [6, 7], [8, 9])
        cfg = RunConfig(max_epoch=3, variant=variant, anchors=anchors, gin_hidden_size=32, gsl_hidden_size=32)
        result = fit(ds, cfg, split, seed=0)
        assert set(result.evaluation.metrics) == {"train", "valid", "test"}
        assert result.evaluation.predictions.shape == (10, 1)

    def test_held_out_test_nodes(self):
        ds = _toy("regression", TEN)
        split = SplitMask(range(7), [7], [8, 9])
        cfg = RunConfig(max_epoch=3, exclude_test_from_msg=True, gin_hidden_size=32, gsl_hidden_size=32)
        result = fit(ds, cfg, split, seed=0)
        fwd = forward(result.model, result.context, cfg)
        a = fwd.a_tilde.data
        a0 = result.context.a0
        # test rows only carry fingerprint edges (scaled by lambda)
        np.testing.assert_allclose(a[8], cfg.gsl_skip_conn * a0[8], atol=1e-15)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_is_reported(self):
        ds = _toy("regression", TEN)
        split = SplitMask(range(8), [8], [9])
        with np.errstate(all="ignore"), pytest.raises(DivergenceError, match="non-finite"):
            fit(ds, RunConfig(max_epoch=6, max_lr=1e200, gin_hidden_size=32, gsl_hidden_size=32), split, seed=0)
