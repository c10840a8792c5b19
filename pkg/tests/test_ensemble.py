"""Ensemble module: init, forward, loss, gradients, training, prediction."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chaincontrib.dataset import ActorDataset, MetricSeries
from chaincontrib.ensemble import (
    Ensemble,
    EnsembleHyper,
    Member,
    MemberLayout,
    Normaliser,
    PredictiveSummary,
    TrainingError,
    forward,
    init_member,
    load_ensemble,
    loss_and_gradients,
    nll_loss,
    predict,
    save_ensemble,
    total_uncertainty,
    train_ensemble,
    train_member,
)

SMALL_HYPER = EnsembleHyper(
    member_count=2,
    hidden_size=8,
    dropout_rate=0.0,
    batch_size=16,
    patience_epochs=100,
    max_epochs=600,
    validation_fraction=0.2,
)


def constant_member(mu: float, log_var: float, input_size: int = 3, hidden: int = 4, seed: int = 0) -> Member:
    """Member that outputs (mu, log_var) for every input."""
    return Member(
        w1=np.zeros((input_size, hidden)),
        b1=np.zeros(hidden),
        w2=np.zeros((hidden, 2)),
        b2=np.array([mu, log_var], dtype=float),
        rng_seed=seed,
    )


def hand_ensemble(members, width: int = 3, val_ids=("P0",)) -> Ensemble:
    return Ensemble(
        members=tuple(members),
        normaliser=Normaliser.identity(width),
        log_variance_clamp=(-10.0, 10.0),
        training_log=tuple(() for _ in members),
        validation_part_ids=tuple(val_ids),
    )


class TestHyper:
    def test_defaults_are_valid(self):
        hyper = EnsembleHyper()
        assert hyper.member_count == 5
        assert hyper.hidden_size == 50
        assert hyper.dropout_rate == 0.5
        assert hyper.batch_size == 128
        assert hyper.patience_epochs == 100

    def test_invariants_enforced(self):
        with pytest.raises(ValueError):
            EnsembleHyper(member_count=1)
        with pytest.raises(ValueError):
            EnsembleHyper(dropout_rate=1.0)
        with pytest.raises(ValueError):
            EnsembleHyper(patience_epochs=0)
        with pytest.raises(ValueError):
            EnsembleHyper(log_variance_clamp=(5.0, 5.0))
        with pytest.raises(ValueError):
            EnsembleHyper(activation="tanh")
        with pytest.raises(ValueError):
            EnsembleHyper(validation_fraction=1.0)

    def test_dict_round_trip_rejects_unknown_fields(self):
        hyper = EnsembleHyper(member_count=3, hidden_size=10)
        assert EnsembleHyper.from_dict(hyper.to_dict()) == hyper
        with pytest.raises(ValueError, match="unknown"):
            EnsembleHyper.from_dict({"member_count": 3, "momentum": 0.9})


class TestInitMember:
    def test_same_seed_identical(self):
        layout = MemberLayout(4, 6)
        a = init_member(layout, seed=42)
        b = init_member(layout, seed=42)
        np.testing.assert_array_equal(a.parameter_vector(), b.parameter_vector())

    def test_different_seeds_differ(self):
        layout = MemberLayout(4, 6)
        a = init_member(layout, seed=1)
        b = init_member(layout, seed=2)
        assert np.any(a.parameter_vector() != b.parameter_vector())

    def test_shapes(self):
        member = init_member(MemberLayout(8, 50), seed=0)
        assert member.w1.shape == (8, 50)
        assert member.b1.shape == (50,)
        assert member.w2.shape == (50, 2)
        assert member.b2.shape == (2,)

    def test_two_output_heads_enforced(self):
        with pytest.raises(ValueError, match="two outputs"):
            Member(
                w1=np.zeros((3, 4)),
                b1=np.zeros(4),
                w2=np.zeros((4, 3)),
                b2=np.zeros(3),
                rng_seed=0,
            )


class TestForward:
    def test_zero_parameters_give_zero_outputs(self):
        member = constant_member(0.0, 0.0)
        for x in (np.zeros(3), np.ones(3), np.array([-4.0, 2.0, 7.0])):
            mu, log_var = forward(member, x)
            assert mu == 0.0 and log_var == 0.0

    def test_evaluation_mode_deterministic(self):
        member = init_member(MemberLayout(3, 5), seed=7)
        x = np.array([0.3, -1.2, 0.8])
        assert forward(member, x) == forward(member, x)

    def test_log_variance_clamped(self):
        member = constant_member(0.0, -50.0)
        _, log_var = forward(member, np.zeros(3), clamp=(-10.0, 10.0))
        assert log_var == -10.0
        member_hi = constant_member(0.0, 50.0)
        _, log_var_hi = forward(member_hi, np.zeros(3), clamp=(-10.0, 10.0))
        assert log_var_hi == 10.0

    def test_arity_mismatch_rejected(self):
        member = init_member(MemberLayout(3, 5), seed=0)
        with pytest.raises(ValueError, match="arity"):
            forward(member, np.zeros(4))

    def test_batch_matches_per_row(self):
        # Bitwise equality across batch shapes is not promised (the matrix
        # product may take a different kernel), only numerical agreement.
        member = init_member(MemberLayout(3, 5), seed=1)
        batch = np.random.default_rng(0).normal(size=(6, 3))
        mus, lvs = forward(member, batch)
        for i in range(6):
            mu, lv = forward(member, batch[i])
            np.testing.assert_allclose([mu, lv], [mus[i], lvs[i]], rtol=1e-12)

    def test_dropout_only_in_training_mode(self):
        member = init_member(MemberLayout(3, 40), seed=3)
        x = np.ones(3)
        eval_out = forward(member, x, dropout_rate=0.5)
        again = forward(member, x, dropout_rate=0.5)
        assert eval_out == again
        rng = np.random.default_rng(0)
        trained = [
            forward(member, x, training_mode=True, dropout_rate=0.5, rng=rng)
            for _ in range(4)
        ]
        assert len({mu for mu, _ in trained}) > 1

    def test_training_dropout_requires_rng(self):
        member = init_member(MemberLayout(3, 5), seed=0)
        with pytest.raises(ValueError, match="rng"):
            forward(member, np.zeros(3), training_mode=True, dropout_rate=0.5)


class TestNllLoss:
    def test_exact_mean_unit_variance_is_zero(self):
        assert nll_loss(3.0, 0.0, 3.0) == 0.0

    def test_unit_error_unit_variance(self):
        assert nll_loss(0.0, 0.0, 1.0) == 0.5

    def test_exact_mean_log_variance_two(self):
        assert nll_loss(5.0, 2.0, 5.0) == 1.0

    def test_vectorised(self):
        values = nll_loss(np.zeros(2), np.zeros(2), np.array([0.0, 1.0]))
        np.testing.assert_allclose(values, [0.0, 0.5])


def finite_difference_grads(member: Member, x, y, clamp, mask, h=1e-5):
    grads = {}
    arrays = {"w1": member.w1, "b1": member.b1, "w2": member.w2, "b2": member.b2}

    def loss_with(name, arr):
        parts = dict(arrays)
        parts[name] = arr
        probe = Member(
            w1=parts["w1"], b1=parts["b1"], w2=parts["w2"], b2=parts["b2"], rng_seed=0
        )
        loss, _ = loss_and_gradients(probe, x, y, clamp, dropout_mask=mask)
        return loss

    for name, arr in arrays.items():
        grad = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            plus = arr.copy()
            plus[idx] += h
            minus = arr.copy()
            minus[idx] -= h
            grad[idx] = (loss_with(name, plus) - loss_with(name, minus)) / (2 * h)
            it.iternext()
        grads[name] = grad
    return grads


def gradcheck_case(seed: int, clamp=(-10.0, 10.0)):
    """Member + batch whose pre-activations stay clear of kinks and clamps."""
    rng = np.random.default_rng(seed)
    for attempt in range(50):
        member = init_member(MemberLayout(3, 4), seed=int(rng.integers(1 << 30)))
        x = rng.normal(size=(5, 3))
        y = rng.normal(size=5)
        pre = x @ member.w1 + member.b1
        raw_lv = np.maximum(pre, 0.0) @ member.w2[:, 1] + member.b2[1]
        if np.min(np.abs(pre)) > 1e-3 and np.min(
            np.abs(raw_lv[:, None] - np.array(clamp))
        ) > 1e-3:
            return member, x, y
    raise AssertionError("could not find a kink-free case")


class TestGradients:
    def assert_close_to_fd(self, member, x, y, mask=None):
        clamp = (-10.0, 10.0)
        _, analytic = loss_and_gradients(member, x, y, clamp, dropout_mask=mask)
        numeric = finite_difference_grads(member, x, y, clamp, mask)
        for name in ("w1", "b1", "w2", "b2"):
            ga, gn = analytic[name], numeric[name]
            denom = max(np.linalg.norm(ga), np.linalg.norm(gn), 1e-12)
            rel = np.linalg.norm(ga - gn) / denom
            assert rel < 1e-4, f"{name}: relative error {rel:.2e}"

    def test_matches_finite_differences(self):
        for seed in (0, 1, 2):
            member, x, y = gradcheck_case(seed)
            self.assert_close_to_fd(member, x, y)

    def test_matches_finite_differences_with_fixed_dropout_mask(self):
        member, x, y = gradcheck_case(3)
        mask = (np.random.default_rng(9).random((5, 4)) < 0.5) / 0.5
        self.assert_close_to_fd(member, x, y, mask=mask)

    def test_clamped_log_variance_has_zero_gradient(self):
        member = constant_member(0.0, 20.0)  # raw log-variance far past the cap
        x = np.random.default_rng(1).normal(size=(4, 3))
        y = np.zeros(4)
        _, grads = loss_and_gradients(member, x, y, clamp=(-10.0, 10.0))
        assert grads["b2"][1] == 0.0
        np.testing.assert_array_equal(grads["w2"][:, 1], 0.0)

    def test_loss_value_matches_nll(self):
        member, x, y = gradcheck_case(4)
        loss, _ = loss_and_gradients(member, x, y, (-10.0, 10.0))
        mu, lv = forward(member, x)
        assert loss == pytest.approx(float(np.mean(nll_loss(mu, lv, y))))


def constant_target_data(seed=0, rows=200, c=2.0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(rows, 3)), np.full(rows, c)


class TestTrainMember:
    def test_constant_target_reaches_analytic_optimum(self):
        x, y = constant_target_data()
        member = init_member(MemberLayout(3, 8), seed=5)
        trained = train_member(member, x, y, SMALL_HYPER)
        val_rows = x[-40:]
        mu, _ = forward(trained, val_rows)
        assert np.all(np.abs(mu - 2.0) < 0.05)

    def test_no_improvement_stops_after_patience(self):
        x, y = constant_target_data()
        member = init_member(MemberLayout(3, 8), seed=5)
        hyper = EnsembleHyper(
            member_count=2,
            hidden_size=8,
            dropout_rate=0.0,
            batch_size=16,
            patience_epochs=7,
            max_epochs=500,
            learning_rate=0.0,
        )
        trained, log = train_member(member, x, y, hyper, with_log=True)
        # Zero learning rate: no strict improvement ever, so the run stops
        # after exactly `patience` epochs and returns the starting weights.
        assert len(log) == 7
        np.testing.assert_array_equal(
            trained.parameter_vector(), member.parameter_vector()
        )

    def test_returns_best_epoch_not_last(self):
        x, y = constant_target_data()
        member = init_member(MemberLayout(3, 8), seed=5)
        hyper = EnsembleHyper(
            member_count=2,
            hidden_size=8,
            dropout_rate=0.0,
            batch_size=16,
            patience_epochs=5,
            max_epochs=500,
        )
        trained, log = train_member(member, x, y, hyper, with_log=True)
        epochs = [e for e, _ in log]
        losses = dict(log)
        best_epoch = min(losses, key=losses.get)
        assert epochs[-1] == best_epoch + 5
        x_val, y_val = x[-40:], y[-40:]
        mu, lv = forward(trained, x_val)
        got = float(np.mean(nll_loss(mu, lv, y_val)))
        assert got == pytest.approx(losses[best_epoch])

    def test_deterministic_given_seed_data_hyper(self):
        x, y = constant_target_data()
        hyper = EnsembleHyper(
            member_count=2,
            hidden_size=8,
            dropout_rate=0.5,
            batch_size=16,
            patience_epochs=10,
            max_epochs=40,
        )
        a = train_member(init_member(MemberLayout(3, 8), 5), x, y, hyper)
        b = train_member(init_member(MemberLayout(3, 8), 5), x, y, hyper)
        np.testing.assert_array_equal(a.parameter_vector(), b.parameter_vector())

    def test_too_few_rows_rejected(self):
        x, y = constant_target_data(rows=30)
        member = init_member(MemberLayout(3, 8), seed=0)
        with pytest.raises(ValueError, match="batch_size"):
            train_member(member, x, y, SMALL_HYPER)

    def test_nonfinite_loss_reports_epoch(self):
        x, y = constant_target_data()
        x = x.copy()
        x[0, 0] = 1e160  # poison one training row to overflow the loss
        member = init_member(MemberLayout(3, 8), seed=5)
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(TrainingError, match="epoch"):
                train_member(member, x, y, SMALL_HYPER)


def make_actor_data(seed=0, rows=200, c=2.0):
    x, y = constant_target_data(seed=seed, rows=rows, c=c)
    ids = tuple(f"P{i}" for i in range(rows))
    dataset = ActorDataset(
        actor_id="alpha",
        part_ids=ids,
        columns=("f0", "f1", "f2"),
        features=x,
        shared_flags=(False, False, False),
    )
    return dataset, MetricSeries(part_ids=ids, values=y)


class TestTrainEnsemble:
    def test_members_have_distinct_seeds_and_shared_normaliser(self):
        dataset, metric = make_actor_data()
        ensemble = train_ensemble(dataset, metric, SMALL_HYPER, base_seed=100)
        assert [m.rng_seed for m in ensemble.members] == [100, 101]
        assert ensemble.member_count == 2
        assert len(ensemble.training_log) == 2
        # Validation ids are the chronological tail of the aligned join.
        assert ensemble.validation_part_ids == dataset.part_ids[-40:]

    def test_constant_target_all_members_converge(self):
        dataset, metric = make_actor_data()
        ensemble = train_ensemble(dataset, metric, SMALL_HYPER, base_seed=20)
        rows = dataset.rows_for(ensemble.validation_part_ids)
        for member in ensemble.members:
            mu, _ = forward(
                member,
                ensemble.normaliser.transform(rows),
                clamp=ensemble.log_variance_clamp,
            )
            assert np.all(np.abs(mu - 2.0) < 0.05)

    def test_parallel_equals_sequential(self):
        dataset, metric = make_actor_data()
        hyper = EnsembleHyper(
            member_count=3,
            hidden_size=8,
            dropout_rate=0.5,
            batch_size=16,
            patience_epochs=10,
            max_epochs=30,
        )
        seq = train_ensemble(dataset, metric, hyper, base_seed=7, parallel=False)
        par = train_ensemble(dataset, metric, hyper, base_seed=7, parallel=True)
        for a, b in zip(seq.members, par.members):
            np.testing.assert_array_equal(a.parameter_vector(), b.parameter_vector())
        assert seq.training_log == par.training_log

    def test_empty_join_rejected(self):
        dataset, _ = make_actor_data()
        other = MetricSeries(part_ids=("Q1",), values=np.array([1.0]))
        with pytest.raises(ValueError, match="no part ids"):
            train_ensemble(dataset, other, SMALL_HYPER, base_seed=0)


class TestPredict:
    def test_two_member_hand_case(self):
        ensemble = hand_ensemble(
            [constant_member(0.0, 0.0, seed=1), constant_member(2.0, 0.0, seed=2)]
        )
        summary = predict(ensemble, np.zeros(3))
        assert summary.mean == 1.0
        assert summary.knowledge_variance == 1.0
        assert summary.data_variance == 1.0
        assert summary.total_variance == 2.0

    def test_three_member_data_variance_mean(self):
        ensemble = hand_ensemble(
            [
                constant_member(1.0, 0.0, seed=1),
                constant_member(1.0, np.log(2.0), seed=2),
                constant_member(1.0, np.log(3.0), seed=3),
            ]
        )
        summary = predict(ensemble, np.zeros(3))
        assert summary.knowledge_variance == 0.0
        assert summary.data_variance == pytest.approx(2.0)
        assert summary.total_variance == pytest.approx(2.0)

    def test_identical_members_zero_knowledge_variance(self):
        ensemble = hand_ensemble(
            [constant_member(1.4, -0.3, seed=1), constant_member(1.4, -0.3, seed=2)]
        )
        summary = predict(ensemble, np.zeros(3))
        assert summary.knowledge_variance == 0.0

    def test_arity_checked(self):
        ensemble = hand_ensemble([constant_member(0, 0, seed=1), constant_member(0, 0, seed=2)])
        with pytest.raises(ValueError):
            predict(ensemble, np.zeros(5))
        with pytest.raises(ValueError):
            predict(ensemble, np.zeros((2, 3)))

    def test_total_variance_matches_mixture_sampling(self):
        # Equal-weight mixture of N(0,1) and N(2,1): variance 2.
        ensemble = hand_ensemble(
            [constant_member(0.0, 0.0, seed=1), constant_member(2.0, 0.0, seed=2)]
        )
        summary = predict(ensemble, np.zeros(3))
        rng = np.random.default_rng(123)
        n = 1_000_000
        component = rng.integers(0, 2, size=n)
        draws = rng.normal(2.0 * component, 1.0)
        sampled = draws.var()
        assert summary.total_variance == pytest.approx(sampled, rel=0.01)

    def test_total_variance_within_monte_carlo_band(self):
        rng = np.random.default_rng(7)
        mus = rng.normal(size=4)
        log_vars = rng.normal(scale=0.5, size=4)
        ensemble = hand_ensemble(
            [constant_member(m, lv, seed=i) for i, (m, lv) in enumerate(zip(mus, log_vars))]
        )
        summary = predict(ensemble, np.zeros(3))
        n = 1_000_000
        component = rng.integers(0, 4, size=n)
        draws = rng.normal(mus[component], np.exp(log_vars[component] / 2.0))
        sampled_var = draws.var()
        # 3 standard errors of the sample variance via the fourth moment.
        centred = draws - draws.mean()
        fourth = np.mean(centred**4)
        se = np.sqrt((fourth - sampled_var**2) / n)
        assert abs(summary.total_variance - sampled_var) < 3 * se

    @given(
        mus=st.lists(st.floats(-5, 5), min_size=2, max_size=6),
        log_vars=st.lists(st.floats(-3, 3), min_size=2, max_size=6),
    )
    @settings(max_examples=50, deadline=None)
    def test_decomposition_identity(self, mus, log_vars):
        k = min(len(mus), len(log_vars))
        mus, log_vars = np.array(mus[:k]), np.array(log_vars[:k])
        if k < 2:
            return
        ensemble = hand_ensemble(
            [constant_member(m, lv, seed=i) for i, (m, lv) in enumerate(zip(mus, log_vars))]
        )
        summary = predict(ensemble, np.zeros(3))
        assert summary.knowledge_variance >= 0.0
        assert summary.data_variance > 0.0
        assert summary.total_variance == summary.knowledge_variance + summary.data_variance
        # Second-moment identity for the equal-weight Gaussian mixture.
        second_moment = np.mean(np.exp(log_vars) + mus**2)
        np.testing.assert_allclose(
            summary.total_variance,
            second_moment - np.mean(mus) ** 2,
            rtol=1e-9,
            atol=1e-12,
        )


class TestTotalUncertainty:
    def make_dataset(self, rows=10):
        ids = tuple(f"P{i}" for i in range(rows))
        rng = np.random.default_rng(0)
        return ActorDataset(
            actor_id="alpha",
            part_ids=ids,
            columns=("f0", "f1", "f2"),
            features=rng.normal(size=(rows, 3)),
            shared_flags=(False,) * 3,
        )

    def test_unit_variance_constant_ensemble_reports_one(self):
        dataset = self.make_dataset()
        ensemble = hand_ensemble(
            [constant_member(0.0, 0.0, seed=1), constant_member(0.0, 0.0, seed=2)],
            val_ids=dataset.part_ids[-2:],
        )
        assert total_uncertainty(ensemble, dataset) == 1.0

    def test_deterministic(self):
        dataset, metric = make_actor_data()
        ensemble = train_ensemble(dataset, metric, SMALL_HYPER, base_seed=3)
        assert total_uncertainty(ensemble, dataset) == total_uncertainty(ensemble, dataset)

    def test_metric_values_never_read(self):
        dataset, metric = make_actor_data()
        ensemble = train_ensemble(dataset, metric, SMALL_HYPER, base_seed=3)
        plain = total_uncertainty(ensemble, dataset)
        scrambled = MetricSeries(
            part_ids=metric.part_ids,
            values=np.full(len(metric), 1e6),
        )
        assert total_uncertainty(ensemble, dataset, scrambled) == plain

    def test_missing_validation_id_in_metric_rejected(self):
        dataset, metric = make_actor_data()
        ensemble = train_ensemble(dataset, metric, SMALL_HYPER, base_seed=3)
        truncated = MetricSeries(
            part_ids=metric.part_ids[:-1], values=metric.values[:-1]
        )
        with pytest.raises(ValueError, match="missing"):
            total_uncertainty(ensemble, dataset, truncated)

    def test_empty_validation_set_rejected(self):
        dataset = self.make_dataset()
        ensemble = hand_ensemble(
            [constant_member(0, 0, seed=1), constant_member(0, 0, seed=2)],
            val_ids=(),
        )
        with pytest.raises(ValueError, match="empty"):
            total_uncertainty(ensemble, dataset)


class TestCheckpoint:
    def test_round_trip_reproduces_predictions_exactly(self, tmp_path):
        dataset, metric = make_actor_data()
        hyper = EnsembleHyper(
            member_count=2,
            hidden_size=8,
            dropout_rate=0.5,
            batch_size=16,
            patience_epochs=10,
            max_epochs=30,
        )
        ensemble = train_ensemble(dataset, metric, hyper, base_seed=1)
        path = tmp_path / "ensemble.npz"
        save_ensemble(ensemble, path)
        loaded = load_ensemble(path)
        assert loaded.validation_part_ids == ensemble.validation_part_ids
        assert loaded.training_log == ensemble.training_log
        assert loaded.log_variance_clamp == ensemble.log_variance_clamp
        rng = np.random.default_rng(5)
        for _ in range(5):
            x = rng.normal(size=3)
            a, b = predict(ensemble, x), predict(loaded, x)
            assert (a.mean, a.knowledge_variance, a.data_variance) == (
                b.mean,
                b.knowledge_variance,
                b.data_variance,
            )
        assert total_uncertainty(loaded, dataset) == total_uncertainty(ensemble, dataset)


class TestNormaliser:
    def test_zero_variance_column_maps_to_zero(self):
        x = np.column_stack([np.full(5, 3.0), np.arange(5.0)])
        norm = Normaliser.fit(x)
        out = norm.transform(np.array([[99.0, 2.0]]))
        assert out[0, 0] == 0.0
        assert out[0, 1] == pytest.approx((2.0 - 2.0) / np.arange(5.0).std())

    def test_transform_standardises_training_data(self):
        rng = np.random.default_rng(2)
        x = rng.normal(3.0, 5.0, size=(200, 2))
        out = Normaliser.fit(x).transform(x)
        np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.std(axis=0), 1.0, atol=1e-12)

    def test_arity_mismatch_rejected(self):
        norm = Normaliser.identity(3)
        with pytest.raises(ValueError, match="arity"):
            norm.transform(np.zeros(4))


class TestEnsembleInvariants:
    def test_duplicate_seeds_rejected(self):
        with pytest.raises(ValueError, match="distinct"):
            hand_ensemble([constant_member(0, 0, seed=1), constant_member(1, 0, seed=1)])

    def test_mismatched_layouts_rejected(self):
        with pytest.raises(ValueError, match="layout"):
            hand_ensemble(
                [constant_member(0, 0, hidden=4, seed=1), constant_member(0, 0, hidden=5, seed=2)]
            )

    def test_single_member_rejected(self):
        with pytest.raises(ValueError, match="at least 2"):
            hand_ensemble([constant_member(0, 0, seed=1)])

    def test_summary_requires_nonnegative_components(self):
        with pytest.raises(ValueError):
            PredictiveSummary(mean=0.0, knowledge_variance=-1.0, data_variance=1.0)
