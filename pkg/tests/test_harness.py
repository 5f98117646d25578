import numpy as np
import pytest

from transferlab.datasets import LabeledDataset, SyntheticSpec, gen_source, gen_target
from transferlab.errors import ConfigError, DivergenceError
from transferlab.harness import (
    GridResult,
    TrainConfig,
    ensemble_eval,
    evaluate_top1,
    fixed_feature_probe,
    grid_search,
    mix_seed,
    repeated_runs,
    run_trial,
    scratch_probe,
    select_best,
    sgd_train,
    softmax_probs,
)
from transferlab.nn import Batch, NetworkSpec, ParamSet, init_params, with_n_classes
from transferlab.regularizers import make_reg_plan
from transferlab.transfer import Checkpoint, FineTunePlan, build_lr_map, reinit_top_layers


def params_equal(a, b):
    return all(
        x.weights.tobytes() == y.weights.tobytes() and x.bias.tobytes() == y.bias.tobytes()
        for x, y in zip(a, b)
    )


@pytest.fixture(scope="module")
def world():
    spec = SyntheticSpec(n_classes=4, latent_dim=3, input_dim=8,
                         samples_per_class=20, noise_sigma=0.3)
    dataset, mixing = gen_source(spec, seed=0)
    net = NetworkSpec(input_dim=8, block_dims=(10, 8), n_classes=4)
    params = init_params(net, seed=1)
    config = TrainConfig(epochs=8, batch_size=16, momentum=0.9, seed=3)
    trained, _ = sgd_train(net, params, (0.1,) * 3, None, config, dataset)
    ckpt = Checkpoint(spec=net, params=trained, meta={"dataset": dataset.name})
    return net, ckpt, dataset, mixing


class TestSgdTrain:
    def test_all_zero_lr_map_changes_nothing(self, world):
        net, ckpt, dataset, _ = world
        config = TrainConfig(epochs=3, batch_size=16, seed=0)
        out, history = sgd_train(net, ckpt.params, (0.0,) * 3, None, config, dataset)
        assert params_equal(out, ckpt.params)
        vals = [h[2] for h in history]
        assert len(set(vals)) == 1

    def test_deterministic_per_seed(self, world):
        net, ckpt, dataset, _ = world
        config = TrainConfig(epochs=3, batch_size=16, seed=11)
        a, hist_a = sgd_train(net, ckpt.params, (0.05,) * 3, None, config, dataset)
        b, hist_b = sgd_train(net, ckpt.params, (0.05,) * 3, None, config, dataset)
        assert params_equal(a, b)
        assert hist_a == hist_b

    def test_input_params_never_mutated(self, world):
        net, ckpt, dataset, _ = world
        snapshot = ckpt.params.copy()
        config = TrainConfig(epochs=2, batch_size=16, seed=0)
        sgd_train(net, ckpt.params, (0.05,) * 3, None, config, dataset)
        assert params_equal(ckpt.params, snapshot)

    def test_frozen_blocks_bit_identical(self, world):
        net, ckpt, dataset, _ = world
        config = TrainConfig(epochs=3, batch_size=16, seed=0)
        out, _ = sgd_train(net, ckpt.params, (0.0, 0.0, 0.1), None, config, dataset)
        assert out[0].weights.tobytes() == ckpt.params[0].weights.tobytes()
        assert out[1].weights.tobytes() == ckpt.params[1].weights.tobytes()
        assert out[2].weights.tobytes() != ckpt.params[2].weights.tobytes()

    def test_reg_only_contraction(self):
        # a 1-class task has zero data gradient, leaving the anchored decay
        # as the only force: the distance to the anchor contracts by exactly
        # (1 - lr*alpha) per step
        net = NetworkSpec(input_dim=4, block_dims=(5,), n_classes=1)
        anchors = init_params(net, seed=0)
        start = init_params(net, seed=1)
        rng = np.random.default_rng(2)
        n = 10
        batch = Batch(rng.normal(size=(n, 4)), np.zeros(n, dtype=int))
        dataset = LabeledDataset(name="one-class", train=batch,
                                 val=Batch(batch.inputs[:2], batch.labels[:2]),
                                 test=Batch(batch.inputs[:2], batch.labels[:2]))
        alpha, lr, epochs = 0.25, 0.5, 7
        plan = make_reg_plan(2, 2, alpha=alpha, beta=0.0, anchors=anchors)
        config = TrainConfig(epochs=epochs, batch_size=n, momentum=0.0, seed=0)
        out, _ = sgd_train(net, start, (lr, lr), plan, config, dataset)
        shrink = (1 - lr * alpha) ** epochs
        for i in range(2):
            before = np.linalg.norm(start[i].weights - anchors[i].weights)
            after = np.linalg.norm(out[i].weights - anchors[i].weights)
            assert after == pytest.approx(shrink * before, rel=1e-12)

    def test_divergence_raises_with_epoch(self, world):
        net, ckpt, dataset, _ = world
        config = TrainConfig(epochs=5, batch_size=16, seed=0)
        with pytest.raises(DivergenceError) as exc:
            sgd_train(net, ckpt.params, (1e9,) * 3, None, config, dataset)
        assert exc.value.epoch >= 0

    def test_history_respects_eval_every(self, world):
        net, ckpt, dataset, _ = world
        config = TrainConfig(epochs=6, batch_size=16, seed=0, eval_every=2)
        _, history = sgd_train(net, ckpt.params, (0.01,) * 3, None, config, dataset)
        assert len(history) == 3
        assert [h[0] for h in history] == [1, 3, 5]

    def test_cosine_schedule_accepted(self, world):
        net, ckpt, dataset, _ = world
        config = TrainConfig(epochs=3, batch_size=16, seed=0, lr_schedule="cosine")
        out, _ = sgd_train(net, ckpt.params, (0.05,) * 3, None, config, dataset)
        assert not params_equal(out, ckpt.params)


class TestEvaluateTop1:
    def test_perfect_predictor(self):
        net = NetworkSpec(input_dim=2, block_dims=(4,), n_classes=2)
        # craft logits via a final block that copies a separable feature
        rng = np.random.default_rng(0)
        batch = Batch(np.array([[5.0, 0.0], [-5.0, 0.0]] * 4), np.array([0, 1] * 4))
        params = init_params(net, seed=0)
        spec_tuned, _ = sgd_train(
            net, params, (0.1, 0.1),
            None,
            TrainConfig(epochs=30, batch_size=8, seed=0),
            LabeledDataset(name="sep", train=batch, val=batch, test=batch),
        )
        assert evaluate_top1(net, spec_tuned, batch) == 100.0

    def test_tie_breaks_to_lowest_class(self):
        net = NetworkSpec(input_dim=3, block_dims=(2,), n_classes=4, activation="relu")
        zeros = ParamSet(tuple(
            __import__("transferlab.nn", fromlist=["Block"]).Block(np.zeros(w), np.zeros(b))
            for w, b in net.block_shapes()
        ))
        batch = Batch(np.ones((5, 3)), np.zeros(5, dtype=int))
        assert evaluate_top1(net, zeros, batch) == 100.0
        batch_other = Batch(np.ones((5, 3)), np.full(5, 2))
        assert evaluate_top1(net, zeros, batch_other) == 0.0

    def test_matches_binomial_rate_for_random_labels(self):
        net = NetworkSpec(input_dim=4, block_dims=(6,), n_classes=10)
        params = init_params(net, seed=3)
        rng = np.random.default_rng(4)
        batch = Batch(rng.normal(size=(4000, 4)), rng.integers(0, 10, size=4000))
        acc = evaluate_top1(net, params, batch)
        assert abs(acc - 10.0) < 3.0


class TestProbes:
    def test_fixed_probe_equals_explicit_zero_map(self, world):
        net, ckpt, dataset, _ = world
        config = TrainConfig(epochs=4, batch_size=16, seed=7)
        head_lr = 0.5
        probe_acc = fixed_feature_probe(ckpt, dataset, config, head_lr=head_lr)
        params = reinit_top_layers(ckpt, k=1, seed=mix_seed(7, "head"),
                                   n_classes=dataset.n_classes)
        spec = with_n_classes(ckpt.spec, dataset.n_classes)
        trained, _ = sgd_train(spec, params, (0.0, 0.0, head_lr), None, config, dataset)
        assert probe_acc == evaluate_top1(spec, trained, dataset.val)

    def test_probe_on_own_source_data_is_high(self, world):
        net, ckpt, dataset, _ = world
        config = TrainConfig(epochs=10, batch_size=16, seed=1)
        acc = fixed_feature_probe(ckpt, dataset, config)
        assert acc >= 75.0

    def test_scratch_probe_deterministic(self, world):
        net, _, dataset, _ = world
        config = TrainConfig(epochs=4, batch_size=16, seed=5)
        a = scratch_probe(net, dataset, config, lr=0.05)
        b = scratch_probe(net, dataset, config, lr=0.05)
        assert a == b


class TestGridSearch:
    def plan(self, lr, k=1, **kw):
        return FineTunePlan(reinit_count=k, high_lr=lr, **kw)

    def test_single_plan_is_best(self, world):
        net, ckpt, dataset, _ = world
        config = TrainConfig(epochs=3, batch_size=16, seed=0)
        result = grid_search(ckpt, [self.plan(0.05)], config, dataset)
        assert result.best_index == 0
        assert result.best_record.ok

    def test_duplicate_plans_first_wins(self):
        # identical plans with tied scores: the earlier grid position wins
        records = [run_record_stub(lr=0.05, k=1, val=88.0, index=i) for i in range(3)]
        assert select_best(records) == 0

    def test_adding_plans_never_perturbs_existing_trials(self, world):
        net, ckpt, dataset, _ = world
        config = TrainConfig(epochs=3, batch_size=16, seed=0)
        short = grid_search(ckpt, [self.plan(0.02), self.plan(0.05)], config, dataset)
        extended = grid_search(
            ckpt, [self.plan(0.02), self.plan(0.05), self.plan(0.1)], config, dataset
        )
        for a, b in zip(short.records, extended.records):
            assert a.final_val_top1 == b.final_val_top1
            assert a.seed == b.seed

    def test_tie_breaks_by_lower_lr_then_lower_k(self):
        records = []
        for i, (lr, k) in enumerate([(0.05, 2), (0.01, 2), (0.01, 1)]):
            records.append(
                run_record_stub(lr=lr, k=k, val=90.0, index=i)
            )
        assert select_best(records) == 2  # same val: lowest lr wins, then lowest k

    def test_parallel_equals_serial(self, world):
        net, ckpt, dataset, _ = world
        config = TrainConfig(epochs=3, batch_size=16, seed=0)
        plans = [self.plan(0.02), self.plan(0.05), self.plan(0.02, k=2)]
        serial = grid_search(ckpt, plans, config, dataset, parallelism=1)
        parallel = grid_search(ckpt, plans, config, dataset, parallelism=3)
        for a, b in zip(serial.records, parallel.records):
            da, db = a.to_dict(), b.to_dict()
            da.pop("wall_time")
            db.pop("wall_time")
            assert da == db

    def test_divergence_contained(self, world):
        net, ckpt, dataset, _ = world
        config = TrainConfig(epochs=3, batch_size=16, seed=0)
        result = grid_search(ckpt, [self.plan(1e9), self.plan(0.05)], config, dataset)
        assert result.records[0].status == "diverged"
        assert result.records[1].ok
        assert result.best_index == 1

    def test_empty_plan_list_rejected(self, world):
        net, ckpt, dataset, _ = world
        with pytest.raises(ConfigError):
            grid_search(ckpt, [], TrainConfig(), dataset)


class TestRepeatedRuns:
    def test_default_is_four_runs(self, world):
        net, ckpt, dataset, _ = world
        config = TrainConfig(epochs=3, batch_size=16, seed=0)
        result = repeated_runs(ckpt, FineTunePlan(reinit_count=1, high_lr=0.05),
                               config, dataset)
        assert len(result.records) == 4
        assert {r.seed for r in result.records} != {result.records[0].seed}

    def test_forced_identical_seeds_give_zero_std(self, world):
        net, ckpt, dataset, _ = world
        config = TrainConfig(epochs=3, batch_size=16, seed=0)
        result = repeated_runs(ckpt, FineTunePlan(reinit_count=1, high_lr=0.05),
                               config, dataset, n=3, seeds=[9, 9, 9])
        assert result.std_test_top1 == 0.0

    def test_mean_invariant_to_seed_order(self, world):
        net, ckpt, dataset, _ = world
        config = TrainConfig(epochs=3, batch_size=16, seed=0)
        plan = FineTunePlan(reinit_count=1, high_lr=0.05)
        fwd = repeated_runs(ckpt, plan, config, dataset, n=3, seeds=[1, 2, 3])
        rev = repeated_runs(ckpt, plan, config, dataset, n=3, seeds=[3, 2, 1])
        assert fwd.mean_test_top1 == pytest.approx(rev.mean_test_top1, abs=1e-12)

    def test_n_below_two_rejected(self, world):
        net, ckpt, dataset, _ = world
        with pytest.raises(ConfigError):
            repeated_runs(ckpt, FineTunePlan(reinit_count=1, high_lr=0.05),
                          TrainConfig(), dataset, n=1)

    def test_formatted_mean_std(self):
        from transferlab.harness import RepeatResult

        r = RepeatResult(records=[], param_sets=[], mean_test_top1=94.586,
                         std_test_top1=0.1101)
        assert r.formatted() == "94.59±0.110"


class TestEnsemble:
    def test_identical_members_equal_single(self, world):
        net, ckpt, dataset, _ = world
        member = ckpt.params
        single = evaluate_top1(net, member, dataset.test)
        for k in (2, 4):
            assert ensemble_eval(net, [member] * k, dataset.test) == single

    def test_member_order_irrelevant(self, world):
        net, ckpt, dataset, _ = world
        members = [init_params(net, seed=s) for s in range(3)]
        a = ensemble_eval(net, members, dataset.test)
        b = ensemble_eval(net, members[::-1], dataset.test)
        assert a == b

    def test_requires_two_members(self, world):
        net, ckpt, dataset, _ = world
        with pytest.raises(ConfigError):
            ensemble_eval(net, [ckpt.params], dataset.test)

    def test_probs_are_normalized(self, world):
        net, ckpt, dataset, _ = world
        probs = softmax_probs(net, ckpt.params, dataset.test)
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-12)


def run_record_stub(lr, k, val, index):
    from transferlab.harness import RunRecord

    return RunRecord(
        plan=FineTunePlan(reinit_count=k, high_lr=lr),
        config=TrainConfig(),
        seed=0,
        final_val_top1=val,
        final_test_top1=val,
        plan_index=index,
    )


class TestMixSeed:
    def test_stable_and_distinct(self):
        assert mix_seed(1, 2, 3) == mix_seed(1, 2, 3)
        assert mix_seed(1, 2, 3) != mix_seed(1, 2, 4)
        assert mix_seed(0, "reinit") != mix_seed(0, "shuffle")

    def test_fits_in_63_bits(self):
        for parts in [(0,), (123, "x"), (2**62, 5, 6)]:
            s = mix_seed(*parts)
            assert 0 <= s < 2**63
