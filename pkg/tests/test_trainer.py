"""
Tests for the training loop, the optimizer and best-epoch selection.
"""
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from interlace import trainer
from interlace.errors import ConfigError, NonFiniteError
from interlace.ingest import SplitConfig, build_arrays, chronological_split
from interlace.model import EmbeddingBank, ModelDims, ModelParams
from interlace.synth import drift, dropout, repetitive
from interlace.tbatch import build_tbatches, naive_plan, plan_stats
from interlace.trainer import (
    Adam,
    TrainConfig,
    forward_epoch,
    loss_and_gradients,
    optimizer_step,
    run_epoch,
    run_experiment,
    select_best,
    train,
)


def params_for(dataset, size=8, seed=0, **options):
    dims = ModelDims(dataset.num_users, dataset.num_items, dataset.feature_dim, n=size, m=size)
    return ModelParams.initialize(dims, seed=seed, **options)


def report_values(report):
    """Every report field except wall time."""
    return (report.epoch, report.loss_total, report.loss_pred, report.loss_drift_u,
            report.loss_drift_i, report.loss_state, report.val_metric)


@pytest.fixture
def stream_500(stream_factory):
    return stream_factory(seed=4, length=500, num_users=40, num_items=30,
                          feature_dim=2, label_rate=0.1)


class TestTrainConfig:

    @pytest.mark.parametrize('kwargs', [
        {'epochs': 0},
        {'bptt_window': 0},
        {'learning_rate': -1e-3},
        {'weight_decay': -1.0},
        {'task': 'ranking'},
        {'prev_item_view': 'latest'},
        {'workers': 0},
    ])
    def test_rejects(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)

    def test_zero_learning_rate_allowed(self):
        assert TrainConfig(learning_rate=0.0).learning_rate == 0.0

    def test_from_settings(self, runtime):
        cfg = TrainConfig.from_settings({**runtime.settings, 'THREADS': 3, 'TASK': 'statechange'})
        assert cfg.epochs == 2
        assert cfg.bptt_window == 8
        assert cfg.workers == 3
        assert cfg.with_state

    def test_model_options(self):
        options = TrainConfig(lambda_s=4.0, squared_loss=True).model_options()
        assert options['lambda_s'] == 4.0
        assert options['squared_loss'] is True


class TestAdam:

    def test_zero_gradient_no_change(self):
        param = np.array([0.5, -2.0])
        Adam(lr=0.1).step({'p': param}, {'p': np.zeros(2)})
        np.testing.assert_array_equal(param, [0.5, -2.0])

    def test_first_step_is_minus_lr(self):
        param = np.array([0.0])
        Adam(lr=1e-3).step({'p': param}, {'p': np.array([1.0])})
        assert param[0] == pytest.approx(-1e-3, abs=1e-6)

    def test_constant_gradient_keeps_step_size(self):
        param = np.array([0.0])
        optimizer = Adam(lr=1e-2)
        for _ in range(3):
            optimizer.step({'p': param}, {'p': np.array([1.0])})
        assert optimizer.t == 3
        assert param[0] == pytest.approx(-3e-2, abs=1e-5)

    def test_weight_decay_only(self):
        param = np.array([2.0])
        Adam(lr=0.1, weight_decay=0.5).step({'p': param}, {'p': np.zeros(1)})
        assert param[0] == pytest.approx(2.0 * (1.0 - 0.1 * 0.5))

    def test_non_finite_gradient(self):
        param = np.array([1.0, 1.0])
        optimizer = Adam()
        with pytest.raises(NonFiniteError, match='p'):
            optimizer.step({'p': param}, {'p': np.array([1.0, np.nan])})
        np.testing.assert_array_equal(param, [1.0, 1.0])
        assert optimizer.t == 0

    def test_optimizer_step_updates_every_tensor(self, small_params):
        grads = {name: np.ones_like(array) for name, array in small_params.tensors().items()}
        before = small_params.copy()
        optimizer_step(small_params, grads, Adam(lr=1e-2))
        for name, array in small_params.tensors().items():
            assert not np.array_equal(array, before.tensors()[name]), name


class TestRunEpoch:

    def test_zero_learning_rate_freezes_parameters(self, small_stream, small_arrays, small_params):
        before = small_params.copy()
        cfg = TrainConfig(learning_rate=0.0, weight_decay=1e-5, bptt_window=2, task='statechange')
        plan = build_tbatches(small_arrays)
        run_epoch(small_params, EmbeddingBank.fresh(small_params), small_arrays, plan, cfg)
        for name, array in small_params.tensors().items():
            np.testing.assert_array_equal(array, before.tensors()[name])

    def test_whole_epoch_window_is_one_step(self, small_arrays, small_params):
        plan = build_tbatches(small_arrays)
        cfg = TrainConfig(learning_rate=1e-2, weight_decay=0.0, bptt_window=plan.num_batches)
        expected = small_params.copy()
        total, grads = loss_and_gradients(expected, small_arrays, plan)
        Adam(lr=1e-2).step(expected.tensors(), grads)

        optimizer = Adam(lr=1e-2)
        report = run_epoch(small_params, EmbeddingBank.fresh(small_params), small_arrays,
                           plan, cfg, optimizer)
        assert optimizer.t == 1
        assert report.loss_total == pytest.approx(total, rel=1e-10)
        for name, array in small_params.tensors().items():
            np.testing.assert_allclose(array, expected.tensors()[name], rtol=0, atol=1e-12)

    def test_steps_per_window(self, small_arrays, small_params):
        plan = build_tbatches(small_arrays)
        optimizer = Adam()
        run_epoch(small_params, EmbeddingBank.fresh(small_params), small_arrays, plan,
                  TrainConfig(bptt_window=3), optimizer)
        assert optimizer.t == -(-plan.num_batches // 3)

    def test_components_sum_to_total(self, small_arrays, small_params):
        report = run_epoch(
            small_params, EmbeddingBank.fresh(small_params), small_arrays,
            build_tbatches(small_arrays), TrainConfig(task='statechange', bptt_window=4),
        )
        parts = report.loss_pred + report.loss_drift_u + report.loss_drift_i + report.loss_state
        assert report.loss_total == pytest.approx(parts, abs=1e-9)
        assert report.loss_state > 0

    def test_interaction_task_has_no_state_loss(self, small_arrays, small_params):
        report = run_epoch(
            small_params, EmbeddingBank.fresh(small_params), small_arrays,
            build_tbatches(small_arrays), TrainConfig(bptt_window=4),
        )
        assert report.loss_state == 0.0

    def test_non_finite_loss_diagnostics(self, small_arrays, small_params):
        small_params.theta.b[0] = np.inf
        with pytest.raises(NonFiniteError) as excinfo:
            run_epoch(small_params, EmbeddingBank.fresh(small_params), small_arrays,
                      build_tbatches(small_arrays), TrainConfig(), epoch=3)
        assert (excinfo.value.epoch, excinfo.value.batch, excinfo.value.seq_index) == (3, 1, 0)
        assert 'epoch=3' in str(excinfo.value)

    def test_bank_reset_each_epoch(self, small_arrays, small_params):
        bank = EmbeddingBank.fresh(small_params)
        bank.dyn_user[...] = 7.0
        cfg = TrainConfig(learning_rate=0.0)
        plan = build_tbatches(small_arrays)
        first = run_epoch(small_params, bank, small_arrays, plan, cfg)
        second = run_epoch(small_params, bank, small_arrays, plan, cfg)
        assert report_values(first)[1:6] == report_values(second)[1:6]


class TestBatchOrderEquivalence:
    """Batched and sequential processing agree on the snapshot view."""

    def test_forward_losses_and_embeddings(self, stream_500):
        arrays = build_arrays(stream_500)
        params = params_for(stream_500, size=8, seed=5, lambda_s=2.0)
        batched = forward_epoch(params, arrays, build_tbatches(arrays), with_state=True)
        sequential = forward_epoch(params, arrays, naive_plan(arrays), with_state=True)
        for a, b in zip(batched.losses, sequential.losses):
            np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(batched.bank.dyn_user, sequential.bank.dyn_user, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(batched.bank.dyn_item, sequential.bank.dyn_item, rtol=1e-10, atol=1e-12)

    def test_current_view_depends_on_plan(self, stream_500):
        arrays = build_arrays(stream_500)
        params = params_for(stream_500, size=8, seed=5, prev_item_view='current')
        batched = forward_epoch(params, arrays, build_tbatches(arrays))
        sequential = forward_epoch(params, arrays, naive_plan(arrays))
        # Only the prediction reads the previous item's live row
        np.testing.assert_allclose(batched.bank.dyn_user, sequential.bank.dyn_user,
                                   rtol=1e-10, atol=1e-12)
        assert not np.allclose(batched.losses.prediction, sequential.losses.prediction,
                               rtol=1e-10, atol=1e-12)

    def test_epoch_totals_without_updates(self, stream_500):
        arrays = build_arrays(stream_500)
        params = params_for(stream_500, size=8, seed=6)
        cfg = TrainConfig(learning_rate=0.0, task='statechange')
        batched = run_epoch(params, EmbeddingBank.fresh(params), arrays, build_tbatches(arrays), cfg)
        sequential = run_epoch(params, EmbeddingBank.fresh(params), arrays, naive_plan(arrays), cfg)
        for a, b in zip(report_values(batched)[1:6], report_values(sequential)[1:6]):
            assert a == pytest.approx(b, rel=1e-10)

    def test_worker_threads(self, stream_factory):
        dataset = stream_factory(seed=5, length=3000, num_users=1500, num_items=1500, feature_dim=1)
        arrays = build_arrays(dataset)
        params = params_for(dataset, size=4, seed=7)
        plan = build_tbatches(arrays)
        assert max(len(batch) for batch in plan.batches) >= 4 * 64

        threaded = forward_epoch(params, arrays, plan, workers=4)
        sequential = forward_epoch(params, arrays, naive_plan(arrays))
        np.testing.assert_allclose(threaded.losses.total, sequential.losses.total,
                                   rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(threaded.bank.dyn_item, sequential.bank.dyn_item,
                                   rtol=1e-10, atol=1e-12)

    def test_chunked_batch_gradients(self, stream_factory):
        dataset = stream_factory(seed=5, length=3000, num_users=1500, num_items=1500, feature_dim=1)
        arrays = build_arrays(dataset)
        params = params_for(dataset, size=4, seed=7)
        plan = build_tbatches(arrays)
        dims = params.dims

        def segment_grads(pool, workers):
            bank = EmbeddingBank.fresh(params)
            caches = [
                trainer.apply_chunked(params, bank, arrays, batch, True, pool, workers)[1]
                for batch in plan.batches[:3]
            ]
            return trainer.backward_segment(
                params, caches, np.zeros(dims.num_users, dtype=bool),
                np.zeros(dims.d_i, dtype=bool), True,
            )

        with ThreadPoolExecutor(max_workers=4) as pool:
            threaded = segment_grads(pool, 4)
        inline = segment_grads(None, 1)
        for name, grad in inline.items():
            np.testing.assert_allclose(threaded[name], grad, rtol=1e-9, atol=1e-12)

    def test_training_epoch_uses_worker_pool(self, stream_factory, monkeypatch):
        dataset = stream_factory(seed=5, length=3000, num_users=1500, num_items=1500, feature_dim=1)
        arrays = build_arrays(dataset)
        plan = build_tbatches(arrays)
        pools, chunks = [], []

        class RecordingPool(ThreadPoolExecutor):
            def __init__(self, max_workers):
                pools.append(max_workers)
                super().__init__(max_workers=max_workers)

            def submit(self, *args, **kwargs):
                chunks.append(args[0].__name__)
                return super().submit(*args, **kwargs)

        monkeypatch.setattr(trainer, 'ThreadPoolExecutor', RecordingPool)
        cfg = TrainConfig(learning_rate=0.0, bptt_window=2, workers=4)
        params = params_for(dataset, size=4, seed=7)
        threaded = run_epoch(params, EmbeddingBank.fresh(params), arrays, plan, cfg)
        inline = run_epoch(params, EmbeddingBank.fresh(params), arrays, plan,
                           TrainConfig(learning_rate=0.0, bptt_window=2))

        assert pools == [4]
        assert len(chunks) >= 4 and set(chunks) == {'forward_step'}
        for a, b in zip(report_values(threaded)[1:6], report_values(inline)[1:6]):
            assert a == pytest.approx(b, rel=1e-10)

    def test_experiment_threads_reach_training(self, monkeypatch):
        pools = []

        class RecordingPool(ThreadPoolExecutor):
            def __init__(self, max_workers):
                pools.append(max_workers)
                super().__init__(max_workers=max_workers)

        monkeypatch.setattr(trainer, 'ThreadPoolExecutor', RecordingPool)
        dataset = drift(users=600, items=600, events=3000, seed=0)
        run_experiment(dataset, TrainConfig(epochs=1, workers=4), SplitConfig(), embed_dim=4)
        assert pools == [4]

    def test_prefix_has_no_lookahead(self, stream_500):
        arrays = build_arrays(stream_500)
        params = params_for(stream_500, size=4, seed=8)
        full = forward_epoch(params, arrays, build_tbatches(arrays))
        prefix = forward_epoch(params, arrays, build_tbatches(arrays, range(0, 200)))
        np.testing.assert_allclose(prefix.losses.total[:200], full.losses.total[:200],
                                   rtol=1e-10, atol=1e-12)


class TestSelection:

    def test_select_best(self):
        assert select_best([0.3, 0.7, 0.5]) == 2

    def test_first_maximum_wins(self):
        assert select_best([0.5, 0.5]) == 1

    def test_nan_ignored(self):
        assert select_best([float('nan'), 0.2, 0.1]) == 2
        assert select_best([float('nan'), float('nan')]) == 1

    def test_train_keeps_best_epoch(self, monkeypatch, small_stream):
        metrics = iter([0.3, 0.7, 0.5])
        monkeypatch.setattr(trainer, 'validation_metric', lambda *args, **kwargs: next(metrics))
        arrays = build_arrays(small_stream)
        split = chronological_split(small_stream, SplitConfig())
        params = params_for(small_stream, size=4)
        result = train(params, arrays, split, TrainConfig(epochs=3, bptt_window=4))
        assert result.best_epoch == 2
        assert result.best_metric == 0.7
        assert [r.val_metric for r in result.reports] == [0.3, 0.7, 0.5]

    def test_undefined_validation_auc_is_nan(self, stream_factory):
        dataset = stream_factory(seed=1, length=80, num_users=5, num_items=5)
        arrays = build_arrays(dataset)
        split = chronological_split(dataset, SplitConfig(0.6, 0.2, 0.2))
        params = params_for(dataset, size=4)
        result = train(params, arrays, split, TrainConfig(epochs=1, task='statechange'))
        assert np.isnan(result.reports[0].val_metric)
        assert result.best_epoch == 1


class TestTraining:

    def test_deterministic(self, small_stream):
        arrays = build_arrays(small_stream)
        split = chronological_split(small_stream, SplitConfig())
        cfg = TrainConfig(epochs=2, bptt_window=4, seed=3)
        runs = [
            train(params_for(small_stream, size=4, seed=3), arrays, split, cfg)
            for _ in range(2)
        ]
        assert [report_values(r) for r in runs[0].reports] == \
            [report_values(r) for r in runs[1].reports]
        for name, array in runs[0].params.tensors().items():
            np.testing.assert_array_equal(array, runs[1].params.tensors()[name])

    def test_listeners_receive_reports(self, small_stream):
        seen = []
        arrays = build_arrays(small_stream)
        split = chronological_split(small_stream, SplitConfig())
        train(params_for(small_stream, size=4), arrays, split,
              TrainConfig(epochs=2, bptt_window=4), listeners=[seen.append])
        assert [r.epoch for r in seen] == [1, 2]

    def test_loss_decreases_on_repetitive_stream(self):
        dataset = repetitive(users=10, items=6, events=300, seed=1)
        arrays = build_arrays(dataset)
        params = params_for(dataset, size=8, seed=1)
        cfg = TrainConfig(learning_rate=5e-3, weight_decay=0.0, bptt_window=4)
        plan = build_tbatches(arrays)
        bank = EmbeddingBank.fresh(params)
        optimizer = Adam(lr=cfg.learning_rate)
        losses = [
            run_epoch(params, bank, arrays, plan, cfg, optimizer, epoch).loss_total
            for epoch in range(1, 7)
        ]
        increases = sum(b >= a for a, b in zip(losses, losses[1:]))
        assert increases <= 1
        assert losses[-1] < losses[0]

    def test_drift_penalty_shrinks_drift(self, stream_factory):
        dataset = stream_factory(seed=12, length=300, num_users=10, num_items=8)
        arrays = build_arrays(dataset)
        plan = build_tbatches(arrays)
        mean_drift = {}
        for scale in (0.0, 10.0):
            params = params_for(dataset, size=8, seed=2, lambda_u=scale, lambda_i=scale)
            cfg = TrainConfig(learning_rate=1e-2, weight_decay=0.0, bptt_window=4,
                              lambda_u=scale, lambda_i=scale)
            bank = EmbeddingBank.fresh(params)
            optimizer = Adam(lr=cfg.learning_rate)
            for epoch in range(1, 9):
                run_epoch(params, bank, arrays, plan, cfg, optimizer, epoch)
            mean_drift[scale] = forward_epoch(params, arrays, plan).drift_u_dist.mean()
        assert mean_drift[10.0] < mean_drift[0.0]

    def test_run_experiment(self, small_stream):
        result, report, arrays, split = run_experiment(
            small_stream, TrainConfig(epochs=2, bptt_window=4), SplitConfig(), embed_dim=4,
        )
        assert len(result.reports) == 2
        assert report.split == 'test'
        assert 0.0 < report.mrr <= 1.0
        assert report.n_evaluated == len(split.test)
        assert arrays.scale > 0


@pytest.mark.slow
class TestAcceptance:
    """End-to-end learnability and throughput on the synthetic presets."""

    def test_repetitive_is_learnable(self):
        dataset = repetitive(users=20, items=10, events=2000, seed=7)
        cfg = TrainConfig(epochs=50, learning_rate=5e-3, weight_decay=0.0, bptt_window=4, seed=7)
        _, report, _, _ = run_experiment(dataset, cfg, SplitConfig(), embed_dim=32)
        assert report.mrr >= 0.9
        assert report.recall_at_k[10] == 1.0

    def test_dropout_state_change(self):
        dataset = dropout(users=1000, items=100, events=20000, seed=0)
        cfg = TrainConfig(epochs=20, learning_rate=1e-2, weight_decay=0.0, bptt_window=16,
                          lambda_s=10.0, task='statechange')
        _, report, _, _ = run_experiment(
            dataset, cfg, SplitConfig(0.6, 0.2, 0.2), embed_dim=32, horizon=5,
        )
        assert report.auc >= 0.85
        assert all(point.mean_ratio > 1.0 for point in report.early_warning)
        final = [point for point in report.early_warning if point.offset == 0][0]
        assert final.ci_low > 1.0

    def test_batched_forward_is_faster(self):
        dataset = drift(users=5000, items=1000, events=100000, seed=0)
        arrays = build_arrays(dataset)
        params = params_for(dataset, size=32)
        plan = build_tbatches(arrays)
        assert plan_stats(plan)['parallelism'] >= 8

        timings = {}
        for name, run_plan, workers in (('naive', naive_plan(arrays), 1), ('tbatch', plan, 4)):
            start = time.perf_counter()
            forward_epoch(params, arrays, run_plan, workers=workers)
            timings[name] = time.perf_counter() - start
        assert timings['naive'] / timings['tbatch'] >= 3.0
