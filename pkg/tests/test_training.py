import numpy as np
import pytest

from tpocnn.autograd import Tensor
from tpocnn.data import compute_band_stats, generate_synthetic_cube, make_split, normalize
from tpocnn.errors import ContractError, MetricError, TrainingAbort
from tpocnn.models import ModelSpec, TpoCnn
from tpocnn.sampler import SamplerConfig, build_dataset
from tpocnn.training import (
    Adam,
    RunReport,
    TrainConfig,
    average_accuracy,
    confusion_matrix,
    evaluate,
    kappa,
    overall_accuracy,
    per_class_accuracy,
    predict_scene,
    repeat_experiment,
    train,
)


class TestAdam:
    def test_zero_gradient_is_fixed_point(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        p.grad = np.zeros(2)
        opt = Adam([p], learning_rate=0.1, weight_decay=0.0)
        opt.step()
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_first_step_moves_learning_rate_times_sign(self):
        for g in (0.3, -1.7, 10.0):
            p = Tensor(np.array([0.0]), requires_grad=True)
            p.grad = np.array([g])
            opt = Adam([p], learning_rate=1e-3, weight_decay=0.0)
            opt.step()
            np.testing.assert_allclose(p.data, [-1e-3 * np.sign(g)], rtol=1e-4)

    def test_quadratic_bowl_converges(self):
        theta = Tensor(np.array([1.0]), requires_grad=True)
        opt = Adam([theta], learning_rate=1e-2, weight_decay=0.0)
        for _ in range(500):
            theta.grad = 2.0 * theta.data  # d/dtheta theta^2
            opt.step()
            theta.zero_grad()
        assert abs(theta.data[0]) < 1e-3

    def test_decoupled_weight_decay_shrinks_params(self):
        p = Tensor(np.array([4.0]), requires_grad=True)
        opt = Adam([p], learning_rate=0.1, weight_decay=0.5)
        p.grad = np.array([0.0])
        opt.step()
        # zero gradient: only the decay term -lr*lambda*theta acts
        np.testing.assert_allclose(p.data, [4.0 - 0.1 * 0.5 * 4.0])

    def test_nan_gradient_aborts(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        p.grad = np.array([np.nan])
        with pytest.raises(TrainingAbort):
            Adam([p]).step()


class TestMetrics:
    def test_oa_hand_values(self):
        assert overall_accuracy(np.array([[5, 0], [0, 5]])) == 100.0
        assert overall_accuracy(np.array([[3, 1], [1, 3]])) == 75.0

    def test_oa_equals_support_weighted_recall(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            cm = rng.integers(0, 30, size=(4, 4))
            cm[0, 0] += 1  # keep total > 0
            supports = cm.sum(axis=1)
            mask = supports > 0
            recalls = np.diag(cm)[mask] / supports[mask]
            want = 100.0 * (supports[mask] * recalls).sum() / cm.sum()
            np.testing.assert_allclose(overall_accuracy(cm), want, rtol=1e-12)

    def test_aa_hand_values(self):
        assert average_accuracy(np.array([[3, 1], [1, 3]])) == 75.0
        np.testing.assert_allclose(average_accuracy(np.array([[9, 1], [0, 10]])), 95.0)

    def test_aa_equals_oa_for_balanced_equal_recall(self):
        for recall_num in (6, 8):
            cm = np.full((3, 3), (10 - recall_num) // 2)
            np.fill_diagonal(cm, recall_num)
            np.testing.assert_allclose(average_accuracy(cm), overall_accuracy(cm), rtol=1e-12)

    def test_aa_empty_class_names_class(self):
        with pytest.raises(MetricError, match="class 2"):
            average_accuracy(np.array([[3, 0], [0, 0]]))

    def test_kappa_perfect_agreement(self):
        assert kappa(np.diag([7, 3, 9])) == 1.0

    def test_kappa_chance_agreement(self):
        assert kappa(np.array([[1, 1], [1, 1]])) == 0.0

    def test_kappa_hand_marginals(self):
        # total 50, p_o = 0.7, p_e = (25*30 + 25*20)/2500 = 0.5
        np.testing.assert_allclose(kappa(np.array([[20, 5], [10, 15]])), 0.4, atol=1e-12)

    def test_kappa_degenerate_single_cell(self):
        with pytest.raises(MetricError):
            kappa(np.array([[10, 0], [0, 0]]))

    def test_metrics_invariant_under_relabeling(self):
        rng = np.random.default_rng(1)
        cm = rng.integers(1, 20, size=(4, 4))
        perm = rng.permutation(4)
        permuted = cm[np.ix_(perm, perm)]
        np.testing.assert_allclose(overall_accuracy(permuted), overall_accuracy(cm))
        np.testing.assert_allclose(average_accuracy(permuted), average_accuracy(cm))
        np.testing.assert_allclose(kappa(permuted), kappa(cm))

    def test_empty_matrix_undefined(self):
        with pytest.raises(MetricError):
            overall_accuracy(np.zeros((2, 2), dtype=np.int64))

    def test_confusion_matrix_totals(self):
        cm = confusion_matrix([1, 2, 2, 3], [1, 2, 3, 3], 3)
        assert cm.sum() == 4
        assert cm[1, 2] == 1 and cm[2, 2] == 1


def tiny_task(per_class=8, seed=0, **model_kw):
    cube, labels = generate_synthetic_cube(12, 12, 8, 3, seed=seed)
    normed = normalize(cube, compute_band_stats(cube))
    split = make_split(labels, per_class=per_class, seed=seed)
    cfg = SamplerConfig(patch_size=3)
    train_ds = build_dataset(normed, labels, split, cfg, part="train")
    test_ds = build_dataset(normed, labels, split, cfg, part="test")
    spec = ModelSpec(variant=model_kw.pop("variant", "tpo_cnn1"), p=2, q=2, r=2,
                     input_bands=8, patch_size=3, class_count=3,
                     branch_channels=model_kw.pop("branch_channels", 8), **model_kw)
    model = TpoCnn(spec)
    model.init_params(seed)
    return model, train_ds, test_ds


class TestTrainLoop:
    def test_one_epoch_small_data_single_step(self):
        model, train_ds, _ = tiny_task(per_class=4)
        report = train(model, train_ds, TrainConfig(epochs=1, batch_size=512, seed=0))
        assert len(report.loss_trace) == 1

    def test_first_loss_with_uniform_predictions(self):
        model, train_ds, _ = tiny_task(per_class=4)
        model.head.weight.data = np.zeros_like(model.head.weight.data)
        model.head.bias.data = np.zeros_like(model.head.bias.data)
        report = train(model, train_ds, TrainConfig(epochs=1, learning_rate=0.0, seed=0))
        n = len(train_ds)
        np.testing.assert_allclose(report.loss_trace[0], n * np.log(3), rtol=1e-5)

    def test_deterministic_given_seed(self):
        reports, states = [], []
        for _ in range(2):
            model, train_ds, test_ds = tiny_task(per_class=6)
            reports.append(train(model, train_ds,
                                 TrainConfig(epochs=5, learning_rate=3e-3, seed=42),
                                 eval_dataset=test_ds))
            states.append(b"".join(v.tobytes() for _, v in model.state_items()))
        assert reports[0].loss_trace == reports[1].loss_trace
        assert states[0] == states[1]
        assert reports[0].oa == reports[1].oa

    def test_trailing_window_loss_halves(self):
        model, train_ds, _ = tiny_task(per_class=10)
        report = train(model, train_ds,
                       TrainConfig(epochs=60, batch_size=16, learning_rate=3e-3, seed=1))
        trace = report.loss_trace
        assert len(trace) >= 40
        first = np.mean(trace[:20])
        last = np.mean(trace[-20:])
        assert last <= 0.5 * first

    def test_learns_separable_task(self):
        model, train_ds, test_ds = tiny_task(per_class=10)
        report = train(model, train_ds,
                       TrainConfig(epochs=60, batch_size=32, learning_rate=3e-3, seed=3),
                       eval_dataset=test_ds)
        assert report.oa >= 90.0

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nonfinite_loss_aborts_with_last_good_state(self):
        model, train_ds, _ = tiny_task(per_class=4)
        cfg = TrainConfig(epochs=10, learning_rate=1e25, seed=0)
        with pytest.raises(TrainingAbort) as exc_info:
            train(model, train_ds, cfg)
        state = exc_info.value.last_good_state
        assert state is not None
        assert all(np.all(np.isfinite(v)) for _, v in state)

    def test_empty_dataset_rejected(self):
        model, train_ds, _ = tiny_task(per_class=4)
        with pytest.raises(ContractError):
            train(model, [], TrainConfig(epochs=1))


class TestEvaluate:
    def test_matches_single_sample_loop(self):
        model, train_ds, test_ds = tiny_task(per_class=6)
        train(model, train_ds, TrainConfig(epochs=8, learning_rate=3e-3, seed=0))
        cm_batched = evaluate(model, test_ds, batch_size=16)

        from tpocnn import autograd as ag
        reference = np.zeros((3, 3), dtype=np.int64)
        model.eval_mode()
        with ag.no_grad():
            for sample in test_ds:
                probs = model.forward(Tensor(sample.views[None].astype(np.float32)))
                pred = int(np.argmax(probs.data[0])) + 1
                reference[sample.label - 1, pred - 1] += 1
        np.testing.assert_array_equal(cm_batched, reference)

    def test_total_equals_dataset_size(self):
        model, train_ds, test_ds = tiny_task(per_class=5)
        cm = evaluate(model, test_ds)
        assert cm.sum() == len(test_ds)

    def test_perfect_predictor_diagonal(self):
        class Oracle:
            def __init__(self, class_count):
                self.spec = type("S", (), {"class_count": class_count})()
                self.dtype = np.float32

            def eval_mode(self):
                return self

            def forward(self, x):
                # peak at the class encoded in the center pixel of view 0, band 0
                batch = x.data
                out = np.zeros((batch.shape[0], 3), dtype=np.float32)
                k = batch.shape[-1] // 2
                for i, v in enumerate(batch):
                    out[i, int(round(v[0, 0, k, k])) - 1] = 1.0
                return Tensor(out)

        cube, labels = generate_synthetic_cube(8, 8, 3, 3, seed=0, noise=0.0)
        encoded = np.broadcast_to(labels.labels[None].astype(np.float32), cube.values.shape).copy()
        from tpocnn.data import HsiCube

        split = make_split(labels, per_class=5, seed=0)
        ds = build_dataset(HsiCube(encoded), labels, split, SamplerConfig(patch_size=3), part="test")
        cm = evaluate(Oracle(3), ds)
        assert np.all(cm == np.diag(np.diag(cm)))
        assert cm.sum() == len(ds)


class TestPredictScene:
    def test_shape_and_determinism(self):
        model, train_ds, _ = tiny_task(per_class=6)
        train(model, train_ds, TrainConfig(epochs=5, learning_rate=3e-3, seed=0))
        cube, _ = generate_synthetic_cube(12, 12, 8, 3, seed=0)
        normed = normalize(cube, compute_band_stats(cube))
        a = predict_scene(model, normed, SamplerConfig(patch_size=3))
        b = predict_scene(model, normed, SamplerConfig(patch_size=3))
        assert a.shape == (12, 12)
        np.testing.assert_array_equal(a, b)

    def test_threaded_matches_single(self, monkeypatch):
        model, train_ds, _ = tiny_task(per_class=6)
        train(model, train_ds, TrainConfig(epochs=3, learning_rate=3e-3, seed=0))
        cube, _ = generate_synthetic_cube(12, 12, 8, 3, seed=0)
        normed = normalize(cube, compute_band_stats(cube))
        single = predict_scene(model, normed, SamplerConfig(patch_size=3), batch_size=16)
        monkeypatch.setenv("TPO_THREADS", "3")
        threaded = predict_scene(model, normed, SamplerConfig(patch_size=3), batch_size=16)
        np.testing.assert_array_equal(single, threaded)


def _fake_report(oa, aa=None, k=None, seed=0):
    return RunReport(oa=oa, aa=aa if aa is not None else oa,
                     kappa_score=k if k is not None else oa / 100.0,
                     per_class=np.array([oa]), confusion=np.array([[1]]),
                     loss_trace=[1.0], wall_clock=0.0, seed=seed)


class TestRepeatExperiment:
    def test_identical_runs_zero_std(self):
        summary, _ = repeat_experiment(lambda seed: _fake_report(97.0), base_seed=0, runs=4)
        assert summary["oa_mean"] == 97.0
        assert summary["oa_std"] == 0.0

    def test_mean_and_sample_std(self):
        outcomes = {5: 98.0, 6: 100.0}
        summary, _ = repeat_experiment(lambda seed: _fake_report(outcomes[seed]), base_seed=5, runs=2)
        np.testing.assert_allclose(summary["oa_mean"], 99.0)
        np.testing.assert_allclose(summary["oa_std"], np.sqrt(2.0))

    def test_summary_matches_log_replay(self):
        rng = np.random.default_rng(3)
        values = {i: float(v) for i, v in enumerate(rng.uniform(90, 100, size=5))}
        summary, reports = repeat_experiment(lambda seed: _fake_report(values[seed]), base_seed=0, runs=5)
        replay = [r.oa for r in reports]
        np.testing.assert_allclose(summary["oa_mean"], np.mean(replay))
        np.testing.assert_allclose(summary["oa_std"], np.std(replay, ddof=1))

    def test_minimum_runs(self):
        with pytest.raises(ContractError):
            repeat_experiment(lambda seed: _fake_report(1.0), base_seed=0, runs=1)

    def test_failure_carries_run_index(self):
        def flaky(seed):
            if seed == 2:
                raise ValueError("boom")
            return _fake_report(99.0, seed=seed)

        with pytest.raises(TrainingAbort, match="seed 2"):
            repeat_experiment(flaky, base_seed=0, runs=5)
