import numpy as np
import pytest

from vtinv import nn
from vtinv.corpus import ARTICULATORS
from vtinv.errors import DataError, DivergenceError
from vtinv.models import ModelSpec, build_model, random_batch, load_model
from vtinv.training import (
    AdamState,
    EarlyStopping,
    TrainConfig,
    adam_step,
    evaluate,
    run_experiment,
    to_samples,
    train,
    write_predictions,
)

TINY = dict(hidden_width=3, max_epochs=2, patience=1, seed=0)


def single(value):
    store = nn.ParameterStore()
    store.add("w", np.array(value, dtype=float))
    return store


def test_adam_zero_gradient():
    p = single([1.0, -2.0])
    state = AdamState.for_params(p)
    adam_step(p, p.zeros_like(), state, 1e-3)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])
    assert state.step == 1


def test_adam_first_step_is_lr_times_sign():
    g = np.array([3.0, -0.02, 1e-3])
    p = single(np.zeros(3))
    grads = single(g)
    adam_step(p, grads, AdamState.for_params(p), 1e-3)
    # bias-corrected moments: m_hat = g, v_hat = g^2
    np.testing.assert_allclose(p["w"], -1e-3 * g / (np.abs(g) + 1e-8), rtol=1e-12)
    np.testing.assert_allclose(p["w"], -1e-3 * np.sign(g), rtol=1e-5)


def test_adam_reversed_gradient_shrinks_step():
    p = single([0.0])
    state = AdamState.for_params(p)
    adam_step(p, single([1.0]), state, 1e-3)
    first = p["w"][0]
    adam_step(p, single([-1.0]), state, 1e-3)
    second = p["w"][0] - first
    # m_hat = -0.01 / 0.19, v_hat = 1
    assert second == pytest.approx(1e-3 * (0.01 / 0.19) / (1 + 1e-8), rel=1e-9)
    assert abs(second) < abs(first)


def test_adam_non_finite():
    p = single([0.0, 0.0])
    with pytest.raises(DivergenceError, match="divergence"):
        adam_step(p, single([np.nan, 1.0]), AdamState.for_params(p), 1e-3)


def test_early_stopping_rule():
    es = EarlyStopping(10, 1e-6)
    seq = [5, 4] + [4] * 10
    for epoch, v in enumerate(seq, start=1):
        es.update(epoch, v)
        if es.should_stop(epoch):
            break
    assert (epoch, es.best_epoch) == (12, 2)


def test_config_validation():
    with pytest.raises(DataError):
        TrainConfig(patience=500, max_epochs=500)
    with pytest.raises(DataError):
        TrainConfig(learning_rate=0)
    with pytest.raises(DataError):
        TrainConfig(precision="float16")
    assert TrainConfig.from_dict({"max_epochs": 70, "unknown": 1}).max_epochs == 70


def _tiny_setup(variant="ST5", hidden=3, lengths=(5, 4, 3), seed=0):
    spec = ModelSpec(variant, hidden_width=hidden)
    return build_model(spec, seed=seed), random_batch(spec, list(lengths), seed=seed)


def test_stub_evaluator_controls_stopping():
    model, data = _tiny_setup()
    seq = [5, 4] + [4] * 20
    best, log = train(model, data, [], TrainConfig(max_epochs=50, patience=10, hidden_width=3),
                      valid_loss_fn=lambda epoch, m: seq[epoch - 1])
    assert (log.stop_epoch, log.best_epoch, log.stop_reason) == (12, 2, "early_stopping")
    assert log.stop_epoch - log.best_epoch == 10


def test_strictly_decreasing_runs_all_epochs():
    model, data = _tiny_setup(lengths=(2,))
    _, log = train(model, data, [], TrainConfig(max_epochs=500, patience=10, hidden_width=3),
                   valid_loss_fn=lambda epoch, m: 1000.0 - epoch)
    assert (log.stop_epoch, log.best_epoch, log.stop_reason) == (500, 500, "max_epochs")


def test_returns_best_epoch_parameters():
    model, data = _tiny_setup()
    seen = {}
    seq = [3.0, 1.0, 2.0, 2.0, 2.0]

    def stub(epoch, m):
        seen[epoch] = m.params.flat().copy()
        return seq[epoch - 1]

    best, log = train(model, data, [], TrainConfig(max_epochs=20, patience=3, hidden_width=3), stub)
    assert log.best_epoch == 2
    np.testing.assert_array_equal(best.flat(), seen[2])
    assert not np.array_equal(model.params.flat(), seen[2])


def test_best_losses_non_increasing():
    model, data = _tiny_setup()
    _, log = train(model, data, data, TrainConfig(max_epochs=15, patience=3, hidden_width=3))
    bests = [r.valid_loss for r in log.records if r.improved]
    assert bests == sorted(bests, reverse=True)


def test_same_seed_identical_log(tmp_path):
    logs = []
    for i in range(2):
        model, data = _tiny_setup()
        _, log = train(model, data, data[:1], TrainConfig(max_epochs=6, patience=2, hidden_width=3, seed=4))
        log.write_csv(tmp_path / f"log{i}.csv")
        logs.append((tmp_path / f"log{i}.csv").read_bytes())
    assert logs[0] == logs[1]
    assert logs[0].splitlines()[0] == b"epoch,train_loss,valid_loss,best"


def test_overfit_one_utterance_monotone():
    spec = ModelSpec("ST5", hidden_width=16)
    model = build_model(spec, seed=0)
    data = random_batch(spec, [30], seed=0)
    _, log = train(model, data, data, TrainConfig(max_epochs=21, patience=20, hidden_width=16))
    losses = [r.train_loss for r in log.records]
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]


def test_empty_split():
    model, data = _tiny_setup()
    with pytest.raises(DataError, match="empty split"):
        train(model, [], data, TrainConfig(**TINY))
    with pytest.raises(DataError, match="empty split"):
        train(model, data, [], TrainConfig(**TINY))


def test_divergence_aborts():
    model, data = _tiny_setup()
    model.objective = lambda batch, need_grad=True: (float("nan"), model.params.zeros_like())
    with pytest.raises(DivergenceError):
        train(model, data, data, TrainConfig(**TINY))


def test_aba_emits_eight_checkpoints(tmp_path, small_prepared):
    res = run_experiment("ABA", "ST5", small_prepared, TrainConfig(**TINY), tmp_path)
    assert len(res.checkpoints) == 8
    assert sorted(p.name for p in tmp_path.glob("*.vtm")) == sorted(f"model_{a}.vtm" for a in ARTICULATORS)
    assert res.report.articulators == list(ARTICULATORS)
    assert load_model(res.checkpoints[0]).spec.output_dim == 100
    assert {"metrics.csv", "frame_errors.csv", "run.json"} <= {p.name for p in tmp_path.iterdir()}


def test_aat_single_checkpoint_and_no_test_leakage(tmp_path, small_prepared):
    res = run_experiment("AAT", "ST5", small_prepared, TrainConfig(**TINY), tmp_path)
    assert res.checkpoints == [tmp_path / "model_all.vtm"]
    assert load_model(res.checkpoints[0]).spec.output_dim == 800
    log = small_prepared.access_log
    assert "test" not in log[:log.index("test")] and log[-1] == "test"
    assert log.index("test") > log.index("train") and log.index("test") > log.index("valid")


def test_cw11_pipeline(small_prepared):
    res = run_experiment("AAT", "ST5_CW11", small_prepared, TrainConfig(**TINY))
    assert res.runs[0].model.spec.input_dim == 429
    assert res.report.model == "ST-5-cw11"


def test_mt5_reports_phone_accuracy(small_prepared):
    res = run_experiment("AAT", "MT5", small_prepared, TrainConfig(**TINY))
    assert 0.0 <= res.phone_accuracy <= 1.0


def test_baseline_comparison(small_prepared):
    a = run_experiment("AAT", "ST5", small_prepared, TrainConfig(**TINY))
    b = run_experiment("AAT", "ST5", small_prepared, TrainConfig(**TINY), baseline=a.report)
    assert all(p == 1.0 for p in b.report.p_values.values())


def test_parallel_aba_matches_sequential(small_prepared):
    cfg = TrainConfig(**TINY)
    arts = ["tongue", "epiglottis"]
    seq = run_experiment("ABA", "ST5", small_prepared, cfg, articulators=arts)
    par = run_experiment("ABA", "ST5", small_prepared, cfg, articulators=arts, workers=2)
    for a in arts:
        np.testing.assert_array_equal(seq.report.frame_errors[a], par.report.frame_errors[a])


def test_float32_training(small_prepared):
    res = run_experiment("AAT", "ST5", small_prepared, TrainConfig(precision="float32", **TINY))
    assert res.runs[0].model.params.dtype == np.float32
    assert np.isfinite(res.report.mean.rmse_mean_mm)


def test_evaluation_uses_only_unmasked_frames(small_prepared):
    model = build_model(ModelSpec(hidden_width=3))
    utts = small_prepared.splits["test"]
    ev = evaluate(model, utts, 1.62)
    assert len(ev.frame_errors["tongue"]) == sum(int(u.eval_mask.sum()) for u in utts)


def test_write_predictions(tmp_path, small_prepared):
    model = build_model(ModelSpec(hidden_width=3))
    utts = small_prepared.splits["test"]
    ev = evaluate(model, utts, 1.62)
    paths = write_predictions(tmp_path, model, utts, ev)
    assert len(paths) == len(utts)
    assert (tmp_path / f"{utts[0].id}_truth.csv").exists()
    aba = build_model(ModelSpec("ST5", "ABA", "tongue", hidden_width=3))
    with pytest.raises(DataError):
        write_predictions(tmp_path, aba, utts, evaluate(aba, utts, 1.62))


def test_to_samples_aba_slices_targets(small_prepared):
    utts = small_prepared.splits["valid"]
    s = to_samples(utts, ModelSpec("ST5", "ABA", "lower-lip", hidden_width=3))
    np.testing.assert_array_equal(s[0].y, utts[0].targets[:, 200:300])
