import numpy as np
import pytest

from vtinv.corpus import ARTICULATORS, articulator_slice
from vtinv.errors import DataError, DimensionError, NumericError
from vtinv.models import (
    ModelSpec,
    Sample,
    build_model,
    canonical_variant,
    check_model_gradients,
    load_model,
    random_batch,
    save_model,
)

# dense 39->300, dense 300->300, BiLSTM 300->2x300, BiLSTM 600->2x300, dense 600->800
ST5_AAT_PARAMETERS = 4_187_900


def lstm_params(n_in, h):
    return 4 * h * n_in + 4 * h * h + 4 * h


def test_st5_parameter_count():
    expected = (39 * 300 + 300) + (300 * 300 + 300) + 2 * lstm_params(300, 300) \
        + 2 * lstm_params(600, 300) + (600 * 800 + 800)
    assert expected == ST5_AAT_PARAMETERS
    assert build_model(ModelSpec("ST5")).n_parameters == ST5_AAT_PARAMETERS


@pytest.mark.parametrize("variant,mode,art,in_dim,out_dim", [
    ("ST5", "AAT", None, 39, 800),
    ("ST5", "ABA", "tongue", 39, 100),
    ("ST8", "AAT", None, 39, 800),
    ("MT5", "AAT", None, 39, 800),
    ("ST5_CW11", "AAT", None, 429, 800),
])
def test_output_shapes(variant, mode, art, in_dim, out_dim):
    spec = ModelSpec(variant, mode, art, hidden_width=6)
    assert spec.input_dim == in_dim and spec.output_dim == out_dim
    model = build_model(spec, seed=1)
    out = model.forward_utterance(np.random.default_rng(0).standard_normal((7, in_dim)))
    assert out.contours.shape == (7, out_dim)
    if variant == "MT5":
        assert out.phone_probs.shape == (7, 44)
        np.testing.assert_allclose(out.phone_probs.sum(axis=1), 1.0, atol=1e-9)
    else:
        assert out.phone_probs is None


def test_st8_layer_structure():
    model = build_model(ModelSpec("ST8", hidden_width=4))
    names = model.params.names()
    assert [n for n in names if n.startswith("extra")] == [
        "extra1.weight", "extra1.bias", "extra2.weight", "extra2.bias", "extra3.weight", "extra3.bias"]
    assert model.params["extra1.weight"].shape == (800, 8)
    assert model.params["extra2.weight"].shape == (800, 800)
    assert model.params["output.weight"].shape == (800, 800)
    assert [l.activation for l in model.regression_head] == ["tanh", "tanh", "identity", "identity"]


def test_mt5_head_branches_from_second_bilstm():
    model = build_model(ModelSpec("MT5", hidden_width=4))
    assert model.params["phones.weight"].shape == (44, 8)


def test_bad_specs():
    with pytest.raises(DataError, match="bad spec"):
        ModelSpec("ST9")
    with pytest.raises(DataError, match="bad spec"):
        ModelSpec("ST5", "ABA")
    with pytest.raises(DataError, match="bad spec"):
        ModelSpec("ST5", "AAT", "tongue")
    with pytest.raises(DataError, match="bad spec"):
        ModelSpec("ST5", hidden_width=0)
    assert canonical_variant("ST-5-cw11") == "ST5_CW11"


def test_dimension_error():
    model = build_model(ModelSpec(hidden_width=4))
    with pytest.raises(DimensionError, match="dimension error"):
        model.forward_utterance(np.zeros((3, 40)))


def test_recurrence_carries_state():
    model = build_model(ModelSpec(hidden_width=6), seed=3)
    frame = np.random.default_rng(1).standard_normal(39)
    one = model.forward_utterance(frame[None]).contours
    two = model.forward_utterance(np.stack([frame, frame])).contours
    assert not np.allclose(one[0], two[0])


def test_predict_matches_single_utterance():
    model = build_model(ModelSpec(hidden_width=5), seed=2)
    rng = np.random.default_rng(0)
    xs = [rng.standard_normal((T, 39)) for T in (4, 9, 1)]
    batched = model.predict(xs, batch_size=2)
    for x, out in zip(xs, batched):
        np.testing.assert_allclose(out.contours, model.forward_utterance(x).contours, atol=1e-12)


@pytest.mark.parametrize("variant", ["ST5", "ST8", "MT5", "ST5_CW11"])
def test_full_model_gradients(variant):
    spec = ModelSpec(variant, hidden_width=5)
    model = build_model(spec, seed=11)
    batch = random_batch(spec, [8, 5, 3], seed=4)
    rep = check_model_gradients(model, batch)
    assert rep.passed, rep.summary()


def test_st5_aba_gradients():
    spec = ModelSpec("ST5", "ABA", "epiglottis", hidden_width=5)
    rep = check_model_gradients(build_model(spec), random_batch(spec, [4]))
    assert rep.passed, rep.summary()


def test_objective_is_mean_of_utterance_losses():
    spec = ModelSpec("MT5", hidden_width=4)
    model = build_model(spec, seed=0)
    batch = random_batch(spec, [6, 3], seed=1)
    singles = [model.objective([s], need_grad=False)[0] for s in batch]
    assert model.objective(batch, need_grad=False)[0] == pytest.approx(np.mean(singles), rel=1e-12)


def test_mt5_requires_phones():
    spec = ModelSpec("MT5", hidden_width=3)
    model = build_model(spec)
    with pytest.raises(DataError):
        model.objective([Sample(np.zeros((3, 39)), np.zeros((3, 800)))])


def test_backward_requires_forward():
    model = build_model(ModelSpec(hidden_width=3))
    with pytest.raises(NumericError, match="no forward state"):
        model.backward(np.zeros((1, 2, 800)))


def test_aba_output_matches_aat_slice_semantics():
    # Same targets, same layout: ABA targets are the AAT slice for the articulator.
    y = np.random.default_rng(0).standard_normal((5, 800))
    for a in ARTICULATORS:
        block = y[:, articulator_slice(a)]
        assert block.shape == (5, 100)
        np.testing.assert_array_equal(block[:, :50], y[:, 100 * ARTICULATORS.index(a):][:, :50])


def test_save_load_roundtrip(tmp_path):
    spec = ModelSpec("ST5_CW11", "ABA", "tongue", hidden_width=4)
    model = build_model(spec, seed=5)
    save_model(tmp_path / "m.vtm", model)
    back = load_model(tmp_path / "m.vtm")
    assert back.spec == spec
    x = np.random.default_rng(0).standard_normal((4, 429))
    np.testing.assert_array_equal(back.forward_utterance(x).contours, model.forward_utterance(x).contours)


def test_float32_mode():
    model = build_model(ModelSpec(hidden_width=4), dtype=np.float32)
    out = model.forward_utterance(np.zeros((3, 39)))
    assert out.contours.dtype == np.float32
    _, grads = model.objective(random_batch(model.spec, [3]))
    assert grads.dtype == np.float32
