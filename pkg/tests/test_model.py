import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from partlab import autodiff as ad
from partlab.autodiff import ContractError, Tape, Tensor, grad_check
from partlab.data import LabelSchema
from partlab.losses import LossMask, SharpenConfig, total_loss
from partlab.model import (AdapterWeights, ModelConfig, TaskEncoding, adapter_answer, answer,
                           extract_features, init_model, load_checkpoint, predict, query_class,
                           save_checkpoint)

SMALL = ModelConfig(input_dim=12, hidden_dim=8, feature_dim=4)
ABC = LabelSchema(("a", "b", "c"))


@pytest.fixture
def state():
    return init_model(ABC, SMALL, seed=3)


def _batch(n=5, d=12, seed=0):
    return np.random.default_rng(seed).random((n, d))


def test_init_shapes(state):
    shapes = {name: p.shape for name, p in state.named_parameters()}
    assert shapes == {"W1": (12, 8), "b1": (8,), "W2": (8, 4), "b2": (4,),
                      "A": (4, 3), "b": (4,), "q": (3, 3)}
    np.testing.assert_array_equal(state.encoding.q.values, np.eye(3))
    assert np.all(state.adapter.b.values == 0)
    assert np.all(np.abs(state.extractor.W1.values) <= 1 / np.sqrt(12))


def test_init_is_seeded():
    a, b = init_model(ABC, SMALL, seed=1), init_model(ABC, SMALL, seed=1)
    assert all(x.values.tobytes() == y.values.tobytes()
               for x, y in zip(a.parameters(), b.parameters()))
    c = init_model(ABC, SMALL, seed=2)
    assert a.extractor.W1.values.tobytes() != c.extractor.W1.values.tobytes()


def test_zero_image_gives_zero_features(state):
    f = extract_features(state.extractor, np.zeros((2, 12)))
    assert f.shape == (2, 4) and np.all(f.values == 0.0)


def test_features_nonnegative(state):
    assert np.all(extract_features(state.extractor, _batch(7)).values >= 0.0)


def test_wrong_width_rejected(state):
    with pytest.raises(ContractError):
        extract_features(state.extractor, np.zeros((2, 11)))


def test_feature_gradient_oracle(state):
    x = _batch(3)

    def fn(w1):
        state.extractor.W1 = w1
        return ad.mean(extract_features(state.extractor, x))

    w1 = state.extractor.W1.values.copy()
    assert grad_check(fn, w1, 1e-5, indices=range(0, w1.size, 7)) < 1e-4


def test_zero_adapter_answers_half(state):
    state.adapter.A.values[...] = 0.0
    out = answer(state, _batch())
    assert np.all(out.values == 0.5)
    q = query_class(state, _batch(), 1)
    assert np.all(q.values == 0.5)


def test_identity_encoding_hand_oracle():
    A = np.array([[1.0, 0.0, -1.0], [0.5, 2.0, 0.0], [0.0, -1.0, 1.0], [1.0, 1.0, 1.0]])
    b = np.array([0.1, -0.2, 0.0, 0.3])
    feats = np.array([[1.0, 0.0, 2.0, 0.5], [0.0, 3.0, 1.0, 0.0]])
    out = adapter_answer(TaskEncoding(Tensor(np.eye(3))), Tensor(feats),
                         AdapterWeights(Tensor(A), Tensor(b))).values
    # w_c = column c of A plus b; logits are plain dot products
    expected = np.empty((2, 3))
    for i in range(2):
        for c in range(3):
            w = [A[k][c] + b[k] for k in range(4)]
            z = sum(w[k] * feats[i][k] for k in range(4))
            expected[i, c] = 1.0 / (1.0 + np.exp(-z))
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-15)


def test_soft_encoding_mixes_columns():
    A = np.arange(8.0).reshape(4, 2) / 10
    q = np.array([[0.7, 0.3], [0.0, 1.0]])
    feats = np.ones((1, 4))
    out = adapter_answer(TaskEncoding(Tensor(q)), Tensor(feats),
                         AdapterWeights(Tensor(A), Tensor(np.zeros(4)))).values
    z0 = (0.7 * A[:, 0] + 0.3 * A[:, 1]).sum()
    assert out[0, 0] == pytest.approx(1 / (1 + np.exp(-z0)), abs=1e-15)


def test_identity_reduces_to_linear_classifier(state):
    x = _batch(20)
    feats = extract_features(state.extractor, x).values
    out = answer(state, x).values
    np.testing.assert_array_equal(out.argmax(axis=1), (feats @ state.adapter.A.values).argmax(axis=1))


def test_permutation_symmetry(state):
    x = _batch(6)
    perm = [2, 0, 1]
    permuted = init_model(LabelSchema(tuple(ABC.classes[i] for i in perm)), SMALL, seed=3)
    for p, s in zip(permuted.parameters(), state.parameters()):
        p.values[...] = s.values
    permuted.adapter.A.values[...] = state.adapter.A.values[:, perm]
    permuted.encoding.q.values[...] = state.encoding.q.values[np.ix_(perm, perm)]
    np.testing.assert_allclose(answer(permuted, x).values, answer(state, x).values[:, perm],
                               rtol=0, atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 40), st.integers(0, 10_000))
def test_query_class_equals_column_exactly(n, seed):
    state = init_model(LabelSchema.canonical("abcde"), SMALL, seed=seed % 7)
    rng = np.random.default_rng(seed)
    state.encoding.q.values[...] = rng.normal(size=(5, 5))
    state.adapter.b.values[...] = rng.normal(size=4)
    x = rng.random((n, 12))
    full = answer(state, x).values
    cols = np.stack([query_class(state, x, c).values for c in range(5)], axis=1)
    assert cols.tobytes() == full.tobytes()


def test_query_class_batch_of_one(state):
    out = query_class(state, _batch(1), 0)
    assert out.shape == (1,)


@pytest.mark.parametrize("c", [-1, 3])
def test_query_class_range(state, c):
    with pytest.raises(ContractError):
        query_class(state, _batch(), c)


def test_encoding_must_match_schema(state):
    from partlab.model import ModelState
    with pytest.raises(ContractError):
        ModelState(state.extractor, TaskEncoding(Tensor(np.eye(2))), state.adapter, ABC)


def test_answers_strictly_inside_unit_interval(state):
    out = answer(state, _batch(30) * 50).values
    assert np.all(out > 0.0) and np.all(out < 1.0)


def test_gradient_reaches_q(state):
    x = _batch(4)
    states = np.array([[1, 0, -1], [0, 1, -1], [1, -1, 0], [-1, 0, 1]])
    with Tape() as tape:
        a_w = answer(state, x)
        a_s = answer(state, x)
        losses = total_loss(a_w, a_s, LossMask.from_states(states), SharpenConfig(),
                            use_pseudo=True, use_consist=True)
        ad.backward(losses.l_total, tape)
    assert np.any(state.encoding.q.grad != 0.0)


def test_predict_matches_answer_and_records_nothing(state):
    x = _batch(9)
    with Tape() as tape:
        out = predict(state, x.reshape(9, 3, 4), chunk=4)
    assert len(tape) == 0
    np.testing.assert_array_equal(out, answer(state, x).values)


def test_checkpoint_round_trip(tmp_path, state):
    state.encoding.q.values[0, 1] = 0.25
    save_checkpoint(state, tmp_path / "m.bin")
    back = load_checkpoint(tmp_path / "m.bin")
    assert back.schema == state.schema and back.config == state.config and back.seed == 3
    for (name, p), (_, q) in zip(state.named_parameters(), back.named_parameters()):
        assert p.values.tobytes() == q.values.tobytes(), name
    assert (tmp_path / "m.bin").read_bytes()[:4] == b"PLCK"


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x").write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(ContractError):
        load_checkpoint(tmp_path / "x")
