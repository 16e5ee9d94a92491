import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from delayrl.core import (
    LIFT_LOGIT,
    ContractError,
    MixedState,
    StateDistribution,
    StateSchema,
    decode_hard,
    encode,
    encode_many,
    lift,
    load_arrays,
    load_state,
    rng_stream,
    save_arrays,
    save_state,
    soft_encode,
)


@st.composite
def mixed_states(draw):
    n = draw(st.integers(0, 6))
    cards = draw(st.lists(st.integers(2, 7), max_size=4))
    cont = draw(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=n, max_size=n))
    cats = [(c, draw(st.integers(0, c - 1))) for c in cards]
    return MixedState(cont, cats)


@settings(max_examples=1000, deadline=None)
@given(mixed_states())
def test_decode_lift_round_trip(state):
    assert decode_hard(lift(state)) == state


@settings(max_examples=200, deadline=None)
@given(mixed_states())
def test_encode_layout(state):
    schema = state.schema
    vec = encode(state, schema)
    assert vec.shape == (schema.encoded_size,)
    np.testing.assert_array_equal(vec[: schema.n_continuous], state.continuous)
    for (a, b), idx in zip(schema.slot_bounds(), state.indices):
        block = vec[a:b]
        assert block.sum() == 1.0 and block[idx] == 1.0
    np.testing.assert_array_equal(encode_many([state, state], schema)[1], vec)


def test_encode_example():
    s = MixedState([0.5, -1.0], [(3, 2), (2, 0)])
    np.testing.assert_array_equal(encode(s, s.schema), [0.5, -1.0, 0, 0, 1, 1, 0])


def test_lift_logits():
    s = MixedState([1.0], [(3, 1)])
    d = lift(s)
    np.testing.assert_array_equal(d.categorical_logits[0], [-LIFT_LOGIT, LIFT_LOGIT, -LIFT_LOGIT])
    np.testing.assert_array_equal(d.continuous_mean, [1.0])


def test_decode_hard_ties_go_to_lowest_index():
    schema = StateSchema(0, (4,))
    d = StateDistribution(schema, [0.0, 2.0, 2.0, 1.0])
    assert decode_hard(d).indices == (1,)


def test_soft_encode_sums_to_one():
    schema = StateSchema(1, (3, 5))
    rng = np.random.default_rng(0)
    out = soft_encode(rng.normal(size=(10, schema.encoded_size)) * 30, schema)
    for a, b in schema.slot_bounds():
        np.testing.assert_allclose(out[:, a:b].sum(axis=1), 1.0, atol=1e-12)


def test_schema_mismatch_is_contract_error():
    s = MixedState([1.0, 2.0], [(3, 0)])
    with pytest.raises(ContractError):
        encode(s, StateSchema(2, (4,)))
    with pytest.raises(ContractError):
        encode(s, StateSchema(1, (3,)))


def test_invalid_states_rejected():
    with pytest.raises(ContractError):
        MixedState([np.nan])
    with pytest.raises(ContractError):
        MixedState([], [(3, 3)])
    with pytest.raises(ContractError):
        StateSchema(1, (1,))


def test_states_are_immutable():
    s = MixedState([1.0], [(2, 1)])
    with pytest.raises(AttributeError):
        s.continuous = np.zeros(1)
    with pytest.raises(ValueError):
        s.continuous[0] = 5.0


def test_rng_streams_reproducible_and_distinct():
    a = rng_stream(7, 3).random(5)
    np.testing.assert_array_equal(a, rng_stream(7, 3).random(5))
    assert not np.array_equal(a, rng_stream(7, 4).random(5))
    assert not np.array_equal(a, rng_stream(8, 3).random(5))


def test_array_file_round_trip(tmp_path):
    arrays = {"w": np.arange(6, dtype=np.float64).reshape(2, 3) / 7, "n": np.array([3, -1], dtype=np.int64),
              "scalar": np.array(2.5)}
    path = tmp_path / "x.drl"
    save_arrays(path, arrays, {"kind": "test", "k": [1, 2]})
    meta, back = load_arrays(path)
    assert meta == {"kind": "test", "k": [1, 2]}
    for k, v in arrays.items():
        np.testing.assert_array_equal(back[k], v)
        assert back[k].shape == v.shape


def test_array_file_rejects_garbage(tmp_path):
    path = tmp_path / "bad.drl"
    path.write_bytes(b"NOPE" + b"\0" * 20)
    with pytest.raises(ContractError):
        load_arrays(path)
    save_arrays(path, {"a": np.zeros(3)})
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(ContractError):
        load_arrays(path)


def test_state_file_round_trip(tmp_path):
    s = MixedState([0.25, -3.0], [(6, 5), (6, 0)])
    save_state(tmp_path / "s.drl", s)
    assert load_state(tmp_path / "s.drl") == s
