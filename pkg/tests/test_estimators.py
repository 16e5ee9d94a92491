import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from delayrl.core import ContractError, MixedState, StateSchema, decode_hard, load_arrays
from delayrl.envs import Chain, make_env
from delayrl.estimators import DelayedActorCritic, ResidualPredictor


def small_agent(**kw):
    params = dict(hidden=16, core=8, layers=1, unroll=8, n_envs=4, lr=1e-3, random_state=0)
    params.update(kw)
    return DelayedActorCritic(**params)


def test_get_params_and_clone():
    est = small_agent(d=3, p=2)
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    assert est.config.d == 3 and est.config.p == 2
    est.set_params(p=1)
    assert est.config.p == 1


def test_unfitted_estimator_refuses_prediction():
    with pytest.raises(NotFittedError):
        small_agent().predict_proba([MixedState([0.0], [(5, 0)])], np.zeros((1, 0)))


def test_predict_proba_rows_sum_to_one():
    env = Chain(5)
    est = small_agent(d=2, p=1).initialize(env.schema, env.n_actions)
    states = [env.state_of(i) for i in range(5)]
    probs = est.predict_proba(states, np.zeros((5, 2), dtype=int))
    assert probs.shape == (5, 2)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
    assert est.predict(states, np.zeros((5, 2), dtype=int)).shape == (5,)


def test_queue_contract():
    env = Chain(5)
    est = small_agent(d=2).initialize(env.schema, env.n_actions)
    with pytest.raises(ContractError):
        est.predict_proba([env.state_of(0)], [[0, 7]])
    with pytest.raises(ValueError):
        est.predict_proba([env.state_of(0)], [[0, 1, 1]])


def test_fit_counts_steps_and_updates():
    est = small_agent(d=1).fit(Chain(5), total_steps=100)
    assert est.steps_ == 4 * 8 * 4
    assert est.n_updates_ == 4


def test_chain_learns_optimal_greedy_policy():
    env = Chain(5, max_steps=20)
    est = DelayedActorCritic(hidden=16, layers=1, unroll=10, n_envs=8, lr=3e-3, gamma=0.9, random_state=0)
    est.fit(env, total_steps=50_000)
    # value iteration on the chain says: always move right, reaching the goal in 4 steps
    greedy = est.predict([env.state_of(i) for i in range(4)], np.zeros((4, 0), dtype=int))
    np.testing.assert_array_equal(greedy, [1, 1, 1, 1])


def test_save_load_round_trip(tmp_path):
    env = Chain(5)
    est = small_agent(d=2, p=2).fit(env, total_steps=64)
    path = tmp_path / "agent.drl"
    est.save(path, meta={"note": "x"})
    loaded = DelayedActorCritic.load(path, env.schema)
    assert loaded.get_params() == est.get_params()
    assert loaded.steps_ == est.steps_ and loaded.meta_["note"] == "x"
    for k, v in est.nets_.state_dict().items():
        np.testing.assert_array_equal(loaded.nets_.state_dict()[k], v)
    states = [env.state_of(i) for i in range(3)]
    q = np.ones((3, 2), dtype=int)
    np.testing.assert_array_equal(loaded.predict_proba(states, q), est.predict_proba(states, q))
    meta, _ = load_arrays(path)
    assert meta["kind"] == "DelayedActorCritic"


def test_load_rejects_mismatched_schema(tmp_path):
    env = Chain(5)
    path = tmp_path / "agent.drl"
    small_agent().initialize(env.schema, env.n_actions).save(path)
    with pytest.raises(ContractError):
        DelayedActorCritic.load(path, StateSchema(1, (6,)))


def test_sample_is_reproducible():
    env = make_env("gridworld")
    est = small_agent(d=1).initialize(env.schema, env.n_actions)
    states = [env.reset(np.random.default_rng(0))] * 6
    q = np.zeros((6, 1), dtype=int)
    a1, lp1, _ = est.sample(states, q, np.random.default_rng(3))
    a2, lp2, _ = est.sample(states, q, np.random.default_rng(3))
    np.testing.assert_array_equal(a1, a2)
    np.testing.assert_array_equal(lp1, lp2)


def test_residual_predictor_rejects_unknown_solver(chain_batch):
    with pytest.raises(ContractError):
        ResidualPredictor(solver="sgd").fit(chain_batch, Chain(5).schema, 2)


def test_residual_predictor_lbfgs_fits_chain(chain_batch):
    env = Chain(5)
    est = ResidualPredictor(core=8, hidden=16, solver="lbfgs", n_iter=400, refresh=200).fit(chain_batch, env.schema, 2)
    score = est.score(chain_batch)
    assert score["pred_accuracy"] == 1.0
    assert score["pred_rmse"] < 0.02
    hid = est.hidden_states(chain_batch)
    dist = est.rollout(chain_batch.states[:1, 0], hid[:1, 0], [[1, 1]])[0]
    assert decode_hard(dist).categorical == ((5, 2),)
