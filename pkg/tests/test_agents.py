from dataclasses import replace

import numpy as np
import pytest

from delayrl.agents import (
    Actor,
    AgentConfig,
    AgentNets,
    LearningSeat,
    act,
    compute_loss,
    delayed_returns,
    executing_mask,
    learner_update,
    make_optimizer,
    policy_forward,
    vtrace_targets,
)
from delayrl.core import ContractError, MixedState, TrainingError, rng_stream
from delayrl.envs import DelayedEnv, make_env
from delayrl.gradcheck import SMALL_SCHEMA, check_learner, random_trajectory
from delayrl.nn import log_softmax

# hand evaluation of the V-trace recursion for ratios [2, 0.5, 1], clips 1, gamma 0.9:
#   rho = c = [1, 0.5, 1]
#   delta = [1 + .9*1 - .5, .5*(0 + .9*(-.5) - 1), 2 + .9*2 + .5] = [1.4, -0.725, 4.3]
#   v - V = [1.4 + .9*1.21, -0.725 + .9*.5*4.3, 4.3] = [2.489, 1.21, 4.3]
VTRACE_V0 = 2.989
VTRACE_ADV = [2.489, 1.21, 4.3]


def test_config_invariants():
    with pytest.raises(ContractError):
        AgentConfig(d=1, p=2)
    with pytest.raises(ContractError):
        AgentConfig(gamma=1.0)
    with pytest.raises(ContractError):
        AgentConfig(rho_bar=0.5, c_bar=1.0)
    with pytest.raises(ContractError):
        AgentConfig(d=5, unroll=5)


def test_delayed_returns_geometric_sum():
    np.testing.assert_allclose(delayed_returns([1, 1, 1, 1, 1], 2, 0.5), [1.75, 1.5, 1.0])


def test_delayed_returns_zero_rewards_and_zero_gamma():
    np.testing.assert_array_equal(delayed_returns(np.zeros(6), 3, 0.9), np.zeros(3))
    r = np.arange(6.0)
    np.testing.assert_array_equal(delayed_returns(r, 2, 0.0), r[2:])


def test_delayed_returns_ignore_rewards_before_execution():
    r = np.random.default_rng(0).normal(size=8)
    base = delayed_returns(r, 3, 0.9, bootstrap=1.5)
    for t in range(len(base)):
        r2 = r.copy()
        r2[t : t + 3] = 0.0
        assert delayed_returns(r2, 3, 0.9, bootstrap=1.5)[t] == base[t]


def test_delayed_returns_too_short():
    with pytest.raises(ContractError):
        delayed_returns([1.0, 1.0], 2, 0.9)


def test_vtrace_hand_example():
    behavior = np.log([0.25, 0.5, 0.3])
    target = behavior + np.log([2.0, 0.5, 1.0])
    vs, adv = vtrace_targets(behavior, target, [0.5, 1.0, -0.5], [1.0, 0.0, 2.0], 0.9, 2.0)
    assert vs[0] == pytest.approx(VTRACE_V0, abs=1e-12)
    np.testing.assert_allclose(adv, VTRACE_ADV, atol=1e-12)


def test_vtrace_on_policy_is_n_step_return():
    rng = np.random.default_rng(1)
    logp = np.log(rng.uniform(0.1, 1, size=7))
    values, rewards = rng.normal(size=7), rng.normal(size=7)
    vs, _ = vtrace_targets(logp, logp, values, rewards, 0.95, 0.7)
    np.testing.assert_allclose(vs, delayed_returns(rewards, 0, 0.95, bootstrap=0.7), atol=1e-12)


def test_vtrace_zero_td_errors_give_values():
    values = np.array([1.0, 2.0, 4.0])
    rewards = values - 0.5 * np.array([2.0, 4.0, 8.0])
    vs, _ = vtrace_targets(np.zeros(3), np.log([0.3, 3.0, 1.0]), values, rewards, 0.5, 8.0)
    np.testing.assert_allclose(vs, values, atol=1e-15)


def test_vtrace_non_finite_ratio():
    with pytest.raises(TrainingError):
        vtrace_targets([0.0], [-np.inf], [0.0], [0.0], 0.9, 0.0)


def test_executing_mask_drops_decisions_cut_by_episode_end():
    dones = np.array([[False, False, True, False, False, False]])
    # d = 2: decisions 0 and 1 execute at steps 2 and 3; decision 1's episode ended at step 2
    np.testing.assert_array_equal(executing_mask(dones, 2), [[True, False, False, True]])


def nets_for(d, p, seed=0, schema=SMALL_SCHEMA, n_actions=3, **kw):
    cfg = AgentConfig(d=d, p=p, hidden=8, core=5, layers=1, unroll=max(d + 2, 6), **kw)
    return AgentNets(cfg, schema, n_actions, np.random.default_rng(seed))


def first_layer_input(nets, enc, queues, hid):
    _, (pcache, _, _), _ = policy_forward(nets, enc, queues, hid)
    return pcache[0][0]


def test_policy_input_layouts():
    enc = np.zeros((1, SMALL_SCHEMA.encoded_size))
    enc[0, 2] = enc[0, 5] = 1.0
    q = np.array([[0, 1, 2, 1]])
    assert nets_for(0, 0).policy_in == SMALL_SCHEMA.encoded_size
    assert nets_for(4, 4).policy_in == SMALL_SCHEMA.encoded_size
    nets = nets_for(4, 2)
    x = first_layer_input(nets, enc, q, np.zeros((1, 5)))
    suffix = x[0, SMALL_SCHEMA.encoded_size :].reshape(2, 3)
    np.testing.assert_array_equal(np.argmax(suffix, axis=1), [2, 1])
    aug = nets_for(4, 0)
    x = first_layer_input(aug, enc, q, np.zeros((1, 0)))
    np.testing.assert_array_equal(np.argmax(x[0, SMALL_SCHEMA.encoded_size :].reshape(4, 3), axis=1), q[0])


def test_act_checks_queue_length():
    nets = nets_for(2, 1)
    state = MixedState([0.0, 0.0], [(3, 0), (4, 1)])
    with pytest.raises(ContractError):
        act(nets, state, [0], np.zeros(5), np.random.default_rng(0))
    a, lp, h = act(nets, state, [0, 2], np.zeros(5), np.random.default_rng(0))
    assert 0 <= a < 3 and np.isfinite(lp) and h.shape == (5,)


def test_policy_probabilities_normalised():
    nets = nets_for(3, 2, seed=4)
    traj = random_trajectory(np.random.default_rng(0), SMALL_SCHEMA, 3, B=4, T=6, d=3, core=5)
    logits, _, _ = policy_forward(nets, traj.states[:, 0], traj.queues[:, 0], traj.hiddens[:, 0])
    assert np.max(np.abs(np.exp(log_softmax(logits)).sum(axis=1) - 1)) < 1e-12


def policy_grad_for(nets, traj, b, k):
    """Policy-loss gradient contributed by decision (b, k) alone."""
    _, _, (vs, adv) = compute_loss(nets, traj, backward=False)
    keep = np.zeros_like(adv)
    keep[b, k] = adv[b, k]
    nets.zero_grad()
    compute_loss(nets, traj, (vs, keep), backward=True)
    return adv[b, k], {n: g.copy() for n, g in nets.policy.gradients().items()}


@pytest.mark.parametrize("d,p", [(2, 0), (3, 2)])
def test_return_alignment(d, p):
    rng = np.random.default_rng(d)
    nets = nets_for(d, p, seed=1, entropy_weight=0.0, model_weight=0.0)
    traj = random_trajectory(rng, SMALL_SCHEMA, 3, B=2, T=8, d=d, core=nets.core_size, done_prob=0.0)
    for k in range(traj.T - d):
        adv, grads = policy_grad_for(nets, traj, 0, k)
        traj2 = replace(traj, rewards=traj.rewards.copy())
        traj2.rewards[0, k : k + d] = 0.0
        adv2, grads2 = policy_grad_for(nets, traj2, 0, k)
        assert adv == adv2
        for n in grads:
            np.testing.assert_array_equal(grads[n], grads2[n])


def test_critic_reads_true_states_only():
    nets = nets_for(3, 2, seed=2, rho_bar=1e-6, c_bar=1e-6)
    traj = random_trajectory(np.random.default_rng(5), SMALL_SCHEMA, 3, B=2, T=6, d=3, core=5)
    _, _, (vs, _) = compute_loss(nets, traj, backward=False)
    # perturbing the predictor moves every predicted state; with clipped ratios the targets must not move
    for _, param, _ in nets.model.named_parameters():
        param += 0.3
    _, _, (vs2, _) = compute_loss(nets, traj, backward=False)
    np.testing.assert_array_equal(vs, vs2)


def collect(nets, env_name="chain", params=None, T=12, n=3, seed=0):
    cfg = nets.config
    envs = [DelayedEnv(make_env(env_name, params), cfg.d) for _ in range(n)]
    actor = Actor(envs, [LearningSeat(nets, rng_stream(seed, 1))], [rng_stream(seed, 10 + i) for i in range(n)])
    return actor.collect(T)[0]


def test_actor_learner_consistency():
    chain = make_env("chain", {"n": 6, "max_steps": 9})
    cfg = AgentConfig(d=3, p=2, hidden=8, core=5, layers=1, unroll=12)
    nets = AgentNets(cfg, chain.schema, 2, np.random.default_rng(3))
    traj = collect(nets, params={"n": 6, "max_steps": 9})
    assert traj.dones.any()
    B, T = traj.B, traj.T
    S = chain.schema.encoded_size
    logits, _, _ = policy_forward(nets, traj.states[:, :T].reshape(B * T, S), traj.queues[:, :T].reshape(B * T, 3),
                                  traj.hiddens[:, :T].reshape(B * T, -1))
    logp = log_softmax(logits)[np.arange(B * T), traj.actions.reshape(-1)].reshape(B, T)
    np.testing.assert_array_equal(logp, traj.behavior_logp)


def test_trajectory_executed_is_delayed_choice():
    chain_params = {"n": 50, "max_steps": 1000}
    cfg = AgentConfig(d=3, p=0, hidden=8, layers=1, unroll=20)
    nets = AgentNets(cfg, make_env("chain", chain_params).schema, 2, np.random.default_rng(0))
    traj = collect(nets, params=chain_params, T=20)
    assert not traj.dones.any()
    np.testing.assert_array_equal(traj.executed[:, 3:], traj.actions[:, :-3])
    np.testing.assert_array_equal(traj.executed[:, :3], 0)


def test_zero_advantage_batch_keeps_policy():
    nets = nets_for(2, 0, seed=3, entropy_weight=0.0)
    last = nets.value.layers[-1]
    last.params["W"][:] = 0.0
    last.params["b"][:] = 0.0
    traj = random_trajectory(np.random.default_rng(0), SMALL_SCHEMA, 3, B=2, T=6, d=2, core=0)
    traj.rewards[:] = 0.0
    before = {n: p.copy() for n, p in nets.policy.state_dict().items()}
    learner_update(traj, nets, make_optimizer(nets))
    for n, p in nets.policy.state_dict().items():
        np.testing.assert_array_equal(p, before[n])


def test_on_policy_batch_collapses_to_actor_critic():
    nets = nets_for(1, 0, seed=5)
    traj = random_trajectory(np.random.default_rng(2), SMALL_SCHEMA, 3, B=3, T=6, d=1, core=0, done_prob=0.0)
    B, T = traj.B, traj.T
    logits, _, _ = policy_forward(nets, traj.states[:, :T].reshape(B * T, -1), traj.queues[:, :T].reshape(B * T, 1),
                                  np.zeros((B * T, 0)))
    traj.behavior_logp = log_softmax(logits)[np.arange(B * T), traj.actions.reshape(-1)].reshape(B, T)
    _, _, (vs, _) = compute_loss(nets, traj, backward=False)
    values = nets.value.forward(traj.states.reshape(B * (T + 1), -1))[0].reshape(B, T + 1)
    for b in range(B):
        expected = delayed_returns(traj.rewards[b], 1, nets.config.gamma, bootstrap=values[b, T])
        n_step = [expected[k] for k in range(T - 1)]
        np.testing.assert_allclose(vs[b], n_step, atol=1e-12)


def test_learner_gradient_matches_finite_differences():
    assert check_learner(0) < 1e-4


def test_learner_update_reports_metrics():
    nets = nets_for(3, 2, seed=0)
    traj = random_trajectory(np.random.default_rng(0), SMALL_SCHEMA, 3, B=2, T=6, d=3, core=5)
    metrics = learner_update(traj, nets, make_optimizer(nets))
    for key in ("policy_loss", "value_loss", "model_loss", "entropy", "grad_norm", "pred_accuracy", "pred_rmse"):
        assert np.isfinite(metrics[key])


def test_trajectory_contracts():
    nets = nets_for(3, 0)
    traj = random_trajectory(np.random.default_rng(0), SMALL_SCHEMA, 3, B=1, T=3, d=3, core=0)
    with pytest.raises(ContractError):
        compute_loss(nets, traj)
    traj = random_trajectory(np.random.default_rng(0), SMALL_SCHEMA, 3, B=1, T=6, d=3, core=0)
    traj.behavior_logp[0, 0] = np.nan
    with pytest.raises(ContractError):
        compute_loss(nets, traj)


def test_schema_mismatch_in_policy():
    nets = nets_for(0, 0)
    with pytest.raises(ContractError):
        policy_forward(nets, np.zeros((1, 4)), np.zeros((1, 0)), np.zeros((1, 0)))


def test_identical_seeds_identical_updates():
    def run():
        nets = nets_for(2, 1, seed=9)
        opt = make_optimizer(nets)
        for i in range(3):
            traj = random_trajectory(np.random.default_rng(i), SMALL_SCHEMA, 3, B=2, T=6, d=2, core=5)
            learner_update(traj, nets, opt)
        return nets.state_dict()

    a, b = run(), run()
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])
