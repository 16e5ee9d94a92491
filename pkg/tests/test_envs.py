import numpy as np
import pytest

from delayrl.core import ContractError, UsageError, rng_stream
from delayrl.envs import (
    NOOP,
    Chain,
    DelayedEnv,
    DelayedTwoPlayerEnv,
    DelayQueue,
    Gridworld,
    MeleeState,
    MiniMelee,
    MountainCar,
    make_env,
    minimelee_step,
    reaction_time_ms,
)
from delayrl.envs.minimelee import ACTIVE, ATTACK, IDLE, LEFT, RIGHT, SCHEMA, SHIELD, STARTUP, STUNNED
from delayrl.tabular import chain_mdp, gridworld_mdp


def test_queue_fifo():
    q = DelayQueue(2)
    assert q.snapshot() == (NOOP, NOOP)
    q.push(1)
    q.push(2)
    assert q.snapshot() == (1, 2)
    assert q.push(3) == 1
    assert q.snapshot() == (2, 3)


def test_queue_executes_chosen_after_d_steps():
    env = DelayedEnv(Chain(5), d=3)
    env.reset(rng_stream(0))
    executed = []
    for c in (1, 0, 1, 1, 0, 1):
        env.step(c)
        executed.append(env.last_executed)
    assert executed == [NOOP, NOOP, NOOP, 1, 0, 1]


def test_zero_delay_executes_immediately():
    q = DelayQueue(0)
    assert q.push(4) == 4 and q.snapshot() == ()


@pytest.mark.parametrize("name", ["chain", "gridworld", "mountaincar"])
@pytest.mark.parametrize("d", [0, 1, 3])
def test_executed_equals_chosen_minus_d(name, d):
    rng = rng_stream(1, d)
    env = DelayedEnv(make_env(name), d)
    env.reset(rng)
    chosen, executed = [], []
    for _ in range(10_000):
        a = int(rng.integers(env.n_actions))
        _, queue, _, done = env.step(a)
        chosen.append(a)
        executed.append(env.last_executed)
        if done:
            # a fresh episode refills the queue with no-ops; check the finished one
            for t in range(d, len(chosen)):
                assert executed[t] == chosen[t - d]
            assert executed[: min(d, len(chosen))] == [NOOP] * min(d, len(chosen))
            chosen, executed = [], []
            env.reset(rng)
        else:
            assert queue == tuple(([NOOP] * d + chosen)[len(chosen):])
    for t in range(d, len(chosen)):
        assert executed[t] == chosen[t - d]


@pytest.mark.parametrize("name", ["chain", "gridworld", "mountaincar"])
def test_d0_f1_is_identical_to_inner(name):
    params = {"slip": 0.2} if name == "gridworld" else {}
    inner = make_env(name, params)
    wrapped = DelayedEnv(make_env(name, params), 0, 1)
    s1 = inner.reset(rng_stream(3))
    s2, q = wrapped.reset(rng_stream(3))
    assert s1 == s2 and q == ()
    acts = rng_stream(4).integers(0, inner.n_actions, 500)
    for a in acts:
        o1, r1, d1 = inner.step(int(a))
        o2, _, r2, d2 = wrapped.step(int(a))
        assert (o1, r1, d1) == (o2, r2, d2)
        if d1:
            break


def test_frame_skip_repeats_and_sums():
    env = DelayedEnv(MountainCar(), 0, frame_skip=4)
    ref = MountainCar()
    env.reset(rng_stream(0))
    ref.reset(rng_stream(0))
    s, _, r, _ = env.step(2)
    total = 0.0
    for _ in range(4):
        s_ref, rr, _ = ref.step(2)
        total += rr
    assert s == s_ref and r == total == -4.0


def test_step_after_terminal_is_contract_error():
    env = DelayedEnv(Chain(2), 0)
    env.reset(rng_stream(0))
    _, _, r, done = env.step(1)
    assert done and r == 1.0
    with pytest.raises(ContractError):
        env.step(1)


def test_reaction_time_examples():
    assert reaction_time_ms(5, 4)[0] == 20 and round(reaction_time_ms(5, 4)[1]) == 333
    assert reaction_time_ms(1, 3)[:2] == (3, 50.0)
    assert round(reaction_time_ms(15, 1)[1]) == 250
    assert round(reaction_time_ms(1, 1)[1]) == 17
    assert reaction_time_ms(1, 3)[2] == pytest.approx(4 * 1000 / 60)
    with pytest.raises(ContractError):
        reaction_time_ms(1, 0)


def test_make_env_unknown_name():
    with pytest.raises(UsageError):
        make_env("pong")
    with pytest.raises(UsageError):
        make_env("chain", {"bogus": 1})


def test_make_env_constructor_contracts():
    assert Chain(5).schema.categorical_cards == (5,)
    assert make_env("minimelee").schema == SCHEMA
    assert SCHEMA.n_continuous == 8 and SCHEMA.categorical_cards == (6, 6)


def test_chain_matches_tabular_model():
    mdp = chain_mdp(5)
    env = Chain(5)
    for s in range(4):
        for a in range(2):
            env.reset(rng_stream(0))
            env.pos = s
            obs, r, _ = env.step(a)
            nxt = obs.indices[0]
            assert mdp.transitions[s, a, nxt] == 1.0 and mdp.rewards[s, a] == r


def test_gridworld_matches_tabular_model():
    slip = 0.3
    mdp = gridworld_mdp(4, 3, slip)
    env = Gridworld(4, 3, slip)
    rng = rng_stream(5)
    counts = np.zeros(12)
    env.reset(rng)
    for _ in range(20_000):
        env.reset(rng)
        env.xy = (1, 1)
        obs, _, _ = env.step(4)
        counts[obs.indices[0]] += 1
    s = 1 * 4 + 1
    np.testing.assert_allclose(counts / counts.sum(), mdp.transitions[s, 4], atol=0.015)


def test_gridworld_is_mildly_stochastic():
    eps = 0.2
    mdp = gridworld_mdp(5, 5, eps)
    assert np.all(mdp.transitions.max(axis=2) >= 1 - eps)
    assert gridworld_mdp(5, 5, 0.0).is_deterministic()


# --- mini-melee ----------------------------------------------------------------

def test_both_noop_at_spawn():
    s0 = MeleeState.spawn()
    s1, ra, rb, done = minimelee_step(s0, NOOP, NOOP)
    assert s1.x == s0.x and (ra, rb) == (0.0, 0.0) and not done


def test_active_attack_hits():
    s = MeleeState((0.0, 0.5), (0.0, 0.0), (0.0, 0.0), (1.0, -1.0), (ACTIVE, IDLE), (1, 0))
    s1, ra, rb, _ = minimelee_step(s, NOOP, NOOP)
    assert ra == pytest.approx(0.1) and rb == -ra
    assert s1.anim[1] == STUNNED and s1.damage[1] == 10.0


def test_shield_blocks_hit():
    s = MeleeState((0.0, 0.5), (0.0, 0.0), (0.0, 0.0), (1.0, -1.0), (ACTIVE, IDLE), (1, 0))
    s1, ra, _, _ = minimelee_step(s, NOOP, SHIELD)
    assert ra == 0.0 and s1.damage[1] == 0.0


def test_ko_at_95_damage():
    s = MeleeState((0.0, 0.5), (0.0, 0.0), (0.0, 95.0), (1.0, -1.0), (ACTIVE, IDLE), (1, 0))
    s1, ra, rb, _ = minimelee_step(s, NOOP, NOOP)
    assert ra == pytest.approx(1.1) and rb == pytest.approx(-1.1)
    assert s1.x == (-2.0, 2.0) and s1.damage == (0.0, 0.0)


def test_attack_phase_progression():
    s = MeleeState.spawn()
    anims = []
    for _ in range(6):
        s, _, _, _ = minimelee_step(s, ATTACK, NOOP)
        anims.append(s.anim[0])
    # startup 2 steps, active 1, recovery 2, then actionable again
    assert anims == [STARTUP, STARTUP, ACTIVE, 4, 4, IDLE]


def test_malformed_state_rejected():
    bad = MeleeState((0.0, 0.0), (0.0, 0.0), (0.0, 0.0), (1.0, -1.0), (STARTUP, IDLE), (0, 0))
    with pytest.raises(ContractError):
        minimelee_step(bad, NOOP, NOOP)


def test_episode_length_and_zero_sum():
    env = MiniMelee(episode_steps=1000)
    env.reset(rng_stream(0))
    rng = rng_stream(1)
    total_a = total_b = 0.0
    steps = 0
    done = False
    while not done:
        _, (ra, rb), done = env.step(int(rng.integers(5)), int(rng.integers(5)))
        total_a += ra
        total_b += rb
        steps += 1
    assert steps == 1000
    assert total_a + total_b == 0.0


def test_observation_is_egocentric_for_both_players():
    env = MiniMelee()
    o0, o1 = env.reset(rng_stream(0))
    assert o0 == o1  # spawn is mirror-symmetric
    # both players "walk toward the enemy" with the same egocentric action
    (o0, o1), _, _ = env.step(RIGHT, RIGHT)
    assert o0 == o1
    assert env.state.x == (-1.75, 1.75)
    (o0, o1), _, _ = env.step(LEFT, NOOP)
    assert env.state.x == (-2.0, 1.75)


def test_two_player_delays_are_independent():
    env = DelayedTwoPlayerEnv(MiniMelee(), (2, 0))
    env.reset(rng_stream(0))
    env.step(RIGHT, RIGHT)
    assert env.last_executed == (NOOP, RIGHT)
    env.step(LEFT, LEFT)
    env.step(NOOP, NOOP)
    assert env.last_executed == (RIGHT, NOOP)
