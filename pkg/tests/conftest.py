import numpy as np
import pytest

from delayrl.agents import Actor
from delayrl.core import rng_stream
from delayrl.envs import DelayedEnv, make_env


class UniformSeat:
    """Uniform-random behaviour policy whose trajectories are recorded."""

    learns = True

    def __init__(self, n_actions, d, rng):
        self.n_actions = n_actions
        self.d = d
        self.rng = rng
        self.hidden = np.zeros((0, 0))

    def begin(self, n):
        self.hidden = np.zeros((n, 0))

    def reset_rows(self, rows):
        pass

    def act_batch(self, enc, queues, raw_states=None):
        n = enc.shape[0]
        a = self.rng.integers(0, self.n_actions, size=n)
        return a, np.full(n, -np.log(self.n_actions)), self.hidden


def random_trajectory(env_name, params=None, d=0, T=40, n_envs=8, seed=0):
    """One batch of uniform-random experience from ``n_envs`` delayed copies of an environment."""
    envs = [DelayedEnv(make_env(env_name, params), d) for _ in range(n_envs)]
    rngs = [rng_stream(seed, 1000 + i) for i in range(n_envs)]
    seat = UniformSeat(envs[0].inner.n_actions, d, rng_stream(seed, 1))
    return Actor(envs, [seat], rngs).collect(T)[0]


@pytest.fixture
def chain_batch():
    return random_trajectory("chain", {"n": 5, "max_steps": 30}, d=0, T=60, n_envs=8, seed=0)
