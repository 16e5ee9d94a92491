from delayrl.core import UsageError
from delayrl.envs.base import NOOP, Environment, TwoPlayerEnv
from delayrl.envs.classic import Chain, Gridworld, MountainCar
from delayrl.envs.delay import DelayedEnv, DelayedTwoPlayerEnv, DelayQueue, reaction_time_ms
from delayrl.envs.minimelee import RULESET, MeleeState, MiniMelee, minimelee_step

ENVIRONMENTS = {
    "chain": Chain,
    "gridworld": Gridworld,
    "mountaincar": MountainCar,
    "minimelee": MiniMelee,
}

TWO_PLAYER = {"minimelee"}


def make_env(name: str, params: dict | None = None, rng=None):
    """Build an environment by name. ``rng`` (if given) is attached for the first reset."""
    try:
        cls = ENVIRONMENTS[name]
    except KeyError:
        raise UsageError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}") from None
    try:
        env = cls(**(params or {}))
    except TypeError as exc:
        raise UsageError(f"bad parameters for environment {name!r}: {exc}") from None
    env.rng = rng
    return env


__all__ = [
    "NOOP", "Environment", "TwoPlayerEnv", "Chain", "Gridworld", "MountainCar", "MiniMelee",
    "MeleeState", "minimelee_step", "RULESET", "DelayQueue", "DelayedEnv", "DelayedTwoPlayerEnv",
    "reaction_time_ms", "make_env", "ENVIRONMENTS", "TWO_PLAYER",
]
