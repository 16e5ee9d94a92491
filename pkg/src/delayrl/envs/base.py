from __future__ import annotations

from abc import ABC, abstractmethod

import numpy as np

from delayrl.core import ContractError, MixedState, StateSchema

NOOP = 0


class Environment(ABC):
    """Single-agent environment. Action 0 is always the no-op."""

    schema: StateSchema
    n_actions: int

    def __init__(self):
        self._done = True
        self.rng: np.random.Generator | None = None

    def reset(self, rng: np.random.Generator) -> MixedState:
        self.rng = rng
        self._done = False
        return self._reset()

    def step(self, action: int) -> tuple[MixedState, float, bool]:
        if self._done:
            raise ContractError("step() called on a terminated environment; call reset() first")
        action = int(action)
        if not 0 <= action < self.n_actions:
            raise ContractError(f"action {action} outside [0, {self.n_actions})")
        state, reward, done = self._step(action)
        self._done = done
        return state, float(reward), done

    @property
    def done(self) -> bool:
        return self._done

    @abstractmethod
    def _reset(self) -> MixedState: ...

    @abstractmethod
    def _step(self, action: int) -> tuple[MixedState, float, bool]: ...


class TwoPlayerEnv(ABC):
    """Simultaneous-move zero-sum game; ``observe(player)`` gives each side its own view."""

    schema: StateSchema
    n_actions: int

    def __init__(self):
        self._done = True
        self.rng: np.random.Generator | None = None

    def reset(self, rng: np.random.Generator) -> tuple[MixedState, MixedState]:
        self.rng = rng
        self._done = False
        self._reset()
        return self.observe(0), self.observe(1)

    def step(self, action_a: int, action_b: int):
        """Returns ((obs_a, obs_b), (reward_a, reward_b), done)."""
        if self._done:
            raise ContractError("step() called on a terminated environment; call reset() first")
        for a in (action_a, action_b):
            if not 0 <= int(a) < self.n_actions:
                raise ContractError(f"action {a} outside [0, {self.n_actions})")
        reward_a, done = self._step(int(action_a), int(action_b))
        self._done = done
        return (self.observe(0), self.observe(1)), (reward_a, -reward_a), done

    @property
    def done(self) -> bool:
        return self._done

    @abstractmethod
    def observe(self, player: int) -> MixedState: ...

    @abstractmethod
    def _reset(self) -> None: ...

    @abstractmethod
    def _step(self, action_a: int, action_b: int) -> tuple[float, bool]: ...
