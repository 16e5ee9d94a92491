"""Small single-agent environments: chain, gridworld, mountain car."""
from __future__ import annotations

import math

from delayrl.core import ContractError, MixedState, StateSchema
from delayrl.envs.base import Environment


class Chain(Environment):
    """N cells in a line, start at the left, reward 1 on entering the right end.

    Actions: 0 = left (a no-op against the left wall), 1 = right.
    State: normalised position plus the cell index as a categorical slot.
    """

    n_actions = 2

    def __init__(self, n: int = 5, max_steps: int = 100):
        super().__init__()
        if n < 2:
            raise ContractError("chain needs at least 2 states")
        self.n = int(n)
        self.max_steps = int(max_steps)
        self.schema = StateSchema(1, (self.n,))
        self.pos = 0
        self.t = 0

    def state_of(self, i: int) -> MixedState:
        return MixedState([i / (self.n - 1)], [(self.n, i)])

    def _reset(self):
        self.pos = 0
        self.t = 0
        return self.state_of(0)

    def _step(self, action):
        self.pos = max(self.pos - 1, 0) if action == 0 else min(self.pos + 1, self.n - 1)
        self.t += 1
        goal = self.pos == self.n - 1
        return self.state_of(self.pos), (1.0 if goal else 0.0), goal or self.t >= self.max_steps


class Gridworld(Environment):
    """W x H grid, start (0, 0), goal (W-1, H-1) worth 1 and terminal.

    Actions: 0 = stay, 1 = up, 2 = down, 3 = left, 4 = right.  With probability
    ``slip`` a move is replaced by a uniformly random move (the no-op never slips).
    """

    n_actions = 5
    MOVES = ((0, 0), (0, 1), (0, -1), (-1, 0), (1, 0))

    def __init__(self, width: int = 5, height: int = 5, slip: float = 0.0, max_steps: int = 200):
        super().__init__()
        if not 0.0 <= slip <= 1.0:
            raise ContractError("slip must be a probability")
        self.width, self.height = int(width), int(height)
        self.slip = float(slip)
        self.max_steps = int(max_steps)
        self.schema = StateSchema(2, (self.width * self.height,))
        self.xy = (0, 0)
        self.t = 0

    def cell(self, x: int, y: int) -> int:
        return y * self.width + x

    def state_of(self, x: int, y: int) -> MixedState:
        return MixedState(
            [x / max(self.width - 1, 1), y / max(self.height - 1, 1)],
            [(self.width * self.height, self.cell(x, y))],
        )

    def move(self, x: int, y: int, action: int) -> tuple[int, int]:
        dx, dy = self.MOVES[action]
        return min(max(x + dx, 0), self.width - 1), min(max(y + dy, 0), self.height - 1)

    def _reset(self):
        self.xy = (0, 0)
        self.t = 0
        return self.state_of(0, 0)

    def _step(self, action):
        if action != 0 and self.slip > 0 and self.rng.random() < self.slip:
            action = 1 + int(self.rng.integers(4))
        self.xy = self.move(*self.xy, action)
        self.t += 1
        goal = self.xy == (self.width - 1, self.height - 1)
        return self.state_of(*self.xy), (1.0 if goal else 0.0), goal or self.t >= self.max_steps


class MountainCar(Environment):
    """Classic 1-D mountain car. Actions: 0 = coast, 1 = push left, 2 = push right."""

    n_actions = 3
    FORCE = (0.0, -1.0, 1.0)

    def __init__(self, max_steps: int = 200):
        super().__init__()
        self.max_steps = int(max_steps)
        self.schema = StateSchema(2, ())
        self.pos = -0.5
        self.vel = 0.0
        self.t = 0

    def _obs(self):
        # velocity scaled to roughly unit range for the networks
        return MixedState([self.pos, self.vel * 10.0])

    def _reset(self):
        self.pos = float(self.rng.uniform(-0.6, -0.4))
        self.vel = 0.0
        self.t = 0
        return self._obs()

    def _step(self, action):
        self.vel += self.FORCE[action] * 0.001 - 0.0025 * math.cos(3.0 * self.pos)
        self.vel = min(max(self.vel, -0.07), 0.07)
        self.pos += self.vel
        self.pos = min(max(self.pos, -1.2), 0.6)
        if self.pos <= -1.2 and self.vel < 0:
            self.vel = 0.0
        self.t += 1
        goal = self.pos >= 0.5
        return self._obs(), -1.0, goal or self.t >= self.max_steps
