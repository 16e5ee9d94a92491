"""Action-delay queue and the delayed / frame-skipped environment wrappers."""
from __future__ import annotations

from collections import deque

import numpy as np

from delayrl.core import ContractError, MixedState
from delayrl.envs.base import NOOP, Environment, TwoPlayerEnv


class DelayQueue:
    """FIFO of exactly ``d`` pending actions, refilled with no-ops on reset."""

    def __init__(self, d: int, noop: int = NOOP):
        if d < 0:
            raise ContractError("delay must be non-negative")
        self.d = int(d)
        self.noop = noop
        self._buf: deque[int] = deque([noop] * self.d)

    def reset(self) -> None:
        self._buf = deque([self.noop] * self.d)

    def push(self, action: int) -> int:
        """Append ``action`` and return the action that leaves the queue (executes now)."""
        if self.d == 0:
            return int(action)
        self._buf.append(int(action))
        return self._buf.popleft()

    def snapshot(self) -> tuple[int, ...]:
        """Pending actions, oldest first."""
        return tuple(self._buf)

    def __len__(self):
        return len(self._buf)


class DelayedEnv:
    """Augmented-state wrapper: observations are (state, pending action queue).

    Each agent step runs ``frame_skip`` inner steps with the executed action
    repeated and the rewards summed.
    """

    def __init__(self, inner: Environment, d: int = 0, frame_skip: int = 1):
        if frame_skip < 1:
            raise ContractError("frame_skip must be >= 1")
        self.inner = inner
        self.queue = DelayQueue(d)
        self.frame_skip = int(frame_skip)
        self.last_executed: int | None = None

    @property
    def d(self) -> int:
        return self.queue.d

    @property
    def schema(self):
        return self.inner.schema

    @property
    def n_actions(self) -> int:
        return self.inner.n_actions

    @property
    def done(self) -> bool:
        return self.inner.done

    def reset(self, rng: np.random.Generator) -> tuple[MixedState, tuple[int, ...]]:
        self.queue.reset()
        self.last_executed = None
        return self.inner.reset(rng), self.queue.snapshot()

    def step(self, chosen: int) -> tuple[MixedState, tuple[int, ...], float, bool]:
        if self.inner.done:
            raise ContractError("step() called on a terminated environment; call reset() first")
        if not 0 <= int(chosen) < self.n_actions:
            raise ContractError(f"action {chosen} outside [0, {self.n_actions})")
        executed = self.queue.push(chosen)
        self.last_executed = executed
        total = 0.0
        for _ in range(self.frame_skip):
            state, reward, done = self.inner.step(executed)
            total += reward
            if done:
                break
        return state, self.queue.snapshot(), total, done


class DelayedTwoPlayerEnv:
    """Two-player analogue of DelayedEnv; each player owns an independent queue."""

    def __init__(self, inner: TwoPlayerEnv, delays: tuple[int, int] = (0, 0), frame_skip: int = 1):
        if frame_skip < 1:
            raise ContractError("frame_skip must be >= 1")
        self.inner = inner
        self.queues = (DelayQueue(delays[0]), DelayQueue(delays[1]))
        self.frame_skip = int(frame_skip)
        self.last_executed: tuple[int, int] | None = None

    @property
    def schema(self):
        return self.inner.schema

    @property
    def n_actions(self) -> int:
        return self.inner.n_actions

    @property
    def done(self) -> bool:
        return self.inner.done

    def reset(self, rng: np.random.Generator):
        for q in self.queues:
            q.reset()
        self.last_executed = None
        obs = self.inner.reset(rng)
        return obs, (self.queues[0].snapshot(), self.queues[1].snapshot())

    def step(self, chosen_a: int, chosen_b: int):
        """Returns ((obs_a, obs_b), (queue_a, queue_b), (reward_a, reward_b), done)."""
        if self.inner.done:
            raise ContractError("step() called on a terminated environment; call reset() first")
        ex = (self.queues[0].push(chosen_a), self.queues[1].push(chosen_b))
        self.last_executed = ex
        ra = 0.0
        for _ in range(self.frame_skip):
            obs, (r, _), done = self.inner.step(*ex)
            ra += r
            if done:
                break
        return obs, (self.queues[0].snapshot(), self.queues[1].snapshot()), (ra, -ra), done


def reaction_time_ms(d: int, f: int, hz: float = 60.0) -> tuple[int, float, float]:
    """Reaction time of a d-step delayed agent acting every f frames.

    Returns (frames, milliseconds, average milliseconds including the
    (f - 1) / 2 frames the skip adds on average).
    """
    if f < 1:
        raise ContractError("frame skip must be >= 1")
    if d < 0:
        raise ContractError("delay must be non-negative")
    frames = d * f
    ms = frames * 1000.0 / hz
    avg = (frames + (f - 1) / 2.0) * 1000.0 / hz
    return frames, ms, avg
