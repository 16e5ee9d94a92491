"""Mini-melee: a 1-D two-player fighting game (rule set MM-1).

Each player has a position, velocity, damage and facing (continuous) plus an
animation state (categorical, 6 values).  Phase timers are internal to the
environment and not part of the observation.

``minimelee_step`` works in world coordinates.  The ``MiniMelee`` environment
is egocentric for both seats: player 1 observes a mirrored arena and its
left/right actions are mirrored back, so one policy can play either side.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

from delayrl.core import ContractError, MixedState, StateSchema
from delayrl.envs.base import TwoPlayerEnv

RULESET = "MM-1"

MM1 = {
    "arena": 5.0,
    "walk_speed": 0.25,
    "range": 1.0,
    "hit_damage": 10.0,
    "ko_damage": 100.0,
    "reward_per_damage": 0.01,
    "ko_reward": 1.0,
    "spawn": 2.0,
    "startup_steps": 2,
    "active_steps": 1,
    "recovery_steps": 2,
    "stun_steps": 3,
    "episode_steps": 1000,
}

IDLE, WALK, STARTUP, ACTIVE, RECOVERY, STUNNED = range(6)
ANIMATIONS = ("idle", "walk", "attack-startup", "attack-active", "recovery", "stunned")
NOOP, LEFT, RIGHT, ATTACK, SHIELD = range(5)
ACTIONS = ("noop", "left", "right", "attack", "shield")
MIRRORED_ACTION = (NOOP, RIGHT, LEFT, ATTACK, SHIELD)

SCHEMA = StateSchema(8, (6, 6))


@dataclass(frozen=True)
class MeleeState:
    x: tuple[float, float]
    vel: tuple[float, float]
    damage: tuple[float, float]
    facing: tuple[float, float]
    anim: tuple[int, int]
    timer: tuple[int, int]
    t: int = 0

    @classmethod
    def spawn(cls, t: int = 0, rules=MM1) -> "MeleeState":
        s = rules["spawn"]
        return cls((-s, s), (0.0, 0.0), (0.0, 0.0), (1.0, -1.0), (IDLE, IDLE), (0, 0), t)

    def check(self, rules=MM1) -> None:
        for a, tm in zip(self.anim, self.timer):
            if not 0 <= a < 6:
                raise ContractError(f"animation id {a} out of range")
            limit = {
                IDLE: 0,
                WALK: 0,
                STARTUP: rules["startup_steps"],
                ACTIVE: rules["active_steps"],
                RECOVERY: rules["recovery_steps"],
                STUNNED: rules["stun_steps"],
            }[a]
            if (limit == 0 and tm != 0) or (limit > 0 and not 1 <= tm <= limit):
                raise ContractError(f"timer {tm} inconsistent with animation {ANIMATIONS[a]}")
        if any(abs(f) != 1.0 for f in self.facing):
            raise ContractError("facing must be +1 or -1")

    def observe(self, player: int) -> MixedState:
        """Features from ``player``'s point of view, mirrored so that player 1 sees itself as player 0."""
        me, op = (0, 1) if player == 0 else (1, 0)
        sign = 1.0 if player == 0 else -1.0
        cont = [
            sign * self.x[me], sign * self.vel[me], self.damage[me] / 100.0, sign * self.facing[me],
            sign * self.x[op], sign * self.vel[op], self.damage[op] / 100.0, sign * self.facing[op],
        ]
        return MixedState(cont, [(6, self.anim[me]), (6, self.anim[op])])


def minimelee_step(state: MeleeState, action_a: int, action_b: int, rules=MM1):
    """Advance one step. Returns (state', reward_a, reward_b, terminal)."""
    nxt, reward_a, _, done = _advance(state, action_a, action_b, rules)
    return nxt, reward_a, -reward_a, done


def _advance(state: MeleeState, action_a: int, action_b: int, rules):
    state.check(rules)
    acts = (int(action_a), int(action_b))
    x = list(state.x)
    vel = [0.0, 0.0]
    damage = list(state.damage)
    facing = list(state.facing)
    anim = list(state.anim)
    timer = list(state.timer)
    shielding = [False, False]
    was_active = [a == ACTIVE for a in state.anim]
    busy = [a not in (IDLE, WALK) for a in state.anim]

    for p in (0, 1):
        if busy[p]:
            continue
        act = acts[p]
        if act == LEFT or act == RIGHT:
            direction = -1.0 if act == LEFT else 1.0
            vel[p] = direction * rules["walk_speed"]
            facing[p] = direction
            anim[p] = WALK
        elif act == ATTACK:
            anim[p], timer[p] = STARTUP, rules["startup_steps"]
        else:
            anim[p] = IDLE
            shielding[p] = act == SHIELD

    arena = rules["arena"]
    for p in (0, 1):
        x[p] = min(max(x[p] + vel[p], -arena), arena)

    hit = [False, False]
    for p in (0, 1):
        o = 1 - p
        if was_active[p]:
            gap = x[o] - x[p]
            if abs(gap) <= rules["range"] and gap * facing[p] >= 0.0 and not shielding[o]:
                hit[o] = True

    for p in (0, 1):
        if not busy[p]:
            continue
        timer[p] -= 1
        if timer[p] == 0:
            if anim[p] == STARTUP:
                anim[p], timer[p] = ACTIVE, rules["active_steps"]
            elif anim[p] == ACTIVE:
                anim[p], timer[p] = RECOVERY, rules["recovery_steps"]
            else:
                anim[p] = IDLE

    reward_a = 0.0
    ko = [False, False]
    for victim in (0, 1):
        if hit[victim]:
            damage[victim] += rules["hit_damage"]
            anim[victim], timer[victim] = STUNNED, rules["stun_steps"]
            vel[victim] = 0.0
            sign = 1.0 if victim == 1 else -1.0
            reward_a += sign * rules["reward_per_damage"] * rules["hit_damage"]
            if damage[victim] > rules["ko_damage"]:
                ko[victim] = True
                reward_a += sign * rules["ko_reward"]

    t = state.t + 1
    if any(ko):
        nxt = MeleeState.spawn(t, rules)
    else:
        nxt = MeleeState(tuple(x), tuple(vel), tuple(damage), tuple(facing), tuple(anim), tuple(timer), t)
    done = t >= rules["episode_steps"]
    return nxt, reward_a, tuple(ko), done


class MiniMelee(TwoPlayerEnv):
    n_actions = 5
    schema = SCHEMA
    ruleset = RULESET

    def __init__(self, episode_steps: int = MM1["episode_steps"], **overrides):
        super().__init__()
        unknown = set(overrides) - set(MM1)
        if unknown:
            raise ContractError(f"unknown mini-melee rule keys: {sorted(unknown)}")
        self.rules = {**MM1, **overrides, "episode_steps": int(episode_steps)}
        self.state = MeleeState.spawn(0, self.rules)
        self.ko_counts = [0, 0]

    def _reset(self):
        self.state = MeleeState.spawn(0, self.rules)
        self.ko_counts = [0, 0]

    def set_state(self, state: MeleeState) -> None:
        state.check(self.rules)
        self.state = replace(state)
        self._done = False

    def observe(self, player):
        return self.state.observe(player)

    def _step(self, action_a, action_b):
        action_b = MIRRORED_ACTION[action_b]
        self.state, reward_a, ko, done = _advance(self.state, action_a, action_b, self.rules)
        # ko_counts[p] = KOs scored by player p
        self.ko_counts[0] += ko[1]
        self.ko_counts[1] += ko[0]
        return reward_a, done
