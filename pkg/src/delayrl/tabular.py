"""Exact tabular oracles: delay-augmented MDPs, value iteration, model-based simulation."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from delayrl.core import ContractError, ResourceError

MAX_AUGMENTED_STATES = 10**7
TIE_TOL = 1e-9


@dataclass
class TabularMDP:
    """transitions[s, a, s'] probabilities, rewards[s, a] expected reward.

    ``transitions`` may also be a sparse matrix of shape (S * A, S) whose row
    s * A + a is T[s, a]; augmented MDPs are stored that way.
    """

    transitions: np.ndarray | sparse.csr_matrix
    rewards: np.ndarray
    gamma: float

    def __post_init__(self):
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        S, A = self.rewards.shape
        if sparse.issparse(self.transitions):
            self.transitions = sparse.csr_matrix(self.transitions, dtype=np.float64)
            if self.transitions.shape != (S * A, S):
                raise ContractError("transition / reward shapes are inconsistent")
            sums = np.asarray(self.transitions.sum(axis=1)).reshape(-1)
        else:
            self.transitions = np.asarray(self.transitions, dtype=np.float64)
            if self.transitions.shape != (S, A, S):
                raise ContractError("transition / reward shapes are inconsistent")
            sums = self.transitions.sum(axis=2)
        if np.max(np.abs(sums - 1.0)) > 1e-12:
            raise ContractError("transition rows must sum to 1")
        if not np.all(np.isfinite(self.rewards)):
            raise ContractError("rewards must be finite")

    @property
    def n_states(self) -> int:
        return self.rewards.shape[0]

    @property
    def n_actions(self) -> int:
        return self.rewards.shape[1]

    def expected_next(self, v: np.ndarray) -> np.ndarray:
        """E[v(s') | s, a] as an (S, A) array."""
        if sparse.issparse(self.transitions):
            return (self.transitions @ v).reshape(self.n_states, self.n_actions)
        return self.transitions @ v

    def row(self, s: int, a: int) -> np.ndarray:
        if sparse.issparse(self.transitions):
            return self.transitions[s * self.n_actions + a].toarray().reshape(-1)
        return self.transitions[s, a]

    def policy_matrix(self, policy: np.ndarray):
        rows = np.arange(self.n_states)
        if sparse.issparse(self.transitions):
            return self.transitions[rows * self.n_actions + policy]
        return self.transitions[rows, policy]

    def is_deterministic(self) -> bool:
        data = self.transitions.data if sparse.issparse(self.transitions) else self.transitions
        return bool(np.all((data == 0.0) | (data == 1.0)))


@dataclass
class AugmentedMDP:
    """MDP over (s, a_1 .. a_d); index = s * |A|^d + queue code, a_1 most significant."""

    base: TabularMDP
    d: int
    mdp: TabularMDP

    @property
    def n_states(self) -> int:
        return self.mdp.n_states

    def index(self, s: int, queue) -> int:
        code = 0
        for a in queue:
            code = code * self.base.n_actions + int(a)
        return s * self.base.n_actions**self.d + code

    def unpack(self, idx: int) -> tuple[int, tuple[int, ...]]:
        A = self.base.n_actions
        s, code = divmod(idx, A**self.d)
        queue = []
        for _ in range(self.d):
            code, a = divmod(code, A)
            queue.append(a)
        return s, tuple(reversed(queue))


def augmented_size(n_states: int, n_actions: int, d: int, limit: int = MAX_AUGMENTED_STATES) -> int:
    """n_states * n_actions**d, stopping early (returning limit + 1) once the guard is exceeded."""
    size = n_states
    for _ in range(d):
        size *= n_actions
        if size > limit:
            return limit + 1
    return size


def augment(mdp: TabularMDP, d: int, limit: int = MAX_AUGMENTED_STATES) -> AugmentedMDP:
    """Markov MDP over (state, pending queue): executes a_1, appends the new action."""
    if d < 0:
        raise ContractError("delay must be non-negative")
    S, A = mdp.n_states, mdp.n_actions
    if augmented_size(S, A, d, limit) > limit:
        raise ResourceError(f"augmented state space {S}*{A}^{d} exceeds the guard of {limit}")
    Q = A**d
    n = S * Q
    R = np.zeros((n, A))
    rows, cols, vals = [], [], []
    for s in range(S):
        succ = [np.nonzero(mdp.row(s, a))[0] for a in range(A)]
        probs = [mdp.row(s, a)[succ[a]] for a in range(A)]
        for code in range(Q):
            idx = s * Q + code
            first = code // (A ** (d - 1)) if d > 0 else None
            rest = code % (A ** (d - 1)) if d > 0 else 0
            for a in range(A):
                executed = a if d == 0 else first
                new_code = 0 if d == 0 else rest * A + a
                R[idx, a] = mdp.rewards[s, executed]
                rows.append(np.full(succ[executed].size, idx * A + a))
                cols.append(succ[executed] * Q + new_code)
                vals.append(probs[executed])
    P = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n * A, n))
    return AugmentedMDP(mdp, d, TabularMDP(P, R, mdp.gamma))


def greedy(q: np.ndarray, tie_tol: float = TIE_TOL) -> np.ndarray:
    """Lowest-index action among those within tie_tol of the row maximum."""
    best = q.max(axis=1, keepdims=True)
    return np.argmax(q >= best - tie_tol, axis=1)


def q_values(mdp: TabularMDP, v: np.ndarray) -> np.ndarray:
    return mdp.rewards + mdp.gamma * mdp.expected_next(v)


def value_iteration(mdp: TabularMDP, tol: float = 1e-10, max_iter: int = 1_000_000):
    """Bellman backups until the sup-norm residual drops below ``tol``. Returns (V*, policy)."""
    if not mdp.gamma < 1.0:
        raise ContractError("value iteration requires gamma < 1")
    v = np.zeros(mdp.n_states)
    for _ in range(max_iter):
        v_new = q_values(mdp, v).max(axis=1)
        if np.max(np.abs(v_new - v)) < tol:
            v = v_new
            break
        v = v_new
    return v, greedy(q_values(mdp, v))


def evaluate_policy(mdp: TabularMDP, policy: np.ndarray, tol: float = 1e-12, max_iter: int = 1_000_000) -> np.ndarray:
    """Exact value of a deterministic policy by iterating its Bellman operator to ``tol``."""
    rows = np.arange(mdp.n_states)
    P = mdp.policy_matrix(policy)
    r = mdp.rewards[rows, policy]
    v = np.zeros(mdp.n_states)
    for _ in range(max_iter):
        v_new = r + mdp.gamma * P @ v
        if np.max(np.abs(v_new - v)) < tol:
            return v_new
        v = v_new
    return v


def most_likely_next(mdp: TabularMDP, s: int, a: int) -> int:
    """Mode of T[s, a]; ties go to the lowest state index."""
    return int(np.argmax(mdp.row(s, a)))


def mbs_policy(mdp: TabularMDP, d: int, undelayed_policy: np.ndarray | None = None):
    """Model-based simulation: push the state through the pending actions, act optimally there.

    Returns a function policy(s, queue) and the table over augmented indices.
    """
    if undelayed_policy is None:
        _, undelayed_policy = value_iteration(mdp)
    A = mdp.n_actions

    def policy(s: int, queue) -> int:
        if len(queue) != d:
            raise ContractError(f"queue length {len(queue)} != delay {d}")
        for a in queue:
            s = most_likely_next(mdp, s, a)
        return int(undelayed_policy[s])

    n = augmented_size(mdp.n_states, A, d)
    if n > MAX_AUGMENTED_STATES:
        return policy, None
    Q = A**d
    table = np.zeros(n, dtype=np.int64)
    for idx in range(n):
        s, code = divmod(idx, Q)
        queue = []
        for _ in range(d):
            code, a = divmod(code, A)
            queue.append(a)
        table[idx] = policy(s, tuple(reversed(queue)))
    return policy, table


# --- small test MDPs ---------------------------------------------------------

def chain_mdp(n: int = 5, gamma: float = 0.9) -> TabularMDP:
    """Deterministic chain: action 0 left, 1 right; +1 on entering the absorbing right end."""
    P = np.zeros((n, 2, n))
    R = np.zeros((n, 2))
    goal = n - 1
    for s in range(n):
        if s == goal:
            P[s, :, s] = 1.0
            continue
        P[s, 0, max(s - 1, 0)] = 1.0
        P[s, 1, s + 1] = 1.0
        if s + 1 == goal:
            R[s, 1] = 1.0
    return TabularMDP(P, R, gamma)


def gridworld_mdp(width: int = 5, height: int = 5, slip: float = 0.0, gamma: float = 0.95) -> TabularMDP:
    """Grid with stay/up/down/left/right; moves slip to a uniform random move with prob ``slip``."""
    moves = ((0, 0), (0, 1), (0, -1), (-1, 0), (1, 0))
    n = width * height
    goal = n - 1
    P = np.zeros((n, 5, n))
    R = np.zeros((n, 5))

    def target(s, m):
        x, y = s % width, s // width
        dx, dy = moves[m]
        x = min(max(x + dx, 0), width - 1)
        y = min(max(y + dy, 0), height - 1)
        return y * width + x

    for s in range(n):
        if s == goal:
            P[s, :, s] = 1.0
            continue
        for a in range(5):
            if a == 0:
                P[s, a, s] = 1.0
            else:
                P[s, a, target(s, a)] += 1.0 - slip
                for m in range(1, 5):
                    P[s, a, target(s, m)] += slip / 4.0
            R[s, a] = P[s, a, goal]
    return TabularMDP(P, R, gamma)


def oracle_report(mdps: dict[str, TabularMDP], delays=(1, 2, 3), vi_tol: float = 1e-12) -> dict:
    """Compare MBS with the augmented-state optimum for every (mdp, d)."""
    report = {}
    for name, mdp in mdps.items():
        _, base_policy = value_iteration(mdp, vi_tol)
        for d in delays:
            aug = augment(mdp, d)
            v_star, aug_policy = value_iteration(aug.mdp, vi_tol)
            _, table = mbs_policy(mdp, d, base_policy)
            v_mbs = evaluate_policy(aug.mdp, table)
            report[f"{name}/d={d}"] = {
                "deterministic": mdp.is_deterministic(),
                "augmented_states": aug.n_states,
                "policy_mismatches": int(np.sum(table != aug_policy)),
                "max_value_gap": float(np.max(np.abs(v_mbs - v_star))),
                "start_value_optimal": float(v_star[aug.index(0, (0,) * d)]),
                "start_value_mbs": float(v_mbs[aug.index(0, (0,) * d)]),
                "mbs_policy": table.tolist(),
                "optimal_policy": aug_policy.tolist(),
            }
    return report


def write_report(path, report: dict) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
