"""Delayed actor-critic: policy/value nets, V-trace over delay-aligned returns, actors.

Timing conventions for one batch of trajectories (B rows, T steps):

* ``queues[:, t]`` holds the pending actions a_{t-d} .. a_{t-1}, oldest first;
  ``executed[:, t]`` is what the environment actually ran at step t.
* The decision a_t is credited with rewards from step t+d on.  V-trace therefore
  runs over the environment steps j = d .. T-1, where step j executes the
  decision k = j - d, and the critic reads the true state s_j = s_{k+d}.
* A decision whose episode ends before it executes is masked out (its
  importance ratio is 1 and it gets no policy gradient).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from delayrl.core import ContractError, StateSchema, TrainingError, encode_many, lift_flat
from delayrl.nn import MLP, Adam, Module, log_softmax, softmax_backward
from delayrl.predictor import PredictiveModel, model_loss, one_hot


@dataclass
class AgentConfig:
    d: int = 0
    p: int = 0
    f: int = 1
    gamma: float = 0.99
    rho_bar: float = 1.0
    c_bar: float = 1.0
    entropy_weight: float = 0.01
    model_weight: float = 1.0
    model_unroll: int = 0  # 0 means "same as p"
    unroll: int = 40
    hidden: int = 128
    core: int = 128
    layers: int = 2
    lr: float = 1e-4
    clip_norm: float = 5.0
    policy_through_model: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> "AgentConfig":
        if not 0 <= self.p <= self.d:
            raise ContractError(f"need 0 <= p <= d, got d={self.d}, p={self.p}")
        if self.f < 1:
            raise ContractError("frame skip f must be >= 1")
        if not 0.0 <= self.gamma < 1.0:
            raise ContractError("gamma must lie in [0, 1)")
        if not (self.rho_bar >= self.c_bar > 0):
            raise ContractError("V-trace clips need rho_bar >= c_bar > 0")
        if self.unroll <= self.d:
            raise ContractError(f"unroll length {self.unroll} must exceed the delay {self.d}")
        if self.model_unroll < 0:
            raise ContractError("model_unroll must be >= 0")
        return self

    @property
    def K(self) -> int:
        return self.model_unroll or max(self.p, 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AgentConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class AgentNets(Module):
    """Policy trunk + softmax head, value trunk on true states, optional predictor."""

    def __init__(self, config: AgentConfig, schema: StateSchema, n_actions: int, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = config
        self.schema = schema
        self.n_actions = n_actions
        S = schema.encoded_size
        hid = [config.hidden] * config.layers
        self.policy_in = S + n_actions * (config.d - config.p)
        self.policy = MLP([self.policy_in, *hid, n_actions], "tanh", "identity", rng)
        self.value = MLP([S, *hid, 1], "tanh", "identity", rng)
        self.children.update(policy=self.policy, value=self.value)
        self.model = None
        if config.p > 0:
            self.model = PredictiveModel(schema, n_actions, config.core, config.hidden, rng)
            self.children["model"] = self.model
        # small final layer keeps the initial policy close to uniform
        self.policy.layers[-1].params["W"] *= 0.01

    @property
    def core_size(self) -> int:
        return self.model.core_size if self.model is not None else 0

    def initial_hidden(self, batch: int) -> np.ndarray:
        return np.zeros((batch, self.core_size))


def policy_forward(nets: AgentNets, enc: np.ndarray, queues: np.ndarray, hiddens: np.ndarray):
    """Policy logits for a batch of decisions.

    Predictive agents unroll the model through the oldest p queued actions and
    feed the soft predicted state plus the newest d - p queued actions; p = 0
    agents feed the observed state plus the whole queue.

    Returns (logits, cache, next core state).
    """
    cfg = nets.config
    n = enc.shape[0]
    queues = np.asarray(queues, dtype=np.int64).reshape(n, cfg.d)
    if nets.model is not None:
        z0 = lift_flat(enc, nets.schema)
        zp, _, hs, mcaches = nets.model.rollout(z0, hiddens, queues[:, : cfg.p])
        x_state, probs = nets.model._soft(zp)
        h_next = hs[1]
    else:
        x_state, probs, mcaches, h_next = enc, None, None, hiddens
    suffix = one_hot(queues[:, cfg.p :], nets.n_actions).reshape(n, -1)
    x = np.concatenate([x_state, suffix], axis=1)
    logits, pcache = nets.policy.forward(x)
    return logits, (pcache, probs, mcaches), h_next


def policy_backward(nets: AgentNets, dlogits: np.ndarray, cache) -> None:
    pcache, probs, mcaches = cache
    dx = nets.policy.backward(dlogits, pcache)
    if nets.model is None or not nets.config.policy_through_model:
        return
    S = nets.schema.encoded_size
    dz = dx[:, :S].copy()
    for (a, b), pr in zip(nets.schema.slot_bounds(), probs):
        dz[:, a:b] = softmax_backward(pr, dz[:, a:b])
    nets.model.rollout_backward(dz, mcaches)


def sample_actions(logits: np.ndarray, rng: np.random.Generator, greedy: bool = False):
    logp = log_softmax(logits)
    if greedy:
        actions = np.argmax(logp, axis=1)
    else:
        cdf = np.cumsum(np.exp(logp), axis=1)
        u = rng.random(logits.shape[0])[:, None] * cdf[:, -1:]
        actions = np.minimum((cdf < u).sum(axis=1), logits.shape[1] - 1)
    return actions, logp[np.arange(len(actions)), actions]


def act(nets: AgentNets, state, queue, hidden, rng, greedy: bool = False):
    """Single decision: returns (action, log-prob, new core state)."""
    if len(queue) != nets.config.d:
        raise ContractError(f"queue length {len(queue)} != delay {nets.config.d}")
    enc = encode_many([state], nets.schema)
    h = np.asarray(hidden, dtype=np.float64).reshape(1, nets.core_size)
    logits, _, h_next = policy_forward(nets, enc, np.array([queue], dtype=np.int64), h)
    a, lp = sample_actions(logits, rng, greedy)
    return int(a[0]), float(lp[0]), h_next[0]


# --- returns and V-trace -----------------------------------------------------

def delayed_returns(rewards, d: int, gamma: float, bootstrap: float = 0.0) -> np.ndarray:
    """Discounted return credited to each decision t = 0 .. T-d-1.

    R_t = r_{t+d} + gamma r_{t+d+1} + ... + gamma^{T-t-d} * bootstrap; the
    rewards r_t .. r_{t+d-1} that arrive before a_t executes are ignored.
    """
    r = np.asarray(rewards, dtype=np.float64)
    T = r.shape[0]
    if T <= d:
        raise ContractError(f"trajectory length {T} must exceed delay {d}")
    out = np.zeros(T - d)
    acc = float(bootstrap)
    for j in range(T - 1, d - 1, -1):
        acc = r[j] + gamma * acc
        out[j - d] = acc
    return out


def vtrace_targets(behavior_logp, target_logp, values, rewards, discounts, bootstrap,
                   rho_bar: float = 1.0, c_bar: float = 1.0):
    """V-trace value targets and policy-gradient advantages.

    All sequence arguments have shape (..., n) with time last; ``discounts`` is
    gamma times the not-done mask (a scalar gamma is broadcast) and
    ``bootstrap`` is V(x_n) with shape (...,).

    v_s = V(x_s) + sum_{t>=s} (prod_{s<=i<t} gamma_i c_i) * rho_t (r_t + gamma_t V(x_{t+1}) - V(x_t))
    adv_s = rho_s (r_s + gamma_s v_{s+1} - V(x_s))
    """
    log_rhos = np.asarray(target_logp, dtype=np.float64) - np.asarray(behavior_logp, dtype=np.float64)
    if not np.all(np.isfinite(log_rhos)):
        raise TrainingError("non-finite importance ratios")
    ratios = np.exp(log_rhos)
    rhos = np.minimum(rho_bar, ratios)
    cs = np.minimum(c_bar, ratios)
    values = np.asarray(values, dtype=np.float64)
    rewards = np.asarray(rewards, dtype=np.float64)
    discounts = np.broadcast_to(np.asarray(discounts, dtype=np.float64), values.shape)
    bootstrap = np.asarray(bootstrap, dtype=np.float64)
    n = values.shape[-1]
    next_values = np.concatenate([values[..., 1:], bootstrap[..., None]], axis=-1)
    deltas = rhos * (rewards + discounts * next_values - values)
    vs_minus_v = np.zeros_like(values)
    acc = np.zeros(values.shape[:-1])
    for s in range(n - 1, -1, -1):
        acc = deltas[..., s] + discounts[..., s] * cs[..., s] * acc
        vs_minus_v[..., s] = acc
    vs = values + vs_minus_v
    vs_next = np.concatenate([vs[..., 1:], bootstrap[..., None]], axis=-1)
    advantages = rhos * (rewards + discounts * vs_next - values)
    return vs, advantages


# --- trajectories and the learner --------------------------------------------

@dataclass
class Trajectory:
    """A batch of B fixed-length unrolls (arrays carry a leading batch axis)."""

    states: np.ndarray          # (B, T+1, S) encoded observed states
    queues: np.ndarray          # (B, T+1, d) pending actions, oldest first
    actions: np.ndarray         # (B, T) chosen
    executed: np.ndarray        # (B, T) run by the environment
    rewards: np.ndarray         # (B, T)
    dones: np.ndarray           # (B, T) episode ended after step t
    behavior_logp: np.ndarray   # (B, T)
    hiddens: np.ndarray         # (B, T+1, H) predictor core state before s_t
    episode_returns: list = field(default_factory=list)

    @property
    def T(self) -> int:
        return self.actions.shape[1]

    @property
    def B(self) -> int:
        return self.actions.shape[0]

    def check(self, d: int) -> "Trajectory":
        if self.T <= d:
            raise ContractError(f"trajectory length {self.T} must exceed delay {d}")
        if not np.all(np.isfinite(self.behavior_logp)):
            raise ContractError("behaviour log-probs must be finite")
        if self.queues.shape[-1] != d:
            raise ContractError("queue width does not match the delay")
        return self


def executing_mask(dones: np.ndarray, d: int) -> np.ndarray:
    """valid[b, k] for k < T - d: decision k executes in its own episode."""
    B, T = dones.shape
    n = T - d
    valid = np.ones((B, n), dtype=bool)
    for i in range(d):
        valid &= ~dones[:, i : i + n].astype(bool)
    return valid


def vtrace_from_batch(traj: Trajectory, cfg: AgentConfig, target_logp: np.ndarray, values: np.ndarray):
    """Delay-aligned V-trace: returns (vs, advantages, valid) over steps j = d .. T-1."""
    d, T = cfg.d, traj.T
    valid = executing_mask(traj.dones, d)
    n = T - d
    log_t = np.where(valid, target_logp[:, :n], 0.0)
    log_b = np.where(valid, traj.behavior_logp[:, :n], 0.0)
    discounts = cfg.gamma * (1.0 - traj.dones[:, d:T].astype(np.float64))
    vs, adv = vtrace_targets(log_b, log_t, values[:, d:T], traj.rewards[:, d:T], discounts,
                             values[:, T], cfg.rho_bar, cfg.c_bar)
    return vs, adv, valid


def compute_loss(nets: AgentNets, traj: Trajectory, targets=None, backward: bool = True):
    """Total learner loss; gradients are accumulated into ``nets`` when ``backward``.

    ``targets`` = (vs, advantages) freezes the V-trace targets (used by the
    finite-difference checks); otherwise they are computed from current params.
    Returns (loss, metrics, (vs, advantages)).
    """
    cfg = nets.config
    traj.check(cfg.d)
    B, T, d = traj.B, traj.T, cfg.d
    A = nets.n_actions
    S = nets.schema.encoded_size
    n = T - d

    enc = traj.states[:, :T].reshape(B * T, S)
    hid = traj.hiddens[:, :T].reshape(B * T, -1)
    logits, pcache, _ = policy_forward(nets, enc, traj.queues[:, :T].reshape(B * T, d), hid)
    logp_all = log_softmax(logits)
    probs = np.exp(logp_all)
    acts = traj.actions.reshape(B * T)
    target_logp = logp_all[np.arange(B * T), acts].reshape(B, T)

    v_out, vcache = nets.value.forward(traj.states.reshape(B * (T + 1), S))
    values = v_out.reshape(B, T + 1)

    if targets is None:
        vs, adv, valid = vtrace_from_batch(traj, cfg, target_logp, values)
    else:
        vs, adv = targets
        valid = executing_mask(traj.dones, d)

    n_el = B * n
    pg = -np.sum(np.where(valid, adv * target_logp[:, :n], 0.0)) / n_el
    verr = values[:, d:T] - vs
    value_loss = 0.5 * np.sum(verr * verr) / n_el
    ent_rows = -np.sum(probs * logp_all, axis=1)
    entropy = float(np.mean(ent_rows))
    loss = pg + value_loss - cfg.entropy_weight * entropy

    m_loss, m_metrics = 0.0, {"pred_accuracy": float("nan"), "pred_rmse": float("nan")}
    if nets.model is not None and cfg.model_weight > 0 and T >= cfg.K:
        m_loss, m_metrics = model_loss(nets.model, traj.states, traj.executed, traj.dones, traj.hiddens,
                                       cfg.K, cfg.model_weight, backward=backward)
        loss += cfg.model_weight * m_loss
    if not np.isfinite(loss):
        raise TrainingError("non-finite learner loss")

    if backward:
        dlogits = np.zeros((B, T, A))
        coef = np.where(valid, adv, 0.0) / n_el
        onehot = one_hot(traj.actions[:, :n], A)
        dlogits[:, :n] = -coef[..., None] * (onehot - probs.reshape(B, T, A)[:, :n])
        dlogits = dlogits.reshape(B * T, A)
        dlogits += cfg.entropy_weight * probs * (logp_all + ent_rows[:, None]) / (B * T)
        policy_backward(nets, dlogits, pcache)
        dvalues = np.zeros((B, T + 1))
        dvalues[:, d:T] = verr / n_el
        nets.value.backward(dvalues.reshape(-1, 1), vcache)

    metrics = {
        "policy_loss": float(pg),
        "value_loss": float(value_loss),
        "model_loss": float(m_loss),
        "entropy": entropy,
        **m_metrics,
    }
    return float(loss), metrics, (vs, adv)


def learner_update(traj: Trajectory, nets: AgentNets, optimizer: Adam) -> dict:
    """One Adam step on the total loss. Returns scalar metrics."""
    nets.zero_grad()
    loss, metrics, _ = compute_loss(nets, traj)
    grad_norm = optimizer.step()
    metrics["loss"] = loss
    metrics["grad_norm"] = grad_norm
    return metrics


def make_optimizer(nets: AgentNets) -> Adam:
    cfg = nets.config
    return Adam(nets, lr=cfg.lr, clip_norm=cfg.clip_norm)


# --- actors ------------------------------------------------------------------

class LearningSeat:
    """Acting side of an agent for a batch of environments; holds per-row core state."""

    learns = True

    def __init__(self, nets: AgentNets, rng: np.random.Generator, greedy: bool = False):
        self.nets = nets
        self.rng = rng
        self.greedy = greedy
        self.hidden = nets.initial_hidden(0)

    @property
    def d(self) -> int:
        return self.nets.config.d

    def begin(self, n: int) -> None:
        self.hidden = self.nets.initial_hidden(n)

    def reset_rows(self, rows) -> None:
        self.hidden[rows] = 0.0

    def act_batch(self, enc: np.ndarray, queues: np.ndarray, raw_states=None):
        h = self.hidden
        logits, _, h_next = policy_forward(self.nets, enc, queues, h)
        actions, logp = sample_actions(logits, self.rng, self.greedy)
        self.hidden = h_next
        return actions, logp, h


class Actor:
    """Steps a batch of delayed environments (one or two seats) and records Trajectories.

    For two-player environments ``seats`` has two entries; trajectories are
    recorded for every seat with ``learns = True``.
    """

    def __init__(self, envs, seats, env_rngs, two_player: bool = False):
        self.envs = envs
        self.seats = list(seats)
        self.env_rngs = env_rngs
        self.two_player = two_player
        self.schema = envs[0].schema
        n = len(envs)
        for seat in self.seats:
            seat.begin(n)
        self.obs = [None] * n
        self.queues = [None] * n
        self.ep_return = np.zeros((n, len(self.seats)))
        self.finished: list[list[float]] = [[] for _ in self.seats]
        for i in range(n):
            self._reset(i)
        self.steps = 0

    def _reset(self, i: int) -> None:
        env = self.envs[i]
        obs, q = env.reset(self.env_rngs[i])
        if self.two_player:
            self.obs[i], self.queues[i] = list(obs), list(q)
        else:
            self.obs[i], self.queues[i] = [obs], [q]
        self.ep_return[i] = 0.0
        for seat in self.seats:
            seat.reset_rows([i])

    def collect(self, T: int) -> list[Trajectory | None]:
        n = len(self.envs)
        S = self.schema.encoded_size
        k = len(self.seats)
        states = np.zeros((k, n, T + 1, S))
        queues = [np.zeros((n, T + 1, seat.d), dtype=np.int64) for seat in self.seats]
        hiddens = [np.zeros((n, T + 1, seat.hidden.shape[-1])) for seat in self.seats]
        actions = np.zeros((k, n, T), dtype=np.int64)
        executed = np.zeros((k, n, T), dtype=np.int64)
        rewards = np.zeros((k, n, T))
        dones = np.zeros((n, T), dtype=bool)
        logps = np.zeros((k, n, T))
        episode_returns: list[list[float]] = [[] for _ in self.seats]

        for t in range(T + 1):
            chosen = []
            for s, seat in enumerate(self.seats):
                obs = [self.obs[i][s] for i in range(n)]
                enc = encode_many(obs, self.schema)
                q = np.array([self.queues[i][s] for i in range(n)], dtype=np.int64).reshape(n, seat.d)
                states[s, :, t] = enc
                queues[s][:, t] = q
                if t == T:
                    if hiddens[s].shape[-1]:
                        hiddens[s][:, t] = seat.hidden
                    continue
                a, lp, h = seat.act_batch(enc, q, obs)
                if hiddens[s].shape[-1]:
                    hiddens[s][:, t] = h
                actions[s, :, t] = a
                logps[s, :, t] = lp
                chosen.append(a)
            if t == T:
                break
            for i, env in enumerate(self.envs):
                if self.two_player:
                    obs, q, r, done = env.step(int(chosen[0][i]), int(chosen[1][i]))
                    executed[:, i, t] = env.last_executed
                else:
                    o, q1, r1, done = env.step(int(chosen[0][i]))
                    obs, q, r = (o,), (q1,), (r1,)
                    executed[0, i, t] = env.last_executed
                rewards[:, i, t] = r
                self.ep_return[i] += r
                dones[i, t] = done
                if done:
                    for s in range(k):
                        episode_returns[s].append(float(self.ep_return[i, s]))
                    self._reset(i)
                else:
                    self.obs[i], self.queues[i] = list(obs), list(q)
        self.steps += n * T
        out = []
        for s, seat in enumerate(self.seats):
            self.finished[s].extend(episode_returns[s])
            if not seat.learns:
                out.append(None)
                continue
            out.append(Trajectory(states[s], queues[s], actions[s], executed[s], rewards[s], dones.copy(),
                                  logps[s], hiddens[s], episode_returns[s]))
        return out
