"""scikit-learn style estimators around the predictor and the delayed actor-critic."""
from __future__ import annotations

import copy

import numpy as np
from scipy.optimize import minimize
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from delayrl.agents import (
    Actor,
    AgentConfig,
    AgentNets,
    LearningSeat,
    Trajectory,
    learner_update,
    make_optimizer,
    policy_forward,
    sample_actions,
)
from delayrl.core import (
    ContractError,
    StateDistribution,
    StateSchema,
    encode_many,
    lift_flat,
    load_arrays,
    rng_stream,
    save_arrays,
)
from delayrl.envs import DelayedEnv, Environment
from delayrl.nn import Adam, log_softmax
from delayrl.predictor import PredictiveModel, core_states, model_loss


def check_queues(queues, n: int, d: int, n_actions: int) -> np.ndarray:
    q = np.asarray(queues, dtype=np.int64).reshape(n, d)
    if q.size and (q.min() < 0 or q.max() >= n_actions):
        raise ContractError("queued action outside the action range")
    return q


def as_encoded(states, schema: StateSchema) -> np.ndarray:
    """Accept a list of MixedState or an already encoded (n, S) array."""
    if isinstance(states, np.ndarray):
        if states.ndim != 2 or states.shape[1] != schema.encoded_size:
            raise ContractError(f"encoded states must have shape (n, {schema.encoded_size})")
        return states.astype(np.float64, copy=False)
    return encode_many(list(states), schema)


class DelayedActorCritic(BaseEstimator):
    """A (d, p, f) agent: optional p-step predictor in front of a V-trace actor-critic.

    ``partial_fit`` consumes one Trajectory batch; ``fit`` runs the
    single-threaded actor/learner loop on a single-player environment.
    """

    def __init__(self, d=0, p=0, f=1, gamma=0.99, rho_bar=1.0, c_bar=1.0, entropy_weight=0.01,
                 model_weight=1.0, model_unroll=0, unroll=40, hidden=128, core=128, layers=2,
                 lr=1e-4, clip_norm=5.0, policy_through_model=True, n_envs=16, random_state=0):
        self.d = d
        self.p = p
        self.f = f
        self.gamma = gamma
        self.rho_bar = rho_bar
        self.c_bar = c_bar
        self.entropy_weight = entropy_weight
        self.model_weight = model_weight
        self.model_unroll = model_unroll
        self.unroll = unroll
        self.hidden = hidden
        self.core = core
        self.layers = layers
        self.lr = lr
        self.clip_norm = clip_norm
        self.policy_through_model = policy_through_model
        self.n_envs = n_envs
        self.random_state = random_state

    @property
    def config(self) -> AgentConfig:
        return AgentConfig.from_dict(self.get_params())

    def initialize(self, schema: StateSchema, n_actions: int, rng=None) -> "DelayedActorCritic":
        """Build fresh networks; ``rng`` defaults to stream 0 of ``random_state``."""
        cfg = self.config
        self.schema_ = schema
        self.n_actions_ = int(n_actions)
        rng = rng if rng is not None else rng_stream(self.random_state, 0)
        self.nets_ = AgentNets(cfg, schema, self.n_actions_, rng)
        self.optimizer_ = make_optimizer(self.nets_)
        self.n_updates_ = 0
        self.steps_ = 0
        return self

    def partial_fit(self, traj: Trajectory) -> dict:
        check_is_fitted(self, "nets_")
        metrics = learner_update(traj, self.nets_, self.optimizer_)
        self.n_updates_ += 1
        self.steps_ += traj.B * traj.T
        return metrics

    def fit(self, env: Environment, total_steps: int = 10_000, callback=None):
        """Train on copies of a single-player environment for ``total_steps`` agent steps."""
        if not hasattr(self, "nets_"):
            self.initialize(env.schema, env.n_actions)
        cfg = self.config
        envs = [DelayedEnv(copy.deepcopy(env), cfg.d, cfg.f) for _ in range(self.n_envs)]
        rngs = [rng_stream(self.random_state, 1000 + i) for i in range(self.n_envs)]
        seat = LearningSeat(self.nets_, rng_stream(self.random_state, 1))
        actor = Actor(envs, [seat], rngs)
        while self.steps_ < total_steps:
            (traj,) = actor.collect(cfg.unroll)
            metrics = self.partial_fit(traj)
            if callback is not None:
                callback(self, traj, metrics)
        return self

    def seat(self, rng, greedy: bool = False) -> LearningSeat:
        check_is_fitted(self, "nets_")
        return LearningSeat(self.nets_, rng, greedy)

    def predict_proba(self, states, queues, hiddens=None) -> np.ndarray:
        """Action probabilities for a batch of (state, queue) observations."""
        check_is_fitted(self, "nets_")
        enc = as_encoded(states, self.schema_)
        n = enc.shape[0]
        q = check_queues(queues, n, self.d, self.n_actions_)
        h = self.nets_.initial_hidden(n) if hiddens is None else np.asarray(hiddens, dtype=np.float64)
        logits, _, _ = policy_forward(self.nets_, enc, q, h)
        return np.exp(log_softmax(logits))

    def predict(self, states, queues, hiddens=None) -> np.ndarray:
        return np.argmax(self.predict_proba(states, queues, hiddens), axis=1)

    def sample(self, states, queues, rng, hiddens=None):
        check_is_fitted(self, "nets_")
        enc = as_encoded(states, self.schema_)
        n = enc.shape[0]
        h = self.nets_.initial_hidden(n) if hiddens is None else hiddens
        logits, _, h_next = policy_forward(self.nets_, enc, check_queues(queues, n, self.d, self.n_actions_), h)
        a, lp = sample_actions(logits, rng)
        return a, lp, h_next

    # -- persistence --

    def save(self, path, meta: dict | None = None, with_optimizer: bool = True) -> None:
        check_is_fitted(self, "nets_")
        arrays = {f"param.{k}": v for k, v in self.nets_.state_dict().items()}
        if with_optimizer:
            arrays.update(self.optimizer_.state_arrays())
        header = {
            "kind": "DelayedActorCritic",
            "params": self.get_params(),
            "schema": self.schema_.to_dict(),
            "n_actions": self.n_actions_,
            "n_updates": self.n_updates_,
            "steps": self.steps_,
            **(meta or {}),
        }
        save_arrays(path, arrays, header)

    @classmethod
    def load(cls, path, schema: StateSchema | None = None) -> "DelayedActorCritic":
        meta, arrays = load_arrays(path)
        if meta.get("kind") != "DelayedActorCritic":
            raise ContractError(f"{path}: not an agent checkpoint")
        saved = StateSchema.from_dict(meta["schema"])
        if schema is not None and saved != schema:
            raise ContractError(f"{path}: checkpoint schema {saved} does not match environment {schema}")
        est = cls(**meta["params"]).initialize(saved, meta["n_actions"])
        est.nets_.load_state_dict({k[6:]: v for k, v in arrays.items() if k.startswith("param.")})
        est.optimizer_.load_state_arrays(arrays)
        est.n_updates_ = int(meta.get("n_updates", 0))
        est.steps_ = int(meta.get("steps", 0))
        est.meta_ = meta
        return est


class ResidualPredictor(BaseEstimator):
    """Standalone residual predictor trained by supervised regression on trajectories.

    ``fit`` takes a Trajectory (executed actions are the conditioning actions).
    ``solver="adam"`` takes ``n_iter`` Adam steps and recomputes the core states
    along the true states before every step.  ``solver="lbfgs"`` runs scipy's
    L-BFGS-B in rounds of ``refresh`` iterations with the core states frozen
    inside a round (so each round sees a consistent objective), ``n_iter``
    iterations in total; it reaches far tighter fits on small deterministic
    problems.
    """

    def __init__(self, core=32, hidden=32, unroll=1, solver="adam", lr=1e-3, n_iter=2000, lr_decay=0.999,
                 min_lr=1e-5, clip_norm=5.0, refresh=500, random_state=0):
        self.core = core
        self.hidden = hidden
        self.unroll = unroll
        self.solver = solver
        self.lr = lr
        self.n_iter = n_iter
        self.lr_decay = lr_decay
        self.min_lr = min_lr
        self.clip_norm = clip_norm
        self.refresh = refresh
        self.random_state = random_state

    def fit(self, traj: Trajectory, schema: StateSchema, n_actions: int, callback=None):
        if self.solver not in ("adam", "lbfgs"):
            raise ContractError(f"unknown solver {self.solver!r}; use 'adam' or 'lbfgs'")
        self.model_ = PredictiveModel(schema, n_actions, self.core, self.hidden, rng_stream(self.random_state, 0))
        self.schema_ = schema
        self.loss_curve_ = []
        if self.solver == "adam":
            self._fit_adam(traj, callback)
        else:
            self._fit_lbfgs(traj, callback)
        return self

    def _fit_adam(self, traj, callback):
        opt = Adam(self.model_, lr=self.lr, clip_norm=self.clip_norm)
        for it in range(self.n_iter):
            hid = core_states(self.model_, traj.states, traj.dones)
            self.model_.zero_grad()
            loss, metrics = model_loss(self.model_, traj.states, traj.executed, traj.dones, hid, self.unroll)
            opt.step()
            opt.state.lr = max(self.min_lr, opt.state.lr * self.lr_decay)
            self.loss_curve_.append(loss)
            if callback is not None:
                callback(it, loss, metrics)

    def _fit_lbfgs(self, traj, callback):
        model = self.model_

        def objective(x, hid):
            model.set_flat_parameters(x)
            model.zero_grad()
            loss, _ = model_loss(model, traj.states, traj.executed, traj.dones, hid, self.unroll)
            return loss, model.flat_gradients()

        done = 0
        while done < self.n_iter:
            hid = core_states(model, traj.states, traj.dones)
            rounds = min(self.refresh, self.n_iter - done)
            res = minimize(objective, model.flat_parameters(), args=(hid,), jac=True, method="L-BFGS-B",
                           options={"maxiter": rounds, "ftol": 0.0, "gtol": 0.0})
            model.set_flat_parameters(res.x)
            done += rounds
            self.loss_curve_.append(float(res.fun))
            if callback is not None:
                callback(done, float(res.fun), {})
            if res.nit < rounds:  # no further progress possible at machine precision
                break

    def hidden_states(self, traj: Trajectory) -> np.ndarray:
        check_is_fitted(self, "model_")
        return core_states(self.model_, traj.states, traj.dones)

    def score(self, traj: Trajectory) -> dict:
        """One-step categorical accuracy and continuous RMSE on a trajectory."""
        check_is_fitted(self, "model_")
        hid = self.hidden_states(traj)
        _, metrics = model_loss(self.model_, traj.states, traj.executed, traj.dones, hid, 1, backward=False)
        return metrics

    def predict(self, states, actions, hiddens=None) -> list[StateDistribution]:
        """One-step predictions from concrete states."""
        check_is_fitted(self, "model_")
        enc = as_encoded(states, self.schema_)
        h = self.model_.initial_hidden(enc.shape[0]) if hiddens is None else np.asarray(hiddens)
        z, _, _ = self.model_.step(lift_flat(enc, self.schema_), h, np.asarray(actions, dtype=np.int64))
        return [StateDistribution(self.schema_, row) for row in z]

    def rollout(self, states, hiddens, action_seqs) -> list[StateDistribution]:
        check_is_fitted(self, "model_")
        enc = as_encoded(states, self.schema_)
        z, _, _, _ = self.model_.rollout(lift_flat(enc, self.schema_), np.asarray(hiddens),
                                         np.asarray(action_seqs, dtype=np.int64))
        return [StateDistribution(self.schema_, row) for row in z]
