"""Residual action-conditional state predictor with a shared GRU core.

One prediction step, for a distribution vector ``z`` (continuous means and
categorical logits, laid out like ``encode``) and core state ``h``::

    x       = soft_encode(z)                 # logits -> probabilities
    h'      = gru(x, h)                      # core output o == h'
    heads   = [x, onehot(a), h']
    z'      = F * (z + D) + (1 - F) * N      # componentwise; F in [0, 1]

The residual update happens in raw space for continuous components and in
logit space for categorical ones.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from delayrl.core import (
    ContractError,
    MixedState,
    ModelDivergenceError,
    StateDistribution,
    StateSchema,
    encode,
    lift_flat,
    softmax,
)
from delayrl.nn import MLP, GRUCell, Module, cross_entropy, softmax_backward


def one_hot(actions: np.ndarray, n: int) -> np.ndarray:
    actions = np.asarray(actions, dtype=np.int64)
    out = np.zeros(actions.shape + (n,))
    np.put_along_axis(out, actions[..., None], 1.0, axis=-1)
    return out


class PredictiveModel(Module):
    def __init__(self, schema: StateSchema, n_actions: int, core_size: int = 128, hidden: int = 128, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.schema = schema
        self.n_actions = n_actions
        self.core_size = core_size
        size = schema.encoded_size
        head_in = size + n_actions + core_size
        self.core = GRUCell(size, core_size, rng)
        self.delta = MLP([head_in, hidden, size], "tanh", "identity", rng)
        self.new = MLP([head_in, hidden, size], "tanh", "identity", rng)
        self.forget = MLP([head_in, hidden, size], "tanh", "sigmoid", rng)
        self.children.update(core=self.core, delta=self.delta, new=self.new, forget=self.forget)

    def initial_hidden(self, batch: int = 1) -> np.ndarray:
        return np.zeros((batch, self.core_size))

    def _soft(self, z):
        x = z.copy()
        probs = []
        for a, b in self.schema.slot_bounds():
            p = softmax(z[:, a:b])
            x[:, a:b] = p
            probs.append(p)
        return x, probs

    def step(self, z: np.ndarray, h: np.ndarray, actions: np.ndarray):
        """One batched prediction step. Returns (z', h', cache)."""
        if z.shape[-1] != self.schema.encoded_size:
            raise ContractError("state distribution width does not match the schema")
        x, probs = self._soft(z)
        h1, gcache = self.core.forward(x, h)
        inp = np.concatenate([x, one_hot(actions, self.n_actions), h1], axis=1)
        D, dc = self.delta.forward(inp)
        N, nc = self.new.forward(inp)
        F, fc = self.forget.forward(inp)
        adj = z + D
        z1 = F * adj + (1.0 - F) * N
        if not np.all(np.isfinite(z1)):
            raise ModelDivergenceError("non-finite predicted state")
        return z1, h1, (probs, gcache, dc, nc, fc, adj, N, F)

    def step_backward(self, dz1: np.ndarray, dh1: np.ndarray, cache):
        """Backprop one step; accumulates parameter gradients, returns (dz, dh)."""
        probs, gcache, dc, nc, fc, adj, N, F = cache
        size = self.schema.encoded_size
        dF = dz1 * (adj - N)
        dinp = self.delta.backward(dz1 * F, dc)
        dinp = dinp + self.new.backward(dz1 * (1.0 - F), nc)
        dinp = dinp + self.forget.backward(dF, fc)
        dx = dinp[:, :size]
        dh1_total = dh1 + dinp[:, size + self.n_actions:]
        dx_core, dh = self.core.backward(dh1_total, gcache)
        dx = dx + dx_core
        dz = dz1 * F
        dz[:, : self.schema.n_continuous] += dx[:, : self.schema.n_continuous]
        for (a, b), p in zip(self.schema.slot_bounds(), probs):
            dz[:, a:b] += softmax_backward(p, dx[:, a:b])
        return dz, dh

    def rollout(self, z0: np.ndarray, h0: np.ndarray, actions: np.ndarray):
        """Apply ``step`` once per column of ``actions`` (shape (batch, p)).

        Returns (z_p, h_p, hiddens, caches) where hiddens[i] is the core state
        after step i (hiddens[0] is h0).
        """
        z, h = z0, h0
        hiddens = [h0]
        caches = []
        for i in range(actions.shape[1]):
            z, h, c = self.step(z, h, actions[:, i])
            hiddens.append(h)
            caches.append(c)
        return z, h, hiddens, caches

    def rollout_backward(self, dz: np.ndarray, caches, dh: np.ndarray | None = None):
        if dh is None:
            dh = np.zeros((dz.shape[0], self.core_size))
        for c in reversed(caches):
            dz, dh = self.step_backward(dz, dh, c)
        return dz, dh

    def advance_core(self, encoded: np.ndarray, h: np.ndarray) -> np.ndarray:
        """Core state after consuming the true (lifted) state; equals the first rollout hidden."""
        x, _ = self._soft(lift_flat(encoded, self.schema))
        return self.core.forward(x, h)[0]


@dataclass(frozen=True)
class PredictorState:
    dist: StateDistribution
    hidden: np.ndarray


def predict_one(model: PredictiveModel, ps: PredictorState, action: int) -> PredictorState:
    z, h, _ = model.step(ps.dist.flat[None, :], np.asarray(ps.hidden, dtype=np.float64).reshape(1, -1),
                         np.array([action]))
    return PredictorState(StateDistribution(model.schema, z[0]), h[0])


def rollout(model: PredictiveModel, state: MixedState, hidden, actions, p: int | None = None, d: int | None = None):
    """Unroll ``p`` steps from a concrete state through the oldest ``p`` queued actions.

    Returns (StateDistribution after p steps, final hidden).
    """
    actions = [int(a) for a in actions]
    p = len(actions) if p is None else p
    if d is not None and p > d:
        raise ContractError(f"cannot predict {p} steps under delay {d}")
    if len(actions) != p:
        raise ContractError(f"rollout of {p} steps needs exactly {p} actions, got {len(actions)}")
    z0 = lift_flat(encode(state, model.schema), model.schema)[None, :]
    h0 = np.asarray(hidden, dtype=np.float64).reshape(1, -1)
    z, h, _, _ = model.rollout(z0, h0, np.array([actions], dtype=np.int64).reshape(1, p))
    return StateDistribution(model.schema, z[0]), h[0]


# --- training objective ------------------------------------------------------

def split_targets(encoded: np.ndarray, schema: StateSchema):
    """Continuous block and categorical indices of encoded (one-hot) states."""
    cont = encoded[..., : schema.n_continuous]
    idx = [np.argmax(encoded[..., a:b], axis=-1) for a, b in schema.slot_bounds()]
    return cont, idx


def valid_anchors(dones: np.ndarray, K: int) -> np.ndarray:
    """mask[b, t] for t in [0, T-K]: no episode end among transitions t .. t+K-1."""
    B, T = dones.shape
    n = T - K + 1
    mask = np.ones((B, n), dtype=bool)
    for i in range(K):
        mask &= ~dones[:, i : i + n].astype(bool)
    return mask


def model_loss(model: PredictiveModel, states: np.ndarray, executed: np.ndarray, dones: np.ndarray,
               hiddens: np.ndarray, K: int, weight: float = 1.0, backward: bool = True):
    """Multi-step regression loss of the predictor against observed next states.

    states: (B, T+1, S) encoded true states; executed: (B, T) executed actions;
    dones: (B, T); hiddens: (B, T+1, H) core state before consuming s_t (held fixed).
    The loss is the mean over valid anchors and unroll steps of squared error on
    continuous components plus cross-entropy per categorical slot.  When
    ``backward`` is set, ``weight * d loss`` is accumulated into the model's gradients.

    Returns (loss, metrics) with one-step argmax accuracy and continuous RMSE.
    """
    schema = model.schema
    B, T = executed.shape
    if K < 1 or T < K:
        raise ContractError(f"trajectory of length {T} too short for unroll {K}")
    mask = valid_anchors(dones, K)
    rows_b, rows_t = np.nonzero(mask)
    n = rows_b.size
    if n == 0:
        return 0.0, {"pred_accuracy": float("nan"), "pred_rmse": float("nan")}
    z = lift_flat(states[rows_b, rows_t], schema)
    h = hiddens[rows_b, rows_t]
    caches = []
    total = 0.0
    dzs = []
    nc = schema.n_continuous
    acc_hits = 0
    acc_total = 0
    sq_err = 0.0
    for i in range(K):
        z, h, c = model.step(z, h, executed[rows_b, rows_t + i])
        caches.append(c)
        target = states[rows_b, rows_t + i + 1]
        cont, idx = split_targets(target, schema)
        diff = z[:, :nc] - cont
        total += float(np.sum(diff * diff))
        dz = np.zeros_like(z)
        dz[:, :nc] = 2.0 * diff
        for (a, b), y in zip(schema.slot_bounds(), idx):
            ce, g = cross_entropy(z[:, a:b], y)
            total += float(ce.sum())
            dz[:, a:b] = g
            if i == 0:
                acc_hits += int(np.sum(np.argmax(z[:, a:b], axis=1) == y))
                acc_total += y.size
        if i == 0:
            sq_err = float(np.sum(diff * diff))
        dzs.append(dz)
    denom = n * K
    loss = total / denom
    if not np.isfinite(loss):
        raise ModelDivergenceError("non-finite model loss")
    if backward:
        scale = weight / denom
        dz_next = np.zeros_like(z)
        dh_next = np.zeros((n, model.core_size))
        for i in reversed(range(K)):
            dz_next, dh_next = model.step_backward(dz_next + scale * dzs[i], dh_next, caches[i])
    metrics = {
        "pred_accuracy": acc_hits / acc_total if acc_total else float("nan"),
        "pred_rmse": float(np.sqrt(sq_err / (n * nc))) if nc else 0.0,
    }
    return loss, metrics


def core_states(model: PredictiveModel, states: np.ndarray, dones: np.ndarray, h0: np.ndarray | None = None):
    """Run the core along true states: h[t+1] = advance(s_t, h[t]), reset after episode ends."""
    B, T1, _ = states.shape
    out = np.zeros((B, T1, model.core_size))
    h = model.initial_hidden(B) if h0 is None else h0
    for t in range(T1):
        out[:, t] = h
        if t < T1 - 1:
            h = model.advance_core(states[:, t], h)
            if t < dones.shape[1]:
                h = np.where(dones[:, t : t + 1].astype(bool), 0.0, h)
    return out
