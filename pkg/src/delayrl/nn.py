"""Minimal numpy network kernel with hand-written backward passes.

Layers own their parameters and gradient accumulators.  ``forward`` returns
``(output, cache)`` so several forward passes can be in flight at once;
``backward`` consumes a cache, adds into the layer's gradient buffers and
returns the gradient with respect to the layer input.  Everything is float64
and works on row batches ``(batch, features)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from delayrl.core import ContractError, TrainingError


def sigmoid(x):
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# activation -> (f(x), df/dx expressed through the output y)
ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    "identity": (lambda x: x, lambda y: 1.0),
    "tanh": (np.tanh, lambda y: 1.0 - y * y),
    "relu": (lambda x: np.maximum(x, 0.0), lambda y: (y > 0).astype(np.float64)),
    "sigmoid": (sigmoid, lambda y: y * (1.0 - y)),
}


class Module:
    """Base class: ``params`` / ``grads`` dicts on leaves, ``children`` on composites."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.children: dict[str, Module] = {}

    def add_param(self, name: str, value: np.ndarray) -> np.ndarray:
        self.params[name] = np.asarray(value, dtype=np.float64)
        self.grads[name] = np.zeros_like(self.params[name])
        return self.params[name]

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray, np.ndarray]]:
        for name, p in self.params.items():
            yield prefix + name, p, self.grads[name]
        for cname, child in self.children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def zero_grad(self) -> None:
        for _, _, g in self.named_parameters():
            g.fill(0.0)

    def n_params(self) -> int:
        return sum(p.size for _, p, _ in self.named_parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.copy() for name, p, _ in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = {name: p for name, p, _ in self.named_parameters()}
        missing = set(own) - set(state)
        if missing:
            raise ContractError(f"missing parameters: {sorted(missing)[:5]}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ContractError(f"shape mismatch for {name}: {value.shape} vs {p.shape}")
            p[...] = value  # in place so external references stay valid

    def gradients(self) -> dict[str, np.ndarray]:
        return {name: g.copy() for name, _, g in self.named_parameters()}

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([p.ravel() for _, p, _ in self.named_parameters()])

    def flat_gradients(self) -> np.ndarray:
        return np.concatenate([g.ravel() for _, _, g in self.named_parameters()])

    def set_flat_parameters(self, x: np.ndarray) -> None:
        if x.size != self.n_params():
            raise ContractError(f"expected {self.n_params()} values, got {x.size}")
        i = 0
        for _, p, _ in self.named_parameters():
            p[...] = x[i : i + p.size].reshape(p.shape)
            i += p.size


def uniform_fan_in(rng: np.random.Generator, n_out: int, n_in: int) -> np.ndarray:
    limit = 1.0 / np.sqrt(max(n_in, 1))
    return rng.uniform(-limit, limit, size=(n_out, n_in))


def orthogonal(rng: np.random.Generator, n: int, m: int) -> np.ndarray:
    a = rng.standard_normal((max(n, m), min(n, m)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q if n >= m else q.T


class Dense(Module):
    """y = act(x W^T + b) with W of shape (out, in)."""

    def __init__(self, n_in: int, n_out: int, activation: str = "identity", rng=None):
        super().__init__()
        if activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {activation!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in, self.n_out = n_in, n_out
        self.activation = activation
        self.add_param("W", uniform_fan_in(rng, n_out, n_in))
        self.add_param("b", np.zeros(n_out))

    def forward(self, x: np.ndarray):
        if x.shape[-1] != self.n_in:
            raise ContractError(f"Dense expects {self.n_in} inputs, got {x.shape[-1]}")
        y = ACTIVATIONS[self.activation][0](x @ self.params["W"].T + self.params["b"])
        return y, (x, y)

    def backward(self, dy: np.ndarray, cache) -> np.ndarray:
        if cache is None:
            raise ContractError("backward called without a forward cache")
        x, y = cache
        dpre = dy * ACTIVATIONS[self.activation][1](y)
        self.grads["W"] += dpre.T @ x
        self.grads["b"] += dpre.sum(axis=0)
        return dpre @ self.params["W"]


class MLP(Module):
    """Stack of dense layers: hidden layers share one activation, the last has its own."""

    def __init__(self, sizes: list[int], activation: str = "tanh", out_activation: str = "identity", rng=None):
        super().__init__()
        if len(sizes) < 2:
            raise ContractError("MLP needs at least input and output sizes")
        self.layers = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            act = out_activation if i == len(sizes) - 2 else activation
            layer = Dense(a, b, act, rng)
            self.children[f"l{i}"] = layer
            self.layers.append(layer)
        self.n_in, self.n_out = sizes[0], sizes[-1]

    def forward(self, x):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x)
            caches.append(c)
        return x, caches

    def backward(self, dy, caches):
        if caches is None:
            raise ContractError("backward called without a forward cache")
        for layer, c in zip(reversed(self.layers), reversed(caches)):
            dy = layer.backward(dy, c)
        return dy


class GRUCell(Module):
    """Standard GRU: z, r gates; candidate uses the reset-gated hidden state.

    h' = (1 - z) * h + z * tanh(x Wh^T + (r * h) Uh^T + bh)
    """

    def __init__(self, n_in: int, n_hidden: int, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in, self.n_hidden = n_in, n_hidden
        for g in ("z", "r", "h"):
            self.add_param("W" + g, uniform_fan_in(rng, n_hidden, n_in))
            self.add_param("U" + g, orthogonal(rng, n_hidden, n_hidden))
            self.add_param("b" + g, np.zeros(n_hidden))

    def forward(self, x: np.ndarray, h: np.ndarray):
        if x.shape[-1] != self.n_in or h.shape[-1] != self.n_hidden:
            raise ContractError("GRU input/hidden dimension mismatch")
        P = self.params
        z = sigmoid(x @ P["Wz"].T + h @ P["Uz"].T + P["bz"])
        r = sigmoid(x @ P["Wr"].T + h @ P["Ur"].T + P["br"])
        rh = r * h
        cand = np.tanh(x @ P["Wh"].T + rh @ P["Uh"].T + P["bh"])
        h_new = h + z * (cand - h)
        return h_new, (x, h, z, r, rh, cand)

    def backward(self, dh_new: np.ndarray, cache):
        if cache is None:
            raise ContractError("backward called without a forward cache")
        x, h, z, r, rh, cand = cache
        P, G = self.params, self.grads
        dz = dh_new * (cand - h)
        dcand = dh_new * z
        dh = dh_new * (1.0 - z)

        da_h = dcand * (1.0 - cand * cand)
        G["Wh"] += da_h.T @ x
        G["Uh"] += da_h.T @ rh
        G["bh"] += da_h.sum(axis=0)
        drh = da_h @ P["Uh"]
        dr = drh * h
        dh += drh * r

        da_z = dz * z * (1.0 - z)
        da_r = dr * r * (1.0 - r)
        G["Wz"] += da_z.T @ x
        G["Uz"] += da_z.T @ h
        G["bz"] += da_z.sum(axis=0)
        G["Wr"] += da_r.T @ x
        G["Ur"] += da_r.T @ h
        G["br"] += da_r.sum(axis=0)

        dx = da_h @ P["Wh"] + da_z @ P["Wz"] + da_r @ P["Wr"]
        dh += da_z @ P["Uz"] + da_r @ P["Ur"]
        return dx, dh


# --- softmax heads and losses ------------------------------------------------

def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_backward(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. logits given the gradient w.r.t. softmax probabilities."""
    return probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))


def cross_entropy(logits: np.ndarray, target: np.ndarray):
    """Per-row cross-entropy and its gradient w.r.t. the logits."""
    logp = log_softmax(logits)
    rows = np.arange(logits.shape[0])
    loss = -logp[rows, target]
    grad = np.exp(logp)
    grad[rows, target] -= 1.0
    return loss, grad


# --- optimisation ------------------------------------------------------------

def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float | None):
    """Scale all gradients by min(1, max_norm / ||g||). Returns (clipped, pre-clip norm)."""
    norm = global_norm(grads)
    if not np.isfinite(norm):
        raise TrainingError("non-finite gradient norm")
    if max_norm is None or max_norm <= 0 or norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              clip_norm: float | None = None) -> float:
    """In-place Adam update with bias correction; optional global-norm clipping first.

    Returns the gradient norm before clipping.
    """
    if set(grads) != set(params):
        raise ContractError("gradient and parameter names differ")
    grads, norm = clip_by_global_norm(grads, clip_norm)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ContractError(f"gradient shape mismatch for {name}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return norm


class Adam:
    """Adam bound to one module's parameters and gradient buffers."""

    def __init__(self, module: Module, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, clip_norm: float | None = 5.0):
        self.module = module
        self.state = AdamState(lr, beta1, beta2, eps)
        self.clip_norm = clip_norm

    def step(self) -> float:
        params = {n: p for n, p, _ in self.module.named_parameters()}
        grads = {n: g for n, _, g in self.module.named_parameters()}
        return adam_step(params, grads, self.state, self.clip_norm)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": v for k, v in self.state.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.state.v.items()})
        out["adam.step"] = np.array(self.state.step, dtype=np.int64)
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.state.m = {k[7:]: v.copy() for k, v in arrays.items() if k.startswith("adam.m.")}
        self.state.v = {k[7:]: v.copy() for k, v in arrays.items() if k.startswith("adam.v.")}
        self.state.step = int(arrays.get("adam.step", 0))


# --- finite differences --------------------------------------------------------

def numerical_gradient(f: Callable[[], float], param: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar ``f`` with respect to ``param`` (perturbed in place)."""
    grad = np.zeros_like(param)
    it = np.nditer(param, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = param[idx]
        param[idx] = old + eps
        fp = f()
        param[idx] = old - eps
        fm = f()
        param[idx] = old
        grad[idx] = (fp - fm) / (2.0 * eps)
    return grad


GRADCHECK_FLOOR = 1e-5


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRADCHECK_FLOOR) -> float:
    """max |a - n| / max(|a| + |n|, floor) over all entries.

    The floor keeps entries whose true gradient is below finite-difference
    roundoff (~1e-10 at step 1e-5) from dominating the maximum.
    """
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor)))
