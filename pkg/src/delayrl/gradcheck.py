"""Finite-difference gradient suites for every network in the package.

Each suite builds a small network from a seed, evaluates a scalar loss,
backpropagates, and compares every parameter gradient against central
differences.  ``run_all`` returns the worst relative error per suite.
"""
from __future__ import annotations

import time

import numpy as np

from delayrl.agents import AgentConfig, AgentNets, Trajectory, compute_loss
from delayrl.core import MixedState, StateSchema, encode_many, lift_flat, rng_stream
from delayrl.nn import GRUCell, MLP, Module, numerical_gradient, relative_error
from delayrl.predictor import PredictiveModel, model_loss

THRESHOLD = 1e-4
# central-difference step: small enough not to straddle ReLU kinks, large enough that
# roundoff on O(10) cross-entropy losses stays far below the tolerance
FD_STEP = 3e-5
SMALL_SCHEMA = StateSchema(2, (3, 4))


def max_param_error(module: Module, loss_fn, eps: float = FD_STEP) -> float:
    """Worst relative error over all parameters; ``module.grads`` must hold d loss_fn."""
    worst = 0.0
    for _, param, grad in list(module.named_parameters()):
        analytic = grad.copy()
        numeric = numerical_gradient(loss_fn, param, eps)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def random_states(rng, schema: StateSchema, shape) -> np.ndarray:
    """Encoded random states with shape (*shape, S)."""
    n = int(np.prod(shape))
    states = [
        MixedState(rng.normal(size=schema.n_continuous), [(c, int(rng.integers(c))) for c in schema.categorical_cards])
        for _ in range(n)
    ]
    return encode_many(states, schema).reshape(*shape, schema.encoded_size)


def random_trajectory(rng, schema: StateSchema, n_actions: int, B: int, T: int, d: int, core: int,
                      done_prob: float = 0.1) -> Trajectory:
    states = random_states(rng, schema, (B, T + 1))
    return Trajectory(
        states=states,
        queues=rng.integers(0, n_actions, size=(B, T + 1, d)),
        actions=rng.integers(0, n_actions, size=(B, T)),
        executed=rng.integers(0, n_actions, size=(B, T)),
        rewards=rng.normal(size=(B, T)),
        dones=rng.random((B, T)) < done_prob,
        behavior_logp=np.log(rng.uniform(0.1, 0.6, size=(B, T))),
        hiddens=0.3 * rng.normal(size=(B, T + 1, core)),
    )


# --- suites -------------------------------------------------------------------

def check_dense(seed: int) -> float:
    rng = rng_stream(seed, 0)
    worst = 0.0
    for act, out in (("tanh", "identity"), ("relu", "sigmoid"), ("sigmoid", "tanh")):
        net = MLP([5, 7, 6, 3], act, out, rng)
        x = rng.normal(size=(4, 5))
        proj = rng.normal(size=(4, 3))

        def loss():
            return float(np.sum(net.forward(x)[0] * proj))

        net.zero_grad()
        y, cache = net.forward(x)
        dx = net.backward(proj, cache)
        worst = max(worst, max_param_error(net, loss))
        xc = x.copy()

        def loss_x():
            return float(np.sum(net.forward(xc)[0] * proj))

        worst = max(worst, relative_error(dx, numerical_gradient(loss_x, xc, FD_STEP)))
    return worst


def check_gru(seed: int, steps: int = 3) -> float:
    rng = rng_stream(seed, 0)
    cell = GRUCell(4, 5, rng)
    xs = rng.normal(size=(steps, 3, 4))
    h0 = 0.5 * rng.normal(size=(3, 5))
    proj = rng.normal(size=(3, 5))

    def run(h):
        caches = []
        for t in range(steps):
            h, c = cell.forward(xs[t], h)
            caches.append(c)
        return h, caches

    def loss():
        return float(np.sum(run(h0)[0] * proj))

    cell.zero_grad()
    _, caches = run(h0)
    dh = proj
    for c in reversed(caches):
        _, dh = cell.backward(dh, c)
    worst = max_param_error(cell, loss)
    return max(worst, relative_error(dh, numerical_gradient(loss, h0, FD_STEP)))


def check_predictor(seed: int, p: int) -> float:
    """Unroll p steps (soft feedback) and the p-step training loss."""
    rng = rng_stream(seed, 0)
    schema = SMALL_SCHEMA
    model = PredictiveModel(schema, 3, core_size=4, hidden=6, rng=rng)
    z0 = lift_flat(random_states(rng, schema, (3,)), schema) + 0.5 * rng.normal(size=(3, schema.encoded_size))
    h0 = 0.3 * rng.normal(size=(3, 4))
    actions = rng.integers(0, 3, size=(3, p))
    proj = rng.normal(size=(3, schema.encoded_size))

    def loss():
        return float(np.sum(model.rollout(z0, h0, actions)[0] * proj))

    model.zero_grad()
    zp, _, _, caches = model.rollout(z0, h0, actions)
    dz0, dh0 = model.rollout_backward(proj, caches)
    worst = max_param_error(model, loss)
    worst = max(worst, relative_error(dz0, numerical_gradient(loss, z0, FD_STEP)))
    worst = max(worst, relative_error(dh0, numerical_gradient(loss, h0, FD_STEP)))

    B, T = 2, p + 3
    states = random_states(rng, schema, (B, T + 1))
    executed = rng.integers(0, 3, size=(B, T))
    dones = np.zeros((B, T), dtype=bool)
    dones[0, 1] = True
    hid = 0.3 * rng.normal(size=(B, T + 1, 4))

    def mloss():
        return model_loss(model, states, executed, dones, hid, p, backward=False)[0]

    model.zero_grad()
    model_loss(model, states, executed, dones, hid, p, weight=1.0)
    return max(worst, max_param_error(model, mloss))


def check_learner(seed: int) -> float:
    """Total learner loss (policy through the predictor, value, entropy, model) with frozen V-trace targets."""
    rng = rng_stream(seed, 0)
    cfg = AgentConfig(d=3, p=2, hidden=8, core=5, layers=1, unroll=6, entropy_weight=0.05, model_weight=0.5)
    nets = AgentNets(cfg, SMALL_SCHEMA, 3, rng)
    # undo the near-zero final-layer init so policy gradients are not tiny
    nets.policy.layers[-1].params["W"] *= 100.0
    traj = random_trajectory(rng, SMALL_SCHEMA, 3, B=2, T=6, d=3, core=5)
    _, _, targets = compute_loss(nets, traj, backward=False)

    def loss():
        return compute_loss(nets, traj, targets, backward=False)[0]

    nets.zero_grad()
    compute_loss(nets, traj, targets, backward=True)
    return max_param_error(nets, loss)


SUITES = {
    "dense": check_dense,
    "gru": check_gru,
    "predictor_p1": lambda s: check_predictor(s, 1),
    "predictor_p3": lambda s: check_predictor(s, 3),
    "learner": check_learner,
}


def run_all(seeds=range(10), suites=None) -> dict:
    """{suite: {"max_rel_error": worst over seeds, "seconds": runtime}}."""
    out = {}
    for name in suites or SUITES:
        t0 = time.perf_counter()
        worst = max(SUITES[name](s) for s in seeds)
        out[name] = {"max_rel_error": worst, "seconds": time.perf_counter() - t0}
    return out
