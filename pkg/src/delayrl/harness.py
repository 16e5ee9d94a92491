"""Experiment orchestration: training runs, self-play, head-to-head matches, sweeps.

Run directory layout (one per seed)::

    <out>/<name>/seed_<s>/
        config.cfg      fully-resolved config echo (re-runnable)
        metrics.csv     one row per learner update
        eval.csv        periodic frozen-policy evaluations
        timings.csv     wall-clock per update (kept out of metrics.csv in deterministic mode)
        checkpoint.drl  latest parameters + optimizer state
        checkpoints/    periodic snapshots
        summary.json

Every CSV starts with a ``#`` provenance line carrying the config hash, code
version, mini-melee rule-set version and seed.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import itertools
import json
import logging
import os
import queue
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats
from statsmodels.stats.proportion import proportion_confint

from delayrl import __version__
from delayrl.agents import Actor, AgentConfig, LearningSeat, Trajectory
from delayrl.config import ExperimentConfig
from delayrl.core import ContractError, TrainingError, UsageError, encode_many, rng_stream, save_arrays
from delayrl.envs import TWO_PLAYER, DelayedEnv, DelayedTwoPlayerEnv, make_env
from delayrl.envs.minimelee import ACTIVE, ATTACK, IDLE, LEFT, NOOP, RIGHT, RULESET, SHIELD, STARTUP, WALK
from delayrl.estimators import DelayedActorCritic

log = logging.getLogger("delayrl")

METRIC_COLUMNS = ["step", "wall_ms", "mean_reward", "policy_loss", "value_loss", "model_loss",
                  "entropy", "grad_norm", "pred_accuracy", "pred_rmse"]
EVAL_COLUMNS = ["step", "episodes", "mean_return", "ci_low", "ci_high", "greedy_mean_return"]
REWARD_WINDOW = 100

# rng stream ids (per seed)
STREAM_INIT, STREAM_ACT, STREAM_OPPONENT = 0, 1, 2
STREAM_ENV = 1_000
STREAM_EVAL = 1_000_000
STREAM_WORKER = 10_000_000


# --- opponents ----------------------------------------------------------------

class ScriptedSeat:
    """Rule-based mini-melee opponent: walk in, attack at close range, shield incoming attacks.

    Its difficulty is set by the delay the harness gives its action queue.
    ``epsilon`` replaces a decision by a uniform random action.
    """

    learns = False

    def __init__(self, rng: np.random.Generator, d: int = 0, attack_range: float = 1.2,
                 epsilon: float = 0.0, shield_range: float = 1.5):
        self.rng = rng
        self._d = int(d)
        self.attack_range = attack_range
        self.shield_range = shield_range
        self.epsilon = epsilon
        self.hidden = np.zeros((0, 0))

    @property
    def d(self) -> int:
        return self._d

    def begin(self, n: int) -> None:
        self.hidden = np.zeros((n, 0))

    def reset_rows(self, rows) -> None:
        pass

    def choose(self, obs) -> int:
        c = obs.continuous
        me_x, me_facing, op_x, op_facing = c[0], c[3], c[4], c[7]
        me_anim, op_anim = obs.indices
        if me_anim not in (IDLE, WALK):
            return NOOP
        gap = op_x - me_x
        toward = RIGHT if gap > 0 else LEFT
        if op_anim in (STARTUP, ACTIVE) and abs(gap) <= self.shield_range and -gap * op_facing >= 0:
            return SHIELD
        if abs(gap) <= self.attack_range:
            return ATTACK if gap * me_facing >= 0 else toward
        return toward

    def act_batch(self, enc, queues, raw_states):
        n = len(raw_states)
        explore = self.rng.random(n) < self.epsilon
        random_actions = self.rng.integers(0, 5, n)
        actions = np.array([random_actions[i] if explore[i] else self.choose(s) for i, s in enumerate(raw_states)],
                           dtype=np.int64)
        return actions, np.zeros(n), self.hidden


class RandomSeat(ScriptedSeat):
    def choose(self, obs) -> int:
        return int(self.rng.integers(0, 5))


class NoopSeat(ScriptedSeat):
    def choose(self, obs) -> int:
        return NOOP


OPPONENTS = {"scripted": ScriptedSeat, "random": RandomSeat, "noop": NoopSeat}


def make_opponent(config: ExperimentConfig, rng) -> ScriptedSeat:
    opp = config["opponent"]
    eps = opp["epsilon"] if opp["kind"] == "scripted" else 0.0
    return OPPONENTS[opp["kind"]](rng, opp["delay"], opp["attack_range"], eps)


# --- provenance and small I/O helpers ------------------------------------------

def provenance(config: ExperimentConfig, seed: int) -> dict:
    return {"config_hash": config.hash, "code_version": __version__, "ruleset": RULESET, "seed": int(seed)}


def provenance_line(prov: dict) -> str:
    return "# " + " ".join(f"{k}={v}" for k, v in prov.items()) + "\n"


def fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


class CsvLog:
    """Append-only CSV with a provenance comment line; rows are flushed immediately."""

    def __init__(self, path, columns, prov: dict, append: bool = False):
        self.path = Path(path)
        self.columns = columns
        fresh = not (append and self.path.exists())
        self.fh = open(self.path, "w" if fresh else "a", newline="")
        self.writer = csv.writer(self.fh, lineterminator="\n")
        if fresh:
            self.fh.write(provenance_line(prov))
            self.writer.writerow(columns)
            self.fh.flush()

    def write(self, row: dict) -> None:
        self.writer.writerow([fmt(row[c]) for c in self.columns])
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def mean_ci(values, level: float = 0.95) -> tuple[float, float, float]:
    """Mean and Student-t confidence interval (degenerate for fewer than 2 values)."""
    x = np.asarray(values, dtype=np.float64)
    m = float(np.mean(x)) if x.size else float("nan")
    if x.size < 2 or np.all(x == x[0]):
        return m, m, m
    lo, hi = stats.t.interval(level, x.size - 1, loc=m, scale=stats.sem(x))
    return m, float(lo), float(hi)


def wilson_interval(successes: float, n: int, level: float = 0.95) -> tuple[float, float]:
    lo, hi = proportion_confint(successes, n, alpha=1.0 - level, method="wilson")
    return float(lo), float(hi)


# --- environments and episodes ------------------------------------------------------

def build_envs(config: ExperimentConfig, agent: AgentConfig, n: int, opponent_delay: int | None = None):
    """Delayed environment copies for one agent (and, for mini-melee, its opponent)."""
    name = config.env_name
    params = config.env_params
    if name in TWO_PLAYER:
        od = config["opponent"]["delay"] if opponent_delay is None else opponent_delay
        return [DelayedTwoPlayerEnv(make_env(name, params), (agent.d, od), agent.f) for _ in range(n)]
    return [DelayedEnv(make_env(name, params), agent.d, agent.f) for _ in range(n)]


def run_episodes(envs, seats, rngs, quotas, two_player: bool):
    """Play ``quotas[i]`` complete episodes on env i with frozen seats.

    Returns a list of (env index, seat-0 return, KOs by seat 0, KOs by seat 1).
    """
    n = len(envs)
    quotas = list(quotas)
    for seat in seats:
        seat.begin(n)
    obs, qs = [None] * n, [None] * n
    ret = np.zeros(n)
    results = []
    schema = envs[0].schema

    def reset(i):
        o, q = envs[i].reset(rngs[i])
        obs[i], qs[i] = (list(o), list(q)) if two_player else ([o], [q])
        ret[i] = 0.0
        for seat in seats:
            seat.reset_rows([i])

    active = [q > 0 for q in quotas]
    for i in range(n):
        if active[i]:
            reset(i)
        else:
            obs[i], qs[i] = None, None
    while any(active):
        rows = [i for i in range(n) if active[i]]
        chosen = []
        for s, seat in enumerate(seats):
            raw = [obs[i][s] if active[i] else obs[rows[0]][s] for i in range(n)]
            enc = encode_many(raw, schema)
            q = np.array([qs[i][s] if active[i] else qs[rows[0]][s] for i in range(n)],
                         dtype=np.int64).reshape(n, seat.d)
            a, _, _ = seat.act_batch(enc, q, raw)
            chosen.append(a)
        for i in rows:
            env = envs[i]
            if two_player:
                o, q, r, done = env.step(int(chosen[0][i]), int(chosen[1][i]))
                obs[i], qs[i] = list(o), list(q)
                ret[i] += r[0]
            else:
                o, q, r, done = env.step(int(chosen[0][i]))
                obs[i], qs[i] = [o], [q]
                ret[i] += r
            if done:
                kos = env.inner.ko_counts if two_player else (0, 0)
                results.append((i, float(ret[i]), int(kos[0]), int(kos[1])))
                quotas[i] -= 1
                if quotas[i] > 0:
                    reset(i)
                else:
                    active[i] = False
    return results


def split_quota(total: int, n: int) -> list[int]:
    base, extra = divmod(total, n)
    return [base + (1 if i < extra else 0) for i in range(n)]


def evaluate(est: DelayedActorCritic, config: ExperimentConfig, seed: int, episodes: int, stream: int,
             greedy: bool = False) -> np.ndarray:
    """Returns of ``episodes`` frozen-policy episodes (against the configured opponent for mini-melee)."""
    cfg = est.config
    n = min(config["experiment"]["n_envs"], episodes)
    envs = build_envs(config, cfg, n)
    rngs = [rng_stream(seed, stream + 1 + i) for i in range(n)]
    seats = [est.seat(rng_stream(seed, stream), greedy=greedy)]
    two_player = config.env_name in TWO_PLAYER
    if two_player:
        seats.append(make_opponent(config, rng_stream(seed, stream + 500)))
    results = run_episodes(envs, seats, rngs, split_quota(episodes, n), two_player)
    results.sort(key=lambda r: r[0])
    return np.array([r[1] for r in results])


# --- training -----------------------------------------------------------------

@dataclass
class RunResult:
    run_dir: str
    seed: int
    steps: int
    final_mean_return: float = float("nan")
    final_ci: tuple[float, float] = (float("nan"), float("nan"))
    final_greedy_return: float = float("nan")


def run_directory(config: ExperimentConfig, seed: int, out: str | None = None) -> Path:
    base = Path(out if out is not None else config["experiment"]["out"]) / config["experiment"]["name"]
    return base / f"seed_{seed}"


def save_checkpoint(est: DelayedActorCritic, path: Path, prov: dict, config: ExperimentConfig) -> None:
    tmp = path.with_suffix(".tmp")
    est.save(tmp, meta={"provenance": prov, "env": config.env_name, "env_params": config.env_params})
    os.replace(tmp, path)


def write_diagnostic(run_dir: Path, traj: Trajectory | None, est: DelayedActorCritic, exc: Exception,
                     metrics: dict | None) -> Path:
    diag = run_dir / "diagnostic"
    diag.mkdir(exist_ok=True)
    (diag / "error.json").write_text(json.dumps({"error": repr(exc), "steps": est.steps_,
                                                 "last_metrics": metrics}, indent=1, default=str))
    if traj is not None:
        arrays = {k: v for k, v in asdict(traj).items() if isinstance(v, np.ndarray)}
        save_arrays(diag / "trajectory.drl", arrays, {"kind": "Trajectory"})
    est.save(diag / "parameters.drl", with_optimizer=False)
    return diag


class _Logger:
    """Metrics/eval/timings writer for one training run."""

    def __init__(self, run_dir: Path, prov: dict, deterministic: bool, append: bool):
        self.deterministic = deterministic
        self.metrics = CsvLog(run_dir / "metrics.csv", METRIC_COLUMNS, prov, append)
        self.evals = CsvLog(run_dir / "eval.csv", EVAL_COLUMNS, prov, append)
        self.timings = CsvLog(run_dir / "timings.csv", ["step", "wall_ms"], prov, append)
        self.returns: list[float] = []
        self.t0 = time.perf_counter()

    def update(self, step: int, metrics: dict, finished: list[float]) -> None:
        self.returns.extend(finished)
        window = self.returns[-REWARD_WINDOW:]
        wall = (time.perf_counter() - self.t0) * 1000.0
        row = {"step": step, "wall_ms": 0 if self.deterministic else int(wall),
               "mean_reward": float(np.mean(window)) if window else float("nan"), **metrics}
        self.metrics.write(row)
        self.timings.write({"step": step, "wall_ms": int(wall)})

    def close(self) -> None:
        for f in (self.metrics, self.evals, self.timings):
            f.close()


def _run_eval(est, config, seed, step, n_evals, logger) -> tuple[float, float, float, float]:
    episodes = config["experiment"]["eval_episodes"]
    if episodes == 0:
        return (float("nan"),) * 4
    stream = STREAM_EVAL + n_evals * 10_000
    sampled = evaluate(est, config, seed, episodes, stream)
    greedy = evaluate(est, config, seed, episodes, stream + 5_000, greedy=True)
    m, lo, hi = mean_ci(sampled)
    g = float(np.mean(greedy))
    logger.evals.write({"step": step, "episodes": episodes, "mean_return": m, "ci_low": lo, "ci_high": hi,
                        "greedy_mean_return": g})
    return m, lo, hi, g


def train(config: ExperimentConfig, seed: int | None = None, out: str | None = None) -> RunResult:
    """Train one agent (vs the configured opponent on mini-melee) for the configured budget."""
    config.validate()
    seed = config.seeds[0] if seed is None else int(seed)
    exp = config["experiment"]
    run_dir = run_directory(config, seed, out)
    run_dir.mkdir(parents=True, exist_ok=True)
    prov = provenance(config, seed)
    config.write(run_dir / "config.cfg")
    ckpt = run_dir / "checkpoint.drl"

    env0 = make_env(config.env_name, config.env_params)
    resumed = exp["resume"] and ckpt.exists()
    if resumed:
        est = DelayedActorCritic.load(ckpt, env0.schema)
        if est.config != config.agent:
            raise UsageError(f"{ckpt}: checkpoint agent config differs from [agent]; cannot resume")
        log.info("resuming %s from step %d", run_dir, est.steps_)
    else:
        est = DelayedActorCritic(**config["agent"], n_envs=exp["n_envs"], random_state=seed)
        est.initialize(env0.schema, env0.n_actions)

    budget = exp["budget"]
    if budget == 0:
        save_checkpoint(est, ckpt, prov, config)
        return RunResult(str(run_dir), seed, est.steps_)

    logger = _Logger(run_dir, prov, config.deterministic, append=resumed)
    (run_dir / "checkpoints").mkdir(exist_ok=True)
    try:
        if config.deterministic:
            _train_sync(est, config, seed, run_dir, prov, logger)
        else:
            _train_parallel(est, config, seed, run_dir, prov, logger)
        m, lo, hi, g = _run_eval(est, config, seed, est.steps_, est.n_updates_, logger)
    finally:
        logger.close()
    save_checkpoint(est, ckpt, prov, config)
    result = RunResult(str(run_dir), seed, est.steps_, m, (lo, hi), g)
    (run_dir / "summary.json").write_text(json.dumps({**asdict(result), "provenance": prov}, indent=1))
    return result


def _periodic(est, config, seed, run_dir, prov, logger, prev_step: int, n_evals: list) -> None:
    exp = config["experiment"]
    step = est.steps_
    if exp["eval_every"] and step // exp["eval_every"] > prev_step // exp["eval_every"] and step < exp["budget"]:
        _run_eval(est, config, seed, step, n_evals[0], logger)
        n_evals[0] += 1
    if exp["checkpoint_every"] and step // exp["checkpoint_every"] > prev_step // exp["checkpoint_every"]:
        save_checkpoint(est, run_dir / "checkpoints" / f"step_{step:010d}.drl", prov, config)
        save_checkpoint(est, run_dir / "checkpoint.drl", prov, config)


def _make_actor(est, config, seed, n_envs, stream_offset: int = 0, nets=None) -> Actor:
    cfg = est.config
    envs = build_envs(config, cfg, n_envs)
    rngs = [rng_stream(seed, STREAM_ENV + stream_offset + i) for i in range(n_envs)]
    seats = [LearningSeat(nets if nets is not None else est.nets_, rng_stream(seed, STREAM_ACT + stream_offset))]
    two_player = config.env_name in TWO_PLAYER
    if two_player:
        seats.append(make_opponent(config, rng_stream(seed, STREAM_OPPONENT + stream_offset)))
    return Actor(envs, seats, rngs, two_player)


def _learn(est, traj, run_dir, logger, finished) -> dict:
    try:
        metrics = est.partial_fit(traj)
    except TrainingError as exc:
        diag = write_diagnostic(run_dir, traj, est, exc, None)
        raise TrainingError(f"{exc} at step {est.steps_}; diagnostic bundle in {diag}") from exc
    logger.update(est.steps_, metrics, finished)
    return metrics


def _train_sync(est, config, seed, run_dir, prov, logger) -> None:
    exp = config["experiment"]
    actor = _make_actor(est, config, seed, exp["n_envs"])
    n_evals = [0]
    while est.steps_ < exp["budget"]:
        traj = actor.collect(est.config.unroll)[0]
        prev = est.steps_
        _learn(est, traj, run_dir, logger, traj.episode_returns)
        _periodic(est, config, seed, run_dir, prov, logger, prev, n_evals)


class ParameterServer:
    """Latest learner parameters with a monotonically increasing version number."""

    def __init__(self, nets):
        self.lock = threading.Lock()
        self.version = 0
        self.state = {k: v.copy() for k, v in nets.state_dict().items()}

    def publish(self, nets) -> int:
        snap = {k: v.copy() for k, v in nets.state_dict().items()}
        with self.lock:
            self.state = snap
            self.version += 1
            return self.version

    def fetch(self) -> tuple[int, dict]:
        with self.lock:
            return self.version, self.state


def _train_parallel(est, config, seed, run_dir, prov, logger) -> None:
    """Actor threads with private parameter snapshots feed one learner over a bounded queue."""
    exp = config["experiment"]
    workers = exp["workers"]
    server = ParameterServer(est.nets_)
    traj_queue: queue.Queue = queue.Queue(maxsize=2 * workers)
    stop = threading.Event()
    errors: list[BaseException] = []
    per_worker = split_quota(exp["n_envs"], workers)

    def actor_loop(w: int):
        try:
            nets = copy.deepcopy(est.nets_)
            version = -1
            actor = _make_actor(est, config, seed, max(per_worker[w], 1), STREAM_WORKER * (w + 1), nets)
            while not stop.is_set():
                v, state = server.fetch()
                if v != version:
                    nets.load_state_dict(state)
                    version = v
                traj = actor.collect(est.config.unroll)[0]
                while not stop.is_set():
                    try:
                        traj_queue.put((traj, version), timeout=0.1)
                        break
                    except queue.Full:
                        continue
        except BaseException as exc:  # surfaced by the learner thread
            errors.append(exc)
            stop.set()

    threads = [threading.Thread(target=actor_loop, args=(w,), daemon=True) for w in range(workers)]
    for t in threads:
        t.start()
    n_evals = [0]
    try:
        while est.steps_ < exp["budget"]:
            if errors:
                raise TrainingError(f"actor worker failed: {errors[0]!r}") from errors[0]
            try:
                traj, _ = traj_queue.get(timeout=0.5)
            except queue.Empty:
                continue
            prev = est.steps_
            _learn(est, traj, run_dir, logger, traj.episode_returns)
            server.publish(est.nets_)
            _periodic(est, config, seed, run_dir, prov, logger, prev, n_evals)
    finally:
        stop.set()
        for t in threads:
            t.join(timeout=30)


# --- self-play ------------------------------------------------------------------

def member_label(index: int, cfg: AgentConfig) -> str:
    return f"m{index}_d{cfg.d}_p{cfg.p}"


def selfplay_train(config: ExperimentConfig, seed: int | None = None, out: str | None = None) -> dict:
    """Round-robin self-play: every pair of population members plays one batch per round.

    With ``population.warmup`` > 0 every member first trains that many steps
    against the scripted opponent.  ``experiment.budget`` counts self-play
    steps per member.  Each member learns only from its own side of its
    matches.  Returns {label: checkpoint path}.
    """
    config.validate()
    members = config.population()
    if len(members) < 2:
        raise UsageError(f"{config.source}: self-play needs a population of at least 2 (population.d / population.p)")
    if config.env_name not in TWO_PLAYER:
        raise UsageError(f"{config.source}: self-play needs a two-player environment, not {config.env_name!r}")
    if len({m.f for m in members}) != 1:
        raise UsageError(f"{config.source}: population members must share the frame skip agent.f")
    seed = config.seeds[0] if seed is None else int(seed)
    exp = config["experiment"]
    run_dir = run_directory(config, seed, out)
    run_dir.mkdir(parents=True, exist_ok=True)
    prov = provenance(config, seed)
    config.write(run_dir / "config.cfg")
    env0 = make_env(config.env_name, config.env_params)

    ests, labels = [], []
    for m, cfg in enumerate(members):
        est = DelayedActorCritic(**cfg.to_dict(), n_envs=exp["n_envs"], random_state=seed)
        est.initialize(env0.schema, env0.n_actions, rng_stream(seed, 100 + m))
        ests.append(est)
        labels.append(member_label(m, cfg))
    pairs = list(itertools.combinations(range(len(members)), 2))
    actors = []
    for k, (i, j) in enumerate(pairs):
        envs = [DelayedTwoPlayerEnv(make_env(config.env_name, config.env_params), (members[i].d, members[j].d),
                                    members[i].f) for _ in range(exp["n_envs"])]
        rngs = [rng_stream(seed, STREAM_ENV + 10_000 * k + e) for e in range(exp["n_envs"])]
        seats = [LearningSeat(ests[i].nets_, rng_stream(seed, 200 + 2 * k)),
                 LearningSeat(ests[j].nets_, rng_stream(seed, 201 + 2 * k))]
        actors.append(Actor(envs, seats, rngs, two_player=True))

    loggers = []
    for label in labels:
        d = run_dir / label
        d.mkdir(exist_ok=True)
        loggers.append(_Logger(d, prov, config.deterministic, append=False))
    warmup = config["population"]["warmup"]
    if warmup:
        # each member first trains against the scripted opponent
        for m, est in enumerate(ests):
            actor = _make_actor(est, config, seed, exp["n_envs"], STREAM_WORKER * (m + 1))
            while est.steps_ < warmup:
                traj = actor.collect(est.config.unroll)[0]
                _learn(est, traj, run_dir / labels[m], loggers[m], traj.episode_returns)
            save_checkpoint(est, run_dir / labels[m] / "warmup.drl", prov, config)
    start = [e.steps_ for e in ests]
    curve = CsvLog(run_dir / "selfplay.csv", ["round", "member", "step", "mean_reward"], prov)
    returns: list[list[float]] = [[] for _ in members]
    T = max(m.unroll for m in members)
    rnd = 0
    try:
        while min(e.steps_ - s for e, s in zip(ests, start)) < exp["budget"]:
            for k, (i, j) in enumerate(pairs):
                trajs = actors[k].collect(T)
                for m, traj in ((i, trajs[0]), (j, trajs[1])):
                    returns[m].extend(traj.episode_returns)
                    _learn(ests[m], traj, run_dir / labels[m], loggers[m], traj.episode_returns)
            rnd += 1
            for m in range(len(members)):
                window = returns[m][-REWARD_WINDOW:]
                curve.write({"round": rnd, "member": m, "step": ests[m].steps_,
                             "mean_reward": float(np.mean(window)) if window else float("nan")})
    finally:
        curve.close()
        for lg in loggers:
            lg.close()
    paths = {}
    for m, est in enumerate(ests):
        path = run_dir / labels[m] / "checkpoint.drl"
        save_checkpoint(est, path, prov, config)
        paths[labels[m]] = str(path)
    (run_dir / "summary.json").write_text(json.dumps({"members": paths, "rounds": rnd, "pairing": "round-robin",
                                                      "provenance": prov}, indent=1))
    return paths


# --- head-to-head -------------------------------------------------------------

@dataclass
class MatchResult:
    agent_ids: tuple[str, str]
    episodes: int
    mean_reward: tuple[float, float]
    ko: tuple[int, int]
    wins: int
    losses: int
    ties: int
    win_rate: float
    ci: tuple[float, float]
    provenance: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)


def head_to_head(path_a, path_b, episodes: int, seed: int = 0, env_params: dict | None = None,
                 n_envs: int = 16, greedy: bool = False) -> MatchResult:
    """Play mini-melee matches between two checkpoints, each under its own delay.

    Agent A plays seat 0 in half of the episodes and seat 1 in the other half.
    An episode is a win for A if A's total reward is positive; ties count half.
    Checkpoints are opened read-only.
    """
    if episodes < 1:
        raise UsageError("head_to_head needs at least one episode")
    digests = (file_digest(path_a), file_digest(path_b))
    try:
        a = DelayedActorCritic.load(path_a)
        b = DelayedActorCritic.load(path_b)
    except ContractError as exc:
        raise UsageError(str(exc)) from None
    if a.schema_ != b.schema_:
        raise UsageError(f"{path_b}: state schema {b.schema_} differs from {path_a}: {a.schema_}")
    for path, est in ((path_a, a), (path_b, b)):
        if est.meta_.get("env", "minimelee") not in TWO_PLAYER:
            raise UsageError(f"{path}: checkpoint was trained on {est.meta_.get('env')!r}, not a two-player game")
    if a.f != b.f:
        raise UsageError(f"{path_b}: frame skip {b.f} differs from {path_a}: {a.f}")
    if env_params is None:
        env_params = a.meta_.get("env_params", {})

    def play(first, second, n_ep, stream):
        n = min(n_envs, n_ep)
        envs = [DelayedTwoPlayerEnv(make_env("minimelee", env_params), (first.d, second.d), first.f)
                for _ in range(n)]
        rngs = [rng_stream(seed, stream + 1 + i) for i in range(n)]
        seats = [first.seat(rng_stream(seed, stream), greedy), second.seat(rng_stream(seed, stream + 500), greedy)]
        res = run_episodes(envs, seats, rngs, split_quota(n_ep, n), two_player=True)
        res.sort(key=lambda r: r[0])
        return res

    n_first = (episodes + 1) // 2
    returns, ko_a, ko_b = [], 0, 0
    for _, r, k0, k1 in play(a, b, n_first, 0):
        returns.append(r)
        ko_a, ko_b = ko_a + k0, ko_b + k1
    if episodes - n_first:
        for _, r, k0, k1 in play(b, a, episodes - n_first, 100_000):
            returns.append(-r)
            ko_a, ko_b = ko_a + k1, ko_b + k0
    if (file_digest(path_a), file_digest(path_b)) != digests:
        raise ContractError("checkpoint files changed during a match")
    ret = np.array(returns)
    wins, losses = int(np.sum(ret > 0)), int(np.sum(ret < 0))
    ties = episodes - wins - losses
    score = wins + 0.5 * ties
    mean_a = float(np.mean(ret))
    return MatchResult(
        agent_ids=(str(path_a), str(path_b)),
        episodes=episodes,
        mean_reward=(mean_a, -mean_a),
        ko=(ko_a, ko_b),
        wins=wins,
        losses=losses,
        ties=ties,
        win_rate=score / episodes,
        ci=wilson_interval(score, episodes),
        provenance={"seed": seed, "code_version": __version__, "ruleset": RULESET,
                    "checkpoint_sha256": list(digests), "greedy": greedy},
    )


# --- sweeps and determinism -------------------------------------------------------

def expand_grid(grid: dict[str, list]) -> list[dict[str, str]]:
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def parse_grid(items) -> dict[str, list[str]]:
    """['d=0,1,2', 'p=0'] -> {'agent.d': ['0','1','2'], 'agent.p': ['0']}; bare keys mean [agent]."""
    grid = {}
    for item in items:
        if "=" not in item:
            raise UsageError(f"grid entry {item!r} must look like key=v1,v2,...")
        key, values = item.split("=", 1)
        key = key.strip()
        if "." not in key:
            key = f"agent.{key}"
        vals = [v.strip() for v in values.split(",") if v.strip()]
        if not vals:
            raise UsageError(f"grid entry {item!r} lists no values")
        grid[key] = vals
    return grid


def sweep(config: ExperimentConfig, grid: dict[str, list], out: str | None = None) -> list[RunResult]:
    """Sequential runs over the cartesian product of ``grid`` and the configured seeds."""
    if not grid:
        raise UsageError("sweep needs a --grid")
    base_name = config["experiment"]["name"]
    results = []
    rows = []
    for point in expand_grid(grid):
        tag = "_".join(f"{k.split('.')[-1]}={v}" for k, v in point.items())
        overrides = [f"{k}={v}" for k, v in point.items()] + [f"experiment.name={base_name}/{tag}"]
        cfg = config.with_overrides(overrides)
        for seed in cfg.seeds:
            res = train(cfg, seed, out)
            results.append(res)
            rows.append({"run": tag, "seed": seed, "final_mean_return": res.final_mean_return,
                         "ci_low": res.final_ci[0], "ci_high": res.final_ci[1]})
    base = Path(out if out is not None else config["experiment"]["out"]) / base_name
    base.mkdir(parents=True, exist_ok=True)
    with open(base / "sweep.csv", "w", newline="") as fh:
        fh.write(provenance_line(provenance(config, config.seeds[0])))
        w = csv.DictWriter(fh, ["run", "seed", "final_mean_return", "ci_low", "ci_high"], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (fmt(v) if isinstance(v, float) else v) for k, v in r.items()})
    return results


@dataclass
class DeterminismResult:
    status: str  # "pass", "fail" or "not applicable"
    detail: str = ""


def determinism_check(config: ExperimentConfig, workdir, seed: int | None = None,
                      other_seed: int | None = None) -> DeterminismResult:
    """Run training twice and compare metrics CSVs byte for byte.

    With ``other_seed`` the second run uses that seed, and the check passes
    when the files differ (the sanity inversion).
    """
    if not config.deterministic:
        return DeterminismResult("not applicable", "parallel mode (workers > 1) promises no bit-determinism")
    seed = config.seeds[0] if seed is None else int(seed)
    second = seed if other_seed is None else int(other_seed)
    paths = []
    for k, s in enumerate((seed, second)):
        res = train(config, s, str(Path(workdir) / f"run{k}"))
        paths.append(Path(res.run_dir) / "metrics.csv")
    a = paths[0].read_text().splitlines()
    b = paths[1].read_text().splitlines()
    first_diff = next((i for i, (x, y) in enumerate(zip(a, b)) if x != y), None)
    if first_diff is None and len(a) != len(b):
        first_diff = min(len(a), len(b))
    if other_seed is not None:
        if first_diff is None:
            return DeterminismResult("fail", f"seeds {seed} and {second} produced identical metrics")
        return DeterminismResult("pass", f"seeds differ from row {first_diff}")
    if first_diff is None:
        return DeterminismResult("pass", f"{len(a)} identical lines")
    row = a[first_diff] if first_diff < len(a) else "<missing>"
    other = b[first_diff] if first_diff < len(b) else "<missing>"
    return DeterminismResult("fail", f"first divergent line {first_diff}: {row!r} != {other!r}")
