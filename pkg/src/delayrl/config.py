"""Experiment configuration: flat, sectioned key=value files with a typed schema.

Example::

    [experiment]
    env = minimelee
    seeds = 0, 1, 2
    budget = 200000

    [agent]
    d = 4
    p = 2

Values are ints, floats, booleans, strings or comma-separated lists of those.
Every key must be declared in ``SCHEMA`` (or, for ``[env]``, be a parameter
of the chosen environment); anything else is a usage error naming the key.
"""
from __future__ import annotations

import configparser
import hashlib
import os
from dataclasses import fields

from delayrl.agents import AgentConfig
from delayrl.core import ContractError, UsageError
from delayrl.envs.minimelee import MM1

SEED_ENV_VAR = "DRL_SEED"


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _list(item):
    def parse(text: str):
        parts = [x.strip() for x in str(text).split(",")]
        return [item(x) for x in parts if x]
    parse.__name__ = f"list[{item.__name__}]"
    return parse


INT, FLOAT, STR, BOOL = int, float, str, _bool
INTS, FLOATS, STRS = _list(int), _list(float), _list(str)

_AGENT_TYPES = {"int": INT, "float": FLOAT, "bool": BOOL}

SCHEMA: dict[str, dict[str, tuple]] = {
    "experiment": {
        "name": (STR, "run"),
        "env": (STR, "chain"),
        "seeds": (INTS, [0]),
        "budget": (INT, 100_000),
        "out": (STR, "runs"),
        "n_envs": (INT, 16),
        "workers": (INT, 1),
        "eval_every": (INT, 10_000),
        "eval_episodes": (INT, 100),
        "checkpoint_every": (INT, 50_000),
        "resume": (BOOL, False),
    },
    "agent": {
        f.name: (_AGENT_TYPES[f.type if isinstance(f.type, str) else f.type.__name__], f.default)
        for f in fields(AgentConfig)
    },
    "opponent": {
        "kind": (STR, "scripted"),
        "delay": (INT, 2),
        "attack_range": (FLOAT, 1.2),
        "epsilon": (FLOAT, 0.1),
    },
    "population": {
        "d": (INTS, []),
        "p": (INTS, []),
        "warmup": (INT, 0),
    },
    "match": {
        "episodes": (INT, 1000),
        "n_envs": (INT, 16),
        "greedy": (BOOL, False),
    },
}

ENV_SCHEMA: dict[str, dict[str, tuple]] = {
    "chain": {"n": (INT, 5), "max_steps": (INT, 100)},
    "gridworld": {"width": (INT, 5), "height": (INT, 5), "slip": (FLOAT, 0.0), "max_steps": (INT, 200)},
    "mountaincar": {"max_steps": (INT, 200)},
    "minimelee": {k: (INT if isinstance(v, int) else FLOAT, v) for k, v in MM1.items()},
}

OPPONENT_KINDS = ("scripted", "random", "noop")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class ExperimentConfig:
    """Fully-resolved, validated experiment configuration."""

    def __init__(self, values: dict[str, dict] | None = None, source: str = "<defaults>"):
        self.source = source
        self.values = {sec: {k: spec[1] for k, spec in keys.items()} for sec, keys in SCHEMA.items()}
        self.values["env"] = {}
        values = values or {}
        # the experiment section first: it decides which [env] keys exist
        for sec in sorted(values, key=lambda s: s != "experiment"):
            for key, raw in values[sec].items():
                self._set(sec, key, raw)
        self.validate()

    # -- construction --

    @classmethod
    def from_text(cls, text: str, source: str = "<string>", overrides=()) -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            parser.read_string(text, source=source)
        except configparser.Error as exc:
            raise UsageError(f"{source}: cannot parse config: {exc}") from None
        raw = {sec: dict(parser.items(sec)) for sec in parser.sections()}
        for item in overrides:
            sec, key, value = parse_override(item)
            raw.setdefault(sec, {})[key] = value
        return cls(raw, source)

    @classmethod
    def from_file(cls, path, overrides=()) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise UsageError(f"cannot read config file {path}: {exc.strerror}") from None
        return cls.from_text(text, str(path), overrides)

    def with_overrides(self, overrides) -> "ExperimentConfig":
        return ExperimentConfig.from_text(self.dump(), self.source, overrides)

    def _set(self, section: str, key: str, raw) -> None:
        if section == "env":
            env = self.values["experiment"]["env"]
            table = ENV_SCHEMA.get(env, {})
        elif section in SCHEMA:
            table = SCHEMA[section]
        else:
            raise UsageError(f"{self.source}: unknown config section [{section}]")
        if key not in table:
            raise UsageError(f"{self.source}: unknown config key {section}.{key}")
        kind = table[key][0]
        try:
            value = kind(raw) if isinstance(raw, str) else self._coerce(kind, raw)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"{self.source}: bad value for {section}.{key}: {exc}") from None
        self.values[section][key] = value
        if section == "experiment" and key == "env" and value not in ENV_SCHEMA:
            raise UsageError(f"{self.source}: experiment.env must be one of {sorted(ENV_SCHEMA)}, got {value!r}")

    @staticmethod
    def _coerce(kind, raw):
        if kind in (INTS, FLOATS, STRS):
            return kind(_format(list(raw)))
        return kind(_format(raw))

    # -- access --

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    @property
    def env_name(self) -> str:
        return self.values["experiment"]["env"]

    @property
    def env_params(self) -> dict:
        return dict(self.values["env"])

    @property
    def agent(self) -> AgentConfig:
        return AgentConfig.from_dict(self.values["agent"])

    @property
    def seeds(self) -> list[int]:
        """Configured seeds, or the single seed from $DRL_SEED when it is set."""
        env_seed = os.environ.get(SEED_ENV_VAR)
        if env_seed is not None and env_seed.strip():
            try:
                return [int(env_seed)]
            except ValueError:
                raise UsageError(f"environment variable {SEED_ENV_VAR}={env_seed!r} is not an integer") from None
        return list(self.values["experiment"]["seeds"])

    @property
    def deterministic(self) -> bool:
        return self.values["experiment"]["workers"] <= 1

    def population(self) -> list[AgentConfig]:
        pop = self.values["population"]
        if len(pop["d"]) != len(pop["p"]):
            raise UsageError(f"{self.source}: population.d and population.p must have equal length")
        base = dict(self.values["agent"])
        members = []
        for d, p in zip(pop["d"], pop["p"]):
            try:
                members.append(AgentConfig.from_dict({**base, "d": d, "p": p}))
            except ContractError as exc:
                raise UsageError(f"{self.source}: population member (d={d}, p={p}): {exc}") from None
        return members

    # -- validation and identity --

    def validate(self) -> "ExperimentConfig":
        exp = self.values["experiment"]
        for key in ("budget", "eval_every", "eval_episodes", "checkpoint_every"):
            if exp[key] < 0:
                raise UsageError(f"{self.source}: experiment.{key} must be >= 0")
        if self.values["population"]["warmup"] < 0:
            raise UsageError(f"{self.source}: population.warmup must be >= 0")
        for key in ("n_envs", "workers"):
            if exp[key] < 1:
                raise UsageError(f"{self.source}: experiment.{key} must be >= 1")
        if not exp["seeds"]:
            raise UsageError(f"{self.source}: experiment.seeds must list at least one seed")
        if self.values["opponent"]["kind"] not in OPPONENT_KINDS:
            raise UsageError(f"{self.source}: opponent.kind must be one of {OPPONENT_KINDS}")
        if self.values["match"]["episodes"] < 1:
            raise UsageError(f"{self.source}: match.episodes must be >= 1")
        try:
            AgentConfig.from_dict(self.values["agent"])
        except ContractError as exc:
            raise UsageError(f"{self.source}: [agent] {exc}") from None
        return self

    def dump(self) -> str:
        """Canonical text form: sections and keys in schema order, every key explicit."""
        lines = []
        env_table = ENV_SCHEMA[self.env_name]
        sections = [("experiment", SCHEMA["experiment"]), ("env", env_table)]
        sections += [(s, SCHEMA[s]) for s in SCHEMA if s != "experiment"]
        for sec, table in sections:
            lines.append(f"[{sec}]")
            for key, (_, default) in table.items():
                value = self.values[sec].get(key, default)
                lines.append(f"{key} = {_format(value)}")
            lines.append("")
        return "\n".join(lines)

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.dump().encode()).hexdigest()[:16]

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(f"# config_hash = {self.hash}\n")
            fh.write(self.dump())


def parse_override(item: str) -> tuple[str, str, str]:
    """'agent.d=4' -> ('agent', 'd', '4')."""
    if "=" not in item:
        raise UsageError(f"override {item!r} must look like section.key=value")
    lhs, value = item.split("=", 1)
    if "." not in lhs:
        raise UsageError(f"override key {lhs!r} must be dotted (section.key)")
    sec, key = lhs.strip().split(".", 1)
    return sec, key, value.strip()
