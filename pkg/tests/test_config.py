import pytest

from delayrl.config import SEED_ENV_VAR, ExperimentConfig, parse_override
from delayrl.core import UsageError

BASIC = """
[experiment]
name = demo
env = gridworld
seeds = 1, 2
budget = 5000

[env]
slip = 0.2

[agent]
d = 3
p = 1
gamma = 0.95
"""


def test_typed_values():
    cfg = ExperimentConfig.from_text(BASIC)
    assert cfg.seeds == [1, 2]
    assert cfg["experiment"]["budget"] == 5000
    assert cfg.env_name == "gridworld"
    assert cfg.env_params == {"slip": 0.2}
    agent = cfg.agent
    assert (agent.d, agent.p, agent.gamma) == (3, 1, 0.95)
    assert cfg.deterministic


def test_defaults_without_file():
    cfg = ExperimentConfig()
    assert cfg.env_name == "chain"
    assert cfg["match"]["episodes"] == 1000


@pytest.mark.parametrize("text,needle", [
    ("[experiment]\nbudgett = 3\n", "experiment.budgett"),
    ("[agnet]\nd = 1\n", "[agnet]"),
    ("[experiment]\nenv = chain\n[env]\nslip = 0.1\n", "env.slip"),
    ("[agent]\nd = x\n", "agent.d"),
    ("[experiment]\nenv = pong\n", "experiment.env"),
    ("[experiment]\nworkers = 0\n", "experiment.workers"),
    ("[agent]\nd = 1\np = 2\n", "[agent]"),
    ("[opponent]\nkind = boss\n", "opponent.kind"),
    ("[population]\nwarmup = -1\n", "population.warmup"),
])
def test_errors_name_the_key(text, needle):
    with pytest.raises(UsageError) as info:
        ExperimentConfig.from_text(text)
    assert needle in str(info.value)


def test_overrides_are_type_checked():
    cfg = ExperimentConfig.from_text(BASIC, overrides=["agent.d=4", "env.width=7"])
    assert cfg.agent.d == 4 and cfg.env_params["width"] == 7
    with pytest.raises(UsageError, match="agent.lr"):
        ExperimentConfig.from_text(BASIC, overrides=["agent.lr=fast"])
    with pytest.raises(UsageError):
        parse_override("agent.d")
    with pytest.raises(UsageError):
        parse_override("d=3")


def test_dump_round_trip_preserves_hash():
    cfg = ExperimentConfig.from_text(BASIC)
    again = ExperimentConfig.from_text(cfg.dump())
    assert again.dump() == cfg.dump()
    assert again.hash == cfg.hash
    assert ExperimentConfig.from_text(BASIC, overrides=["agent.d=2"]).hash != cfg.hash


def test_write_echo_reloads(tmp_path):
    cfg = ExperimentConfig.from_text(BASIC)
    path = tmp_path / "echo.cfg"
    cfg.write(path)
    assert path.read_text().startswith(f"# config_hash = {cfg.hash}")
    assert ExperimentConfig.from_file(path).hash == cfg.hash


def test_missing_file_is_usage_error(tmp_path):
    with pytest.raises(UsageError, match="nope.cfg"):
        ExperimentConfig.from_file(tmp_path / "nope.cfg")


def test_seed_environment_override(monkeypatch):
    cfg = ExperimentConfig.from_text(BASIC)
    monkeypatch.setenv(SEED_ENV_VAR, "42")
    assert cfg.seeds == [42]
    monkeypatch.setenv(SEED_ENV_VAR, "many")
    with pytest.raises(UsageError, match=SEED_ENV_VAR):
        cfg.seeds


def test_population_members():
    cfg = ExperimentConfig.from_text(BASIC + "\n[population]\nd = 4, 4\np = 0, 4\n")
    members = cfg.population()
    assert [(m.d, m.p) for m in members] == [(4, 0), (4, 4)]
    assert all(m.gamma == 0.95 for m in members)
    with pytest.raises(UsageError):
        ExperimentConfig.from_text("[population]\nd = 4\np = 0, 1\n").population()
    with pytest.raises(UsageError):
        ExperimentConfig.from_text("[population]\nd = 1, 4\np = 2, 0\n").population()


def test_workers_switch_off_determinism():
    assert not ExperimentConfig.from_text("[experiment]\nworkers = 3\n").deterministic
