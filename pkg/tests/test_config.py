import pytest

from mednarr.config import DEFAULTS, ConfigError, RunConfig, env_overrides, leaf_keys


def test_defaults_resolve():
    cfg = RunConfig()
    assert cfg["stability.sigma"] == DEFAULTS["stability"]["sigma"]
    assert cfg["align.pad_time"] == 3.0 and cfg["align.lookback"] == 30.0 and cfg["align.lookahead"] == 5.0


@pytest.mark.parametrize("tree", [{"stabilty": {}}, {"stability": {"sigmaa": 1}}, {"clients": {"lm": {"x": 1}}}])
def test_unknown_keys_rejected(tree):
    with pytest.raises(ConfigError, match="unknown config key"):
        RunConfig(tree)


@pytest.mark.parametrize("tree", [{"seed": "zero"}, {"seed": 1.5}, {"workers": True}, {"inputs": "a"},
                                  {"stability": 3}])
def test_type_errors(tree):
    with pytest.raises(ConfigError):
        RunConfig(tree)


def test_precedence_file_env_flags(tmp_path):
    p = tmp_path / "run.yaml"
    p.write_text("seed: 4\nstability:\n  sigma: 2.0\n  k: 4.0\ntranscript:\n  lexicon: lex.txt\n")
    env = {"NARR_STABILITY__SIGMA": "2.5", "NARR_SEED": "9", "OTHER": "x"}
    cfg = RunConfig.load(p, overrides={"seed": 11}, environ=env)
    assert cfg["stability.sigma"] == 2.5  # env beats file
    assert cfg["stability.k"] == 4.0  # file beats default
    assert cfg["seed"] == 11  # flag beats env
    assert cfg["transcript.lexicon"] == str(tmp_path / "lex.txt")


def test_env_parsing_and_unknown_env_key():
    assert env_overrides({"NARR_ALIGN__SUBDOMAINS": "[Chest, Neuro]", "NARR_CACHE": ""}) == {
        "align": {"subdomains": ["Chest", "Neuro"]}, "cache": None}
    with pytest.raises(ConfigError):
        RunConfig.load(environ={"NARR_STABILITY__NOPE": "1"})


def test_non_mapping_file(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("- a\n- b\n")
    with pytest.raises(ConfigError):
        RunConfig.load(p, environ={})


def test_manifest_round_trip(tmp_path):
    cfg = RunConfig({"seed": 5, "stability": {"k": 2.5}})
    path = cfg.write_manifest(tmp_path)
    again = RunConfig.load(path, environ={})
    assert again.tree["stability"] == cfg.tree["stability"] and again["seed"] == 5
    assert cfg.digest("stability") == again.digest("stability")
    assert cfg.digest("stability") != RunConfig().digest("stability")


def test_every_leaf_is_a_flag_name():
    keys = list(leaf_keys())
    assert "stability.ssim_min" in keys and "clients.lm.script" in keys
    assert len(keys) == len(set(keys))
