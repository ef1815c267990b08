import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from fanlasso import config
from fanlasso.config import ConfigError, from_sidecar, parse_set, resolve, sidecar, to_tree
from fanlasso.pipeline import PipelineConfig
from fanlasso.simulate import CovariateShiftConfig, PosteriorShiftConfig


def test_defaults_equal_full_scale_preset():
    for sub, cls in config.CONFIG_CLASSES.items():
        cfg, record = resolve(sub)
        assert to_tree(cfg) == to_tree(cls())
        assert record == {"preset": "paper", "overrides": [], "repeated": []}


def test_desk_presets():
    cfg, _ = resolve("sim-covariate", preset="desk")
    assert (cfg.p, cfg.n_p_grid, cfg.replications) == (300, (100, 200, 300), 20)
    cfg, _ = resolve("sim-posterior", preset="desk")
    assert (cfg.p, cfg.n_q_grid, cfg.replications, cfg.arch.depth) == (500, (50, 200, 1000), 5, 3)
    assert cfg.arch.r_bar == PosteriorShiftConfig().arch.r_bar
    cfg, _ = resolve("finetune", preset="desk")
    assert cfg.depth_grid == (2, 3) and cfg.train.max_epochs == 60


def test_layering_order_last_wins():
    cfg, record = resolve("sim-covariate", preset="desk", file_tree={"p": 50, "r": 3}, seed=7,
                          sets=["p=60", "master_seed=8", "p=70"])
    assert cfg.p == 70 and cfg.r == 3 and cfg.master_seed == 8
    assert [o["key"] for o in record["overrides"]] == ["master_seed", "p", "master_seed", "p"]
    assert record["repeated"] == ["master_seed", "p"]


def test_seed_targets():
    assert resolve("finetune", seed=5)[0].train.seed == 5
    assert resolve("sim-posterior", seed=5)[0].master_seed == 5


def test_nested_set_and_string_coercion():
    cfg, _ = resolve("sim-posterior", sets=["arch.width=12", "train.learning_rate=1e-2", "methods=[Oracle]"])
    assert cfg.arch.width == 12 and cfg.train.learning_rate == 0.01 and cfg.methods == ("Oracle",)
    assert resolve("finetune", sets=["joint=false"])[0].joint is False


def test_unknown_key_reports_path():
    with pytest.raises(ConfigError) as exc:
        resolve("sim-posterior", sets=["arch.nope=1"])
    assert exc.value.path == "arch.nope"
    with pytest.raises(ConfigError) as exc:
        resolve("sim-covariate", file_tree={"bogus": 1})
    assert exc.value.path == "bogus"


def test_type_mismatch():
    with pytest.raises(ConfigError) as exc:
        resolve("sim-covariate", sets=["p=abc"])
    assert exc.value.path == "p"
    assert resolve("sim-covariate", sets=["n_p_grid=7"])[0].n_p_grid == (7,)
    with pytest.raises(ConfigError) as exc:
        resolve("sim-covariate", sets=["n_p_grid=[7, x]"])
    assert exc.value.path == "n_p_grid[1]"
    with pytest.raises(ConfigError):
        resolve("sim-covariate", sets=["n_p_grid={a: 1}"])


def test_semantic_validation():
    with pytest.raises(ConfigError):
        resolve("sim-covariate", sets=["replications=0"])
    with pytest.raises(ConfigError):
        resolve("finetune", sets=["model=xgboost"])
    with pytest.raises(ConfigError):
        resolve("finetune", preset="huge")


def test_parse_set_requires_equals():
    assert parse_set("a.b=3") == ("a.b", 3)
    with pytest.raises(ConfigError):
        parse_set("novalue")


def test_load_file(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("p: 40\nn_q_grid: [3, 4]\n")
    assert config.load_file(path) == {"p": 40, "n_q_grid": [3, 4]}
    path.write_text("- a\n")
    with pytest.raises(ConfigError):
        config.load_file(path)


@given(st.sampled_from(sorted(config.CONFIG_CLASSES)), st.integers(0, 2**31 - 1),
       st.sampled_from(["paper", "desk"]))
def test_sidecar_roundtrip(sub, seed, preset):
    cfg, record = resolve(sub, preset=preset, seed=seed)
    text = sidecar(sub, cfg, record, {"rows": 3})
    assert to_tree(from_sidecar(text)) == to_tree(cfg)
    doc = json.loads(text)
    doc["config"][next(iter(doc["config"]))] = "tampered"
    with pytest.raises((ConfigError, ValueError)):
        from_sidecar(json.dumps(doc))


def test_config_classes():
    assert config.CONFIG_CLASSES["sim-covariate"] is CovariateShiftConfig
    assert config.CONFIG_CLASSES["train-source"] is PipelineConfig
