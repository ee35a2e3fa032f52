from pathlib import Path

import pytest

from distinqt.config import (
    CONFIG_VERSION, ConfigError, dump_config, load_config, parse_config, with_overrides,
)
from distinqt.model import PRESETS


def test_defaults_are_c1_tod():
    cfg = parse_config({})
    assert cfg.model == PRESETS["c1"]
    assert [n.name for n in cfg.topology.nets] == ["tod_ue", "bs"]
    assert cfg.n_ues == 5
    assert cfg.training.patience == 10 and cfg.training.seed == 42
    assert cfg.scheduler_mode == "deterministic"


def test_c2_adds_mec():
    cfg = parse_config({"model": {"preset": "c2"}})
    assert [n.name for n in cfg.topology.nets] == ["tod_ue", "bs", "mec"]
    assert cfg.model.lr == PRESETS["c2"].lr
    no_mec = parse_config({"model": {"preset": "c2"}, "topology": {"with_mec": False}})
    assert [n.name for n in no_mec.topology.nets] == ["tod_ue", "bs"]


def test_overrides_and_custom():
    cfg = parse_config({"model": {"preset": "custom", "encoder_units": 4, "head_units": [3, 2]},
                        "topology": {"n_ues": 2, "history_steps": 6, "horizon_steps": 4}})
    assert cfg.model.encoder_units == 4 and cfg.model.head_units == (3, 2)
    assert cfg.topology.timing.horizon_steps == 4 and cfg.n_ues == 2


@pytest.mark.parametrize("doc, match", [
    ({"modle": {}}, "unknown key"),
    ({"model": {"units": 3}}, r"model: unknown key\(s\) units"),
    ({"training": {"epochs": 3}}, "training: unknown key"),
    ({"transport": {"kind": "carrier-pigeon"}}, "transport: kind"),
    ({"training": {"mode": "parallel"}}, "training: mode"),
    ({"version": 2}, "unsupported config version"),
    ({"model": {"preset": "c9"}}, "unknown preset"),
    ({"model": {"merge_fn": "max"}}, "merge function"),
    ({"topology": {"preset": "ring"}}, "topology: unknown preset"),
    ({"topology": "tod"}, "expected a mapping"),
])
def test_rejects(doc, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(doc)


def test_explicit_topology():
    doc = {"topology": {
        "preset": "explicit",
        "nets": [
            {"net_id": 1, "name": "ue", "role": "passive", "logging_period_ms": 200, "history_steps": 5,
             "features": ["a", "b"]},
            {"net_id": 2, "name": "bs", "role": "active", "logging_period_ms": 200, "history_steps": 5,
             "features": ["c"]},
        ],
        "workers": [[1, 1], [1, 2], [2, 1]],
        "interconnections": [{"id": 1, "members": {1: 1, 2: 1}, "target": "y1"},
                             {"id": 2, "members": {1: 2, 2: 1}, "target": "y2"}],
        "timing": {"encode_step_ms": 1000, "prediction_step_ms": 200, "horizon_steps": 3},
    }}
    topo = parse_config(doc).topology
    assert topo.k(1) == 2 and topo.coordinator_net.name == "bs"
    doc["topology"]["interconnections"][1]["members"] = {1: 7, 2: 1}
    with pytest.raises(ConfigError, match="topology"):
        parse_config(doc)
    del doc["topology"]["timing"]
    with pytest.raises(ConfigError, match="missing key"):
        parse_config(doc)


def test_file_roundtrip(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("version: 1\nmodel:\n  preset: c1\n  batch_size: 16\ntraining:\n  seed: 3\n")
    cfg = load_config(path)
    assert cfg.model.batch_size == 16 and cfg.training.seed == 3
    dump_config(cfg, tmp_path / "out.yaml")
    again = load_config(tmp_path / "out.yaml")
    assert again.model == cfg.model and again.training == cfg.training
    assert "version: %d" % CONFIG_VERSION in (tmp_path / "out.yaml").read_text()


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("model: [unclosed\n")
    with pytest.raises(ConfigError, match="invalid YAML"):
        load_config(bad)


def test_with_overrides_revalidates():
    cfg = parse_config({})
    assert with_overrides(cfg, "training", seed=9, patience=None).training.seed == 9
    with pytest.raises(ConfigError):
        with_overrides(cfg, "training", mode="bogus")
    hub = with_overrides(cfg, "transport", kind="hub", remote=[[1, 2]])
    assert hub.scheduler_mode == "hub" and hub.transport.remote == ((1, 2),)


@pytest.mark.parametrize("name", ["c1", "c2", "small"])
def test_shipped_configs_parse(name):
    path = Path(__file__).parent.parent / "configs" / f"{name}.yaml"
    cfg = load_config(path)
    assert cfg.model_preset == ("c2" if name == "c2" else "c1")
    assert len(cfg.topology.nets) == (3 if name == "c2" else 2)
