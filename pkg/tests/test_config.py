import pytest

from chemlm.config import SCHEMA, load_config, read_pairs
from chemlm.errors import ConfigError


def test_defaults_and_preset():
    cfg = load_config()
    assert cfg["preset"] == "toy" and cfg["hidden"] == 64 and cfg["layers"] == 2
    assert cfg["lr"] == 1.6e-4 and cfg["finetune_lr"] == 3e-5
    assert cfg["features"] == 32
    xl = load_config(overrides=[("preset", "xl")])
    assert (xl["layers"], xl["heads"], xl["hidden"]) == (12, 12, 768)


def test_precedence(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("# comment\npreset = xl\nlayers = 3\nlr = 0.01  # inline\n", encoding="utf-8")
    cfg = load_config(p, [("layers", "4")])
    assert cfg["layers"] == 4 and cfg["hidden"] == 768 and cfg["lr"] == 0.01


def test_all_problems_reported(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("lr = fast\nbogus = 1\nvariant = nope\n", encoding="utf-8")
    with pytest.raises(ConfigError) as exc:
        load_config(p)
    text = str(exc.value)
    assert "lr" in text and "bogus" in text and "variant" in text


def test_semantic_validation():
    with pytest.raises(ConfigError):
        load_config(overrides=[("hidden", "30"), ("heads", "4")])
    with pytest.raises(ConfigError):
        load_config(overrides=[("bucket_boundaries", "1-40,42-202")])
    with pytest.raises(ConfigError):
        load_config(overrides=[("mask_p", "0.95"), ("random_p", "0.1")])


def test_dump_round_trips(tmp_path):
    cfg = load_config(overrides=[("seed", "9"), ("variant", "full_rotary"), ("dropout", "0.25")])
    path = cfg.write(tmp_path)
    again = load_config(path)
    assert again.values == cfg.values
    assert set(dict(read_pairs(path))) == set(SCHEMA)


def test_builders():
    cfg = load_config(overrides=[("seed", "5"), ("bucket_min_emit", "1,1,1,7")])
    assert cfg.encoder(30).vocab_size == 30 and cfg.encoder(30).seed == 5
    assert cfg.train().seed == 5
    assert cfg.buckets().min_emit == (1, 1, 1, 7)
    assert cfg.layers(2) == [0, 1]
    assert load_config(overrides=[("analysis_layers", "1")]).layers(2) == [1]
    with pytest.raises(ConfigError):
        load_config(overrides=[("analysis_layers", "5")]).layers(2)
