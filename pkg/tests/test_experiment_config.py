import os

import pytest

from experiment_config import ConfigError, load_config, output_dir, resolved_items

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def write(tmp_path, text):
    path = tmp_path / "run.cfg"
    path.write_text(text)
    return str(path)


def test_defaults():
    config = load_config()
    assert config["workload"]["n"] == 64
    assert config["tiles"]["beta"] == 7.0
    assert config["arms"] == {"a": "lp", "b": "stabilized_lp", "normalize": "lp"}
    assert ("training.schedule", "constant") in resolved_items(config)


def test_overrides_are_coerced(tmp_path):
    path = write(tmp_path, "# comment\nworkload.n = 32  # trailing\ntraining.causal = yes\ntiles.beta = 4\n\n")
    config = load_config(path)
    assert config["workload"]["n"] == 32
    assert config["training"]["causal"] is True
    assert config["tiles"]["beta"] == 4.0 and isinstance(config["tiles"]["beta"], float)
    assert config["workload"]["d"] == 16


def test_bundled_config_loads():
    config = load_config(os.path.join(ROOT, "claim3.cfg"))
    assert config["workload"]["tie_rate"] == 0.5
    assert config["assertions"]["expect_bias_reduction"] == 10.0
    assert config["tiles"]["block_rows"] == 64
    assert config["arms"]["normalize"] == "hp"
    assert config["assertions"]["expect_norm_ordering"] is True


@pytest.mark.parametrize("text,line_no", [
    ("workload.n = 8\nworkload.heads = 2\n", 2),
    ("workload.n 8\n", 1),
    ("\n\nworkload.n =\n", 3),
    ("workload.n = 8\nworkload.n = 9\n", 2),
    ("training.causal = maybe\n", 1),
    ("workload.n = many\n", 1),
    ("nosection = 1\n", 1),
    ("arms.a = bogus\n", 1),
    ("workload.n = 8\nworkload.tie_rate = 2\n", 2),
    ("\ntiles.beta = 1\n", 2),
    ("arms.normalize = fp8\n", 1),
    ("training.schedule = linear\n", 1),
])
def test_bad_lines(tmp_path, text, line_no):
    with pytest.raises(ConfigError) as info:
        load_config(write(tmp_path, text))
    assert info.value.line_no == line_no
    assert f":{line_no}:" in str(info.value)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_config(str(tmp_path / "absent.cfg"))


def test_output_dir(tmp_path, monkeypatch):
    target = tmp_path / "out"
    monkeypatch.setenv("LAB_OUTPUT_DIR", str(target))
    assert output_dir() == str(target)
    assert target.is_dir()


def test_out_of_range_value_names_the_rule(tmp_path):
    with pytest.raises(ConfigError) as info:
        load_config(write(tmp_path, "tiles.gamma = 1.5\n"))
    message = str(info.value)
    assert "tiles.gamma" in message and "1.5" in message
