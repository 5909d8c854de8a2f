"""Run configuration: schema strictness, preset semantics, digest."""

import pytest

from palimpsa.config import TRAIN_PRESETS, load_config
from palimpsa.errors import ConfigError


def write(tmp_path, text, name="run.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_defaults_without_file():
    cfg = load_config(None)
    assert cfg.seed == 0
    assert cfg.precision == "f64"
    assert cfg.workers == 1
    assert cfg.train["lrs"] == [3e-3]
    assert cfg.bench["reps"] == 5
    assert len(cfg.digest) == 64


def test_file_values_override_defaults(tmp_path):
    path = write(tmp_path, "seed: 9\nprecision: f32\nverify:\n  samples: 3\n")
    cfg = load_config(path)
    assert cfg.seed == 9
    assert cfg.precision == "f32"
    assert cfg.verify["samples"] == 3


def test_unknown_top_level_key_rejected(tmp_path):
    path = write(tmp_path, "sede: 1\n")
    with pytest.raises(ConfigError, match="unknown top-level"):
        load_config(path)


def test_unknown_section_key_rejected(tmp_path):
    path = write(tmp_path, "train:\n  learning_rate: 0.001\n")
    with pytest.raises(ConfigError, match="unknown keys in 'train'"):
        load_config(path)


def test_type_errors_rejected(tmp_path):
    with pytest.raises(ConfigError, match="must be int"):
        load_config(write(tmp_path, "seed: not-a-number\n"))
    # YAML booleans must not pass as integers
    with pytest.raises(ConfigError, match="must be int"):
        load_config(write(tmp_path, "workers: true\n", name="b.yaml"))


def test_value_errors_rejected(tmp_path):
    cases = [
        "precision: f16\n",
        "workers: 0\n",
        "verify:\n  fault: bogus\n",
        "train:\n  variants: [mystery]\n",
        "train:\n  lrs: [-0.1]\n",
        "train:\n  stages: [[64]]\n",
        "bench:\n  reps: 2\n",
        "bench:\n  rules: [softmax]\n",
    ]
    for i, text in enumerate(cases):
        with pytest.raises(ConfigError):
            load_config(write(tmp_path, text, name=f"c{i}.yaml"))


def test_missing_file_and_bad_yaml(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(str(tmp_path / "absent.yaml"))
    with pytest.raises(ConfigError, match="valid YAML"):
        load_config(write(tmp_path, "train: [unclosed\n"))
    with pytest.raises(ConfigError, match="mapping at top level"):
        load_config(write(tmp_path, "- a\n- b\n", name="list.yaml"))


def test_preset_fills_defaults_but_explicit_keys_win(tmp_path):
    path = write(tmp_path, "train:\n  preset: desk\n  seeds: [42]\n")
    cfg = load_config(path)
    assert cfg.train["lrs"] == TRAIN_PRESETS["desk"]["lrs"]
    assert cfg.train["precision"] == "f32"
    assert cfg.train["seeds"] == [42]  # explicit beats preset


def test_unknown_preset_rejected(tmp_path):
    path = write(tmp_path, "train:\n  preset: nonsense\n")
    with pytest.raises(ConfigError, match="train.preset"):
        load_config(path)


def test_all_presets_validate():
    for name in TRAIN_PRESETS:
        cfg = load_config(None, overrides={"train.preset": name})
        assert cfg.train["preset"] == name


def test_overrides_apply_after_file(tmp_path):
    path = write(tmp_path, "seed: 1\nverify:\n  samples: 2\n")
    cfg = load_config(path, overrides={"seed": 5, "verify.filter": "scan"})
    assert cfg.seed == 5
    assert cfg.verify["samples"] == 2
    assert cfg.verify["filter"] == "scan"
    # None overrides are "flag not given" and must not clobber the file
    cfg2 = load_config(path, overrides={"seed": None})
    assert cfg2.seed == 1


def test_digest_is_stable_and_sensitive(tmp_path):
    a = load_config(write(tmp_path, "seed: 1\n", name="a.yaml"))
    b = load_config(write(tmp_path, "seed: 1\n", name="b.yaml"))
    c = load_config(write(tmp_path, "seed: 2\n", name="c.yaml"))
    assert a.digest == b.digest
    assert a.digest != c.digest
    # an explicit default is the same document as an omitted key
    d = load_config(write(tmp_path, "seed: 1\nprecision: f64\n", name="d.yaml"))
    assert d.digest == a.digest
    # the output directory is not an input, so it never shifts the digest
    e = load_config(write(tmp_path, "seed: 1\nout: elsewhere\n", name="e.yaml"))
    assert e.digest == a.digest
