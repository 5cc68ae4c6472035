import pytest
import yaml

from hprosody.config import DEFAULTS, ProjectConfig, parse_override
from hprosody.errors import ConfigError, DataError


def write(tmp_path, tree, name="config.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(tree), encoding="utf-8")
    return p


def test_empty_file_gives_defaults(tmp_path):
    p = tmp_path / "config.yaml"
    p.write_text("", encoding="utf-8")
    cfg = ProjectConfig.load(p)
    assert cfg.tree == DEFAULTS
    assert cfg.root == tmp_path.resolve()
    assert cfg.gpe_threshold == 0.2 and cfg.checkpoint_every == 100


def test_partial_section_merges(tmp_path):
    cfg = ProjectConfig.load(write(tmp_path, {"audio": {"n_mels": 40}}))
    assert cfg.audio.mel.n_mels == 40
    assert cfg.tree["audio"]["hop_length"] == 256


def test_unknown_key_rejected(tmp_path):
    with pytest.raises(ConfigError, match="audio.nmels"):
        ProjectConfig.load(write(tmp_path, {"audio": {"nmels": 40}}))
    with pytest.raises(ConfigError):
        ProjectConfig.load(write(tmp_path, {"bogus": 1}))


def test_open_section_keys_checked_by_dataclass(tmp_path):
    cfg = ProjectConfig.load(write(tmp_path, {"train": {"word": {"total_steps": 17}}}))
    assert cfg.train_config("word").total_steps == 17
    with pytest.raises(ConfigError):
        ProjectConfig.load(write(tmp_path, {"train": {"word": {"momentum": 0.9}}}))


def test_train_seed_defaults_to_project_seed(tmp_path):
    cfg = ProjectConfig.load(write(tmp_path, {"seed": 9}))
    assert cfg.train_config("phoneme").rng_seed == 9


@pytest.mark.parametrize("text,keys,value", [
    ("seed=3", ["seed"], 3),
    ("audio.fmax=8000.5", ["audio", "fmax"], 8000.5),
    ("predictor.teacher_forcing=false", ["predictor", "teacher_forcing"], False),
    ("paths.word_features=emb_b", ["paths", "word_features"], "emb_b"),
    ("audio.fmax=", ["audio", "fmax"], None),
])
def test_parse_override(text, keys, value):
    assert parse_override(text) == (keys, value)


@pytest.mark.parametrize("text", ["seed", "=3"])
def test_bad_override_syntax(text):
    with pytest.raises(ConfigError):
        parse_override(text)


def test_override_applies_and_is_validated(tmp_path):
    p = write(tmp_path, {})
    assert ProjectConfig.load(p, ["audio.n_mels=20"]).audio.mel.n_mels == 20
    with pytest.raises(ConfigError):
        ProjectConfig.load(p, ["nosuch.key=1"])
    with pytest.raises(ConfigError):
        ProjectConfig.load(p, ["predictor.injection=attention"])


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        ProjectConfig.load(tmp_path / "absent.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("audio: [1, 2\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="invalid YAML"):
        ProjectConfig.load(bad)
    lst = tmp_path / "list.yaml"
    lst.write_text("- 1\n- 2\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="mapping"):
        ProjectConfig.load(lst)


def test_hash_is_stable_and_sensitive(tmp_path):
    p = write(tmp_path, {"seed": 1})
    a, b = ProjectConfig.load(p), ProjectConfig.load(p)
    assert a.hash == b.hash and len(a.hash) == 64
    assert ProjectConfig.load(p, ["seed=2"]).hash != a.hash
    # key order in the file does not matter
    q = tmp_path / "other.yaml"
    q.write_text("seed: 1\n", encoding="utf-8")
    assert ProjectConfig.load(q).hash == a.hash


def test_split_lookup(tmp_path):
    cfg = ProjectConfig.load(write(tmp_path, {}))
    with pytest.raises(ConfigError, match="no split"):
        cfg.split("dev")
    with pytest.raises(DataError):
        cfg.split("train")
    (tmp_path / "splits").mkdir()
    (tmp_path / "splits" / "train.txt").write_text("a\n\nb\n", encoding="utf-8")
    assert cfg.split("train") == ["a", "b"]


def test_unknown_embedding_source(tmp_path):
    cfg = ProjectConfig.load(write(tmp_path, {"paths": {"embeddings": {"x": "x.txt"}}}))
    assert cfg.embedding_path("x") == tmp_path.resolve() / "x.txt"
    with pytest.raises(ConfigError, match="unknown word-feature"):
        cfg.embedding_path("y")
