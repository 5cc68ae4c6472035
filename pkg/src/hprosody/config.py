"""Project configuration: one YAML tree plus ``key.path=value`` overrides."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import yaml

from .dsp import AudioConfig, F0Config, FrameConfig, MelConfig
from .errors import ConfigError, DataError
from .nn import TrainConfig
from .vq import VqConfig

DEFAULTS = {
    "seed": 0,
    "paths": {
        "wavs": "wavs",
        "alignments": "alignments",
        "artifacts": "artifacts",
        "splits": {"train": "splits/train.txt", "test": "splits/test.txt"},
        "embeddings": {},
        "word_features": None,
    },
    "audio": {"sample_rate": 22050, "frame_length": 1024, "hop_length": 256, "fft_size": 1024,
              "n_mels": 80, "fmin": 0.0, "fmax": None, "f0_floor": 71.0, "f0_ceil": 800.0,
              "f0_threshold": 0.1, "silence_db": -60.0},
    "quantizer": {"n_bins": 256, "f0_scale": "log", "energy_scale": "linear"},
    "vq": {},
    "vq_train": {},
    "predictor": {"hidden": 256, "kernel": 3, "dropout": 0.5, "phoneme_dim": 256,
                  "injection": "embed_discrete", "teacher_forcing": True},
    "train": {
        "phoneme": {"schedule": "warmup_inverse_sqrt"},
        "word": {"schedule": "constant", "learning_rate": 1e-4},
    },
    "metrics": {"gpe_threshold": 0.2},
    "checkpoint_every": 100,
}


# Sections whose keys are checked later by the dataclass they feed (or are free-form).
OPEN_SECTIONS = {"train", "train.phoneme", "train.word", "vq", "vq_train", "paths.splits",
                 "paths.embeddings"}


def _merge(base: dict, upd: dict, where: str = "") -> dict:
    for k, v in upd.items():
        if k not in base and where.rstrip(".") not in OPEN_SECTIONS:
            raise ConfigError(f"unknown config key {where + k!r}")
        if isinstance(base.get(k), dict) and isinstance(v, dict):
            _merge(base[k], v, f"{where}{k}.")
        else:
            base[k] = v
    return base


def parse_override(text: str):
    """``a.b.c=value`` -> (["a", "b", "c"], parsed YAML value)."""
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"override must look like key.path=value, got {text!r}")
    return key.split("."), yaml.safe_load(raw) if raw else None


def apply_override(tree: dict, keys: Sequence[str], value):
    node = tree
    for i, k in enumerate(keys[:-1]):
        if not isinstance(node.get(k), dict):
            raise ConfigError(f"unknown config key {'.'.join(keys[: i + 1])!r}")
        node = node[k]
    node[keys[-1]] = value


@dataclass
class ProjectConfig:
    tree: dict
    root: Path

    @classmethod
    def load(cls, path, overrides: Sequence[str] = ()) -> "ProjectConfig":
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        tree = _merge(copy.deepcopy(DEFAULTS), raw)
        for item in overrides:
            apply_override(tree, *parse_override(item))
        cfg = cls(tree, path.resolve().parent)
        cfg.validate()
        return cfg

    def validate(self):
        self.audio
        self.vq
        for level in ("phoneme", "word"):
            self.train_config(level)
        self.vq_train
        if self.tree["predictor"]["injection"] not in ("embed_discrete", "project_continuous"):
            raise ConfigError("predictor.injection must be embed_discrete or project_continuous")

    # -- sections ---------------------------------------------------------

    @property
    def seed(self) -> int:
        return int(self.tree["seed"])

    @property
    def audio(self) -> AudioConfig:
        a = self.tree["audio"]
        try:
            return AudioConfig(
                sample_rate=int(a["sample_rate"]),
                frame=FrameConfig(int(a["frame_length"]), int(a["hop_length"]), int(a["fft_size"])),
                mel=MelConfig(n_mels=int(a["n_mels"]), fmin=float(a["fmin"]),
                              fmax=None if a["fmax"] is None else float(a["fmax"])),
                f0=F0Config(float(a["f0_floor"]), float(a["f0_ceil"]),
                            threshold=float(a["f0_threshold"]), silence_db=float(a["silence_db"])),
            )
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"bad audio section: {exc}") from exc

    @property
    def vq(self) -> VqConfig:
        return VqConfig.from_dict(dict(self.tree["vq"]))

    @property
    def vq_train(self) -> TrainConfig:
        return TrainConfig.from_dict(dict(self.tree["vq_train"]))

    def train_config(self, level: str) -> TrainConfig:
        d = dict(self.tree["train"].get(level, {}))
        d.setdefault("rng_seed", self.seed)
        return TrainConfig.from_dict(d)

    @property
    def predictor(self) -> dict:
        return dict(self.tree["predictor"])

    @property
    def gpe_threshold(self) -> float:
        return float(self.tree["metrics"]["gpe_threshold"])

    @property
    def checkpoint_every(self) -> int:
        return int(self.tree["checkpoint_every"])

    # -- paths ------------------------------------------------------------

    def path(self, rel) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    @property
    def artifacts(self) -> Path:
        return self.path(self.tree["paths"]["artifacts"])

    def wav_path(self, utt_id: str) -> Path:
        return self.path(self.tree["paths"]["wavs"]) / f"{utt_id}.wav"

    def alignment_path(self, utt_id: str) -> Path:
        return self.path(self.tree["paths"]["alignments"]) / f"{utt_id}.json"

    def split(self, name: str) -> List[str]:
        splits = self.tree["paths"]["splits"]
        if name not in splits:
            raise ConfigError(f"no split named {name!r}; known: {sorted(splits)}")
        p = self.path(splits[name])
        if not p.exists():
            raise DataError(f"split file {p} does not exist")
        return [ln.strip() for ln in p.read_text(encoding="utf-8").splitlines() if ln.strip()]

    @property
    def embedding_sources(self) -> Dict[str, Path]:
        return {k: self.path(v) for k, v in self.tree["paths"]["embeddings"].items()}

    def embedding_path(self, source: Optional[str] = None) -> Path:
        source = source or self.tree["paths"]["word_features"]
        sources = self.embedding_sources
        if source not in sources:
            raise ConfigError(f"unknown word-feature source {source!r}; known: {sorted(sources)}")
        return sources[source]

    # -- identity ---------------------------------------------------------

    def canonical(self) -> str:
        return json.dumps(self.tree, sort_keys=True, separators=(",", ":"))

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()
