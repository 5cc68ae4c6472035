"""Seeded synthetic corpus with word-conditioned prosody.

Words come in homophone pairs: both members share one phoneme spelling but
carry different mean F0 and loudness. Phoneme identity therefore says little
about prosody while word identity says a lot, which is the situation the
word-vs-phoneme predictability comparison needs.

Layout written by :func:`write_toy_corpus`::

    <root>/wavs/<id>.wav
    <root>/wavs_shifted/<id>.wav      # test utterances with F0 raised 30%
    <root>/alignments/<id>.json
    <root>/splits/{train,test}.txt
    <root>/embeddings/{emb_a,emb_b}.txt
    <root>/pairs.csv                  # test_path,reference_path
    <root>/config.yaml
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np
import yaml

from .dsp import AudioBuffer, write_wav

VOICED = ("a", "e", "i", "o", "u", "m", "n", "l")
UNVOICED = ("s", "f")
SPELLINGS = (
    ("m", "a"), ("n", "o", "s"), ("l", "i", "f", "e"), ("s", "u", "n"),
    ("f", "e", "l"), ("o", "m", "i"), ("a", "n", "u", "l"), ("i", "s"),
)


@dataclass
class ToyWord:
    text: str
    phones: tuple
    f0: float
    gain: float


@dataclass
class ToyUtterance:
    utterance_id: str
    audio: AudioBuffer
    shifted: AudioBuffer
    document: dict
    n_frames: int


def make_vocabulary(seed: int = 0, homophones: bool = True) -> List[ToyWord]:
    """Sixteen words in eight pairs; without ``homophones`` the second of each
    pair is spelled backwards so every word has its own phoneme string."""
    rng = np.random.default_rng([seed, 101])
    words = []
    for k, spelling in enumerate(SPELLINGS):
        other = spelling if homophones else spelling[::-1]
        lo, hi = rng.uniform(100.0, 150.0), rng.uniform(200.0, 280.0)
        g_lo, g_hi = rng.uniform(0.08, 0.2), rng.uniform(0.3, 0.6)
        first = rng.random() < 0.5
        words.append(ToyWord(f"w{k}a", spelling, lo if first else hi, g_lo if first else g_hi))
        words.append(ToyWord(f"w{k}b", other, hi if first else lo, g_hi if first else g_lo))
    return words


def _synth(segments, sr, hop, frame_length, rng, f0_scale=1.0):
    """Concatenate harmonic (voiced) or noise (unvoiced) segments on the frame grid."""
    n_frames = sum(d for *_, d in segments)
    n = (n_frames - 1) * hop + frame_length
    out = np.zeros(n)
    phase = 0.0
    pos = 0
    for idx, (voiced, f0, gain, dur) in enumerate(segments):
        end = n if idx == len(segments) - 1 else pos + dur * hop
        m = end - pos
        if voiced:
            glide = np.linspace(0.97, 1.03, m) * f0 * f0_scale
            ph = phase + 2 * np.pi * np.cumsum(glide) / sr
            out[pos:end] = gain * (np.sin(ph) + 0.5 * np.sin(2 * ph) + 0.25 * np.sin(3 * ph)) / 1.75
            phase = ph[-1]
        else:
            out[pos:end] = 0.3 * gain * rng.uniform(-1.0, 1.0, m)
        pos = end
    return out, n_frames


def make_utterance(utt_id: str, words: List[ToyWord], rng, sr=22050, hop=256,
                   frame_length=1024, jitter=0.03) -> ToyUtterance:
    segments = []
    phones = []
    frame = 0
    for wi, w in enumerate(words):
        f0 = w.f0 * (1.0 + jitter * rng.standard_normal())
        gain = w.gain * (1.0 + jitter * rng.standard_normal())
        for p in w.phones:
            dur = int(rng.integers(4, 10))
            segments.append((p in VOICED, f0, gain, dur))
            phones.append({"phone": p, "start_s": frame * hop / sr,
                           "end_s": (frame + dur) * hop / sr, "word_index": wi})
            frame += dur
    noise_seed = int(rng.integers(2**31))
    x, n_frames = _synth(segments, sr, hop, frame_length, np.random.default_rng(noise_seed))
    xs, _ = _synth(segments, sr, hop, frame_length, np.random.default_rng(noise_seed), 1.3)
    doc = {"utterance_id": utt_id, "phones": phones, "words": [w.text for w in words]}
    return ToyUtterance(utt_id, AudioBuffer(x, sr), AudioBuffer(xs, sr), doc, n_frames)


def make_corpus(n_utterances: int = 50, n_test: int = 10, seed: int = 0, sr: int = 22050,
                hop: int = 256, frame_length: int = 1024, homophones: bool = True):
    vocab = make_vocabulary(seed, homophones)
    rng = np.random.default_rng([seed, 202])
    utts = []
    for i in range(n_utterances):
        k = int(rng.integers(3, 7))
        chosen = [vocab[j] for j in rng.integers(0, len(vocab), size=k)]
        utts.append(make_utterance(f"toy{i:03d}", chosen, rng, sr, hop, frame_length))
    return vocab, utts[: n_utterances - n_test], utts[n_utterances - n_test:]


def default_config(sample_rate=22050, n_mels=80, quick=False) -> dict:
    """Project config for the toy corpus; ``quick`` shrinks every training run."""
    steps = 600 if quick else 3000
    cfg = {
        "seed": 0,
        "paths": {
            "wavs": "wavs",
            "alignments": "alignments",
            "artifacts": "artifacts",
            "splits": {"train": "splits/train.txt", "test": "splits/test.txt"},
            "embeddings": {"emb_a": "embeddings/emb_a.txt", "emb_b": "embeddings/emb_b.txt"},
            "word_features": "emb_a",
        },
        "audio": {"sample_rate": sample_rate, "frame_length": 1024, "hop_length": 256,
                  "fft_size": 1024, "n_mels": n_mels, "fmin": 0.0, "fmax": None,
                  "f0_floor": 71.0, "f0_ceil": 800.0, "f0_threshold": 0.1,
                  "silence_db": -60.0},
        "quantizer": {"n_bins": 256, "f0_scale": "log", "energy_scale": "linear"},
        "vq": {"filters": 32, "hidden_dim": 64, "dropout": 0.2, "beta": 0.25,
               "warmup_steps": 100 if quick else 500, "reseed_every": 100 if quick else 500},
        "vq_train": {"schedule": "constant", "learning_rate": 1e-3, "batch_size": 4,
                     "total_steps": 300 if quick else 2000, "rng_seed": 0, "eval_every": 100},
        "predictor": {"hidden": 256, "kernel": 3, "dropout": 0.5, "phoneme_dim": 256,
                      "injection": "embed_discrete", "teacher_forcing": True},
        "train": {
            "phoneme": {"schedule": "warmup_inverse_sqrt", "warmup_steps": 400, "model_dim": 256,
                        "batch_size": 8, "total_steps": steps, "rng_seed": 0, "eval_every": 100},
            "word": {"schedule": "constant", "learning_rate": 1e-4, "batch_size": 8,
                     "total_steps": steps, "rng_seed": 0, "eval_every": 100},
        },
        "metrics": {"gpe_threshold": 0.2},
        "checkpoint_every": 100,
    }
    return cfg


def write_embeddings(path: Path, vocab: List[ToyWord], dim: int, seed: int):
    rng = np.random.default_rng(seed)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"dim {dim}\n")
        for w in vocab:
            vec = rng.standard_normal(dim)
            fh.write(w.text + "\t" + " ".join(f"{v:.6f}" for v in vec) + "\n")


def write_toy_corpus(root, n_utterances: int = 50, n_test: int = 10, seed: int = 0,
                     n_mels: int = 80, quick: bool = False, homophones: bool = True,
                     config_overrides: Optional[dict] = None) -> Path:
    """Write the corpus, splits, embeddings, pair manifest and config; return the config path."""
    root = Path(root)
    for sub in ("wavs", "wavs_shifted", "alignments", "splits", "embeddings"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    vocab, train, test = make_corpus(n_utterances, n_test, seed, homophones=homophones)
    for u in train + test:
        write_wav(root / "wavs" / f"{u.utterance_id}.wav", u.audio)
        write_wav(root / "wavs_shifted" / f"{u.utterance_id}.wav", u.shifted)
        with open(root / "alignments" / f"{u.utterance_id}.json", "w", encoding="utf-8") as fh:
            json.dump(u.document, fh, indent=1, sort_keys=True)
    for name, items in (("train", train), ("test", test)):
        (root / "splits" / f"{name}.txt").write_text(
            "".join(u.utterance_id + "\n" for u in items), encoding="utf-8")
    write_embeddings(root / "embeddings" / "emb_a.txt", vocab, 16, seed + 11)
    write_embeddings(root / "embeddings" / "emb_b.txt", vocab, 32, seed + 12)
    lines = ["test_path,reference_path\n"]
    for u in test:
        lines.append(f"wavs/{u.utterance_id}.wav,wavs/{u.utterance_id}.wav\n")
        lines.append(f"wavs_shifted/{u.utterance_id}.wav,wavs/{u.utterance_id}.wav\n")
    (root / "pairs.csv").write_text("".join(lines), encoding="utf-8")
    cfg = default_config(n_mels=n_mels, quick=quick)
    if config_overrides:
        _deep_update(cfg, config_overrides)
    cfg_path = root / "config.yaml"
    cfg_path.write_text(yaml.safe_dump(cfg, sort_keys=True), encoding="utf-8")
    return cfg_path


def _deep_update(base: dict, upd: dict):
    for k, v in upd.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = v
