"""Word-level, phoneme-level and hierarchical prosody predictors.

Every predictor is the duration-predictor stack of FastSpeech 2 (two
conv1d/ReLU/LayerNorm/dropout blocks and a linear head) over a token feature
sequence:

* phoneme level: a learned per-symbol embedding table feeds the stack;
* word level: fixed external word vectors feed the stack;
* hierarchical: word-level labels are embedded into the phoneme feature
  space, repeated once per phoneme of each word and added to the phoneme
  features before the phoneme-level stack.

Rule-based predictors regress (F0, energy) and train with MAE; neural-based
predictors regress the 3-dim codeword latent and train with MSE. Targets are
standardized per channel with training-set statistics; reported errors are in
target units.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, FormatError, NumericalError, ShapeError
from .labels import KINDS, ProsodyLabelSet, Quantizer, quantize
from .nn import (LOSSES, Embedding, Linear, Sequential, TrainConfig, adam_step, checkpoint,
                 init_adam_state)
from .vq import CODEBOOK_SIZE, nearest_codewords

log = logging.getLogger(__name__)

LOSS_FOR_KIND = {"rule_based": "mae", "neural_based": "mse"}
OUT_DIM = {"rule_based": 2, "neural_based": 3}
INJECTIONS = ("embed_discrete", "project_continuous")


def length_regulate(x, counts) -> np.ndarray:
    """Repeat row ``i`` of ``x`` ``counts[i]`` times."""
    counts = np.asarray(counts, dtype=np.int64)
    x = np.asarray(x)
    if counts.ndim != 1 or counts.size != x.shape[0]:
        raise ShapeError(f"need one count per row: {counts.size} counts, {x.shape[0]} rows")
    if np.any(counts < 1):
        raise ShapeError("every count must be >= 1")
    return np.repeat(x, counts, axis=0)


def length_regulate_backward(g, counts) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.int64)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    return np.add.reduceat(g, starts, axis=0)


# ---------------------------------------------------------------------------
# Features
# ---------------------------------------------------------------------------


class WordEmbeddings:
    """Static word vectors from a ``dim D`` + ``token<TAB>v1 ... vD`` text file.

    Unknown words map to the zero vector; ``oov_count`` tallies them.
    """

    def __init__(self, dim: int, vectors: Dict[str, np.ndarray], name: str = "embeddings"):
        self.dim = int(dim)
        self.vectors = vectors
        self.name = name
        self.oov_count = 0

    @classmethod
    def load(cls, path, name: Optional[str] = None) -> "WordEmbeddings":
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().split()
            if len(header) != 2 or header[0] != "dim":
                raise FormatError(f"{path}: first line must be 'dim D'")
            dim = int(header[1])
            vectors = {}
            for lineno, line in enumerate(fh, start=2):
                line = line.rstrip("\n")
                if not line.strip():
                    continue
                token, sep, rest = line.partition("\t")
                vals = rest.split()
                if not sep or len(vals) != dim:
                    raise FormatError(f"{path}:{lineno}: expected token<TAB>{dim} values")
                vectors[token] = np.array([float(v) for v in vals])
        return cls(dim, vectors, name=name or str(path))

    def lookup(self, words: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(words), self.dim))
        for i, w in enumerate(words):
            vec = self.vectors.get(w)
            if vec is None:
                vec = self.vectors.get(w.lower())
            if vec is None:
                self.oov_count += 1
                log.warning("out-of-vocabulary word %r -> zero vector", w)
            else:
                out[i] = vec
        return out


class PhonemeVocab:
    """Symbol -> id; id 0 is reserved for unseen symbols."""

    def __init__(self, symbols: Sequence[str]):
        self.symbols = ["<unk>"] + sorted(set(symbols) - {"<unk>"})
        self._ids = {s: i for i, s in enumerate(self.symbols)}

    def __len__(self):
        return len(self.symbols)

    def encode(self, symbols: Sequence[str]) -> np.ndarray:
        return np.array([self._ids.get(s, 0) for s in symbols], dtype=np.int64)


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PredictorSpec:
    input_dim: int
    out_dim: int
    hidden: int = 256
    kernel: int = 3
    dropout: float = 0.5
    n_layers: int = 2

    def layer_specs(self) -> List[dict]:
        specs = []
        dim = self.input_dim
        for _ in range(self.n_layers):
            specs += [
                {"kind": "conv1d", "in_ch": dim, "out_ch": self.hidden, "kernel": self.kernel},
                {"kind": "relu"},
                {"kind": "layer_norm", "dim": self.hidden},
                {"kind": "dropout", "rate": self.dropout},
            ]
            dim = self.hidden
        specs.append({"kind": "linear", "in_dim": dim, "out_dim": self.out_dim})
        return specs


@dataclass
class PredictorExample:
    """One utterance as seen by a predictor.

    ``inputs`` is an int id array (phoneme level) or a float matrix of word
    vectors (word level). ``targets`` are continuous labels in value units.
    ``word_labels``/``phones_per_word`` are only needed by the phoneme stage of
    a hierarchical model.
    """

    utterance_id: str
    inputs: np.ndarray
    targets: Optional[np.ndarray] = None
    word_labels: Optional[np.ndarray] = None
    phones_per_word: Optional[np.ndarray] = None


class ProsodyPredictor:
    """A single-level predictor (with its phoneme table at phoneme level)."""

    def __init__(self, kind: str, level: str, spec: PredictorSpec, vocab_size: int = 0,
                 seed: int = 0):
        if kind not in KINDS:
            raise ConfigError(f"kind must be one of {KINDS}")
        if spec.out_dim != OUT_DIM[kind]:
            raise ConfigError(f"{kind} predictors output {OUT_DIM[kind]} values, spec says {spec.out_dim}")
        self.kind, self.level, self.spec = kind, level, spec
        self.net = Sequential.from_specs(spec.layer_specs(), seed=seed)
        self.table = None
        if level == "phoneme":
            if vocab_size < 1:
                raise ConfigError("phoneme-level predictor needs a vocabulary")
            self.table = Sequential([Embedding(vocab_size, spec.input_dim,
                                               rng=np.random.default_rng([seed, 1]))])
        elif level != "word":
            raise ConfigError(f"unknown level {level!r}")
        self.target_mean = np.zeros(spec.out_dim)
        self.target_std = np.ones(spec.out_dim)

    @property
    def loss_name(self) -> str:
        return LOSS_FOR_KIND[self.kind]

    def modules(self) -> Dict[str, Sequential]:
        mods = {"net": self.net}
        if self.table is not None:
            mods["table"] = self.table
        return mods

    def features(self, ex: PredictorExample, train=False) -> np.ndarray:
        if self.level == "phoneme":
            return self.table.forward(np.asarray(ex.inputs, dtype=np.int64), train=train)
        x = np.asarray(ex.inputs, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.spec.input_dim:
            raise ShapeError(f"word features must be (n_words, {self.spec.input_dim}), got {x.shape}")
        return x

    def forward(self, ex: PredictorExample, train=False) -> np.ndarray:
        """Standardized predictions, one row per token."""
        return self.net.forward(self.features(ex, train), train=train)

    def backward(self, g):
        gx = self.net.backward(g)
        if self.table is not None:
            self.table.backward(gx)

    def normalize(self, y):
        return (y - self.target_mean) / self.target_std

    def denormalize(self, y):
        return y * self.target_std + self.target_mean

    def predict(self, ex: PredictorExample) -> np.ndarray:
        return self.denormalize(self.forward(ex, train=False))

    def state(self) -> dict:
        return {"kind": self.kind, "level": self.level, "spec": asdict(self.spec),
                "target_mean": self.target_mean, "target_std": self.target_std,
                "modules": {k: checkpoint.network_state(m) for k, m in self.modules().items()}}

    @classmethod
    def from_state(cls, st) -> "ProsodyPredictor":
        obj = cls.__new__(cls)
        obj.kind, obj.level = st["kind"], st["level"]
        obj.spec = PredictorSpec(**st["spec"])
        obj.net = checkpoint.restore_network(st["modules"]["net"])
        obj.table = (checkpoint.restore_network(st["modules"]["table"])
                     if "table" in st["modules"] else None)
        obj.target_mean = np.asarray(st["target_mean"], dtype=np.float64)
        obj.target_std = np.asarray(st["target_std"], dtype=np.float64)
        return obj


def predict_word_prosody(word_feats: np.ndarray, model: ProsodyPredictor) -> np.ndarray:
    if model.level != "word":
        raise ConfigError("model is not a word-level predictor")
    return model.predict(PredictorExample("", word_feats))


def predict_phoneme_prosody(phoneme_ids: np.ndarray, model: ProsodyPredictor) -> np.ndarray:
    if model.level != "phoneme":
        raise ConfigError("model is not a phoneme-level predictor")
    return model.predict(PredictorExample("", phoneme_ids))


class WordProsodyEmbedding:
    """Maps word-level labels into the phoneme feature space.

    Rule-based labels ``(n, 2)`` of (F0 bin, energy bin) are embedded with two
    256-row tables and summed; neural labels ``(n,)`` of codeword indices use
    one table. With ``injection='project_continuous'`` a linear layer maps the
    standardized continuous word prediction instead.
    """

    def __init__(self, word_kind: str, dim: int, injection: str = "embed_discrete", seed: int = 0):
        if injection not in INJECTIONS:
            raise ConfigError(f"injection must be one of {INJECTIONS}")
        self.word_kind, self.dim, self.injection = word_kind, int(dim), injection
        rng = np.random.default_rng([seed, 2])
        if injection == "project_continuous":
            self.mods = {"proj": Sequential([Linear(OUT_DIM[word_kind], dim, rng=rng)])}
        elif word_kind == "rule_based":
            self.mods = {"f0": Sequential([Embedding(256, dim, rng=rng)]),
                         "energy": Sequential([Embedding(256, dim, rng=rng)])}
        else:
            self.mods = {"code": Sequential([Embedding(CODEBOOK_SIZE, dim, rng=rng)])}

    def forward(self, labels, train=False):
        if self.injection == "project_continuous":
            return self.mods["proj"].forward(np.asarray(labels, dtype=np.float64), train=train)
        labels = np.asarray(labels, dtype=np.int64)
        if self.word_kind == "rule_based":
            return (self.mods["f0"].forward(labels[:, 0], train=train)
                    + self.mods["energy"].forward(labels[:, 1], train=train))
        return self.mods["code"].forward(labels.reshape(-1), train=train)

    def backward(self, g):
        for m in self.mods.values():
            m.backward(g)

    def zero(self):
        """Zero every table (the additive-identity configuration)."""
        for m in self.mods.values():
            for p in m.named_params().values():
                p[...] = 0.0


class HierarchicalPredictor:
    """Word-level predictor whose labels condition a phoneme-level predictor."""

    def __init__(self, word: ProsodyPredictor, phoneme: ProsodyPredictor,
                 injection: str = "embed_discrete", seed: int = 0):
        if word.level != "word" or phoneme.level != "phoneme":
            raise ConfigError("hierarchical model needs a word-level and a phoneme-level predictor")
        self.word = word
        self.phoneme = phoneme
        self.word_embedding = WordProsodyEmbedding(word.kind, phoneme.spec.input_dim,
                                                   injection, seed=seed)
        self._counts = None

    @property
    def kind(self):
        return self.phoneme.kind

    @property
    def level(self):
        return "phoneme"

    @property
    def loss_name(self):
        return self.phoneme.loss_name

    @property
    def target_mean(self):
        return self.phoneme.target_mean

    @target_mean.setter
    def target_mean(self, v):
        self.phoneme.target_mean = v

    @property
    def target_std(self):
        return self.phoneme.target_std

    @target_std.setter
    def target_std(self, v):
        self.phoneme.target_std = v

    def normalize(self, y):
        return self.phoneme.normalize(y)

    def denormalize(self, y):
        return self.phoneme.denormalize(y)

    def modules(self) -> Dict[str, Sequential]:
        """Trainable modules of the phoneme stage; the word stage trains separately."""
        mods = {f"phoneme.{k}": m for k, m in self.phoneme.modules().items()}
        mods.update({f"word_embedding.{k}": m for k, m in self.word_embedding.mods.items()})
        return mods

    def forward(self, ex: PredictorExample, train=False) -> np.ndarray:
        if ex.word_labels is None or ex.phones_per_word is None:
            raise ShapeError(f"{ex.utterance_id}: phoneme stage needs word labels and phone counts")
        feats = self.phoneme.features(ex, train)
        counts = np.asarray(ex.phones_per_word, dtype=np.int64)
        if counts.sum() != feats.shape[0]:
            raise ShapeError(
                f"{ex.utterance_id}: words span {counts.sum()} phonemes, got {feats.shape[0]}")
        wemb = self.word_embedding.forward(ex.word_labels, train)
        self._counts = counts
        return self.phoneme.net.forward(feats + length_regulate(wemb, counts), train=train)

    def backward(self, g):
        gx = self.phoneme.net.backward(g)
        if self.phoneme.table is not None:
            self.phoneme.table.backward(gx)
        self.word_embedding.backward(length_regulate_backward(gx, self._counts))

    def word_labels_from(self, word_pred: np.ndarray, quantizers=None, codebook=None) -> np.ndarray:
        """Discrete (or standardized continuous) word labels fed to the phoneme stage."""
        if self.word_embedding.injection == "project_continuous":
            return self.word.normalize(word_pred)
        if self.word.kind == "rule_based":
            f0_q, en_q = quantizers
            return np.stack([np.atleast_1d(quantize(f0_q, word_pred[:, 0])),
                             np.atleast_1d(quantize(en_q, word_pred[:, 1]))], axis=1)
        return nearest_codewords(word_pred, codebook)

    def predict(self, ex: PredictorExample) -> np.ndarray:
        return self.denormalize(self.forward(ex, train=False))

    def state(self) -> dict:
        return {"word": self.word.state(), "phoneme": self.phoneme.state(),
                "injection": self.word_embedding.injection,
                "word_embedding": {k: checkpoint.network_state(m)
                                   for k, m in self.word_embedding.mods.items()}}

    @classmethod
    def from_state(cls, st) -> "HierarchicalPredictor":
        obj = cls.__new__(cls)
        obj.word = ProsodyPredictor.from_state(st["word"])
        obj.phoneme = ProsodyPredictor.from_state(st["phoneme"])
        emb = WordProsodyEmbedding(obj.word.kind, obj.phoneme.spec.input_dim, st["injection"])
        emb.mods = {k: checkpoint.restore_network(v) for k, v in st["word_embedding"].items()}
        obj.word_embedding = emb
        obj._counts = None
        return obj


def predict_hierarchical(word_ex: PredictorExample, phoneme_ex: PredictorExample,
                         model: HierarchicalPredictor, quantizers=None, codebook=None):
    """Run both stages at inference; returns ``(word_pred, phoneme_pred)`` in value units."""
    word_pred = model.word.predict(word_ex)
    labels = model.word_labels_from(word_pred, quantizers, codebook)
    ex = PredictorExample(phoneme_ex.utterance_id, phoneme_ex.inputs,
                          word_labels=labels, phones_per_word=phoneme_ex.phones_per_word)
    return word_pred, model.predict(ex)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainReport:
    loss: str
    kind: str
    level: str
    losses: List[float] = field(default_factory=list)
    eval_losses: List[Tuple[int, float]] = field(default_factory=list)
    final_eval: Dict[str, float] = field(default_factory=dict)

    @property
    def initial_loss(self) -> float:
        return self.eval_losses[0][1]

    @property
    def best_loss(self) -> float:
        return min(v for _, v in self.eval_losses)

    def to_dict(self) -> dict:
        return {"loss": self.loss, "kind": self.kind, "level": self.level,
                "losses": self.losses, "eval_losses": [list(x) for x in self.eval_losses],
                "final_eval": self.final_eval}

    @classmethod
    def from_dict(cls, d) -> "TrainReport":
        return cls(d["loss"], d["kind"], d["level"], list(d["losses"]),
                   [tuple(x) for x in d["eval_losses"]], dict(d["final_eval"]))


def _check_examples(model, examples):
    for ex in examples:
        if ex.targets is None:
            raise ShapeError(f"{ex.utterance_id}: training example has no targets")
        n = len(ex.inputs)
        if ex.targets.shape != (n, OUT_DIM[model.kind]):
            raise ShapeError(
                f"{ex.utterance_id}: {n} tokens but targets of shape {ex.targets.shape}")


def fit_target_stats(model, examples):
    y = np.concatenate([ex.targets for ex in examples], axis=0)
    model.target_mean = y.mean(axis=0)
    model.target_std = y.std(axis=0) + 1e-8


def dataset_loss(model, examples) -> float:
    fn = LOSSES[model.loss_name]
    return float(np.mean([fn(model.forward(ex), model.normalize(ex.targets))[0]
                          for ex in examples]))


def channel_mae(model, examples) -> np.ndarray:
    """Per-channel MAE in target units, pooled over all tokens."""
    err = np.concatenate([np.abs(model.predict(ex) - ex.targets) for ex in examples], axis=0)
    return err.mean(axis=0)


def _all_params(model):
    params, grads = {}, {}
    for name, mod in model.modules().items():
        for k, p in mod.named_params().items():
            params[f"{name}/{k}"] = p
        for k, g in mod.named_grads().items():
            grads[f"{name}/{k}"] = g
    return params, grads


def train_predictor(model, train_set: Sequence[PredictorExample], cfg: TrainConfig,
                    eval_set: Optional[Sequence[PredictorExample]] = None,
                    resume: Optional[dict] = None, on_checkpoint=None,
                    checkpoint_every: int = 0, stop_ratio: Optional[float] = None) -> TrainReport:
    """Adam training of ``model`` (any object with the predictor training surface).

    The loss follows the label kind: MAE for rule-based, MSE for neural-based.
    ``eval_losses`` holds eval-mode (dropout off) loss over the training set
    every ``cfg.eval_every`` steps, starting at step 0. ``final_eval`` holds
    per-channel MAE in target units over ``eval_set`` (or the training set).
    With ``stop_ratio`` training ends at the first evaluation whose loss is at
    most ``stop_ratio`` times the step-0 loss.
    """
    if not train_set:
        raise ConfigError("training set is empty")
    _check_examples(model, train_set)
    loss_fn = LOSSES[model.loss_name]
    if resume is None:
        fit_target_stats(model, train_set)
        opt = init_adam_state(_all_params(model)[0])
        report = TrainReport(model.loss_name, model.kind, model.level)
        report.eval_losses.append((0, dataset_loss(model, train_set)))
        start = 1
    else:
        opt = resume["optimizer"]
        report = TrainReport.from_dict(resume["report"])
        start = int(resume["step"]) + 1

    targets = [model.normalize(ex.targets) for ex in train_set]
    for step in range(start, cfg.total_steps + 1):
        rng = np.random.default_rng([cfg.rng_seed, step])
        batch = rng.integers(0, len(train_set), size=cfg.batch_size)
        for mod in model.modules().values():
            mod.zero_grad()
        total = 0.0
        for b in batch:
            pred = model.forward(train_set[b], train=True)
            loss, g = loss_fn(pred, targets[b])
            total += loss
            model.backward(g / len(batch))
        total /= len(batch)
        if not math.isfinite(total):
            raise NumericalError(
                f"{model.kind}/{model.level} loss became {total} at step {step} "
                f"(batch {batch.tolist()}, lr {cfg.lr(step):.3g})")
        params, grads = _all_params(model)
        adam_step(params, grads, opt, cfg, step)
        report.losses.append(total)
        evaluated = step % cfg.eval_every == 0 or step == cfg.total_steps
        if evaluated:
            report.eval_losses.append((step, dataset_loss(model, train_set)))
        if on_checkpoint is not None and checkpoint_every and step % checkpoint_every == 0:
            on_checkpoint({"optimizer": opt, "report": report.to_dict(), "step": step})
        if evaluated and stop_ratio is not None and \
                report.eval_losses[-1][1] <= stop_ratio * report.initial_loss:
            break

    mae = channel_mae(model, eval_set if eval_set else train_set)
    names = ("f0", "energy") if model.kind == "rule_based" else ("z0", "z1", "z2")
    report.final_eval = {f"mae_{n}": float(v) for n, v in zip(names, mae)}
    return report


def labels_from_prediction(pred: np.ndarray, kind: str, level: str, utterance_id: str = "",
                           quantizers: Optional[Tuple[Quantizer, Quantizer]] = None,
                           codebook=None) -> ProsodyLabelSet:
    """Discretize continuous predictions: re-quantize (rule) or snap to a codeword (neural)."""
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    if kind == "rule_based":
        if quantizers is None:
            raise ConfigError("rule-based labels need the F0 and energy quantizers")
        f0_q, en_q = quantizers
        return ProsodyLabelSet(utterance_id, kind, level,
                               f0_bin=np.atleast_1d(quantize(f0_q, pred[:, 0])),
                               energy_bin=np.atleast_1d(quantize(en_q, pred[:, 1])),
                               f0=pred[:, 0], energy=pred[:, 1])
    if kind == "neural_based":
        if codebook is None:
            raise ConfigError("neural-based labels need a codebook")
        table = getattr(codebook, "codewords", codebook)
        idx = nearest_codewords(pred, table)
        return ProsodyLabelSet(utterance_id, kind, level, codeword_index=idx,
                               latent=np.asarray(table)[idx])
    raise ConfigError(f"unknown kind {kind!r}")
