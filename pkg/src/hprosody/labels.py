"""Forced-alignment ingestion, token averaging and bin quantization."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .dsp import AudioBuffer, AudioConfig, FrameTrack, analyze
from .errors import ConfigError, DataError, FormatError, ShapeError

LEVELS = ("phoneme", "word")
KINDS = ("rule_based", "neural_based")


def _check_level(level):
    if level not in LEVELS:
        raise ConfigError(f"level must be one of {LEVELS}, got {level!r}")


# ---------------------------------------------------------------------------
# Alignment
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Phone:
    symbol: str
    duration: int
    word_index: int


@dataclass(frozen=True)
class Word:
    text: str
    start: int  # first phone index
    stop: int  # one past the last phone index


@dataclass
class UtteranceAlignment:
    utterance_id: str
    phonemes: List[Phone]
    words: List[Word]

    @property
    def n_frames(self) -> int:
        return sum(p.duration for p in self.phonemes)

    def durations(self, level: str = "phoneme") -> np.ndarray:
        _check_level(level)
        d = np.array([p.duration for p in self.phonemes], dtype=np.int64)
        if level == "phoneme":
            return d
        return np.array([d[w.start:w.stop].sum() for w in self.words], dtype=np.int64)

    def phones_per_word(self) -> np.ndarray:
        return np.array([w.stop - w.start for w in self.words], dtype=np.int64)

    def n_tokens(self, level: str) -> int:
        _check_level(level)
        return len(self.phonemes) if level == "phoneme" else len(self.words)

    @property
    def symbols(self) -> List[str]:
        return [p.symbol for p in self.phonemes]

    @property
    def word_texts(self) -> List[str]:
        return [w.text for w in self.words]


def _half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def parse_alignment(document, n_frames: int, sample_rate: int = 22050,
                    hop_length: int = 256) -> UtteranceAlignment:
    """Build an :class:`UtteranceAlignment` from an MFA-style JSON document.

    Phone onsets are rounded to the frame grid (``round(start_s * sr / hop)``),
    so each phone absorbs any gap before the next onset and the last phone
    takes whatever remains of ``n_frames``. Durations always sum to
    ``n_frames``.

    Raises
    ------
    FormatError
        On malformed, overlapping or unsorted segments, words with no
        phones, or an alignment that does not fit in ``n_frames``.
    """
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise FormatError(f"alignment is not valid JSON: {exc}") from exc
    try:
        utt_id = str(document.get("utterance_id", ""))
        phones = document["phones"]
        words = document["words"]
    except (AttributeError, KeyError, TypeError) as exc:
        raise FormatError(f"alignment document missing field: {exc}") from exc
    if not phones:
        raise FormatError(f"{utt_id}: alignment has no phones")
    if not words:
        raise FormatError(f"{utt_id}: alignment has no words")
    if n_frames < len(phones):
        raise FormatError(f"{utt_id}: {len(phones)} phones cannot fit in {n_frames} frames")

    rate = sample_rate / hop_length
    prev_end = -math.inf
    prev_word = 0
    onsets = []
    word_ids = []
    symbols = []
    for k, ph in enumerate(phones):
        try:
            start, end = float(ph["start_s"]), float(ph["end_s"])
            widx = int(ph["word_index"])
            sym = str(ph["phone"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{utt_id}: phone {k} malformed: {exc}") from exc
        if not (math.isfinite(start) and math.isfinite(end)) or start < 0:
            raise FormatError(f"{utt_id}: phone {k} has invalid times {start}, {end}")
        if end <= start:
            raise FormatError(f"{utt_id}: phone {k} ends ({end}) before it starts ({start})")
        if start < prev_end - 1e-9:
            raise FormatError(f"{utt_id}: phone {k} overlaps or precedes phone {k - 1}")
        if not 0 <= widx < len(words):
            raise FormatError(f"{utt_id}: phone {k} word_index {widx} out of range")
        if widx < prev_word or widx > prev_word + 1 or (k == 0 and widx != 0):
            raise FormatError(f"{utt_id}: phone {k} word_index {widx} breaks word order")
        prev_end, prev_word = end, widx
        onsets.append(start)
        word_ids.append(widx)
        symbols.append(sym)
    if word_ids[-1] != len(words) - 1:
        raise FormatError(f"{utt_id}: words after index {word_ids[-1]} have no phones")

    bounds = [0]
    for start in onsets[1:]:
        bounds.append(max(_half_up(start * rate), bounds[-1] + 1))
    bounds.append(n_frames)
    durs = np.diff(bounds)
    if durs[-1] < 1:
        raise FormatError(f"{utt_id}: alignment extends past the {n_frames}-frame audio")

    phone_list = [Phone(s, int(d), w) for s, d, w in zip(symbols, durs, word_ids)]
    word_list = []
    for i, text in enumerate(words):
        text = str(text)
        if not text.strip():
            raise FormatError(f"{utt_id}: word {i} is empty")
        members = [k for k, w in enumerate(word_ids) if w == i]
        word_list.append(Word(text, members[0], members[-1] + 1))
    return UtteranceAlignment(utt_id, phone_list, word_list)


def load_alignment(path, n_frames, sample_rate=22050, hop_length=256):
    with open(path, encoding="utf-8") as fh:
        return parse_alignment(fh.read(), n_frames, sample_rate, hop_length)


def alignment_to_document(al: UtteranceAlignment, sample_rate=22050, hop_length=256) -> dict:
    """Inverse of :func:`parse_alignment` on the frame grid."""
    sec = hop_length / sample_rate
    phones = []
    t = 0
    for p in al.phonemes:
        phones.append({"phone": p.symbol, "start_s": t * sec, "end_s": (t + p.duration) * sec,
                       "word_index": p.word_index})
        t += p.duration
    return {"utterance_id": al.utterance_id, "phones": phones, "words": al.word_texts}


# ---------------------------------------------------------------------------
# Token averaging
# ---------------------------------------------------------------------------


def token_average(values, alignment: UtteranceAlignment, level: str = "phoneme",
                  voiced: Optional[np.ndarray] = None) -> np.ndarray:
    """Mean of ``values`` over each token's frames.

    With ``voiced`` given, only voiced frames contribute and tokens without
    any voiced frame get 0.
    """
    values = np.asarray(values, dtype=np.float64)
    durs = alignment.durations(level)
    if values.ndim != 1 or values.size != durs.sum():
        raise ShapeError(
            f"{alignment.utterance_id}: track has {values.size} frames, "
            f"alignment covers {durs.sum()}"
        )
    starts = np.concatenate(([0], np.cumsum(durs)[:-1]))
    if voiced is None:
        return np.add.reduceat(values, starts) / durs
    voiced = np.asarray(voiced, dtype=bool)
    if voiced.shape != values.shape:
        raise ShapeError("voiced mask length differs from track length")
    sums = np.add.reduceat(np.where(voiced, values, 0.0), starts)
    counts = np.add.reduceat(voiced.astype(np.int64), starts)
    out = np.zeros(durs.size)
    np.divide(sums, counts, out=out, where=counts > 0)
    return out


def rule_token_values(track: FrameTrack, alignment: UtteranceAlignment, level: str):
    """Token-level (F0, energy) from a full frame track."""
    if track.energy is None:
        raise DataError("frame track carries no energy")
    f0 = token_average(track.f0, alignment, level, voiced=track.voiced)
    energy = token_average(track.energy, alignment, level)
    return f0, energy


# ---------------------------------------------------------------------------
# Quantizer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Quantizer:
    """Equal-width bins between ``min`` and ``max`` on a linear or log axis.

    Values outside the fitted range are clamped, so ``min`` (and anything
    below it, including the unvoiced sentinel 0 on a log axis) maps to bin 0
    and ``max`` to ``n_bins - 1``.
    """

    n_bins: int
    scale: str
    min: float
    max: float

    def __post_init__(self):
        if self.n_bins < 2:
            raise ConfigError("n_bins must be >= 2")
        if self.scale not in ("linear", "log"):
            raise ConfigError(f"scale must be 'linear' or 'log', got {self.scale!r}")
        if not self.max > self.min:
            raise ConfigError("quantizer range is degenerate")
        if self.scale == "log" and self.min <= 0:
            raise ConfigError("log quantizer needs a positive minimum")

    def _fwd(self, v):
        return np.log(v) if self.scale == "log" else v

    def _inv(self, s):
        return np.exp(s) if self.scale == "log" else s

    @property
    def lo(self) -> float:
        return float(self._fwd(self.min))

    @property
    def bin_width(self) -> float:
        """Width of one bin on the quantizer's axis (log-Hz for ``scale='log'``)."""
        return (float(self._fwd(self.max)) - self.lo) / self.n_bins

    def centers(self) -> np.ndarray:
        return self.lo + (np.arange(self.n_bins) + 0.5) * self.bin_width

    def clamp(self, v):
        return np.clip(v, self.min, self.max)

    def axis(self, v):
        """Clamp and map onto the binning axis."""
        return self._fwd(self.clamp(np.asarray(v, dtype=np.float64)))

    def position(self, v):
        """Clamped location in bin units: 0 at ``min``, ``n_bins`` at ``max``.

        Bin ``b`` has its centre at exactly ``b + 0.5`` here, which keeps the
        half-bin round-trip bound exact under floating point.
        """
        return np.clip((self.axis(v) - self.lo) / self.bin_width, 0.0, float(self.n_bins))

    def to_dict(self) -> dict:
        return {"n_bins": self.n_bins, "scale": self.scale, "min": self.min, "max": self.max}

    @classmethod
    def from_dict(cls, d) -> "Quantizer":
        try:
            return cls(int(d["n_bins"]), str(d["scale"]), float(d["min"]), float(d["max"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad quantizer record: {exc}") from exc


def fit_quantizer(values, n_bins: int = 256, scale: str = "linear") -> Quantizer:
    v = np.asarray(values, dtype=np.float64).ravel()
    v = v[np.isfinite(v)]
    if scale == "log":
        v = v[v > 0]
    if v.size == 0 or np.unique(v).size < 2:
        raise DataError("need at least two distinct finite values to fit a quantizer")
    return Quantizer(int(n_bins), scale, float(v.min()), float(v.max()))


def quantize(q: Quantizer, v):
    """Bin index of ``v`` (scalar or array); nearest bin centre, ties to the lower."""
    arr = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DataError("cannot quantize non-finite value")
    u = q.position(arr)
    # nearest centre b + 0.5; an exact tie (u integral) goes to the lower bin
    idx = np.clip(np.ceil(u).astype(np.int64) - 1, 0, q.n_bins - 1)
    return int(idx) if idx.ndim == 0 else idx


def dequantize(q: Quantizer, b):
    """Bin centre mapped back to value units."""
    b = np.asarray(b)
    if np.any((b < 0) | (b >= q.n_bins)):
        raise DataError(f"bin index out of range [0, {q.n_bins})")
    out = q._inv(q.lo + (b + 0.5) * q.bin_width)
    return float(out) if np.ndim(out) == 0 else out


def save_quantizer(path, q: Quantizer):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(q.to_dict(), fh, sort_keys=True)
        fh.write("\n")


def load_quantizer(path) -> Quantizer:
    with open(path, encoding="utf-8") as fh:
        return Quantizer.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# Label sets
# ---------------------------------------------------------------------------


@dataclass
class ProsodyLabelSet:
    """Token-level labels for one utterance.

    Rule-based sets carry ``f0_bin``/``energy_bin`` (and the continuous token
    means they came from); neural-based sets carry ``codeword_index`` and the
    3-dim quantized ``latent`` per token.
    """

    utterance_id: str
    kind: str
    level: str
    f0_bin: Optional[np.ndarray] = None
    energy_bin: Optional[np.ndarray] = None
    f0: Optional[np.ndarray] = None
    energy: Optional[np.ndarray] = None
    codeword_index: Optional[np.ndarray] = None
    latent: Optional[np.ndarray] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {KINDS}")
        _check_level(self.level)
        if self.kind == "rule_based":
            if self.f0_bin is None or self.energy_bin is None:
                raise FormatError("rule-based labels need f0_bin and energy_bin")
            self.f0_bin = np.asarray(self.f0_bin, dtype=np.int64)
            self.energy_bin = np.asarray(self.energy_bin, dtype=np.int64)
            if self.f0_bin.shape != self.energy_bin.shape:
                raise FormatError("f0_bin and energy_bin lengths differ")
            bins = np.concatenate([self.f0_bin, self.energy_bin])
        else:
            if self.codeword_index is None or self.latent is None:
                raise FormatError("neural-based labels need codeword_index and latent")
            self.codeword_index = np.asarray(self.codeword_index, dtype=np.int64)
            self.latent = np.asarray(self.latent, dtype=np.float64).reshape(-1, 3)
            if self.latent.shape[0] != self.codeword_index.size:
                raise FormatError("latent count differs from codeword count")
            bins = self.codeword_index
        if np.any((bins < 0) | (bins > 255)):
            raise FormatError("label index outside [0, 255]")
        for name in ("f0", "energy"):
            val = getattr(self, name)
            if val is not None:
                setattr(self, name, np.asarray(val, dtype=np.float64))

    def __len__(self):
        return (self.f0_bin if self.kind == "rule_based" else self.codeword_index).size

    def targets(self, f0_q: Optional[Quantizer] = None,
                energy_q: Optional[Quantizer] = None) -> np.ndarray:
        """Continuous regression targets, shape (n_tokens, 2) or (n_tokens, 3).

        Rule-based targets are the dequantized bin centres, so they need the
        fitted quantizers; neural-based targets are the codeword latents.
        """
        if self.kind == "rule_based":
            if f0_q is None or energy_q is None:
                raise ConfigError("rule-based targets need the F0 and energy quantizers")
            return np.stack([np.atleast_1d(dequantize(f0_q, self.f0_bin)),
                             np.atleast_1d(dequantize(energy_q, self.energy_bin))], axis=1)
        return self.latent

    def to_json(self) -> str:
        tokens = []
        for i in range(len(self)):
            if self.kind == "rule_based":
                tok = {"f0_bin": int(self.f0_bin[i]), "energy_bin": int(self.energy_bin[i])}
                if self.f0 is not None:
                    tok["f0"] = float(self.f0[i])
                if self.energy is not None:
                    tok["energy"] = float(self.energy[i])
            else:
                tok = {"codeword_index": int(self.codeword_index[i]),
                       "latent": [float(x) for x in self.latent[i]]}
            tokens.append(tok)
        rec = {"utterance_id": self.utterance_id, "kind": self.kind, "level": self.level,
               "tokens": tokens}
        if self.extra:
            rec["extra"] = self.extra
        return json.dumps(rec, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "ProsodyLabelSet":
        try:
            rec = json.loads(line)
            toks = rec["tokens"]
            kw = dict(utterance_id=rec["utterance_id"], kind=rec["kind"], level=rec["level"],
                      extra=rec.get("extra", {}))
            if rec["kind"] == "rule_based":
                kw["f0_bin"] = [t["f0_bin"] for t in toks]
                kw["energy_bin"] = [t["energy_bin"] for t in toks]
                if toks and "f0" in toks[0]:
                    kw["f0"] = [t["f0"] for t in toks]
                if toks and "energy" in toks[0]:
                    kw["energy"] = [t["energy"] for t in toks]
            else:
                kw["codeword_index"] = [t["codeword_index"] for t in toks]
                kw["latent"] = np.array([t["latent"] for t in toks], dtype=np.float64).reshape(-1, 3)
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad label record: {exc}") from exc
        return cls(**kw)


def write_labels(path, label_sets: Iterable[ProsodyLabelSet]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ls in label_sets:
            fh.write(ls.to_json())
            fh.write("\n")


def read_labels(path) -> List[ProsodyLabelSet]:
    with open(path, encoding="utf-8") as fh:
        return [ProsodyLabelSet.from_json(line) for line in fh if line.strip()]


def rule_labels_from_values(utterance_id, level, f0, energy,
                            f0_q: Quantizer, energy_q: Quantizer) -> ProsodyLabelSet:
    return ProsodyLabelSet(utterance_id, "rule_based", level,
                           f0_bin=np.atleast_1d(quantize(f0_q, f0)),
                           energy_bin=np.atleast_1d(quantize(energy_q, energy)),
                           f0=f0, energy=energy)


def extract_rule_labels(audio: AudioBuffer, alignment: UtteranceAlignment, level: str,
                        f0_q: Quantizer, energy_q: Quantizer,
                        acfg: AudioConfig = AudioConfig()) -> ProsodyLabelSet:
    """F0/energy tracking, token averaging and per-channel quantization."""
    track = analyze(audio, acfg).track
    if len(track) != alignment.n_frames:
        raise ShapeError(
            f"{alignment.utterance_id}: audio has {len(track)} frames, "
            f"alignment covers {alignment.n_frames}"
        )
    f0, energy = rule_token_values(track, alignment, level)
    return rule_labels_from_values(alignment.utterance_id, level, f0, energy, f0_q, energy_q)


def labels_by_id(label_sets: Sequence[ProsodyLabelSet]) -> dict:
    return {ls.utterance_id: ls for ls in label_sets}
