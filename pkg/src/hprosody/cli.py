"""``hprosody`` command line: extract, train, predict, evaluate, report, verify.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import re
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__, provenance
from .config import ProjectConfig
from .dsp import analyze, read_wav
from .errors import ConfigError, DataError, ProsodyError
from .labels import (KINDS, LEVELS, Quantizer, UtteranceAlignment, fit_quantizer,
                     load_alignment, load_quantizer, quantize, read_labels,
                     rule_labels_from_values, rule_token_values, save_quantizer, write_labels)
from .metrics import METRIC_COLUMNS, evaluate_audio, summarize
from .nn import checkpoint
from .predictor import (HierarchicalPredictor, PhonemeVocab, PredictorExample, PredictorSpec,
                        ProsodyPredictor, TrainReport, WordEmbeddings, channel_mae,
                        labels_from_prediction, predict_hierarchical, train_predictor)
from .vq import FrozenReferenceEncoder, VqExample, nearest_codewords, train_reference_encoder

log = logging.getLogger("hprosody")

MAX_SKIP_FRACTION = 0.05
SUMMARY_SCHEMA_VERSION = 1
KIND_CODE = {"R": "rule_based", "N": "neural_based"}
LEVEL_CODE = {"P": "phoneme", "W": "word"}
TARGET_GRAMMAR = ("ref-encoder | predictor:{P|W}+{R|N}[,{P|W}+{R|N}...] | "
                  "predictor:H+{R|N} | [predictor:]H(W+{R|N},P+{R|N})")


class _Interrupted(Exception):
    """Raised by the --stop-after hook once the requested checkpoint is on disk."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# Targets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Target:
    """A trainable model: a single-level predictor or a two-stage hierarchy."""

    mode: str  # "single" | "hier"
    level: str = "phoneme"
    kind: str = "rule_based"
    word_kind: str = "rule_based"

    @property
    def code(self) -> str:
        k = {v: c for c, v in KIND_CODE.items()}
        if self.mode == "hier":
            return f"H(W+{k[self.word_kind]},P+{k[self.kind]})"
        return f"{self.level[0].upper()}+{k[self.kind]}"

    @property
    def uses_words(self) -> bool:
        return self.mode == "hier" or self.level == "word"

    def slug(self, source: str) -> str:
        k = {v: c for c, v in KIND_CODE.items()}
        if self.mode == "hier":
            base = f"H-W+{k[self.word_kind]}-P+{k[self.kind]}"
        else:
            base = self.code
        return f"{base}.{source}" if self.uses_words else base

    @property
    def label_sets(self) -> List[Tuple[str, str]]:
        """(kind, level) label directories this target trains on."""
        if self.mode == "hier":
            return [(self.word_kind, "word"), (self.kind, "phoneme")]
        return [(self.kind, self.level)]


def parse_target(text: str) -> List[Target]:
    """Parse the ``--target`` grammar; ``ref-encoder`` yields an empty list."""
    s = text.replace(" ", "")
    if s == "ref-encoder":
        return []
    if s.startswith("predictor:"):
        s = s[len("predictor:"):]
    m = re.fullmatch(r"H\(W\+([RN]),P\+([RN])\)", s)
    if m:
        return [Target("hier", "phoneme", KIND_CODE[m.group(2)], KIND_CODE[m.group(1)])]
    m = re.fullmatch(r"H\+([RN])", s)
    if m:
        k = KIND_CODE[m.group(1)]
        return [Target("hier", "phoneme", k, k)]
    out = []
    for part in s.split(","):
        m = re.fullmatch(r"([PW])\+([RN])", part)
        if not m:
            raise ConfigError(f"unknown target {text!r}; valid grammar: {TARGET_GRAMMAR}")
        out.append(Target("single", LEVEL_CODE[m.group(1)], KIND_CODE[m.group(2)]))
    return out


# ---------------------------------------------------------------------------
# Corpus access
# ---------------------------------------------------------------------------


@dataclass
class Utterance:
    utterance_id: str
    alignment: UtteranceAlignment
    wav_path: Path
    alignment_path: Path
    analysis: object = None


class Corpus:
    """Loads split utterances, skipping (and counting) ones without alignments."""

    def __init__(self, cfg: ProjectConfig):
        self.cfg = cfg
        self.skipped = 0
        self.requested = 0

    def load(self, ids: Sequence[str], with_analysis: bool = False) -> List[Utterance]:
        acfg = self.cfg.audio
        hop = acfg.frame.hop_length
        out = []
        for uid in ids:
            self.requested += 1
            ap, wp = self.cfg.alignment_path(uid), self.cfg.wav_path(uid)
            if not ap.is_file():
                log.warning("%s: no alignment at %s, skipping", uid, ap)
                self.skipped += 1
                continue
            if not wp.is_file():
                log.warning("%s: no audio at %s, skipping", uid, wp)
                self.skipped += 1
                continue
            audio = read_wav(wp, acfg.sample_rate)
            if with_analysis:
                an = analyze(audio, acfg)
                n_frames = len(an.track)
            else:
                an = None
                n_frames = acfg.frame.n_frames(len(audio.samples))
            al = load_alignment(ap, n_frames, acfg.sample_rate, hop)
            out.append(Utterance(uid, al, wp, ap, an))
        return out

    def check_skips(self):
        if self.requested and self.skipped / self.requested > MAX_SKIP_FRACTION:
            raise DataError(f"skipped {self.skipped} of {self.requested} utterances "
                            f"(more than {MAX_SKIP_FRACTION:.0%})")


# ---------------------------------------------------------------------------
# Artifact layout
# ---------------------------------------------------------------------------


class Layout:
    def __init__(self, cfg: ProjectConfig):
        self.cfg = cfg
        self.root = cfg.artifacts

    def labels_dir(self, kind: str, level: str) -> Path:
        return self.root / "labels" / f"{kind}_{level}"

    def labels(self, kind: str, level: str, split: str) -> Path:
        return self.labels_dir(kind, level) / f"{split}.jsonl"

    def quantizer(self, level: str, channel: str) -> Path:
        return self.labels_dir("rule_based", level) / f"{channel}_quantizer.json"

    def model_dir(self, name: str) -> Path:
        return self.root / "models" / name

    @property
    def ref_encoder(self) -> Path:
        return self.model_dir("ref-encoder") / "checkpoint.json"

    def predictions_dir(self, name: str) -> Path:
        return self.root / "predictions" / name


class Run:
    """Context for one command: config, manifest template and written outputs."""

    def __init__(self, cfg: ProjectConfig, command: str):
        self.cfg = cfg
        self.layout = Layout(cfg)
        self.manifest = provenance.RunManifest(command, cfg.hash, cfg.seed, __version__)

    def inputs(self, paths):
        self.manifest.add_inputs(paths, self.cfg.root)

    def seal(self, outputs: Sequence[Path]):
        for p in outputs:
            self.manifest.write(p, self.cfg.root)
            log.info("wrote %s", p)


def _write_text(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _write_json(path: Path, obj):
    _write_text(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# extract
# ---------------------------------------------------------------------------


def cmd_extract(args, cfg: ProjectConfig) -> int:
    kind = {"rule": "rule_based", "neural": "neural_based"}.get(args.kind, args.kind)
    if kind not in KINDS:
        raise ConfigError(f"--kind must be rule or neural, got {args.kind!r}")
    level = args.level
    run = Run(cfg, f"extract --kind {args.kind} --level {level}")
    lay = run.layout
    corpus = Corpus(cfg)
    splits = {name: corpus.load(cfg.split(name), with_analysis=True) for name in args.splits}
    for utts in splits.values():
        run.inputs(p for u in utts for p in (u.wav_path, u.alignment_path))
    outputs = []
    if kind == "rule_based":
        values = {name: [rule_token_values(u.analysis.track, u.alignment, level) for u in utts]
                  for name, utts in splits.items()}
        fit_split = "train" if "train" in values else args.splits[0]
        if not values[fit_split]:
            raise DataError(f"no usable utterances in split {fit_split!r} to fit quantizers")
        qc = cfg.tree["quantizer"]
        f0_q = fit_quantizer(np.concatenate([v[0] for v in values[fit_split]]),
                             int(qc["n_bins"]), qc["f0_scale"])
        en_q = fit_quantizer(np.concatenate([v[1] for v in values[fit_split]]),
                             int(qc["n_bins"]), qc["energy_scale"])
        for channel, q in (("f0", f0_q), ("energy", en_q)):
            p = lay.quantizer(level, channel)
            p.parent.mkdir(parents=True, exist_ok=True)
            save_quantizer(p, q)
            outputs.append(p)
        for name, utts in splits.items():
            sets = [rule_labels_from_values(u.utterance_id, level, f0, en, f0_q, en_q)
                    for u, (f0, en) in zip(utts, values[name])]
            p = lay.labels(kind, level, name)
            p.parent.mkdir(parents=True, exist_ok=True)
            write_labels(p, sets)
            outputs.append(p)
    else:
        if not lay.ref_encoder.is_file():
            raise DataError(f"neural labels need a trained reference encoder at {lay.ref_encoder}; "
                            "run `hprosody train --target ref-encoder` first")
        run.inputs([lay.ref_encoder])
        enc = FrozenReferenceEncoder.load(lay.ref_encoder)
        for name, utts in splits.items():
            sets = [enc.labels(u.analysis.mel, u.alignment, level) for u in utts]
            p = lay.labels(kind, level, name)
            p.parent.mkdir(parents=True, exist_ok=True)
            write_labels(p, sets)
            outputs.append(p)
    run.seal(outputs)
    corpus.check_skips()
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _loss_csv(losses: Sequence[float], eval_losses, stage: str = "") -> str:
    evals = dict((int(s), v) for s, v in eval_losses)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["stage", "step", "loss", "eval_loss"])
    if 0 in evals:
        w.writerow([stage, 0, "", repr(evals[0])])
    for i, v in enumerate(losses, start=1):
        w.writerow([stage, i, repr(float(v)), repr(evals[i]) if i in evals else ""])
    return buf.getvalue()


def _ckpt_every(cfg: ProjectConfig, args) -> int:
    """Checkpoint cadence; with --stop-after it also lands on the stop step."""
    every = cfg.checkpoint_every
    return math.gcd(every, args.stop_after) if args.stop_after and every else every


def _train_ref_encoder(args, cfg: ProjectConfig) -> int:
    run = Run(cfg, "train --target ref-encoder")
    lay = run.layout
    corpus = Corpus(cfg)
    utts = corpus.load(cfg.split("train"), with_analysis=True)
    corpus.check_skips()
    run.inputs(p for u in utts for p in (u.wav_path, u.alignment_path))
    vcfg, tcfg = cfg.vq, cfg.vq_train
    data = [VqExample(u.analysis.mel.frames, u.alignment.durations(vcfg.level)) for u in utts]
    out_dir = lay.model_dir("ref-encoder")
    out_dir.mkdir(parents=True, exist_ok=True)
    resume_path = out_dir / "resume.json"
    resume = checkpoint.load(resume_path) if args.resume and resume_path.exists() else None
    if args.resume and resume is None:
        log.warning("no resume state at %s; starting from scratch", resume_path)

    def on_ckpt(sections):
        checkpoint.save(resume_path, sections)
        if args.stop_after and sections["training"]["step"] >= args.stop_after:
            raise _Interrupted()

    try:
        result = train_reference_encoder(data, vcfg, tcfg, resume=resume, on_checkpoint=on_ckpt,
                                         checkpoint_every=_ckpt_every(cfg, args))
    except _Interrupted:
        log.info("stopped after step %d; resume with --resume", args.stop_after)
        return 0
    for w in result.warnings:
        log.warning(w)
    ck = out_dir / "checkpoint.json"
    checkpoint.save(ck, result.encoder.state(step=tcfg.total_steps, seed=tcfg.rng_seed))
    loss = out_dir / "loss.csv"
    _write_text(loss, _loss_csv(result.losses, result.eval_losses))
    rep = out_dir / "report.json"
    _write_json(rep, {"target": "ref-encoder", "perplexities": [list(x) for x in result.perplexities],
                      "warnings": result.warnings, "seed": tcfg.rng_seed,
                      "config_hash": cfg.hash})
    resume_path.unlink(missing_ok=True)
    run.seal([ck, loss, rep])
    return 0


class _Features:
    """Turns alignments into predictor inputs for one word-feature source."""

    def __init__(self, cfg: ProjectConfig, source: str, vocab: Optional[PhonemeVocab] = None):
        self.source = source
        self.emb_path = cfg.embedding_path(source) if source != "phoneme" else None
        self.emb = WordEmbeddings.load(self.emb_path, source) if self.emb_path else None
        self.vocab = vocab

    def inputs(self, al: UtteranceAlignment, level: str):
        if level == "phoneme":
            return self.vocab.encode(al.symbols)
        if self.emb is None:
            raise ConfigError("word-level predictors need a word-feature source")
        return self.emb.lookup(al.word_texts)


def _load_labels(lay: Layout, kind: str, level: str, split: str, required: bool = True):
    p = lay.labels(kind, level, split)
    if not p.is_file():
        if required:
            short = "rule" if kind == "rule_based" else "neural"
            raise DataError(f"missing labels {p}; run `hprosody extract --kind {short} "
                            f"--level {level}` first")
        return None, p
    return {ls.utterance_id: ls for ls in read_labels(p)}, p


def _quantizers(lay: Layout, level: str):
    return (load_quantizer(lay.quantizer(level, "f0")),
            load_quantizer(lay.quantizer(level, "energy")))


def _examples(utts, labels, level, feats: _Features, quantizers):
    out = []
    for u in utts:
        ls = labels.get(u.utterance_id)
        if ls is None:
            log.warning("%s: no %s labels, skipping", u.utterance_id, level)
            continue
        inp = feats.inputs(u.alignment, level)
        if len(ls) != len(inp):
            raise DataError(f"{u.utterance_id}: {len(ls)} labels for {len(inp)} {level} tokens")
        y = ls.targets(*quantizers) if ls.kind == "rule_based" else ls.targets()
        out.append(PredictorExample(u.utterance_id, inp, y,
                                    phones_per_word=u.alignment.phones_per_word()))
    return out


def _word_label_ids(ls) -> np.ndarray:
    if ls.kind == "rule_based":
        return np.stack([ls.f0_bin, ls.energy_bin], axis=1)
    return ls.codeword_index


class _Trainer:
    """Shared state for training one predictor target."""

    def __init__(self, args, cfg: ProjectConfig, target: Target, source: str):
        self.args, self.cfg, self.target = args, cfg, target
        self.source = source if target.uses_words else "phoneme"
        self.slug = target.slug(self.source)
        self.run = Run(cfg, f"train --target {target.code}"
                       + (f" --word-features {self.source}" if target.uses_words else ""))
        self.lay = self.run.layout
        self.out_dir = self.lay.model_dir(self.slug)
        self.resume_path = self.out_dir / "resume.json"
        corpus = Corpus(cfg)
        self.train_utts = corpus.load(cfg.split("train"))
        self.test_utts = corpus.load(cfg.split("test"))
        corpus.check_skips()
        self.run.inputs(u.alignment_path for u in self.train_utts + self.test_utts)
        vocab = PhonemeVocab([s for u in self.train_utts for s in u.alignment.symbols])
        self.feats = _Features(cfg, self.source if target.uses_words else "phoneme", vocab)
        if self.feats.emb_path:
            self.run.inputs([self.feats.emb_path])
        self.quantizers: Dict[str, tuple] = {}
        self.codebook = None
        self.labels = {}
        for kind, level in target.label_sets:
            tr, p1 = _load_labels(self.lay, kind, level, "train")
            te, p2 = _load_labels(self.lay, kind, level, "test", required=False)
            self.labels[(kind, level)] = (tr, te or {})
            self.run.inputs([p1, p2])
            if kind == "rule_based":
                self.quantizers[level] = _quantizers(self.lay, level)
                self.run.inputs([self.lay.quantizer(level, "f0"), self.lay.quantizer(level, "energy")])
            elif self.codebook is None:
                if not self.lay.ref_encoder.is_file():
                    raise DataError(f"neural targets need {self.lay.ref_encoder}")
                self.codebook = np.asarray(
                    checkpoint.load(self.lay.ref_encoder)["codebook"]["codewords"])
                self.run.inputs([self.lay.ref_encoder])

    def spec(self, kind, level) -> PredictorSpec:
        pc = self.cfg.predictor
        in_dim = int(pc["phoneme_dim"]) if level == "phoneme" else self.feats.emb.dim
        return PredictorSpec(in_dim, 2 if kind == "rule_based" else 3, int(pc["hidden"]),
                             int(pc["kernel"]), float(pc["dropout"]))

    def new_model(self, kind, level, seed_offset=0) -> ProsodyPredictor:
        return ProsodyPredictor(kind, level, self.spec(kind, level), len(self.feats.vocab),
                                seed=self.cfg.seed + seed_offset)

    def examples(self, kind, level):
        tr, te = self.labels[(kind, level)]
        q = self.quantizers.get(level, (None, None))
        return (_examples(self.train_utts, tr, level, self.feats, q),
                _examples(self.test_utts, te, level, self.feats, q))

    def fit(self, model, stage, train_set, eval_set, resume_state, extra_state) -> TrainReport:
        tcfg = self.cfg.train_config(model.level)

        def on_ckpt(st):
            checkpoint.save(self.resume_path, dict(extra_state(), stage=stage,
                                                   model=model.state(), resume=st))
            if self.args.stop_after and st["step"] >= self.args.stop_after:
                raise _Interrupted()

        return train_predictor(model, train_set, tcfg, eval_set or None, resume=resume_state,
                               on_checkpoint=on_ckpt,
                               checkpoint_every=_ckpt_every(self.cfg, self.args))

    def finish(self, model_state: dict, reports: Dict[str, TrainReport]) -> int:
        ck = self.out_dir / "checkpoint.json"
        sections = {
            "target": self.target.code,
            "mode": self.target.mode,
            "word_features": self.source,
            "vocab": self.feats.vocab.symbols,
            "model": model_state,
            "quantizers": {lv: {"f0": q[0].to_dict(), "energy": q[1].to_dict()}
                           for lv, q in self.quantizers.items()},
            "seed": self.cfg.seed,
        }
        if self.codebook is not None:
            sections["codebook"] = self.codebook
        checkpoint.save(ck, sections)
        loss = self.out_dir / "loss.csv"
        text = None
        for stage, rep in reports.items():
            part = _loss_csv(rep.losses, rep.eval_losses, stage)
            text = part if text is None else text + part.split("\n", 1)[1]
        _write_text(loss, text)
        rep_path = self.out_dir / "report.json"
        _write_json(rep_path, {
            "target": self.target.code, "word_features": self.source, "seed": self.cfg.seed,
            "config_hash": self.cfg.hash,
            "stages": {s: dict(r.to_dict(), schedule=self.cfg.train_config(r.level).schedule,
                               learning_rate=self.cfg.train_config(r.level).learning_rate,
                               losses=None)
                       for s, r in reports.items()},
            "oov_count": self.feats.emb.oov_count if self.feats.emb else 0,
        })
        self.resume_path.unlink(missing_ok=True)
        self.run.seal([ck, loss, rep_path])
        return 0


def _train_single(tr: _Trainer, resume) -> int:
    t = tr.target
    train_set, eval_set = tr.examples(t.kind, t.level)
    if resume is not None:
        model = ProsodyPredictor.from_state(resume["model"])
        rs = resume["resume"]
    else:
        model, rs = tr.new_model(t.kind, t.level), None
    rep = tr.fit(model, "single", train_set, eval_set, rs, dict)
    return tr.finish({"single": model.state()}, {"single": rep})


def _hier_examples(tr: _Trainer, word_model: ProsodyPredictor, split_sets, word_labels):
    """Attach word labels (teacher-forced or predicted) to phoneme examples."""
    t = tr.target
    teacher = bool(tr.cfg.predictor.get("teacher_forcing", True))
    injection = tr.cfg.predictor["injection"]
    wq = tr.quantizers.get("word")
    word_train, word_test = tr.examples(t.word_kind, "word")
    by_id = {ex.utterance_id: ex for ex in word_train + word_test}
    out = []
    for examples in split_sets:
        kept = []
        for ex in examples:
            wex = by_id.get(ex.utterance_id)
            if wex is None:
                log.warning("%s: no word labels, skipping", ex.utterance_id)
                continue
            if injection == "project_continuous":
                src = wex.targets if teacher else word_model.predict(wex)
                lab = word_model.normalize(src)
            elif teacher:
                lab = _word_label_ids(word_labels[ex.utterance_id])
            else:
                pred = word_model.predict(wex)
                if t.word_kind == "rule_based":
                    lab = np.stack([np.atleast_1d(quantize(wq[0], pred[:, 0])),
                                    np.atleast_1d(quantize(wq[1], pred[:, 1]))], axis=1)
                else:
                    lab = nearest_codewords(pred, tr.codebook)
            ex.word_labels = lab
            kept.append(ex)
        out.append(kept)
    return out


def _train_hier(tr: _Trainer, resume) -> int:
    t = tr.target
    cfg = tr.cfg
    reports: Dict[str, TrainReport] = {}
    wtr, wte = tr.examples(t.word_kind, "word")
    if resume is not None and resume["stage"] == "phoneme":
        word_model = ProsodyPredictor.from_state(resume["word_model"])
        reports["word"] = TrainReport.from_dict(resume["word_report"])
    else:
        if resume is not None:
            word_model, rs = ProsodyPredictor.from_state(resume["model"]), resume["resume"]
        else:
            word_model, rs = tr.new_model(t.word_kind, "word", seed_offset=1), None
        reports["word"] = tr.fit(word_model, "word", wtr, wte, rs, dict)
        resume = None
    word_labels = {**tr.labels[(t.word_kind, "word")][1], **tr.labels[(t.word_kind, "word")][0]}
    ptr, pte = tr.examples(t.kind, "phoneme")
    ptr, pte = _hier_examples(tr, word_model, [ptr, pte], word_labels)
    if resume is not None:
        model = HierarchicalPredictor.from_state(resume["model"])
        rs = resume["resume"]
    else:
        model = HierarchicalPredictor(word_model, tr.new_model(t.kind, "phoneme"),
                                      cfg.predictor["injection"], seed=cfg.seed)
        rs = None
    word_state = word_model.state()
    word_report = reports["word"].to_dict()
    reports["phoneme"] = tr.fit(model, "phoneme", ptr, pte, rs,
                                lambda: {"word_model": word_state, "word_report": word_report})
    return tr.finish({"hierarchical": model.state()}, reports)


def cmd_train(args, cfg: ProjectConfig) -> int:
    targets = parse_target(args.target)
    if not targets:
        return _train_ref_encoder(args, cfg)
    source = args.word_features or cfg.tree["paths"]["word_features"]
    for target in targets:
        tr = _Trainer(args, cfg, target, source)
        tr.out_dir.mkdir(parents=True, exist_ok=True)
        resume = None
        if args.resume:
            if tr.resume_path.exists():
                resume = checkpoint.load(tr.resume_path)
            else:
                log.warning("no resume state at %s; starting from scratch", tr.resume_path)
        try:
            if target.mode == "hier":
                _train_hier(tr, resume)
            else:
                _train_single(tr, resume)
        except _Interrupted:
            log.info("%s: stopped after step %d; resume with --resume", tr.slug, args.stop_after)
    return 0


# ---------------------------------------------------------------------------
# predict
# ---------------------------------------------------------------------------


def _load_model_checkpoint(path: Path):
    if not path.is_file():
        raise DataError(f"no checkpoint at {path}; train the target first")
    return checkpoint.load(path)


def _ckpt_quantizers(ck, level):
    q = ck["quantizers"].get(level)
    return None if q is None else (Quantizer.from_dict(q["f0"]), Quantizer.from_dict(q["energy"]))


def _prediction_set(pred, kind, level, uid, ck):
    ls = labels_from_prediction(pred, kind, level, uid, _ckpt_quantizers(ck, level),
                                ck.get("codebook"))
    if kind == "neural_based":
        ls.extra = {"prediction": [[float(v) for v in row] for row in pred]}
    return ls


def cmd_predict(args, cfg: ProjectConfig) -> int:
    lay = Layout(cfg)
    if args.checkpoint:
        ck_path = Path(args.checkpoint)
        name = ck_path.parent.name
    else:
        if not args.target:
            raise ConfigError("predict needs --target or --checkpoint")
        targets = parse_target(args.target)
        if len(targets) != 1:
            raise ConfigError("predict takes exactly one predictor target")
        source = args.word_features or cfg.tree["paths"]["word_features"]
        name = targets[0].slug(source)
        ck_path = lay.model_dir(name) / "checkpoint.json"
    ck = _load_model_checkpoint(ck_path)
    if args.ids_file:
        p = Path(args.ids_file)
        ids = [ln.strip() for ln in p.read_text(encoding="utf-8").splitlines() if ln.strip()]
        split_name = p.stem
    else:
        ids = cfg.split(args.split)
        split_name = args.split
    run = Run(cfg, f"predict --checkpoint {provenance._rel(ck_path, cfg.root)} --split {split_name}")
    run.inputs([ck_path])
    corpus = Corpus(cfg)
    utts = corpus.load(ids)
    run.inputs(u.alignment_path for u in utts)
    source = ck["word_features"]
    feats = _Features(cfg, source, PhonemeVocab(ck["vocab"][1:]))
    if feats.emb_path:
        run.inputs([feats.emb_path])
    out_dir = lay.predictions_dir(name)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    meta = {"checkpoint": provenance._rel(ck_path, cfg.root), "target": ck["target"],
            "seed": ck["seed"], "config_hash": cfg.hash, "n_utterances": len(utts),
            "split": split_name}
    if ck["mode"] == "hier":
        model = HierarchicalPredictor.from_state(ck["model"]["hierarchical"])
        wq = _ckpt_quantizers(ck, "word")
        word_sets, phone_sets = [], []
        for u in utts:
            wex = PredictorExample(u.utterance_id, feats.inputs(u.alignment, "word"))
            pex = PredictorExample(u.utterance_id, feats.inputs(u.alignment, "phoneme"),
                                   phones_per_word=u.alignment.phones_per_word())
            wp, pp = predict_hierarchical(wex, pex, model, wq, ck.get("codebook"))
            word_sets.append(_prediction_set(wp, model.word.kind, "word", u.utterance_id, ck))
            phone_sets.append(_prediction_set(pp, model.kind, "phoneme", u.utterance_id, ck))
        for level, sets in (("word", word_sets), ("phoneme", phone_sets)):
            p = out_dir / f"{split_name}.{level}.jsonl"
            write_labels(p, sets)
            outputs.append(p)
        meta.update(kind={"word": model.word.kind, "phoneme": model.kind},
                    loss={"word": model.word.loss_name, "phoneme": model.loss_name})
    else:
        model = ProsodyPredictor.from_state(ck["model"]["single"])
        sets = []
        for u in utts:
            ex = PredictorExample(u.utterance_id, feats.inputs(u.alignment, model.level))
            sets.append(_prediction_set(model.predict(ex), model.kind, model.level,
                                        u.utterance_id, ck))
        p = out_dir / f"{split_name}.{model.level}.jsonl"
        write_labels(p, sets)
        outputs.append(p)
        meta.update(kind=model.kind, loss=model.loss_name)
    meta["oov_count"] = feats.emb.oov_count if feats.emb else 0
    mp = out_dir / f"{split_name}.run.json"
    _write_json(mp, meta)
    outputs.append(mp)
    run.seal(outputs)
    corpus.check_skips()
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def cmd_evaluate(args, cfg: ProjectConfig) -> int:
    pairs_path = Path(args.pairs)
    if not pairs_path.is_file():
        raise DataError(f"pair manifest {pairs_path} not found")
    with open(pairs_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"test_path", "reference_path"} <= set(reader.fieldnames):
            raise DataError(f"{pairs_path}: header must contain test_path,reference_path")
        rows = list(reader)
    base = pairs_path.resolve().parent
    out_dir = Path(args.out) if args.out else cfg.artifacts / "eval"
    out_dir.mkdir(parents=True, exist_ok=True)
    run = Run(cfg, f"evaluate --pairs {provenance._rel(pairs_path, cfg.root)}")
    run.inputs([pairs_path])
    acfg, delta = cfg.audio, cfg.gpe_threshold
    reports = []
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "test_path", "reference_path", *METRIC_COLUMNS, "n_covoiced", "n_frames",
                "flags"])
    for i, row in enumerate(rows):
        tp, rp = base / row["test_path"], base / row["reference_path"]
        try:
            test, ref = read_wav(tp, acfg.sample_rate), read_wav(rp, acfg.sample_rate)
            rep = evaluate_audio(test, ref, acfg, delta)
            run.inputs([tp, rp])
            flags = "undefined_f0" if rep.undefined else ""
            w.writerow([i, row["test_path"], row["reference_path"],
                        *(_fmt(getattr(rep, c)) for c in METRIC_COLUMNS),
                        rep.n_covoiced, rep.n_frames, flags])
        except ProsodyError as exc:
            log.warning("pair %d (%s, %s) failed: %s", i, tp, rp, exc)
            rep = None
            w.writerow([i, row["test_path"], row["reference_path"], *([""] * len(METRIC_COLUMNS)),
                        "", "", f"error: {type(exc).__name__}"])
        reports.append(rep)
    metrics_path = out_dir / "metrics.csv"
    _write_text(metrics_path, buf.getvalue())
    summary = dict(summarize(reports), schema_version=SUMMARY_SCHEMA_VERSION,
                   config_hash=cfg.hash, gpe_threshold=delta, columns=list(METRIC_COLUMNS))
    summary_path = out_dir / "summary.json"
    _write_json(summary_path, summary)
    run.seal([metrics_path, summary_path])
    return 0


# ---------------------------------------------------------------------------
# report-predictability
# ---------------------------------------------------------------------------


def cmd_report_predictability(args, cfg: ProjectConfig) -> int:
    if not args.sources:
        raise ConfigError("report-predictability needs at least one feature source")
    lay = Layout(cfg)
    corpus = Corpus(cfg)
    utts = corpus.load(cfg.split(args.split))
    corpus.check_skips()
    run = Run(cfg, "report-predictability --sources " + " ".join(args.sources))
    run.inputs(u.alignment_path for u in utts)
    kind = "rule_based"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["source", "level", "target", "f0_mae", "energy_mae", "n_utterances", "n_tokens"])
    for source in args.sources:
        if source == "phoneme":
            target = Target("single", "phoneme", kind)
        else:
            target = Target("single", "word", kind)
            cfg.embedding_path(source)
        name = target.slug(source)
        ck_path = lay.model_dir(name) / "checkpoint.json"
        if not ck_path.is_file():
            raise DataError(f"no trained predictor for source {source!r} (expected {ck_path}); "
                            f"run `hprosody train --target predictor:{target.code}"
                            + (f" --word-features {source}`" if source != "phoneme" else "`"))
        ck = checkpoint.load(ck_path)
        model = ProsodyPredictor.from_state(ck["model"]["single"])
        feats = _Features(cfg, ck["word_features"], PhonemeVocab(ck["vocab"][1:]))
        labels, lp = _load_labels(lay, kind, model.level, args.split)
        run.inputs([ck_path, lp] + ([feats.emb_path] if feats.emb_path else []))
        exs = _examples(utts, labels, model.level, feats, _ckpt_quantizers(ck, model.level))
        if not exs:
            raise DataError(f"no {args.split} utterances with labels for {source!r}")
        mae = channel_mae(model, exs)
        w.writerow([source, model.level, target.code, repr(float(mae[0])), repr(float(mae[1])),
                    len(exs), sum(len(e.inputs) for e in exs)])
    out = Path(args.out) if args.out else cfg.artifacts / "reports" / "predictability.csv"
    _write_text(out, buf.getvalue())
    run.seal([out])
    return 0


# ---------------------------------------------------------------------------
# verify / toy corpus
# ---------------------------------------------------------------------------


def cmd_verify(args, cfg: ProjectConfig) -> int:
    art = cfg.artifacts
    problems = provenance.verify_tree(art, cfg.root)
    n = provenance.count_manifests(art)
    for p in problems:
        print(f"FAIL {p}")
    if problems:
        raise DataError(f"provenance check failed: {len(problems)} problem(s) in {n} manifest(s)")
    print(f"ok: {n} manifest(s) verified")
    return 0


def cmd_make_toy_corpus(args) -> int:
    from .toy import write_toy_corpus
    path = write_toy_corpus(args.root, n_utterances=args.n_utterances, n_test=args.n_test,
                            seed=args.seed, quick=args.quick,
                            homophones=not args.unique_spellings)
    print(path)
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hprosody", description="Token-level prosody labels, predictors and metrics.")
    p.add_argument("--version", action="version", version=f"hprosody {__version__}")
    common = _Parser(add_help=False)
    common.add_argument("-c", "--config", default="config.yaml", help="project YAML config")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. train.word.total_steps=200")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("make-toy-corpus", help="write a seeded synthetic corpus")
    t.add_argument("root")
    t.add_argument("--n-utterances", type=int, default=50)
    t.add_argument("--n-test", type=int, default=10)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--quick", action="store_true", help="short training schedules")
    t.add_argument("--unique-spellings", action="store_true",
                   help="give every word its own phoneme string (no homophones)")
    t.add_argument("-v", "--verbose", action="store_true")

    e = sub.add_parser("extract", parents=[common], help="extract prosody labels")
    e.add_argument("--kind", required=True, choices=["rule", "neural"])
    e.add_argument("--level", required=True, choices=list(LEVELS))
    e.add_argument("--splits", nargs="+", default=["train", "test"])

    tr = sub.add_parser("train", parents=[common], help="train the reference encoder or predictors",
                        epilog=f"target grammar: {TARGET_GRAMMAR}")
    tr.add_argument("--target", required=True)
    tr.add_argument("--word-features", help="embedding source name for word-level inputs")
    tr.add_argument("--resume", action="store_true", help="continue from the last checkpoint")
    tr.add_argument("--stop-after", type=int, default=0, metavar="STEP",
                    help="stop once the checkpoint at STEP is written (simulated interruption)")

    pr = sub.add_parser("predict", parents=[common], help="predict labels from text-side inputs")
    pr.add_argument("--target")
    pr.add_argument("--checkpoint")
    pr.add_argument("--word-features")
    pr.add_argument("--split", default="test")
    pr.add_argument("--ids-file", help="utterance id list (overrides --split)")

    ev = sub.add_parser("evaluate", parents=[common], help="objective prosody metrics for WAV pairs")
    ev.add_argument("--pairs", required=True, help="CSV with test_path,reference_path")
    ev.add_argument("--out", help="output directory (default: <artifacts>/eval)")

    rp = sub.add_parser("report-predictability", parents=[common],
                        help="held-out F0/energy MAE per feature source")
    rp.add_argument("--sources", nargs="*", default=None,
                    help="'phoneme' and/or embedding source names")
    rp.add_argument("--split", default="test")
    rp.add_argument("--out")

    sub.add_parser("verify", parents=[common], help="check every artifact manifest")
    return p


COMMANDS = {
    "extract": cmd_extract,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "report-predictability": cmd_report_predictability,
    "verify": cmd_verify,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        if args.command == "make-toy-corpus":
            return cmd_make_toy_corpus(args)
        cfg = ProjectConfig.load(args.config, args.set)
        return COMMANDS[args.command](args, cfg)
    except ProsodyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
