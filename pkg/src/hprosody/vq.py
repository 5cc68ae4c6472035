"""Vector-quantized reference encoder producing 3-dim token prosody latents.

The encoder runs two 3x3 conv2d layers (32 filters) over the mel-spectrogram,
flattens channels x mel bins per frame, mean-pools frames inside each token
span and projects to 3 dims with two linear layers. Latents are snapped to the
nearest of 256 codewords.

Training uses a stand-in for joint TTS training: a linear decoder must
reconstruct each token's mean (normalized) mel vector from the quantized
latent, so the codebook still acts as an information bottleneck.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, NumericalError, ShapeError, StateError
from .labels import ProsodyLabelSet, UtteranceAlignment
from .nn import Sequential, TrainConfig, adam_step, checkpoint, init_adam_state, mse_loss

log = logging.getLogger(__name__)

CODEBOOK_SIZE = 256
LATENT_DIM = 3


# ---------------------------------------------------------------------------
# Codebook
# ---------------------------------------------------------------------------


@dataclass
class Codebook:
    codewords: np.ndarray

    def __post_init__(self):
        cw = np.asarray(self.codewords, dtype=np.float64)
        if cw.shape != (CODEBOOK_SIZE, LATENT_DIM):
            raise ShapeError(f"codebook must be {CODEBOOK_SIZE}x{LATENT_DIM}, got {cw.shape}")
        if not np.all(np.isfinite(cw)):
            raise ShapeError("codebook has non-finite entries")
        self.codewords = cw

    def __len__(self):
        return self.codewords.shape[0]


def _table(cb) -> np.ndarray:
    return cb.codewords if isinstance(cb, Codebook) else np.asarray(cb, dtype=np.float64)


def nearest_codewords(z, cb) -> np.ndarray:
    """Index of the nearest codeword (squared L2) for each row of ``z``; ties -> lowest index."""
    table = _table(cb)
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    d = np.sum(np.square(z[:, None, :] - table[None, :, :]), axis=-1)
    return np.argmin(d, axis=1)


def quantize_latent(z, cb) -> Tuple[int, np.ndarray]:
    """Nearest codeword to one latent vector: ``(index, codeword)``."""
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ShapeError("latent has non-finite entries")
    idx = int(nearest_codewords(z[None, :], cb)[0])
    return idx, _table(cb)[idx].copy()


@dataclass
class VqLossTerms:
    codebook_loss: float
    commitment_loss: float
    beta: float

    @property
    def total(self) -> float:
        return self.codebook_loss + self.beta * self.commitment_loss


def vq_loss(z, codeword, beta: float = 0.25) -> VqLossTerms:
    """Codebook and commitment terms (summed squared distance).

    Numerically both equal ``||z - codeword||^2``; they differ only in which
    side receives the gradient (see :func:`vq_loss_grads`).
    """
    d = float(np.sum(np.square(np.asarray(z, dtype=np.float64) - codeword)))
    return VqLossTerms(d, d, float(beta))


def vq_loss_grads(z, codeword, beta: float = 0.25):
    """Gradients of ``codebook_loss + beta * commitment_loss``.

    Returns ``(d/dz, d/dcodeword)``: the codebook term only moves the codeword,
    the commitment term only moves the encoder output.
    """
    diff = np.asarray(z, dtype=np.float64) - codeword
    return 2.0 * beta * diff, -2.0 * diff


def straight_through(z, codeword):
    """Forward value is the codeword; the backward pass copies the gradient to ``z``."""
    q = np.asarray(codeword, dtype=np.float64).copy()

    def backward(g_q):
        return np.asarray(g_q, dtype=np.float64).copy()

    return q, backward


def perplexity(counts) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(math.exp(-np.sum(p * np.log(p))))


def kmeans(x: np.ndarray, k: int, seed: int = 0, iters: int = 25) -> np.ndarray:
    """Plain Lloyd iterations; empty clusters keep their previous centre."""
    rng = np.random.default_rng(seed)
    n = x.shape[0]
    if n >= k:
        centres = x[rng.choice(n, size=k, replace=False)].copy()
    else:
        centres = x[rng.choice(n, size=k, replace=True)].copy()
        scale = float(np.std(x)) or 1.0
        centres += rng.normal(0.0, 1e-3 * scale, centres.shape)
    for _ in range(iters):
        assign = nearest_codewords(x, centres)
        for j in range(k):
            members = x[assign == j]
            if members.size:
                centres[j] = members.mean(axis=0)
    return centres


# ---------------------------------------------------------------------------
# Reference encoder
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VqConfig:
    level: str = "phoneme"
    filters: int = 32
    hidden_dim: int = 64
    dropout: float = 0.2
    beta: float = 0.25
    warmup_steps: int = 500
    reseed_every: int = 500
    kmeans_iters: int = 25

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d or {}) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown vq-config keys {sorted(unknown)}")
        return cls(**(d or {}))


def encoder_specs(n_mels: int, cfg: VqConfig) -> List[dict]:
    f = cfg.filters
    return [
        {"kind": "conv2d", "in_ch": 1, "out_ch": f, "kernel": [3, 3], "stride": [1, 1]},
        {"kind": "relu"},
        {"kind": "dropout", "rate": cfg.dropout},
        {"kind": "conv2d", "in_ch": f, "out_ch": f, "kernel": [3, 3], "stride": [1, 1]},
        {"kind": "relu"},
        {"kind": "dropout", "rate": cfg.dropout},
        {"kind": "flatten"},
        {"kind": "token_mean_pool"},
        {"kind": "linear", "in_dim": f * n_mels, "out_dim": cfg.hidden_dim},
        {"kind": "relu"},
        {"kind": "dropout", "rate": cfg.dropout},
        {"kind": "linear", "in_dim": cfg.hidden_dim, "out_dim": LATENT_DIM},
    ]


class ReferenceEncoder:
    """Encoder network, proxy decoder, codebook and mel normalization stats."""

    def __init__(self, n_mels: int, cfg: VqConfig = VqConfig(), seed: int = 0):
        self.n_mels = int(n_mels)
        self.cfg = cfg
        self.net = Sequential.from_specs(encoder_specs(self.n_mels, cfg), seed=seed)
        self.decoder = Sequential.from_specs(
            [{"kind": "linear", "in_dim": LATENT_DIM, "out_dim": self.n_mels}], seed=seed + 1)
        self.codewords = np.zeros((CODEBOOK_SIZE, LATENT_DIM))
        self.mel_mean = np.zeros(self.n_mels)
        self.mel_std = np.ones(self.n_mels)
        self.quantizing = False

    @property
    def codebook(self) -> Codebook:
        return Codebook(self.codewords)

    def normalize(self, mel) -> np.ndarray:
        mel = np.asarray(getattr(mel, "frames", mel), dtype=np.float64)
        if mel.ndim != 2 or mel.shape[1] != self.n_mels:
            raise ShapeError(f"expected (T, {self.n_mels}) mel, got {mel.shape}")
        return (mel - self.mel_mean) / self.mel_std

    def encode(self, mel, durations, train: bool = False) -> np.ndarray:
        x = self.normalize(mel)
        durations = np.asarray(durations, dtype=np.int64)
        if durations.sum() != x.shape[0]:
            raise ShapeError(f"durations sum to {durations.sum()}, mel has {x.shape[0]} frames")
        return self.net.forward(x[None], train=train, ctx={"durations": durations})

    def state(self, optimizer=None, step=0, seed=0, extra=None) -> dict:
        sections = {
            "ref_encoder": checkpoint.network_state(self.net, step=step, seed=seed),
            "ref_decoder": checkpoint.network_state(self.decoder),
            "codebook": {"codewords": self.codewords},
            "mel_stats": {"mean": self.mel_mean, "std": self.mel_std},
            "vq_config": dict(self.cfg.to_dict(), n_mels=self.n_mels,
                              quantizing=self.quantizing),
        }
        if optimizer is not None:
            sections["optimizer"] = optimizer
        if extra:
            sections.update(extra)
        return sections

    @classmethod
    def from_state(cls, sections: dict) -> "ReferenceEncoder":
        vc = dict(sections["vq_config"])
        n_mels = vc.pop("n_mels")
        quantizing = vc.pop("quantizing", True)
        enc = cls.__new__(cls)
        enc.n_mels = int(n_mels)
        enc.cfg = VqConfig.from_dict(vc)
        enc.net = checkpoint.restore_network(sections["ref_encoder"])
        enc.decoder = checkpoint.restore_network(sections["ref_decoder"])
        enc.codewords = np.asarray(sections["codebook"]["codewords"], dtype=np.float64)
        enc.mel_mean = np.asarray(sections["mel_stats"]["mean"], dtype=np.float64)
        enc.mel_std = np.asarray(sections["mel_stats"]["std"], dtype=np.float64)
        enc.quantizing = bool(quantizing)
        return enc


def reference_encode(mel, alignment: UtteranceAlignment, level: str,
                     params: ReferenceEncoder, mode: str = "eval") -> np.ndarray:
    """Per-token 3-dim latents (before quantization)."""
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    return params.encode(mel, alignment.durations(level), train=(mode == "train"))


class FrozenReferenceEncoder:
    """Read-only view used for label extraction once encoder training is done."""

    def __init__(self, encoder: ReferenceEncoder):
        if not encoder.quantizing:
            raise StateError("reference encoder has no trained codebook yet")
        self._enc = encoder
        encoder.net.freeze()
        encoder.decoder.freeze()
        for arr in (encoder.codewords, encoder.mel_mean, encoder.mel_std):
            arr.flags.writeable = False

    @property
    def level(self) -> str:
        return self._enc.cfg.level

    @property
    def codebook(self) -> Codebook:
        return self._enc.codebook

    @property
    def n_mels(self) -> int:
        return self._enc.n_mels

    def encode(self, mel, durations) -> np.ndarray:
        return self._enc.encode(mel, durations, train=False)

    def labels(self, mel, alignment: UtteranceAlignment, level: Optional[str] = None) -> ProsodyLabelSet:
        level = level or self.level
        z = self.encode(mel, alignment.durations(level))
        idx = nearest_codewords(z, self._enc.codewords)
        return ProsodyLabelSet(alignment.utterance_id, "neural_based", level,
                               codeword_index=idx, latent=self._enc.codewords[idx])

    @classmethod
    def load(cls, path) -> "FrozenReferenceEncoder":
        return cls(ReferenceEncoder.from_state(checkpoint.load(path)))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class VqExample:
    mel: np.ndarray  # (T, n_mels)
    durations: np.ndarray  # per token at the encoder level


@dataclass
class VqTrainResult:
    encoder: ReferenceEncoder
    losses: List[float] = field(default_factory=list)
    eval_losses: List[Tuple[int, float]] = field(default_factory=list)
    perplexities: List[Tuple[int, float]] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)

    @property
    def codebook(self) -> Codebook:
        return self.encoder.codebook


def _token_targets(enc: ReferenceEncoder, ex: VqExample) -> np.ndarray:
    x = enc.normalize(ex.mel)
    starts = np.concatenate(([0], np.cumsum(ex.durations)[:-1]))
    return np.add.reduceat(x, starts, axis=0) / ex.durations[:, None]


def _utterance_loss(enc: ReferenceEncoder, ex: VqExample, target, train: bool, backward: bool,
                    cb_grad: Optional[np.ndarray] = None, usage: Optional[np.ndarray] = None):
    z = enc.encode(ex.mel, ex.durations, train=train)
    n = z.shape[0]
    if enc.quantizing:
        idx = nearest_codewords(z, enc.codewords)
        c = enc.codewords[idx]
        q, st_backward = straight_through(z, c)
        if usage is not None:
            np.add.at(usage, idx, 1)
    else:
        q, st_backward = z, (lambda g: g)
    pred = enc.decoder.forward(q, train=train)
    recon, g_pred = mse_loss(pred, target)
    loss = recon
    if enc.quantizing:
        terms = vq_loss(z, c, enc.cfg.beta)
        loss += terms.total / n
    if not backward:
        return loss, z
    g_q = enc.decoder.backward(g_pred)
    g_z = st_backward(g_q)
    if enc.quantizing:
        gz_vq, gc_vq = vq_loss_grads(z, c, enc.cfg.beta)
        g_z = g_z + gz_vq / n
        np.add.at(cb_grad, idx, gc_vq / n)
    enc.net.backward(g_z)
    return loss, z


def dataset_loss(enc: ReferenceEncoder, data: Sequence[VqExample]) -> float:
    total = 0.0
    for ex in data:
        loss, _ = _utterance_loss(enc, ex, _token_targets(enc, ex), train=False, backward=False)
        total += loss
    return total / len(data)


def _all_latents(enc, data):
    return np.concatenate([enc.encode(ex.mel, ex.durations) for ex in data], axis=0)


def train_reference_encoder(data: Sequence[VqExample], cfg: VqConfig = VqConfig(),
                            train_cfg: TrainConfig = TrainConfig(), resume: Optional[dict] = None,
                            on_checkpoint=None, checkpoint_every: int = 0) -> VqTrainResult:
    """Fit encoder, proxy decoder and codebook on ``data``.

    The first ``cfg.warmup_steps`` steps skip quantization; the codebook is then
    initialized by k-means over the latents of the whole set. Codewords left
    unused for ``cfg.reseed_every`` steps are reseeded to random recent latents.
    ``resume`` takes the sections of a checkpoint written via ``on_checkpoint``.
    """
    if not data:
        raise ConfigError("reference-encoder training needs at least one utterance")
    n_mels = data[0].mel.shape[1]
    seed = train_cfg.rng_seed
    if resume is None:
        enc = ReferenceEncoder(n_mels, cfg, seed=seed)
        frames = np.concatenate([ex.mel for ex in data], axis=0)
        enc.mel_mean = frames.mean(axis=0)
        enc.mel_std = frames.std(axis=0) + 1e-5
        opt = {"net": init_adam_state(enc.net.named_params()),
               "dec": init_adam_state(enc.decoder.named_params()),
               "cb": init_adam_state({"codewords": enc.codewords})}
        start = 1
        result = VqTrainResult(enc)
        usage = np.zeros(CODEBOOK_SIZE, dtype=np.int64)
        epoch_usage = np.zeros(CODEBOOK_SIZE, dtype=np.int64)
        result.eval_losses.append((0, dataset_loss(enc, data)))
    else:
        enc = ReferenceEncoder.from_state(resume)
        opt = resume["optimizer"]
        tr = resume["training"]
        start = int(tr["step"]) + 1
        result = VqTrainResult(enc, list(tr["losses"]), [tuple(x) for x in tr["eval_losses"]],
                               [tuple(x) for x in tr["perplexities"]], list(tr["warnings"]))
        usage = np.asarray(tr["usage"], dtype=np.int64)
        epoch_usage = np.asarray(tr["epoch_usage"], dtype=np.int64)

    targets = [_token_targets(enc, ex) for ex in data]
    steps_per_epoch = max(1, math.ceil(len(data) / train_cfg.batch_size))
    for step in range(start, train_cfg.total_steps + 1):
        if step == cfg.warmup_steps + 1 and not enc.quantizing:
            enc.codewords[...] = kmeans(_all_latents(enc, data), CODEBOOK_SIZE,
                                        seed=seed, iters=cfg.kmeans_iters)
            enc.quantizing = True
            usage[:] = 0
            epoch_usage[:] = 0
        rng = np.random.default_rng([seed, step])
        batch = rng.integers(0, len(data), size=train_cfg.batch_size)
        enc.net.zero_grad()
        enc.decoder.zero_grad()
        cb_grad = np.zeros_like(enc.codewords)
        step_loss = 0.0
        recent = []
        for b in batch:
            loss, z = _utterance_loss(enc, data[b], targets[b], train=True, backward=True,
                                      cb_grad=cb_grad, usage=usage)
            step_loss += loss
            recent.append(z)
        if enc.quantizing:
            epoch_usage += np.bincount(nearest_codewords(np.concatenate(recent), enc.codewords),
                                       minlength=CODEBOOK_SIZE)
        scale = 1.0 / len(batch)
        lr = train_cfg.lr(step)
        for key, model in (("net", enc.net), ("dec", enc.decoder)):
            grads = {k: g * scale for k, g in model.named_grads().items()}
            adam_step(model.named_params(), grads, opt[key], train_cfg, step, lr)
        if enc.quantizing:
            adam_step({"codewords": enc.codewords}, {"codewords": cb_grad * scale}, opt["cb"],
                      train_cfg, step, lr)
        result.losses.append(step_loss * scale)
        if not math.isfinite(result.losses[-1]):
            raise NumericalError(f"reference-encoder loss is {result.losses[-1]} at step {step}")

        if enc.quantizing and (step - cfg.warmup_steps) % cfg.reseed_every == 0:
            dead = np.flatnonzero(usage == 0)
            if dead.size:
                pool = np.concatenate(recent)
                pick = rng.integers(0, pool.shape[0], size=dead.size)
                enc.codewords[dead] = pool[pick]
                for mom in ("m", "v"):
                    opt["cb"][mom]["codewords"][dead] = 0.0
                log.debug("step %d: reseeded %d dead codewords", step, dead.size)
            usage[:] = 0
        if step % steps_per_epoch == 0 and enc.quantizing:
            result.perplexities.append((step, perplexity(epoch_usage)))
            epoch_usage[:] = 0
        if step % train_cfg.eval_every == 0 or step == train_cfg.total_steps:
            result.eval_losses.append((step, dataset_loss(enc, data)))
        if on_checkpoint is not None and checkpoint_every and step % checkpoint_every == 0:
            on_checkpoint(_training_sections(enc, opt, step, seed, result, usage, epoch_usage))

    if not enc.quantizing:
        enc.codewords[...] = kmeans(_all_latents(enc, data), CODEBOOK_SIZE,
                                    seed=seed, iters=cfg.kmeans_iters)
        enc.quantizing = True
        result.warnings.append("training ended inside the warm-up; codebook fitted by k-means only")
    final_ppl = perplexity(np.bincount(nearest_codewords(_all_latents(enc, data), enc.codewords),
                                       minlength=CODEBOOK_SIZE))
    result.perplexities.append((train_cfg.total_steps, final_ppl))
    if final_ppl < 2.0:
        msg = f"codebook collapse: final perplexity {final_ppl:.3f} < 2"
        log.warning(msg)
        result.warnings.append(msg)
    return result


def _training_sections(enc, opt, step, seed, result, usage, epoch_usage) -> dict:
    return enc.state(optimizer=opt, step=step, seed=seed, extra={"training": {
        "step": step, "losses": result.losses, "eval_losses": [list(x) for x in result.eval_losses],
        "perplexities": [list(x) for x in result.perplexities], "warnings": result.warnings,
        "usage": usage.copy(), "epoch_usage": epoch_usage.copy(),
    }})
