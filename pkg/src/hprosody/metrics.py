"""Objective prosody similarity between a test utterance and a reference.

The reference plays the ground-truth role (``f``, ``v``, ``e``) and the test
utterance the synthesized one (``f'``, ``v'``, ``e'``). Both are put on a
common time axis by DTW over their mel-spectrograms first.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable, List, Optional

import numpy as np
from scipy.spatial.distance import cdist

from . import kernels
from .dsp import AudioBuffer, AudioConfig, FrameTrack, MelSpectrogram, analyze
from .errors import EmptyInputError, ShapeError

GPE_THRESHOLD = 0.2
METRIC_COLUMNS = ("gpe", "vde", "ffe", "f_mae", "e_mae")


@dataclass
class AlignmentPath:
    pairs: np.ndarray  # (L, 2) int64
    cost: float

    def __len__(self):
        return self.pairs.shape[0]


def _frames(x) -> np.ndarray:
    if isinstance(x, MelSpectrogram):
        x = x.frames
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise EmptyInputError(f"expected a non-empty (T, n_mels) matrix, got shape {x.shape}")
    return x


def frame_distances(a, b) -> np.ndarray:
    """Euclidean distance between every frame of ``a`` and every frame of ``b``."""
    a, b = _frames(a), _frames(b)
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"mel dimensionality differs: {a.shape[1]} vs {b.shape[1]}")
    return cdist(a, b, "euclidean")


def dtw_from_cost(cost: np.ndarray) -> AlignmentPath:
    acc = kernels.dtw_accumulate(cost)
    path = kernels.dtw_backtrack(acc)
    return AlignmentPath(path, float(acc[-1, -1]))


def dtw_align(mel_a, mel_b) -> AlignmentPath:
    """Minimum-cost monotone alignment with steps (1,1), (1,0), (0,1).

    The band is unconstrained. On equal-cost alternatives the backtrack
    prefers the diagonal step, then (1,0), then (0,1).
    """
    return dtw_from_cost(frame_distances(mel_a, mel_b))


@dataclass
class AlignedTrackPair:
    f: np.ndarray
    f_prime: np.ndarray
    v: np.ndarray
    v_prime: np.ndarray
    e: np.ndarray
    e_prime: np.ndarray

    def __post_init__(self):
        n = len(self.f)
        if any(len(a) != n for a in (self.f_prime, self.v, self.v_prime, self.e, self.e_prime)):
            raise ShapeError("aligned tracks must share one length")
        if n == 0:
            raise EmptyInputError("aligned tracks are empty")

    def __len__(self):
        return len(self.f)

    @property
    def covoiced(self) -> np.ndarray:
        return self.v & self.v_prime


def apply_alignment(path: AlignmentPath, track_a: FrameTrack, track_b: FrameTrack) -> AlignedTrackPair:
    i, j = path.pairs[:, 0], path.pairs[:, 1]
    if i.max() >= len(track_a) or j.max() >= len(track_b):
        raise ShapeError(
            f"path spans ({i.max() + 1}, {j.max() + 1}) frames, "
            f"tracks have ({len(track_a)}, {len(track_b)})"
        )
    if i.max() != len(track_a) - 1 or j.max() != len(track_b) - 1:
        raise ShapeError("path does not cover both tracks (length mismatch with the mels)")
    ea = track_a.energy if track_a.energy is not None else np.zeros(len(track_a))
    eb = track_b.energy if track_b.energy is not None else np.zeros(len(track_b))
    return AlignedTrackPair(track_a.f0[i], track_b.f0[j], track_a.voiced[i], track_b.voiced[j],
                            ea[i], eb[j])


def _gross_errors(pair: AlignedTrackPair, delta: float) -> np.ndarray:
    return pair.covoiced & (np.abs(pair.f - pair.f_prime) > delta * pair.f)


def gpe(pair: AlignedTrackPair, delta: float = GPE_THRESHOLD) -> Optional[float]:
    """Share of co-voiced frames whose F0 deviates by more than ``delta`` (relative).

    ``None`` when no frame is voiced in both tracks.
    """
    n = int(pair.covoiced.sum())
    if n == 0:
        return None
    return float(_gross_errors(pair, delta).sum() / n)


def vde(pair: AlignedTrackPair) -> float:
    return float(np.count_nonzero(pair.v != pair.v_prime) / len(pair))


def ffe(pair: AlignedTrackPair, delta: float = GPE_THRESHOLD) -> float:
    errors = np.count_nonzero(pair.v != pair.v_prime) + np.count_nonzero(_gross_errors(pair, delta))
    return float(errors / len(pair))


def f_mae(pair: AlignedTrackPair) -> Optional[float]:
    cv = pair.covoiced
    n = int(cv.sum())
    if n == 0:
        return None
    return float(np.sum(np.abs(pair.f - pair.f_prime) * cv) / n)


def e_mae(pair: AlignedTrackPair) -> float:
    return float(np.sum(np.abs(pair.e - pair.e_prime)) / len(pair))


@dataclass
class MetricReport:
    gpe: Optional[float]
    vde: float
    ffe: float
    f_mae: Optional[float]
    e_mae: float
    n_covoiced: int
    n_frames: int

    @property
    def undefined(self) -> bool:
        return self.gpe is None or self.f_mae is None

    def to_dict(self) -> dict:
        return asdict(self)


def score_pair(pair: AlignedTrackPair, delta: float = GPE_THRESHOLD) -> MetricReport:
    return MetricReport(gpe(pair, delta), vde(pair), ffe(pair, delta), f_mae(pair), e_mae(pair),
                        int(pair.covoiced.sum()), len(pair))


def evaluate_audio(test: AudioBuffer, reference: AudioBuffer,
                   acfg: AudioConfig = AudioConfig(), delta: float = GPE_THRESHOLD) -> MetricReport:
    """Full pipeline: analysis of both waveforms, mel DTW, then the five metrics."""
    ref = analyze(reference, acfg)
    syn = analyze(test, acfg)
    path = dtw_align(ref.mel, syn.mel)
    return score_pair(apply_alignment(path, ref.track, syn.track), delta)


def summarize(reports: Iterable[Optional[MetricReport]]) -> dict:
    """Corpus means; undefined values and failed pairs are excluded and counted."""
    reports = list(reports)
    ok = [r for r in reports if r is not None]
    out = {"n_pairs": len(reports), "n_failed": len(reports) - len(ok), "means": {},
           "n_defined": {}}
    for col in METRIC_COLUMNS:
        vals: List[float] = [getattr(r, col) for r in ok if getattr(r, col) is not None]
        out["n_defined"][col] = len(vals)
        out["means"][col] = float(np.mean(vals)) if vals else None
    return out
