"""Framing, STFT magnitudes, mel-spectrograms, frame energy and F0 tracking.

All framing is non-centred without padding, so every frame-level quantity
computed from the same audio and :class:`FrameConfig` has

    T = 1 + (n_samples - frame_length) // hop_length

frames, and frame ``t`` covers samples ``[t * hop, t * hop + frame_length)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.io import wavfile
from scipy.signal import fftconvolve
from scipy.signal.windows import get_window, nuttall

from .errors import ConfigError, EmptyInputError, FormatError
from .kernels import crossing_events


@dataclass(frozen=True)
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1:
            raise FormatError(f"expected mono samples, got shape {x.shape}")
        if x.size == 0:
            raise EmptyInputError("audio buffer is empty")
        if not np.all(np.isfinite(x)):
            raise FormatError("audio contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def scaled(self, gain: float) -> "AudioBuffer":
        return AudioBuffer(self.samples * gain, self.sample_rate)


@dataclass(frozen=True)
class FrameConfig:
    frame_length: int = 1024
    hop_length: int = 256
    fft_size: int = 1024
    window: str = "hann"

    def __post_init__(self):
        if not 0 < self.hop_length <= self.frame_length <= self.fft_size:
            raise ConfigError(
                "need 0 < hop_length <= frame_length <= fft_size, got "
                f"{self.hop_length}, {self.frame_length}, {self.fft_size}"
            )
        if self.window != "hann":
            raise ConfigError(f"unsupported window {self.window!r}")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.frame_length:
            raise EmptyInputError(
                f"audio has {n_samples} samples, shorter than one frame ({self.frame_length})"
            )
        return 1 + (n_samples - self.frame_length) // self.hop_length


@dataclass(frozen=True)
class MelConfig:
    n_mels: int = 80
    fmin: float = 0.0
    fmax: Optional[float] = None
    log: bool = True
    floor: float = 1e-5


@dataclass(frozen=True)
class F0Config:
    f0_floor: float = 71.0
    f0_ceil: float = 800.0
    channels_per_octave: float = 2.0
    # relative dispersion of the four interval estimates above which a
    # frame is declared unvoiced
    threshold: float = 0.1
    silence_db: float = -60.0


@dataclass
class Spectrogram:
    magnitudes: np.ndarray
    config: FrameConfig
    sample_rate: int

    @property
    def n_frames(self) -> int:
        return self.magnitudes.shape[0]


@dataclass
class MelSpectrogram:
    frames: np.ndarray
    config: MelConfig

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class FrameTrack:
    """Per-frame F0 (Hz, 0 when unvoiced), voicing flags and energy."""

    f0: np.ndarray
    voiced: np.ndarray
    energy: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        self.f0 = np.asarray(self.f0, dtype=np.float64)
        self.voiced = np.asarray(self.voiced, dtype=bool)
        if self.f0.shape != self.voiced.shape:
            raise FormatError("f0 and voiced must have the same length")
        if np.any((self.f0 > 0) != self.voiced):
            raise FormatError("f0 must be positive exactly on voiced frames")
        if self.energy is not None:
            self.energy = np.asarray(self.energy, dtype=np.float64)
            if self.energy.shape != self.f0.shape:
                raise FormatError("energy length differs from f0 length")

    def __len__(self):
        return self.f0.size


# ---------------------------------------------------------------------------
# Framing / STFT
# ---------------------------------------------------------------------------


def frame_signal(samples: np.ndarray, cfg: FrameConfig) -> np.ndarray:
    """Return a read-only (T, frame_length) view of the framed signal."""
    n = cfg.n_frames(samples.size)
    view = np.lib.stride_tricks.sliding_window_view(samples, cfg.frame_length)
    return view[:: cfg.hop_length][:n]


def stft(audio: AudioBuffer, cfg: FrameConfig = FrameConfig()) -> Spectrogram:
    frames = frame_signal(audio.samples, cfg)
    win = get_window(cfg.window, cfg.frame_length, fftbins=True)
    mags = np.abs(np.fft.rfft(frames * win, n=cfg.fft_size, axis=1))
    return Spectrogram(mags, cfg, audio.sample_rate)


def frame_energy(spec: Spectrogram) -> np.ndarray:
    """L2 norm of each STFT magnitude frame."""
    return np.sqrt(np.sum(np.square(spec.magnitudes), axis=1))


# ---------------------------------------------------------------------------
# Mel filterbank
# ---------------------------------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, fft_size: int, n_mels: int = 80,
                   fmin: float = 0.0, fmax: Optional[float] = None) -> np.ndarray:
    """Triangular filters with unit peak, shape ``(n_mels, fft_size // 2 + 1)``.

    Filter centres are equally spaced on the HTK mel scale between ``fmin``
    and ``fmax``.
    """
    nyquist = sample_rate / 2.0
    fmax = nyquist if fmax is None else float(fmax)
    if fmax > nyquist:
        raise ConfigError(f"fmax {fmax} Hz exceeds Nyquist {nyquist} Hz")
    if not 0.0 <= fmin < fmax:
        raise ConfigError(f"need 0 <= fmin < fmax, got fmin={fmin}, fmax={fmax}")
    if n_mels < 1:
        raise ConfigError("n_mels must be positive")

    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def mel_spectrogram(spec: Spectrogram, mel_cfg: MelConfig = MelConfig(),
                    filterbank: Optional[np.ndarray] = None) -> MelSpectrogram:
    if filterbank is None:
        filterbank = mel_filterbank(spec.sample_rate, spec.config.fft_size,
                                    mel_cfg.n_mels, mel_cfg.fmin, mel_cfg.fmax)
    if filterbank.shape[1] != spec.magnitudes.shape[1]:
        raise ConfigError(
            f"filterbank has {filterbank.shape[1]} bins, spectrogram has {spec.magnitudes.shape[1]}"
        )
    mel = spec.magnitudes @ filterbank.T
    if mel_cfg.log:
        mel = np.log(np.maximum(mel, mel_cfg.floor))
    return MelSpectrogram(mel, mel_cfg)


# ---------------------------------------------------------------------------
# F0 (DIO-style)
# ---------------------------------------------------------------------------


def _lowpass(x: np.ndarray, sample_rate: int, cutoff: float) -> np.ndarray:
    # Nuttall-window FIR, zero-phase; length ~ 2 * fs / cutoff like DIO.
    half = max(1, int(round(sample_rate / cutoff / 2.0)))
    h = nuttall(4 * half + 1, sym=True)
    return fftconvolve(x, h / h.sum(), mode="same")


def _interval_contour(y: np.ndarray, sample_rate: int, centres: np.ndarray):
    """Frequency estimate at ``centres`` from the four event-interval series.

    Returns (mean, relative dispersion); NaN where any series lacks coverage.
    """
    dy = np.diff(y)
    series = (
        crossing_events(y, False),
        crossing_events(y, True),
        crossing_events(dy, False) + 0.5,  # peaks
        crossing_events(dy, True) + 0.5,  # dips
    )
    est = np.full((4, centres.size), np.nan)
    for k, ev in enumerate(series):
        if ev.size < 3:
            continue
        loc = 0.5 * (ev[1:] + ev[:-1])
        freq = sample_rate / np.diff(ev)
        inside = (centres >= loc[0]) & (centres <= loc[-1])
        est[k, inside] = np.interp(centres[inside], loc, freq)
    mean = est.mean(axis=0)
    disp = est.std(axis=0) / mean
    return mean, disp


def band_cutoffs(f0_floor: float, f0_ceil: float, channels_per_octave: float) -> np.ndarray:
    n = int(np.ceil(np.log2(f0_ceil / f0_floor) * channels_per_octave)) + 1
    return f0_floor * 2.0 ** (np.arange(n) / channels_per_octave)


def estimate_f0(audio: AudioBuffer, cfg: FrameConfig = FrameConfig(),
                f0_floor: float = 71.0, f0_ceil: float = 800.0,
                f0_cfg: Optional[F0Config] = None) -> FrameTrack:
    """DIO-style F0 tracker on the STFT frame grid.

    The signal is low-passed at a ladder of cut-offs between ``f0_floor`` and
    ``f0_ceil``. For each band, intervals between successive falling and rising
    zero crossings, peaks and dips yield four frequency contours; their mean
    is the band's candidate and their relative spread its score. A candidate
    is admissible only if it lies in ``[cutoff / 2, cutoff]`` and inside the
    search range; the admissible candidate with the lowest spread wins.
    """
    if f0_cfg is None:
        f0_cfg = F0Config(f0_floor=f0_floor, f0_ceil=f0_ceil)
    lo, hi = f0_cfg.f0_floor, f0_cfg.f0_ceil
    nyquist = audio.sample_rate / 2.0
    if not 0 < lo < hi < nyquist:
        raise ConfigError(f"need 0 < f0_floor < f0_ceil < Nyquist, got {lo}, {hi}")

    x = audio.samples
    frames = frame_signal(x, cfg)
    n = frames.shape[0]
    centres = np.arange(n) * cfg.hop_length + (cfg.frame_length - 1) / 2.0

    best_f0 = np.zeros(n)
    best_score = np.full(n, np.inf)
    for cutoff in band_cutoffs(lo, hi, f0_cfg.channels_per_octave):
        f0, score = _interval_contour(_lowpass(x, audio.sample_rate, cutoff),
                                      audio.sample_rate, centres)
        ok = (np.isfinite(score) & (f0 >= cutoff / 2.0) & (f0 <= cutoff)
              & (f0 >= lo) & (f0 <= hi))
        better = ok & (score < best_score)
        best_f0[better] = f0[better]
        best_score[better] = score[better]

    rms = np.sqrt(np.mean(np.square(frames), axis=1))
    with np.errstate(divide="ignore"):
        level_db = 20.0 * np.log10(rms)
    voiced = (best_score <= f0_cfg.threshold) & (level_db >= f0_cfg.silence_db)
    return FrameTrack(np.where(voiced, best_f0, 0.0), voiced)


# ---------------------------------------------------------------------------
# Convenience
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AudioConfig:
    """Everything needed to turn a waveform into frame-level features."""

    sample_rate: int = 22050
    frame: FrameConfig = FrameConfig()
    mel: MelConfig = MelConfig()
    f0: F0Config = F0Config()


@dataclass
class Analysis:
    spectrogram: Spectrogram
    mel: MelSpectrogram
    track: FrameTrack


def analyze(audio: AudioBuffer, acfg: AudioConfig = AudioConfig()) -> Analysis:
    """Spectrogram, log-mel and a full F0/voicing/energy track in one pass."""
    if audio.sample_rate != acfg.sample_rate:
        raise ConfigError(
            f"audio sample rate {audio.sample_rate} differs from configured {acfg.sample_rate}"
        )
    spec = stft(audio, acfg.frame)
    mel = mel_spectrogram(spec, acfg.mel)
    track = estimate_f0(audio, acfg.frame, f0_cfg=acfg.f0)
    track.energy = frame_energy(spec)
    return Analysis(spec, mel, track)


def read_wav(path, expected_rate: Optional[int] = None) -> AudioBuffer:
    """Read mono 16-bit PCM or 32-bit float WAV into [-1, 1] samples."""
    try:
        rate, data = wavfile.read(str(path))
    except (ValueError, OSError) as exc:
        raise FormatError(f"cannot read WAV {path}: {exc}") from exc
    if data.ndim != 1:
        raise FormatError(f"{path}: expected mono WAV, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise FormatError(f"{path}: unsupported sample format {data.dtype}")
    if expected_rate is not None and rate != expected_rate:
        raise ConfigError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz")
    return AudioBuffer(samples, rate)


def write_wav(path, audio: AudioBuffer, subtype: str = "float32") -> None:
    if subtype == "float32":
        data = audio.samples.astype(np.float32)
    elif subtype == "int16":
        data = np.clip(np.round(audio.samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        raise ConfigError(f"unknown WAV subtype {subtype!r}")
    wavfile.write(str(path), audio.sample_rate, data)
