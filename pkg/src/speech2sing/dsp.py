"""Signal-processing kernels: resampling, STFT, mel features and Griffin-Lim.

Everything here is a pure function over numpy arrays. Spectrogram matrices are
laid out as (bins, frames).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np
from scipy import signal

SAMPLE_RATE = 22050
FFT_SIZE = 1024
# 12.5 ms at 22050 Hz is 275.625 samples.
HOP = 276
N_MELS = 80
FLOOR_EPS = 1e-5
GL_ITERATIONS = 60


@dataclass(frozen=True)
class DSPConfig:
    sample_rate: int = SAMPLE_RATE
    fft_size: int = FFT_SIZE
    hop: int = HOP
    n_mels: int = N_MELS
    fmin: float = 0.0
    fmax: float | None = None
    floor_eps: float = FLOOR_EPS
    gl_iterations: int = GL_ITERATIONS

    @property
    def mel_fmax(self) -> float:
        return self.sample_rate / 2 if self.fmax is None else self.fmax

    @property
    def log_floor(self) -> float:
        return math.log(self.floor_eps)


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class LinearSpectrogram:
    magnitudes: np.ndarray
    fft_size: int
    hop: int
    sample_rate: int

    @property
    def n_frames(self) -> int:
        return self.magnitudes.shape[1]


@dataclass
class LogMelSpectrogram:
    values: np.ndarray
    hop: int = HOP
    sample_rate: int = SAMPLE_RATE

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]

    def with_values(self, values: np.ndarray) -> LogMelSpectrogram:
        return LogMelSpectrogram(values, self.hop, self.sample_rate)


def resample_audio(wave: Waveform, dst_rate: int) -> Waveform:
    """Band-limited polyphase resampling to ``dst_rate``."""
    if dst_rate <= 0:
        raise ValueError(f"dst_rate must be positive, got {dst_rate}")
    if dst_rate == wave.sample_rate:
        return Waveform(wave.samples.copy(), dst_rate)
    if len(wave) == 0:
        return Waveform(np.zeros(0), dst_rate)
    ratio = Fraction(dst_rate, wave.sample_rate)
    out = signal.resample_poly(wave.samples, ratio.numerator, ratio.denominator)
    n_out = math.ceil(len(wave) * dst_rate / wave.sample_rate)
    return Waveform(out[:n_out], dst_rate)


def n_stft_frames(n_samples: int, hop: int) -> int:
    return max(1, math.ceil(n_samples / hop))


def _pad_centered(x: np.ndarray, fft_size: int, hop: int) -> np.ndarray:
    n_frames = n_stft_frames(len(x), hop)
    half = fft_size // 2
    if len(x) == 0:
        x = np.zeros(1)
    if len(x) > 1:
        x = np.pad(x, half, mode="reflect")
    else:
        x = np.pad(x, half)
    needed = (n_frames - 1) * hop + fft_size
    if len(x) < needed:
        x = np.pad(x, (0, needed - len(x)))
    return x[:needed]


def _frames(x: np.ndarray, fft_size: int, hop: int) -> np.ndarray:
    n_frames = 1 + (len(x) - fft_size) // hop
    idx = np.arange(fft_size)[None, :] + hop * np.arange(n_frames)[:, None]
    return x[idx]


@lru_cache(maxsize=8)
def _hann(fft_size: int) -> np.ndarray:
    return signal.get_window("hann", fft_size, fftbins=True)


def _stft_padded(x: np.ndarray, fft_size: int, hop: int) -> np.ndarray:
    """Complex STFT of an already padded signal, shape (bins, frames)."""
    frames = _frames(x, fft_size, hop) * _hann(fft_size)
    return np.fft.rfft(frames, axis=1).T


def _istft_padded(spec: np.ndarray, fft_size: int, hop: int) -> np.ndarray:
    """Least-squares inverse of ``_stft_padded`` (weighted overlap-add)."""
    window = _hann(fft_size)
    frames = np.fft.irfft(spec.T, n=fft_size, axis=1) * window
    n_frames = frames.shape[0]
    length = (n_frames - 1) * hop + fft_size
    out = np.zeros(length)
    norm = np.zeros(length)
    for t in range(n_frames):
        out[t * hop : t * hop + fft_size] += frames[t]
        norm[t * hop : t * hop + fft_size] += window**2
    nonzero = norm > 1e-10
    out[nonzero] /= norm[nonzero]
    return out


def stft_complex(wave: Waveform, fft_size: int = FFT_SIZE, hop: int = HOP) -> np.ndarray:
    if fft_size <= 0 or fft_size & (fft_size - 1):
        raise ValueError(f"fft_size must be a power of two, got {fft_size}")
    if hop <= 0:
        raise ValueError(f"hop must be positive, got {hop}")
    return _stft_padded(_pad_centered(wave.samples, fft_size, hop), fft_size, hop)


def stft_magnitude(wave: Waveform, fft_size: int = FFT_SIZE, hop: int = HOP) -> LinearSpectrogram:
    """Hann-windowed STFT magnitude with center reflect padding.

    Frame ``t`` is centered on sample ``t * hop``; there are ``ceil(len / hop)``
    frames (at least one).
    """
    spec = np.abs(stft_complex(wave, fft_size, hop))
    return LinearSpectrogram(spec, fft_size, hop, wave.sample_rate)


def hz_to_mel(freq):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    freq = np.asarray(freq, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = math.log(6.4) / 27.0
    mels = freq / f_sp
    high = freq >= min_log_hz
    return np.where(high, min_log_mel + np.log(np.maximum(freq, min_log_hz) / min_log_hz) / logstep, mels)


def mel_to_hz(mels):
    mels = np.asarray(mels, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = math.log(6.4) / 27.0
    freqs = f_sp * mels
    high = mels >= min_log_mel
    return np.where(high, min_log_hz * np.exp(logstep * (mels - min_log_mel)), freqs)


def fft_frequencies(sample_rate: int, fft_size: int) -> np.ndarray:
    return np.linspace(0, sample_rate / 2, fft_size // 2 + 1)


def mel_center_frequencies(n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))[1:-1]


@lru_cache(maxsize=16)
def _mel_filterbank_cached(sample_rate, fft_size, n_mels, fmin, fmax):
    fftfreqs = fft_frequencies(sample_rate, fft_size)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    widths = np.diff(edges)
    ramps = edges[:, None] - fftfreqs[None, :]
    lower = -ramps[:-2] / widths[:-1, None]
    upper = ramps[2:] / widths[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    # area normalization
    weights *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    weights.setflags(write=False)
    return weights


def mel_filterbank(sample_rate: int = SAMPLE_RATE, fft_size: int = FFT_SIZE, n_mels: int = N_MELS,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Slaney-style triangular filterbank of shape (n_mels, fft_size // 2 + 1)."""
    fmax = sample_rate / 2 if fmax is None else fmax
    if not 0 <= fmin < fmax <= sample_rate / 2:
        raise ValueError(f"need 0 <= fmin < fmax <= {sample_rate / 2}, got fmin={fmin}, fmax={fmax}")
    n_bins = fft_size // 2 + 1
    if n_mels > n_bins:
        raise ValueError(f"n_mels={n_mels} exceeds the number of FFT bins ({n_bins})")
    return _mel_filterbank_cached(int(sample_rate), int(fft_size), int(n_mels), float(fmin), float(fmax))


def mel_project(spec: LinearSpectrogram, n_mels: int = N_MELS, fmin: float = 0.0,
                fmax: float | None = None) -> np.ndarray:
    basis = mel_filterbank(spec.sample_rate, spec.fft_size, n_mels, fmin, fmax)
    return basis @ spec.magnitudes


def log_compress(mel: np.ndarray, floor_eps: float = FLOOR_EPS, hop: int = HOP,
                 sample_rate: int = SAMPLE_RATE) -> LogMelSpectrogram:
    mel = np.asarray(mel, dtype=np.float64)
    return LogMelSpectrogram(np.log(np.maximum(mel, floor_eps)), hop, sample_rate)


def log_mel(wave: Waveform, config: DSPConfig = DSPConfig()) -> LogMelSpectrogram:
    """Waveform to log-mel features, resampling to the configured rate first."""
    if wave.sample_rate != config.sample_rate:
        wave = resample_audio(wave, config.sample_rate)
    spec = stft_magnitude(wave, config.fft_size, config.hop)
    mel = mel_project(spec, config.n_mels, config.fmin, config.mel_fmax)
    return log_compress(mel, config.floor_eps, config.hop, config.sample_rate)


def _interp_frames(values: np.ndarray, target_frames: int) -> np.ndarray:
    n = values.shape[1]
    if n == 1:
        return np.repeat(values, target_frames, axis=1)
    if target_frames == n:
        return values.copy()
    if target_frames == 1:
        return values[:, :1].copy()
    pos = np.arange(target_frames) * (n - 1) / (target_frames - 1)
    lo = np.minimum(np.floor(pos).astype(int), n - 2)
    frac = pos - lo
    out = values[:, lo] * (1.0 - frac) + values[:, lo + 1] * frac
    # endpoints exact
    out[:, 0] = values[:, 0]
    out[:, -1] = values[:, -1]
    return out


def time_stretch(x: LogMelSpectrogram, target_frames: int) -> LogMelSpectrogram:
    """Linearly interpolate ``x`` along time to exactly ``target_frames`` frames."""
    if target_frames < 1:
        raise ValueError(f"target_frames must be >= 1, got {target_frames}")
    if x.n_frames == 0:
        raise ValueError("cannot stretch an empty spectrogram")
    return x.with_values(_interp_frames(x.values, target_frames))


def random_resample(x: LogMelSpectrogram, rng: np.random.Generator, seg_min: int = 16, seg_max: int = 32,
                    rate_min: float = 0.5, rate_max: float = 2.0) -> LogMelSpectrogram:
    """Cut ``x`` into random-length segments and stretch each by a random factor.

    A segment of ``n`` frames stretched by ``r`` becomes ``max(1, round(n * r))``
    frames.
    """
    if not 0 < seg_min <= seg_max:
        raise ValueError("need 0 < seg_min <= seg_max")
    if not 0 < rate_min <= rate_max:
        raise ValueError("need 0 < rate_min <= rate_max")
    n = x.n_frames
    if n == 0:
        raise ValueError("cannot resample an empty spectrogram")
    pieces = []
    start = 0
    while start < n:
        length = n - start if n < seg_min else int(rng.integers(seg_min, seg_max + 1))
        seg = x.values[:, start : start + length]
        rate = rng.uniform(rate_min, rate_max)
        pieces.append(_interp_frames(seg, max(1, round(seg.shape[1] * rate))))
        start += length
    return x.with_values(np.concatenate(pieces, axis=1))


def mel_invert(x: LogMelSpectrogram, fft_size: int = FFT_SIZE, fmin: float = 0.0, fmax: float | None = None,
               floor_eps: float = FLOOR_EPS, iterations: int = 50) -> LinearSpectrogram:
    """Map log-mel features back to a nonnegative linear-frequency magnitude.

    The log floor is subtracted before inversion so floor-level input maps to
    silence. The nonnegative least-squares fit against the mel filterbank is
    solved with multiplicative updates seeded by the clipped pseudo-inverse.
    """
    basis = mel_filterbank(x.sample_rate, fft_size, x.n_mels, fmin, fmax)
    mel = np.maximum(np.exp(x.values) - floor_eps, 0.0)
    frame_peak = mel.max(axis=0, initial=0.0)
    out = np.maximum(_pinv(x.sample_rate, fft_size, x.n_mels, fmin, fmax) @ mel, 1e-3 * frame_peak)
    numer = basis.T @ mel
    for _ in range(iterations):
        out *= numer / np.maximum(basis.T @ (basis @ out), 1e-30)
    return LinearSpectrogram(out, fft_size, x.hop, x.sample_rate)


@lru_cache(maxsize=8)
def _pinv(sample_rate, fft_size, n_mels, fmin, fmax):
    return np.linalg.pinv(mel_filterbank(sample_rate, fft_size, n_mels, fmin, fmax))


def griffin_lim(spec: LinearSpectrogram, iterations: int = GL_ITERATIONS, seed: int | None = None,
                callback=None) -> Waveform:
    """Griffin-Lim phase reconstruction.

    Starts from zero phase, or uniform random phase when ``seed`` is given.
    ``callback(i, wave)`` is invoked with the waveform estimate after each
    iteration. The output has ``(T - 1) * hop`` samples.
    """
    if iterations < 0:
        raise ValueError(f"iterations must be >= 0, got {iterations}")
    mags = spec.magnitudes
    fft_size, hop = spec.fft_size, spec.hop
    half = fft_size // 2
    n_out = (spec.n_frames - 1) * hop
    if seed is None:
        angles = np.ones(mags.shape, dtype=np.complex128)
    else:
        phase = np.random.default_rng(seed).uniform(0, 2 * np.pi, mags.shape)
        angles = np.exp(1j * phase)

    def trim(padded):
        return Waveform(padded[half : half + n_out], spec.sample_rate)

    padded = _istft_padded(mags * angles, fft_size, hop)
    for i in range(iterations):
        rebuilt = _stft_padded(padded, fft_size, hop)
        angles = np.exp(1j * np.angle(rebuilt))
        padded = _istft_padded(mags * angles, fft_size, hop)
        if callback is not None:
            callback(i, trim(padded))
    return trim(padded)


def spectral_convergence(wave: Waveform, target: LinearSpectrogram) -> float:
    """Relative Frobenius error between ``|STFT(wave)|`` and ``target``."""
    mags = stft_magnitude(wave, target.fft_size, target.hop).magnitudes
    n = min(mags.shape[1], target.n_frames)
    denom = np.linalg.norm(target.magnitudes[:, :n])
    return float(np.linalg.norm(mags[:, :n] - target.magnitudes[:, :n]) / max(denom, 1e-12))
