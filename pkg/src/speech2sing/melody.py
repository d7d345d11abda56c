"""F0 tracking, MIDI quantization and one-hot melody contours."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dsp import HOP, Waveform, n_stft_frames

N_NOTES = 128
# Unvoiced frames are encoded on MIDI row 0 (8.18 Hz).
REST = -1
REST_ROW = 0


class F0FileError(ValueError):
    pass


@dataclass
class F0Track:
    times: np.ndarray
    f0_hz: np.ndarray
    voicing: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.f0_hz = np.asarray(self.f0_hz, dtype=np.float64)
        self.voicing = np.asarray(self.voicing, dtype=bool)
        if not (len(self.times) == len(self.f0_hz) == len(self.voicing)):
            raise ValueError("times, f0_hz and voicing must have equal lengths")
        if np.any(self.f0_hz < 0) or not np.all(np.isfinite(self.f0_hz)):
            raise ValueError("f0 values must be finite and nonnegative")
        if np.any((self.f0_hz > 0) != self.voicing):
            raise ValueError("voicing flags must match f0 > 0")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("track times must be strictly increasing")

    @classmethod
    def from_f0(cls, times, f0_hz) -> F0Track:
        f0_hz = np.asarray(f0_hz, dtype=np.float64)
        return cls(times, f0_hz, f0_hz > 0)

    def __len__(self) -> int:
        return len(self.times)

    @property
    def hop_seconds(self) -> float:
        if len(self.times) < 2:
            return 0.0
        return float(np.median(np.diff(self.times)))


@dataclass
class MelodyContour:
    onehot: np.ndarray
    frame_hop: int = HOP
    sample_rate: int = 22050

    def __post_init__(self):
        self.onehot = np.asarray(self.onehot)
        validate_onehot(self.onehot)

    @property
    def n_frames(self) -> int:
        return self.onehot.shape[1]

    @property
    def notes(self) -> np.ndarray:
        """Per-frame row index (REST_ROW for unvoiced)."""
        return np.argmax(self.onehot, axis=0)

    @classmethod
    def from_notes(cls, notes, frame_hop: int = HOP, sample_rate: int = 22050) -> MelodyContour:
        notes = np.asarray(notes, dtype=int)
        rows = np.where(notes == REST, REST_ROW, notes)
        onehot = np.zeros((N_NOTES, len(rows)), dtype=np.float32)
        onehot[rows, np.arange(len(rows))] = 1.0
        return cls(onehot, frame_hop, sample_rate)


def validate_onehot(onehot: np.ndarray) -> None:
    if onehot.ndim != 2 or onehot.shape[0] != N_NOTES:
        raise ValueError(f"contour must have shape (128, T), got {onehot.shape}")
    if not np.all((onehot == 0) | (onehot == 1)):
        raise ValueError("contour entries must be 0 or 1")
    sums = onehot.sum(axis=0)
    if np.any(sums != 1):
        bad = int(np.argmax(sums != 1))
        raise ValueError(f"contour column {bad} is not one-hot (sum {sums[bad]})")


def hz_to_midi(f0: float) -> int:
    """Nearest MIDI note for ``f0`` (round half up), or REST when ``f0 == 0``."""
    if f0 < 0 or math.isnan(f0):
        raise ValueError(f"f0 must be nonnegative, got {f0}")
    if f0 == 0:
        return REST
    note = math.floor(69 + 12 * math.log2(f0 / 440.0) + 0.5)
    return min(max(note, 0), N_NOTES - 1)


def hz_to_midi_array(f0: np.ndarray) -> np.ndarray:
    f0 = np.asarray(f0, dtype=np.float64)
    if np.any(f0 < 0):
        raise ValueError("f0 must be nonnegative")
    out = np.full(f0.shape, REST, dtype=int)
    voiced = f0 > 0
    notes = np.floor(69 + 12 * np.log2(f0[voiced] / 440.0) + 0.5)
    out[voiced] = np.clip(notes, 0, N_NOTES - 1).astype(int)
    return out


def midi_to_hz(note) -> np.ndarray:
    return 440.0 * 2.0 ** ((np.asarray(note, dtype=np.float64) - 69) / 12)


def _difference_function(frames: np.ndarray, max_lag: int, win: int) -> np.ndarray:
    """YIN difference d(tau) for tau in [0, max_lag] per frame (rows)."""
    n_fft = 1 << int(math.ceil(math.log2(frames.shape[1] + win)))
    spec_x = np.fft.rfft(frames, n_fft, axis=1)
    spec_w = np.fft.rfft(frames[:, :win][:, ::-1], n_fft, axis=1)
    # cross-correlation of the analysis window with every lagged window
    acf = np.fft.irfft(spec_x * spec_w, n_fft, axis=1)[:, win - 1 : win + max_lag]
    sq = np.cumsum(np.pad(frames**2, ((0, 0), (1, 0))), axis=1)
    energy = sq[:, win : win + max_lag + 1] - sq[:, : max_lag + 1]
    return np.maximum(energy[:, :1] + energy - 2 * acf, 0.0)


def estimate_f0(wave: Waveform, frame_hop: int = HOP, fmin: float = 50.0, fmax: float = 1000.0,
                threshold: float = 0.1, voicing_threshold: float = 0.2,
                silence_rms: float = 1e-4) -> F0Track:
    """YIN-style F0 track with one estimate per ``frame_hop`` samples.

    Frame ``t`` is centered on sample ``t * frame_hop`` so the track lines up
    with STFT frames of the same hop.
    """
    if len(wave) == 0:
        raise ValueError("cannot track pitch of an empty waveform")
    sr = wave.sample_rate
    min_lag = max(2, int(math.floor(sr / fmax)))
    max_lag = int(math.ceil(sr / fmin))
    win = max_lag + 1
    frame_len = win + max_lag + 1
    n_frames = n_stft_frames(len(wave), frame_hop)
    x = np.pad(wave.samples, (frame_len // 2, frame_len))
    idx = np.arange(frame_len)[None, :] + frame_hop * np.arange(n_frames)[:, None]
    frames = x[idx]

    diff = _difference_function(frames, max_lag, win)
    cum = np.cumsum(diff[:, 1:], axis=1)
    lags = np.arange(1, max_lag + 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        cmnd = np.where(cum > 0, diff[:, 1:] * lags / cum, 1.0)
    cmnd = np.concatenate([np.ones((n_frames, 1)), cmnd], axis=1)

    rms = np.sqrt(np.mean(frames[:, :win] ** 2, axis=1))
    f0 = np.zeros(n_frames)
    for t in range(n_frames):
        if rms[t] < silence_rms:
            continue
        curve = cmnd[t]
        search = curve[min_lag : max_lag]
        below = np.nonzero(search < threshold)[0]
        if len(below):
            tau = below[0] + min_lag
            while tau + 1 < max_lag and curve[tau + 1] < curve[tau]:
                tau += 1
        else:
            tau = int(np.argmin(search)) + min_lag
        if curve[tau] >= voicing_threshold:
            continue
        shift = 0.0
        if 0 < tau < max_lag:
            a, b, c = curve[tau - 1], curve[tau], curve[tau + 1]
            denom = a - 2 * b + c
            if denom > 0:
                shift = 0.5 * (a - c) / denom
        f0[t] = sr / (tau + shift)
    times = np.arange(n_frames) * frame_hop / sr
    return F0Track.from_f0(times, f0)


def contour_from_f0(track: F0Track, n_frames: int, frame_hop: int = HOP,
                    sample_rate: int = 22050) -> MelodyContour:
    """Sample ``track`` (nearest time) on a ``n_frames`` grid and one-hot encode."""
    if n_frames <= 0:
        raise ValueError(f"n_frames must be positive, got {n_frames}")
    if len(track) == 0:
        raise ValueError("empty F0 track")
    grid = np.arange(n_frames) * frame_hop / sample_rate
    pos = np.clip(np.searchsorted(track.times, grid), 1, max(len(track) - 1, 1))
    if len(track) == 1:
        nearest = np.zeros(n_frames, dtype=int)
    else:
        left = track.times[pos - 1]
        right = track.times[pos]
        nearest = np.where(grid - left <= right - grid, pos - 1, pos)
    notes = hz_to_midi_array(track.f0_hz[nearest])
    return MelodyContour.from_notes(notes, frame_hop, sample_rate)


def contour_to_track(contour: MelodyContour) -> F0Track:
    """Reference pitch track implied by a contour; rest frames are unvoiced."""
    notes = contour.notes
    f0 = np.where(notes == REST_ROW, 0.0, midi_to_hz(notes))
    times = np.arange(contour.n_frames) * contour.frame_hop / contour.sample_rate
    return F0Track.from_f0(times, f0)


def load_f0_file(path) -> F0Track:
    """Parse ``time_sec f0_hz`` lines; ``#`` comments and blank lines are skipped."""
    times, values = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) != 2:
                raise F0FileError(f"{path}:{lineno}: expected 'time f0', got {text!r}")
            try:
                t, f = float(parts[0]), float(parts[1])
            except ValueError:
                raise F0FileError(f"{path}:{lineno}: cannot parse {text!r}") from None
            if not (math.isfinite(t) and math.isfinite(f)) or f < 0:
                raise F0FileError(f"{path}:{lineno}: invalid values {text!r}")
            if times and t <= times[-1]:
                raise F0FileError(f"{path}:{lineno}: times must be strictly increasing")
            times.append(t)
            values.append(f)
    return F0Track.from_f0(times, values)


def write_f0_file(path, track: F0Track) -> None:
    lines = [f"{t:.6f} {f:.4f}" for t, f in zip(track.times, track.f0_hz)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
