"""Manifests, phone annotations, paired-example preparation and toy data."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp
from .dsp import DSPConfig, LogMelSpectrogram, Waveform
from .melody import F0Track, MelodyContour, contour_from_f0, estimate_f0, midi_to_hz

log = logging.getLogger(__name__)

SILENCE_LABELS = frozenset({"sil", "sp", "br"})
MANIFEST_KEYS = {"speech", "singing", "speech_phones", "singing_phones", "singing_f0"}


class ManifestError(ValueError):
    pass


class AnnotationError(ValueError):
    pass


class PhoneMismatchError(AnnotationError):
    def __init__(self, index: int, speech_label, singing_label):
        self.index = index
        super().__init__(
            f"phone label sequences diverge at index {index}: speech {speech_label!r} vs singing {singing_label!r}")


class ExampleSkipped(Exception):
    """Raised when an example has no usable content after preprocessing."""


@dataclass
class PhoneAnnotation:
    entries: list

    def __post_init__(self):
        self.entries = [(str(lab), float(s), float(e)) for lab, s, e in self.entries]
        prev_end = -np.inf
        for i, (label, start, end) in enumerate(self.entries):
            if end <= start:
                raise AnnotationError(f"phone {i} ({label}) has end {end} <= start {start}")
            if start < prev_end - 1e-9:
                raise AnnotationError(f"phone {i} ({label}) overlaps the previous phone")
            prev_end = end

    def __len__(self):
        return len(self.entries)

    @property
    def end_time(self) -> float:
        return self.entries[-1][2] if self.entries else 0.0

    def voiced(self, silence_labels=SILENCE_LABELS) -> list:
        return [e for e in self.entries if e[0] not in silence_labels]


def load_phone_file(path) -> PhoneAnnotation:
    """Read ``label start end`` lines (seconds)."""
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) != 3:
                raise AnnotationError(f"{path}:{lineno}: expected 'label start end'")
            try:
                entries.append((parts[0], float(parts[1]), float(parts[2])))
            except ValueError:
                raise AnnotationError(f"{path}:{lineno}: bad time value") from None
    return PhoneAnnotation(entries)


@dataclass
class PairedExample:
    speech: LogMelSpectrogram
    singing: LogMelSpectrogram
    contour: MelodyContour
    speech_phones: PhoneAnnotation | None = None
    singing_phones: PhoneAnnotation | None = None
    # speech before time stretching; training re-stretches it after random resampling
    speech_source: LogMelSpectrogram | None = None
    name: str = ""

    def __post_init__(self):
        n = self.singing.n_frames
        if self.contour.n_frames != n:
            raise ValueError(f"contour has {self.contour.n_frames} frames, singing has {n}")
        if self.speech.n_frames != n:
            raise ValueError(f"speech has {self.speech.n_frames} frames, singing has {n}")

    @property
    def n_frames(self) -> int:
        return self.singing.n_frames


@dataclass
class UnpairedExample:
    singing: LogMelSpectrogram
    contour: MelodyContour
    name: str = ""

    def __post_init__(self):
        if self.contour.n_frames != self.singing.n_frames:
            raise ValueError("contour and singing lengths differ")

    @property
    def n_frames(self) -> int:
        return self.singing.n_frames


@dataclass
class ManifestRecord:
    line: int
    singing: Path
    speech: Path | None = None
    speech_phones: Path | None = None
    singing_phones: Path | None = None
    singing_f0: Path | None = None

    @property
    def paired(self) -> bool:
        return self.speech is not None

    @property
    def name(self) -> str:
        return f"{self.line:05d}_{self.singing.stem}"


@dataclass
class Manifest:
    paired: list = field(default_factory=list)
    unpaired: list = field(default_factory=list)
    errors: list = field(default_factory=list)

    @property
    def records(self) -> list:
        return sorted(self.paired + self.unpaired, key=lambda r: r.line)


def load_manifest(path) -> Manifest:
    """Parse a JSON-lines manifest; relative paths resolve against its directory.

    Records whose files are missing are reported in ``errors`` and skipped.
    """
    path = Path(path)
    base = path.parent
    manifest = Manifest()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise ManifestError(f"{path}:{lineno}: record must be a JSON object")
            unknown = set(obj) - MANIFEST_KEYS
            if unknown:
                raise ManifestError(f"{path}:{lineno}: unknown keys {sorted(unknown)}")
            if not obj.get("singing"):
                raise ManifestError(f"{path}:{lineno}: record is missing 'singing'")
            paths = {k: (base / v if v else None) for k, v in obj.items()}
            record = ManifestRecord(line=lineno, **paths)
            missing = [str(p) for p in paths.values() if p is not None and not p.is_file()]
            if missing:
                manifest.errors.append((lineno, f"unreadable: {', '.join(missing)}"))
                continue
            (manifest.paired if record.paired else manifest.unpaired).append(record)
    log.info("manifest %s: %d paired, %d unpaired, %d errors", path, len(manifest.paired),
             len(manifest.unpaired), len(manifest.errors))
    return manifest


def _frame_index(t, hop, sample_rate):
    return int(round(t * sample_rate / hop))


def remove_silence(speech: LogMelSpectrogram, phones: PhoneAnnotation,
                   silence_labels=SILENCE_LABELS) -> LogMelSpectrogram:
    """Drop frames whose centre time falls in a silence-labelled phone."""
    frame_dt = speech.hop / speech.sample_rate
    duration = speech.n_frames * frame_dt
    if phones.end_time > duration + frame_dt:
        raise AnnotationError(f"annotation ends at {phones.end_time:.3f}s, audio lasts {duration:.3f}s")
    centers = np.arange(speech.n_frames) * frame_dt
    keep = np.ones(speech.n_frames, dtype=bool)
    for label, start, end in phones.entries:
        if label in silence_labels:
            keep &= ~((centers >= start) & (centers < end))
    return speech.with_values(speech.values[:, keep])


def filter_long_silence(singing: Waveform, f0: F0Track, max_silence: float = 1.0) -> list:
    """Split ``singing`` at unvoiced runs longer than ``max_silence`` seconds."""
    n = len(f0)
    sr = singing.sample_rate
    if n == 0:
        return [singing]
    ends = np.append(f0.times[1:], max(singing.duration, f0.times[-1]))
    cuts = []
    i = 0
    while i < n:
        if f0.voicing[i]:
            i += 1
            continue
        j = i
        while j + 1 < n and not f0.voicing[j + 1]:
            j += 1
        start = 0.0 if i == 0 else f0.times[i]
        if ends[j] - start > max_silence:
            cuts.append((start, ends[j]))
        i = j + 1
    segments = []
    pos = 0
    for start, end in cuts:
        a = int(round(start * sr))
        if a > pos:
            segments.append(Waveform(singing.samples[pos:a], sr))
        pos = max(pos, int(round(end * sr)))
    if pos < len(singing):
        segments.append(Waveform(singing.samples[pos:], sr))
    return segments


def phoneme_sync_stretch(speech: LogMelSpectrogram, speech_phones: PhoneAnnotation,
                         singing_phones: PhoneAnnotation, silence_labels=SILENCE_LABELS) -> LogMelSpectrogram:
    """Stretch every speech phone to the frame count of its sung counterpart.

    Phone spans are converted to frames by rounding their boundaries to the
    nearest frame, so sung counts add up to the sung frame total. Silence
    phones are dropped from both sides.
    """
    spoken = speech_phones.voiced(silence_labels)
    sung = singing_phones.voiced(silence_labels)
    for i in range(max(len(spoken), len(sung))):
        a = spoken[i][0] if i < len(spoken) else None
        b = sung[i][0] if i < len(sung) else None
        if a != b:
            raise PhoneMismatchError(i, a, b)
    hop, sr = speech.hop, speech.sample_rate
    pieces = []
    for (_, s0, s1), (_, t0, t1) in zip(spoken, sung):
        count = _frame_index(t1, hop, sr) - _frame_index(t0, hop, sr)
        if count <= 0:
            continue
        a = min(_frame_index(s0, hop, sr), speech.n_frames - 1)
        b = min(max(_frame_index(s1, hop, sr), a + 1), speech.n_frames)
        span = speech.values[:, a:b]
        pieces.append(dsp.time_stretch(speech.with_values(span), count).values)
    if not pieces:
        return speech.with_values(np.zeros((speech.n_mels, 0)))
    return speech.with_values(np.concatenate(pieces, axis=1))


@dataclass
class PrepareConfig:
    dsp: DSPConfig = field(default_factory=DSPConfig)
    random_resample: bool = False
    phoneme_sync: bool = False
    min_speech_seconds: float = 1.5
    silence_labels: frozenset = SILENCE_LABELS


def prepare_paired(speech_wave: Waveform, singing_wave: Waveform, speech_phones: PhoneAnnotation | None = None,
                   singing_phones: PhoneAnnotation | None = None, config: PrepareConfig | None = None,
                   rng: np.random.Generator | None = None, f0_track: F0Track | None = None,
                   name: str = "") -> PairedExample:
    """Build a training/test pair whose speech, singing and contour share one length.

    ``f0_track`` (an external tracker's output) takes precedence over the
    built-in estimator. Random resampling needs ``rng``.
    """
    config = config or PrepareConfig()
    cfg = config.dsp
    if len(speech_wave) == 0 or len(singing_wave) == 0:
        raise ExampleSkipped(f"{name}: empty waveform")
    raw_speech = dsp.log_mel(speech_wave, cfg)
    speech = raw_speech
    if speech_phones is not None:
        speech = remove_silence(speech, speech_phones, config.silence_labels)
    if speech.n_frames == 0:
        raise ExampleSkipped(f"{name}: no speech left after silence removal")
    if speech.n_frames * cfg.hop / cfg.sample_rate < config.min_speech_seconds:
        raise ExampleSkipped(f"{name}: speech shorter than {config.min_speech_seconds}s")

    singing = dsp.log_mel(singing_wave, cfg)
    if f0_track is None:
        sung = singing_wave
        if sung.sample_rate != cfg.sample_rate:
            sung = dsp.resample_audio(sung, cfg.sample_rate)
        f0_track = estimate_f0(sung, cfg.hop)
    contour = contour_from_f0(f0_track, singing.n_frames, cfg.hop, cfg.sample_rate)

    source = speech
    if config.phoneme_sync:
        if speech_phones is None or singing_phones is None:
            raise ValueError("phoneme synchronisation needs both phone annotations")
        speech = phoneme_sync_stretch(raw_speech, speech_phones, singing_phones, config.silence_labels)
        if speech.n_frames == 0:
            raise ExampleSkipped(f"{name}: no voiced phones")
    elif config.random_resample:
        if rng is None:
            raise ValueError("random resampling needs an rng")
        speech = dsp.random_resample(speech, rng)
    speech = dsp.time_stretch(speech, singing.n_frames)
    return PairedExample(speech, singing, contour, speech_phones, singing_phones, source, name)


def prepare_unpaired(singing_wave: Waveform, config: PrepareConfig | None = None,
                     f0_track: F0Track | None = None, max_silence: float = 1.0, name: str = "") -> list:
    """Cut long silences out of a singing-only recording; one example per segment."""
    cfg = (config or PrepareConfig()).dsp
    wave = singing_wave
    if wave.sample_rate != cfg.sample_rate:
        wave = dsp.resample_audio(wave, cfg.sample_rate)
    track = f0_track if f0_track is not None else estimate_f0(wave, cfg.hop)
    out = []
    for i, seg in enumerate(filter_long_silence(wave, track, max_silence)):
        mel = dsp.log_mel(seg, cfg)
        seg_track = estimate_f0(seg, cfg.hop)
        out.append(UnpairedExample(mel, contour_from_f0(seg_track, mel.n_frames, cfg.hop, cfg.sample_rate),
                                   f"{name}#{i}"))
    return out


def note_mel_row(note, n_mels: int = dsp.N_MELS, sample_rate: int = dsp.SAMPLE_RATE) -> np.ndarray:
    """Mel row whose centre frequency is closest to each MIDI note's pitch."""
    centers = dsp.mel_center_frequencies(n_mels, 0.0, sample_rate / 2)
    hz = np.atleast_1d(midi_to_hz(note))
    return np.argmin(np.abs(centers[None, :] - hz[:, None]), axis=1)


def make_synthetic_pair(rng: np.random.Generator, n_notes: int = 8, frames_per_note: int = 32, n_mels: int = 80,
                        pitch_range: tuple = (55, 79), hop: int = dsp.HOP,
                        sample_rate: int = dsp.SAMPLE_RATE) -> PairedExample:
    """Toy speech/singing pair built from formant-like band patterns.

    Speech plays one band pattern per syllable at a fixed fast tempo; singing
    holds each syllable for ``frames_per_note`` frames on a random note and
    adds a harmonic ridge at the note's mel row.
    """
    if min(n_notes, frames_per_note, n_mels) <= 0:
        raise ValueError("synthetic pair parameters must be positive")
    base = -8.0
    rows = np.arange(n_mels)[:, None]
    patterns = np.full((n_mels, n_notes), base)
    for k in range(n_notes):
        for _ in range(3):
            center = rng.uniform(0.15 * n_mels, 0.9 * n_mels)
            width = rng.uniform(1.5, 4.0)
            patterns[:, k] += rng.uniform(1.5, 3.0) * np.exp(-0.5 * ((rows[:, 0] - center) / width) ** 2)
    notes = rng.integers(pitch_range[0], pitch_range[1] + 1, size=n_notes)

    speech_per = max(2, frames_per_note // 2)
    ramp = np.linspace(-0.5, 0.5, speech_per)[None, :]
    speech = np.concatenate([patterns[:, [k]] + ramp * (k % 2 * 2 - 1) for k in range(n_notes)], axis=1)

    singing = np.repeat(patterns, frames_per_note, axis=1)
    for k, note in enumerate(notes):
        cols = slice(k * frames_per_note, (k + 1) * frames_per_note)
        for harmonic, level in ((1, 11.0), (2, 8.0), (3, 6.0)):
            hz = midi_to_hz(note) * harmonic
            if hz >= sample_rate / 2:
                continue
            row = int(np.argmin(np.abs(dsp.mel_center_frequencies(n_mels, 0.0, sample_rate / 2) - hz)))
            singing[row, cols] = np.maximum(singing[row, cols], base + level)
    contour = MelodyContour.from_notes(np.repeat(notes, frames_per_note), hop, sample_rate)
    source = LogMelSpectrogram(speech, hop, sample_rate)
    return PairedExample(
        speech=dsp.time_stretch(source, singing.shape[1]),
        singing=LogMelSpectrogram(singing, hop, sample_rate),
        contour=contour,
        speech_source=source,
        name="synthetic",
    )
