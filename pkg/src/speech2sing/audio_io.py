"""WAV and MEL1 file I/O."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .dsp import LogMelSpectrogram, Waveform

MEL1_MAGIC = b"MEL1"
_HEADER = struct.Struct("<4sIIII")


class FormatError(ValueError):
    pass


def read_wav(path) -> Waveform:
    """Read a WAV file as mono float samples in [-1, 1]; stereo is averaged."""
    rate, data = wavfile.read(str(path))
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    elif np.issubdtype(data.dtype, np.floating):
        samples = data.astype(np.float64)
    else:
        raise FormatError(f"{path}: unsupported WAV sample type {data.dtype}")
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    return Waveform(samples, int(rate))


def write_wav(path, wave: Waveform, pcm16: bool = True) -> None:
    samples = np.clip(wave.samples, -1.0, 1.0)
    if pcm16:
        data = np.round(samples * 32767.0).astype(np.int16)
    else:
        data = samples.astype(np.float32)
    wavfile.write(str(path), int(wave.sample_rate), data)


def write_mel1(path, mel: LogMelSpectrogram) -> None:
    """Write ``mel`` as MEL1: header then frame-major little-endian f32 values."""
    values = np.asarray(mel.values, dtype="<f4")
    n_mels, n_frames = values.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MEL1_MAGIC, n_mels, n_frames, mel.sample_rate, mel.hop))
        fh.write(np.ascontiguousarray(values.T).tobytes())


def read_mel1(path) -> LogMelSpectrogram:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated MEL1 header")
    magic, n_mels, n_frames, sample_rate, hop = _HEADER.unpack_from(raw)
    if magic != MEL1_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    body = raw[_HEADER.size :]
    if len(body) != 4 * n_mels * n_frames:
        raise FormatError(f"{path}: expected {n_mels * n_frames} values, found {len(body) // 4}")
    values = np.frombuffer(body, dtype="<f4").reshape(n_frames, n_mels).T.astype(np.float32)
    return LogMelSpectrogram(values, hop, sample_rate)
