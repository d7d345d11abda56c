"""Objective metrics: log-spectral distance and raw chroma accuracy."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import dsp
from .dsp import GL_ITERATIONS, DSPConfig
from .melody import F0Track, contour_to_track, estimate_f0

log = logging.getLogger(__name__)

NATURAL_LOG_TO_DB = 20.0 / math.log(10.0)
LSD_BAND = (100.0, 3500.0)


class UndefinedMetricError(ValueError):
    pass


def lsd(y_true: np.ndarray, y_pred: np.ndarray, freqs: np.ndarray | None = None,
        band: tuple | None = LSD_BAND) -> float:
    """Log-spectral distance in dB between two natural-log magnitude spectrograms.

    Rows whose centre frequency ``freqs`` lies inside ``band`` are kept; each
    frame contributes the RMS of its dB difference, and frames are averaged.
    ``band=None`` (or ``freqs=None``) uses every row.
    """
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"shape mismatch: {y_true.shape} vs {y_pred.shape}")
    if band is not None and freqs is not None:
        freqs = np.asarray(freqs)
        if len(freqs) != y_true.shape[0]:
            raise ValueError(f"{len(freqs)} frequencies for {y_true.shape[0]} rows")
        rows = (freqs >= band[0]) & (freqs <= band[1])
        if not rows.any():
            raise ValueError(f"no bins inside band {band}")
        y_true, y_pred = y_true[rows], y_pred[rows]
    diff_db = NATURAL_LOG_TO_DB * (y_true - y_pred)
    return float(np.mean(np.sqrt(np.mean(diff_db**2, axis=0))))


def mel_lsd(y_true, y_pred, config: DSPConfig = DSPConfig(), band=LSD_BAND) -> float:
    freqs = dsp.mel_center_frequencies(y_true.shape[0], config.fmin, config.mel_fmax)
    return lsd(y_true, y_pred, freqs, band)


def _align(track: F0Track, times: np.ndarray) -> np.ndarray:
    """Nearest-time lookup of ``track`` f0 values at ``times``."""
    if len(track) == 0:
        return np.zeros(len(times))
    pos = np.clip(np.searchsorted(track.times, times), 1, max(len(track) - 1, 1))
    if len(track) == 1:
        return np.full(len(times), track.f0_hz[0])
    left, right = track.times[pos - 1], track.times[pos]
    nearest = np.where(times - left <= right - times, pos - 1, pos)
    return track.f0_hz[nearest]


def rca(f0_ref: F0Track, f0_est: F0Track, tolerance: float = 50.0) -> float:
    """Raw chroma accuracy over reference-voiced frames.

    The estimate is sampled on the reference's time grid. A frame counts when
    the estimate is voiced and its octave-folded distance to the reference is
    within ``tolerance`` cents.
    """
    if len(f0_est) == len(f0_ref) and np.allclose(f0_est.times, f0_ref.times):
        est = f0_est.f0_hz
    else:
        est = _align(f0_est, f0_ref.times)
    voiced = f0_ref.voicing
    n_voiced = int(voiced.sum())
    if n_voiced == 0:
        raise UndefinedMetricError("reference has no voiced frames")
    ref = f0_ref.f0_hz[voiced]
    est = est[voiced]
    est_voiced = est > 0
    cents = np.zeros_like(ref)
    cents[est_voiced] = 1200.0 * np.log2(est[est_voiced] / ref[est_voiced])
    folded = np.mod(cents, 1200.0)
    distance = np.minimum(folded, 1200.0 - folded)
    correct = est_voiced & (distance <= tolerance + 1e-9)
    return float(correct.sum() / n_voiced)


@dataclass
class EvalConfig:
    dsp: DSPConfig = field(default_factory=DSPConfig)
    band: tuple = LSD_BAND
    gl_iterations: int = GL_ITERATIONS
    tolerance_cents: float = 50.0


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    model_id: str = ""
    config_hash: str = ""

    @property
    def n_examples(self) -> int:
        return len(self.rows)

    @property
    def mean_lsd(self) -> float:
        vals = [r["lsd_db"] for r in self.rows]
        return float(np.mean(vals)) if vals else math.nan

    @property
    def mean_rca(self) -> float:
        vals = [r["rca"] for r in self.rows if not math.isnan(r["rca"])]
        return float(np.mean(vals)) if vals else math.nan

    def summary(self) -> str:
        return (f"model={self.model_id or '-'} config={self.config_hash or '-'} n={self.n_examples} "
                f"failed={len(self.failures)} mean_lsd_db={self.mean_lsd:.4f} mean_rca={self.mean_rca:.4f}")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["example_id", "lsd_db", "rca"])
            for row in self.rows:
                writer.writerow([row["example_id"], f"{row['lsd_db']:.6f}", f"{row['rca']:.6f}"])
            writer.writerow(["mean", f"{self.mean_lsd:.6f}", f"{self.mean_rca:.6f}"])


class TargetStub:
    """Stand-in generator that returns each example's own target.

    LSD is zero by construction, so RCA then measures only the vocoder and
    the pitch tracker.
    """


def _run_generator(generator, ex) -> np.ndarray:
    if isinstance(generator, TargetStub):
        return ex.singing.values.copy()
    if hasattr(generator, "convert"):
        return generator.convert(ex.speech.values, ex.contour.onehot)
    return np.asarray(generator(ex.speech.values, ex.contour.onehot))


def synthesize(mel: np.ndarray, config: EvalConfig, hop: int, sample_rate: int) -> dsp.Waveform:
    spec = dsp.mel_invert(dsp.LogMelSpectrogram(mel, hop, sample_rate), config.dsp.fft_size, config.dsp.fmin,
                          config.dsp.fmax, config.dsp.floor_eps)
    return dsp.griffin_lim(spec, config.gl_iterations)


def evaluate_model(testset, generator, config: EvalConfig | None = None, model_id: str = "",
                   config_hash: str = "") -> EvalReport:
    """Generate every test example and score it against its target.

    LSD compares generated and target log-mel; RCA compares the pitch track of
    the Griffin-Lim rendering of the output with the target contour's notes.
    ``generator`` is a ``Generator``, a ``TargetStub`` or any
    ``f(speech, contour) -> mel``.
    """
    config = config or EvalConfig()
    if not testset:
        raise ValueError("empty test set")
    report = EvalReport(model_id=model_id, config_hash=config_hash)
    for i, ex in enumerate(testset):
        example_id = ex.name or f"example_{i:04d}"
        try:
            out = _run_generator(generator, ex)
            if out.shape != ex.singing.values.shape or not np.all(np.isfinite(out)):
                raise ValueError(f"generator returned shape {out.shape} with non-finite or mismatched values")
        except Exception as exc:  # noqa: BLE001 - any per-example failure is reported, not fatal
            log.warning("generation failed for %s: %s", example_id, exc)
            report.failures.append((example_id, str(exc)))
            continue
        lsd_db = mel_lsd(ex.singing.values, out, config.dsp, config.band)
        audio = synthesize(out, config, ex.singing.hop, ex.singing.sample_rate)
        est = estimate_f0(audio, ex.singing.hop) if len(audio) else F0Track([], [], [])
        try:
            score = rca(contour_to_track(ex.contour), est, config.tolerance_cents)
        except UndefinedMetricError:
            score = math.nan
        report.rows.append({"example_id": example_id, "lsd_db": lsd_db, "rca": score})
    return report
