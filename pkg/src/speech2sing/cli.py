"""Command-line entry points: prepare, train, convert, evaluate, plot.

Settings are flat ``key = value`` pairs read from a config file (``--config``
or the ``STS_CONFIG`` environment variable) and overridden by ``--set
key=value``. Exit codes: 0 success, 1 validation error, 2 runtime error,
3 partial failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import math
import os
import secrets
import shlex
import subprocess
import sys
from pathlib import Path

from . import dsp
from .audio_io import FormatError, read_mel1, read_wav, write_mel1, write_wav
from .data import (
    AnnotationError,
    ExampleSkipped,
    ManifestError,
    PairedExample,
    PrepareConfig,
    UnpairedExample,
    load_manifest,
    load_phone_file,
    prepare_paired,
    prepare_unpaired,
)
from .dsp import DSPConfig
from .evaluation import EvalConfig, TargetStub, evaluate_model
from .melody import F0FileError, MelodyContour, contour_from_f0, contour_to_track, estimate_f0, load_f0_file, \
    write_f0_file
from .net import ModelConfig
from .train import ConfigError, TrainConfig, TrainingError, config_differences, generator_from_checkpoint, \
    train_loop

log = logging.getLogger("speech2sing")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_PARTIAL = 0, 1, 2, 3
CONFIG_ENV = "STS_CONFIG"
KEY_ALIASES = {"lambda": "lambda_k"}
MODEL_SIZES = ("full", "small")
EXTRA_DEFAULTS = {"model_size": "full", "min_speech_seconds": 1.5, "phoneme_sync": False, "max_silence": 1.0}
PREPARE_KEYS = ("min_speech_seconds", "phoneme_sync", "max_silence")
VALIDATION_ERRORS = (ConfigError, ManifestError, AnnotationError, FormatError, F0FileError, FileNotFoundError)


class CliError(Exception):
    def __init__(self, message, code=EXIT_VALIDATION):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- config


def _defaults() -> dict:
    out = {f.name: f.default for f in dataclasses.fields(TrainConfig)}
    out.update({f.name: f.default for f in dataclasses.fields(DSPConfig)})
    out.update(EXTRA_DEFAULTS)
    return out


def _coerce(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if default is None:  # fmax
            return None if raw.lower() == "none" else float(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise CliError(f"config key {key!r}: cannot parse {raw!r}") from None


def parse_settings(lines, source: str) -> dict:
    """Parse ``key = value`` lines; unknown keys are errors."""
    defaults = _defaults()
    out = {}
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        key = KEY_ALIASES.get(key, key)
        if key not in defaults:
            raise CliError(f"{source}:{lineno}: unknown config key {key!r}")
        out[key] = _coerce(key, value, defaults[key])
    return out


class Settings:
    """Effective settings plus the set of keys the user gave explicitly."""

    def __init__(self, values: dict, explicit: set):
        self.values = values
        self.explicit = explicit

    @classmethod
    def from_args(cls, args) -> Settings:
        given = {}
        path = args.config or os.environ.get(CONFIG_ENV)
        if path:
            try:
                text = Path(path).read_text(encoding="utf-8")
            except OSError as exc:
                raise CliError(f"cannot read config {path}: {exc.strerror}") from None
            given.update(parse_settings(text.splitlines(), str(path)))
        given.update(parse_settings(args.set or [], "--set"))
        if args.seed is not None:
            given["seed"] = args.seed
        values = {**_defaults(), **given}
        if values["model_size"] not in MODEL_SIZES:
            raise CliError(f"config key 'model_size' must be one of {MODEL_SIZES}, got {values['model_size']!r}")
        settings = cls(values, set(given))
        # build once so every invalid value is reported before any work starts
        settings.dsp_config()
        settings.model_config()
        return settings

    def _pick(self, cls):
        return {f.name: self.values[f.name] for f in dataclasses.fields(cls)}

    def dsp_config(self) -> DSPConfig:
        cfg = DSPConfig(**self._pick(DSPConfig))
        if cfg.hop <= 0 or cfg.fft_size <= 0 or cfg.sample_rate <= 0 or cfg.n_mels <= 0:
            raise CliError("hop, fft_size, sample_rate and n_mels must be positive")
        if cfg.floor_eps <= 0:
            raise CliError("floor_eps must be positive")
        return cfg

    def model_config(self) -> ModelConfig:
        dsp_cfg = self.dsp_config()
        common = dict(n_mels=dsp_cfg.n_mels, log_floor=math.log(dsp_cfg.floor_eps))
        try:
            if self.values["model_size"] == "small":
                return ModelConfig(pitch_embed=16, pitch_widths=(16, 8, 4), decoder_widths=(32, 16, 16),
                                   disc_widths=(32, 32, 16), **common)
            return ModelConfig(**common)
        except ValueError as exc:
            raise CliError(f"invalid model settings: {exc}") from None

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(**{**self._pick(TrainConfig), "seed": seed})

    def prepare_config(self) -> PrepareConfig:
        if self.values["min_speech_seconds"] < 0 or self.values["max_silence"] <= 0:
            raise CliError("min_speech_seconds must be >= 0 and max_silence > 0")
        return PrepareConfig(dsp=self.dsp_config(), phoneme_sync=self.values["phoneme_sync"],
                             min_speech_seconds=self.values["min_speech_seconds"])

    def dump(self, path) -> None:
        lines = [f"{k} = {'none' if v is None else v}" for k, v in sorted(self.values.items())]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _resolve_seed(settings: Settings) -> int:
    if "seed" in settings.explicit:
        return settings.values["seed"]
    seed = secrets.randbelow(2**31)
    log.warning("no --seed given; using random seed %d", seed)
    settings.values["seed"] = seed
    return seed


# ---------------------------------------------------------------- prepare


def _stamp(paths, settings: Settings) -> str:
    blob = json.dumps({"sources": [str(p) for p in paths],
                       "dsp": dataclasses.asdict(settings.dsp_config()),
                       "prepare": {k: settings.values[k] for k in PREPARE_KEYS}}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _up_to_date(meta_path: Path, stamp: str, sources) -> bool:
    if not meta_path.is_file():
        return False
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError:
        return False
    if meta.get("stamp") != stamp:
        return False
    built = meta_path.stat().st_mtime
    if any(Path(p).stat().st_mtime > built for p in sources):
        return False
    return all((meta_path.parent / f).is_file() for ex in meta["examples"] for f in ex["files"].values())


def _save_example(folder: Path, ex, name: str) -> dict:
    files = {"singing": f"{name}.singing.mel1", "contour": f"{name}.contour.f0"}
    write_mel1(folder / files["singing"], ex.singing)
    write_f0_file(folder / files["contour"], contour_to_track(ex.contour))
    if isinstance(ex, PairedExample):
        files["speech"] = f"{name}.speech.mel1"
        write_mel1(folder / files["speech"], ex.speech)
        if ex.speech_source is not None:
            files["speech_source"] = f"{name}.speech_source.mel1"
            write_mel1(folder / files["speech_source"], ex.speech_source)
    return {"name": name, "kind": "paired" if isinstance(ex, PairedExample) else "unpaired", "files": files}


def _prepare_record(record, settings: Settings) -> list:
    cfg = settings.prepare_config()
    singing = read_wav(record.singing)
    track = load_f0_file(record.singing_f0) if record.singing_f0 else None
    if record.paired:
        speech_phones = load_phone_file(record.speech_phones) if record.speech_phones else None
        singing_phones = load_phone_file(record.singing_phones) if record.singing_phones else None
        ex = prepare_paired(read_wav(record.speech), singing, speech_phones, singing_phones, cfg,
                            f0_track=track, name=record.name)
        return [ex]
    return prepare_unpaired(singing, cfg, track, settings.values["max_silence"], record.name)


def cmd_prepare(args, settings: Settings) -> int:
    settings.prepare_config()
    manifest = load_manifest(args.manifest)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    settings.dump(out / "config.txt")
    failed = list(manifest.errors)
    ok = rebuilt = 0
    index = []
    for record in manifest.records:
        sources = [p for p in (record.speech, record.singing, record.speech_phones, record.singing_phones,
                               record.singing_f0) if p is not None]
        folder = out / record.name
        meta_path = folder / "meta.json"
        stamp = _stamp(sources, settings)
        if not args.force and _up_to_date(meta_path, stamp, sources):
            meta = json.loads(meta_path.read_text())
        else:
            try:
                examples = _prepare_record(record, settings)
            except (ExampleSkipped, AnnotationError, FormatError, F0FileError, ValueError, OSError) as exc:
                failed.append((record.line, f"{record.name}: {exc}"))
                continue
            folder.mkdir(exist_ok=True)
            entries = [_save_example(folder, ex, f"{i:03d}") for i, ex in enumerate(examples)]
            meta = {"stamp": stamp, "record": record.name, "examples": entries}
            meta_path.write_text(json.dumps(meta, indent=1))
            rebuilt += 1
        ok += 1
        for entry in meta["examples"]:
            index.append({**entry, "name": f"{record.name}/{entry['name']}", "dir": record.name})
    with open(out / "index.jsonl", "w", encoding="utf-8") as fh:
        for entry in index:
            fh.write(json.dumps(entry) + "\n")
    for line, message in failed:
        print(f"failed: manifest line {line}: {message}", file=sys.stderr)
    print(f"{ok} ok, {len(failed)} failed")
    print(f"{rebuilt} rebuilt")
    return EXIT_PARTIAL if failed else EXIT_OK


def load_prepared(data_dir) -> tuple[list, list]:
    """Read the ``prepare`` cache back into paired and unpaired examples."""
    data_dir = Path(data_dir)
    index_path = data_dir / "index.jsonl"
    if not index_path.is_file():
        raise CliError(f"{data_dir} has no index.jsonl; run 'prepare' first")
    paired, unpaired = [], []
    for line in index_path.read_text(encoding="utf-8").splitlines():
        entry = json.loads(line)
        folder = data_dir / entry["dir"]
        files = entry["files"]
        singing = read_mel1(folder / files["singing"])
        contour = contour_from_f0(load_f0_file(folder / files["contour"]), singing.n_frames, singing.hop,
                                  singing.sample_rate)
        if entry["kind"] == "paired":
            source = read_mel1(folder / files["speech_source"]) if "speech_source" in files else None
            paired.append(PairedExample(read_mel1(folder / files["speech"]), singing, contour,
                                        speech_source=source, name=entry["name"]))
        else:
            unpaired.append(UnpairedExample(singing, contour, entry["name"]))
    return paired, unpaired


# ---------------------------------------------------------------- train


def cmd_train(args, settings: Settings) -> int:
    if args.steps is not None:
        settings.values["steps"] = args.steps
        settings.explicit.add("steps")
    seed = _resolve_seed(settings)
    config = settings.train_config(seed)
    model_cfg, dsp_cfg = settings.model_config(), settings.dsp_config()
    if args.resume and not Path(args.resume).is_file():
        raise CliError(f"checkpoint {args.resume} does not exist")
    paired, unpaired = load_prepared(args.data_dir)
    if not paired:
        raise CliError(f"{args.data_dir}: no paired examples")
    n_mels = {ex.singing.n_mels for ex in paired + unpaired}
    if n_mels != {dsp_cfg.n_mels}:
        raise CliError(f"prepared features have {sorted(n_mels)} mel bins, config n_mels = {dsp_cfg.n_mels}")
    run = Path(args.run_dir)
    run.mkdir(parents=True, exist_ok=True)
    settings.dump(run / "config.txt")
    try:
        trainer = train_loop(config, paired, unpaired, checkpoint_dir=run / "checkpoints",
                             metrics_path=run / "metrics.csv", resume=args.resume, model_config=model_cfg,
                             dsp_config=dsp_cfg)
    except KeyboardInterrupt:
        print("interrupted; checkpoint written", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"trained to step {trainer.step}; checkpoint {run / 'checkpoints' / 'final.pt'}")
    return EXIT_OK


# ---------------------------------------------------------------- convert


def _checked_generator(path, settings: Settings):
    """Load a generator; explicitly configured keys must agree with the checkpoint."""
    gen, ckpt = generator_from_checkpoint(path)
    dsp_cfg = DSPConfig(**ckpt["dsp_config"])
    diffs = [k for k in settings.explicit & {f.name for f in dataclasses.fields(DSPConfig)}
             if ckpt["dsp_config"].get(k) != settings.values[k]]
    if "model_size" in settings.explicit:
        diffs += config_differences(ckpt, settings.model_config(), dsp_cfg)
    if diffs:
        raise CliError(f"checkpoint {path} disagrees with config on: {', '.join(sorted(set(diffs)))}")
    return gen, dsp_cfg, ckpt


def _contour_for(args, dsp_cfg: DSPConfig) -> MelodyContour:
    if args.f0:
        track = load_f0_file(args.f0)
        n = int(round(track.times[-1] * dsp_cfg.sample_rate / dsp_cfg.hop)) + 1 if len(track) else 0
    else:
        wave = read_wav(args.melody_from)
        if wave.sample_rate != dsp_cfg.sample_rate:
            wave = dsp.resample_audio(wave, dsp_cfg.sample_rate)
        if len(wave) == 0:
            raise CliError(f"{args.melody_from} is empty")
        track = estimate_f0(wave, dsp_cfg.hop)
        n = len(track)
    if n < 8:
        raise CliError(f"melody contour has {n} frames; at least 8 are needed")
    return contour_from_f0(track, n, dsp_cfg.hop, dsp_cfg.sample_rate)


def cmd_convert(args, settings: Settings) -> int:
    if args.vocoder == "external" and not args.vocoder_cmd:
        raise CliError("--vocoder external needs --vocoder-cmd")
    for p in (args.speech, args.f0 or args.melody_from, args.checkpoint):
        if not Path(p).is_file():
            raise CliError(f"{p} does not exist")
    gen, dsp_cfg, _ = _checked_generator(args.checkpoint, settings)
    contour = _contour_for(args, dsp_cfg)
    speech = read_wav(args.speech)
    if len(speech) == 0:
        raise CliError(f"{args.speech} is empty")
    x = dsp.time_stretch(dsp.log_mel(speech, dsp_cfg), contour.n_frames)
    mel = dsp.LogMelSpectrogram(gen.convert(x.values, contour.onehot), dsp_cfg.hop, dsp_cfg.sample_rate)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    mel_path = out.with_suffix(".mel1")
    write_mel1(mel_path, mel)
    if args.vocoder == "griffinlim":
        spec = dsp.mel_invert(mel, dsp_cfg.fft_size, dsp_cfg.fmin, dsp_cfg.fmax, dsp_cfg.floor_eps)
        write_wav(out, dsp.griffin_lim(spec, dsp_cfg.gl_iterations))
    else:
        cmd = shlex.split(args.vocoder_cmd) + [str(mel_path), str(out)]
        result = subprocess.run(cmd, capture_output=True, text=True)
        if result.returncode != 0:
            raise CliError(f"vocoder command failed ({result.returncode}): {result.stderr.strip()}", EXIT_RUNTIME)
        if not out.is_file():
            raise CliError(f"vocoder command did not write {out}", EXIT_RUNTIME)
    print(f"wrote {out} and {mel_path}")
    return EXIT_OK


# ---------------------------------------------------------------- evaluate


def cmd_evaluate(args, settings: Settings) -> int:
    if args.checkpoint is None and args.stub is None:
        raise CliError("give --checkpoint or --stub")
    manifest = load_manifest(args.manifest)
    if not manifest.paired:
        raise CliError("no paired examples")
    if args.checkpoint:
        generator, dsp_cfg, ckpt = _checked_generator(args.checkpoint, settings)
        model_id, cfg_hash = Path(args.checkpoint).name, ckpt["config_hash"]
    else:
        generator = TargetStub() if args.stub == "target" else (lambda speech, contour: speech)
        dsp_cfg, model_id, cfg_hash = settings.dsp_config(), f"stub:{args.stub}", ""
    settings.values.update(dataclasses.asdict(dsp_cfg))
    testset, failed = [], list(manifest.errors)
    for record in manifest.paired:
        try:
            testset.extend(_prepare_record(record, settings))
        except (ExampleSkipped, AnnotationError, FormatError, F0FileError, ValueError, OSError) as exc:
            failed.append((record.line, f"{record.name}: {exc}"))
    if not testset:
        for line, message in failed:
            print(f"failed: manifest line {line}: {message}", file=sys.stderr)
        raise CliError("no paired examples could be prepared", EXIT_RUNTIME)
    report = evaluate_model(testset, generator, EvalConfig(dsp=dsp_cfg, gl_iterations=dsp_cfg.gl_iterations),
                            model_id, cfg_hash)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write_csv(out)
    summary = report.summary()
    out.with_suffix(".summary.txt").write_text(summary + "\n", encoding="utf-8")
    for line, message in failed:
        print(f"failed: manifest line {line}: {message}", file=sys.stderr)
    for example_id, message in report.failures:
        print(f"failed: {example_id}: {message}", file=sys.stderr)
    print(summary)
    return EXIT_PARTIAL if failed or report.failures else EXIT_OK


# ---------------------------------------------------------------- plot


def cmd_plot(args, settings: Settings) -> int:
    mels = [read_mel1(p) for p in args.inputs]
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(len(mels), 1, figsize=(10, 2.5 * len(mels)), squeeze=False)
    for ax, mel, path in zip(axes[:, 0], mels, args.inputs):
        seconds = mel.n_frames * mel.hop / mel.sample_rate
        im = ax.imshow(mel.values, origin="lower", aspect="auto", extent=(0, seconds, 0, mel.n_mels))
        ax.set_title(Path(path).name)
        ax.set_ylabel("mel bin")
        fig.colorbar(im, ax=ax, label="log magnitude")
    axes[-1, 0].set_xlabel("time (s)")
    fig.tight_layout()
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(args.out, dpi=100)
    plt.close(fig)
    print(f"wrote {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- entry


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"key = value settings file (default: ${CONFIG_ENV})")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting")
    common.add_argument("--seed", type=int, help="seed for all randomness")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="speech2sing", description="Speech-to-singing conversion.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", parents=[common], help="extract features from a manifest")
    p.add_argument("manifest")
    p.add_argument("out_dir")
    p.add_argument("--force", action="store_true", help="rebuild up-to-date entries")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", parents=[common], help="train on prepared features")
    p.add_argument("data_dir")
    p.add_argument("run_dir")
    p.add_argument("--steps", type=int)
    p.add_argument("--resume", metavar="CKPT")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("convert", parents=[common], help="convert one speech recording")
    p.add_argument("--speech", required=True)
    melody = p.add_mutually_exclusive_group(required=True)
    melody.add_argument("--f0", help="'time_sec f0_hz' melody file")
    melody.add_argument("--melody-from", help="WAV whose pitch track gives the melody")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--vocoder", choices=("griffinlim", "external"), default="griffinlim")
    p.add_argument("--vocoder-cmd", help="invoked as '<cmd> <mel_in.mel1> <wav_out.wav>'")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("evaluate", parents=[common], help="LSD and RCA over a paired manifest")
    p.add_argument("manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--stub", choices=("target", "input"),
                   help="score a stand-in generator: the target itself or the stretched speech")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot", parents=[common], help="render MEL1 files to a PNG")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = Settings.from_args(args)
        return args.func(args, settings)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TrainingError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
