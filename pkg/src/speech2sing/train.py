"""BEGAN losses, the k_t equilibrium controller and the paired/unpaired training loop."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import dsp
from .data import PairedExample
from .dsp import DSPConfig
from .melody import N_NOTES, REST_ROW
from .net import Discriminator, Generator, ModelConfig, build_models, reconstruction_loss

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
METRIC_FIELDS = ("step", "L_D", "L_G", "L_real", "L_fake", "k", "lr")


class TrainingError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BEGANState:
    k: float = 0.0
    gamma: float = 0.0
    lambda_k: float = 0.01
    step: int = 0

    def __post_init__(self):
        if not 0.0 <= self.k <= 1.0:
            raise ValueError(f"k must lie in [0, 1], got {self.k}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.lambda_k <= 0:
            raise ValueError(f"lambda must be positive, got {self.lambda_k}")


def _check_nonnegative(**losses):
    for name, value in losses.items():
        if float(value.detach() if isinstance(value, torch.Tensor) else value) < 0:
            raise ValueError(f"{name} must be nonnegative, got {float(value)}")


def loss_discriminator(l_real, l_fake, k):
    """L_D = L(Y) - k * L(G(X, C))."""
    _check_nonnegative(l_real=l_real, l_fake=l_fake)
    return l_real - k * l_fake


def mean_l1(y, y_hat):
    if tuple(y.shape) != tuple(y_hat.shape):
        raise ValueError(f"shape mismatch: {tuple(y.shape)} vs {tuple(y_hat.shape)}")
    if isinstance(y, torch.Tensor) or isinstance(y_hat, torch.Tensor):
        return (torch.as_tensor(y) - torch.as_tensor(y_hat)).abs().mean()
    return float(np.mean(np.abs(np.asarray(y) - np.asarray(y_hat))))


def loss_generator(l_fake, y, y_hat, beta):
    """L_G = L(G) + beta * mean|Y - G| for paired data; just L(G) when ``y`` is None."""
    if y is None:
        return l_fake
    return l_fake + beta * mean_l1(y, y_hat)


def update_k(state: BEGANState, l_real: float, l_fake: float) -> BEGANState:
    """k <- clamp(k + lambda * (gamma * L(Y) - L(G)), 0, 1)."""
    _check_nonnegative(l_real=l_real, l_fake=l_fake)
    k = state.k + state.lambda_k * (state.gamma * float(l_real) - float(l_fake))
    return dataclasses.replace(state, k=min(max(k, 0.0), 1.0), step=state.step + 1)


def diversity_ratio_estimate(l_real_history, l_fake_history) -> float:
    """Observed E[L(G)] / E[L(Y)]; for monitoring only."""
    real = np.asarray(l_real_history, dtype=np.float64)
    fake = np.asarray(l_fake_history, dtype=np.float64)
    if real.size == 0 or fake.size == 0:
        raise ValueError("empty loss history")
    mean_real = real.mean()
    if mean_real == 0:
        raise ZeroDivisionError("mean L_real is zero; diversity ratio undefined")
    return float(fake.mean() / mean_real)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 20000
    batch_size: int = 32
    lr: float = 0.001
    lr_decay: float = 0.99
    decay_interval: int = 100
    lambda_k: float = 0.01
    k0: float = 0.0
    gamma: float = 0.0
    beta: float = 0.5
    segment_frames: int = 256
    seed: int = 0
    unpaired_ratio: int = 1
    random_resample: bool = True
    checkpoint_every: int = 1000

    def __post_init__(self):
        positive = ("steps", "batch_size", "lr", "lr_decay", "decay_interval", "lambda_k",
                    "segment_frames", "checkpoint_every")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.segment_frames % 8:
            raise ConfigError(f"segment_frames must be divisible by 8, got {self.segment_frames}")
        if not 0 <= self.k0 <= 1:
            raise ConfigError(f"k0 must lie in [0, 1], got {self.k0}")
        if not 0 <= self.gamma <= 1:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.beta < 0:
            raise ConfigError(f"beta must be nonnegative, got {self.beta}")
        if self.unpaired_ratio < 0:
            raise ConfigError(f"unpaired_ratio must be >= 0, got {self.unpaired_ratio}")

    def lr_at(self, step: int) -> float:
        """Learning rate for the step after ``step`` completed steps."""
        return self.lr * self.lr_decay ** (step // self.decay_interval)


def config_hash(model_cfg: ModelConfig, dsp_cfg: DSPConfig) -> str:
    blob = json.dumps({"model": model_cfg.to_dict(), "dsp": dataclasses.asdict(dsp_cfg)}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class Batch:
    x: torch.Tensor
    contour: torch.Tensor
    y: torch.Tensor
    paired: bool
    ids: list = field(default_factory=list)


def _crop(arrays, n_frames, segment, rng):
    """Random aligned crop (or pad) of equally long arrays to ``segment`` frames."""
    if n_frames >= segment:
        start = int(rng.integers(0, n_frames - segment + 1))
        return [a[:, start : start + segment] for a in arrays], start
    return arrays, 0


def _pad_to(values, segment, fill):
    n = values.shape[1]
    if n >= segment:
        return values
    return np.concatenate([values, np.full((values.shape[0], segment - n), fill)], axis=1)


def _pad_contour(onehot, segment):
    n = onehot.shape[1]
    if n >= segment:
        return onehot
    rest = np.zeros((N_NOTES, segment - n))
    rest[REST_ROW] = 1
    return np.concatenate([onehot, rest], axis=1)


class Trainer:
    """Owns the models, optimizers, BEGAN state and data RNG for one run."""

    def __init__(self, config: TrainConfig, paired: list, unpaired: list = (),
                 model_config: ModelConfig = ModelConfig(), dsp_config: DSPConfig = DSPConfig()):
        if not paired:
            raise ConfigError("training needs at least one paired example")
        self.config = config
        self.model_config = model_config
        self.dsp_config = dsp_config
        self.paired = list(paired)
        self.unpaired = list(unpaired)
        self.generator, self.discriminator = build_models(model_config, seed=config.seed)
        self.opt_g = torch.optim.Adam(self.generator.parameters(), lr=config.lr)
        self.opt_d = torch.optim.Adam(self.discriminator.parameters(), lr=config.lr)
        self.state = BEGANState(k=config.k0, gamma=config.gamma, lambda_k=config.lambda_k)
        self.rng = np.random.default_rng(config.seed)
        self.step = 0

    def is_paired_step(self, step: int) -> bool:
        """Schedule for 1-based ``step``: one paired step then ``unpaired_ratio`` unpaired ones."""
        if not self.unpaired or self.config.unpaired_ratio == 0:
            return True
        return (step - 1) % (1 + self.config.unpaired_ratio) == 0

    def sample_batch(self, paired: bool) -> Batch:
        cfg = self.config
        pool = self.paired if paired else self.unpaired
        floor = self.model_config.log_floor
        xs, cs, ys, ids = [], [], [], []
        for idx in self.rng.integers(0, len(pool), size=cfg.batch_size):
            ex = pool[int(idx)]
            n = ex.n_frames
            if paired:
                source = ex.speech_source if ex.speech_source is not None else ex.speech
            else:
                source = ex.singing
            if cfg.random_resample:
                x = dsp.time_stretch(dsp.random_resample(source, self.rng), n).values
            elif source.n_frames != n:
                x = dsp.time_stretch(source, n).values
            else:
                x = source.values
            (x, c, y), _ = _crop([x, ex.contour.onehot, ex.singing.values], n, cfg.segment_frames, self.rng)
            xs.append(_pad_to(x, cfg.segment_frames, floor))
            ys.append(_pad_to(y, cfg.segment_frames, floor))
            cs.append(_pad_contour(c, cfg.segment_frames))
            ids.append(ex.name or str(int(idx)))

        def stack(arrs):
            return torch.as_tensor(np.stack(arrs), dtype=torch.float32)

        return Batch(stack(xs), stack(cs), stack(ys), paired, ids)

    def _set_lr(self, lr: float) -> None:
        for opt in (self.opt_g, self.opt_d):
            for group in opt.param_groups:
                group["lr"] = lr

    def train_step(self, batch: Batch) -> dict:
        """One discriminator and one generator update from a single forward pass, then update k."""
        gen, disc = self.generator, self.discriminator
        lr = self.config.lr_at(self.step)
        self._set_lr(lr)
        g_params = list(gen.parameters())
        d_params = list(disc.parameters())

        y_hat = gen(batch.x, batch.contour)
        l_fake = reconstruction_loss(disc(y_hat), y_hat)
        l_g = loss_generator(l_fake, batch.y if batch.paired else None, y_hat, self.config.beta)

        l_real = reconstruction_loss(disc(batch.y), batch.y)
        fake = y_hat.detach()
        l_fake_d = reconstruction_loss(disc(fake), fake)
        l_d = loss_discriminator(l_real, l_fake_d, self.state.k)

        values = {"L_D": l_d.item(), "L_G": l_g.item(), "L_real": l_real.item(), "L_fake": l_fake_d.item()}
        if not all(np.isfinite(v) for v in values.values()):
            raise TrainingError(f"non-finite loss at step {self.step + 1} on batch {batch.ids}: {values}")

        g_grads = torch.autograd.grad(l_g, g_params)
        d_grads = torch.autograd.grad(l_d, d_params)
        for p, g in zip(g_params, g_grads):
            p.grad = g
        for p, g in zip(d_params, d_grads):
            p.grad = g
        self.opt_d.step()
        self.opt_g.step()
        self.opt_d.zero_grad(set_to_none=True)
        self.opt_g.zero_grad(set_to_none=True)

        self.state = update_k(self.state, values["L_real"], values["L_fake"])
        self.step += 1
        return {"step": self.step, **values, "k": self.state.k, "lr": lr}

    def run(self, until: int | None = None, metrics_path=None, checkpoint_dir=None, callback=None) -> list:
        """Train up to step ``until`` (default: config.steps); returns the metric rows."""
        until = self.config.steps if until is None else until
        rows = []
        writer = fh = None
        if metrics_path is not None:
            metrics_path = Path(metrics_path)
            new_file = not metrics_path.exists() or self.step == 0
            fh = open(metrics_path, "w" if self.step == 0 else "a", newline="")
            writer = csv.writer(fh)
            if new_file:
                writer.writerow(METRIC_FIELDS)
        try:
            while self.step < until:
                batch = self.sample_batch(self.is_paired_step(self.step + 1))
                row = self.train_step(batch)
                rows.append(row)
                if writer is not None:
                    writer.writerow([row["step"]] + [repr(float(row[f])) for f in METRIC_FIELDS[1:]])
                    fh.flush()
                if callback is not None:
                    callback(self, row)
                if checkpoint_dir is not None and self.step % self.config.checkpoint_every == 0:
                    self.save_checkpoint(Path(checkpoint_dir) / f"step_{self.step:07d}.pt")
                if self.step % 100 == 0:
                    log.info("step %d L_D %.4f L_G %.4f k %.4f", self.step, row["L_D"], row["L_G"], row["k"])
        except KeyboardInterrupt:
            if checkpoint_dir is not None:
                path = self.save_checkpoint(Path(checkpoint_dir) / f"step_{self.step:07d}.pt")
                log.warning("interrupted; wrote %s", path)
            raise
        finally:
            if fh is not None:
                fh.close()
        return rows

    def state_dict(self) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "step": self.step,
            "config_hash": config_hash(self.model_config, self.dsp_config),
            "model_config": self.model_config.to_dict(),
            "dsp_config": dataclasses.asdict(self.dsp_config),
            "train_config": dataclasses.asdict(self.config),
            "generator": self.generator.state_dict(),
            "discriminator": self.discriminator.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "began": dataclasses.asdict(self.state),
            "rng": self.rng.bit_generator.state,
        }

    def save_checkpoint(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(self.state_dict(), tmp)
        tmp.replace(path)
        return path

    def load_checkpoint(self, path) -> None:
        ckpt = load_checkpoint(path)
        expected = config_hash(self.model_config, self.dsp_config)
        if ckpt["config_hash"] != expected:
            diff = config_differences(ckpt, self.model_config, self.dsp_config)
            raise ConfigError(f"checkpoint {path} was trained with a different config: {diff}")
        self.generator.load_state_dict(ckpt["generator"])
        self.discriminator.load_state_dict(ckpt["discriminator"])
        self.opt_g.load_state_dict(ckpt["opt_g"])
        self.opt_d.load_state_dict(ckpt["opt_d"])
        self.state = BEGANState(**ckpt["began"])
        self.rng.bit_generator.state = ckpt["rng"]
        self.step = ckpt["step"]


def load_checkpoint(path) -> dict:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    version = ckpt.get("format_version") if isinstance(ckpt, dict) else None
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint format version {version!r}")
    return ckpt


def config_differences(ckpt: dict, model_cfg: ModelConfig, dsp_cfg: DSPConfig) -> list:
    """Names of model/DSP keys whose values differ from the checkpoint's."""
    diffs = []
    for key, value in model_cfg.to_dict().items():
        if ckpt["model_config"].get(key) != value:
            diffs.append(key)
    for key, value in dataclasses.asdict(dsp_cfg).items():
        if ckpt["dsp_config"].get(key) != value:
            diffs.append(key)
    return diffs


def generator_from_checkpoint(path) -> tuple[Generator, dict]:
    ckpt = load_checkpoint(path)
    gen = Generator(ModelConfig.from_dict(ckpt["model_config"]))
    gen.load_state_dict(ckpt["generator"])
    gen.eval()
    return gen, ckpt


def discriminator_from_checkpoint(path) -> Discriminator:
    ckpt = load_checkpoint(path)
    disc = Discriminator(ModelConfig.from_dict(ckpt["model_config"]))
    disc.load_state_dict(ckpt["discriminator"])
    return disc


def train_loop(config: TrainConfig, paired: list, unpaired: list = (), checkpoint_dir=None,
               metrics_path=None, resume=None, model_config: ModelConfig = ModelConfig(),
               dsp_config: DSPConfig = DSPConfig(), until: int | None = None) -> Trainer:
    """Train (optionally resuming from a checkpoint); a final checkpoint is written to ``checkpoint_dir``."""
    trainer = Trainer(config, paired, unpaired, model_config, dsp_config)
    if resume is not None:
        trainer.load_checkpoint(resume)
        log.info("resumed from %s at step %d", resume, trainer.step)
    trainer.run(until, metrics_path, checkpoint_dir)
    if checkpoint_dir is not None:
        final = trainer.save_checkpoint(Path(checkpoint_dir) / "final.pt")
        log.info("wrote %s", final)
    return trainer


def batch_from_examples(examples, segment_frames: int | None = None) -> Batch:
    """Deterministic batch of whole examples (or their first ``segment_frames``) for evaluation."""
    xs, cs, ys = [], [], []
    for ex in examples:
        n = segment_frames or ex.n_frames
        speech = ex.speech.values if isinstance(ex, PairedExample) else ex.singing.values
        xs.append(speech[:, :n])
        cs.append(ex.contour.onehot[:, :n])
        ys.append(ex.singing.values[:, :n])
    paired = all(isinstance(ex, PairedExample) for ex in examples)
    t = lambda arrs: torch.as_tensor(np.stack(arrs), dtype=torch.float32)  # noqa: E731
    return Batch(t(xs), t(cs), t(ys), paired, [ex.name for ex in examples])

