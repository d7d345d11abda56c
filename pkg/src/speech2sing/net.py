"""Generator (content/pitch encoders + progressive decoder) and BEGAN discriminator."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dsp import FLOOR_EPS
from .melody import N_NOTES, REST_ROW


@dataclass(frozen=True)
class ModelConfig:
    n_mels: int = 80
    n_notes: int = N_NOTES
    pitch_embed: int = 64
    pitch_widths: tuple = (64, 32, 16)
    decoder_widths: tuple = (128, 64, 64)
    leaky_slope: float = 0.2
    groups: int = 4
    log_floor: float = math.log(FLOOR_EPS)
    clamp_margin: float = 1.0
    clamp_max: float = 10.0
    pitch_skips: bool = True
    disc_widths: tuple = (128, 128, 64)

    def __post_init__(self):
        if self.n_mels % 8:
            raise ValueError(f"n_mels must be divisible by 8, got {self.n_mels}")
        object.__setattr__(self, "pitch_widths", tuple(self.pitch_widths))
        object.__setattr__(self, "decoder_widths", tuple(self.decoder_widths))
        object.__setattr__(self, "disc_widths", tuple(self.disc_widths))
        for w in self.decoder_widths:
            if w % self.groups:
                raise ValueError(f"decoder width {w} not divisible by {self.groups} groups")

    @property
    def content_widths(self) -> tuple:
        return (self.n_mels // 2, self.n_mels // 4, self.n_mels // 8)

    @classmethod
    def reduced(cls) -> ModelConfig:
        """Toy-scale model (8 mel bins, widths divided by 8) for gradient checks."""
        return cls(n_mels=8, pitch_embed=8, pitch_widths=(8, 4, 2), decoder_widths=(16, 8, 8),
                   disc_widths=(16, 16, 8))

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)


def _conv(c_in, c_out, stride=1):
    return nn.Conv1d(c_in, c_out, kernel_size=3, stride=stride, padding=1)


def _check_finite(x: torch.Tensor, what: str) -> None:
    if not torch.isfinite(x).all():
        raise ValueError(f"{what} contains non-finite values")


class ContentEncoder(nn.Module):
    """Three {instance norm, stride-2 conv, LeakyReLU} stacks; mel bins act as channels."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        widths = (cfg.n_mels,) + cfg.content_widths
        self.stacks = nn.ModuleList(
            nn.Sequential(
                nn.InstanceNorm1d(c_in, affine=False),
                _conv(c_in, c_out, stride=2),
                nn.LeakyReLU(cfg.leaky_slope),
            )
            for c_in, c_out in zip(widths[:-1], widths[1:])
        )

    def forward(self, x):
        skips = []
        for stack in self.stacks:
            x = stack(x)
            skips.append(x)
        return x, skips


class PitchEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.embed = nn.Embedding(cfg.n_notes, cfg.pitch_embed)
        widths = (cfg.pitch_embed,) + cfg.pitch_widths
        self.stacks = nn.ModuleList(
            nn.Sequential(_conv(c_in, c_out, stride=2), nn.LeakyReLU(cfg.leaky_slope))
            for c_in, c_out in zip(widths[:-1], widths[1:])
        )

    def forward(self, notes):
        h = self.embed(notes).transpose(1, 2)
        skips = [h]
        for stack in self.stacks:
            h = stack(h)
            skips.append(h)
        # skips: embedding at T, then T/2, T/4 (the last entry is the latent itself)
        return h, skips[:-1]


class UpStack(nn.Module):
    """Two convs + group norm, then x2 nearest-neighbour in time and x2 channels by concatenation."""

    def __init__(self, c_in, width, cfg: ModelConfig):
        super().__init__()
        self.body = nn.Sequential(
            _conv(c_in, width),
            nn.LeakyReLU(cfg.leaky_slope),
            _conv(width, width),
            nn.GroupNorm(cfg.groups, width),
            nn.LeakyReLU(cfg.leaky_slope),
        )
        self.grow = _conv(width, width)
        self.out_channels = 2 * width

    def forward(self, h):
        h = self.body(h)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        return torch.cat([h, self.grow(h)], dim=1)


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.pitch_skips = cfg.pitch_skips
        c_in = cfg.content_widths[-1] + cfg.pitch_widths[-1]
        # content skips join after the first two stacks (T/4, T/2); pitch skips after all three
        skip_widths = [cfg.content_widths[1], cfg.content_widths[0], 0]
        if cfg.pitch_skips:
            pitch = (cfg.pitch_widths[1], cfg.pitch_widths[0], cfg.pitch_embed)
            skip_widths = [a + b for a, b in zip(skip_widths, pitch)]
        stacks = []
        for width, skip in zip(cfg.decoder_widths, skip_widths):
            stack = UpStack(c_in, width, cfg)
            stacks.append(stack)
            c_in = stack.out_channels + skip
        self.stacks = nn.ModuleList(stacks)
        self.head = nn.Conv1d(c_in, cfg.n_mels, kernel_size=1)

    def forward(self, content, pitch, skips, pitch_skips=None):
        if content.shape[-1] != pitch.shape[-1]:
            raise ValueError(f"latent lengths differ: content {content.shape[-1]} vs pitch {pitch.shape[-1]}")
        h = torch.cat([content, pitch], dim=1)
        joins = [[skips[1]], [skips[0]], []]
        if self.pitch_skips:
            if pitch_skips is None:
                raise ValueError("this decoder needs pitch-encoder skip features")
            for join, extra in zip(joins, pitch_skips[::-1]):
                join.append(extra)
        for stack, join in zip(self.stacks, joins):
            h = stack(h)
            for skip in join:
                if skip.shape[-1] != h.shape[-1]:
                    raise ValueError(f"skip length {skip.shape[-1]} does not match decoder length {h.shape[-1]}")
            h = torch.cat([h] + join, dim=1)
        return self.head(h)


class Generator(nn.Module):
    """G(X, C): speech log-mel (B, F, T) and one-hot contour (B, 128, T) to singing log-mel."""

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        self.content_encoder = ContentEncoder(cfg)
        self.pitch_encoder = PitchEncoder(cfg)
        self.decoder = Decoder(cfg)

    def encode_content(self, x):
        _check_finite(x, "speech features")
        if x.shape[1] != self.cfg.n_mels:
            raise ValueError(f"expected {self.cfg.n_mels} mel bins, got {x.shape[1]}")
        if x.shape[-1] % 8:
            raise ValueError(f"frame count must be divisible by 8, got {x.shape[-1]}")
        return self.content_encoder(x)

    def encode_pitch(self, contour):
        if contour.shape[1] != self.cfg.n_notes:
            raise ValueError(f"expected {self.cfg.n_notes} contour rows, got {contour.shape[1]}")
        if not ((contour == 0) | (contour == 1)).all() or not (contour.sum(dim=1) == 1).all():
            raise ValueError("melody contour columns must be one-hot")
        if contour.shape[-1] % 8:
            raise ValueError(f"frame count must be divisible by 8, got {contour.shape[-1]}")
        return self.pitch_encoder(contour.argmax(dim=1))

    def decode(self, content, pitch, skips, pitch_skips=None):
        out = self.decoder(content, pitch, skips, pitch_skips)
        lo = self.cfg.log_floor - self.cfg.clamp_margin
        return torch.clamp(out, lo, self.cfg.clamp_max)

    def forward(self, x, contour):
        if x.shape[-1] != contour.shape[-1]:
            raise ValueError(f"speech has {x.shape[-1]} frames but contour has {contour.shape[-1]}")
        content, skips = self.encode_content(x)
        pitch, pitch_skips = self.encode_pitch(contour)
        return self.decode(content, pitch, skips, pitch_skips)

    @torch.no_grad()
    def convert(self, speech: np.ndarray, contour: np.ndarray) -> np.ndarray:
        """Inference on unbatched arrays of any length; pads to a multiple of 8 and crops back."""
        n = speech.shape[1]
        if contour.shape[1] != n:
            raise ValueError(f"speech has {n} frames but contour has {contour.shape[1]}")
        pad = (-n) % 8
        dtype = next(self.parameters()).dtype
        x = torch.as_tensor(np.asarray(speech), dtype=dtype)
        c = torch.as_tensor(np.asarray(contour), dtype=dtype)
        if pad:
            x = F.pad(x, (0, pad), value=self.cfg.log_floor)
            rest = torch.zeros(c.shape[0], pad, dtype=dtype)
            rest[REST_ROW] = 1
            c = torch.cat([c, rest], dim=1)
        was_training = self.training
        self.eval()
        try:
            out = self(x[None], c[None])[0, :, :n]
        finally:
            self.train(was_training)
        return out.cpu().numpy()


class Discriminator(nn.Module):
    """BEGAN autoencoder: three stride-2 conv stacks, then three x2-upsample conv stacks.

    The bottleneck has to be wide enough to reconstruct real spectrograms;
    with gamma = 0 the generator is pulled toward this autoencoder's fixed
    points, so a weak reconstruction caps how closely G can fit its targets.
    """

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        widths = (cfg.n_mels,) + cfg.disc_widths
        self.encoder = nn.Sequential(*[
            layer
            for c_in, c_out in zip(widths[:-1], widths[1:])
            for layer in (_conv(c_in, c_out, stride=2), nn.LeakyReLU(cfg.leaky_slope))
        ])
        rev = widths[::-1]
        layers = []
        for i, (c_in, c_out) in enumerate(zip(rev[:-1], rev[1:])):
            layers += [nn.Upsample(scale_factor=2, mode="nearest"), _conv(c_in, c_out)]
            if i < len(rev) - 2:
                layers.append(nn.LeakyReLU(cfg.leaky_slope))
        self.decoder = nn.Sequential(*layers)

    def forward(self, y):
        if y.shape[-1] % 8:
            raise ValueError(f"frame count must be divisible by 8, got {y.shape[-1]}")
        return self.decoder(self.encoder(y))


def reconstruction_loss(recon: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """BEGAN energy L(y): mean absolute autoencoder reconstruction error."""
    return (recon - y).abs().mean()


def discriminate(disc: nn.Module, y: torch.Tensor):
    """Return the autoencoder reconstruction of ``y`` and its loss L(y)."""
    _check_finite(y, "discriminator input")
    recon = disc(y)
    return recon, reconstruction_loss(recon, y)


def build_models(cfg: ModelConfig = ModelConfig(), seed: int = 0, dtype=torch.float32):
    """Seeded generator/discriminator pair; the global torch RNG is left untouched."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        gen = Generator(cfg)
        nn.init.uniform_(gen.pitch_encoder.embed.weight, -1.0, 1.0)
        disc = Discriminator(cfg)
    return gen.to(dtype), disc.to(dtype)
