"""Adversarial fine-tuning pieces: unrolled N-step generators, MPD/MRD and losses."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.parametrizations import weight_norm

from .backbone import Generator
from .dsp import ConfigError, InputError, SpectralConfig, make_filterbank, mel_spectrogram, stft
from .flow import euler_sample_endpoint, euler_sample_velocity, uniform_schedule

LRELU_SLOPE = 0.1

# (window, hop, mel bins) for the multi-scale mel reconstruction loss
MEL_LOSS_SCALES = tuple((w, w // 4, m) for w, m in zip(
    (32, 64, 128, 256, 512, 1024, 2048), (5, 10, 20, 40, 80, 160, 320)
))


class NStepGenerator(nn.Module):
    """A Flow Matching model unrolled through ``n_steps`` Euler steps.

    The condition is encoded once and reused by every step. Gradients flow
    through all steps, including into the intermediate states.
    """

    def __init__(self, generator: Generator, n_steps: int):
        super().__init__()
        if n_steps not in (1, 2, 4):
            raise ConfigError(f"n_steps must be 1, 2 or 4, got {n_steps}")
        self.generator = generator
        self.n_steps = n_steps
        self.schedule = uniform_schedule(n_steps)

    def forward(self, x0, cond):
        return n_step_generate(self, x0, cond)


def n_step_generate(gen: NStepGenerator, x0, cond):
    model = gen.generator
    feats = model.encode_condition(cond)

    def fn(x, t, _c):
        return model(x, t, cond_feat=feats)

    if model.cfg.parameterization == "velocity":
        return euler_sample_velocity(fn, x0, gen.schedule)
    return euler_sample_endpoint(fn, x0, gen.schedule)


@dataclass
class DiscriminatorConfig:
    periods: list[int] = field(default_factory=lambda: [2, 3, 5, 7, 11])
    mpd_channels: list[int] = field(default_factory=lambda: [32, 128, 512, 1024])
    mpd_final_channels: int = 1024
    mrd_n_ffts: list[int] = field(default_factory=lambda: [512, 1024, 2048])
    mrd_channels: int = 32

    @classmethod
    def desk(cls) -> "DiscriminatorConfig":
        return cls(mpd_channels=[8, 16, 32, 32], mpd_final_channels=32, mrd_channels=8)

    @property
    def mrd_resolutions(self) -> list[SpectralConfig]:
        return [SpectralConfig(n, n // 4) for n in self.mrd_n_ffts]

    def to_dict(self) -> dict:
        return asdict(self)


def period_reshape(x: torch.Tensor, period: int) -> torch.Tensor:
    """``[B, L] -> [B, 1, ceil(L / p), p]`` after reflect-padding the right end."""
    b, n = x.shape
    if n % period:
        pad = period - n % period
        mode = "reflect" if pad < n else "replicate"
        x = F.pad(x.unsqueeze(1), (0, pad), mode=mode).squeeze(1)
        n = n + pad
    return x.reshape(b, 1, n // period, period)


class PeriodDiscriminator(nn.Module):
    def __init__(self, period: int, channels: list[int], final_channels: int):
        super().__init__()
        self.period = period
        convs = []
        c_in = 1
        for c in channels:
            convs.append(weight_norm(nn.Conv2d(c_in, c, (5, 1), (3, 1), padding=(2, 0))))
            c_in = c
        convs.append(weight_norm(nn.Conv2d(c_in, final_channels, (5, 1), 1, padding=(2, 0))))
        self.convs = nn.ModuleList(convs)
        self.post = weight_norm(nn.Conv2d(final_channels, 1, (3, 1), 1, padding=(1, 0)))

    def forward(self, x):
        h = period_reshape(x, self.period)
        feats = []
        for conv in self.convs:
            h = F.leaky_relu(conv(h), LRELU_SLOPE)
            feats.append(h)
        return self.post(h).flatten(1), feats


class ResolutionDiscriminator(nn.Module):
    def __init__(self, resolution: SpectralConfig, channels: int):
        super().__init__()
        self.resolution = resolution
        c = channels
        self.convs = nn.ModuleList([
            weight_norm(nn.Conv2d(1, c, (3, 9), padding=(1, 4))),
            weight_norm(nn.Conv2d(c, c, (3, 9), stride=(1, 2), padding=(1, 4))),
            weight_norm(nn.Conv2d(c, c, (3, 9), stride=(1, 2), padding=(1, 4))),
            weight_norm(nn.Conv2d(c, c, (3, 9), stride=(1, 2), padding=(1, 4))),
            weight_norm(nn.Conv2d(c, c, (3, 3), padding=(1, 1))),
        ])
        self.post = weight_norm(nn.Conv2d(c, 1, (3, 3), padding=(1, 1)))

    def forward(self, x):
        h = stft(x, self.resolution).data.abs().unsqueeze(1)  # [B, 1, frames, bins]
        feats = []
        for conv in self.convs:
            h = F.leaky_relu(conv(h), LRELU_SLOPE)
            feats.append(h)
        return self.post(h).flatten(1), feats


class MultiPeriodDiscriminator(nn.Module):
    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.discriminators = nn.ModuleList(
            PeriodDiscriminator(p, cfg.mpd_channels, cfg.mpd_final_channels) for p in cfg.periods
        )
        self.max_period = max(cfg.periods)

    def forward(self, x):
        if x.shape[-1] < self.max_period:
            raise InputError(f"input of length {x.shape[-1]} shorter than period {self.max_period}")
        return [d(x) for d in self.discriminators]


class MultiResolutionDiscriminator(nn.Module):
    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.discriminators = nn.ModuleList(
            ResolutionDiscriminator(r, cfg.mrd_channels) for r in cfg.mrd_resolutions
        )
        self.max_n_fft = max(cfg.mrd_n_ffts)

    def forward(self, x):
        if x.shape[-1] < self.max_n_fft:
            raise InputError(f"input of length {x.shape[-1]} shorter than n_fft {self.max_n_fft}")
        return [d(x) for d in self.discriminators]


class DiscriminatorBank(nn.Module):
    """MPD followed by MRD; ``forward`` returns one ``(scores, features)`` pair per sub-discriminator."""

    def __init__(self, cfg: DiscriminatorConfig | None = None):
        super().__init__()
        self.cfg = cfg or DiscriminatorConfig()
        self.mpd = MultiPeriodDiscriminator(self.cfg)
        self.mrd = MultiResolutionDiscriminator(self.cfg)

    def forward(self, x):
        return self.mpd(x) + self.mrd(x)

    def __len__(self):
        return len(self.mpd.discriminators) + len(self.mrd.discriminators)


def hinge_d_loss(real_scores, fake_scores) -> torch.Tensor:
    if len(real_scores) != len(fake_scores):
        raise InputError("real and fake score lists differ in length")
    loss = 0.0
    for r, f in zip(real_scores, fake_scores):
        loss = loss + F.relu(1 - r).mean() + F.relu(1 + f).mean()
    return loss


def hinge_g_loss(fake_scores) -> torch.Tensor:
    loss = 0.0
    for f in fake_scores:
        loss = loss - f.mean()
    return loss


def feature_matching_loss(real_features, fake_features) -> torch.Tensor:
    """Mean L1 distance over every (sub-discriminator, layer) pair."""
    if len(real_features) != len(fake_features):
        raise InputError("feature lists differ in sub-discriminator count")
    total, count = 0.0, 0
    for rs, fs in zip(real_features, fake_features):
        if len(rs) != len(fs):
            raise InputError("feature lists differ in layer count")
        for r, f in zip(rs, fs):
            if r.shape != f.shape:
                raise InputError(f"feature shapes differ: {tuple(r.shape)} vs {tuple(f.shape)}")
            total = total + (r - f).abs().mean()
            count += 1
    if count == 0:
        raise InputError("no features to match")
    return total / count


class MultiScaleMelLoss(nn.Module):
    """Sum over scales of the mean absolute log-mel difference."""

    def __init__(self, sample_rate: int = 24000, scales=MEL_LOSS_SCALES, floor: float = 1e-5):
        super().__init__()
        self.floor = floor
        self.scales = [
            (SpectralConfig(w, h), make_filterbank("mel", m, w, sample_rate)) for w, h, m in scales
        ]

    def forward(self, x_hat, x):
        if x_hat.shape != x.shape:
            raise InputError(f"shape mismatch {tuple(x_hat.shape)} vs {tuple(x.shape)}")
        loss = 0.0
        for cfg, fb in self.scales:
            a = mel_spectrogram(x_hat, cfg, fb, log_scale=True, floor=self.floor)
            b = mel_spectrogram(x, cfg, fb, log_scale=True, floor=self.floor)
            loss = loss + (a - b).abs().mean()
        return loss


def multiscale_mel_loss(x_hat, x, sample_rate: int = 24000):
    return MultiScaleMelLoss(sample_rate)(x_hat, x)


@dataclass
class GanLossWeights:
    w_adv: float = 1.0
    w_fm: float = 2.0
    w_mel: float = 45.0

    def __post_init__(self):
        if min(self.w_adv, self.w_fm, self.w_mel) < 0:
            raise ConfigError("loss weights must be non-negative")


def gan_generator_loss(weights: GanLossWeights, adv, fm, mel):
    return weights.w_adv * adv + weights.w_fm * fm + weights.w_mel * mel
