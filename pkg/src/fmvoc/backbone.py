"""Multi-resolution STFT-branch generator ``g(x_t, t | c)``.

Three branches each analyse the noisy waveform with their own STFT, run a
ConvNeXt stack over the concatenated real/imaginary coefficients and resynthesise
with the matching ISTFT; the branch waveforms are summed. A shared ConvNeXt
encoder deepens the conditioning features once per utterance.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Literal, Optional

import torch
from torch import nn

from .dsp import ConfigError, InputError, SpectralConfig, istft, stft, ComplexSpectrogram


@dataclass
class BranchConfig:
    n_fft: int
    hop: int
    embed_dim: int
    n_layers: int
    ff_factor: int = 3
    kernel: int = 7

    def __post_init__(self):
        if self.embed_dim <= 0:
            raise ConfigError("embed_dim must be positive")
        if self.kernel % 2 == 0:
            raise ConfigError("kernel must be odd")

    @property
    def spectral(self) -> SpectralConfig:
        return SpectralConfig(self.n_fft, self.hop)


@dataclass
class ModelConfig:
    branches: list[BranchConfig]
    cond_in_dim: int = 100
    cond_dim: int = 512
    cond_layers: int = 4
    time_dim: int = 512
    cond_feature_kind: Literal["mel", "log_mel", "generic"] = "log_mel"
    sample_rate: int = 24000
    cond_n_fft: int = 1024
    cond_hop: int = 256
    ff_factor: int = 3
    kernel: int = 7
    parameterization: Literal["endpoint", "velocity"] = "endpoint"

    def __post_init__(self):
        self.branches = [b if isinstance(b, BranchConfig) else BranchConfig(**b) for b in self.branches]
        hops = [b.hop for b in self.branches]
        if max(hops) != self.cond_hop:
            raise ConfigError(f"largest branch hop {max(hops)} must equal condition hop {self.cond_hop}")
        for h in hops:
            if self.cond_hop % h:
                raise ConfigError(f"branch hop {h} does not divide condition hop {self.cond_hop}")

    @classmethod
    def full_mel(cls, **kw) -> "ModelConfig":
        """Full-size mel-conditioned configuration (~77M parameters)."""
        branches = [
            BranchConfig(512, 256, 768, 8),
            BranchConfig(256, 128, 512, 8),
            BranchConfig(128, 64, 384, 8),
        ]
        return cls(branches=branches, **kw)

    @classmethod
    def desk(cls, **kw) -> "ModelConfig":
        """Small preset for tests and CPU experiments."""
        branches = [
            BranchConfig(512, 256, 96, 2),
            BranchConfig(256, 128, 64, 2),
            BranchConfig(128, 64, 48, 2),
        ]
        kw.setdefault("cond_dim", 64)
        kw.setdefault("cond_layers", 2)
        kw.setdefault("time_dim", 64)
        return cls(branches=branches, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def bias_norm(x: torch.Tensor, bias: torch.Tensor, log_scale: torch.Tensor, eps: float = 1e-8):
    """``x * exp(log_scale) / rms(x - bias)`` with the RMS taken over the channel axis."""
    rms = torch.sqrt((x - bias).square().mean(-1, keepdim=True) + eps)
    return x * torch.exp(log_scale) / rms


class BiasNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-8):
        super().__init__()
        self.bias = nn.Parameter(torch.zeros(dim))
        self.log_scale = nn.Parameter(torch.zeros(()))
        self.eps = eps

    def forward(self, x):
        return bias_norm(x, self.bias, self.log_scale, self.eps)


class PReLU(nn.Module):
    """Per-channel PReLU acting on the last axis."""

    def __init__(self, dim: int, init: float = 0.25):
        super().__init__()
        self.weight = nn.Parameter(torch.full((dim,), init))

    def forward(self, x):
        return torch.where(x >= 0, x, self.weight * x)


def _trunc_normal(linear: nn.Linear, std: float = 0.02):
    nn.init.trunc_normal_(linear.weight, std=std, a=-2 * std, b=2 * std)
    nn.init.zeros_(linear.bias)


class ConvNeXtBlock(nn.Module):
    """Residual ConvNeXt block on ``[B, T, C]`` sequences.

    depthwise conv -> BiasNorm -> (time scale/shift, condition add) ->
    expand x ff_factor -> PReLU -> project -> + input.

    When ``cond_dim``/``time_dim`` are given the block takes per-frame condition
    features and a per-item time embedding; the time projection starts at zero so
    a fresh block ignores ``t``.
    """

    def __init__(
        self,
        dim: int,
        ff_factor: int = 3,
        kernel: int = 7,
        cond_dim: Optional[int] = None,
        time_dim: Optional[int] = None,
    ):
        super().__init__()
        if kernel % 2 == 0:
            raise ConfigError("kernel must be odd")
        self.dim = dim
        self.dwconv = nn.Conv1d(dim, dim, kernel, padding=kernel // 2, groups=dim)
        self.norm = BiasNorm(dim)
        self.cond_proj = nn.Linear(cond_dim, dim) if cond_dim else None
        self.time_proj = nn.Linear(time_dim, 2 * dim) if time_dim else None
        self.pw1 = nn.Linear(dim, ff_factor * dim)
        self.act = PReLU(ff_factor * dim)
        self.pw2 = nn.Linear(ff_factor * dim, dim)
        for lin in (self.pw1, self.pw2, self.cond_proj):
            if lin is not None:
                _trunc_normal(lin)
        if self.time_proj is not None:
            nn.init.zeros_(self.time_proj.weight)
            nn.init.zeros_(self.time_proj.bias)

    def forward(self, x, cond=None, t_emb=None):
        if x.shape[-1] != self.dim:
            raise InputError(f"block expects {self.dim} channels, got {x.shape[-1]}")
        h = self.dwconv(x.transpose(1, 2)).transpose(1, 2)
        h = self.norm(h)
        if self.time_proj is not None:
            scale, shift = self.time_proj(t_emb).unsqueeze(1).chunk(2, dim=-1)
            h = h * (1 + scale) + shift
        if self.cond_proj is not None:
            h = h + self.cond_proj(cond)
        h = self.pw2(self.act(self.pw1(h)))
        return x + h


class TimeEmbedding(nn.Module):
    """Sinusoidal features of ``t`` on a geometric frequency ladder, then a 2-layer MLP."""

    def __init__(self, dim: int, max_period: float = 10000.0, t_scale: float = 1000.0):
        super().__init__()
        self.dim = dim
        half = dim // 2
        freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
        self.register_buffer("freqs", freqs.float(), persistent=False)
        self.t_scale = t_scale
        self.mlp = nn.Sequential(nn.Linear(2 * half, dim), nn.SiLU(), nn.Linear(dim, dim))
        for m in self.mlp:
            if isinstance(m, nn.Linear):
                _trunc_normal(m)

    def forward(self, t):
        t = torch.as_tensor(t, dtype=self.freqs.dtype, device=self.freqs.device)
        if torch.any(t < 0) or torch.any(t > 1):
            raise InputError("time must lie in [0, 1]")
        t = t.reshape(-1)
        args = self.t_scale * t[:, None] * self.freqs.to(t.dtype)[None]
        return self.mlp(torch.cat([torch.cos(args), torch.sin(args)], dim=-1))


class ConditionEncoder(nn.Module):
    def __init__(self, in_dim: int, dim: int, n_layers: int, ff_factor: int = 3, kernel: int = 7):
        super().__init__()
        self.in_dim = in_dim
        self.in_proj = nn.Linear(in_dim, dim)
        _trunc_normal(self.in_proj)
        self.blocks = nn.ModuleList(ConvNeXtBlock(dim, ff_factor, kernel) for _ in range(n_layers))

    def forward(self, cond):
        if cond.shape[-1] != self.in_dim:
            raise ConfigError(f"condition has {cond.shape[-1]} features, encoder expects {self.in_dim}")
        h = self.in_proj(cond)
        for blk in self.blocks:
            h = blk(h)
        return h


def upsample_condition(feat: torch.Tensor, factor: int) -> torch.Tensor:
    """Nearest-neighbour repetition of frames (axis -2)."""
    if factor not in (1, 2, 4):
        raise ConfigError(f"upsampling factor must be 1, 2 or 4, got {factor}")
    if factor == 1:
        return feat
    return feat.repeat_interleave(factor, dim=-2)


class Branch(nn.Module):
    def __init__(self, cfg: BranchConfig, cond_dim: int, time_dim: int, cond_hop: int):
        super().__init__()
        self.cfg = cfg
        self.spectral = cfg.spectral
        self.factor = cond_hop // cfg.hop
        bins2 = 2 * self.spectral.n_bins
        self.in_proj = nn.Linear(bins2, cfg.embed_dim)
        self.blocks = nn.ModuleList(
            ConvNeXtBlock(cfg.embed_dim, cfg.ff_factor, cfg.kernel, cond_dim, time_dim)
            for _ in range(cfg.n_layers)
        )
        self.out_proj = nn.Linear(cfg.embed_dim, bins2)
        _trunc_normal(self.in_proj)
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def forward(self, xt, cond_feat, t_emb):
        length = xt.shape[-1]
        if length % self.cfg.hop:
            raise InputError(f"waveform length {length} not divisible by branch hop {self.cfg.hop}")
        z = stft(xt, self.spectral).data  # [B, L/hop + 1, bins]
        h = self.in_proj(torch.cat([z.real, z.imag], dim=-1))
        c = upsample_condition(cond_feat, self.factor)
        # centred STFT has one frame more than length / hop
        c = torch.cat([c, c[:, -1:]], dim=1)
        for blk in self.blocks:
            h = blk(h, c, t_emb)
        re, im = self.out_proj(h).chunk(2, dim=-1)
        return istft(ComplexSpectrogram(torch.complex(re, im), self.spectral), length)


class Generator(nn.Module):
    """Endpoint (or velocity) network over waveforms, conditioned on feature frames at ``cond_hop``."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.time_embed = TimeEmbedding(cfg.time_dim)
        self.cond_encoder = ConditionEncoder(
            cfg.cond_in_dim, cfg.cond_dim, cfg.cond_layers, cfg.ff_factor, cfg.kernel
        )
        self.branches = nn.ModuleList(
            Branch(b, cfg.cond_dim, cfg.time_dim, cfg.cond_hop) for b in cfg.branches
        )

    def encode_condition(self, cond: torch.Tensor) -> torch.Tensor:
        return self.cond_encoder(cond)

    def _check(self, xt, cond_feat):
        length = xt.shape[-1]
        if length % self.cfg.cond_hop:
            raise InputError(f"waveform length {length} not divisible by {self.cfg.cond_hop}")
        if cond_feat.shape[-2] * self.cfg.cond_hop != length:
            raise InputError(
                f"condition has {cond_feat.shape[-2]} frames, waveform needs {length // self.cfg.cond_hop}"
            )

    def branch_outputs(self, xt, t, cond=None, cond_feat=None) -> list[torch.Tensor]:
        if cond_feat is None:
            cond_feat = self.encode_condition(cond)
        self._check(xt, cond_feat)
        t = torch.as_tensor(t, dtype=xt.dtype, device=xt.device)
        if t.ndim == 0:
            t = t.expand(xt.shape[0])
        t_emb = self.time_embed(t)
        return [br(xt, cond_feat, t_emb) for br in self.branches]

    def forward(self, xt, t, cond=None, cond_feat=None):
        outs = self.branch_outputs(xt, t, cond, cond_feat)
        y = outs[0]
        for o in outs[1:]:
            y = y + o
        return y

    def as_model_fn(self, cond: torch.Tensor):
        """Callable ``(x, t, _) -> g`` with the condition encoded once up front."""
        feats = self.encode_condition(cond)
        return lambda x, t, _c=None: self(x, t, cond_feat=feats)


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
