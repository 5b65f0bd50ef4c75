"""STFT/ISTFT, filterbanks and spectral features.

Everything here is written in torch so it can sit inside the generator and the
loss functions and be differentiated through. Tensors carry time on the last
axis for waveforms (``[..., samples]``) and on the second-to-last axis for
spectral grids (``[..., frames, bins]``).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
import torch
import torch.nn.functional as F
from scipy.io import wavfile

__all__ = [
    "ConfigError",
    "InputError",
    "SpectralConfig",
    "ComplexSpectrogram",
    "FilterbankMatrix",
    "hann_window",
    "stft",
    "istft",
    "hz_to_mel",
    "mel_to_hz",
    "make_filterbank",
    "power_spectrogram_filtered",
    "mel_spectrogram",
    "read_wav",
    "write_wav",
]


class ConfigError(ValueError):
    """Invalid configuration (bad sizes, mismatched settings)."""


class InputError(ValueError):
    """Invalid input data (empty, wrong length, wrong rate)."""


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class SpectralConfig:
    n_fft: int
    hop: int
    window: Literal["hann"] = "hann"
    center: bool = True

    def __post_init__(self):
        if not _is_pow2(self.n_fft):
            raise ConfigError(f"n_fft must be a power of two, got {self.n_fft}")
        if self.hop <= 0 or self.hop > self.n_fft or self.n_fft % self.hop:
            raise ConfigError(
                f"hop must divide n_fft and be <= n_fft, got hop={self.hop}, n_fft={self.n_fft}"
            )
        if self.window != "hann":
            raise ConfigError(f"unsupported window {self.window!r}")

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1


@dataclass
class ComplexSpectrogram:
    """One-sided complex STFT, ``data`` shaped ``[..., frames, n_fft // 2 + 1]``."""

    data: torch.Tensor
    config: SpectralConfig

    @property
    def n_frames(self) -> int:
        return self.data.shape[-2]


@dataclass
class FilterbankMatrix:
    weights: torch.Tensor  # [n_filters, bins]
    kind: Literal["mel", "linear"]
    f_min: float
    f_max: float
    n_fft: int
    sample_rate: int

    @property
    def n_filters(self) -> int:
        return self.weights.shape[0]


def hann_window(n: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Periodic Hann window (sums to a constant under 50% / 75% overlap)."""
    return torch.hann_window(n, periodic=True, dtype=dtype, device=device)


def _as_real(x: torch.Tensor) -> torch.Tensor:
    if not torch.is_tensor(x):
        x = torch.as_tensor(np.asarray(x))
    if not torch.is_floating_point(x):
        x = x.to(torch.get_default_dtype())
    return x


def _reflect_pad(x: torch.Tensor, pad: int) -> torch.Tensor:
    """Mirror padding without repeating the edge sample; reflects repeatedly when ``pad >= length``."""
    n = x.shape[-1]
    if pad < n:
        return F.pad(x.unsqueeze(1), (pad, pad), mode="reflect").squeeze(1)
    if n == 1:
        return x.expand(*x.shape[:-1], 2 * pad + 1)
    period = 2 * (n - 1)
    m = torch.arange(-pad, n + pad, device=x.device) % period
    return x[..., torch.where(m < n, m, period - m)]


def stft(wave: torch.Tensor, cfg: SpectralConfig) -> ComplexSpectrogram:
    """One-sided Hann STFT.

    With ``cfg.center`` the signal is reflection-padded by ``n_fft // 2`` on both
    ends so that frame ``k`` is centred on sample ``k * hop``; the frame count is
    then ``1 + length // hop``.
    """
    x = _as_real(wave)
    if x.shape[-1] < 1:
        raise InputError("empty waveform")
    lead = x.shape[:-1]
    x = x.reshape(-1, x.shape[-1])
    n_fft, hop = cfg.n_fft, cfg.hop
    if cfg.center:
        x = _reflect_pad(x, n_fft // 2)
    if x.shape[-1] < n_fft:
        raise InputError(f"waveform of length {x.shape[-1]} shorter than n_fft={n_fft}")
    frames = x.unfold(-1, n_fft, hop)  # [B, T, n_fft]
    win = hann_window(n_fft, dtype=x.dtype, device=x.device)
    spec = torch.fft.rfft(frames * win, dim=-1)
    return ComplexSpectrogram(spec.reshape(*lead, *spec.shape[-2:]), cfg)


def _ola_span(n_frames: int, cfg: SpectralConfig) -> int:
    full = cfg.n_fft + cfg.hop * (n_frames - 1)
    return full - cfg.n_fft if cfg.center else full


def istft(spec: ComplexSpectrogram, out_length: int | None = None) -> torch.Tensor:
    """Weighted overlap-add inverse of :func:`stft`.

    The overlap-added frames are divided by the summed squared window, which
    inverts the forward transform exactly wherever the envelope is nonzero.
    """
    cfg = spec.config
    z = spec.data
    if z.shape[-1] != cfg.n_bins:
        raise InputError(f"expected {cfg.n_bins} bins, got {z.shape[-1]}")
    n_frames = z.shape[-2]
    if n_frames < 1:
        raise InputError("spectrogram has no frames")
    span = _ola_span(n_frames, cfg)
    # centred frames still cover half a window past the last centre, so any
    # original length with the same frame count is recoverable
    limit = span + cfg.n_fft // 2 if cfg.center else span
    if out_length is None:
        out_length = span
    if out_length > limit or out_length < 1:
        raise InputError(
            f"out_length={out_length} outside the reconstructable span of {limit} samples"
        )
    lead = z.shape[:-2]
    z = z.reshape(-1, n_frames, cfg.n_bins)
    frames = torch.fft.irfft(z, n=cfg.n_fft, dim=-1)  # [B, T, n_fft]
    win = hann_window(cfg.n_fft, dtype=frames.dtype, device=frames.device)
    frames = frames * win
    total = cfg.n_fft + cfg.hop * (n_frames - 1)
    y = F.fold(
        frames.transpose(1, 2),
        output_size=(1, total),
        kernel_size=(1, cfg.n_fft),
        stride=(1, cfg.hop),
    ).reshape(-1, total)
    env = F.fold(
        (win * win).expand(1, n_frames, -1).transpose(1, 2),
        output_size=(1, total),
        kernel_size=(1, cfg.n_fft),
        stride=(1, cfg.hop),
    ).reshape(total)
    start = cfg.n_fft // 2 if cfg.center else 0
    y = y[:, start : start + out_length]
    env = env[start : start + out_length]
    # samples with a vanishing envelope carry no information and are returned as 0
    live = env > 1e-11
    y = torch.where(live, y / torch.where(live, env, torch.ones_like(env)), torch.zeros_like(y))
    return y.reshape(*lead, out_length)


def hz_to_mel(f):
    """HTK mel scale."""
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def make_filterbank(
    kind: Literal["mel", "linear"],
    n_filters: int,
    n_fft: int,
    sample_rate: int,
    f_min: float = 0.0,
    f_max: float | None = None,
) -> FilterbankMatrix:
    """Triangular filterbank with peak-1 responses.

    Filter centres are uniformly spaced on the chosen scale (mel or Hz), the
    first at ``f_min`` and the last at ``f_max``; each triangle reaches zero at
    its neighbours' centres, so the responses overlap by 50% and sum to one at
    every frequency inside ``[f_min, f_max]``.
    """
    bins = n_fft // 2 + 1
    if not 1 <= n_filters <= bins:
        raise ConfigError(f"n_filters must lie in [1, {bins}], got {n_filters}")
    if kind not in ("mel", "linear"):
        raise ConfigError(f"unknown filterbank kind {kind!r}")
    f_max = sample_rate / 2 if f_max is None else f_max
    freqs = np.arange(bins) * sample_rate / n_fft
    if kind == "mel":
        fwd, lo, hi = hz_to_mel, hz_to_mel(f_min), hz_to_mel(f_max)
    else:
        fwd, lo, hi = (lambda f: np.asarray(f, dtype=np.float64)), f_min, f_max
    pos = fwd(freqs)
    if n_filters == 1:
        centers = np.array([0.5 * (lo + hi)])
        step = 0.5 * (hi - lo)
    else:
        centers = np.linspace(lo, hi, n_filters)
        step = centers[1] - centers[0]
    dist = np.abs(pos[None, :] - centers[:, None]) / step
    weights = np.clip(1.0 - dist, 0.0, None)
    return FilterbankMatrix(
        torch.from_numpy(weights),  # float64; cast at use
        kind,
        float(f_min),
        float(f_max),
        n_fft,
        sample_rate,
    )


def _check_fb(cfg: SpectralConfig, fb: FilterbankMatrix):
    if fb.n_fft != cfg.n_fft:
        raise ConfigError(f"filterbank built for n_fft={fb.n_fft}, STFT uses n_fft={cfg.n_fft}")


def power_spectrogram_filtered(
    x: torch.Tensor, cfg: SpectralConfig, fb: FilterbankMatrix
) -> torch.Tensor:
    """``fb @ |STFT(x)|^2`` per frame, shaped ``[..., frames, n_filters]``."""
    _check_fb(cfg, fb)
    z = stft(x, cfg).data
    power = z.real.square() + z.imag.square()
    return power @ fb.weights.to(power.dtype).T


def mel_spectrogram(
    x: torch.Tensor,
    cfg: SpectralConfig,
    fb: FilterbankMatrix,
    log_scale: bool = True,
    floor: float = 1e-5,
) -> torch.Tensor:
    """Magnitude mel spectrogram ``[..., frames, n_mels]``; optionally ``log(max(mel, floor))``."""
    if fb.kind != "mel":
        raise ConfigError("mel_spectrogram needs a mel filterbank")
    _check_fb(cfg, fb)
    z = stft(x, cfg).data
    mag = z.abs()
    mel = mag @ fb.weights.to(mag.dtype).T
    if log_scale:
        return torch.log(torch.clamp(mel, min=floor))
    return mel


def read_wav(path: str | Path, expected_rate: int | None = None) -> tuple[np.ndarray, int]:
    """Read a mono WAV (16-bit PCM or 32-bit float) as float32 in [-1, 1]."""
    rate, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise InputError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        data = data.astype(np.float32) / 32768.0
    elif data.dtype == np.float32:
        pass
    elif data.dtype == np.float64:
        data = data.astype(np.float32)
    else:
        raise InputError(f"{path}: unsupported sample format {data.dtype}")
    if expected_rate is not None and rate != expected_rate:
        raise InputError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz")
    if data.size == 0:
        raise InputError(f"{path}: empty file")
    return data, rate


def write_wav(
    path: str | Path,
    samples,
    sample_rate: int,
    pcm16: bool = False,
    dither_seed: int = 0,
) -> None:
    """Write mono audio as 32-bit float, or 16-bit PCM with TPDF dither."""
    if torch.is_tensor(samples):
        samples = samples.detach().cpu().numpy()
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    if pcm16:
        rng = np.random.default_rng(dither_seed)
        tpdf = rng.uniform(-0.5, 0.5, x.shape) + rng.uniform(-0.5, 0.5, x.shape)
        q = np.round(np.clip(x, -1.0, 1.0) * 32767.0 + tpdf)
        wavfile.write(str(path), sample_rate, np.clip(q, -32768, 32767).astype(np.int16))
    else:
        wavfile.write(str(path), sample_rate, x.astype(np.float32))


def hann_power_gain(n_fft: int, hop: int) -> float:
    """Ratio ``sum |STFT|^2 / sum x^2`` of a full-spectrum Hann STFT away from the edges.

    Uses the two-sided identity ``sum_k |X_k|^2 = n_fft * sum_n (w_n x_n)^2`` and
    the overlap-add constant ``sum_frames w^2 = sum(w^2) / hop``.
    """
    w = hann_window(n_fft, dtype=torch.float64)
    return n_fft * float((w * w).sum()) / hop


def one_sided_weights(n_fft: int, dtype=torch.float64) -> torch.Tensor:
    """Multiplicity of each one-sided bin in the two-sided spectrum (1 for DC/Nyquist, else 2)."""
    m = torch.full((n_fft // 2 + 1,), 2.0, dtype=dtype)
    m[0] = 1.0
    m[-1] = 1.0
    return m


def frame_count(length: int, cfg: SpectralConfig) -> int:
    if cfg.center:
        return 1 + length // cfg.hop
    return 1 + (length - cfg.n_fft) // cfg.hop
