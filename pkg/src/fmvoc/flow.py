"""Flow Matching objectives and Euler samplers over waveform batches.

Two parameterisations are supported: a velocity network ``f(x_t, t | c)`` and
an endpoint network ``g(x_t, t | c)`` that predicts the clean signal directly.
``x_t = (1 - t) x0 + t x1`` links them through ``v = (g - x_t) / (1 - t)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import torch

from .dsp import (
    ConfigError,
    FilterbankMatrix,
    InputError,
    SpectralConfig,
    make_filterbank,
    power_spectrogram_filtered,
)

# t is drawn from U[0, 1 - T_GUARD]; evaluating at t >= 1 - T_GUARD is refused.
T_GUARD = 1e-5

ModelFn = Callable[[torch.Tensor, torch.Tensor, object], torch.Tensor]


class LossKind(str, Enum):
    velocity = "velocity"
    endpoint_plain = "endpoint_plain"
    endpoint_perframe = "endpoint_perframe"
    endpoint_tfactor = "endpoint_tfactor"
    endpoint_spectral = "endpoint_spectral"

    @property
    def predicts_endpoint(self) -> bool:
        return self is not LossKind.velocity


@dataclass
class LossMode:
    """Which Flow Matching objective to train with, plus its scaling settings.

    ``scale_cfg``/``scale_fb`` define the smoothed power spectrogram used by the
    spectral mode; ``scale_cfg.hop`` is also the window size for the per-frame
    energy of ``endpoint_perframe``.
    """

    kind: LossKind = LossKind.endpoint_spectral
    clamp_lo: float = 0.01
    clamp_hi: float = 100.0
    epsilon: float = 1e-7
    scale_cfg: SpectralConfig | None = None
    scale_fb: FilterbankMatrix | None = None

    def __post_init__(self):
        self.kind = LossKind(self.kind)
        if not self.clamp_lo < self.clamp_hi:
            raise ConfigError("clamp_lo must be below clamp_hi")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")

    @classmethod
    def default(cls, kind: LossKind | str, sample_rate: int = 24000, **kw) -> "LossMode":
        """Mode with the (1024, 256, 256) linear-filterbank energy smoother."""
        cfg = SpectralConfig(1024, 256)
        fb = make_filterbank("linear", 256, 1024, sample_rate)
        return cls(LossKind(kind), scale_cfg=cfg, scale_fb=fb, **kw)


@dataclass
class StepSchedule:
    times: list[float] = field(default_factory=lambda: [0.0, 1.0])

    def __post_init__(self):
        ts = [float(t) for t in self.times]
        if len(ts) < 2 or ts[0] != 0.0 or ts[-1] != 1.0:
            raise ConfigError(f"schedule must start at 0 and end at 1, got {ts}")
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ConfigError(f"schedule must be strictly increasing, got {ts}")
        self.times = ts

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1


def uniform_schedule(n: int) -> StepSchedule:
    if n < 1:
        raise ConfigError(f"need at least one step, got {n}")
    return StepSchedule([i / n for i in range(n)] + [1.0])


def _bcast(t, like: torch.Tensor) -> torch.Tensor:
    """Reshape a scalar or per-batch ``t`` against a ``[B, ...]`` tensor."""
    t = torch.as_tensor(t, dtype=like.dtype, device=like.device)
    if t.ndim == 0:
        return t
    return t.reshape(t.shape[0], *([1] * (like.ndim - 1)))


def interpolate(x0: torch.Tensor, x1: torch.Tensor, t) -> torch.Tensor:
    if x0.shape != x1.shape:
        raise InputError(f"x0 {tuple(x0.shape)} and x1 {tuple(x1.shape)} differ in shape")
    tb = _bcast(t, x0)
    if torch.any(tb < 0) or torch.any(tb > 1):
        raise InputError("t must lie in [0, 1]")
    return (1 - tb) * x0 + tb * x1


def endpoint_to_velocity(g: torch.Tensor, xt: torch.Tensor, t) -> torch.Tensor:
    tb = _bcast(t, xt)
    if torch.any(tb >= 1 - T_GUARD):
        raise InputError(f"endpoint-to-velocity conversion needs t < {1 - T_GUARD}")
    return (g - xt) / (1 - tb)


def sample_t(batch: int, generator: torch.Generator | None = None, dtype=torch.float32) -> torch.Tensor:
    """i.i.d. ``U[0, 1 - T_GUARD]`` draws, one per batch element."""
    if batch < 1:
        raise InputError("batch must be >= 1")
    u = torch.rand(batch, generator=generator, dtype=torch.float64)
    return (u * (1 - T_GUARD)).to(dtype)


def spectral_scale(x1: torch.Tensor, mode: LossMode) -> torch.Tensor:
    """Clamped ``1 / sqrt(S(x1) + eps)`` per time-frequency cell."""
    s_ref = power_spectrogram_filtered(x1, mode.scale_cfg, mode.scale_fb)
    return torch.clamp(torch.rsqrt(s_ref + mode.epsilon), mode.clamp_lo, mode.clamp_hi)


def frame_scale(x1: torch.Tensor, mode: LossMode) -> torch.Tensor:
    """Clamped ``1 / sqrt(E + eps)`` where ``E`` is the mean-square of each hop-sized window."""
    hop = mode.scale_cfg.hop
    if x1.shape[-1] % hop:
        raise InputError(f"length {x1.shape[-1]} not a multiple of the energy window {hop}")
    energy = x1.reshape(*x1.shape[:-1], -1, hop).square().mean(-1)
    return torch.clamp(torch.rsqrt(energy + mode.epsilon), mode.clamp_lo, mode.clamp_hi)


def fm_loss(
    mode: LossMode,
    output: torch.Tensor,
    x1: torch.Tensor,
    xt: torch.Tensor,
    t,
    x0: torch.Tensor,
) -> torch.Tensor:
    """Scalar training loss for one batch.

    ``output`` is the velocity prediction in ``velocity`` mode and the endpoint
    prediction otherwise. The MSE-type modes average over every element; the
    spectral mode sums over time-frequency cells and averages over the batch.
    """
    kind = mode.kind
    if kind is LossKind.velocity:
        return (output - (x1 - x0)).square().mean()
    err = output - x1
    if kind is LossKind.endpoint_plain:
        return err.square().mean()
    if kind is LossKind.endpoint_tfactor:
        tb = _bcast(t, err)
        return (err.square() / (1 - tb).square()).mean()
    if mode.scale_cfg is None or (kind is LossKind.endpoint_spectral and mode.scale_fb is None):
        raise ConfigError(f"{kind.value} needs scale_cfg (and scale_fb for the spectral mode)")
    with torch.no_grad():
        if kind is LossKind.endpoint_perframe:
            scale = frame_scale(x1, mode)
        else:
            scale = spectral_scale(x1, mode)
    if kind is LossKind.endpoint_perframe:
        sq = err.square().reshape(*err.shape[:-1], -1, mode.scale_cfg.hop)
        return (sq * scale.unsqueeze(-1)).mean()
    s_err = power_spectrogram_filtered(err, mode.scale_cfg, mode.scale_fb)
    per_item = (s_err * scale).flatten(1).sum(-1) if s_err.ndim > 2 else (s_err * scale).sum()
    return per_item.mean()


def _step_denominator(t_i: float) -> float:
    if t_i >= 1 - T_GUARD:
        raise ConfigError(f"schedule evaluates the endpoint model at t={t_i}")
    return 1.0 - t_i


def euler_sample_velocity(
    model_f: ModelFn, x0: torch.Tensor, schedule: StepSchedule, condition=None
) -> torch.Tensor:
    x = x0
    for t_i, t_next in zip(schedule.times, schedule.times[1:]):
        t = torch.full((x.shape[0],), t_i, dtype=x.dtype, device=x.device)
        x = x + (t_next - t_i) * model_f(x, t, condition)
    return x


def euler_sample_endpoint(
    model_g: ModelFn, x0: torch.Tensor, schedule: StepSchedule, condition=None
) -> torch.Tensor:
    """Euler integration of the endpoint-parameterised flow.

    The final step (to ``t = 1``) has coefficient ``(1 - t_i) / (1 - t_i) = 1``
    and therefore returns the endpoint prediction itself.
    """
    times = schedule.times
    for t_i in times[:-1]:
        _step_denominator(t_i)
    x = x0
    for i, (t_i, t_next) in enumerate(zip(times, times[1:])):
        t = torch.full((x.shape[0],), t_i, dtype=x.dtype, device=x.device)
        g = model_g(x, t, condition)
        if i == len(times) - 2:
            return g
        x = x + (t_next - t_i) * (g - x) / (1.0 - t_i)
    return x


def sample(
    model: ModelFn,
    x0: torch.Tensor,
    schedule: StepSchedule,
    condition=None,
    parameterization: str = "endpoint",
) -> torch.Tensor:
    if parameterization == "endpoint":
        return euler_sample_endpoint(model, x0, schedule, condition)
    if parameterization == "velocity":
        return euler_sample_velocity(model, x0, schedule, condition)
    raise ConfigError(f"unknown parameterization {parameterization!r}")


def velocity_from_endpoint_model(model_g: ModelFn) -> ModelFn:
    def f(x, t, c):
        return endpoint_to_velocity(model_g(x, t, c), x, t)

    return f
