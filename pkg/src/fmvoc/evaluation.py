"""Spectral-distance metrics, step sweeps and loss-mode ablation runs."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import torch

from .backbone import Generator
from .data import FeatureExtractor, TrainingSet
from .dsp import InputError, SpectralConfig, make_filterbank, mel_spectrogram, stft
from .flow import StepSchedule, euler_sample_endpoint, euler_sample_velocity, uniform_schedule
from .gan import MEL_LOSS_SCALES

SNR_CAP_DB = 120.0
LOG_FLOOR = 1e-5


@dataclass
class ClipMetrics:
    clip: int
    mel_l1: float
    multires_stft_distance: float
    snr_db: float


@dataclass
class MetricReport:
    mel_l1: float
    multires_stft_distance: float
    snr_db: float
    per_clip: list[ClipMetrics] = field(default_factory=list)
    steps: int | None = None
    label: str | None = None

    def to_record(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k != "per_clip"}


def _active_l1(a: torch.Tensor, b: torch.Tensor, floor_log: float) -> float:
    """L1 over the cells where either log-spectrum sits above the floor, averaged over those cells.

    Cells at the floor in both signals (exact silence) contribute nothing, so
    equal silent padding leaves the value unchanged.
    """
    active = (a > floor_log) | (b > floor_log)
    n = int(active.sum())
    if n == 0:
        return 0.0
    return float((a - b).abs()[active].sum() / n)


class SpectralMetrics:
    """Per-clip distances between a generated and a reference waveform."""

    def __init__(self, sample_rate: int = 24000, n_mels: int = 100):
        self.sample_rate = sample_rate
        self.mel_cfg = SpectralConfig(1024, 256)
        self.mel_fb = make_filterbank("mel", n_mels, 1024, sample_rate)
        self.scales = [SpectralConfig(w, h) for w, h, _ in MEL_LOSS_SCALES]
        self.floor_log = math.log(LOG_FLOOR)

    def mel_l1(self, y, x) -> float:
        a = mel_spectrogram(y.double(), self.mel_cfg, self.mel_fb, True, LOG_FLOOR)
        b = mel_spectrogram(x.double(), self.mel_cfg, self.mel_fb, True, LOG_FLOOR)
        return _active_l1(a, b, self.floor_log)

    def multires_stft_distance(self, y, x) -> float:
        total = 0.0
        for cfg in self.scales:
            a = torch.log(torch.clamp(stft(y.double(), cfg).data.abs(), min=LOG_FLOOR))
            b = torch.log(torch.clamp(stft(x.double(), cfg).data.abs(), min=LOG_FLOOR))
            total += _active_l1(a, b, self.floor_log)
        return total

    @staticmethod
    def snr_db(y, x) -> float:
        sig = float(x.double().square().sum())
        err = float((x.double() - y.double()).square().sum())
        if err == 0.0:
            return SNR_CAP_DB
        if sig == 0.0:
            return -SNR_CAP_DB
        return min(10.0 * math.log10(sig / err), SNR_CAP_DB)

    def __call__(self, y, x, clip: int = 0) -> ClipMetrics:
        if y.shape != x.shape:
            raise InputError(f"shape mismatch {tuple(y.shape)} vs {tuple(x.shape)}")
        return ClipMetrics(clip, self.mel_l1(y, x), self.multires_stft_distance(y, x), self.snr_db(y, x))


def aggregate(per_clip: list[ClipMetrics], **kw) -> MetricReport:
    per_clip = sorted(per_clip, key=lambda m: m.clip)
    n = len(per_clip)
    return MetricReport(
        sum(m.mel_l1 for m in per_clip) / n,
        sum(m.multires_stft_distance for m in per_clip) / n,
        sum(m.snr_db for m in per_clip) / n,
        per_clip,
        **kw,
    )


def clip_noise(seed: int, clip: int, length: int) -> torch.Tensor:
    """Standard-normal starting noise shared by every evaluation of ``clip`` under ``seed``."""
    g = torch.Generator().manual_seed(seed * 1_000_003 + clip)
    return torch.randn(length, generator=g)


@torch.no_grad()
def generate(generator: Generator, cond: torch.Tensor, x0: torch.Tensor, schedule: StepSchedule):
    generator.eval()
    feats = generator.encode_condition(cond)

    def fn(x, t, _c):
        return generator(x, t, cond_feat=feats)

    if generator.cfg.parameterization == "velocity":
        return euler_sample_velocity(fn, x0, schedule)
    return euler_sample_endpoint(fn, x0, schedule)


def evaluate(
    generator: Generator,
    clips: Sequence[torch.Tensor],
    schedule: StepSchedule,
    seed: int = 0,
    features: FeatureExtractor | None = None,
) -> MetricReport:
    """Sample every clip from seeded noise given its own features, then score against it."""
    if not clips:
        raise InputError("no clips to evaluate")
    cfg = generator.cfg
    features = features or FeatureExtractor(cfg.cond_feature_kind, cfg.cond_in_dim, cfg.sample_rate)
    if features.sample_rate != cfg.sample_rate:
        raise InputError(f"feature rate {features.sample_rate} Hz vs model rate {cfg.sample_rate} Hz")
    metrics = SpectralMetrics(cfg.sample_rate, features.n_mels)
    per_clip = []
    for i, x in enumerate(clips):
        cond = features(x)[None]
        y = generate(generator, cond, clip_noise(seed, i, x.shape[-1])[None].to(x.dtype), schedule)[0]
        per_clip.append(metrics(y, x, i))
    return aggregate(per_clip, steps=schedule.n_steps)


def step_sweep(
    generator: Generator,
    clips: Sequence[torch.Tensor],
    steps: Sequence[int] = (1, 2, 4, 8, 16),
    seed: int = 0,
) -> list[MetricReport]:
    if not steps:
        raise InputError("steps must be nonempty")
    return [evaluate(generator, clips, uniform_schedule(n), seed) for n in steps]


@dataclass
class AblationRow:
    loss_mode: str
    report: MetricReport
    final_loss: float


def ablation_matrix(
    modes: Sequence[str],
    train_set: TrainingSet,
    dev_clips: Sequence[torch.Tensor],
    model_cfg,
    train_cfg,
    budget: int,
    eval_steps: int = 2,
    seed: int = 0,
) -> list[AblationRow]:
    """Train one model per loss mode under identical settings; rank by 2-step multi-res distance."""
    from dataclasses import replace

    from .train import init_fm_state, train_fm

    rows = []
    for mode in modes:
        cfg = replace(train_cfg, loss_mode=mode, max_iters=budget, stage="fm")
        state = train_fm(init_fm_state(model_cfg, cfg), train_set)
        rep = evaluate(state.generator, dev_clips, uniform_schedule(eval_steps), seed)
        rep.label = mode
        rows.append(AblationRow(mode, rep, state.history[-1]["loss"] if state.history else float("nan")))
    rows.sort(key=lambda r: r.report.multires_stft_distance)
    return rows


def format_table(reports: Sequence[MetricReport], key: str = "label") -> str:
    head = f"{key:>20} | {'mel_l1':>9} | {'multires':>9} | {'snr_db':>8}"
    lines = [head, "-" * len(head)]
    for r in reports:
        name = r.label if key == "label" else str(r.steps)
        lines.append(f"{name!s:>20} | {r.mel_l1:9.4f} | {r.multires_stft_distance:9.4f} | {r.snr_db:8.2f}")
    return "\n".join(lines)


def write_records(reports: Sequence[MetricReport], path: str | Path) -> None:
    with open(path, "w") as fh:
        for r in reports:
            fh.write(json.dumps(r.to_record()) + "\n")


def dump_spectrograms(pairs, path: str | Path, sample_rate: int = 24000) -> None:
    """Save log-magnitude spectrograms of ``(name, waveform)`` pairs side by side as a PNG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cfg = SpectralConfig(1024, 256)
    fig, axes = plt.subplots(1, len(pairs), figsize=(4 * len(pairs), 3), squeeze=False)
    for ax, (name, y) in zip(axes[0], pairs):
        s = torch.log(torch.clamp(stft(torch.as_tensor(y).double(), cfg).data.abs(), min=LOG_FLOOR))
        ax.imshow(s.T.numpy(), origin="lower", aspect="auto",
                  extent=[0, y.shape[-1] / sample_rate, 0, sample_rate / 2])
        ax.set_title(name)
        ax.set_xlabel("s")
    axes[0][0].set_ylabel("Hz")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
