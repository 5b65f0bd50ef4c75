"""Audio ingestion, conditioning features, aligned cropping and a synthetic toy corpus."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
import torch

from .dsp import InputError, SpectralConfig, make_filterbank, mel_spectrogram, read_wav, write_wav

COND_HOP = 256
COND_N_FFT = 1024


@dataclass
class ManifestEntry:
    path: str
    duration: float
    sample_rate: int


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    split: Literal["train", "dev"] = "train"

    def save(self, path: str | Path) -> None:
        lines = [f"# split={self.split}"]
        lines += [f"{e.path}\t{e.duration:.6f}\t{e.sample_rate}" for e in self.entries]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        split = "train"
        entries = []
        for line in path.read_text().splitlines():
            if not line.strip():
                continue
            if line.startswith("#"):
                if line.startswith("# split="):
                    split = line.split("=", 1)[1].strip()
                continue
            p, dur, rate = line.split("\t")
            if not Path(p).is_absolute():
                p = str(path.parent / p)
            entries.append(ManifestEntry(p, float(dur), int(rate)))
        return cls(entries, split)

    def __len__(self):
        return len(self.entries)


@dataclass
class ToySpec:
    n_clips: int = 32
    clip_seconds: float = 1.0
    sample_rate: int = 24000
    seed: int = 0
    f0_range: tuple[float, float] = (80.0, 400.0)
    max_harmonics: int = 5
    min_silence_fraction: float = 0.2
    noise_burst_prob: float = 0.3


def _fade(n: int, sr: int, ms: float = 10.0) -> np.ndarray:
    k = min(int(sr * ms / 1000), n // 2)
    env = np.ones(n)
    if k > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(k) / k)
        env[:k] = ramp
        env[n - k:] = ramp[::-1]
    return env


def _tone(rng, n, sr, f0, n_harm):
    t = np.arange(n) / sr
    y = np.zeros(n)
    for k in range(1, n_harm + 1):
        if k * f0 >= sr / 2:
            break
        y += np.sin(2 * np.pi * k * f0 * t + rng.uniform(0, 2 * np.pi)) / k
    return y


def _noise_burst(rng, n, sr):
    lo = rng.uniform(200, 3000)
    hi = min(lo + rng.uniform(500, 6000), sr / 2)
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1 / sr)
    spec[(f < lo) | (f > hi)] = 0
    y = np.fft.irfft(spec, n)
    return y / (np.abs(y).max() + 1e-12), (lo, hi)


def generate_clip(spec: ToySpec, rng: np.random.Generator) -> tuple[np.ndarray, list[dict]]:
    """One clip of alternating silences and events, peak-normalised to 0.95.

    Silences are exact zeros lasting 100-300 ms (shorter only when cut by the
    clip end); a clip is redrawn until its zero share reaches
    ``min_silence_fraction`` and it holds a zero run of at least 100 ms.
    """
    sr = spec.sample_rate
    n = int(round(spec.clip_seconds * sr)) // COND_HOP * COND_HOP
    while True:
        y = np.zeros(n)
        events = []
        pos = 0
        silent = rng.uniform() < 0.5
        while pos < n:
            if silent:
                d = int(rng.uniform(0.1, 0.3) * sr)
                pos += d
            else:
                d = min(int(rng.uniform(0.15, 0.5) * sr), n - pos)
                if d < int(0.05 * sr):
                    break
                gain = rng.uniform(0.3, 1.0)
                if rng.uniform() < spec.noise_burst_prob:
                    seg, band = _noise_burst(rng, d, sr)
                    ev = {"kind": "noise", "band": [float(band[0]), float(band[1])]}
                else:
                    f0 = float(rng.uniform(*spec.f0_range))
                    nh = int(rng.integers(1, spec.max_harmonics + 1))
                    seg = _tone(rng, d, sr, f0, nh)
                    ev = {"kind": "tone", "f0": f0, "n_harmonics": nh}
                y[pos:pos + d] = gain * seg * _fade(d, sr)
                ev.update(start=pos, end=pos + d)
                events.append(ev)
                pos += d
            silent = not silent
        zero_frac = float(np.mean(y == 0.0))
        if events and zero_frac >= spec.min_silence_fraction and _longest_zero_run(y) >= 0.1 * sr:
            break
    y = y * (0.95 / np.abs(y).max())
    return y.astype(np.float32), events


def _longest_zero_run(y: np.ndarray) -> int:
    z = np.concatenate([[0], (y == 0).astype(np.int8), [0]])
    d = np.diff(z)
    starts, ends = np.flatnonzero(d == 1), np.flatnonzero(d == -1)
    return int((ends - starts).max()) if starts.size else 0


def synth_toy_corpus(spec: ToySpec, out_dir: str | Path, split: str = "train") -> DatasetManifest:
    """Write ``spec.n_clips`` clips as float WAVs plus ``manifest.tsv`` and ``events.jsonl``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    entries, meta = [], []
    for i in range(spec.n_clips):
        y, events = generate_clip(spec, rng)
        name = f"{split}_{i:04d}.wav"
        write_wav(out / name, y, spec.sample_rate)
        entries.append(ManifestEntry(name, len(y) / spec.sample_rate, spec.sample_rate))
        meta.append({"clip": name, "events": events})
    manifest = DatasetManifest(entries, split)
    manifest.save(out / "manifest.tsv")
    with open(out / "events.jsonl", "w") as fh:
        for m in meta:
            fh.write(json.dumps(m) + "\n")
    (out / "toy_spec.json").write_text(json.dumps(asdict(spec), indent=2))
    # paths in the returned manifest resolve against out_dir
    return DatasetManifest.load(out / "manifest.tsv")


@dataclass
class FeatureExtractor:
    """Mel / log-mel conditioning at hop 256, one frame per 256 samples."""

    kind: Literal["mel", "log_mel"] = "log_mel"
    n_mels: int = 100
    sample_rate: int = 24000
    n_fft: int = COND_N_FFT
    hop: int = COND_HOP
    floor: float = 1e-5
    _fb: object = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.kind not in ("mel", "log_mel"):
            raise InputError(f"unknown feature kind {self.kind!r}")
        self._fb = make_filterbank("mel", self.n_mels, self.n_fft, self.sample_rate)

    @property
    def spectral(self) -> SpectralConfig:
        return SpectralConfig(self.n_fft, self.hop)

    def __call__(self, wave: torch.Tensor) -> torch.Tensor:
        wave = torch.as_tensor(wave)
        length = wave.shape[-1]
        if length % self.hop:
            raise InputError(f"waveform length {length} not divisible by {self.hop}; crop first")
        feats = mel_spectrogram(wave, self.spectral, self._fb, self.kind == "log_mel", self.floor)
        # centred STFT yields length/hop + 1 frames; frame s is centred on sample s*hop
        return feats[..., : length // self.hop, :]


def extract_condition(wave, kind: str = "log_mel", n_mels: int = 100, sample_rate: int = 24000):
    return FeatureExtractor(kind, n_mels, sample_rate)(wave)


def crop_pair(wave: torch.Tensor, cond: torch.Tensor, segment_length: int, rng: torch.Generator, hop: int = COND_HOP):
    """Aligned random crop: samples ``[s*hop, s*hop + seg)`` with frames ``[s, s + seg/hop)``."""
    if segment_length % hop:
        raise InputError(f"segment_length {segment_length} not divisible by {hop}")
    if wave.shape[-1] < segment_length:
        raise InputError(f"clip of {wave.shape[-1]} samples shorter than segment {segment_length}")
    n_frames = segment_length // hop
    max_start = cond.shape[-2] - n_frames
    s = int(torch.randint(0, max_start + 1, (1,), generator=rng))
    return wave[..., s * hop: s * hop + segment_length], cond[..., s: s + n_frames, :]


def load_clips(manifest: DatasetManifest, sample_rate: int, hop: int = COND_HOP) -> list[torch.Tensor]:
    """Read every clip, cropped down to a multiple of ``hop`` samples."""
    clips = []
    for e in manifest.entries:
        if e.sample_rate != sample_rate:
            raise InputError(f"{e.path}: manifest rate {e.sample_rate}, model rate {sample_rate}")
        y, _ = read_wav(e.path, sample_rate)
        if np.abs(y).max() > 1.0:
            raise InputError(f"{e.path}: samples outside [-1, 1]")
        clips.append(torch.from_numpy(y[: len(y) // hop * hop].copy()))
    return clips


class TrainingSet:
    """Clips with precomputed conditioning, sampled as aligned random crops."""

    def __init__(self, clips: list[torch.Tensor], features: FeatureExtractor):
        self.clips = clips
        self.features = features
        self.conds = [features(c) for c in clips]

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, features: FeatureExtractor) -> "TrainingSet":
        return cls(load_clips(manifest, features.sample_rate, features.hop), features)

    def __len__(self):
        return len(self.clips)

    def batch(self, batch_size: int, segment_length: int, rng: torch.Generator):
        idx = torch.randint(0, len(self.clips), (batch_size,), generator=rng).tolist()
        waves, conds = [], []
        for i in idx:
            w, c = crop_pair(self.clips[i], self.conds[i], segment_length, rng, self.features.hop)
            waves.append(w)
            conds.append(c)
        return torch.stack(waves), torch.stack(conds)
