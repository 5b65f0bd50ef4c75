"""Command-line entry points.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch
import yaml

from .backbone import ModelConfig
from .data import DatasetManifest, FeatureExtractor, ToySpec, TrainingSet, load_clips, synth_toy_corpus
from .dsp import read_wav, write_wav
from .evaluation import ablation_matrix, dump_spectrograms, evaluate, format_table, generate, step_sweep, write_records
from .flow import LossKind, uniform_schedule
from .train import (
    TrainConfig,
    init_fm_state,
    init_gan_state,
    load_checkpoint,
    save_checkpoint,
    train_fm,
    train_gan,
)

log = logging.getLogger("fmvoc")

COMMANDS = ("make-toy-data", "train-fm", "finetune-gan", "sample", "eval", "step-sweep", "ablate")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _steps_list(s: str) -> list[int]:
    try:
        out = [int(v) for v in s.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}")
    if not out or min(out) < 1:
        raise argparse.ArgumentTypeError(f"step counts must be >= 1, got {s!r}")
    return out


def _on_off(s: str) -> bool:
    if s not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return s == "on"


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fmvoc", description="Flow Matching + GAN fine-tuned vocoder toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="YAML file with 'model', 'train' and 'data' sections (default: none)")
        sp.add_argument("--seed", type=int, default=None, help="global seed (default: 0)")
        sp.add_argument("--out-dir", default=None, help="output directory (default: ./runs)")
        sp.add_argument("-v", "--verbose", action="store_true", help="log progress (default: off)")

    def training(sp):
        sp.add_argument("--data", help="train manifest.tsv (required unless set in the config)")
        sp.add_argument("--max-iters", type=int, help="training iterations (default: config or 5000)")
        sp.add_argument("--batch-size", type=int, help="batch size (default: 8)")
        sp.add_argument("--segment-length", type=int, help="crop length in samples, multiple of 256 (default: 16384)")
        sp.add_argument("--lr", type=float, help="learning rate (default: 2e-4)")

    sp = sub.add_parser("make-toy-data", help="synthesise a toy train/dev corpus")
    common(sp)
    sp.add_argument("--n-train", type=int, default=48, help="training clips (default: 48)")
    sp.add_argument("--n-dev", type=int, default=8, help="dev clips (default: 8)")
    sp.add_argument("--clip-seconds", type=float, default=1.0, help="clip duration (default: 1.0)")
    sp.add_argument("--sample-rate", type=int, default=24000, help="sample rate in Hz (default: 24000)")

    sp = sub.add_parser("train-fm", help="stage 1: Flow Matching pre-training")
    common(sp)
    training(sp)
    sp.add_argument("--loss-mode", choices=[k.value for k in LossKind], help="objective (default: endpoint_spectral)")
    sp.add_argument("--mel-kind", choices=["mel", "log_mel"], help="conditioning features (default: log_mel)")
    sp.add_argument("--preset", choices=["desk", "full"], help="model size preset (default: desk)")

    sp = sub.add_parser("finetune-gan", help="stage 2: GAN fine-tuning of an N-step generator")
    common(sp)
    training(sp)
    sp.add_argument("--ckpt", help="stage-1 checkpoint (required)")
    sp.add_argument("--steps", type=int, choices=[1, 2, 4], help="generator steps N (default: 1)")
    sp.add_argument("--augment-cond", type=_on_off, help="log-mel noise augmentation on/off (default: off)")

    sp = sub.add_parser("sample", help="generate a waveform from conditioning features")
    common(sp)
    sp.add_argument("--ckpt", required=True, help="checkpoint (required)")
    sp.add_argument("--cond", required=True, help=".npy feature grid [frames, dim] or a .wav to analyse (required)")
    sp.add_argument("--steps", type=int, help="sampling steps (default: checkpoint N, else 2)")
    sp.add_argument("--out", help="output WAV (default: <out-dir>/sample.wav)")
    sp.add_argument("--pcm16", action="store_true", help="write dithered 16-bit PCM instead of float (default: off)")

    for name, helptext in (("eval", "score a checkpoint on a manifest"), ("step-sweep", "evaluate across step counts")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.add_argument("--ckpt", required=True, help="checkpoint (required)")
        sp.add_argument("--data", required=True, help="dev manifest.tsv (required)")
        default = "2" if name == "eval" else "1,2,4,8,16"
        sp.add_argument("--steps", type=_steps_list, default=_steps_list(default),
                        help=f"step count(s), comma separated (default: {default})")
        sp.add_argument("--spectrogram-png", help="write a spectrogram comparison of the first clip (default: none)")

    sp = sub.add_parser("ablate", help="train one model per loss mode and rank them")
    common(sp)
    training(sp)
    sp.add_argument("--dev-data", help="dev manifest.tsv (required unless set in the config)")
    sp.add_argument("--modes", default=",".join(k.value for k in LossKind),
                    help="comma-separated loss modes (default: all five)")
    sp.add_argument("--budget", type=int, default=2000, help="iterations per mode (default: 2000)")
    sp.add_argument("--eval-steps", type=int, default=2, help="sampling steps for ranking (default: 2)")
    return p


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        cfg = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as err:
        raise UsageError(f"cannot parse config {path}: {err}")
    unknown = set(cfg) - {"model", "train", "data"}
    if unknown:
        raise UsageError(f"unknown config sections in {path}: {sorted(unknown)}")
    return cfg


def _model_cfg(section: dict, preset: str | None, mel_kind: str | None) -> ModelConfig:
    section = dict(section)
    preset = preset or section.pop("preset", "desk")
    section.pop("preset", None)
    if mel_kind:
        section["cond_feature_kind"] = mel_kind
    if "branches" in section:
        return ModelConfig(**section)
    base = ModelConfig.desk if preset == "desk" else ModelConfig.full_mel
    return base(**section)


def _train_cfg(section: dict, args, **forced) -> TrainConfig:
    d = dict(section)
    for key in ("max_iters", "batch_size", "segment_length", "lr", "seed"):
        v = getattr(args, key, None)
        if v is not None:
            d[key] = v
    d.update({k: v for k, v in forced.items() if v is not None})
    return TrainConfig.from_dict(d)


def _resolve(args, cfg, key, flag):
    v = getattr(args, key, None) or cfg.get("data", {}).get(key)
    if v is None:
        raise UsageError(f"missing required flag {flag}")
    return v


def _print_resolved(command: str, resolved: dict):
    print(json.dumps({"command": command, **resolved}, indent=2, default=str))


def _out_dir(args) -> Path:
    p = Path(args.out_dir or "runs")
    p.mkdir(parents=True, exist_ok=True)
    return p


def cmd_make_toy_data(args, cfg):
    seed = args.seed if args.seed is not None else 0
    out = _out_dir(args)
    train = ToySpec(args.n_train, args.clip_seconds, args.sample_rate, seed)
    dev = ToySpec(args.n_dev, args.clip_seconds, args.sample_rate, seed + 1)
    _print_resolved("make-toy-data", {"train": train.__dict__, "dev": dev.__dict__, "out_dir": str(out)})
    synth_toy_corpus(train, out / "train", "train")
    synth_toy_corpus(dev, out / "dev", "dev")
    print(f"wrote {out / 'train' / 'manifest.tsv'} and {out / 'dev' / 'manifest.tsv'}")


def _training_set(manifest_path, model_cfg: ModelConfig) -> TrainingSet:
    fe = FeatureExtractor(model_cfg.cond_feature_kind, model_cfg.cond_in_dim, model_cfg.sample_rate)
    return TrainingSet.from_manifest(DatasetManifest.load(manifest_path), fe)


def cmd_train_fm(args, cfg):
    model_cfg = _model_cfg(cfg.get("model", {}), args.preset, args.mel_kind)
    tcfg = _train_cfg(cfg.get("train", {}), args, stage="fm", loss_mode=args.loss_mode)
    data = _resolve(args, cfg, "data", "--data")
    out = _out_dir(args)
    _print_resolved("train-fm", {"model": model_cfg.to_dict(), "train": tcfg.to_dict(), "data": data})
    state = init_fm_state(model_cfg, tcfg)
    state = train_fm(state, _training_set(data, state.model_cfg), out / "fm_metrics.jsonl", out)
    save_checkpoint(state, out / "fm.pt")
    print(f"wrote {out / 'fm.pt'}")


def cmd_finetune_gan(args, cfg):
    if not args.ckpt:
        raise UsageError("missing required flag --ckpt")
    fm_state = load_checkpoint(args.ckpt)
    if fm_state.train_cfg.stage != "fm":
        raise UsageError(f"{args.ckpt} is not a Flow Matching checkpoint")
    section = dict(cfg.get("train", {}))
    section.pop("loss_mode", None)
    tcfg = _train_cfg(section, args, stage="gan", n_steps=args.steps, noise_augment=args.augment_cond,
                      loss_mode=fm_state.train_cfg.loss_mode)
    data = _resolve(args, cfg, "data", "--data")
    out = _out_dir(args)
    _print_resolved("finetune-gan", {"ckpt": args.ckpt, "train": tcfg.to_dict(), "data": data})
    state = init_gan_state(fm_state, tcfg)
    state = train_gan(state, _training_set(data, state.model_cfg), out / f"gan{tcfg.n_steps}_metrics.jsonl", out)
    path = out / f"gan_{tcfg.n_steps}step.pt"
    save_checkpoint(state, path)
    print(f"wrote {path}")


def _read_cond(path: str, model_cfg: ModelConfig) -> torch.Tensor:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"condition file not found: {path}")
    if p.suffix == ".npy":
        return torch.from_numpy(np.load(p).astype(np.float32))
    y, _ = read_wav(p, model_cfg.sample_rate)
    y = torch.from_numpy(y[: len(y) // model_cfg.cond_hop * model_cfg.cond_hop].copy())
    return FeatureExtractor(model_cfg.cond_feature_kind, model_cfg.cond_in_dim, model_cfg.sample_rate)(y)


def cmd_sample(args, cfg):
    state = load_checkpoint(args.ckpt)
    n = args.steps or (state.train_cfg.n_steps if state.train_cfg.stage == "gan" else 2)
    seed = args.seed if args.seed is not None else 0
    out = Path(args.out) if args.out else _out_dir(args) / "sample.wav"
    _print_resolved("sample", {"ckpt": args.ckpt, "cond": args.cond, "steps": n, "seed": seed,
                               "out": str(out), "pcm16": args.pcm16})
    cond = _read_cond(args.cond, state.model_cfg)
    length = cond.shape[0] * state.model_cfg.cond_hop
    x0 = torch.randn(1, length, generator=torch.Generator().manual_seed(seed))
    y = generate(state.generator, cond[None], x0, uniform_schedule(n))[0]
    out.parent.mkdir(parents=True, exist_ok=True)
    write_wav(out, y.clamp(-1, 1), state.model_cfg.sample_rate, pcm16=args.pcm16, dither_seed=seed)
    print(f"wrote {out}")


def cmd_eval(args, cfg, sweep: bool = False):
    state = load_checkpoint(args.ckpt)
    seed = args.seed if args.seed is not None else 0
    out = _out_dir(args)
    _print_resolved(args.command, {"ckpt": args.ckpt, "data": args.data, "steps": args.steps, "seed": seed})
    clips = load_clips(DatasetManifest.load(args.data), state.model_cfg.sample_rate)
    if sweep:
        reports = step_sweep(state.generator, clips, args.steps, seed)
    else:
        reports = [evaluate(state.generator, clips, uniform_schedule(n), seed) for n in args.steps]
    table = format_table(reports, key="steps")
    print(table)
    stem = "step_sweep" if sweep else "eval"
    (out / f"{stem}.txt").write_text(table + "\n")
    write_records(reports, out / f"{stem}.jsonl")
    if args.spectrogram_png:
        y = generate(state.generator, FeatureExtractor(
            state.model_cfg.cond_feature_kind, state.model_cfg.cond_in_dim, state.model_cfg.sample_rate
        )(clips[0])[None], torch.randn(1, clips[0].shape[-1], generator=torch.Generator().manual_seed(seed)),
            uniform_schedule(args.steps[0]))[0]
        dump_spectrograms([("reference", clips[0]), (f"{args.steps[0]}-step", y)], args.spectrogram_png,
                          state.model_cfg.sample_rate)


def cmd_ablate(args, cfg):
    modes = [m for m in args.modes.split(",") if m]
    for m in modes:
        if m not in {k.value for k in LossKind}:
            raise UsageError(f"unknown loss mode {m!r} in --modes")
    model_cfg = _model_cfg(cfg.get("model", {}), None, None)
    tcfg = _train_cfg(cfg.get("train", {}), args, stage="fm")
    tcfg = replace(tcfg, max_iters=args.budget)
    data = _resolve(args, cfg, "data", "--data")
    dev = _resolve(args, cfg, "dev_data", "--dev-data")
    out = _out_dir(args)
    _print_resolved("ablate", {"modes": modes, "budget": args.budget, "model": model_cfg.to_dict(),
                               "train": tcfg.to_dict(), "data": data, "dev_data": dev})
    train_set = _training_set(data, model_cfg)
    dev_clips = load_clips(DatasetManifest.load(dev), model_cfg.sample_rate)
    rows = ablation_matrix(modes, train_set, dev_clips, model_cfg, tcfg, args.budget, args.eval_steps, tcfg.seed)
    table = format_table([r.report for r in rows])
    print(table)
    (out / "ablation.txt").write_text(table + "\n")
    write_records([r.report for r in rows], out / "ablation.jsonl")


HANDLERS = {
    "make-toy-data": cmd_make_toy_data,
    "train-fm": cmd_train_fm,
    "finetune-gan": cmd_finetune_gan,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "step-sweep": lambda a, c: cmd_eval(a, c, sweep=True),
    "ablate": cmd_ablate,
}


def run(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = _load_config(args.config)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.seed is not None:
        torch.manual_seed(args.seed)
    try:
        HANDLERS[args.command](args, cfg)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # noqa: BLE001
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
