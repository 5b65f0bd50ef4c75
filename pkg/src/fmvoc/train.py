"""Two-stage training: Flow Matching pre-training, then GAN fine-tuning of an N-step generator."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Literal, Optional

import safetensors
import safetensors.torch
import torch
from torch import nn

from .backbone import Generator, ModelConfig
from .data import TrainingSet
from .dsp import ConfigError
from .flow import LossKind, LossMode, fm_loss, interpolate, sample_t
from .gan import (
    DiscriminatorBank,
    DiscriminatorConfig,
    GanLossWeights,
    MultiScaleMelLoss,
    NStepGenerator,
    feature_matching_loss,
    gan_generator_loss,
    hinge_d_loss,
    hinge_g_loss,
)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "fmvoc-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    """Raised when a loss goes non-finite."""


class CheckpointError(ValueError):
    """A checkpoint does not match the architecture it declares."""


@dataclass
class TrainConfig:
    stage: Literal["fm", "gan"] = "fm"
    loss_mode: str = "endpoint_spectral"
    n_steps: int = 1
    batch_size: int = 8
    segment_length: int = 16384
    lr: float = 2e-4
    betas: tuple[float, float] = (0.8, 0.99)
    weight_decay: float = 0.01
    max_iters: int = 5000
    seed: int = 0
    noise_augment: bool = False
    augment_coeff: float = 0.2
    checkpoint_every: int = 0
    grad_clip: float = 100.0
    d_lr: float = 2e-4
    w_adv: float = 1.0
    w_fm: float = 2.0
    w_mel: float = 45.0
    disc_preset: Literal["desk", "full"] = "desk"
    log_every: int = 50

    def __post_init__(self):
        self.betas = tuple(self.betas)
        LossKind(self.loss_mode)
        if self.segment_length % 256:
            raise ConfigError(f"segment_length {self.segment_length} must be divisible by 256")
        if self.stage == "gan" and self.n_steps not in (1, 2, 4):
            raise ConfigError(f"n_steps must be 1, 2 or 4 for GAN fine-tuning, got {self.n_steps}")
        if self.stage not in ("fm", "gan"):
            raise ConfigError(f"unknown stage {self.stage!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def gan_weights(self) -> GanLossWeights:
        return GanLossWeights(self.w_adv, self.w_fm, self.w_mel)


@dataclass
class TrainState:
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    generator: Generator
    optimizer: torch.optim.Optimizer
    scheduler: torch.optim.lr_scheduler.LRScheduler
    rng: torch.Generator
    iteration: int = 0
    discriminator: Optional[DiscriminatorBank] = None
    d_optimizer: Optional[torch.optim.Optimizer] = None
    d_scheduler: Optional[torch.optim.lr_scheduler.LRScheduler] = None
    loss_mode: Optional[LossMode] = None
    mel_loss: Optional[MultiScaleMelLoss] = None
    history: list = field(default_factory=list)

    @property
    def n_step_generator(self) -> NStepGenerator:
        return NStepGenerator(self.generator, self.train_cfg.n_steps)


def _seeded(seed: int, build):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return build()


def _optimizer(params, lr, cfg: TrainConfig):
    opt = torch.optim.AdamW(params, lr=lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(cfg.max_iters, 1))
    return opt, sched


def _loss_mode(cfg: TrainConfig, model_cfg: ModelConfig) -> LossMode:
    return LossMode.default(cfg.loss_mode, model_cfg.sample_rate)


def init_fm_state(model_cfg: ModelConfig, cfg: TrainConfig) -> TrainState:
    if cfg.stage != "fm":
        raise ConfigError("init_fm_state needs stage='fm'")
    kind = LossKind(cfg.loss_mode)
    want = "endpoint" if kind.predicts_endpoint else "velocity"
    if model_cfg.parameterization != want:
        model_cfg = ModelConfig.from_dict({**model_cfg.to_dict(), "parameterization": want})
    gen = _seeded(cfg.seed, lambda: Generator(model_cfg))
    opt, sched = _optimizer(gen.parameters(), cfg.lr, cfg)
    rng = torch.Generator().manual_seed(cfg.seed)
    return TrainState(model_cfg, cfg, gen, opt, sched, rng, loss_mode=_loss_mode(cfg, model_cfg))


def _disc_cfg(cfg: TrainConfig) -> DiscriminatorConfig:
    return DiscriminatorConfig.desk() if cfg.disc_preset == "desk" else DiscriminatorConfig()


def init_gan_state(fm_state: TrainState | None, cfg: TrainConfig) -> TrainState:
    """Stage-2 state: generator weights copied from a stage-1 state, fresh discriminators."""
    if fm_state is None:
        raise ConfigError("GAN fine-tuning needs a Flow Matching checkpoint")
    if cfg.stage != "gan":
        raise ConfigError("init_gan_state needs stage='gan'")
    model_cfg = fm_state.model_cfg
    gen = Generator(model_cfg)
    gen.load_state_dict(fm_state.generator.state_dict())
    disc = _seeded(cfg.seed + 1, lambda: DiscriminatorBank(_disc_cfg(cfg)))
    opt, sched = _optimizer(gen.parameters(), cfg.lr, cfg)
    d_opt, d_sched = _optimizer(disc.parameters(), cfg.d_lr, cfg)
    rng = torch.Generator().manual_seed(cfg.seed)
    return TrainState(
        model_cfg, cfg, gen, opt, sched, rng,
        discriminator=disc, d_optimizer=d_opt, d_scheduler=d_sched,
        mel_loss=MultiScaleMelLoss(model_cfg.sample_rate),
    )


def _check_finite(value: torch.Tensor, what: str, state: TrainState):
    if not torch.isfinite(value):
        raise TrainingError(
            f"non-finite {what} ({value.item()}) at iteration {state.iteration} "
            f"(stage={state.train_cfg.stage}, loss_mode={state.train_cfg.loss_mode})"
        )


def fm_train_step(state: TrainState, batch) -> tuple[TrainState, float]:
    """One Flow Matching update on ``batch = (x1, cond)``."""
    x1, cond = batch
    gen = state.generator
    gen.train()
    x0 = torch.randn(x1.shape, generator=state.rng, dtype=x1.dtype)
    t = sample_t(x1.shape[0], state.rng, dtype=x1.dtype)
    xt = interpolate(x0, x1, t)
    out = gen(xt, t, cond)
    loss = fm_loss(state.loss_mode, out, x1, xt, t, x0)
    _check_finite(loss, "Flow Matching loss", state)
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if state.train_cfg.grad_clip:
        nn.utils.clip_grad_norm_(gen.parameters(), state.train_cfg.grad_clip)
    state.optimizer.step()
    state.scheduler.step()
    state.iteration += 1
    return state, loss.item()


def augment_condition(
    cond: torch.Tensor,
    rng: torch.Generator,
    coeff: float = 0.2,
    enabled: bool = True,
) -> torch.Tensor:
    """``cond + coeff * u * eps`` with one ``u ~ U[0, 1)`` per batch item and elementwise ``eps ~ N(0, 1)``."""
    if not enabled:
        return cond
    u = torch.rand((cond.shape[0],) + (1,) * (cond.ndim - 1), generator=rng, dtype=cond.dtype)
    eps = torch.randn(cond.shape, generator=rng, dtype=cond.dtype)
    return cond + coeff * u * eps


def _gan_inputs(state: TrainState, batch):
    x1, cond = batch
    cfg = state.train_cfg
    if cfg.noise_augment:
        if state.model_cfg.cond_feature_kind != "log_mel":
            raise ConfigError("condition noise augmentation applies to log-mel conditioning only")
        cond = augment_condition(cond, state.rng, cfg.augment_coeff)
    x0 = torch.randn(x1.shape, generator=state.rng, dtype=x1.dtype)
    return x1, cond, x0


def discriminator_step(state: TrainState, x1, cond, x0) -> float:
    nstep = state.n_step_generator
    with torch.no_grad():
        fake = nstep(x0, cond)
    disc = state.discriminator
    real_out = disc(x1)
    fake_out = disc(fake)
    d_loss = hinge_d_loss([s for s, _ in real_out], [s for s, _ in fake_out])
    _check_finite(d_loss, "discriminator loss", state)
    state.d_optimizer.zero_grad(set_to_none=True)
    d_loss.backward()
    state.d_optimizer.step()
    state.d_scheduler.step()
    return d_loss.item()


def generator_step(state: TrainState, x1, cond, x0) -> dict:
    nstep = state.n_step_generator
    disc = state.discriminator
    fake = nstep(x0, cond)
    with torch.no_grad():
        real_out = disc(x1)
    fake_out = disc(fake)
    adv = hinge_g_loss([s for s, _ in fake_out])
    fm = feature_matching_loss([f for _, f in real_out], [f for _, f in fake_out])
    mel = state.mel_loss(fake, x1)
    g_loss = gan_generator_loss(state.train_cfg.gan_weights, adv, fm, mel)
    _check_finite(g_loss, "generator loss", state)
    state.optimizer.zero_grad(set_to_none=True)
    g_loss.backward()
    state.optimizer.step()
    state.scheduler.step()
    return {"g_loss": g_loss.item(), "adv": adv.item(), "fm": fm.item(), "mel": mel.item()}


def gan_train_step(state: TrainState, batch) -> tuple[TrainState, dict]:
    """Alternating D then G update; returns ``{d_loss, g_loss, adv, fm, mel}``."""
    state.generator.train()
    state.discriminator.train()
    x1, cond, x0 = _gan_inputs(state, batch)
    d_loss = discriminator_step(state, x1, cond, x0)
    report = generator_step(state, x1, cond, x0)
    report["d_loss"] = d_loss
    state.iteration += 1
    return state, report


def _params_archive(state: TrainState) -> dict[str, torch.Tensor]:
    tensors = {f"generator.{k}": v for k, v in state.generator.state_dict().items()}
    if state.discriminator is not None:
        tensors.update({f"discriminator.{k}": v for k, v in state.discriminator.state_dict().items()})
    return tensors


def _flatten_optimizer(prefix: str, opt_state: dict, tensors: dict) -> dict:
    """Move per-parameter optimizer tensors into ``tensors``; return the JSON-safe remainder."""
    for idx, slots in opt_state["state"].items():
        for k, v in slots.items():
            tensors[f"{prefix}.state.{idx}.{k}"] = v
    return {"param_groups": opt_state["param_groups"], "n_states": len(opt_state["state"])}


def _unflatten_optimizer(prefix: str, record: dict, tensors: dict) -> dict:
    state: dict[int, dict] = {}
    head = prefix + ".state."
    for name, v in tensors.items():
        if name.startswith(head):
            idx, slot = name[len(head):].split(".", 1)
            state.setdefault(int(idx), {})[slot] = v
    if len(state) != record["n_states"]:
        raise CheckpointError(f"{prefix}: expected state for {record['n_states']} parameters, found {len(state)}")
    return {"state": state, "param_groups": record["param_groups"]}


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    """Write a safetensors archive; configs and optimizer bookkeeping go in its JSON metadata."""
    cfg = state.train_cfg
    tensors = {k: v.detach().contiguous() for k, v in _params_archive(state).items()}
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "stage": cfg.stage,
        "n_steps": cfg.n_steps if cfg.stage == "gan" else None,
        "model_config": state.model_cfg.to_dict(),
        "train_config": cfg.to_dict(),
        "disc_config": state.discriminator.cfg.to_dict() if state.discriminator is not None else None,
        "iteration": state.iteration,
        "optimizer": _flatten_optimizer("optimizer", state.optimizer.state_dict(), tensors),
        "scheduler": state.scheduler.state_dict(),
        "d_optimizer": None,
        "d_scheduler": None,
    }
    if state.d_optimizer is not None:
        meta["d_optimizer"] = _flatten_optimizer("d_optimizer", state.d_optimizer.state_dict(), tensors)
        meta["d_scheduler"] = state.d_scheduler.state_dict()
    tensors["rng.state"] = state.rng.get_state()
    tensors = {k: v.contiguous() for k, v in tensors.items()}
    blob = safetensors.torch.save(tensors, metadata={"fmvoc": json.dumps(meta, sort_keys=True)})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def _validated(module: nn.Module, tensors: dict, prefix: str) -> dict:
    expected = module.state_dict()
    got = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    for name in got:
        if name not in expected:
            raise CheckpointError(f"unexpected tensor {prefix}{name}")
    for name, ref in expected.items():
        if name not in got:
            raise CheckpointError(f"missing tensor {prefix}{name}")
        if tuple(got[name].shape) != tuple(ref.shape):
            raise CheckpointError(
                f"tensor {prefix}{name} has shape {tuple(got[name].shape)}, expected {tuple(ref.shape)}"
            )
    return got


def _read_archive(path: Path) -> tuple[dict, dict]:
    try:
        with safetensors.safe_open(str(path), framework="pt") as fh:
            header = fh.metadata() or {}
            tensors = {k: fh.get_tensor(k) for k in fh.keys()}
    except Exception as err:  # noqa: BLE001 - any parse failure means "not ours"
        raise CheckpointError(f"{path} is not a readable checkpoint: {err}") from err
    if "fmvoc" not in header:
        raise CheckpointError(f"{path} is not a checkpoint written by this package")
    return json.loads(header["fmvoc"]), tensors


def load_checkpoint(path: str | Path) -> TrainState:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    meta, tensors = _read_archive(path)
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a checkpoint written by this package")
    if meta["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {meta['version']}")
    model_cfg = ModelConfig.from_dict(meta["model_config"])
    cfg = TrainConfig.from_dict(meta["train_config"])
    known = ("generator.", "discriminator.", "optimizer.state.", "d_optimizer.state.")
    for k in tensors:
        if k != "rng.state" and not k.startswith(known):
            raise CheckpointError(f"unexpected tensor {k}")
    gen = Generator(model_cfg)
    gen.load_state_dict(_validated(gen, tensors, "generator."))
    disc = d_opt = d_sched = None
    if meta["disc_config"] is not None:
        disc = DiscriminatorBank(DiscriminatorConfig(**meta["disc_config"]))
        disc.load_state_dict(_validated(disc, tensors, "discriminator."))
        d_opt, d_sched = _optimizer(disc.parameters(), cfg.d_lr, cfg)
        d_opt.load_state_dict(_unflatten_optimizer("d_optimizer", meta["d_optimizer"], tensors))
        d_sched.load_state_dict(meta["d_scheduler"])
    elif any(k.startswith("discriminator.") for k in tensors):
        raise CheckpointError("discriminator tensors present without a discriminator config")
    opt, sched = _optimizer(gen.parameters(), cfg.lr, cfg)
    opt.load_state_dict(_unflatten_optimizer("optimizer", meta["optimizer"], tensors))
    sched.load_state_dict(meta["scheduler"])
    rng = torch.Generator()
    rng.set_state(tensors["rng.state"])
    state = TrainState(
        model_cfg, cfg, gen, opt, sched, rng, iteration=meta["iteration"],
        discriminator=disc, d_optimizer=d_opt, d_scheduler=d_sched,
    )
    if cfg.stage == "fm":
        state.loss_mode = _loss_mode(cfg, model_cfg)
    else:
        state.mel_loss = MultiScaleMelLoss(model_cfg.sample_rate)
    return state


class MetricsLog:
    """Line-delimited JSON metrics: one record per logged iteration."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        self.t0 = time.monotonic()
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.fh = open(self.path, "a")

    def write(self, iteration: int, **values):
        rec = {"iter": iteration, **values, "wall": round(time.monotonic() - self.t0, 3)}
        if self.path:
            self.fh.write(json.dumps(rec) + "\n")
            self.fh.flush()
        return rec

    def close(self):
        if self.path:
            self.fh.close()


def _run(state: TrainState, data: TrainingSet, step_fn, metrics_path, ckpt_dir, name: str):
    cfg = state.train_cfg
    mlog = MetricsLog(metrics_path)
    try:
        while state.iteration < cfg.max_iters:
            batch = data.batch(cfg.batch_size, cfg.segment_length, state.rng)
            state, out = step_fn(state, batch)
            values = out if isinstance(out, dict) else {"loss": out}
            state.history.append(values)
            if cfg.log_every and state.iteration % cfg.log_every == 0:
                rec = mlog.write(state.iteration, **values)
                log.info("%s %s", name, rec)
            if ckpt_dir and cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
                save_checkpoint(state, Path(ckpt_dir) / f"{name}_{state.iteration:07d}.pt")
    finally:
        mlog.close()
    return state


def train_fm(state: TrainState, data: TrainingSet, metrics_path=None, ckpt_dir=None) -> TrainState:
    return _run(state, data, fm_train_step, metrics_path, ckpt_dir, "fm")


def train_gan(state: TrainState, data: TrainingSet, metrics_path=None, ckpt_dir=None) -> TrainState:
    return _run(state, data, gan_train_step, metrics_path, ckpt_dir, "gan")


def param_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def moving_average(xs: list[float], window: int) -> list[float]:
    out = []
    for i in range(len(xs)):
        lo = max(0, i - window + 1)
        out.append(sum(xs[lo: i + 1]) / (i + 1 - lo))
    return out
