"""Three-stage training: adversarial pretraining, encoder fitting, and joint
encoder+generator refinement.

Stage 1 alternates ``n_critic`` critic updates against one generator update,
with latent draws from N(0, 1). Stage 2 fits the encoder on the
reconstruction objective while generator and critic stay frozen (bitwise).
Stage 3 fine-tunes encoder and generator together on the same objective at a
lower learning rate, critic still frozen.

Reproducibility: every random stream (parameter init, batch order, latent
draws, penalty interpolation) is a numpy Generator derived from the run seed
and a purpose tag. The compute backend is torch on CPU with a fixed thread
count, which is run-to-run deterministic, so identical config+seed+data give
byte-identical loss curves. Losses and parameters are NaN-guarded on every
update; divergence aborts with a diagnostic checkpoint rather than being
papered over.

metrics.csv rows (step, stage, loss_name, value) are buffered per stage and
appended only when the stage completes, so an interrupted and resumed run
reproduces the uninterrupted file exactly.
"""
from __future__ import annotations

import csv
import hashlib
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import ConfigError, EmptyDataset, NonFiniteLoss, ResumeMismatch, ShapeMismatch, UntrainedBundle
from .losses import EncoderLossConfig, GanLossConfig, critic_loss, encoder_loss_terms, generator_loss
from .networks import NetworkParams, NetworkSpec, Role, init_params
from .volume import IntensityDomain, Volume


class Stage(str, Enum):
    GAN = "gan"
    ENCODER = "encoder"
    REFINE = "refine"


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-4
    moment_decays: tuple[float, float] = (0.9, 0.999)

    def __post_init__(self) -> None:
        if self.kind != "adam":
            raise ConfigError(f"unsupported optimizer kind {self.kind!r}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")

    def build(self, params) -> torch.optim.Optimizer:
        return torch.optim.Adam(params, lr=self.lr, betas=self.moment_decays)


@dataclass(frozen=True)
class StageSteps:
    gan: int = 0
    encoder: int = 0
    refine: int = 0

    def __post_init__(self) -> None:
        if min(self.gan, self.encoder, self.refine) < 0:
            raise ConfigError("stage step counts must be >= 0")


REFINE_VARS = ("eg", "e", "egd")


@dataclass
class TrainConfig:
    """Hyperparameters and stage schedule for a full training run."""

    network: NetworkSpec = field(default_factory=NetworkSpec)
    gan: GanLossConfig = field(default_factory=GanLossConfig)
    enc: EncoderLossConfig = field(default_factory=EncoderLossConfig)
    stage_steps: StageSteps = field(default_factory=StageSteps)
    batch_size: int = 8
    opt_gan: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(lr=1e-4, moment_decays=(0.0, 0.9)))
    opt_encoder: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(lr=1e-4))
    opt_refine: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(lr=1e-5))
    seed: int = 0
    checkpoint_every: int = 0
    refine_vars: str = "eg"

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.refine_vars not in REFINE_VARS:
            raise ConfigError(f"refine_vars must be one of {REFINE_VARS}, got {self.refine_vars!r}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")


@dataclass
class StageReport:
    stage: Stage
    curves: list[tuple[int, dict[str, float]]]
    wall_time_s: float
    final_checkpoint: str | None = None
    resumed: bool = False


@dataclass
class PipelineBundle:
    """Trained networks plus the per-stage reports."""

    g: NetworkParams
    d: NetworkParams
    e: NetworkParams
    reports: list[StageReport] = field(default_factory=list)

    @classmethod
    def load(cls, out_dir: Path | str) -> "PipelineBundle":
        """Load the scoring bundle: refined G/E and the stage-1 critic."""
        out_dir = Path(out_dir)
        wanted = {
            "g": (out_dir / "checkpoints" / "refine" / "generator", Role.GENERATOR),
            "d": (out_dir / "checkpoints" / "gan" / "critic", Role.CRITIC),
            "e": (out_dir / "checkpoints" / "refine" / "encoder", Role.ENCODER),
        }
        missing = [str(p) for p, _ in wanted.values() if not (p / "manifest.json").is_file()]
        if missing:
            raise UntrainedBundle(f"missing finalized checkpoints: {', '.join(missing)}")
        loaded = {k: NetworkParams.load(p, role) for k, (p, role) in wanted.items()}
        return cls(**loaded)


def derive_rng(seed: int, tag: str) -> np.random.Generator:
    digest = int.from_bytes(hashlib.sha256(tag.encode()).digest()[:4], "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed), digest]))


def stack_volumes(volumes: Sequence[Volume], spec: NetworkSpec) -> torch.Tensor:
    """Validate and stack preprocessed volumes into a (N,1,S,S,S) float32 tensor."""
    if len(volumes) == 0:
        raise EmptyDataset("no volumes to train on")
    side = spec.volume_side
    arrs = []
    for i, v in enumerate(volumes):
        if v.intensity_domain is not IntensityDomain.NORMALIZED:
            raise ConfigError(f"volume {i} is {v.intensity_domain.value}, expected NORMALIZED (run preprocess)")
        if v.shape != (side, side, side):
            raise ShapeMismatch(f"volume {i} has shape {v.shape}, expected {(side,) * 3}")
        arrs.append(v.data.astype(np.float32))
    return torch.from_numpy(np.stack(arrs)).reshape(len(arrs), 1, side, side, side)


def _as_dataset(data, spec: NetworkSpec) -> torch.Tensor:
    if isinstance(data, torch.Tensor):
        if data.numel() == 0:
            raise EmptyDataset("no volumes to train on")
        return data
    if isinstance(data, np.ndarray):
        if data.size == 0:
            raise EmptyDataset("no volumes to train on")
        side = spec.volume_side
        return torch.from_numpy(data.astype(np.float32)).reshape(-1, 1, side, side, side)
    return stack_volumes(data, spec)


class _Batcher:
    """Endless seeded batch index stream, reshuffled every epoch."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self._order = rng.permutation(n)
        self._pos = 0

    def next_indices(self) -> np.ndarray:
        if self._pos + self.batch_size > self.n:
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        out = self._order[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return out


def _require_finite_loss(value: torch.Tensor, what: str) -> None:
    if not torch.isfinite(value).all():
        raise NonFiniteLoss(f"{what} became non-finite")


def _require_finite_params(*nets: NetworkParams) -> None:
    for net in nets:
        for name, p in net.module.named_parameters():
            if not torch.isfinite(p).all():
                raise NonFiniteLoss(f"parameter {net.role.value}:{name} became non-finite")


def _set_requires_grad(net: NetworkParams, flag: bool) -> None:
    for p in net.module.parameters():
        p.requires_grad_(flag)


def _stage_dir(out_dir: Path | str | None, stage: Stage) -> Path | None:
    if out_dir is None:
        return None
    return Path(out_dir) / "checkpoints" / stage.value


def _save_stage(
    stage_dir: Path | None, nets: dict[str, NetworkParams], config_hash: str | None
) -> str | None:
    if stage_dir is None:
        return None
    for name, net in nets.items():
        net.save(stage_dir / name, config_hash=config_hash)
    return str(stage_dir)


def _save_diagnostic(out_dir, stage: Stage, nets: dict[str, NetworkParams]) -> None:
    if out_dir is None:
        return
    base = Path(out_dir) / "checkpoints" / f"diagnostic_{stage.value}"
    for name, net in nets.items():
        net.save(base / name)


def append_metrics(out_dir: Path | str, stage: Stage, curves: list[tuple[int, dict[str, float]]]) -> Path:
    """Append one completed stage's loss curves to metrics.csv."""
    path = Path(out_dir) / "metrics.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not path.exists()
    with path.open("a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(["step", "stage", "loss_name", "value"])
        for step, losses in curves:
            for name, value in losses.items():
                writer.writerow([step, stage.value, name, repr(float(value))])
    return path


def train_gan(
    data,
    cfg: TrainConfig,
    out_dir: Path | str | None = None,
    config_hash: str | None = None,
) -> tuple[NetworkParams, NetworkParams, StageReport]:
    """Adversarial stage: n_critic critic updates per generator update."""
    t0 = time.monotonic()
    data_t = _as_dataset(data, cfg.network)
    g = init_params(cfg.network, Role.GENERATOR, seed=cfg.seed)
    d = init_params(cfg.network, Role.CRITIC, seed=cfg.seed)
    g_opt = cfg.opt_gan.build(g.module.parameters())
    d_opt = cfg.opt_gan.build(d.module.parameters())
    batches = _Batcher(data_t.shape[0], cfg.batch_size, derive_rng(cfg.seed, "gan_data"))
    z_rng = derive_rng(cfg.seed, "gan_z")
    eps_rng = derive_rng(cfg.seed, "gan_eps")
    latent = cfg.network.latent_dim
    curves: list[tuple[int, dict[str, float]]] = []
    stage_dir = _stage_dir(out_dir, Stage.GAN)
    try:
        for step in range(1, cfg.stage_steps.gan + 1):
            critic_vals = []
            for _ in range(cfg.gan.n_critic):
                x = data_t[torch.from_numpy(batches.next_indices())]
                z = torch.from_numpy(z_rng.standard_normal((x.shape[0], latent))).float()
                d_opt.zero_grad()
                loss = critic_loss(d, g, x, z, cfg.gan, eps_rng)
                _require_finite_loss(loss, "critic loss")
                loss.backward()
                d_opt.step()
                d.step_count += 1
                critic_vals.append(float(loss.item()))
            z = torch.from_numpy(z_rng.standard_normal((batches.batch_size, latent))).float()
            g_opt.zero_grad()
            g_loss = generator_loss(d, g, z)
            _require_finite_loss(g_loss, "generator loss")
            g_loss.backward()
            g_opt.step()
            g.step_count += 1
            _require_finite_params(g, d)
            curves.append(
                (step, {"critic_loss": float(np.mean(critic_vals)), "generator_loss": float(g_loss.item())})
            )
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0 and stage_dir is not None:
                snap = stage_dir / f"step_{step:06d}"
                g.save(snap / "generator", config_hash=config_hash)
                d.save(snap / "critic", config_hash=config_hash)
    except NonFiniteLoss:
        _save_diagnostic(out_dir, Stage.GAN, {"generator": g, "critic": d})
        raise
    g.created_by_stage = Stage.GAN.value
    d.created_by_stage = Stage.GAN.value
    final = _save_stage(stage_dir, {"generator": g, "critic": d}, config_hash)
    report = StageReport(Stage.GAN, curves, time.monotonic() - t0, final)
    return g, d, report


def train_encoder(
    data,
    g: NetworkParams,
    d: NetworkParams,
    cfg: TrainConfig,
    out_dir: Path | str | None = None,
    config_hash: str | None = None,
) -> tuple[NetworkParams, StageReport]:
    """Encoder stage: fit E on the reconstruction objective, G and D frozen."""
    t0 = time.monotonic()
    data_t = _as_dataset(data, cfg.network)
    e = init_params(cfg.network, Role.ENCODER, seed=cfg.seed)
    _set_requires_grad(g, False)
    _set_requires_grad(d, False)
    e_opt = cfg.opt_encoder.build(e.module.parameters())
    batches = _Batcher(data_t.shape[0], cfg.batch_size, derive_rng(cfg.seed, "encoder_data"))
    curves: list[tuple[int, dict[str, float]]] = []
    stage_dir = _stage_dir(out_dir, Stage.ENCODER)
    try:
        curves.extend(
            _reconstruction_steps(
                data_t, batches, cfg.stage_steps.encoder, e_opt, g, d, e, cfg,
                stage_dir, config_hash, stepped=(e,),
            )
        )
    except NonFiniteLoss:
        _save_diagnostic(out_dir, Stage.ENCODER, {"encoder": e})
        raise
    finally:
        _set_requires_grad(g, True)
        _set_requires_grad(d, True)
    e.created_by_stage = Stage.ENCODER.value
    final = _save_stage(stage_dir, {"encoder": e}, config_hash)
    report = StageReport(Stage.ENCODER, curves, time.monotonic() - t0, final)
    return e, report


def refine_joint(
    data,
    g: NetworkParams,
    d: NetworkParams,
    e: NetworkParams,
    cfg: TrainConfig,
    out_dir: Path | str | None = None,
    config_hash: str | None = None,
) -> tuple[NetworkParams, NetworkParams, StageReport]:
    """Refinement stage: fine-tune E and G on the reconstruction objective.

    The critic stays frozen under the default ``refine_vars="eg"`` (and "e");
    "egd" additionally unfreezes it, for study only.
    """
    t0 = time.monotonic()
    data_t = _as_dataset(data, cfg.network)
    trained: list[NetworkParams] = {"eg": [e, g], "e": [e], "egd": [e, g, d]}[cfg.refine_vars]
    for net in (g, d, e):
        _set_requires_grad(net, net in trained)
    params = [p for net in trained for p in net.module.parameters()]
    opt = cfg.opt_refine.build(params)
    batches = _Batcher(data_t.shape[0], cfg.batch_size, derive_rng(cfg.seed, "refine_data"))
    curves: list[tuple[int, dict[str, float]]] = []
    stage_dir = _stage_dir(out_dir, Stage.REFINE)
    try:
        curves.extend(
            _reconstruction_steps(
                data_t, batches, cfg.stage_steps.refine, opt, g, d, e, cfg,
                stage_dir, config_hash, stepped=tuple(trained),
            )
        )
    except NonFiniteLoss:
        _save_diagnostic(out_dir, Stage.REFINE, {"generator": g, "encoder": e})
        raise
    finally:
        for net in (g, d, e):
            _set_requires_grad(net, True)
    g.created_by_stage = Stage.REFINE.value
    e.created_by_stage = Stage.REFINE.value
    final = _save_stage(stage_dir, {"generator": g, "encoder": e}, config_hash)
    report = StageReport(Stage.REFINE, curves, time.monotonic() - t0, final)
    return g, e, report


def _reconstruction_steps(
    data_t: torch.Tensor,
    batches: _Batcher,
    steps: int,
    opt: torch.optim.Optimizer,
    g: NetworkParams,
    d: NetworkParams,
    e: NetworkParams,
    cfg: TrainConfig,
    stage_dir: Path | None,
    config_hash: str | None,
    stepped: tuple[NetworkParams, ...],
) -> list[tuple[int, dict[str, float]]]:
    curves = []
    for step in range(1, steps + 1):
        x = data_t[torch.from_numpy(batches.next_indices())]
        opt.zero_grad()
        total, l_img, l_feat = encoder_loss_terms(x, g, d, e, cfg.enc)
        _require_finite_loss(total, "reconstruction loss")
        total.backward()
        opt.step()
        for net in stepped:
            net.step_count += 1
        _require_finite_params(*stepped)
        curves.append(
            (step, {"total": float(total.item()), "l_img": float(l_img.item()), "l_feat": float(l_feat.item())})
        )
        if cfg.checkpoint_every and step % cfg.checkpoint_every == 0 and stage_dir is not None:
            snap = stage_dir / f"step_{step:06d}"
            for net, name in ((g, "generator"), (e, "encoder")):
                if net in stepped:
                    net.save(snap / name, config_hash=config_hash)
    return curves


def _try_resume(stage_dir: Path | None, names: dict[str, Role], spec: NetworkSpec):
    """Load a completed stage checkpoint if present; None means train it."""
    if stage_dir is None:
        return None
    loaded = {}
    for name, role in names.items():
        path = stage_dir / name
        if not (path / "manifest.json").is_file():
            return None
        loaded[name] = NetworkParams.load(path, role)
    for name, net in loaded.items():
        if net.spec != spec:
            raise ResumeMismatch(
                f"checkpoint {stage_dir / name} was trained under a different network spec"
            )
    return loaded


def run_full_pipeline(
    data,
    cfg: TrainConfig,
    out_dir: Path | str | None = None,
    resume: bool = False,
    config_hash: str | None = None,
) -> PipelineBundle:
    """Run stages 1 -> 2 -> 3, checkpointing after each.

    With ``resume=True``, stages whose checkpoints already exist under
    ``out_dir`` are loaded instead of retrained (spec mismatches raise
    ResumeMismatch), reproducing the same downstream start state as an
    uninterrupted run.
    """
    data_t = _as_dataset(data, cfg.network)
    reports: list[StageReport] = []

    loaded = _try_resume(_stage_dir(out_dir, Stage.GAN), {"generator": Role.GENERATOR, "critic": Role.CRITIC}, cfg.network) if resume else None
    if loaded is not None:
        g, d = loaded["generator"], loaded["critic"]
        reports.append(StageReport(Stage.GAN, [], 0.0, str(_stage_dir(out_dir, Stage.GAN)), resumed=True))
    else:
        g, d, rep = train_gan(data_t, cfg, out_dir, config_hash)
        if out_dir is not None:
            append_metrics(out_dir, Stage.GAN, rep.curves)
        reports.append(rep)

    loaded = _try_resume(_stage_dir(out_dir, Stage.ENCODER), {"encoder": Role.ENCODER}, cfg.network) if resume else None
    if loaded is not None:
        e = loaded["encoder"]
        reports.append(StageReport(Stage.ENCODER, [], 0.0, str(_stage_dir(out_dir, Stage.ENCODER)), resumed=True))
    else:
        e, rep = train_encoder(data_t, g, d, cfg, out_dir, config_hash)
        if out_dir is not None:
            append_metrics(out_dir, Stage.ENCODER, rep.curves)
        reports.append(rep)

    loaded = _try_resume(_stage_dir(out_dir, Stage.REFINE), {"generator": Role.GENERATOR, "encoder": Role.ENCODER}, cfg.network) if resume else None
    if loaded is not None:
        g, e = loaded["generator"], loaded["encoder"]
        reports.append(StageReport(Stage.REFINE, [], 0.0, str(_stage_dir(out_dir, Stage.REFINE)), resumed=True))
    else:
        g, e, rep = refine_joint(data_t, g, d, e, cfg, out_dir, config_hash)
        if out_dir is not None:
            append_metrics(out_dir, Stage.REFINE, rep.curves)
        reports.append(rep)

    return PipelineBundle(g=g, d=d, e=e, reports=reports)
