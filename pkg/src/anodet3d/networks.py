"""The three differentiable maps: generator, critic, and encoder.

All are 3D conv nets over single-channel cubes of side ``volume_side``:

* generator: latent vector -> volume, strided transposed-conv blocks doubling
  resolution from 4^3 up to the full side, tanh output so values live in
  (-1, 1) like the normalized data;
* critic: volume -> unbounded scalar score (no sigmoid) via strided conv
  blocks halving resolution down to 4^3, with the activations of one
  configurable block exposed as a flattened feature vector;
* encoder: the critic topology with its own weights, ending in a linear map
  to the latent dimension with a final tanh.

Latent codes and feature vectors are plain 1D numpy arrays. Parameters are
held in torch modules wrapped in :class:`NetworkParams`, which carries the
spec, seed, and stage bookkeeping and implements the checkpoint format
(one little-endian float32 blob per named parameter tensor plus a JSON
manifest).

float32 is the training dtype. Note tanh can round to exactly +/-1.0 in
float32 under saturation; freshly initialized networks stay strictly inside
(-1, 1) and Volume's NORMALIZED invariant is the closed interval.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
import shutil
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import CheckpointError, ConfigError, MissingCheckpoint, ShapeMismatch
from .volume import IntensityDomain, Volume

BASE_SIDE = 4  # coarsest resolution of every network


class Role(str, Enum):
    GENERATOR = "G"
    CRITIC = "D"
    ENCODER = "E"


class NormKind(str, Enum):
    NONE = "NONE"
    INSTANCE = "INSTANCE"
    LAYER = "LAYER"


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture contract shared by generator, critic, and encoder.

    ``channel_schedule`` lists generator channels per resolution level from
    4^3 upward (the critic/encoder use it mirrored); ``None`` selects the
    default that ends at 64 channels on the finest level and doubles toward
    the coarse end. ``feature_tap_level`` indexes the critic conv block whose
    activations form the feature vector; ``None`` selects the penultimate
    block.
    """

    latent_dim: int = 2500
    volume_side: int = 64
    channel_schedule: tuple[int, ...] | None = None
    feature_tap_level: int | None = None
    g_norm: NormKind = NormKind.INSTANCE
    d_norm: NormKind = NormKind.NONE
    e_norm: NormKind = NormKind.NONE

    def __post_init__(self) -> None:
        if self.latent_dim < 1:
            raise ConfigError(f"latent_dim must be >= 1, got {self.latent_dim}")
        side = self.volume_side
        if side < 16 or side & (side - 1) != 0:
            raise ConfigError(f"volume_side must be a power of 2 >= 16, got {side}")
        levels = self.num_levels
        if self.channel_schedule is None:
            object.__setattr__(
                self, "channel_schedule", tuple(64 * 2 ** (levels - 1 - i) for i in range(levels))
            )
        else:
            object.__setattr__(self, "channel_schedule", tuple(int(c) for c in self.channel_schedule))
        if len(self.channel_schedule) != levels:
            raise ConfigError(
                f"channel_schedule length must be log2(volume_side)-2 = {levels}, got {len(self.channel_schedule)}"
            )
        if any(c < 1 for c in self.channel_schedule):
            raise ConfigError(f"channel_schedule entries must be >= 1, got {self.channel_schedule}")
        if self.feature_tap_level is None:
            object.__setattr__(self, "feature_tap_level", levels - 2)
        if not 0 <= self.feature_tap_level < levels:
            raise ConfigError(f"feature_tap_level must be in [0, {levels - 1}], got {self.feature_tap_level}")
        for name in ("g_norm", "d_norm", "e_norm"):
            object.__setattr__(self, name, NormKind(getattr(self, name)))

    @property
    def num_levels(self) -> int:
        return int(math.log2(self.volume_side)) - 2

    @property
    def critic_channels(self) -> tuple[int, ...]:
        return tuple(reversed(self.channel_schedule))  # type: ignore[arg-type]

    @property
    def feature_length(self) -> int:
        """Flattened size of the critic activations at the tap level."""
        side = self.volume_side // 2 ** (self.feature_tap_level + 1)
        return self.critic_channels[self.feature_tap_level] * side**3

    def to_dict(self) -> dict:
        return {
            "latent_dim": self.latent_dim,
            "volume_side": self.volume_side,
            "channel_schedule": list(self.channel_schedule),  # type: ignore[arg-type]
            "feature_tap_level": self.feature_tap_level,
            "g_norm": self.g_norm.value,
            "d_norm": self.d_norm.value,
            "e_norm": self.e_norm.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            latent_dim=int(d["latent_dim"]),
            volume_side=int(d["volume_side"]),
            channel_schedule=tuple(d["channel_schedule"]),
            feature_tap_level=int(d["feature_tap_level"]),
            g_norm=NormKind(d["g_norm"]),
            d_norm=NormKind(d["d_norm"]),
            e_norm=NormKind(d["e_norm"]),
        )


def _make_norm(kind: NormKind, channels: int) -> nn.Module | None:
    if kind is NormKind.NONE:
        return None
    if kind is NormKind.INSTANCE:
        return nn.InstanceNorm3d(channels, affine=True)
    return nn.GroupNorm(1, channels)  # layer norm over channel+spatial dims


class _DownBlock(nn.Module):
    """Strided conv halving resolution, optional per-sample norm, leaky ReLU."""

    def __init__(self, c_in: int, c_out: int, norm: NormKind):
        super().__init__()
        self.conv = nn.Conv3d(c_in, c_out, kernel_size=4, stride=2, padding=1)
        self.norm = _make_norm(norm, c_out)
        self.act = nn.LeakyReLU(0.2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv(x)
        if self.norm is not None:
            h = self.norm(h)
        return self.act(h)


class _UpBlock(nn.Module):
    """Strided transposed conv doubling resolution, optional norm, ReLU."""

    def __init__(self, c_in: int, c_out: int, norm: NormKind):
        super().__init__()
        self.conv = nn.ConvTranspose3d(c_in, c_out, kernel_size=4, stride=2, padding=1)
        self.norm = _make_norm(norm, c_out)
        self.act = nn.ReLU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv(x)
        if self.norm is not None:
            h = self.norm(h)
        return self.act(h)


class GeneratorNet(nn.Module):
    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        ch = spec.channel_schedule
        assert ch is not None
        self.project = nn.Linear(spec.latent_dim, ch[0] * BASE_SIDE**3)
        self.head_norm = _make_norm(spec.g_norm, ch[0])
        self.head_act = nn.ReLU()
        self.blocks = nn.Sequential(
            *[_UpBlock(ch[i], ch[i + 1], spec.g_norm) for i in range(len(ch) - 1)]
        )
        self.to_volume = nn.ConvTranspose3d(ch[-1], 1, kernel_size=4, stride=2, padding=1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim != 2 or z.shape[1] != self.spec.latent_dim:
            raise ShapeMismatch(f"latent batch must be (B, {self.spec.latent_dim}), got {tuple(z.shape)}")
        h = self.project(z).reshape(z.shape[0], -1, BASE_SIDE, BASE_SIDE, BASE_SIDE)
        if self.head_norm is not None:
            h = self.head_norm(h)
        h = self.head_act(h)
        h = self.blocks(h)
        return torch.tanh(self.to_volume(h))


class CriticNet(nn.Module):
    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        ch = spec.critic_channels
        blocks = []
        c_in = 1
        for c_out in ch:
            blocks.append(_DownBlock(c_in, c_out, spec.d_norm))
            c_in = c_out
        self.blocks = nn.ModuleList(blocks)
        self.score_head = nn.Conv3d(c_in, 1, kernel_size=BASE_SIDE, stride=1, padding=0)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        _check_volume_batch(x, self.spec.volume_side)
        tap = self.spec.feature_tap_level
        h = x
        features = None
        for i, block in enumerate(self.blocks):
            h = block(h)
            if i == tap:
                features = h.flatten(1)
        assert features is not None
        score = self.score_head(h).reshape(x.shape[0])
        return score, features


class EncoderNet(nn.Module):
    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        ch = spec.critic_channels
        blocks = []
        c_in = 1
        for c_out in ch:
            blocks.append(_DownBlock(c_in, c_out, spec.e_norm))
            c_in = c_out
        self.blocks = nn.Sequential(*blocks)
        self.to_latent = nn.Linear(c_in * BASE_SIDE**3, spec.latent_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_volume_batch(x, self.spec.volume_side)
        h = self.blocks(x).flatten(1)
        return torch.tanh(self.to_latent(h))


def _check_volume_batch(x: torch.Tensor, side: int) -> None:
    if x.ndim != 5 or x.shape[1] != 1 or x.shape[2:] != (side, side, side):
        raise ShapeMismatch(f"volume batch must be (B, 1, {side}, {side}, {side}), got {tuple(x.shape)}")


def build_module(spec: NetworkSpec, role: Role) -> nn.Module:
    if role is Role.GENERATOR:
        return GeneratorNet(spec)
    if role is Role.CRITIC:
        return CriticNet(spec)
    return EncoderNet(spec)


@dataclass
class NetworkParams:
    """Parameter set of one network, stage-tagged and checkpointable."""

    role: Role
    spec: NetworkSpec
    module: nn.Module
    seed: int
    step_count: int = 0
    created_by_stage: str | None = None

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.module.parameters())

    def checksum(self) -> str:
        """SHA-256 over the named parameter tensors, bitwise."""
        h = hashlib.sha256()
        for name, tensor in sorted(self.module.state_dict().items()):
            h.update(name.encode())
            h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def save(self, directory: Path | str, config_hash: str | None = None) -> Path:
        """Write the checkpoint atomically (temp dir, then rename)."""
        directory = Path(directory)
        directory.parent.mkdir(parents=True, exist_ok=True)
        tmp = directory.parent / (directory.name + ".tmp")
        if tmp.exists():
            shutil.rmtree(tmp)
        tmp.mkdir(parents=True)
        tensors = {}
        for name, tensor in self.module.state_dict().items():
            arr = tensor.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4")
            (tmp / f"{name}.bin").write_bytes(arr.tobytes())
            tensors[name] = list(tensor.shape)
        manifest = {
            "role": self.role.value,
            "spec": self.spec.to_dict(),
            "step_count": self.step_count,
            "seed": self.seed,
            "created_by_stage": self.created_by_stage,
            "tensors": tensors,
        }
        if config_hash is not None:
            manifest["config_hash"] = config_hash
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        if directory.exists():
            shutil.rmtree(directory)
        os.replace(tmp, directory)
        return directory

    @classmethod
    def load(cls, directory: Path | str, expected_role: Role | None = None) -> "NetworkParams":
        directory = Path(directory)
        manifest_path = directory / "manifest.json"
        if not manifest_path.is_file():
            raise MissingCheckpoint(f"no checkpoint at {directory}")
        manifest = json.loads(manifest_path.read_text())
        role = Role(manifest["role"])
        if expected_role is not None and role is not expected_role:
            raise CheckpointError(f"{directory} holds a {role.value} checkpoint, expected {expected_role.value}")
        spec = NetworkSpec.from_dict(manifest["spec"])
        module = build_module(spec, role)
        state = {}
        for name, tensor in module.state_dict().items():
            blob_path = directory / f"{name}.bin"
            if not blob_path.is_file():
                raise CheckpointError(f"checkpoint {directory} missing tensor blob {name}")
            raw = blob_path.read_bytes()
            if len(raw) != tensor.numel() * 4:
                raise CheckpointError(
                    f"checkpoint blob {blob_path} has {len(raw)} bytes, expected {tensor.numel() * 4}"
                )
            arr = np.frombuffer(raw, dtype="<f4").reshape(tuple(tensor.shape)).copy()
            state[name] = torch.from_numpy(arr).to(tensor.dtype)
        module.load_state_dict(state)
        return cls(
            role=role,
            spec=spec,
            module=module,
            seed=int(manifest["seed"]),
            step_count=int(manifest["step_count"]),
            created_by_stage=manifest.get("created_by_stage"),
        )


def _fan_in(layer: nn.Module) -> int:
    if isinstance(layer, nn.Linear):
        return layer.in_features
    if isinstance(layer, (nn.Conv3d, nn.ConvTranspose3d)):
        k = 1
        for s in layer.kernel_size:
            k *= s
        return layer.in_channels * k
    raise TypeError(f"no fan-in rule for {type(layer)}")


def init_params(
    spec: NetworkSpec, role: Role, seed: int, dtype: torch.dtype = torch.float32
) -> NetworkParams:
    """Build a network and initialize it reproducibly from the seed.

    Conv/linear weights draw from N(0, 1/fan_in) with fan_in = input units x
    kernel volume; biases start at zero; norm gains at one. The stream is a
    numpy Generator keyed by (seed, role), so identical seeds give bitwise
    identical parameters on any platform.
    """
    module = build_module(spec, role)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), ord(role.value)]))
    with torch.no_grad():
        for _, layer in sorted(module.named_modules(), key=lambda kv: kv[0]):
            if isinstance(layer, (nn.Linear, nn.Conv3d, nn.ConvTranspose3d)):
                std = 1.0 / math.sqrt(_fan_in(layer))
                w = rng.normal(0.0, std, size=tuple(layer.weight.shape))
                layer.weight.copy_(torch.from_numpy(w))
                if layer.bias is not None:
                    layer.bias.zero_()
            elif isinstance(layer, (nn.InstanceNorm3d, nn.GroupNorm)):
                if layer.weight is not None:
                    layer.weight.fill_(1.0)
                if layer.bias is not None:
                    layer.bias.zero_()
    module.to(dtype)
    return NetworkParams(role=role, spec=spec, module=module, seed=int(seed))


def _module_dtype(module: nn.Module) -> torch.dtype:
    return next(module.parameters()).dtype


def _volume_to_tensor(x: Volume | np.ndarray, side: int, dtype: torch.dtype) -> torch.Tensor:
    data = x.data if isinstance(x, Volume) else np.asarray(x)
    if data.shape != (side, side, side):
        raise ShapeMismatch(f"expected volume of shape {(side,) * 3}, got {data.shape}")
    return torch.from_numpy(np.ascontiguousarray(data)).to(dtype).reshape(1, 1, side, side, side)


def _require_role(params: NetworkParams, role: Role) -> None:
    if params.role is not role:
        raise ConfigError(f"expected {role.value} params, got {params.role.value}")


def generator_forward(params: NetworkParams, z: np.ndarray) -> Volume:
    """Map one latent code to a volume; deterministic given params and z."""
    _require_role(params, Role.GENERATOR)
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    if z.shape[0] != params.spec.latent_dim:
        raise ShapeMismatch(f"latent code length {z.shape[0]} != latent_dim {params.spec.latent_dim}")
    zt = torch.from_numpy(z).to(_module_dtype(params.module)).reshape(1, -1)
    with torch.no_grad():
        out = params.module(zt)
    return Volume(out[0, 0].cpu().numpy().astype(np.float64), intensity_domain=IntensityDomain.NORMALIZED)


def discriminator_forward(params: NetworkParams, x: Volume | np.ndarray) -> tuple[float, np.ndarray]:
    """Score one volume; returns (unbounded scalar, flattened tap activations)."""
    _require_role(params, Role.CRITIC)
    xt = _volume_to_tensor(x, params.spec.volume_side, _module_dtype(params.module))
    with torch.no_grad():
        score, features = params.module(xt)
    return float(score[0].item()), features[0].cpu().numpy().astype(np.float64)


def encoder_forward(params: NetworkParams, x: Volume | np.ndarray) -> np.ndarray:
    """Map one volume to its latent code (components in (-1, 1))."""
    _require_role(params, Role.ENCODER)
    xt = _volume_to_tensor(x, params.spec.volume_side, _module_dtype(params.module))
    with torch.no_grad():
        code = params.module(xt)
    return code[0].cpu().numpy().astype(np.float64)
