"""Training objectives: adversarial critic/generator losses with gradient
penalty, and the reconstruction losses (image space, critic feature space,
and their weighted sum) used for encoder training and anomaly scoring.

Every function takes either :class:`NetworkParams` wrappers or bare torch
modules (handy for hand-built stub networks in tests). Data arguments may be
torch tensors, numpy arrays, or Volumes; with tensor inputs the result is a
differentiable tensor, otherwise a plain float. The epsilon draw for the
gradient penalty comes from an explicit numpy Generator, so results are
reproducible and race-free.

The penalty term is differentiated with respect to the interpolates via
``torch.autograd.grad(create_graph=True)`` and then flows into the critic
parameters through double backward; the finite-difference tests verify this
end to end.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, LengthMismatch, ShapeMismatch
from .volume import Volume

ArrayLike = Union[np.ndarray, torch.Tensor, Volume]


@dataclass(frozen=True)
class GanLossConfig:
    """Adversarial-stage weighting: penalty weight and critic updates per
    generator update."""

    lambda_gp: float = 10.0
    n_critic: int = 5

    def __post_init__(self) -> None:
        if self.lambda_gp < 0:
            raise ConfigError(f"lambda_gp must be >= 0, got {self.lambda_gp}")
        if self.n_critic < 1:
            raise ConfigError(f"n_critic must be >= 1, got {self.n_critic}")


@dataclass(frozen=True)
class EncoderLossConfig:
    """Weight of the feature-space term in the reconstruction objective."""

    kappa: float = 1.0

    def __post_init__(self) -> None:
        if not np.isfinite(self.kappa) or self.kappa < 0:
            raise ConfigError(f"kappa must be finite and >= 0, got {self.kappa}")


@dataclass(frozen=True)
class LossBreakdown:
    """Reconstruction objective decomposed: total = l_img + kappa * l_feat."""

    total: float
    l_img: float
    l_feat: float


def _module_of(params) -> nn.Module:
    return params if isinstance(params, nn.Module) else params.module


def _to_tensor(x: ArrayLike, like: torch.Tensor | None = None) -> tuple[torch.Tensor, bool]:
    """Returns (tensor, was_tensor). Volumes/arrays are converted, not copied back."""
    if isinstance(x, torch.Tensor):
        return x, True
    data = x.data if isinstance(x, Volume) else np.asarray(x, dtype=np.float64)
    t = torch.from_numpy(np.ascontiguousarray(data))
    if like is not None:
        t = t.to(like.dtype)
    return t, False


def _as_batch(x: torch.Tensor) -> torch.Tensor:
    """Lift (S,S,S) or (B,S,S,S) volume data to the (B,1,S,S,S) layout."""
    if x.ndim == 3:
        return x.reshape(1, 1, *x.shape)
    if x.ndim == 4:
        return x.reshape(x.shape[0], 1, *x.shape[1:])
    if x.ndim == 5:
        return x
    raise ShapeMismatch(f"expected 3D/4D/5D volume data, got shape {tuple(x.shape)}")


def _param_dtype(module: nn.Module) -> torch.dtype:
    p = next(module.parameters(), None)
    return p.dtype if p is not None else torch.float32


def gradient_penalty(
    d_params,
    x_real: ArrayLike,
    x_fake: ArrayLike,
    rng: np.random.Generator,
    create_graph: bool = True,
) -> torch.Tensor | float:
    """Mean over the batch of (||grad_xhat D(xhat)||_2 - 1)^2.

    xhat interpolates real and generated samples with a per-sample epsilon
    drawn Uniform[0, 1] from ``rng``.
    """
    critic = _module_of(d_params)
    xr, real_was_tensor = _to_tensor(x_real)
    xf, fake_was_tensor = _to_tensor(x_fake)
    xr, xf = _as_batch(xr), _as_batch(xf)
    if xr.shape != xf.shape:
        raise ShapeMismatch(f"real/fake batches differ: {tuple(xr.shape)} vs {tuple(xf.shape)}")
    dtype = _param_dtype(critic)
    xr, xf = xr.to(dtype), xf.to(dtype)
    batch = xr.shape[0]
    eps = torch.from_numpy(rng.uniform(size=(batch, 1, 1, 1, 1))).to(dtype)
    x_hat = (eps * xr + (1.0 - eps) * xf.detach()).requires_grad_(True)
    score, _ = critic(x_hat)
    (grads,) = torch.autograd.grad(score.sum(), x_hat, create_graph=create_graph)
    norms = grads.reshape(batch, -1).norm(2, dim=1)
    penalty = ((norms - 1.0) ** 2).mean()
    if real_was_tensor or fake_was_tensor:
        return penalty
    return float(penalty.item())


def critic_loss(
    d_params,
    g_params,
    x_real: ArrayLike,
    z: ArrayLike,
    cfg: GanLossConfig,
    rng: np.random.Generator,
) -> torch.Tensor | float:
    """Wasserstein critic objective: E[D(fake)] - E[D(real)] + lambda * penalty."""
    critic = _module_of(d_params)
    gen = _module_of(g_params)
    xr, real_was_tensor = _to_tensor(x_real)
    zt, _ = _to_tensor(z)
    xr = _as_batch(xr)
    if zt.ndim == 1:
        zt = zt.reshape(1, -1)
    if zt.shape[0] != xr.shape[0]:
        raise ShapeMismatch(f"batch sizes differ: {xr.shape[0]} real vs {zt.shape[0]} latent")
    dtype = _param_dtype(critic)
    xr, zt = xr.to(dtype), zt.to(dtype)
    x_fake = gen(zt).detach()
    score_fake, _ = critic(x_fake)
    score_real, _ = critic(xr)
    loss = score_fake.mean() - score_real.mean()
    if cfg.lambda_gp > 0:
        loss = loss + cfg.lambda_gp * gradient_penalty(critic, xr, x_fake, rng)
    if real_was_tensor:
        return loss
    return float(loss.item())


def generator_loss(d_params, g_params, z: ArrayLike) -> torch.Tensor | float:
    """Generator objective: -E[D(G(z))]."""
    critic = _module_of(d_params)
    gen = _module_of(g_params)
    zt, was_tensor = _to_tensor(z)
    if zt.ndim == 1:
        zt = zt.reshape(1, -1)
    zt = zt.to(_param_dtype(gen))
    score, _ = critic(gen(zt))
    loss = -score.mean()
    if was_tensor:
        return loss
    return float(loss.item())


def image_loss(x: ArrayLike, x_rec: ArrayLike) -> torch.Tensor | float:
    """Mean squared voxel difference (sum of squares over voxel count)."""
    xt, a_tensor = _to_tensor(x)
    rt, b_tensor = _to_tensor(x_rec, like=xt if a_tensor else None)
    if xt.shape != rt.shape:
        raise ShapeMismatch(f"shapes differ: {tuple(xt.shape)} vs {tuple(rt.shape)}")
    if not a_tensor and b_tensor:
        xt = xt.to(rt.dtype)
    elif a_tensor and not b_tensor:
        rt = rt.to(xt.dtype)
    loss = ((xt - rt) ** 2).mean()
    if a_tensor or b_tensor:
        return loss
    return float(loss.item())


def feature_loss(f_x: ArrayLike, f_rec: ArrayLike) -> torch.Tensor | float:
    """Mean squared difference of critic feature vectors."""
    ft, a_tensor = _to_tensor(f_x)
    rt, b_tensor = _to_tensor(f_rec, like=ft if a_tensor else None)
    if ft.shape[-1] != rt.shape[-1] or ft.ndim != rt.ndim or ft.shape != rt.shape:
        raise LengthMismatch(f"feature shapes differ: {tuple(ft.shape)} vs {tuple(rt.shape)}")
    if not a_tensor and b_tensor:
        ft = ft.to(rt.dtype)
    elif a_tensor and not b_tensor:
        rt = rt.to(ft.dtype)
    loss = ((ft - rt) ** 2).mean()
    if a_tensor or b_tensor:
        return loss
    return float(loss.item())


def encoder_loss_terms(
    x: torch.Tensor, g_params, d_params, e_params, cfg: EncoderLossConfig
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Differentiable (total, l_img, l_feat) for a (B,1,S,S,S) batch.

    Reconstructs via G(E(x)) and compares critic tap features of input and
    reconstruction.
    """
    gen, critic, enc = _module_of(g_params), _module_of(d_params), _module_of(e_params)
    x = _as_batch(x)
    x_rec = gen(enc(x))
    if x_rec.shape != x.shape:
        raise ShapeMismatch(f"reconstruction shape {tuple(x_rec.shape)} != input {tuple(x.shape)}")
    _, f_x = critic(x)
    _, f_rec = critic(x_rec)
    l_img = ((x - x_rec) ** 2).mean()
    l_feat = ((f_x - f_rec) ** 2).mean()
    total = l_img + cfg.kappa * l_feat
    return total, l_img, l_feat


def encoder_loss(x: ArrayLike, g_params, d_params, e_params, cfg: EncoderLossConfig) -> LossBreakdown:
    """Reconstruction objective decomposition for a volume (or batch)."""
    xt, _ = _to_tensor(x)
    xt = _as_batch(xt).to(_param_dtype(_module_of(g_params)))
    with torch.no_grad():
        total, l_img, l_feat = encoder_loss_terms(xt, g_params, d_params, e_params, cfg)
    l_img_f, l_feat_f = float(l_img.item()), float(l_feat.item())
    return LossBreakdown(total=l_img_f + cfg.kappa * l_feat_f, l_img=l_img_f, l_feat=l_feat_f)
