"""Generator objectives: region-weighted latent L1 with length supervision,
and the per-channel Gaussian KL against precomputed priors."""
from __future__ import annotations

import math

import torch

from ..autoencoder import DEFAULT_LATENT_LAYOUT, LatentLayout
from ..errors import DegenerateSigma, ShapeMismatch, TooFewFrames
from ..latent_stats import SIGMA_FLOOR
from ..skeleton import REGIONS


def _batched(z_hat, z, frame_mask):
    if z_hat.shape != z.shape:
        raise ShapeMismatch(f"prediction {tuple(z_hat.shape)} vs target {tuple(z.shape)}")
    if z_hat.dim() == 2:
        z_hat, z = z_hat.unsqueeze(0), z.unsqueeze(0)
        if frame_mask is not None:
            frame_mask = frame_mask.unsqueeze(0)
    if z_hat.dim() != 3:
        raise ShapeMismatch("expected (T, D) or (B, T, D) latents")
    if frame_mask is None:
        frame_mask = torch.ones(z_hat.shape[:2], dtype=torch.bool)
    if frame_mask.shape != z_hat.shape[:2]:
        raise ShapeMismatch(f"frame mask {tuple(frame_mask.shape)} vs latents {tuple(z_hat.shape)}")
    return z_hat, z, frame_mask


def phase1_loss(z_hat, z, r_hat, r, weights: dict, frame_mask=None,
                latent_layout: LatentLayout = DEFAULT_LATENT_LAYOUT):
    """``sum_R w_R / T_valid * sum_t |z_hat_t^R - z_t^R|_1 + |r_hat - r|``, averaged over the batch.

    Returns ``(total, per_region, length_term)`` where per-region values are
    already weighted, so ``total = sum(per_region) + length_term``.
    """
    z_hat, z, frame_mask = _batched(z_hat, z, frame_mask)
    m = frame_mask.to(z_hat.dtype).unsqueeze(-1)
    t_valid = frame_mask.sum(dim=1).to(z_hat.dtype)
    if bool((t_valid == 0).any()):
        raise TooFewFrames("every sample needs at least one valid frame")
    diff = (z_hat - z).abs() * m
    per_region = {}
    for reg in REGIONS:
        per_sample = diff[..., latent_layout.region_slice(reg)].sum(dim=(1, 2)) / t_valid
        per_region[reg] = weights[reg] * per_sample.mean()
    r_hat = torch.as_tensor(r_hat, dtype=z_hat.dtype).reshape(-1)
    r = torch.as_tensor(r, dtype=z_hat.dtype).reshape(-1)
    length_term = (r_hat - r).abs().mean()
    total = sum(per_region.values()) + length_term
    return total, per_region, length_term


def gaussian_kl(mu1, sigma1, mu2, sigma2, sigma_floor: float = SIGMA_FLOOR):
    """KL(N(mu1, sigma1^2) || N(mu2, sigma2^2)), elementwise."""
    mu1, sigma1, mu2, sigma2 = (torch.as_tensor(v, dtype=torch.float64) if not torch.is_tensor(v) else v
                                for v in (mu1, sigma1, mu2, sigma2))
    # relative slack absorbs rounding of values clamped exactly at the floor
    lim = sigma_floor * (1 - 1e-6)
    if bool((sigma1 < lim).any()) or bool((sigma2 < lim).any()):
        raise DegenerateSigma(f"standard deviations must be >= {sigma_floor}")
    return torch.log(sigma2 / sigma1) + (sigma1 ** 2 + (mu1 - mu2) ** 2) / (2 * sigma2 ** 2) - 0.5


def batch_channel_moments(z_hat, frame_mask=None, sigma_floor: float = SIGMA_FLOOR):
    """Population mean and std per channel over all valid frames of the batch."""
    if z_hat.dim() == 2:
        z_hat = z_hat.unsqueeze(0)
        frame_mask = None if frame_mask is None else frame_mask.unsqueeze(0)
    if frame_mask is None:
        frame_mask = torch.ones(z_hat.shape[:2], dtype=torch.bool)
    n = int(frame_mask.sum())
    if n < 2:
        raise TooFewFrames(f"need at least two valid frames, got {n}")
    vals = z_hat[frame_mask]  # (n, D); padded frames never enter the graph
    mu = vals.mean(dim=0)
    var = ((vals - mu) ** 2).mean(dim=0)
    sigma = torch.sqrt(var.clamp_min(sigma_floor ** 2))
    return mu, sigma


def kl_channel_loss(z_hat, prior_mean, prior_std, frame_mask=None, sigma_floor: float = SIGMA_FLOOR):
    """Sum over channels of KL(batch moments || channel prior)."""
    mu, sigma = batch_channel_moments(z_hat, frame_mask, sigma_floor)
    pm = torch.as_tensor(prior_mean, dtype=z_hat.dtype)
    ps = torch.as_tensor(prior_std, dtype=z_hat.dtype)
    if pm.shape != mu.shape:
        raise ShapeMismatch(f"prior has {pm.shape[0]} channels, predictions have {mu.shape[0]}")
    return gaussian_kl(mu, sigma, pm, ps, sigma_floor).sum()


def length_from_ratio(r_hat: float, t_max: int) -> int:
    """Frame count for a predicted ratio: round half up, clamped to [1, T_max]."""
    return int(min(max(math.floor(r_hat * t_max + 0.5), 1), t_max))
