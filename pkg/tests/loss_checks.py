"""Randomized oracle and finite-difference sweeps shared by the unit and acceptance tests.

Each function returns the worst error it saw so callers can assert and report.
"""
from __future__ import annotations

import numpy as np
import torch

import oracles
from darslp.autoencoder import AEConfig, LatentLayout, PoseAutoencoder, ae_loss
from darslp.generator import gaussian_kl, kl_channel_loss, phase1_loss
from darslp.skeleton import REGIONS, SkeletonLayout

SMALL = SkeletonLayout({"body": 4, "right_hand": 3, "left_hand": 3, "face": 5})
SMALL_LATENT = {"body": 2, "right_hand": 3, "left_hand": 3, "face": 2}
DEFAULT_LATENT = LatentLayout()


def _rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


def _random_weights(rng):
    return {r: float(rng.uniform(0.1, 20.0)) for r in REGIONS}


def _random_mask(rng, b, t, min_total=1):
    while True:
        mask = rng.random((b, t)) < 0.7
        mask[:, 0] = True  # every sample keeps at least one frame
        if mask.sum() >= min_total:
            return mask


def ae_oracle_sweep(n=100, seed=0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        frames = int(rng.integers(1, 5))
        pred = rng.normal(size=(frames, SMALL.total_joints, 3))
        gt = rng.normal(size=pred.shape)
        enc = [rng.normal(size=(int(rng.integers(1, 4)), int(rng.integers(1, 6)))) for _ in range(3)]
        cfg = AEConfig(loss_weights=_random_weights(rng), sparsity_lambda=float(rng.uniform(0, 0.1)))
        total, per_region, sparsity = ae_loss(torch.from_numpy(pred), torch.from_numpy(gt),
                                              [torch.from_numpy(w) for w in enc], cfg, SMALL)
        ref_total, ref_regions, ref_sparsity = oracles.ae_loss_ref(
            pred.tolist(), gt.tolist(), [w.tolist() for w in enc], SMALL.region_ranges, cfg.loss_weights,
            cfg.sparsity_lambda)
        worst = max(worst, _rel(total.item(), ref_total), _rel(sparsity.item(), ref_sparsity),
                    *(_rel(per_region[r].item(), ref_regions[r]) for r in REGIONS))
    return worst


def phase1_oracle_sweep(n=100, seed=1) -> float:
    rng = np.random.default_rng(seed)
    ranges = DEFAULT_LATENT.channel_ranges
    worst = 0.0
    for _ in range(n):
        b, t = int(rng.integers(1, 4)), int(rng.integers(1, 6))
        z_hat, z = rng.normal(size=(b, t, 80)), rng.normal(size=(b, t, 80))
        r_hat, r = rng.uniform(0, 1, b), rng.uniform(0, 1, b)
        mask = _random_mask(rng, b, t)
        w = _random_weights(rng)
        total, _, _ = phase1_loss(torch.from_numpy(z_hat), torch.from_numpy(z), torch.from_numpy(r_hat),
                                  torch.from_numpy(r), w, torch.from_numpy(mask))
        ref = oracles.phase1_ref(z_hat.tolist(), z.tolist(), r_hat.tolist(), r.tolist(), w, mask.tolist(), ranges)
        worst = max(worst, _rel(total.item(), ref))
    return worst


def kl_oracle_sweep(n=100, seed=2, floor=1e-4) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        b, t = int(rng.integers(1, 4)), int(rng.integers(2, 7))
        z_hat = rng.normal(size=(b, t, 80)) * rng.uniform(0.1, 2.0, 80) + rng.normal(size=80)
        # a few exactly constant channels exercise the sigma floor
        z_hat[..., :3] = 0.25
        mask = _random_mask(rng, b, t, min_total=2)
        pm, ps = rng.normal(size=80), rng.uniform(floor, 2.0, 80)
        got = kl_channel_loss(torch.from_numpy(z_hat), pm, ps, torch.from_numpy(mask), floor).item()
        ref = oracles.kl_channel_ref(z_hat.tolist(), mask.tolist(), pm.tolist(), ps.tolist(), floor)
        worst = max(worst, _rel(got, ref))
    return worst


def gaussian_kl_quadrature_sweep(n=30, seed=3) -> float:
    rng = np.random.default_rng(seed)
    cases = [(0.0, 2.0, 0.0, 1.0), (1.0, 1.0, 0.0, 1.0), (0.0, 1.0, 0.0, 1.0)]
    cases += [(rng.normal(), rng.uniform(0.2, 3), rng.normal(), rng.uniform(0.2, 3)) for _ in range(n)]
    worst = 0.0
    for mu1, s1, mu2, s2 in cases:
        got = gaussian_kl(mu1, s1, mu2, s2).item()
        worst = max(worst, abs(got - oracles.gaussian_kl_quadrature(mu1, s1, mu2, s2)))
    return worst


# --------------------------------------------------------------------------- finite differences

def central_diff(f, x: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x`` (mutated in place, then restored)."""
    g = torch.zeros_like(x)
    flat, gflat = x.data.view(-1), g.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + h
            up = f().item()
            flat[i] = old - h
            down = f().item()
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
    return g


def grad_rel_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    return float((analytic - numeric).norm() / numeric.norm().clamp_min(1e-12))


def ae_grad_sweep(n=20, seed=4) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(n):
        variant = ("linear", "mlp", "entangled")[k % 3]
        cfg = AEConfig(variant=variant, latent_blocks=SMALL_LATENT,
                       mlp_hidden={"right_hand": 4, "left_hand": 4, "face": 4},
                       loss_weights=_random_weights(rng), sparsity_lambda=float(rng.uniform(1e-4, 0.1)))
        torch.manual_seed(int(rng.integers(1 << 30)))
        model = PoseAutoencoder(cfg, SMALL).double()
        for name, p in model.named_parameters():
            if "weight" in name and p.dim() == 1:  # PReLU slopes: move off their 0.25 init
                p.data.uniform_(0.05, 0.5)
        x = torch.from_numpy(rng.normal(size=(int(rng.integers(1, 4)), SMALL.total_joints, 3)))

        def loss():
            return ae_loss(model(x), x, model.encoder_weights(), cfg, SMALL)[0]

        model.zero_grad()
        loss().backward()
        for p in model.parameters():
            worst = max(worst, grad_rel_error(p.grad, central_diff(loss, p)))
    return worst


def phase1_grad_sweep(n=20, seed=5) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        b, t = int(rng.integers(1, 3)), int(rng.integers(1, 4))
        z_hat = torch.from_numpy(rng.normal(size=(b, t, 80))).requires_grad_()
        r_hat = torch.from_numpy(rng.uniform(0, 1, b)).requires_grad_()
        z, r = torch.from_numpy(rng.normal(size=(b, t, 80))), torch.from_numpy(rng.uniform(0, 1, b))
        mask = torch.from_numpy(_random_mask(rng, b, t))
        w = _random_weights(rng)

        def loss():
            return phase1_loss(z_hat, z, r_hat, r, w, mask)[0]

        loss().backward()
        worst = max(worst, grad_rel_error(z_hat.grad, central_diff(loss, z_hat)),
                    grad_rel_error(r_hat.grad, central_diff(loss, r_hat)))
    return worst


def kl_grad_sweep(n=20, seed=6) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        b, t = int(rng.integers(1, 3)), int(rng.integers(2, 5))
        z_hat = torch.from_numpy(rng.normal(size=(b, t, 80)) + rng.normal(size=80)).requires_grad_()
        mask = torch.from_numpy(_random_mask(rng, b, t, min_total=2))
        pm, ps = rng.normal(size=80), rng.uniform(0.3, 2.0, 80)

        def loss():
            return kl_channel_loss(z_hat, pm, ps, mask)

        loss().backward()
        worst = max(worst, grad_rel_error(z_hat.grad, central_diff(loss, z_hat)))
    return worst
