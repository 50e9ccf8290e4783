"""Channel priors, per-channel histogram statistics, region-wise PCA and
kernel density difference maps over latent codes."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import gaussian_kde

from .autoencoder import encode
from .errors import EmptyDataset, EmptyInput, HashMismatch, LayoutMismatch, RankDeficient
from .skeleton import mask_to_region

SIGMA_FLOOR = 1e-4


def _stack(latents) -> np.ndarray:
    """Accept an (N, D) array, a list of (T, D) arrays or an id -> array mapping."""
    if isinstance(latents, dict):
        latents = list(latents.values())
    if isinstance(latents, np.ndarray):
        arr = latents
    else:
        latents = list(latents)
        if not latents:
            raise EmptyDataset("no latent sequences")
        arr = np.concatenate([np.asarray(x) for x in latents], axis=0)
    return np.asarray(arr, dtype=np.float64).reshape(-1, arr.shape[-1])


@dataclass
class ChannelPrior:
    mean: np.ndarray
    std: np.ndarray
    layout_hash: str
    source: str = ""

    def to_json(self) -> str:
        return json.dumps({"layout_hash": self.layout_hash, "mean": [float(v) for v in self.mean],
                           "std": [float(v) for v in self.std], "source": self.source}, indent=1)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path, expected_hash: str | None = None) -> "ChannelPrior":
        with open(path) as fh:
            d = json.load(fh)
        if expected_hash is not None and d["layout_hash"] != expected_hash:
            raise HashMismatch(f"{path}: prior layout hash differs from the checkpoint's")
        return cls(np.array(d["mean"], dtype=np.float64), np.array(d["std"], dtype=np.float64),
                   d["layout_hash"], d.get("source", ""))


def compute_priors(latents, sigma_floor: float = SIGMA_FLOOR, layout_hash: str = "",
                   source: str = "") -> ChannelPrior:
    """Per-channel mean and population std over every frame, std clamped at ``sigma_floor``."""
    x = _stack(latents)
    if x.shape[0] < 2:
        raise EmptyDataset("need at least two frames")
    mean = x.mean(axis=0)
    std = np.maximum(x.std(axis=0), sigma_floor)
    return ChannelPrior(mean, std, layout_hash, source)


@dataclass
class ChannelStats:
    entropy: np.ndarray  # nats
    iqr: np.ndarray
    sd: np.ndarray
    bin_edges: np.ndarray  # (D, n_bins + 1)
    counts: np.ndarray  # (D, n_bins)

    def rows(self, latent_layout=None):
        for c in range(len(self.entropy)):
            region = latent_layout.region_of_channel(c) if latent_layout is not None else ""
            yield {"channel": c, "region": region, "entropy": float(self.entropy[c]),
                   "iqr": float(self.iqr[c]), "sd": float(self.sd[c])}


def histogram_entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def channel_stats(latents, n_bins: int = 50) -> ChannelStats:
    x = _stack(latents)
    if x.shape[0] < 2:
        raise EmptyDataset("need at least two frames")
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    d = x.shape[1]
    counts = np.zeros((d, n_bins), dtype=np.int64)
    edges = np.zeros((d, n_bins + 1))
    entropy = np.zeros(d)
    for c in range(d):
        lo, hi = x[:, c].min(), x[:, c].max()
        if hi > lo:
            counts[c], edges[c] = np.histogram(x[:, c], bins=n_bins, range=(lo, hi))
        else:
            edges[c] = lo
            counts[c, 0] = x.shape[0]
        entropy[c] = histogram_entropy(counts[c])
    q75, q25 = np.percentile(x, [75, 25], axis=0)
    return ChannelStats(entropy, q75 - q25, x.std(axis=0), edges, counts)


@dataclass
class RegionProjection:
    region: str | None
    channels: slice
    mean: np.ndarray
    scale: np.ndarray
    axes: np.ndarray  # (n_channels, 2), orthonormal columns
    explained_variance: np.ndarray  # fraction per axis
    rank_deficient: bool = False

    def to_dict(self) -> dict:
        return {"region": self.region, "channels": [self.channels.start, self.channels.stop],
                "mean": self.mean.tolist(), "scale": self.scale.tolist(), "axes": self.axes.tolist(),
                "explained_variance": self.explained_variance.tolist(), "rank_deficient": self.rank_deficient}

    @classmethod
    def from_dict(cls, d: dict) -> "RegionProjection":
        return cls(d["region"], slice(*d["channels"]), np.array(d["mean"]), np.array(d["scale"]),
                   np.array(d["axes"]), np.array(d["explained_variance"]), d["rank_deficient"])


def fit_region_projection(train_latents, region: str | None, latent_layout,
                          n_components: int = 2) -> RegionProjection:
    """Standardize the region's channels with train stats, keep the top principal axes.

    ``region=None`` uses every channel. Axis signs are fixed so that the
    largest-magnitude loading of each axis is positive.
    """
    x = _stack(train_latents)
    if x.shape[1] != latent_layout.total:
        raise LayoutMismatch(f"expected {latent_layout.total} channels, got {x.shape[1]}")
    channels = slice(0, latent_layout.total) if region is None else latent_layout.region_slice(region)
    x = x[:, channels]
    mean = x.mean(axis=0)
    scale = np.maximum(x.std(axis=0), SIGMA_FLOOR)
    z = (x - mean) / scale
    cov = z.T @ z / max(z.shape[0], 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = np.clip(evals[order], 0.0, None), evecs[:, order]
    k = min(n_components, z.shape[1])
    axes = evecs[:, :k].copy()
    for j in range(k):
        if axes[np.argmax(np.abs(axes[:, j])), j] < 0:
            axes[:, j] *= -1
    total = evals.sum()
    explained = evals[:k] / total if total > 0 else np.zeros(k)
    rank_def = x.shape[0] < x.shape[1] or k < n_components or bool(np.any(evals[:k] <= 1e-12 * max(total, 1e-300)))
    if rank_def:
        warnings.warn(f"projection for region {region} has fewer than {n_components} informative axes",
                      RankDeficient, stacklevel=2)
    return RegionProjection(region, channels, mean, scale, axes, explained, rank_def)


def project(points, proj: RegionProjection) -> np.ndarray:
    x = _stack(points)[:, proj.channels]
    return ((x - proj.mean) / proj.scale) @ proj.axes


def masked_region_embedding(sequences, ae_ckpt, region: str, canonical: np.ndarray,
                            proj: RegionProjection) -> np.ndarray:
    """mask_to_region -> encode -> standardize -> project, frame-wise, over all sequences."""
    lats = [encode(mask_to_region(np.asarray(seq, dtype=np.float64), region, canonical, ae_ckpt.layout), ae_ckpt)
            for seq in sequences]
    return project(lats, proj)


def _kde(points: np.ndarray, bandwidth, jitter: float) -> gaussian_kde:
    pts = points.T
    cov = np.cov(pts) if pts.shape[1] > 2 else None
    if cov is None or not np.all(np.isfinite(cov)) or np.linalg.cond(cov) > 1e12:
        # too few or collinear points: spread deterministic copies by about one grid cell
        copies = max(1, -(-3 // pts.shape[1]))
        rng = np.random.default_rng(0)
        pts = np.repeat(pts, copies, axis=1)
        pts = pts + rng.normal(scale=jitter, size=pts.shape)
    return gaussian_kde(pts, bw_method=bandwidth)


def density_difference(points_a, points_b, grid_n: int = 100, bandwidth="scott", pad: float = 0.1):
    """Density of A minus density of B on a shared grid.

    Returns ``(diff, xs, ys)``; each density is renormalized so that its
    Riemann sum over the grid is exactly one.
    """
    a = np.asarray(points_a, dtype=np.float64)
    b = np.asarray(points_b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise EmptyInput("both point sets must be non-empty")
    if grid_n < 2:
        raise ValueError("grid_n must be >= 2")
    both = np.concatenate([a, b])
    lo, hi = both.min(axis=0), both.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    lo, hi = lo - pad * span, hi + pad * span
    xs = np.linspace(lo[0], hi[0], grid_n)
    ys = np.linspace(lo[1], hi[1], grid_n)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    grid = np.vstack([gx.ravel(), gy.ravel()])
    cell = (xs[1] - xs[0]) * (ys[1] - ys[0])

    def dens(p):
        v = _kde(p, bandwidth, max(xs[1] - xs[0], ys[1] - ys[0]))(grid).reshape(grid_n, grid_n)
        return v / (v.sum() * cell)

    return dens(a) - dens(b), xs, ys
