"""Region-partitioned pose autoencoder.

Each articulator region has its own encoder and decoder, so latent block R
is a function of region-R joints only (and vice versa on the way back).
The ``entangled`` variant is the flat 534 -> 80 baseline with no split.
"""
from __future__ import annotations

import copy
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .container import digest, read_container, write_container
from .corpus import CorpusSample
from .errors import (DivergenceDetected, EmptyCorpus, FormatError, HashMismatch, LayoutMismatch,
                     ShapeMismatch, ValidationError)
from .skeleton import DEFAULT_LAYOUT, REGIONS, SkeletonLayout, check_finite, check_pose_shape

log = logging.getLogger(__name__)

AE_TAG = "AECKPT/1"
LATENT_MAGIC = b"DLAT1"
VARIANTS = ("linear", "mlp", "entangled")


@dataclass(frozen=True)
class LatentLayout:
    block_sizes: dict = field(default_factory=lambda: {"body": 8, "right_hand": 28, "left_hand": 28, "face": 16})

    def __post_init__(self):
        if set(self.block_sizes) != set(REGIONS) or any(int(v) < 1 for v in self.block_sizes.values()):
            raise LayoutMismatch(f"latent blocks must be positive and cover {REGIONS}")
        # canonical order regardless of how the mapping was serialized
        object.__setattr__(self, "block_sizes", {r: int(self.block_sizes[r]) for r in REGIONS})

    @property
    def total(self) -> int:
        return sum(self.block_sizes.values())

    @property
    def channel_ranges(self) -> dict[str, tuple[int, int]]:
        out, start = {}, 0
        for r in REGIONS:
            out[r] = (start, start + int(self.block_sizes[r]))
            start += int(self.block_sizes[r])
        return out

    def region_slice(self, region: str) -> slice:
        lo, hi = self.channel_ranges[region]
        return slice(lo, hi)

    def region_of_channel(self, c: int) -> str:
        for r, (lo, hi) in self.channel_ranges.items():
            if lo <= c < hi:
                return r
        raise IndexError(c)


DEFAULT_LATENT_LAYOUT = LatentLayout()


def artifact_layout_hash(layout: SkeletonLayout, latent: LatentLayout) -> str:
    """Hash stamped on every latent-space artifact (AE, latents, priors, generator)."""
    return digest({"skeleton": layout.layout_hash, "latent": dict(latent.block_sizes)})


@dataclass
class AEConfig:
    variant: str = "linear"
    latent_blocks: dict = field(default_factory=lambda: dict(DEFAULT_LATENT_LAYOUT.block_sizes))
    mlp_hidden: dict = field(default_factory=lambda: {"right_hand": 40, "left_hand": 40, "face": 96})
    loss_weights: dict = field(default_factory=lambda: {"body": 0.5, "right_hand": 1.5, "left_hand": 1.5,
                                                        "face": 1.0})
    sparsity_lambda: float = 1e-4
    lr: float = 2e-4
    adam_betas: tuple = (0.5, 0.9)
    epochs: int = 270
    max_steps: int | None = None
    batch_size: int = 256
    use_bias: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"variant must be one of {VARIANTS}")
        if any(w <= 0 for w in self.loss_weights.values()):
            raise ValidationError("loss weights must be > 0")
        if self.sparsity_lambda < 0:
            raise ValidationError("sparsity_lambda must be >= 0")
        self.adam_betas = tuple(self.adam_betas)

    @property
    def latent_layout(self) -> LatentLayout:
        return LatentLayout(dict(self.latent_blocks))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AEConfig":
        return cls(**d)


def _mlp(n_in: int, hidden: int, n_out: int, bias: bool) -> nn.Sequential:
    return nn.Sequential(nn.Linear(n_in, hidden, bias=bias), nn.PReLU(), nn.Linear(hidden, n_out, bias=bias))


class PoseAutoencoder(nn.Module):
    def __init__(self, cfg: AEConfig, layout: SkeletonLayout = DEFAULT_LAYOUT):
        super().__init__()
        self.cfg = cfg
        self.layout = layout
        self.latent_layout = cfg.latent_layout
        self.encoders = nn.ModuleDict()
        self.decoders = nn.ModuleDict()
        if cfg.variant == "entangled":
            n_in = layout.total_joints * 3
            self.encoders["all"] = nn.Linear(n_in, self.latent_layout.total, bias=cfg.use_bias)
            self.decoders["all"] = nn.Linear(self.latent_layout.total, n_in, bias=cfg.use_bias)
            return
        for r in REGIONS:
            n_in = layout.region_sizes[r] * 3
            n_lat = self.latent_layout.block_sizes[r]
            # body stays a single linear map in the mlp variant
            if cfg.variant == "mlp" and r != "body":
                h = cfg.mlp_hidden[r]
                self.encoders[r] = _mlp(n_in, h, n_lat, cfg.use_bias)
                self.decoders[r] = _mlp(n_lat, h, n_in, cfg.use_bias)
            else:
                self.encoders[r] = nn.Linear(n_in, n_lat, bias=cfg.use_bias)
                self.decoders[r] = nn.Linear(n_lat, n_in, bias=cfg.use_bias)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        lead = x.shape[:-2]
        if "all" in self.encoders:
            return self.encoders["all"](x.reshape(*lead, -1))
        blocks = []
        for r in REGIONS:
            part = x[..., self.layout.region_slice(r), :].reshape(*lead, -1)
            blocks.append(self.encoders[r](part))
        return torch.cat(blocks, dim=-1)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        lead = z.shape[:-1]
        if "all" in self.decoders:
            return self.decoders["all"](z).reshape(*lead, self.layout.total_joints, 3)
        parts = []
        for r in REGIONS:
            out = self.decoders[r](z[..., self.latent_layout.region_slice(r)])
            parts.append(out.reshape(*lead, self.layout.region_sizes[r], 3))
        return torch.cat(parts, dim=-2)

    def forward(self, x):
        return self.decode(self.encode(x))

    def encoder_weights(self) -> list[torch.Tensor]:
        """Weight matrices of the encoder linear layers (no biases, no PReLU slopes)."""
        return [m.weight for m in self.encoders.modules() if isinstance(m, nn.Linear)]


def ae_loss(pred: torch.Tensor, gt: torch.Tensor, encoder_weights, cfg: AEConfig,
            layout: SkeletonLayout = DEFAULT_LAYOUT):
    """Weighted per-region L1 reconstruction plus L1 sparsity on encoder weights.

    Region term: ``w_R / N * sum_i |x_hat_R(i) - x_R(i)|_1`` with the inner norm
    summed over every coordinate of the region, N the frame count.
    Returns ``(total, per_region, sparsity)``; per-region values are weighted.
    """
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"pred {tuple(pred.shape)} vs gt {tuple(gt.shape)}")
    pred = pred.reshape(-1, *pred.shape[-2:])
    gt = gt.reshape(-1, *gt.shape[-2:])
    n = pred.shape[0]
    diff = (pred - gt).abs()
    per_region = {}
    for r in REGIONS:
        per_region[r] = cfg.loss_weights[r] * diff[:, layout.region_slice(r)].sum() / n
    sparsity = sum((w.abs().sum() for w in encoder_weights), torch.zeros((), dtype=pred.dtype))
    total = sum(per_region.values()) + cfg.sparsity_lambda * sparsity
    return total, per_region, sparsity


@dataclass
class AECheckpoint:
    model: PoseAutoencoder
    config: AEConfig
    layout: SkeletonLayout
    history: list = field(default_factory=list)

    @property
    def latent_layout(self) -> LatentLayout:
        return self.config.latent_layout

    @property
    def layout_hash(self) -> str:
        return artifact_layout_hash(self.layout, self.latent_layout)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy() for k, v in self.model.state_dict().items()}

    def save(self, path) -> None:
        meta = {"config": self.config.to_dict(), "skeleton_layout": self.layout.to_dict(),
                "layout_hash": self.layout_hash, "history": self.history}
        write_container(path, AE_TAG, meta, self.state_arrays())


def load_ae_checkpoint(path, layout: SkeletonLayout | None = None) -> AECheckpoint:
    meta, tensors = read_container(path, AE_TAG)
    stored_layout = SkeletonLayout.from_dict(meta["skeleton_layout"])
    if layout is not None and layout.layout_hash != stored_layout.layout_hash:
        raise HashMismatch(f"{path}: checkpoint skeleton layout differs from the requested one")
    cfg = AEConfig.from_dict(meta["config"])
    ckpt = AECheckpoint(PoseAutoencoder(cfg, stored_layout), cfg, stored_layout, meta.get("history", []))
    if ckpt.layout_hash != meta["layout_hash"]:
        raise HashMismatch(f"{path}: stored layout hash is inconsistent with its config")
    first = next(iter(tensors.values()), None)
    if first is not None:
        ckpt.model.to(torch.from_numpy(first).dtype)
    ckpt.model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    ckpt.model.eval()
    return ckpt


def init_checkpoint(cfg: AEConfig, layout: SkeletonLayout = DEFAULT_LAYOUT,
                    dtype: torch.dtype = torch.float32) -> AECheckpoint:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = PoseAutoencoder(cfg, layout).to(dtype)
    model.eval()
    return AECheckpoint(model, cfg, layout)


def _model_dtype(ckpt: AECheckpoint) -> torch.dtype:
    return next(ckpt.model.parameters()).dtype


def encode(seq: np.ndarray, ckpt: AECheckpoint) -> np.ndarray:
    seq = np.asarray(seq)
    check_pose_shape(seq, ckpt.layout)
    check_finite(seq)
    with torch.no_grad():
        x = torch.as_tensor(seq, dtype=_model_dtype(ckpt))
        return ckpt.model.encode(x).numpy()


def decode(lat: np.ndarray, ckpt: AECheckpoint) -> np.ndarray:
    lat = np.asarray(lat)
    if lat.ndim < 1 or lat.shape[-1] != ckpt.latent_layout.total:
        raise LayoutMismatch(f"expected (..., {ckpt.latent_layout.total}) latents, got {lat.shape}")
    check_finite(lat)
    with torch.no_grad():
        z = torch.as_tensor(lat, dtype=_model_dtype(ckpt))
        return ckpt.model.decode(z).numpy()


def _frames(samples) -> np.ndarray:
    return np.concatenate([np.asarray(s.pose, dtype=np.float32) for s in samples], axis=0)


def reconstruction_l1(ckpt: AECheckpoint, samples) -> float:
    """Unweighted mean absolute error per coordinate."""
    x = _frames(samples)
    rec = decode(encode(x, ckpt), ckpt)
    return float(np.abs(rec.astype(np.float64) - x).mean())


def train_ae(train: list[CorpusSample], cfg: AEConfig, layout: SkeletonLayout = DEFAULT_LAYOUT,
             dev: list[CorpusSample] | None = None) -> AECheckpoint:
    """Frame-wise Adam training; returns the best-dev checkpoint.

    With no dev split the training frames are used for model selection.
    """
    if not train:
        raise EmptyCorpus("training split is empty")
    ckpt = init_checkpoint(cfg, layout)
    if cfg.epochs == 0 or cfg.max_steps == 0:
        return ckpt
    model = ckpt.model
    frames = torch.from_numpy(_frames(train))
    dev = dev or train
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.adam_betas)
    best_val, best_state, step = float("inf"), copy.deepcopy(model.state_dict()), 0
    history = []
    for epoch in range(cfg.epochs):
        model.train()
        perm = torch.randperm(frames.shape[0], generator=gen)
        sums = {"total": 0.0, **{r: 0.0 for r in REGIONS}}
        n_batches = 0
        for i in range(0, frames.shape[0], cfg.batch_size):
            batch = frames[perm[i:i + cfg.batch_size]]
            total, per_region, _ = ae_loss(model(batch), batch, model.encoder_weights(), cfg, layout)
            if not torch.isfinite(total):
                raise DivergenceDetected(f"AE loss became {total.item()} at epoch {epoch}")
            opt.zero_grad()
            total.backward()
            opt.step()
            step += 1
            n_batches += 1
            sums["total"] += total.item()
            for r in REGIONS:
                sums[r] += per_region[r].item()
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
        model.eval()
        val = reconstruction_l1(ckpt, dev)
        rec = {"epoch": epoch, "step": step, "dev_l1": val, **{k: v / n_batches for k, v in sums.items()}}
        history.append(rec)
        log.info("ae epoch %d loss %.5f dev_l1 %.5f", epoch, rec["total"], val)
        if val < best_val:
            best_val, best_state = val, copy.deepcopy(model.state_dict())
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
    model.load_state_dict(best_state)
    model.eval()
    ckpt.history = history
    return ckpt


# --------------------------------------------------------------------------- latent files

def write_latent_file(path, lat: np.ndarray, layout_hash: str) -> None:
    lat = np.ascontiguousarray(lat, dtype="<f4")
    if lat.ndim != 2:
        raise ShapeMismatch("latent sequence must be (T, D)")
    with open(path, "wb") as fh:
        fh.write(LATENT_MAGIC)
        fh.write(struct.pack("<II", *lat.shape))
        fh.write(lat.tobytes())
        fh.write(bytes.fromhex(layout_hash))


def read_latent_file(path, expected_hash: str | None = None) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:5] != LATENT_MAGIC:
        raise FormatError(f"{path}: bad magic", offset=0)
    if len(data) < 13:
        raise FormatError(f"{path}: truncated header", offset=len(data))
    t, d = struct.unpack("<II", data[5:13])
    need = 13 + 4 * t * d + 32
    if len(data) != need:
        raise FormatError(f"{path}: expected {need} bytes, found {len(data)}", offset=min(len(data), need))
    stored = data[-32:].hex()
    if expected_hash is not None and stored != expected_hash:
        raise HashMismatch(f"{path}: latent layout hash {stored[:12]} != {expected_hash[:12]}")
    return np.frombuffer(data, dtype="<f4", count=t * d, offset=13).reshape(t, d).astype(np.float32)


def extract_latents(samples, ckpt: AECheckpoint, out_dir=None) -> dict[str, np.ndarray]:
    """Encode every sample; optionally write ``<id>.lat`` files plus ``index.txt``."""
    out = {s.id: encode(s.pose, ckpt).astype(np.float32) for s in samples}
    if out_dir is not None:
        root = Path(out_dir)
        root.mkdir(parents=True, exist_ok=True)
        with open(root / "index.txt", "w") as fh:
            for sid, lat in out.items():
                write_latent_file(root / f"{sid}.lat", lat, ckpt.layout_hash)
                fh.write(sid + "\n")
    return out


def load_latents(in_dir, expected_hash: str | None = None) -> dict[str, np.ndarray]:
    root = Path(in_dir)
    ids = [line.strip() for line in (root / "index.txt").read_text().splitlines() if line.strip()]
    return {sid: read_latent_file(root / f"{sid}.lat", expected_hash) for sid in ids}
