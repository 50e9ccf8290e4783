"""Two-phase generator training, checkpoints, and pose generation."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from ..autoencoder import AECheckpoint, LatentLayout, decode
from ..container import read_container, write_container
from ..corpus import CorpusSample
from ..errors import DivergenceDetected, EmptyCorpus, HashMismatch, ValidationError
from ..latent_stats import ChannelPrior
from ..skeleton import REGIONS
from ..text import pad_batch
from .losses import kl_channel_loss, length_from_ratio, phase1_loss
from .model import GeneratorConfig, TextToLatent

log = logging.getLogger(__name__)

GEN_TAG = "GENCKPT/1"
RATIO_CEIL = 1 - 1e-6


@dataclass
class GeneratorCheckpoint:
    model: TextToLatent
    config: GeneratorConfig
    layout_hash: str
    latent_blocks: dict
    phase: int = 1
    history: list = field(default_factory=list)

    @property
    def latent_layout(self) -> LatentLayout:
        return LatentLayout(dict(self.latent_blocks))

    @property
    def idle_pose(self) -> np.ndarray:
        return self.model.idle_pose.numpy().copy()

    def save(self, path) -> None:
        meta = {"config": self.config.to_dict(), "layout_hash": self.layout_hash, "phase": self.phase,
                "latent_blocks": self.latent_blocks, "history": self.history}
        tensors = {k: v.detach().cpu().numpy() for k, v in self.model.state_dict().items()}
        write_container(path, GEN_TAG, meta, tensors)


def load_generator_checkpoint(path, expected_hash: str | None = None) -> GeneratorCheckpoint:
    meta, tensors = read_container(path, GEN_TAG)
    if expected_hash is not None and meta["layout_hash"] != expected_hash:
        raise HashMismatch(f"{path}: generator layout hash differs from the autoencoder's")
    cfg = GeneratorConfig.from_dict(meta["config"])
    model = TextToLatent(cfg, tensors["idle_pose"])
    model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    model.eval()
    return GeneratorCheckpoint(model, cfg, meta["layout_hash"], meta["latent_blocks"], meta["phase"],
                               meta.get("history", []))


def idle_pose_from(samples, edge: int = 2) -> np.ndarray:
    """Mean of the first and last ``edge`` frames over all samples."""
    frames = []
    for s in samples:
        pose = np.asarray(s.pose, dtype=np.float64)
        frames.append(pose[:edge])
        frames.append(pose[-edge:])
    return np.concatenate(frames).mean(axis=0)


def ratio_target(length: int, t_max: int) -> float:
    return min(length / t_max, RATIO_CEIL)


def init_generator(cfg: GeneratorConfig, idle_pose, ae_ckpt: AECheckpoint) -> GeneratorCheckpoint:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = TextToLatent(cfg, idle_pose)
    model.eval()
    return GeneratorCheckpoint(model, cfg, ae_ckpt.layout_hash, dict(ae_ckpt.latent_layout.block_sizes), cfg.phase)


def _collate(samples, latents, t_max):
    text = pad_batch(samples)
    lengths = [latents[s.id].shape[0] for s in samples]
    if max(lengths) > t_max:
        raise ValidationError(f"sequence of {max(lengths)} frames exceeds T_max={t_max}")
    length = max(lengths)
    z = np.zeros((len(samples), length, latents[samples[0].id].shape[1]), dtype=np.float32)
    mask = np.zeros((len(samples), length), dtype=bool)
    for i, s in enumerate(samples):
        z[i, :lengths[i]] = latents[s.id]
        mask[i, :lengths[i]] = True
    r = torch.tensor([ratio_target(n, t_max) for n in lengths])
    emb, pad = text.tensors()
    return emb, pad, torch.from_numpy(z), torch.from_numpy(mask), r, length


def predict_split(ckpt: GeneratorCheckpoint, samples, latents, batch_size: int = 32):
    """Teacher-forced-length predictions at each sample's ground-truth length."""
    model = ckpt.model
    outs = []
    with torch.no_grad():
        for i in range(0, len(samples), batch_size):
            emb, pad, z, mask, r, length = _collate(samples[i:i + batch_size], latents, ckpt.config.T_max)
            z_hat, r_hat = model(emb, pad, length)
            outs.append((z_hat, z, mask, r_hat, r))
    return outs


def split_losses(ckpt: GeneratorCheckpoint, samples, latents, prior: ChannelPrior | None = None,
                 batch_size: int = 32) -> dict:
    """Phase-1 loss (sample-averaged), KL over all valid frames jointly, and error summaries."""
    cfg = ckpt.config
    outs = predict_split(ckpt, samples, latents, batch_size)
    n_total = len(samples)
    phase1 = 0.0
    abs_err, n_vals, r_err = 0.0, 0, 0.0
    valid = []
    for z_hat, z, mask, r_hat, r in outs:
        total, _, _ = phase1_loss(z_hat, z, r_hat, r, cfg.loss_weights, mask, ckpt.latent_layout)
        phase1 += total.item() * z_hat.shape[0] / n_total
        abs_err += ((z_hat - z).abs()[mask]).sum().item()
        n_vals += int(mask.sum()) * z_hat.shape[-1]
        r_err += (r_hat - r).abs().sum().item()
        valid.append(z_hat[mask])
    res = {"phase1": phase1, "latent_mae": abs_err / n_vals, "ratio_mae": r_err / n_total}
    if prior is not None:
        res["kl"] = kl_channel_loss(torch.cat(valid).double(), prior.mean, prior.std, None, cfg.sigma_floor).item()
    return res


def train_generator(train: list[CorpusSample], latents: dict, ae_ckpt: AECheckpoint, cfg: GeneratorConfig,
                    prior: ChannelPrior | None = None, dev: list[CorpusSample] | None = None,
                    init: GeneratorCheckpoint | None = None) -> GeneratorCheckpoint:
    """Phase 1 minimizes the weighted latent L1 plus length term; phase 2 adds
    the channel-prior KL and resumes from a phase-1 checkpoint ``init``."""
    if not train:
        raise EmptyCorpus("training split is empty")
    if cfg.phase == 2:
        if init is None or prior is None:
            raise ValidationError("phase 2 needs a phase-1 checkpoint and channel priors")
    if prior is not None and prior.layout_hash != ae_ckpt.layout_hash:
        raise HashMismatch("priors were computed under a different layout")
    if init is not None and init.layout_hash != ae_ckpt.layout_hash:
        raise HashMismatch("initial generator checkpoint belongs to a different autoencoder")

    if init is not None:
        ckpt = copy.deepcopy(init)
        ckpt.config = cfg
        ckpt.model.cfg = cfg
        ckpt.model.query_proj.requires_grad_(not cfg.freeze_time_queries)
    else:
        ckpt = init_generator(cfg, idle_pose_from(train), ae_ckpt)
    ckpt.phase = cfg.phase
    if cfg.max_epochs == 0:
        return ckpt

    model = ckpt.model
    dev = dev or train
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(opt, factor=cfg.plateau_factor,
                                                       patience=cfg.plateau_patience)
    use_kl = cfg.phase == 2

    def dev_objective():
        model.eval()
        res = split_losses(ckpt, dev, latents, prior)
        obj = res["phase1"] + (cfg.kl_weight * res["kl"] if use_kl else 0.0)
        return obj, res

    best_obj, _ = dev_objective()
    best_state, best_epoch = copy.deepcopy(model.state_dict()), -1
    history = list(ckpt.history)
    for epoch in range(cfg.max_epochs):
        model.train()
        order = torch.randperm(len(train), generator=gen).tolist()
        run = {"loss": 0.0, "kl": 0.0, **{r: 0.0 for r in REGIONS}, "length": 0.0}
        n_batches = 0
        for i in range(0, len(order), cfg.batch_size):
            batch = [train[j] for j in order[i:i + cfg.batch_size]]
            emb, pad, z, mask, r, length = _collate(batch, latents, cfg.T_max)
            z_hat, r_hat = model(emb, pad, length)
            loss, per_region, len_term = phase1_loss(z_hat, z, r_hat, r, cfg.loss_weights, mask,
                                                     ckpt.latent_layout)
            if use_kl and int(mask.sum()) >= 2:
                kl = kl_channel_loss(z_hat, prior.mean, prior.std, mask, cfg.sigma_floor)
                loss = loss + cfg.kl_weight * kl
                run["kl"] += kl.item()
            if not torch.isfinite(loss):
                raise DivergenceDetected(f"generator loss became {loss.item()} at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            n_batches += 1
            run["loss"] += loss.item()
            run["length"] += len_term.item()
            for reg in REGIONS:
                run[reg] += per_region[reg].item()
        obj, res = dev_objective()
        sched.step(obj)
        rec = {"phase": cfg.phase, "epoch": epoch, "lr": opt.param_groups[0]["lr"], "dev_objective": obj,
               **{f"dev_{k}": v for k, v in res.items()}, **{k: v / n_batches for k, v in run.items()}}
        history.append(rec)
        log.info("gen phase %d epoch %d loss %.4f dev %.4f", cfg.phase, epoch, rec["loss"], obj)
        if obj < best_obj:
            best_obj, best_epoch = obj, epoch
            best_state = copy.deepcopy(model.state_dict())
        elif epoch - best_epoch > cfg.early_stop_patience:
            log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
            break
    model.load_state_dict(best_state)
    model.eval()
    ckpt.history = history
    return ckpt


def generate_latents(embedding, gen_ckpt: GeneratorCheckpoint, pad_to: int | None = None):
    """Predict the length ratio and decode that many latent frames for one sentence."""
    model = gen_ckpt.model
    model.eval()
    emb, pad = pad_batch([np.asarray(embedding)], pad_to=pad_to).tensors()
    with torch.no_grad():
        memory = model.encode_text(emb, pad)
        r_hat = float(model.predict_length(memory, pad)[0])
        length = length_from_ratio(r_hat, gen_ckpt.config.T_max)
        z = model.decode_latents(memory, pad, length)[0].numpy()
    return z, r_hat


def generate(embedding, gen_ckpt: GeneratorCheckpoint, ae_ckpt: AECheckpoint, pad_to: int | None = None):
    """Text embedding (L, 768) -> pose sequence (L_pred, K, 3) through the AE decoder."""
    if gen_ckpt.layout_hash != ae_ckpt.layout_hash:
        raise HashMismatch("generator and autoencoder checkpoints are incompatible")
    z, _ = generate_latents(embedding, gen_ckpt, pad_to)
    return decode(z, ae_ckpt)
