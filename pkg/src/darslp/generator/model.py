"""Non-autoregressive text-to-latent transformer."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from ..corpus import DEFAULT_T_MAX, EMBED_DIM
from ..errors import LengthOutOfRange, ShapeMismatch, ValidationError
from ..text import masked_mean_pool


@dataclass
class GeneratorConfig:
    d_model: int = 512
    enc_layers: int = 3
    enc_heads: int = 4
    dec_layers: int = 6
    dec_heads: int = 8
    ffn_dim: int = 1024
    input_dim: int = EMBED_DIM
    latent_dim: int = 80
    pose_dim: int = 178 * 3
    T_max: int = DEFAULT_T_MAX
    dropout: float = 0.1
    norm_first: bool = False
    loss_weights: dict = field(default_factory=lambda: {"body": 1.0, "right_hand": 14.0, "left_hand": 10.0,
                                                        "face": 2.0})
    kl_weight: float = 1.0
    sigma_floor: float = 1e-4
    lr: float = 2e-4
    weight_decay: float = 1e-4
    plateau_factor: float = 0.9
    plateau_patience: int = 40
    early_stop_patience: int = 60
    max_epochs: int = 1000
    batch_size: int = 16
    freeze_time_queries: bool = False
    seed: int = 0
    phase: int = 1

    def __post_init__(self):
        if self.d_model % self.enc_heads or self.d_model % self.dec_heads:
            raise ValidationError("head counts must divide d_model")
        if any(w <= 0 for w in self.loss_weights.values()):
            raise ValidationError("loss weights must be > 0")
        if self.phase not in (1, 2):
            raise ValidationError("phase must be 1 or 2")
        if self.T_max < 1:
            raise ValidationError("T_max must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        return cls(**d)


def sinusoidal_encoding(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    freq = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq[: dim // 2])
    return pe


class TextToLatent(nn.Module):
    def __init__(self, cfg: GeneratorConfig, idle_pose: np.ndarray):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.input_proj = nn.Linear(cfg.input_dim, d)
        enc_layer = nn.TransformerEncoderLayer(d, cfg.enc_heads, cfg.ffn_dim, cfg.dropout,
                                               batch_first=True, norm_first=cfg.norm_first)
        self.encoder = nn.TransformerEncoder(enc_layer, cfg.enc_layers, enable_nested_tensor=False)
        self.length_head = nn.Linear(d, 1)
        idle = torch.as_tensor(np.asarray(idle_pose, dtype=np.float32).reshape(-1))
        if idle.numel() != cfg.pose_dim:
            raise ShapeMismatch(f"idle pose has {idle.numel()} values, expected {cfg.pose_dim}")
        self.register_buffer("idle_pose", idle)
        self.query_proj = nn.Linear(cfg.pose_dim, d)
        self.query_proj.requires_grad_(not cfg.freeze_time_queries)
        self.register_buffer("time_pe", sinusoidal_encoding(cfg.T_max, d).float())
        dec_layer = nn.TransformerDecoderLayer(d, cfg.dec_heads, cfg.ffn_dim, cfg.dropout,
                                               batch_first=True, norm_first=cfg.norm_first)
        self.decoder = nn.TransformerDecoder(dec_layer, cfg.dec_layers)
        self.out_head = nn.Linear(d, cfg.latent_dim)

    def encode_text(self, emb: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        if emb.dim() != 3 or emb.shape[-1] != self.cfg.input_dim:
            raise ShapeMismatch(f"expected (B, L, {self.cfg.input_dim}) embeddings, got {tuple(emb.shape)}")
        if pad_mask.shape != emb.shape[:2]:
            raise ShapeMismatch("pad mask must be (B, L)")
        pe = sinusoidal_encoding(emb.shape[1], self.cfg.d_model).to(emb.dtype)
        x = self.input_proj(emb) + pe
        return self.encoder(x, src_key_padding_mask=~pad_mask)

    def predict_length(self, memory: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        pooled = masked_mean_pool(memory, pad_mask)
        return torch.sigmoid(self.length_head(pooled)).squeeze(-1)

    def time_queries(self, length: int) -> torch.Tensor:
        base = self.query_proj(self.idle_pose.to(self.time_pe.dtype))
        return base.unsqueeze(0) + self.time_pe[:length]

    def decode_latents(self, memory: torch.Tensor, pad_mask: torch.Tensor, length: int) -> torch.Tensor:
        """All ``length`` steps in a single decoder pass; no causal mask."""
        if not 1 <= length <= self.cfg.T_max:
            raise LengthOutOfRange(f"length {length} outside [1, {self.cfg.T_max}]")
        queries = self.time_queries(length).to(memory.dtype)
        queries = queries.unsqueeze(0).expand(memory.shape[0], -1, -1)
        h = self.decoder(queries, memory, memory_key_padding_mask=~pad_mask)
        return self.out_head(h)

    def forward(self, emb, pad_mask, length: int):
        memory = self.encode_text(emb, pad_mask)
        return self.decode_latents(memory, pad_mask, length), self.predict_length(memory, pad_mask)
