"""Padded text batches over precomputed contextual token embeddings."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import AllMaskedRow, EmptyBatch, ShapeMismatch


@dataclass
class TextBatch:
    embeddings: np.ndarray  # (B, L_max, D); zero beyond each length
    pad_mask: np.ndarray  # (B, L_max) bool, True = real token
    lengths: np.ndarray  # (B,)

    def tensors(self, dtype=torch.float32):
        return torch.as_tensor(self.embeddings, dtype=dtype), torch.as_tensor(self.pad_mask)


def pad_batch(samples, pad_to: int | None = None) -> TextBatch:
    """Zero-pad a list of (L_i, D) embeddings (or samples with ``.embedding``).

    ``pad_to`` forces a longer L_max, which is how padding invariance is tested.
    """
    embs = [np.asarray(getattr(s, "embedding", s)) for s in samples]
    if not embs:
        raise EmptyBatch("cannot pad an empty batch")
    dim = embs[0].shape[-1]
    if any(e.ndim != 2 or e.shape[1] != dim or e.shape[0] < 1 for e in embs):
        raise ShapeMismatch("every sample needs a non-empty (L, D) embedding with a shared D")
    lengths = np.array([e.shape[0] for e in embs])
    l_max = int(lengths.max()) if pad_to is None else max(int(lengths.max()), pad_to)
    out = np.zeros((len(embs), l_max, dim), dtype=np.float32)
    mask = np.zeros((len(embs), l_max), dtype=bool)
    for i, e in enumerate(embs):
        out[i, :len(e)] = e
        mask[i, :len(e)] = True
    return TextBatch(out, mask, lengths)


def masked_mean_pool(states: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
    """Mean over the real (mask=True) positions of each row."""
    states = torch.as_tensor(states)
    pad_mask = torch.as_tensor(pad_mask, dtype=torch.bool)
    counts = pad_mask.sum(dim=1)
    if bool((counts == 0).any()):
        raise AllMaskedRow("every row needs at least one real position")
    keep = pad_mask.unsqueeze(-1)
    total = torch.where(keep, states, torch.zeros((), dtype=states.dtype)).sum(dim=1)
    return total / counts.unsqueeze(-1).to(states.dtype)
