"""Corpus samples, on-disk formats and the deterministic synthetic corpus.

Layout of a split directory::

    <split>/layout.json      skeleton layout (its hash guards every load)
    <split>/index.jsonl      {id, tokens, pose_file, emb_file, length}
    <split>/poses/<id>.pose  "DPSE1" | u32 T | u32 K | u32 C | float32 LE payload
    <split>/emb/<id>.emb     "DEMB1" | u32 L | u32 D | float32 LE payload
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, HashMismatch, LayoutMismatch, SequenceTooLong, ValidationError
from .skeleton import DEFAULT_LAYOUT, REGIONS, SkeletonLayout, check_finite, check_pose_shape

EMBED_DIM = 768
POSE_MAGIC = b"DPSE1"
EMB_MAGIC = b"DEMB1"
DEFAULT_T_MAX = 300


@dataclass
class CorpusSample:
    id: str
    tokens: list[str]
    embedding: np.ndarray  # (L, 768) float32
    pose: np.ndarray  # (T, K, 3) float32
    fps: float | None = None

    def __post_init__(self):
        if len(self.tokens) < 1:
            raise ValidationError(f"sample {self.id}: needs at least one token")
        if self.embedding.ndim != 2 or self.embedding.shape[0] != len(self.tokens):
            raise ValidationError(
                f"sample {self.id}: embedding rows {self.embedding.shape[0]} != token count {len(self.tokens)}")
        if self.pose.ndim != 3 or self.pose.shape[0] < 1:
            raise ValidationError(f"sample {self.id}: pose must be (T>=1, K, 3)")

    @property
    def length(self) -> int:
        return int(self.pose.shape[0])


def _write_array_file(path, magic: bytes, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<" + "I" * arr.ndim, *arr.shape))
        fh.write(arr.tobytes())


def _read_array_file(path, magic: bytes, ndim: int) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:len(magic)] != magic:
        raise FormatError(f"{path}: bad magic, expected {magic!r}", offset=0)
    hdr_end = len(magic) + 4 * ndim
    if len(data) < hdr_end:
        raise FormatError(f"{path}: truncated header", offset=len(data))
    shape = struct.unpack("<" + "I" * ndim, data[len(magic):hdr_end])
    need = int(np.prod(shape)) * 4
    have = len(data) - hdr_end
    if have != need:
        raise FormatError(f"{path}: payload has {have} bytes, header implies {need}", offset=hdr_end + min(have, need))
    return np.frombuffer(data, dtype="<f4", offset=hdr_end).reshape(shape).astype(np.float32)


def write_pose_file(path, pose: np.ndarray) -> None:
    _write_array_file(path, POSE_MAGIC, pose)


def read_pose_file(path, layout: SkeletonLayout | None = None) -> np.ndarray:
    pose = _read_array_file(path, POSE_MAGIC, 3)
    if layout is not None and pose.shape[1:] != (layout.total_joints, 3):
        raise LayoutMismatch(f"{path}: pose shape {pose.shape} does not match layout")
    return pose


def write_embedding_file(path, emb: np.ndarray) -> None:
    _write_array_file(path, EMB_MAGIC, emb)


def read_embedding_file(path) -> np.ndarray:
    emb = _read_array_file(path, EMB_MAGIC, 2)
    if emb.shape[1] != EMBED_DIM:
        raise FormatError(f"{path}: embedding width {emb.shape[1]} != {EMBED_DIM}", offset=len(EMB_MAGIC) + 4)
    return emb


def save_corpus(samples, path, layout: SkeletonLayout = DEFAULT_LAYOUT) -> None:
    root = Path(path)
    (root / "poses").mkdir(parents=True, exist_ok=True)
    (root / "emb").mkdir(parents=True, exist_ok=True)
    layout.save(root / "layout.json")
    seen = set()
    with open(root / "index.jsonl", "w") as index:
        for s in samples:
            if s.id in seen:
                raise ValidationError(f"duplicate sample id {s.id}")
            seen.add(s.id)
            check_pose_shape(s.pose, layout)
            pose_file = f"poses/{s.id}.pose"
            emb_file = f"emb/{s.id}.emb"
            write_pose_file(root / pose_file, s.pose)
            write_embedding_file(root / emb_file, s.embedding)
            rec = {"id": s.id, "tokens": list(s.tokens), "pose_file": pose_file,
                   "emb_file": emb_file, "length": s.length}
            if s.fps is not None:
                rec["fps"] = s.fps
            index.write(json.dumps(rec) + "\n")


def load_corpus(path, layout: SkeletonLayout = DEFAULT_LAYOUT, t_max: int | None = None) -> list[CorpusSample]:
    """Load one split directory. Sequences longer than ``t_max`` are rejected."""
    root = Path(path)
    layout_file = root / "layout.json"
    if layout_file.exists():
        stored = SkeletonLayout.load(layout_file)
        if stored.layout_hash != layout.layout_hash:
            raise HashMismatch(f"{root}: corpus layout hash {stored.layout_hash[:12]} != {layout.layout_hash[:12]}")
    out = []
    index_path = root / "index.jsonl"
    offset = 0
    with open(index_path, "rb") as fh:
        for raw in fh:
            line = raw.strip()
            if line:
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise FormatError(f"{index_path}: bad JSON line", offset=offset) from exc
                pose = read_pose_file(root / rec["pose_file"], layout)
                emb = read_embedding_file(root / rec["emb_file"])
                if pose.shape[0] != rec["length"]:
                    raise FormatError(f"{index_path}: sample {rec['id']} length field disagrees with pose file",
                                      offset=offset)
                if t_max is not None and pose.shape[0] > t_max:
                    raise SequenceTooLong(f"sample {rec['id']} has {pose.shape[0]} frames > T_max={t_max}")
                check_finite(pose)
                out.append(CorpusSample(rec["id"], list(rec["tokens"]), emb, pose, rec.get("fps")))
            offset += len(raw)
    return out


# --------------------------------------------------------------------------- synthetic data

def _rest_pose(layout: SkeletonLayout, rng: np.random.Generator) -> np.ndarray:
    k = layout.total_joints
    pose = np.zeros((k, 3))
    b0, b1 = layout.region_ranges["body"]
    body = np.zeros((b1 - b0, 3))
    # spread the remaining upper-body joints below the shoulder line
    body[:] = rng.uniform([-0.6, -1.4, -0.1], [0.6, 0.7, 0.1], size=body.shape)
    body[layout.left_shoulder_idx - b0] = (0.5, 0.0, 0.0)
    body[layout.right_shoulder_idx - b0] = (-0.5, 0.0, 0.0)
    pose[b0:b1] = body
    # hands rest low, left at +x and right at -x
    for region, cx in (("right_hand", -0.45), ("left_hand", 0.45)):
        lo, hi = layout.region_ranges[region]
        pose[lo:hi] = np.array([cx, -1.2, 0.15]) + rng.normal(scale=0.06, size=(hi - lo, 3))
    lo, hi = layout.region_ranges["face"]
    ang = rng.uniform(0, 2 * np.pi, size=hi - lo)
    rad = rng.uniform(0.05, 1.0, size=hi - lo)
    pose[lo:hi, 0] = 0.18 * rad * np.cos(ang)
    pose[lo:hi, 1] = 0.75 + 0.24 * rad * np.sin(ang)
    pose[lo:hi, 2] = 0.1 + rng.normal(scale=0.02, size=hi - lo)
    return pose


class SynthBank:
    """Fixed token vocabulary with one smooth motif and one embedding per token.

    Each region moves along a handful of fixed joint-space directions; hands
    carry large continuous oscillations, the body moderate ones, and the face
    stays at rest except for brief, rare bumps.
    """

    n_directions = {"body": 3, "right_hand": 6, "left_hand": 6, "face": 2}
    amplitude = {"body": 0.12, "right_hand": 0.3, "left_hand": 0.25, "face": 0.1}

    def __init__(self, seed: int, vocab_size: int, motif_bank_size: int,
                 layout: SkeletonLayout = DEFAULT_LAYOUT, min_len: int = 8, max_len: int = 16,
                 overlap: int = 4):
        for name, val in (("vocab_size", vocab_size), ("motif_bank_size", motif_bank_size)):
            if val < 1:
                raise ValidationError(f"{name} must be >= 1")
        if not overlap < min_len <= max_len:
            raise ValidationError("need overlap < min_len <= max_len")
        rng = np.random.default_rng([seed, 0])
        self.layout = layout
        self.overlap = overlap
        self.vocab = [f"w{i:03d}" for i in range(vocab_size)]
        self.rest = _rest_pose(layout, rng)
        self.directions = {}
        for region in REGIONS:
            lo, hi = layout.region_ranges[region]
            d = rng.normal(size=(self.n_directions[region], hi - lo, 3))
            if region == "body":
                d[:, layout.left_shoulder_idx - lo] = 0.0
                d[:, layout.right_shoulder_idx - lo] = 0.0
            d /= np.sqrt((d ** 2).sum(axis=-1).mean(axis=-1))[:, None, None]
            self.directions[region] = d
        self.motifs = [self._make_motif(rng, min_len, max_len) for _ in range(motif_bank_size)]
        self.token_vectors = rng.normal(size=(vocab_size, EMBED_DIM))

    def _make_motif(self, rng, min_len, max_len) -> np.ndarray:
        n = int(rng.integers(min_len, max_len + 1))
        tau = np.linspace(0.0, 1.0, n)
        pose = np.repeat(self.rest[None], n, axis=0)
        for region in REGIONS:
            lo, hi = self.layout.region_ranges[region]
            dirs = self.directions[region]
            amp = self.amplitude[region]
            for d in dirs:
                if region == "face":
                    if rng.random() < 0.35:
                        width = max(3, n // 3)
                        start = int(rng.integers(0, n - width + 1))
                        coef = np.zeros(n)
                        ph = np.arange(width) / (width - 1)
                        coef[start:start + width] = amp * rng.uniform(0.5, 1.0) * 0.5 * (1 - np.cos(2 * np.pi * ph))
                    else:
                        coef = np.zeros(n)
                else:
                    a = amp * rng.uniform(0.5, 1.0)
                    f = rng.uniform(0.5, 1.5)
                    phi = rng.uniform(0, 2 * np.pi)
                    coef = a * np.sin(2 * np.pi * f * tau + phi)
                pose[:, lo:hi] += coef[:, None, None] * d[None]
        return pose

    def motif_for(self, token: str) -> np.ndarray:
        return self.motifs[self.vocab.index(token) % len(self.motifs)]

    def compose_pose(self, tokens) -> np.ndarray:
        """Concatenate token motifs with a linear cross-fade over ``overlap`` frames."""
        out = self.motif_for(tokens[0]).copy()
        c = self.overlap
        for tok in tokens[1:]:
            nxt = self.motif_for(tok)
            w = np.linspace(0.0, 1.0, c + 2)[1:-1][:, None, None]
            blend = (1 - w) * out[-c:] + w * nxt[:c]
            out = np.concatenate([out[:-c], blend, nxt[c:]], axis=0)
        return out

    def sequence_length(self, tokens) -> int:
        return sum(len(self.motif_for(t)) for t in tokens) - self.overlap * (len(tokens) - 1)

    def embed(self, tokens, rng: np.random.Generator, noise: float = 0.01) -> np.ndarray:
        vecs = np.stack([self.token_vectors[self.vocab.index(t)] for t in tokens])
        return vecs + noise * rng.normal(size=vecs.shape)


def synth_corpus(seed: int, n_samples: int, vocab_size: int, motif_bank_size: int,
                 T_max: int = DEFAULT_T_MAX, max_tokens: int = 4, jitter: bool = False,
                 layout: SkeletonLayout = DEFAULT_LAYOUT) -> list[CorpusSample]:
    """Deterministic toy corpus; ``jitter`` adds a random similarity transform per sample."""
    if min(n_samples, vocab_size, motif_bank_size, T_max, max_tokens) < 1:
        raise ValidationError("all counts must be >= 1")
    bank = SynthBank(seed, vocab_size, motif_bank_size, layout)
    if min(len(m) for m in bank.motifs) > T_max:
        raise ValidationError(f"T_max={T_max} shorter than every motif")
    rng = np.random.default_rng([seed, 1])
    samples = []
    for i in range(n_samples):
        n_tok = int(rng.integers(1, max_tokens + 1))
        tokens = [bank.vocab[j] for j in rng.integers(0, vocab_size, size=n_tok)]
        while len(tokens) > 1 and bank.sequence_length(tokens) > T_max:
            tokens.pop()
        if bank.sequence_length(tokens) > T_max:
            tokens = [min(bank.vocab, key=lambda t: len(bank.motif_for(t)))]
        pose = bank.compose_pose(tokens)
        if jitter:
            scale = rng.uniform(0.8, 1.25)
            shift = rng.uniform(-1.0, 1.0, size=3)
            pose = pose * scale + shift
        emb = bank.embed(tokens, rng)
        samples.append(CorpusSample(f"s{i:05d}", tokens, emb.astype(np.float32), pose.astype(np.float32)))
    return samples


def split_samples(samples, fractions=(0.8, 0.1, 0.1)) -> dict[str, list[CorpusSample]]:
    """Deterministic train/dev/test split by position."""
    n = len(samples)
    n_train = int(round(fractions[0] * n))
    n_dev = int(round(fractions[1] * n))
    return {"train": samples[:n_train], "dev": samples[n_train:n_train + n_dev],
            "test": samples[n_train + n_dev:]}


def corpus_digest(path) -> str:
    """Digest of every file under a split directory (names and bytes)."""
    h = hashlib.sha256()
    root = Path(path)
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            p = Path(dirpath) / name
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()
