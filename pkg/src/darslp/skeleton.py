"""Skeleton layout, region partition, per-frame normalization and masking.

Pose sequences are plain ``numpy`` arrays of shape ``(T, K, 3)`` with
``K = layout.total_joints``; a single frame is ``(K, 3)``. Every op here
accepts either and broadcasts over leading axes.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateFrame, LayoutMismatch, NonFiniteInput

REGIONS = ("body", "right_hand", "left_hand", "face")
DEFAULT_REGION_SIZES = {"body": 8, "right_hand": 21, "left_hand": 21, "face": 128}
SHOULDER_EPS = 1e-8


@dataclass(frozen=True)
class SkeletonLayout:
    region_sizes: dict = field(default_factory=lambda: dict(DEFAULT_REGION_SIZES))
    left_shoulder_idx: int = 1
    right_shoulder_idx: int = 2

    def __post_init__(self):
        if set(self.region_sizes) != set(REGIONS):
            raise LayoutMismatch(f"regions must be exactly {REGIONS}, got {tuple(self.region_sizes)}")
        object.__setattr__(self, "region_sizes", {r: self.region_sizes[r] for r in REGIONS})
        if any(int(n) < 1 for n in self.region_sizes.values()):
            raise LayoutMismatch("every region needs at least one joint")
        lo, hi = self.region_ranges["body"]
        for idx in (self.left_shoulder_idx, self.right_shoulder_idx):
            if not lo <= idx < hi:
                raise LayoutMismatch(f"shoulder index {idx} outside body range [{lo}, {hi})")
        if self.left_shoulder_idx == self.right_shoulder_idx:
            raise LayoutMismatch("shoulder indices must differ")

    @property
    def total_joints(self) -> int:
        return sum(self.region_sizes.values())

    @property
    def region_ranges(self) -> dict[str, tuple[int, int]]:
        out, start = {}, 0
        for name in REGIONS:
            out[name] = (start, start + int(self.region_sizes[name]))
            start += int(self.region_sizes[name])
        return out

    def region_slice(self, region: str) -> slice:
        lo, hi = self.region_ranges[region]
        return slice(lo, hi)

    def to_dict(self) -> dict:
        return {
            "total_joints": self.total_joints,
            "region_ranges": {k: list(v) for k, v in self.region_ranges.items()},
            "left_shoulder_idx": self.left_shoulder_idx,
            "right_shoulder_idx": self.right_shoulder_idx,
        }

    @property
    def layout_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "SkeletonLayout":
        ranges = d["region_ranges"]
        sizes = {}
        expected_start = 0
        for name in REGIONS:
            lo, hi = ranges[name]
            if lo != expected_start or hi <= lo:
                raise LayoutMismatch(f"region {name} range {lo}..{hi} is not contiguous")
            sizes[name] = hi - lo
            expected_start = hi
        layout = cls(sizes, int(d["left_shoulder_idx"]), int(d["right_shoulder_idx"]))
        if "total_joints" in d and int(d["total_joints"]) != layout.total_joints:
            raise LayoutMismatch("total_joints does not match region ranges")
        return layout

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "SkeletonLayout":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


DEFAULT_LAYOUT = SkeletonLayout()


def check_pose_shape(x: np.ndarray, layout: SkeletonLayout) -> None:
    if x.ndim < 2 or x.shape[-2:] != (layout.total_joints, 3):
        raise LayoutMismatch(f"expected (..., {layout.total_joints}, 3) pose array, got {x.shape}")


def check_finite(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("pose contains NaN or Inf")


def normalize_pose(seq: np.ndarray, layout: SkeletonLayout = DEFAULT_LAYOUT) -> np.ndarray:
    """Center every frame on the shoulder midpoint and scale it to unit shoulder width."""
    seq = np.asarray(seq, dtype=np.float64)
    check_pose_shape(seq, layout)
    check_finite(seq)
    ls = seq[..., layout.left_shoulder_idx, :]
    rs = seq[..., layout.right_shoulder_idx, :]
    width = np.linalg.norm(ls - rs, axis=-1)
    if np.any(width < SHOULDER_EPS):
        bad = np.argwhere(np.atleast_1d(width < SHOULDER_EPS)).ravel()
        raise DegenerateFrame(f"shoulder distance below {SHOULDER_EPS} in frame(s) {bad[:10].tolist()}")
    neck = 0.5 * (ls + rs)
    return (seq - neck[..., None, :]) / width[..., None, None]


def split_regions(frame: np.ndarray, layout: SkeletonLayout = DEFAULT_LAYOUT) -> tuple[np.ndarray, ...]:
    frame = np.asarray(frame)
    check_pose_shape(frame, layout)
    return tuple(frame[..., layout.region_slice(r), :] for r in REGIONS)


def merge_regions(blocks, layout: SkeletonLayout = DEFAULT_LAYOUT) -> np.ndarray:
    blocks = [np.asarray(b) for b in blocks]
    if len(blocks) != len(REGIONS):
        raise LayoutMismatch(f"expected {len(REGIONS)} region blocks, got {len(blocks)}")
    lead = blocks[0].shape[:-2]
    for name, block in zip(REGIONS, blocks):
        want = (layout.region_sizes[name], 3)
        if block.shape[-2:] != want or block.shape[:-2] != lead:
            raise LayoutMismatch(f"block for {name} has shape {block.shape}, expected (..., {want[0]}, 3)")
    return np.concatenate(blocks, axis=-2)


def mask_to_region(seq: np.ndarray, region: str, canonical: np.ndarray,
                   layout: SkeletonLayout = DEFAULT_LAYOUT) -> np.ndarray:
    """Keep ``region`` from ``seq`` and take every other joint from ``canonical``."""
    seq = np.asarray(seq)
    canonical = np.asarray(canonical)
    check_pose_shape(seq, layout)
    if canonical.shape != (layout.total_joints, 3):
        raise LayoutMismatch(f"canonical pose must be ({layout.total_joints}, 3), got {canonical.shape}")
    if region not in REGIONS:
        raise LayoutMismatch(f"unknown region {region!r}")
    out = np.broadcast_to(canonical, seq.shape).astype(np.result_type(seq, canonical), copy=True)
    sl = layout.region_slice(region)
    out[..., sl, :] = seq[..., sl, :]
    return out


def canonical_pose(sequences) -> np.ndarray:
    """Mean pose over every frame of every sequence."""
    total, count = None, 0
    for seq in sequences:
        seq = np.asarray(seq, dtype=np.float64)
        s = seq.reshape(-1, *seq.shape[-2:]).sum(axis=0)
        total = s if total is None else total + s
        count += seq.reshape(-1, *seq.shape[-2:]).shape[0]
    if count == 0:
        raise ValueError("canonical pose needs at least one frame")
    out = total / count
    check_finite(out)
    return out
