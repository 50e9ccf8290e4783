"""DTW-MJE pose metric, corpus evaluation reports and back-translation export."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .container import canonical_json, digest
from .corpus import read_pose_file, write_pose_file
from .errors import EmptySequence, LayoutMismatch
from .generator import generate


def joint_cost_matrix(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """c[i, j] = mean over joints of the Euclidean distance between pred[i] and gt[j]."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.ndim != 3 or gt.ndim != 3:
        raise LayoutMismatch("expected (T, K, 3) sequences")
    if len(pred) == 0 or len(gt) == 0:
        raise EmptySequence("DTW needs non-empty sequences")
    if pred.shape[1:] != gt.shape[1:]:
        raise LayoutMismatch(f"joint layouts differ: {pred.shape[1:]} vs {gt.shape[1:]}")
    cost = np.empty((len(pred), len(gt)))
    for i in range(len(pred)):
        cost[i] = np.linalg.norm(gt - pred[i], axis=-1).mean(axis=-1)
    return cost


def dtw_path(cost: np.ndarray) -> tuple[float, int]:
    """Minimum-cost monotone path with steps (1,0), (0,1), (1,1).

    Returns ``(total_cost, path_length)`` counting visited cells; exact cost
    ties go to the shorter path.
    """
    n, m = cost.shape
    acc = np.full((n, m), np.inf)
    steps = np.zeros((n, m), dtype=np.int64)
    acc[0, 0], steps[0, 0] = cost[0, 0], 1
    for i in range(n):
        for j in range(m):
            if i == 0 and j == 0:
                continue
            best, best_len = np.inf, 0
            for pi, pj in ((i - 1, j - 1), (i - 1, j), (i, j - 1)):
                if pi < 0 or pj < 0:
                    continue
                a, length = acc[pi, pj], steps[pi, pj]
                if a < best or (a == best and length < best_len):
                    best, best_len = a, length
            acc[i, j] = best + cost[i, j]
            steps[i, j] = best_len + 1
    return float(acc[-1, -1]), int(steps[-1, -1])


def dtw_details(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float, int]:
    total, length = dtw_path(joint_cost_matrix(pred, gt))
    return total / length, total, length


def dtw_mje(pred: np.ndarray, gt: np.ndarray) -> float:
    """DTW over mean-joint-error local costs, normalized by warping path length."""
    return dtw_details(pred, gt)[0]


@dataclass
class EvalReport:
    per_sample: list = field(default_factory=list)
    config_digest: str = ""

    @property
    def values(self) -> np.ndarray:
        return np.array([r["dtw_mje"] for r in self.per_sample], dtype=np.float64)

    @property
    def mean(self) -> float:
        return float(self.values.mean()) if self.per_sample else float("nan")

    @property
    def median(self) -> float:
        return float(np.median(self.values)) if self.per_sample else float("nan")

    @property
    def length_mae(self) -> float:
        if not self.per_sample:
            return float("nan")
        return float(np.mean([abs(r["pred_len"] - r["gt_len"]) for r in self.per_sample]))

    def to_dict(self) -> dict:
        return {"n_samples": len(self.per_sample), "mean_dtw_mje": self.mean, "median_dtw_mje": self.median,
                "length_mae": self.length_mae, "config_digest": self.config_digest,
                "per_sample": self.per_sample}

    @property
    def digest(self) -> str:
        return digest(self.to_dict())

    def write(self, json_path, csv_path=None) -> None:
        with open(json_path, "w") as fh:
            fh.write(canonical_json(self.to_dict()))
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=["id", "dtw_mje", "dtw_total", "path_length",
                                                   "pred_len", "gt_len"], lineterminator="\n")
                w.writeheader()
                for r in self.per_sample:
                    w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def evaluate_sequences(preds: dict, gts: dict, config_digest: str = "") -> EvalReport:
    """Score ``preds[id]`` against ``gts[id]`` for every id of ``gts``, in order."""
    report = EvalReport(config_digest=config_digest)
    for sid, gt in gts.items():
        pred = preds[sid]
        norm, total, length = dtw_details(pred, gt)
        report.per_sample.append({"id": sid, "dtw_mje": norm, "dtw_total": total, "path_length": length,
                                  "pred_len": int(len(pred)), "gt_len": int(len(gt))})
    return report


def evaluate_corpus(gen_ckpt, ae_ckpt, samples, config_digest: str = "") -> tuple[EvalReport, dict]:
    """Generate every sample of a split and score it; returns the report and the generated poses."""
    preds = {s.id: generate(s.embedding, gen_ckpt, ae_ckpt) for s in samples}
    gts = {s.id: s.pose for s in samples}
    return evaluate_sequences(preds, gts, config_digest), preds


def export_for_backtranslation(sequences: dict, out_path) -> Path:
    """Write ``<id>.pose`` files (DPSE1, float32) and ``manifest.jsonl`` into ``out_path``."""
    root = Path(out_path)
    root.mkdir(parents=True, exist_ok=True)
    manifest = root / "manifest.jsonl"
    with open(manifest, "w") as fh:
        for sid, pose in sequences.items():
            name = f"{sid}.pose"
            write_pose_file(root / name, np.asarray(pose, dtype=np.float32))
            fh.write(json.dumps({"id": sid, "pose_file": name, "n_frames": int(len(pose))}) + "\n")
    return manifest


def load_export(out_path) -> dict:
    root = Path(out_path)
    out = {}
    for line in (root / "manifest.jsonl").read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            out[rec["id"]] = read_pose_file(root / rec["pose_file"])
    return out
