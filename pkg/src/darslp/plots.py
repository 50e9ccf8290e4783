"""Figure rendering for latent analyses. Each call writes one PNG per region
plus a single CSV holding the plotted numbers."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .skeleton import REGIONS  # noqa: E402

PNG_META = {"Software": None}


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def channel_stats(src: Path, out: Path, top_k: int = 8) -> list[Path]:
    rows = _read_csv(src / "channel_stats.csv")
    hist = np.load(src / "histograms.npz")
    edges, counts = hist["bin_edges"], hist["counts"]
    written = []
    for region in REGIONS:
        chans = [r for r in rows if r["region"] == region]
        chans.sort(key=lambda r: -float(r["entropy"]))
        chans = chans[:top_k]
        fig, axes = plt.subplots(2, 4, figsize=(12, 5))
        for ax, r in zip(axes.ravel(), chans):
            c = int(r["channel"])
            ax.stairs(counts[c], edges[c], fill=True)
            ax.set_title(f"ch {c}  E={float(r['entropy']):.2f}\nIQR={float(r['iqr']):.3f} SD={float(r['sd']):.3f}",
                         fontsize=8)
        for ax in axes.ravel()[len(chans):]:
            ax.axis("off")
        mean_e = np.mean([float(r["entropy"]) for r in rows if r["region"] == region])
        fig.suptitle(f"{region} channels (avg. entropy: {mean_e:.2f})")
        fig.tight_layout()
        path = out / f"channel_stats_{region}.png"
        fig.savefig(path, dpi=80, metadata=PNG_META)
        plt.close(fig)
        written.append(path)
    csv_path = out / "channel_stats.csv"
    _write_rows(csv_path, ["channel", "region", "entropy", "iqr", "sd"],
                [[r["channel"], r["region"], r["entropy"], r["iqr"], r["sd"]] for r in rows])
    return written + [csv_path]


def projection(src: Path, out: Path) -> list[Path]:
    written, all_rows = [], []
    for region in REGIONS:
        rows = _read_csv(src / f"points_{region}.csv")
        fig, ax = plt.subplots(figsize=(5, 5))
        for source, color in (("gt", "tab:gray"), ("masked", "tab:red")):
            pts = np.array([[float(r["x"]), float(r["y"])] for r in rows if r["source"] == source]).reshape(-1, 2)
            ax.scatter(pts[:, 0], pts[:, 1], s=3, alpha=0.5, c=color, label=source)
            all_rows += [[region, source, f"{x!r}", f"{y!r}"] for x, y in pts.tolist()]
        ax.set_title(f"{region} PCA")
        ax.legend(fontsize=7)
        path = out / f"projection_{region}.png"
        fig.savefig(path, dpi=80, metadata=PNG_META)
        plt.close(fig)
        written.append(path)
    csv_path = out / "projection.csv"
    _write_rows(csv_path, ["region", "source", "x", "y"], all_rows)
    return written + [csv_path]


def density_diff(src: Path, out: Path) -> list[Path]:
    written, all_rows = [], []
    for region in REGIONS:
        d = np.load(src / f"density_{region}.npz")
        diff, xs, ys = d["diff"], d["xs"], d["ys"]
        lim = float(np.abs(diff).max()) or 1.0
        fig, ax = plt.subplots(figsize=(5, 4))
        mesh = ax.pcolormesh(xs, ys, diff.T, cmap="RdBu_r", vmin=-lim, vmax=lim, shading="auto")
        fig.colorbar(mesh, ax=ax)
        ax.set_title(f"{region}: GT - generated density")
        path = out / f"density_diff_{region}.png"
        fig.savefig(path, dpi=80, metadata=PNG_META)
        plt.close(fig)
        written.append(path)
        for i, x in enumerate(xs):
            for j, y in enumerate(ys):
                all_rows.append([region, repr(float(x)), repr(float(y)), repr(float(diff[i, j]))])
    csv_path = out / "density_diff.csv"
    _write_rows(csv_path, ["region", "x", "y", "diff"], all_rows)
    return written + [csv_path]
