"""Stage orchestration over a working directory.

Every stage writes into ``<workdir>/<stage>/`` and finishes by writing a
``stamp.json`` that records the stage digest (a hash of the stage's config
section, its seed substream and the digests of its upstream stages), the
full config digest, the layout hash and a timestamp. Re-running a stage whose
stamp digest matches is a no-op.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import os
import shutil
import time
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from . import plots
from .autoencoder import (AEConfig, artifact_layout_hash, decode, extract_latents, load_ae_checkpoint, load_latents,
                          train_ae, write_latent_file)
from .container import canonical_json, digest
from .corpus import corpus_digest, load_corpus, save_corpus, split_samples, synth_corpus
from .errors import HashMismatch, MissingUpstream, StaleArtifact, ValidationError
from .evaluation import evaluate_sequences, export_for_backtranslation, load_export
from .generator import GeneratorConfig, generate_latents, load_generator_checkpoint, train_generator
from .latent_stats import (ChannelPrior, RegionProjection, channel_stats, compute_priors, density_difference,
                           fit_region_projection, masked_region_embedding, project)
from .skeleton import REGIONS, SkeletonLayout, canonical_pose, normalize_pose

log = logging.getLogger(__name__)

SPLITS = ("train", "dev", "test")
STAGES = ("synth-data", "prepare-data", "train-ae", "extract-latents", "compute-priors", "train-gen-phase1",
          "train-gen-phase2", "generate", "evaluate", "analyze-latents")
ANALYSES = ("stats", "projection", "density-diff")
PLOT_KINDS = {"channel-stats": "stats", "projection": "projection", "density-diff": "density-diff"}


def default_config() -> dict:
    return {
        "seed": 0,
        "paths": {"workdir": os.environ.get("DARSLP_WORKDIR", "darslp_work"), "source": None},
        "layout": SkeletonLayout().to_dict(),
        "synth": {"n_samples": 200, "vocab_size": 24, "motif_bank_size": 24, "T_max": 300, "max_tokens": 6,
                  "jitter": True, "fractions": [0.8, 0.1, 0.1]},
        "ae": AEConfig().to_dict(),
        "gen": GeneratorConfig().to_dict(),
        "gen_phase2": {},
        "generate": {"split": "dev", "phase": 2},
        "evaluate": {"split": "dev"},
        "analysis": {"split": "dev", "n_bins": 50, "grid_n": 100, "bandwidth": "scott"},
    }


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("layout",):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def parse_override(item: str):
    if "=" not in item:
        raise ValidationError(f"override {item!r} must look like KEY=VAL")
    key, raw = item.split("=", 1)
    try:
        val = json.loads(raw)
    except json.JSONDecodeError:
        val = raw
    return key.strip(), val


def apply_override(cfg: dict, key: str, val) -> None:
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ValidationError(f"unknown config section in override {key!r}")
        node = node[p]
    node[parts[-1]] = val


def load_config(path=None, overrides=(), seed=None, workdir=None) -> dict:
    cfg = default_config()
    if path is not None:
        with open(path) as fh:
            cfg = _merge(cfg, json.load(fh))
    applied = {}
    for item in overrides:
        key, val = parse_override(item) if isinstance(item, str) else item
        apply_override(cfg, key, val)
        applied[key] = val
    if seed is not None:
        cfg["seed"] = int(seed)
        applied["seed"] = int(seed)
    if workdir is not None:
        cfg["paths"]["workdir"] = str(workdir)
    cfg["_overrides"] = applied
    # validate sections early so bad values fail before any stage runs
    AEConfig.from_dict(cfg["ae"])
    GeneratorConfig.from_dict(cfg["gen"])
    SkeletonLayout.from_dict(cfg["layout"])
    return cfg


def stage_seed(global_seed: int, stage: str) -> int:
    h = hashlib.sha256(f"{global_seed}:{stage}".encode()).digest()
    return int.from_bytes(h[:4], "little") & 0x7FFFFFFF


class Pipeline:
    def __init__(self, config: dict):
        self.cfg = config
        self.workdir = Path(config["paths"]["workdir"])
        self.layout = SkeletonLayout.from_dict(config["layout"])
        self._src_digest = None

    # ----------------------------------------------------------------- bookkeeping
    @property
    def config_digest(self) -> str:
        return digest({k: v for k, v in self.cfg.items() if k not in ("paths", "_overrides")})

    def stage_dir(self, stage: str, what: str | None = None) -> Path:
        d = self.workdir / stage
        return d / what if what else d

    def upstream(self, stage: str, what: str | None = None) -> list[tuple[str, str | None]]:
        src = self.cfg["paths"].get("source")
        gen_stage = "train-gen-phase2" if self.cfg["generate"].get("phase", 2) == 2 else "train-gen-phase1"
        table = {
            "synth-data": [],
            "prepare-data": [] if src else [("synth-data", None)],
            "train-ae": [("prepare-data", None)],
            "extract-latents": [("prepare-data", None), ("train-ae", None)],
            "compute-priors": [("extract-latents", None)],
            "train-gen-phase1": [("extract-latents", None), ("compute-priors", None)],
            "train-gen-phase2": [("train-gen-phase1", None), ("compute-priors", None)],
            "generate": [(gen_stage, None), ("train-ae", None)],
            "evaluate": [("generate", None)],
        }
        if stage == "analyze-latents":
            if what == "stats":
                return [("extract-latents", None)]
            if what == "projection":
                return [("extract-latents", None), ("prepare-data", None)]
            if what == "density-diff":
                return [("analyze-latents", "projection"), ("generate", None)]
            raise ValidationError(f"unknown analysis {what!r}; choose from {ANALYSES}")
        return table[stage]

    def stage_params(self, stage: str, what: str | None = None) -> dict:
        c = self.cfg
        if stage == "prepare-data":
            return {"layout": c["layout"], "T_max": c["gen"]["T_max"], "source": self._source_digest()}
        return {
            "synth-data": {"synth": c["synth"], "layout": c["layout"]},
            "train-ae": {"ae": c["ae"]},
            "extract-latents": {},
            "compute-priors": {},
            "train-gen-phase1": {"gen": c["gen"]},
            "train-gen-phase2": {"gen": c["gen"], "gen_phase2": c["gen_phase2"]},
            "generate": {"generate": c["generate"]},
            "evaluate": {"evaluate": c["evaluate"]},
            "analyze-latents": {"analysis": c["analysis"], "what": what},
        }[stage]

    def _source_digest(self):
        src = self.cfg["paths"].get("source")
        if not src:
            return None
        if self._src_digest is None:
            self._src_digest = corpus_digest(src)
        return self._src_digest

    def expected_digest(self, stage: str, what: str | None = None) -> str:
        ups = [self.expected_digest(s, w) for s, w in self.upstream(stage, what)]
        return digest({"stage": stage, "what": what, "params": self.stage_params(stage, what),
                       "seed": stage_seed(self.cfg["seed"], stage), "upstream": ups})

    def read_stamp(self, stage: str, what: str | None = None) -> dict | None:
        p = self.stage_dir(stage, what) / "stamp.json"
        if not p.exists():
            return None
        with open(p) as fh:
            return json.load(fh)

    def _check_upstream(self, stage: str, what: str | None) -> None:
        for up, up_what in self.upstream(stage, what):
            stamp = self.read_stamp(up, up_what)
            name = up if up_what is None else f"{up} --what {up_what}"
            if stamp is None:
                raise MissingUpstream(f"{stage} needs '{name}' to be run first")
            if stamp["digest"] != self.expected_digest(up, up_what):
                raise StaleArtifact(f"'{name}' was produced under a different config; re-run it first")
            if stamp.get("layout_hash") not in (None, self.layout.layout_hash, self.latent_hash()):
                raise HashMismatch(f"'{name}' carries a foreign layout hash")

    def latent_hash(self) -> str:
        return artifact_layout_hash(self.layout, AEConfig.from_dict(self.cfg["ae"]).latent_layout)

    def run_stage(self, stage: str, what: str | None = None, force: bool = False) -> dict:
        """Run one stage; returns ``{"cached": bool, "dir": path, "outputs": [...]}``."""
        if stage not in STAGES:
            raise ValidationError(f"unknown stage {stage!r}")
        if stage == "analyze-latents" and what is None:
            raise ValidationError("analyze-latents needs --what")
        self.workdir.mkdir(parents=True, exist_ok=True)
        try:
            with FileLock(str(self.workdir / ".lock"), timeout=30):
                return self._run_locked(stage, what, force)
        except Timeout as exc:
            raise ValidationError(f"workdir {self.workdir} is locked by another stage") from exc

    def _run_locked(self, stage, what, force):
        self._check_upstream(stage, what)
        want = self.expected_digest(stage, what)
        out_dir = self.stage_dir(stage, what)
        stamp = self.read_stamp(stage, what)
        if stamp is not None and stamp["digest"] == want and not force:
            log.info("%s: cached", stage)
            return {"cached": True, "dir": str(out_dir), "outputs": stamp.get("outputs", [])}
        if out_dir.exists():
            shutil.rmtree(out_dir)
        out_dir.mkdir(parents=True)
        seed = stage_seed(self.cfg["seed"], stage)
        fn = getattr(self, "_stage_" + stage.replace("-", "_"))
        outputs = fn(out_dir, seed, what) if stage == "analyze-latents" else fn(out_dir, seed)
        layout_hash = self.layout.layout_hash if stage in ("synth-data", "prepare-data") else self.latent_hash()
        new_stamp = {"stage": stage, "what": what, "digest": want, "config_digest": self.config_digest,
                     "layout_hash": layout_hash, "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
                     "overrides": self.cfg.get("_overrides", {}), "outputs": sorted(outputs)}
        with open(out_dir / "stamp.json", "w") as fh:
            json.dump(new_stamp, fh, indent=1, sort_keys=True)
        return {"cached": False, "dir": str(out_dir), "outputs": new_stamp["outputs"]}

    def run_all(self) -> list[dict]:
        stages = [s for s in STAGES if s != "analyze-latents"]
        if self.cfg["paths"].get("source"):
            stages.remove("synth-data")
        if self.cfg["generate"].get("phase", 2) == 1:
            stages.remove("train-gen-phase2")
        results = [self.run_stage(s) for s in stages]
        results += [self.run_stage("analyze-latents", w) for w in ANALYSES]
        return results

    # ----------------------------------------------------------------- loaders
    def corpus(self, split: str):
        return load_corpus(self.stage_dir("prepare-data") / split, self.layout, t_max=self.cfg["gen"]["T_max"])

    def ae(self):
        return load_ae_checkpoint(self.stage_dir("train-ae") / "ae.ckpt", self.layout)

    def latents(self, split: str):
        return load_latents(self.stage_dir("extract-latents") / split, self.latent_hash())

    def priors(self):
        return ChannelPrior.load(self.stage_dir("compute-priors") / "priors.json", self.latent_hash())

    def generator(self, phase: int):
        return load_generator_checkpoint(self.stage_dir(f"train-gen-phase{phase}") / "gen.ckpt", self.latent_hash())

    # ----------------------------------------------------------------- stages
    def _stage_synth_data(self, out: Path, seed: int):
        s = self.cfg["synth"]
        samples = synth_corpus(seed, s["n_samples"], s["vocab_size"], s["motif_bank_size"], s["T_max"],
                               s["max_tokens"], s["jitter"], self.layout)
        outputs = []
        for split, items in split_samples(samples, s["fractions"]).items():
            save_corpus(items, out / split, self.layout)
            outputs.append(split)
        return outputs

    def _stage_prepare_data(self, out: Path, seed: int):
        src = Path(self.cfg["paths"]["source"] or self.stage_dir("synth-data"))
        outputs = []
        for split in SPLITS:
            if not (src / split / "index.jsonl").exists():
                continue
            samples = load_corpus(src / split, self.layout, t_max=self.cfg["gen"]["T_max"])
            for s in samples:
                s.pose = normalize_pose(s.pose, self.layout).astype(np.float32)
            save_corpus(samples, out / split, self.layout)
            outputs.append(split)
        if "train" not in outputs:
            raise MissingUpstream(f"no train split found under {src}")
        return outputs

    def _stage_train_ae(self, out: Path, seed: int):
        cfg = AEConfig.from_dict({**self.cfg["ae"], "seed": seed})
        dev = self.corpus("dev") if (self.stage_dir("prepare-data") / "dev").exists() else None
        ckpt = train_ae(self.corpus("train"), cfg, self.layout, dev=dev)
        ckpt.save(out / "ae.ckpt")
        return ["ae.ckpt"]

    def _splits(self):
        return [s for s in SPLITS if (self.stage_dir("prepare-data") / s / "index.jsonl").exists()]

    def _stage_extract_latents(self, out: Path, seed: int):
        ae = self.ae()
        for split in self._splits():
            extract_latents(self.corpus(split), ae, out / split)
        return self._splits()

    def _stage_compute_priors(self, out: Path, seed: int):
        prior = compute_priors(self.latents("train"), layout_hash=self.latent_hash(), source="train")
        prior.save(out / "priors.json")
        return ["priors.json"]

    def _gen_latents(self):
        lat = {}
        for split in self._splits():
            lat.update(self.latents(split))
        return lat

    def _stage_train_gen_phase1(self, out: Path, seed: int):
        cfg = GeneratorConfig.from_dict({**self.cfg["gen"], "seed": seed, "phase": 1})
        dev = self.corpus("dev") if "dev" in self._splits() else None
        ckpt = train_generator(self.corpus("train"), self._gen_latents(), self.ae(), cfg, self.priors(), dev=dev)
        ckpt.save(out / "gen.ckpt")
        return ["gen.ckpt"]

    def _stage_train_gen_phase2(self, out: Path, seed: int):
        cfg = GeneratorConfig.from_dict({**self.cfg["gen"], **self.cfg["gen_phase2"], "seed": seed, "phase": 2})
        dev = self.corpus("dev") if "dev" in self._splits() else None
        ckpt = train_generator(self.corpus("train"), self._gen_latents(), self.ae(), cfg, self.priors(), dev=dev,
                               init=self.generator(1))
        ckpt.save(out / "gen.ckpt")
        return ["gen.ckpt"]

    def _stage_generate(self, out: Path, seed: int):
        split = self.cfg["generate"]["split"]
        gen = self.generator(self.cfg["generate"].get("phase", 2))
        ae = self.ae()
        poses, ratios = {}, {}
        lat_dir = out / "latents"
        lat_dir.mkdir()
        for s in self.corpus(split):
            z, r_hat = generate_latents(s.embedding, gen)
            write_latent_file(lat_dir / f"{s.id}.lat", z, gen.layout_hash)
            poses[s.id] = decode(z, ae)
            ratios[s.id] = r_hat
        (lat_dir / "index.txt").write_text("".join(f"{sid}\n" for sid in poses))
        export_for_backtranslation(poses, out / "poses")
        with open(out / "ratios.json", "w") as fh:
            fh.write(canonical_json(ratios))
        return ["poses", "latents", "ratios.json"]

    def _stage_evaluate(self, out: Path, seed: int):
        split = self.cfg["evaluate"]["split"]
        if split != self.cfg["generate"]["split"]:
            raise ValidationError(f"generated split is {self.cfg['generate']['split']!r}, asked to evaluate {split!r}")
        preds = load_export(self.stage_dir("generate") / "poses")
        gts = {s.id: s.pose for s in self.corpus(split)}
        report = evaluate_sequences(preds, gts, self.config_digest)
        report.write(out / "report.json", out / "report.csv")
        (out / "report.digest").write_text(report.digest + "\n")
        return ["report.json", "report.csv", "report.digest"]

    def _stage_analyze_latents(self, out: Path, seed: int, what: str):
        a = self.cfg["analysis"]
        lat_layout = AEConfig.from_dict(self.cfg["ae"]).latent_layout
        if what == "stats":
            stats = channel_stats(self.latents("train"), a["n_bins"])
            with open(out / "channel_stats.csv", "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=["channel", "region", "entropy", "iqr", "sd"], lineterminator="\n")
                w.writeheader()
                for row in stats.rows(lat_layout):
                    w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
            np.savez(out / "histograms.npz", bin_edges=stats.bin_edges, counts=stats.counts)
            return ["channel_stats.csv", "histograms.npz"]
        if what == "projection":
            train_lat = self.latents("train")
            split = a["split"]
            split_lat = self.latents(split)
            ae = self.ae()
            canonical = canonical_pose(s.pose for s in self.corpus("train"))
            np.save(out / "canonical_pose.npy", canonical)
            split_poses = [s.pose for s in self.corpus(split)]
            outputs = ["canonical_pose.npy"]
            for region in REGIONS:
                proj = fit_region_projection(train_lat, region, lat_layout)
                with open(out / f"projection_{region}.json", "w") as fh:
                    fh.write(canonical_json(proj.to_dict()))
                pts = project(split_lat, proj)
                masked = masked_region_embedding(split_poses, ae, region, canonical, proj)
                _write_points(out / f"points_{region}.csv", {"gt": pts, "masked": masked})
                outputs += [f"projection_{region}.json", f"points_{region}.csv"]
            return outputs
        if what == "density-diff":
            gen_lat = load_latents(self.stage_dir("generate") / "latents", self.latent_hash())
            gt_lat = self.latents(self.cfg["generate"]["split"])
            outputs = []
            for region in REGIONS:
                with open(self.stage_dir("analyze-latents", "projection") / f"projection_{region}.json") as fh:
                    proj = RegionProjection.from_dict(json.load(fh))
                diff, xs, ys = density_difference(project(gt_lat, proj), project(gen_lat, proj), a["grid_n"],
                                                  a["bandwidth"])
                np.savez(out / f"density_{region}.npz", diff=diff, xs=xs, ys=ys)
                _write_grid(out / f"density_{region}.csv", diff, xs, ys)
                outputs += [f"density_{region}.npz", f"density_{region}.csv"]
            return outputs
        raise ValidationError(f"unknown analysis {what!r}")

    # ----------------------------------------------------------------- plots
    def emit_plots(self, kind: str) -> list[str]:
        """Render one figure per region plus a CSV twin into ``<workdir>/plots/<kind>/``."""
        if kind not in PLOT_KINDS:
            raise ValidationError(f"unknown plot kind {kind!r}; choose from {sorted(PLOT_KINDS)}")
        src = self.stage_dir("analyze-latents", PLOT_KINDS[kind])
        if self.read_stamp("analyze-latents", PLOT_KINDS[kind]) is None:
            raise MissingUpstream(f"plot {kind!r} needs 'analyze-latents --what {PLOT_KINDS[kind]}' first")
        out = self.workdir / "plots" / kind
        out.mkdir(parents=True, exist_ok=True)
        return [str(p) for p in getattr(plots, kind.replace("-", "_"))(src, out)]


def _write_points(path, groups: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source", "x", "y"])
        for name, pts in groups.items():
            for x, y in pts:
                w.writerow([name, repr(float(x)), repr(float(y))])


def _write_grid(path, diff, xs, ys) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "diff"])
        for i, x in enumerate(xs):
            for j, y in enumerate(ys):
                w.writerow([repr(float(x)), repr(float(y)), repr(float(diff[i, j]))])
