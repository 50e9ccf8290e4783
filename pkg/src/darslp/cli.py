"""Command line entry point.

Pipeline verbs operate on a working directory (``--workdir`` or
``$DARSLP_WORKDIR``). ``train-ae``, ``extract-latents`` and ``generate`` also
accept explicit file arguments for one-off use outside a workdir, and
``train-gen`` is the explicit-file form of the two generator stages.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import DarslpError, ValidationError


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="pipeline JSON config")
    p.add_argument("--workdir", type=Path, default=None,
                   help="working directory (default: $DARSLP_WORKDIR or ./darslp_work)")
    p.add_argument("--seed", type=int, default=None, help="global seed")
    p.add_argument("--stage-override", action="append", default=[], metavar="KEY=VAL",
                   help="dotted config override, e.g. ae.epochs=5 (repeatable)")
    p.add_argument("--force", action="store_true", help="re-run even if the stage is cached")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="darslp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)

    for stage in ("synth-data", "prepare-data", "compute-priors", "train-gen-phase1", "train-gen-phase2",
                  "run-all"):
        _common(sub.add_parser(stage))

    p = sub.add_parser("train-ae")
    _common(p)
    p.add_argument("--corpus", type=Path, help="corpus root holding train/ (and dev/)")
    p.add_argument("--out", type=Path, help="checkpoint path")

    p = sub.add_parser("extract-latents")
    _common(p)
    p.add_argument("--ckpt", type=Path)
    p.add_argument("--corpus", type=Path)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("train-gen")
    _common(p)
    p.add_argument("--phase", type=int, choices=(1, 2), required=True)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--latents", type=Path, required=True)
    p.add_argument("--priors", type=Path, required=True)
    p.add_argument("--ae-ckpt", type=Path, required=True)
    p.add_argument("--init", type=Path)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("generate")
    _common(p)
    p.add_argument("--text-file", type=Path, help="a DEMB1 embedding file or a corpus split directory")
    p.add_argument("--gen-ckpt", type=Path)
    p.add_argument("--ae-ckpt", type=Path)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("evaluate")
    _common(p)
    p.add_argument("--split", choices=("dev", "test"), default=None)

    p = sub.add_parser("analyze-latents")
    _common(p)
    p.add_argument("--what", choices=("stats", "projection", "density-diff"), required=True)

    p = sub.add_parser("plot")
    _common(p)
    p.add_argument("--kind", choices=("channel-stats", "projection", "density-diff"), required=True)
    return parser


def _pipeline(args, extra=()):
    from .pipeline import Pipeline, load_config
    overrides = list(args.stage_override) + list(extra)
    cfg = load_config(args.config, overrides, args.seed, args.workdir)
    return Pipeline(cfg)


def _report(res: dict, stage: str) -> None:
    if res["cached"]:
        print(f"{stage}: cached (digest unchanged), nothing to do")
    else:
        print(f"{stage}: wrote {res['dir']}")


def _direct_train_ae(args) -> None:
    from .autoencoder import AEConfig, train_ae
    from .corpus import load_corpus
    from .pipeline import load_config
    from .skeleton import SkeletonLayout
    cfg = load_config(args.config, args.stage_override, args.seed)
    layout = SkeletonLayout.load(args.corpus / "train" / "layout.json")
    ae_cfg = AEConfig.from_dict(cfg["ae"])
    dev = load_corpus(args.corpus / "dev", layout) if (args.corpus / "dev" / "index.jsonl").exists() else None
    ckpt = train_ae(load_corpus(args.corpus / "train", layout), ae_cfg, layout, dev=dev)
    ckpt.save(args.out)
    print(f"train-ae: wrote {args.out}")


def _direct_extract(args) -> None:
    from .autoencoder import extract_latents, load_ae_checkpoint
    from .corpus import load_corpus
    ckpt = load_ae_checkpoint(args.ckpt)
    splits = [d for d in sorted(args.corpus.iterdir()) if (d / "index.jsonl").exists()] \
        if not (args.corpus / "index.jsonl").exists() else [args.corpus]
    for d in splits:
        target = args.out if d == args.corpus else args.out / d.name
        extract_latents(load_corpus(d, ckpt.layout), ckpt, target)
        print(f"extract-latents: wrote {target}")


def _direct_train_gen(args) -> None:
    from .autoencoder import load_ae_checkpoint, load_latents
    from .corpus import load_corpus
    from .generator import GeneratorConfig, load_generator_checkpoint, train_generator
    from .latent_stats import ChannelPrior
    from .pipeline import load_config
    cfg = load_config(args.config, args.stage_override, args.seed)
    ae = load_ae_checkpoint(args.ae_ckpt)
    gen_cfg = GeneratorConfig.from_dict({**cfg["gen"], **(cfg["gen_phase2"] if args.phase == 2 else {}),
                                         "phase": args.phase})
    prior = ChannelPrior.load(args.priors, ae.layout_hash)
    latents, samples = {}, {}
    for split in ("train", "dev"):
        if (args.corpus / split / "index.jsonl").exists():
            samples[split] = load_corpus(args.corpus / split, ae.layout)
            latents.update(load_latents(args.latents / split, ae.layout_hash))
    init = load_generator_checkpoint(args.init, ae.layout_hash) if args.init else None
    if args.phase == 2 and init is None:
        from .errors import MissingUpstream
        raise MissingUpstream("phase 2 needs --init pointing at a phase-1 checkpoint")
    ckpt = train_generator(samples["train"], latents, ae, gen_cfg, prior, dev=samples.get("dev"), init=init)
    ckpt.save(args.out)
    print(f"train-gen: wrote {args.out}")


def _direct_generate(args) -> None:
    from .autoencoder import load_ae_checkpoint
    from .corpus import load_corpus, read_embedding_file
    from .evaluation import export_for_backtranslation
    from .generator import generate, load_generator_checkpoint
    ae = load_ae_checkpoint(args.ae_ckpt)
    gen = load_generator_checkpoint(args.gen_ckpt, ae.layout_hash)
    if args.text_file.is_dir():
        items = {s.id: s.embedding for s in load_corpus(args.text_file, ae.layout)}
    else:
        items = {args.text_file.stem: read_embedding_file(args.text_file)}
    poses = {sid: generate(emb, gen, ae) for sid, emb in items.items()}
    export_for_backtranslation(poses, args.out)
    print(f"generate: wrote {len(poses)} sequences to {args.out}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        verb = args.verb
        if verb == "train-ae" and (args.corpus or args.out):
            if not (args.corpus and args.out):
                raise ValidationError("train-ae needs both --corpus and --out")
            _direct_train_ae(args)
        elif verb == "extract-latents" and (args.ckpt or args.corpus or args.out):
            if not (args.ckpt and args.corpus and args.out):
                raise ValidationError("extract-latents needs --ckpt, --corpus and --out")
            _direct_extract(args)
        elif verb == "train-gen":
            _direct_train_gen(args)
        elif verb == "generate" and (args.text_file or args.gen_ckpt or args.ae_ckpt or args.out):
            if not (args.text_file and args.gen_ckpt and args.ae_ckpt and args.out):
                raise ValidationError("generate needs --text-file, --gen-ckpt, --ae-ckpt and --out")
            _direct_generate(args)
        elif verb == "run-all":
            pipe = _pipeline(args)
            for res in pipe.run_all():
                print(("cached " if res["cached"] else "wrote  ") + res["dir"])
        elif verb == "plot":
            for path in _pipeline(args).emit_plots(args.kind):
                print(path)
        else:
            extra = []
            if verb == "evaluate" and args.split:
                extra = [f"evaluate.split={json.dumps(args.split)}"]
            pipe = _pipeline(args, extra)
            _report(pipe.run_stage(verb, getattr(args, "what", None), force=args.force), verb)
    except DarslpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
