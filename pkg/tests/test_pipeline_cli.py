import json
import shutil

import pytest

from darslp.cli import main
from darslp.errors import MissingUpstream, StaleArtifact, ValidationError
from darslp.pipeline import Pipeline, load_config, stage_seed

TINY = ["synth.n_samples=24", "synth.T_max=24", "gen.T_max=24", "ae.max_steps=20", "gen.max_epochs=2",
        "gen_phase2.max_epochs=1", "analysis.grid_n=12", "gen.d_model=16", "gen.ffn_dim=32",
        "analysis.n_bins=10"]


def tiny_pipeline(workdir, extra=()):
    return Pipeline(load_config("configs/desk.json", TINY + list(extra), workdir=workdir))


@pytest.fixture(scope="module")
def done(tmp_path_factory):
    wd = tmp_path_factory.mktemp("wd")
    pipe = tiny_pipeline(wd)
    first = pipe.run_all()
    return pipe, wd, first


def test_run_all_then_cached(done):
    pipe, wd, first = done
    assert not any(r["cached"] for r in first)
    assert all(r["cached"] for r in tiny_pipeline(wd).run_all())
    assert (wd / "evaluate" / "report.digest").read_text().strip()


def test_stage_seeds_differ():
    assert len({stage_seed(7, s) for s in ("train-ae", "synth-data", "train-gen-phase1")}) == 3
    assert stage_seed(7, "train-ae") == stage_seed(7, "train-ae")


def test_missing_upstream(tmp_path):
    with pytest.raises(MissingUpstream):
        tiny_pipeline(tmp_path).run_stage("train-gen-phase2")
    assert main(["train-gen-phase2", "--config", "configs/desk.json", "--workdir", str(tmp_path)]) == 3


def test_stale_upstream(done, tmp_path):
    _, wd, _ = done
    copy = tmp_path / "copy"
    shutil.copytree(wd, copy)
    pipe = tiny_pipeline(copy, ["ae.max_steps=21"])
    with pytest.raises(StaleArtifact):
        pipe.run_stage("extract-latents")


def test_overrides_recorded(done):
    pipe, wd, _ = done
    stamp = pipe.read_stamp("train-ae")
    assert stamp["overrides"]["ae.max_steps"] == 20
    assert stamp["digest"] == pipe.expected_digest("train-ae")


def test_bad_override():
    with pytest.raises(ValidationError):
        load_config(None, ["nosection.x=1"])
    with pytest.raises(ValidationError):
        load_config(None, ["noequals"])


def test_plots_and_csv_stable(done):
    pipe, wd, _ = done
    for kind in ("channel-stats", "projection", "density-diff"):
        paths = pipe.emit_plots(kind)
        assert sum(p.endswith(".png") for p in paths) == 4
        assert sum(p.endswith(".csv") for p in paths) == 1
        csv_path = next(p for p in paths if p.endswith(".csv"))
        before = open(csv_path, "rb").read()
        pipe.emit_plots(kind)
        assert open(csv_path, "rb").read() == before


def test_density_plot_needs_projection(tmp_path):
    with pytest.raises(MissingUpstream):
        tiny_pipeline(tmp_path).emit_plots("density-diff")
    with pytest.raises(MissingUpstream):
        tiny_pipeline(tmp_path).run_stage("analyze-latents", "density-diff")


def test_cli_cached_message(done, capsys):
    _, wd, _ = done
    args = ["--config", "configs/desk.json", "--workdir", str(wd)] + sum((["--stage-override", o] for o in TINY), [])
    assert main(["train-ae"] + args) == 0
    assert "cached (digest unchanged), nothing to do" in capsys.readouterr().out


def test_cli_errors(tmp_path, capsys):
    assert main(["train-ae", "--corpus", str(tmp_path)]) == 2
    assert main(["train-ae", "--corpus", str(tmp_path / "nope"), "--out", str(tmp_path / "x.ckpt")]) == 2
    assert main(["analyze-latents", "--what", "stats", "--workdir", str(tmp_path),
                 "--config", "configs/desk.json"]) == 3
    err = capsys.readouterr().err
    assert "error:" in err


def test_cli_direct_generate(done, tmp_path):
    _, wd, _ = done
    out = tmp_path / "gen"
    rc = main(["generate", "--text-file", str(wd / "prepare-data" / "dev"),
               "--gen-ckpt", str(wd / "train-gen-phase2" / "gen.ckpt"),
               "--ae-ckpt", str(wd / "train-ae" / "ae.ckpt"), "--out", str(out)])
    assert rc == 0
    ids = [json.loads(x)["id"] for x in (out / "manifest.jsonl").read_text().splitlines()]
    assert len(ids) == len(set(ids)) > 0
