import dataclasses
import json

import numpy as np
import pytest
from PIL import Image

from onegan import cli
from onegan.core import RunConfig, load_config, save_config
from onegan.training import load_model

from conftest import tiny_hp


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert run("synth", "--out", root, "--count", 12, "--n-eval", 6, "--parents", 2,
               "--colors", 2, "--H", 32, "--seed", 1) == 0
    return root


def _config(path, dataset, out, **hp):
    cfg = RunConfig(hp=tiny_hp(total_iters=4, **hp), dataset=str(dataset), out=str(out),
                    seed=5, log_every=1, checkpoint_every=100, sample_every=2)
    save_config(cfg, path)
    return path


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    base = tmp_path_factory.mktemp("run")
    cfg = _config(base / "desk.ini", dataset, base / "run")
    assert run("train", "--config", cfg) == 0
    return base / "run"


def test_synth_layout(dataset):
    assert (dataset / "manifest.tsv").exists()
    for d in ("objects", "backgrounds", "eval", "masks"):
        assert any((dataset / d).iterdir())


def test_train_run_directory(trained):
    assert load_config(trained / "config.ini").hp == tiny_hp(total_iters=4)
    ckpts = sorted(p.name for p in (trained / "checkpoints").iterdir())
    assert ckpts == ["iter_0000002", "iter_0000004"]
    assert sorted(p.name for p in (trained / "samples").iterdir()) == ["iter_0000002.png", "iter_0000004.png"]
    lines = (trained / "metrics.log").read_text().splitlines()
    assert [l.split()[1] for l in lines[:2]] == ["path=generation", "path=generation"]
    assert sum("path=fake_recon" in l for l in lines) == 2


def test_checkpoint_at_phase1_end_is_phase2(trained):
    manifest = json.loads((trained / "checkpoints" / "iter_0000002" / "manifest.json").read_text())
    assert manifest["iteration"] == 2
    assert manifest["phase"] == 2 and manifest["phase_state"]["generators_frozen"]


def test_config_echo_reloads(trained, tmp_path):
    cfg = load_config(trained / "config.ini")
    cfg = dataclasses.replace(cfg, out=str(tmp_path / "again"))
    save_config(cfg, tmp_path / "echo.ini")
    assert load_config(tmp_path / "echo.ini") == cfg


def test_resume_reproduces_uninterrupted(trained, dataset, tmp_path):
    cfg = _config(tmp_path / "c.ini", dataset, tmp_path / "run")
    assert run("train", "--config", cfg, "--iters", 3) == 0
    assert run("train", "--config", cfg, "--resume") == 0
    full = (trained / "metrics.log").read_text().splitlines()
    resumed = (tmp_path / "run" / "metrics.log").read_text().splitlines()
    assert resumed == full
    a = load_model(trained / "checkpoints" / "iter_0000004")[0]
    b = load_model(tmp_path / "run" / "checkpoints" / "iter_0000004")[0]
    assert all(np.array_equal(x.detach(), y.detach()) for x, y in zip(a.parameters(), b.parameters()))


def test_train_errors(tmp_path, dataset):
    bad = tmp_path / "bad.ini"
    bad.write_text("[hyperparams]\nno_such_key = 1\n")
    assert run("train", "--config", bad) == 2
    missing = _config(tmp_path / "m.ini", tmp_path / "nowhere", tmp_path / "o")
    assert run("train", "--config", missing) == 2
    assert run("train", "--config", tmp_path / "absent.ini") == 2


def test_generate_deterministic(trained, tmp_path):
    for d in ("a", "b"):
        assert run("generate", "--checkpoint", trained, "--n", 3, "--seed", 9, "--out", tmp_path / d) == 0
    assert (tmp_path / "a" / "generate.png").read_bytes() == (tmp_path / "b" / "generate.png").read_bytes()
    assert run("generate", "--checkpoint", trained, "--n", 3, "--seed", 10, "--out", tmp_path / "c") == 0
    assert (tmp_path / "a" / "generate.png").read_bytes() != (tmp_path / "c" / "generate.png").read_bytes()


def test_generate_decompose_rows(trained, tmp_path):
    assert run("generate", "--checkpoint", trained, "--child", "1,3", "--n", 2,
               "--decompose", "--shared-z", "--out", tmp_path) == 0
    img = np.asarray(Image.open(tmp_path / "generate.png"))
    # 2 classes x 4 rows of 32 px tiles with 2 px padding
    assert img.shape[0] == 8 * 34 + 2 and img.shape[1] == 2 * 34 + 2


def test_generate_bad_class(trained, tmp_path):
    assert run("generate", "--checkpoint", trained, "--child", 9, "--out", tmp_path) == 2
    assert run("generate", "--checkpoint", tmp_path / "none", "--out", tmp_path) == 2


def _inputs(dataset):
    return sorted((dataset / "eval").iterdir())[:3]


def test_infer_segment(trained, dataset, tmp_path):
    files = _inputs(dataset)
    assert run("infer", "segment", *files, "--checkpoint", trained, "--out", tmp_path) == 0
    for f in files:
        m = np.asarray(Image.open(tmp_path / f"{f.stem}_mask.png"))
        assert m.shape == (32, 32)


def test_infer_remove_matches_reconstruct(trained, dataset, tmp_path):
    files = _inputs(dataset)
    assert run("infer", "reconstruct", *files, "--checkpoint", trained, "--out", tmp_path) == 0
    assert run("infer", "remove", *files, "--checkpoint", trained, "--out", tmp_path) == 0
    grid = np.asarray(Image.open(tmp_path / "reconstruct.png"))
    # rows: input, image, foreground, mask, background
    assert grid.shape[0] == 5 * 34 + 2
    for j, f in enumerate(files):
        bg = np.asarray(Image.open(tmp_path / f"{f.stem}_background.png"))
        y, x = 2 + 4 * 34, 2 + j * 34
        assert np.array_equal(grid[y:y + 32, x:x + 32], bg)


def test_infer_translate_and_cluster(trained, dataset, tmp_path):
    files = _inputs(dataset)
    assert run("infer", "translate", *files, "--checkpoint", trained, "--target-child", "1,2,4",
               "--out", tmp_path) == 0
    assert np.asarray(Image.open(tmp_path / "translate.png")).shape[0] == 4 * 34 + 2
    assert run("infer", "cluster", dataset / "eval", "--checkpoint", trained, "--k", 2, "--out", tmp_path) == 0
    rows = (tmp_path / "clusters.tsv").read_text().splitlines()[1:]
    assert len(rows) == 6 and {r.split("\t")[1] for r in rows} <= {"0", "1"}


def test_infer_option_mismatch(trained, dataset, tmp_path):
    files = _inputs(dataset)
    assert run("infer", "segment", *files, "--checkpoint", trained, "--target-child", 1) == 2
    assert run("infer", "translate", *files, "--checkpoint", trained) == 2
    assert run("infer", "reconstruct", *files, "--checkpoint", trained, "--k", 3) == 2
    assert run("infer", "translate", *files, "--checkpoint", trained, "--target-child", 7) == 2
    assert run("infer", "segment", tmp_path / "missing.png", "--checkpoint", trained) == 2


def test_eval_five_records(trained, dataset, tmp_path, capsys):
    out = tmp_path / "results.jsonl"
    assert run("eval", "--checkpoint", trained, "--dataset", dataset, "--metrics", "iou,dice,nmi,ami,cis",
               "--ablation", "no-mask-reg", "--per-class", 2, "--out", out) == 0
    rows = [json.loads(l) for l in out.read_text().splitlines()]
    assert [r["metric"] for r in rows] == ["iou", "dice", "nmi", "ami", "cis"]
    assert all(r["ablation"] == "no-mask-reg" and r["iteration"] == 4 for r in rows)
    assert len(capsys.readouterr().out.strip().splitlines()) == 5


def test_eval_unknown_metric(trained, dataset, tmp_path):
    assert run("eval", "--checkpoint", trained, "--dataset", dataset, "--metrics", "fid",
               "--out", tmp_path / "r.jsonl") == 2
    assert not (tmp_path / "r.jsonl").exists()


def test_checkpoint_files(trained):
    ck = trained / "checkpoints" / "iter_0000004"
    assert (ck / "manifest.json").exists() and any((ck / "params").glob("*.npy"))
