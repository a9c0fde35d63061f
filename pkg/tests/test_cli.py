import json
import os

import numpy as np
import pytest

from rangesr import config as config_mod
from rangesr.cli import main
from rangesr.evalkit import load_results
from rangesr.losses import class_weights
from rangesr.rangeview import ingest_corpus, ingest_scan, load_range_image, project

CFG = os.path.join(os.path.dirname(__file__), "..", "configs", "desk.cfg")


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("synth", "--config", CFG, "--seed", 7, "--out", d / "corpus", "--scenes", 4) == 0
    assert run("train", "--config", CFG, d / "corpus", "--out", d / "m.pt",
               "--set", "train.max_steps=2", "--regime", "end_to_end") == 0
    return d


def test_synth_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert run("synth", "--config", CFG, "--seed", 7, "--out", tmp_path / name, "--scenes", 2) == 0
    files = sorted(os.listdir(tmp_path / "a"))
    assert files == ["000000.bin", "000000.label", "000001.bin", "000001.label"]
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_stats_matches_library(workdir, capsys):
    out = workdir / "freq.txt"
    assert run("stats", "--config", CFG, workdir / "corpus", "--out", out) == 0
    cfg = config_mod.load(CFG)
    clouds = ingest_corpus(workdir / "corpus")
    ref = class_weights([project(c, cfg.geometry)[1] for c in clouds], 5)
    assert out.read_text() == ref.to_table()
    assert capsys.readouterr().out == ref.to_table()


def test_train_consumes_stats_table(workdir):
    table = workdir / "freq2.txt"
    assert run("stats", "--config", CFG, workdir / "corpus", "--out", table) == 0
    assert run("train", "--config", CFG, workdir / "corpus", "--out", workdir / "w.pt",
               "--set", "train.max_steps=1", "--class-freq", table) == 0


def test_train_outputs(workdir):
    assert (workdir / "m.pt").exists()
    rec = [json.loads(l) for l in (workdir / "m.jsonl").read_text().splitlines()]
    assert set(rec[0]) >= {"epoch", "losses", "val_miou", "lr"}
    assert (workdir / "m_curves.png").stat().st_size > 0


def test_project_matches_library(workdir):
    scan = workdir / "corpus" / "000000.bin"
    out = workdir / "p.npz"
    assert run("project", "--config", CFG, scan, "--labels", "--out", out) == 0
    img, labels = load_range_image(out)
    ref_img, ref_lab = project(ingest_scan(scan, with_labels=True), config_mod.load(CFG).geometry)
    np.testing.assert_array_equal(img.data, ref_img.data)
    np.testing.assert_array_equal(labels.labels, ref_lab.labels)
    assert (workdir / "p.png").stat().st_size > 0


def test_degrade(workdir):
    assert run("project", "--config", CFG, workdir / "corpus" / "000001.bin", "--out", workdir / "q.npz") == 0
    assert run("degrade", "--config", CFG, workdir / "q.npz", "--out", workdir / "q8.npz") == 0
    lo, _ = load_range_image(workdir / "q8.npz")
    hi, _ = load_range_image(workdir / "q.npz")
    np.testing.assert_array_equal(lo.data, hi.data[:, ::4])
    # geometry mismatch with the default (64-row) config is a usage error
    assert run("degrade", workdir / "q.npz", "--out", workdir / "x.npz") == 2


def test_eval_report_and_figures(workdir):
    from rangesr.pipeline import evaluate

    rj = workdir / "r.json"
    assert run("eval", workdir / "m.pt", workdir / "corpus", "--format", "json", "--out", rj) == 0
    assert (workdir / "r.png").stat().st_size > 0
    got = load_results(rj)[0]
    ref = evaluate(str(workdir / "m.pt"), ingest_corpus(workdir / "corpus"))
    assert got.miou == pytest.approx(ref.miou)
    assert got.class_names == ["unlabeled", "ground", "building", "car", "person"]

    md = workdir / "t.md"
    assert run("report", rj, rj, "--format", "markdown_table", "--out", md) == 0
    lines = md.read_text().splitlines()
    assert len(lines) == 4
    assert "ground | building | car | person" in lines[0]
    assert (workdir / "t.png").stat().st_size > 0

    csv = workdir / "t.csv"
    assert run("report", rj, "--format", "csv", "--out", csv) == 0
    assert csv.read_text().splitlines()[-1].startswith("miou,")


def test_infer_and_bench(workdir):
    out = workdir / "o.bin"
    assert run("infer", workdir / "m.pt", workdir / "corpus" / "000002.bin", "--out", out) == 0
    labels = np.fromfile(workdir / "o.label", dtype="<u4")
    assert len(labels) * 16 == out.stat().st_size
    bj = workdir / "b.json"
    assert run("bench", workdir / "m.pt", workdir / "corpus", "--iters", 2, "--warmup", 0, "--out", bj) == 0
    b = json.loads(bj.read_text())
    assert b["fps"] > 0 and b["params"]["sr"] > 0


def test_help_lists_every_key(capsys):
    assert run("--help") == 0
    text = capsys.readouterr().out
    for key in config_mod.all_keys():
        assert key in text
    assert run("train", "--help") == 0
    assert "unroll.penalty_init" in capsys.readouterr().out


def test_usage_errors(workdir, capsys):
    assert run("train", "--config", CFG, workdir / "corpus", "--out", workdir / "z.pt",
               "--set", "train.bogus=1") == 2
    assert "bogus" in capsys.readouterr().err
    assert run("train", "--config", CFG, workdir / "corpus", "--out", workdir / "z.pt",
               "--set", "train.lr=abc") == 2
    assert run("nosuchcommand") == 2
    assert run("synth", "--seed", 1) == 2  # --out missing
    assert not (workdir / "z.pt").exists()


def test_domain_errors(workdir, tmp_path, capsys):
    assert run("eval", tmp_path / "missing.pt", workdir / "corpus") == 1
    assert "IncompatibleCheckpoint" in capsys.readouterr().err
    assert run("eval", workdir / "m.pt", workdir / "corpus", "--format", "xml") == 1
    assert "InvalidFormat" in capsys.readouterr().err
    bad = tmp_path / "bad"
    bad.mkdir()
    (bad / "000000.bin").write_bytes(b"\x00" * 10)
    assert run("stats", "--config", CFG, bad) == 1
    assert "CorruptScan" in capsys.readouterr().err
    empty = tmp_path / "empty"
    empty.mkdir()
    assert run("stats", "--config", CFG, empty) == 1
    assert "EmptyInput" in capsys.readouterr().err
