import csv
import subprocess
import sys

import numpy as np
import pytest

from pnsplus.cli import main
from pnsplus.io import load_manifest, read_image, write_image
from pnsplus.pipeline import micro_config, save_config


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert main(["synth", "--out", str(root), "--clips", "2", "--frames", "4", "--height", "16", "--width", "28",
                 "--seed", "2"]) == 0
    return root / "manifest.jsonl"


def _csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def _gt_predictions(manifest, out):
    man = load_manifest(manifest)
    for rec in man.clips:
        (out / rec.clip_id).mkdir(parents=True, exist_ok=True)
        for i, m in enumerate(rec.masks):
            write_image(out / rec.clip_id / f"{i:05d}.pgm", read_image(m))


def test_help_and_usage_exit_codes():
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    with pytest.raises(SystemExit) as exc:
        main(["train", "--help"])
    assert exc.value.code == 0
    with pytest.raises(SystemExit) as exc:
        main(["eval", "--bogus"])
    assert exc.value.code == 2
    assert main(["--threads", "0", "bench"]) == 2


def test_entry_point_runs_as_module():
    out = subprocess.run([sys.executable, "-m", "pnsplus.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "eval" in out.stdout


def test_errors_print_one_line(tmp_path, capsys):
    assert main(["stats", "--manifest", str(tmp_path / "none.jsonl"), "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: ManifestError: ")


def test_eval_of_ground_truth_scores_one(dataset, tmp_path):
    _gt_predictions(dataset, tmp_path / "pred")
    assert main(["eval", "--pred", str(tmp_path / "pred"), "--manifest", str(dataset),
                 "--report", str(tmp_path / "r.csv"), "--attrs", "--curves"]) == 0
    rows = _csv(tmp_path / "r.csv")
    header, last = rows[0], rows[-1]
    assert last[0] == "__dataset__"
    for m in ("dice", "sen", "fbeta", "wfbeta", "s_alpha", "e_phi"):
        assert float(last[header.index(m)]) == pytest.approx(1.0, abs=1e-12)
    for suffix in ("_clips.png", "_curves.csv", "_curves.png"):
        assert (tmp_path / f"r{suffix}").exists()


def test_eval_reports_missing_predictions(dataset, tmp_path, capsys):
    _gt_predictions(dataset, tmp_path / "pred")
    victim = next((tmp_path / "pred").iterdir())
    (victim / "00002.pgm").unlink()
    assert main(["eval", "--pred", str(tmp_path / "pred"), "--manifest", str(dataset),
                 "--report", str(tmp_path / "r.csv")]) == 1
    err = capsys.readouterr().err
    assert "MissingPredictionsError" in err and f"{victim.name}/2" in err


def test_train_infer_eval_round_trip(dataset, tmp_path):
    cfg = tmp_path / "micro.txt"
    save_config(micro_config(steps=3), cfg)
    assert main(["train", "--config", str(cfg), "--manifest", str(dataset), "--out", str(tmp_path / "run")]) == 0
    for f in ("model.ckpt", "config.txt", "losses.csv", "loss.png"):
        assert (tmp_path / "run" / f).exists()
    assert len(_csv(tmp_path / "run" / "losses.csv")) == 4
    assert main(["infer", "--checkpoint", str(tmp_path / "run" / "model.ckpt"), "--manifest", str(dataset),
                 "--out", str(tmp_path / "pred")]) == 0
    clip_dirs = sorted((tmp_path / "pred").iterdir())
    assert len(clip_dirs) == 2
    assert sorted(p.name for p in clip_dirs[0].iterdir()) == ["00001.pgm", "00002.pgm", "00003.pgm"]
    assert main(["eval", "--pred", str(tmp_path / "pred"), "--manifest", str(dataset),
                 "--report", str(tmp_path / "r.csv")]) == 0
    first = (tmp_path / "r.csv").read_bytes()
    assert main(["eval", "--pred", str(tmp_path / "pred"), "--manifest", str(dataset),
                 "--report", str(tmp_path / "r.csv")]) == 0
    assert (tmp_path / "r.csv").read_bytes() == first


def test_infer_rejects_size_mismatch(dataset, tmp_path, capsys):
    from pnsplus.pipeline import PNSPlus, save_checkpoint

    cfg = micro_config(height=32, width=56)
    save_checkpoint(PNSPlus(cfg, seed=0), tmp_path / "m.ckpt")
    save_config(cfg, tmp_path / "config.txt")
    assert main(["infer", "--checkpoint", str(tmp_path / "m.ckpt"), "--manifest", str(dataset),
                 "--out", str(tmp_path / "p")]) == 1
    assert "ShapeError" in capsys.readouterr().err


def test_annotate_writes_every_kind_and_is_idempotent(dataset, tmp_path):
    args = ["annotate", "--manifest", str(dataset), "--out", str(tmp_path / "ann"), "--seed", "5"]
    assert main(args) == 0
    snap = {p: p.read_bytes() for p in (tmp_path / "ann").rglob("*") if p.is_file()}
    kinds = {p.parent.name for p in snap}
    assert {"boundary", "polygon", "scribble_fg", "scribble_bg", "records"} <= kinds
    assert main(args) == 0
    assert all(p.read_bytes() == b for p, b in snap.items())
    assert main(["annotate", "--manifest", str(dataset), "--out", str(tmp_path / "x"), "--kinds", "nope"]) == 1


def test_stats_outputs(dataset, tmp_path):
    assert main(["stats", "--manifest", str(dataset), "--out", str(tmp_path / "st"), "--size", "8", "14"]) == 0
    for f in ("frames.csv", "attributes.csv", "center_bias.pgm", "center_bias.png", "size_histogram.csv",
              "sizes.png", "contrast.png"):
        assert (tmp_path / "st" / f).exists()
    assert read_image(tmp_path / "st" / "center_bias.pgm").shape == (8, 14)
    assert len(_csv(tmp_path / "st" / "frames.csv")) == 1 + 2 * 4
    hist = _csv(tmp_path / "st" / "size_histogram.csv")
    assert sum(int(r[2]) for r in hist[1:]) == 8


def test_bench_writes_csv(tmp_path):
    assert main(["bench", "--size", "1", "4", "6", "4", "--groups", "2", "--kernel", "1",
                 "--out", str(tmp_path)]) == 0
    row = _csv(tmp_path / "bench.csv")[1]
    assert float(row[-1]) < 1e-10
    assert np.isfinite(float(row[-2]))
