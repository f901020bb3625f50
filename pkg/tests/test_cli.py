import json

import pytest

from gsa.cli import main
from gsa.model import build_student, write_checkpoint

TINY = ["--desk", "--run.width=4", "--run.scale_factor=0.02", "--data.synthetic_train=16",
        "--data.synthetic_val=8", "--data.image_size=32", "--stages.adakd=false"]


def test_gen_data_and_eval(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "d"), "--n", "6", "--size", "32"]) == 0
    ck = write_checkpoint(build_student(4, 4), tmp_path / "m.gsak")
    code = main(["eval", str(ck), "--json", f"--data.val_dir={tmp_path / 'd'}", "--data.image_size=32"])
    assert code == 0
    out = capsys.readouterr().out
    assert "map50" in json.loads(out[out.index("{"):])


def test_run_requires_seed(tmp_path, capsys):
    assert main(["run", *TINY, "--out", str(tmp_path)]) == 2


def test_run_end_to_end(tmp_path, capsys):
    assert main(["run", "--seed", "3", *TINY, "--out", str(tmp_path / "r")]) == 0
    assert "map50" in capsys.readouterr().out
    ck = tmp_path / "r" / "stage_adakd.gsak"
    assert main(["fps", str(ck), "--warmup", "1", "--timed", "2", "--trials", "2", "--size", "32"]) == 0
    assert main(["redundancy", str(ck), *TINY, "--batch", "4"]) == 0
    assert main(["flops", str(ck)]) == 0


def test_unknown_key_exit_2(tmp_path):
    assert main(["run", "--seed", "1", "--run.bogus=3", "--out", str(tmp_path)]) == 2


def test_bad_config_file_exit_2(tmp_path):
    assert main(["run", "--seed", "1", "--config", str(tmp_path / "missing.ini")]) == 2


def test_missing_data_exit_3(tmp_path):
    ck = write_checkpoint(build_student(4, 4), tmp_path / "m.gsak")
    assert main(["eval", str(ck), f"--data.val_dir={tmp_path / 'nothing'}"]) == 3


def test_corrupt_checkpoint_exit_3(tmp_path):
    bad = tmp_path / "bad.gsak"
    bad.write_bytes(b"GSAKjunk")
    assert main(["fps", str(bad)]) == 3


def test_nan_loss_exit_4(tmp_path):
    assert main(["run", "--seed", "1", *TINY, "--sgd.lr=1e12", "--sgd.clip_norm=0",
                 "--out", str(tmp_path)]) == 4


def test_prune_verb(tmp_path, capsys):
    ck = write_checkpoint(build_student(4, 4), tmp_path / "m.gsak")
    assert main(["prune", str(ck), "--out", str(tmp_path / "p.gsak"), "--tau", "0.5"]) == 0
    assert main(["prune", str(ck), "--out", str(tmp_path / "p.gsak"), "--percentile", "0.5",
                 "--plan", str(tmp_path / "plan.json")]) == 0
    assert (tmp_path / "plan.json").exists()
    assert main(["prune", str(ck), "--out", str(tmp_path / "p.gsak")]) == 2
