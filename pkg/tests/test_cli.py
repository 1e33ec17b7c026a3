import json
import subprocess
import sys

import numpy as np
import pytest

from girnet.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from girnet.data import VideoClip, load_clip, save_clip, synthetic_clip, write_synthetic_dataset

TINY_CFG = {"channels": 8, "n_res_extract": 1, "n_res_recon": 1, "attention_kind": "attention-2", "scale": 2}


@pytest.fixture
def config_file(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(TINY_CFG), encoding="utf-8")
    return p


def test_no_command_is_usage_error():
    assert main([]) == EXIT_USAGE


def test_unknown_flag_is_usage_error(capsys):
    assert main(["eval", "--bogus"]) == EXIT_USAGE
    assert "usage" in capsys.readouterr().err


def test_help_exits_zero():
    assert main(["--help"]) == EXIT_OK


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "girnet", "gradcheck", "--op", "nope"], capture_output=True, text=True)
    assert res.returncode == EXIT_USAGE


def test_degrade_protocol(tmp_path, capsys):
    rng = np.random.default_rng(0)
    save_clip(VideoClip([rng.uniform(size=(3, 128, 128)) for _ in range(7)]), tmp_path / "hr")
    assert main(["degrade", "--in", str(tmp_path / "hr"), "--out", str(tmp_path / "lr"), "--scale", "4"]) == EXIT_OK
    lr = load_clip(tmp_path / "lr")
    assert len(lr) == 4 and lr.size == (32, 32)


def test_degrade_missing_dir_is_data_error(tmp_path):
    assert main(["degrade", "--in", str(tmp_path / "none"), "--out", str(tmp_path / "o"), "--scale", "2"]) == EXIT_DATA


def test_degrade_bad_scale_is_usage_error(tmp_path):
    assert main(["degrade", "--in", str(tmp_path), "--out", str(tmp_path), "--scale", "3"]) == EXIT_USAGE


def test_eval_identical(tmp_path, capsys):
    save_clip(synthetic_clip(0, n_frames=2, size=16), tmp_path / "gt")
    assert main(["eval", "--pred", str(tmp_path / "gt"), "--gt", str(tmp_path / "gt"), "--clip-id", "z"]) == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].split("\t") == ["z", "0", "99.0000", "1.000000"]
    assert lines[-1].split("\t") == ["z", "mean", "99.0000", "1.000000"]
    assert len(lines) == 3


def test_eval_luma_only(tmp_path, capsys):
    clip = synthetic_clip(1, n_frames=1, size=16)
    save_clip(clip, tmp_path / "gt")
    save_clip(VideoClip([np.clip(f + 0.1, 0, 1) for f in clip.frames]), tmp_path / "pred")
    assert main(["eval", "--pred", str(tmp_path / "pred"), "--gt", str(tmp_path / "gt"), "--luma-only"]) == EXIT_OK
    mean = capsys.readouterr().out.strip().splitlines()[-1].split("\t")
    assert 15 < float(mean[2]) < 40


def test_gradcheck_single_op(capsys):
    assert main(["gradcheck", "--op", "pixel_shuffle", "--seeds", "2"]) == EXIT_OK
    out = capsys.readouterr().out
    assert out.startswith("pixel_shuffle\t") and "ok" in out


def test_train_then_infer(tmp_path, config_file, capsys):
    manifest = write_synthetic_dataset(tmp_path / "data", 2, seed=3)
    out = tmp_path / "run"
    code = main(["train", "--manifest", str(manifest), "--config", str(config_file), "--epochs", "1",
                 "--seed", "1", "--out", str(out), "--batch", "2"])
    assert code == EXIT_OK
    log = capsys.readouterr().out.strip().splitlines()
    epoch, step, loss, lr = log[0].split("\t")
    assert (epoch, step) == ("0", "0") and float(lr) == 1e-4 and float(loss) > 0
    ckpt = out / "checkpoint.girn"
    assert ckpt.exists()

    lr_dir = tmp_path / "lr"
    save_clip(VideoClip([f[:, :16, :16] for f in synthetic_clip(9, n_frames=3).frames]), lr_dir)
    for name in ("o1", "o2"):
        assert main(["infer", "--ckpt", str(ckpt), "--in", str(lr_dir), "--out", str(tmp_path / name)]) == EXIT_OK
    first, second = sorted((tmp_path / "o1").iterdir()), sorted((tmp_path / "o2").iterdir())
    assert len(first) == 5
    assert [p.read_bytes() for p in first] == [p.read_bytes() for p in second]
    assert load_clip(tmp_path / "o1").size == (32, 32)

    assert main(["infer", "--ckpt", str(ckpt), "--in", str(lr_dir), "--out", str(tmp_path / "o3"),
                 "--scale", "4"]) == EXIT_DATA
    single = tmp_path / "one"
    save_clip(VideoClip([np.zeros((3, 8, 8))]), single)
    assert main(["infer", "--ckpt", str(ckpt), "--in", str(single), "--out", str(tmp_path / "o4")]) == EXIT_DATA
    assert "need >= 2 frames" in capsys.readouterr().err


def test_train_empty_manifest(tmp_path, config_file):
    (tmp_path / "m.txt").write_text("\n", encoding="utf-8")
    code = main(["train", "--manifest", str(tmp_path / "m.txt"), "--config", str(config_file),
                 "--epochs", "1", "--out", str(tmp_path / "o")])
    assert code == EXIT_DATA


def test_bad_config_is_data_error(tmp_path):
    manifest = write_synthetic_dataset(tmp_path / "d", 1)
    cfg = tmp_path / "c.json"
    cfg.write_text('{"channels": 8, "depth": 2}', encoding="utf-8")
    assert main(["train", "--manifest", str(manifest), "--config", str(cfg), "--epochs", "1",
                 "--out", str(tmp_path / "o")]) == EXIT_DATA


def test_ablate_writes_table(tmp_path, config_file):
    manifest = write_synthetic_dataset(tmp_path / "d", 2, seed=5)
    code = main(["ablate", "--manifest", str(manifest), "--out", str(tmp_path / "ab"), "--config", str(config_file),
                 "--steps", "1", "--batch", "2", "--variants", "full,conv-instead-of-dconv"])
    assert code == EXIT_OK
    table = (tmp_path / "ab" / "ablation.md").read_text(encoding="utf-8").splitlines()
    assert table[0].startswith("| variant |")
    assert table[3].startswith("| conv-instead-of-dconv |") and "+0.890" in table[3]


def test_ablate_unknown_variant(tmp_path):
    manifest = write_synthetic_dataset(tmp_path / "d", 1)
    assert main(["ablate", "--manifest", str(manifest), "--out", str(tmp_path), "--variants", "nope"]) == EXIT_USAGE
