import json
import os

import numpy as np
import pytest

from adnet import cli, data, formats

TINY_SET = ["--set", "model.base_channels=4", "--set", "model.drdb_count=1", "--set", "model.drdb_growth=4",
            "--set", "model.pyramid_levels=2", "--set", "patch_size=8", "--set", "patch_stride=8",
            "--set", "batch_size=4", "--set", "milestone=0"]


def _bytes(path):
    with open(path, "rb") as fh:
        return fh.read()


def _tree(root):
    out = {}
    for base, _, files in os.walk(root):
        for f in files:
            p = os.path.join(base, f)
            out[os.path.relpath(p, root)] = _bytes(p)
    return out


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert cli.main(["synth", "--count", "2", "--height", "16", "--width", "16", "--seed", "5", "--out", str(out)]) == 0
    return out


def test_synth_layout_and_determinism(synth_dir, tmp_path):
    names = sorted(os.listdir(synth_dir))
    assert names == ["manifest.json", "scene_0000", "scene_0001"]
    assert sorted(os.listdir(synth_dir / "scene_0000")) == sorted(data.LDR_FILES + (data.EXPOSURE_FILE, data.GT_FILE))
    again = tmp_path / "again"
    assert cli.main(["synth", "--count", "2", "--height", "16", "--width", "16", "--seed", "5", "--out", str(again)]) == 0
    a, b = _tree(synth_dir), _tree(again)
    a.pop("manifest.json"), b.pop("manifest.json")
    assert a == b


def test_env_seed(tmp_path, monkeypatch, synth_dir):
    monkeypatch.setenv(cli.SEED_ENV, "5")
    assert cli.main(["synth", "--count", "2", "--height", "16", "--width", "16", "--out", str(tmp_path / "e")]) == 0
    assert _bytes(tmp_path / "e" / "scene_0001" / data.GT_FILE) == _bytes(synth_dir / "scene_0001" / data.GT_FILE)
    monkeypatch.setenv(cli.SEED_ENV, "nope")
    assert cli.main(["synth", "--count", "1", "--out", str(tmp_path / "f")]) == 2


def test_manifest_replay(synth_dir, tmp_path):
    manifest = json.loads((synth_dir / "manifest.json").read_text())
    assert manifest["command"] == "synth" and manifest["seed"] == 5
    assert "time" not in json.dumps(manifest)
    moved = tmp_path / "m.json"
    manifest["argv"][manifest["argv"].index("--out") + 1] = str(tmp_path / "replayed")
    moved.write_text(json.dumps(manifest))
    assert cli.main(["replay", str(moved)]) == 0
    assert _bytes(tmp_path / "replayed" / "scene_0000" / data.GT_FILE) == _bytes(synth_dir / "scene_0000" / data.GT_FILE)


def test_train_zero_epochs_then_infer_and_eval(synth_dir, tmp_path, capsys):
    out = tmp_path / "run"
    assert cli.main(["train", "--data", str(synth_dir), "--out", str(out), "--quiet", "--set", "epochs=0"]
                    + TINY_SET) == 0
    assert {"best.adnt", "last.adnt", "metrics.tsv", "manifest.json"} <= set(os.listdir(out))
    assert (out / "metrics.tsv").read_text() == "epoch\tloss\tpsnr_l\tpsnr_mu\n"

    res = tmp_path / "inf"
    scene = synth_dir / "scene_0000"
    capsys.readouterr()
    assert cli.main(["infer", "--checkpoint", str(out / "last.adnt"), "--scene", str(scene), "--out", str(res),
                     "--tta", "--attention"]) == 0
    assert "forward passes: 4" in capsys.readouterr().out
    assert formats.read_pfm(res / "result.pfm").shape == (16, 16, 3)
    assert formats.read_pgm(res / "attention_short.pgm").shape == (16, 16)

    assert cli.main(["infer", "--checkpoint", str(out / "last.adnt"), "--scene", str(scene), "--out", str(res),
                     "--tile", "8x8", "--overlap", "2"]) == 0
    # origins 0, 4, 8 on each axis
    assert "forward passes: 9" in capsys.readouterr().out
    assert cli.main(["infer", "--checkpoint", str(out / "last.adnt"), "--scene", str(scene), "--out", str(res),
                     "--tile", "6x6", "--overlap", "4"]) == 1

    gt = scene / data.GT_FILE
    assert cli.main(["eval", str(gt), str(gt)]) == 0
    assert capsys.readouterr().out.strip() == "PSNR-l 100.0000\tPSNR-mu 100.0000"


def test_train_logs_epochs(synth_dir, tmp_path):
    out = tmp_path / "run"
    assert cli.main(["train", "--data", str(synth_dir), "--out", str(out), "--quiet", "--set", "epochs=2"]
                    + TINY_SET) == 0
    lines = (out / "metrics.tsv").read_text().splitlines()
    assert len(lines) == 3 and all(len(l.split("\t")) == 4 for l in lines)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["epochs"] == 2 and manifest["config"]["model.base_channels"] == 4


def test_config_file(synth_dir, tmp_path):
    conf = tmp_path / "c.conf"
    conf.write_text("# comment\nepochs = 0\nmodel.base_channels=4\n")
    assert cli.resolve_config(str(conf), ["lr=0.001"], 3)["model.base_channels"] == 4
    with pytest.raises(cli.UsageError):
        cli.resolve_config(None, ["nonsense=1"], 0)
    with pytest.raises(cli.UsageError):
        cli.resolve_config(None, ["epochs=many"], 0)
    assert cli.main(["train", "--data", str(synth_dir), "--out", str(tmp_path / "x"), "--set", "bogus=1"]) == 2


def test_usage_and_runtime_errors(tmp_path, capsys):
    assert cli.main([]) == 2
    assert cli.main(["gradcheck"]) == 2
    assert cli.main(["gradcheck", "no_such_op"]) == 2
    assert cli.main(["gradcheck", "relu", "--cases", "2"]) == 0
    assert "2/2 cases passed" in capsys.readouterr().out
    assert cli.main(["eval", str(tmp_path / "a.pfm"), str(tmp_path / "b.pfm")]) == 1
    assert cli.main(["infer", "--checkpoint", str(tmp_path / "none.adnt"), "--scene", str(tmp_path),
                     "--out", str(tmp_path / "o")]) == 1


def test_eval_mismatch(tmp_path):
    formats.write_pfm(tmp_path / "a.pfm", np.zeros((2, 2, 3)))
    formats.write_pfm(tmp_path / "b.pfm", np.zeros((2, 3, 3)))
    assert cli.main(["eval", str(tmp_path / "a.pfm"), str(tmp_path / "b.pfm")]) == 1


def test_ablate_small(synth_dir, tmp_path):
    args = ["ablate", "--data", str(synth_dir), "--quiet", "--set", "epochs=1", "--set", "milestone=1"] + TINY_SET[:-2]
    assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
    table = (tmp_path / "a" / "ablation.tsv").read_text().splitlines()
    assert [l.split("\t")[0].strip() for l in table[1:]] == ["Baseline", "Variant 1", "Variant 2", "Ours"]
