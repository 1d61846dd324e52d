import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from relocgan.checkpoint import import_delta, load_checkpoint
from relocgan.cli import main

TINY_CFG = """
seed = 0
[arch]
d_z = 8
d_w = 8
resolutions = 4, 8
channels = 16, 16
[budget]
kimg = 0.016
pretrain_kimg = 0.04
alpha_kimg = 0.016
[eval]
fid_samples = 20
lpips_samples = 12
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    for style, count, name in [("source", 40, "src"), ("sketch", 10, "few"), ("sketch", 20, "held")]:
        assert main(["make-data", "--out", str(root / name), "--style", style, "--count", str(count),
                     "--seed", str(len(name)), "--resolution", "8"]) == 0
    cfg = root / "run.cfg"
    cfg.write_text(f"output_dir = {root / 'out'}\n" + TINY_CFG + f"""
[data]
source_dir = {root / 'src'}
target_dir = {root / 'few'}
heldout_dir = {root / 'held'}
""")
    return root, cfg


@pytest.fixture(scope="module")
def source_ckpt(workspace):
    root, cfg = workspace
    assert main(["pretrain", "--config", str(cfg)]) == 0
    (path,) = (root / "out").glob("source-*.ckpt")
    return path


class TestPipeline:
    def test_pretrain_writes_config(self, workspace, source_ckpt):
        root, _ = workspace
        h = source_ckpt.stem.split("-", 1)[1]
        assert (root / "out" / f"config-{h}.cfg").exists()
        assert load_checkpoint(source_ckpt).meta["mode"] == "source"

    def test_transfer_and_delta(self, workspace, source_ckpt, capsys):
        root, cfg = workspace
        assert main(["transfer", "--config", str(cfg), "--source", str(source_ckpt), "--mode", "constant->alpha",
                     "--set", "output_dir=" + str(root / "tr")]) == 0
        printed = capsys.readouterr().out.split()
        ckpt = load_checkpoint(printed[0])
        assert ckpt.meta["mode"] == "constant->alpha"
        delta = import_delta(printed[1], ckpt.arch)
        np.testing.assert_array_equal(delta.numpy(), ckpt.deltas["target"].numpy())

    def test_generate_interpolate_diagnose(self, workspace, source_ckpt, capsys):
        root, cfg = workspace
        out = root / "gen"
        base = ["--config", str(cfg), "--set", f"output_dir={out}"]
        assert main(["transfer", *base, "--source", str(source_ckpt), "--mode", "adaptive"]) == 0
        ckpt_path = capsys.readouterr().out.split()[0]
        assert main(["generate", *base, "--ckpt", ckpt_path, "--n", "3"]) == 0
        grid = Image.open(capsys.readouterr().out.strip())
        assert grid.size == (1 + 3 * 9, 1 + 2 * 9)
        # the offset sweep needs a constant offset
        assert main(["interpolate", *base, "--ckpt", ckpt_path]) == 1
        assert main(["transfer", *base, "--source", str(source_ckpt), "--mode", "constant", "--seed", "3"]) == 0
        const_path = capsys.readouterr().out.split()[0]
        assert main(["interpolate", *base, "--ckpt", const_path, "--lambdas", "1,0,0.5", "--n", "2"]) == 0
        capsys.readouterr()
        (tsv,) = out.glob("interpolate-*.tsv")
        rows = [line.split("\t") for line in tsv.read_text().splitlines()[1:]]
        assert [float(r[0]) for r in rows] == [0.0, 0.5, 1.0]
        assert float(rows[0][1]) == 0.0
        assert main(["diagnose", *base, "--ckpt", ckpt_path, "--samples", "16"]) == 0
        table = capsys.readouterr().out
        # header plus one row per resolution
        assert len(table.splitlines()) == 1 + len(load_checkpoint(ckpt_path).arch.resolutions)

    def test_eval_single(self, workspace, source_ckpt):
        root, cfg = workspace
        out = root / "ev"
        assert main(["eval", "--config", str(cfg), "--ckpt", str(source_ckpt), "--set", f"output_dir={out}"]) == 0
        (js,) = out.glob("eval-*.json")
        metrics = {r["metric"]: r for r in json.loads(js.read_text())}
        assert set(metrics) == {"fid", "kid_x1e3", "intra_lpips"}
        assert metrics["fid"]["n_a"] == 20 and metrics["fid"]["n_b"] == 20

    def test_eval_repeat_welch(self, workspace, source_ckpt):
        root, cfg = workspace
        out = root / "welch"
        assert main(["eval", "--config", str(cfg), "--source", str(source_ckpt), "--arms", "constant,constant",
                     "--repeat", "2", "--welch", "--set", f"output_dir={out}"]) == 0
        (tsv,) = out.glob("welch-*.tsv")
        rows = [line.split("\t") for line in tsv.read_text().splitlines()[1:]]
        assert len(rows) == 3
        for row in rows:
            assert float(row[3]) == 0.0 and float(row[4]) == 1.0


class TestExitCodes:
    def test_usage_errors_exit_2(self):
        for argv in (["transfer"], ["nonsense"], ["make-data", "--out", "x", "--style", "oil", "--count", "1"]):
            with pytest.raises(SystemExit) as exc:
                main(argv)
            assert exc.value.code == 2

    def test_runtime_errors_exit_1(self, workspace, tmp_path, capsys):
        root, cfg = workspace
        assert main(["pretrain", "--config", str(cfg), "--set", "arch.typo=1"]) == 1
        assert "typo" in capsys.readouterr().err
        assert main(["transfer", "--config", str(cfg), "--source", str(tmp_path / "missing.ckpt")]) == 1
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"garbage")
        assert main(["generate", "--config", str(cfg), "--ckpt", str(bad)]) == 1
        (root / "few2").mkdir()
        (root / "few2" / "broken.png").write_bytes(b"nope")
        assert main(["pretrain", "--config", str(cfg), "--set", f"data.source_dir={root / 'few2'}"]) == 1
        assert "broken.png" in capsys.readouterr().err

    def test_console_script_entry(self):
        proc = subprocess.run([sys.executable, "-m", "relocgan.cli", "--help"], capture_output=True, text=True)
        assert proc.returncode == 0 and "transfer" in proc.stdout
