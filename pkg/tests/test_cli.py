import json
from pathlib import Path

import numpy as np
import pytest

from microau.cli import main, write_pgm

TINY_SETS = [
    "--set", "backbone.conv1_channels=2", "--set", "backbone.conv2_channels=4",
    "--set", "backbone.se_reduction=2", "--set", "backbone.f_high_dim=8",
    "--set", "efp.hidden_dim=16", "--set", "reasoner.d_model=32",
    "--set", "reasoner.layers=1", "--set", "reasoner.heads=2",
    "--set", "reasoner.lora_rank=2", "--set", "reasoner.lora_alpha=4",
    "--set", "epochs=1", "--set", "batch_size=16",
]


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    code = main(["gen", "--out", str(root), "--subjects", "4", "--per-subject", "5",
                 "--seed", "3"])
    assert code == 0
    return root


class TestGen:
    def test_default_size_manifest(self, tmp_path):
        out = tmp_path / "ds"
        assert main(["gen", "--out", str(out), "--subjects", "12",
                     "--per-subject", "30", "--seed", "7"]) == 0
        rows = (out / "manifest.csv").read_text().strip().splitlines()
        assert len(rows) == 1 + 360
        assert rows[0].startswith("sample_id,subject_id,au1,")

    def test_gen_idempotent(self, tmp_path):
        out = tmp_path / "ds"
        args = ["gen", "--out", str(out), "--subjects", "3", "--per-subject", "2",
                "--seed", "5"]
        assert main(args) == 0
        first = {p.name: p.read_bytes() for p in out.iterdir()}
        assert main(args) == 0
        second = {p.name: p.read_bytes() for p in out.iterdir()}
        assert first == second

    def test_custom_au_set(self, tmp_path):
        out = tmp_path / "ds"
        assert main(["gen", "--out", str(out), "--subjects", "3", "--per-subject", "2",
                     "--seed", "5", "--aus", "2,4,7,12"]) == 0
        header = (out / "manifest.csv").read_text().splitlines()[0]
        assert header == "sample_id,subject_id,au2,au4,au7,au12"


class TestEvalLoso:
    def test_run_writes_reports_and_is_byte_deterministic(self, dataset_dir, tmp_path):
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        args = ["eval-loso", "--data", str(dataset_dir), "--seed", "7"] + TINY_SETS
        assert main(args + ["--out", str(out1)]) == 0
        assert main(args + ["--out", str(out2)]) == 0
        assert (out1 / "report.json").read_bytes() == (out2 / "report.json").read_bytes()
        assert (out1 / "report.txt").read_bytes() == (out2 / "report.txt").read_bytes()
        payload = json.loads((out1 / "report.json").read_text())
        assert payload["kind"] == "loso"
        assert len(payload["folds"]) == 4
        assert "epochs=1" in payload["config"]

    def test_corrupt_dataset_exits_2(self, tmp_path):
        root = tmp_path / "bad"
        assert main(["gen", "--out", str(root), "--subjects", "3",
                     "--per-subject", "2", "--seed", "1"]) == 0
        victim = next(root.glob("*.auseq"))
        victim.write_bytes(victim.read_bytes()[:40])
        code = main(["eval-loso", "--data", str(root), "--out", str(tmp_path / "r")]
                    + TINY_SETS)
        assert code == 2

    def test_single_subject_protocol_error_exits_1(self, tmp_path):
        root = tmp_path / "one"
        assert main(["gen", "--out", str(root), "--subjects", "3",
                     "--per-subject", "2", "--seed", "1"]) == 0
        manifest = root / "manifest.csv"
        lines = manifest.read_text().splitlines()
        keep = [lines[0]] + [l for l in lines[1:] if l.startswith("s00")]
        manifest.write_text("\n".join(keep) + "\n")
        for extra in root.glob("*.auseq"):
            if not extra.name.startswith("s00"):
                extra.unlink()
        code = main(["eval-loso", "--data", str(root), "--out", str(tmp_path / "r")]
                    + TINY_SETS)
        assert code == 1


class TestEvalCross:
    def test_both_directions(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["gen", "--out", str(a), "--subjects", "3", "--per-subject", "3",
                     "--seed", "1"]) == 0
        assert main(["gen", "--out", str(b), "--subjects", "3", "--per-subject", "3",
                     "--seed", "2", "--aus", "2,4,7,12", "--noise", "0.05"]) == 0
        out = tmp_path / "cross"
        assert main(["eval-cross", "--data-a", str(a), "--data-b", str(b),
                     "--out", str(out)] + TINY_SETS) == 0
        for d in ("a_to_b", "b_to_a"):
            payload = json.loads((out / d / "report.json").read_text())
            assert payload["extras"]["shared_au_ids"] == [2, 4, 7, 12]


class TestAblate:
    def test_five_arm_table(self, dataset_dir, tmp_path):
        out = tmp_path / "abl"
        assert main(["ablate", "--data", str(dataset_dir), "--out", str(out),
                     "--seeds", "7", "--holdout-subjects", "1"] + TINY_SETS) == 0
        table = (out / "ablation.txt").read_text().strip().splitlines()
        assert len(table) == 6
        arms = {line.split()[0] for line in table[1:]}
        assert arms == {"all", "mid_only", "high_only", "linear", "learnable_text"}
        payload = json.loads((out / "ablation.json").read_text())
        assert set(payload["arms"]) == arms


class TestGradcheckCommand:
    def test_exit_zero_and_summary(self, capsys):
        assert main(["gradcheck", "--seeds", "1"]) == 0
        out = capsys.readouterr().out
        assert "suite max rel error" in out


class TestHeatmapCommand:
    def test_train_then_heatmap(self, dataset_dir, tmp_path):
        ckpt = tmp_path / "model.ckpt"
        assert main(["train", "--data", str(dataset_dir), "--out", str(ckpt)]
                    + TINY_SETS) == 0
        out = tmp_path / "maps"
        assert main(["heatmap", "--checkpoint", str(ckpt), "--data", str(dataset_dir),
                     "--out", str(out), "--count", "2"]) == 0
        pgms = sorted(out.glob("*.pgm"))
        traces = sorted(out.glob("*.se.csv"))
        assert len(pgms) == 2 and len(traces) == 2
        header = pgms[0].read_bytes()[:15]
        assert header.startswith(b"P5\n64 64\n255\n")
        rows = traces[0].read_text().strip().splitlines()
        assert len(rows) == 4  # conv2_channels
        assert all(len(r.split(",")) == 6 for r in rows)  # frame count

    def test_unknown_sample_exits_1(self, dataset_dir, tmp_path):
        ckpt = tmp_path / "model.ckpt"
        assert main(["train", "--data", str(dataset_dir), "--out", str(ckpt)]
                    + TINY_SETS) == 0
        code = main(["heatmap", "--checkpoint", str(ckpt), "--data", str(dataset_dir),
                     "--out", str(tmp_path / "m"), "--samples", "nope_000"])
        assert code == 1


class TestErrors:
    def test_unknown_subcommand_exits_1(self):
        assert main(["frobnicate"]) == 1

    def test_unknown_flag_exits_1(self):
        assert main(["gen", "--out", "x", "--bogus", "1"]) == 1

    def test_unknown_config_key_exits_1(self, tmp_path):
        assert main(["gen", "--out", str(tmp_path / "d"), "--set", "nope=1"]) == 1

    def test_missing_data_dir_exits_2(self, tmp_path):
        assert main(["eval-loso", "--data", str(tmp_path / "absent"),
                     "--out", str(tmp_path / "r")]) == 2


def test_write_pgm_format(tmp_path):
    img = np.linspace(0, 1, 64 * 64).reshape(64, 64)
    path = tmp_path / "x.pgm"
    write_pgm(path, img)
    raw = path.read_bytes()
    assert raw.startswith(b"P5\n64 64\n255\n")
    assert len(raw) == len(b"P5\n64 64\n255\n") + 64 * 64
