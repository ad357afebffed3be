import numpy as np
import pytest

from biasloss import cli, data
from biasloss.cli import main


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    data.write_synthetic_mnist(root, n_train=96, n_test=48, seed=0)
    return root


def strip_wall(text):
    return "\n".join(",".join(line.split(",")[:-1])
                     for line in text.splitlines())


TRAIN_ARGS = ["--epochs", "1", "--batch_size", "32", "--lr0", "0.05",
              "--seed", "1", "--augment", "false", "--dropout", "0.0"]


class TestUsage:
    @pytest.mark.parametrize("verb", ["train", "eval", "profile", "sweep",
                                      "curve", "fixtures"])
    def test_help_exits_zero(self, verb, capsys):
        assert main([verb, "--help"]) == 0
        out = capsys.readouterr().out
        assert "usage" in out

    def test_unknown_verb_exits_two(self, capsys):
        assert main(["frobnicate"]) == 2

    def test_unknown_flag_exits_two(self, capsys):
        assert main(["curve", "--bogus", "1"]) == 2

    def test_missing_dataset_exits_two(self, tmp_path, monkeypatch, capsys):
        monkeypatch.delenv("DATA_DIR", raising=False)
        code = main(["train", "--out", str(tmp_path),
                     "--data_dir", str(tmp_path / "absent")])
        assert code == 2

    def test_bad_config_exits_two(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("loss=unknown\n")
        code = main(["train", "--config", str(cfg), "--out", str(tmp_path)])
        assert code == 2


class TestCurve:
    def test_anchor_row_present(self, tmp_path):
        assert main(["--quiet", "curve", "--alpha", "0.3", "--beta", "0.3",
                     "--out", str(tmp_path)]) == 0
        lines = (tmp_path / "curve.csv").read_text().splitlines()
        assert lines[0] == "alpha,beta,v,z_raw,z_clamped"
        assert lines[1].startswith("0.3,0.3,0.0,0.7,")

    def test_idempotent(self, tmp_path):
        args = ["--quiet", "curve", "--alpha", "0.2,0.4", "--beta", "0.1",
                "--out", str(tmp_path)]
        assert main(args) == 0
        first = (tmp_path / "curve.csv").read_bytes()
        assert main(args) == 0
        assert (tmp_path / "curve.csv").read_bytes() == first


class TestFixtures:
    def test_writes_parseable_fixtures(self, tmp_path):
        assert main(["--quiet", "fixtures", "--out", str(tmp_path)]) == 0
        imgs = data.read_idx(tmp_path / "fixture-images-idx3-ubyte")
        assert imgs.shape == (2, 1, 2, 2)
        labels = data.read_idx(tmp_path / "fixture-labels-idx1-ubyte")
        np.testing.assert_array_equal(labels, [3, 7])
        ci, cl = data.read_cifar10(tmp_path / "fixture-cifar.bin")
        assert ci.shape == (1, 3, 32, 32) and cl[0] == 7

    def test_synthetic_dataset_option(self, tmp_path):
        assert main(["--quiet", "fixtures", "--out", str(tmp_path),
                     "--synthetic_mnist", "64"]) == 0
        ds = data.load_mnist(tmp_path / "synthetic-mnist", "train")
        assert len(ds) == 64


class TestTrainEvalProfile:
    def test_train_writes_outputs(self, synth_dir, tmp_path, capsys):
        out = tmp_path / "run"
        code = main(["--quiet", "train", "--data_dir", str(synth_dir),
                     "--out", str(out)] + TRAIN_ARGS)
        assert code == 0
        assert (out / "runlog.csv").exists()
        assert (out / "best.ckpt").exists()
        assert (out / "final.ckpt").exists()

    def test_bias_zero_equals_ce_runlog(self, synth_dir, tmp_path):
        out_ce = tmp_path / "ce"
        out_b = tmp_path / "b"
        assert main(["--quiet", "train", "--data_dir", str(synth_dir),
                     "--loss", "ce", "--out", str(out_ce)] + TRAIN_ARGS) == 0
        assert main(["--quiet", "train", "--data_dir", str(synth_dir),
                     "--loss", "bias", "--alpha", "0", "--beta", "0",
                     "--out", str(out_b)] + TRAIN_ARGS) == 0
        a = strip_wall((out_ce / "runlog.csv").read_text())
        b = strip_wall((out_b / "runlog.csv").read_text())
        assert a == b

    def test_eval_matches_runlog(self, synth_dir, tmp_path, capsys):
        out = tmp_path / "run"
        main(["--quiet", "train", "--data_dir", str(synth_dir),
              "--out", str(out)] + TRAIN_ARGS)
        capsys.readouterr()
        code = main(["eval", "--ckpt", str(out / "final.ckpt"),
                     "--data_dir", str(synth_dir)] + TRAIN_ARGS)
        assert code == 0
        printed = capsys.readouterr().out.strip()
        last_val = [l for l in (out / "runlog.csv").read_text().splitlines()
                    if l.split(",")[1] == "val"][-1].split(",")
        assert printed == f"loss={last_val[2]} top1={last_val[3]}"

    def test_profile_two_rows(self, synth_dir, tmp_path, capsys):
        out = tmp_path / "run"
        main(["--quiet", "train", "--data_dir", str(synth_dir),
              "--out", str(out)] + TRAIN_ARGS)
        code = main(["--quiet", "profile", "--ckpt", str(out / "final.ckpt"),
                     "--data_dir", str(synth_dir), "--layers", "stem,head",
                     "--out", str(out)] + TRAIN_ARGS)
        assert code == 0
        lines = (out / "profile.csv").read_text().splitlines()
        assert lines[0] == "layer,avg,max,min"
        assert len(lines) == 3
        assert lines[1].startswith("stem,") and lines[2].startswith("head,")

    def test_missing_checkpoint_exits_two(self, synth_dir, tmp_path):
        code = main(["eval", "--ckpt", str(tmp_path / "none.ckpt"),
                     "--data_dir", str(synth_dir)])
        assert code == 2

    def test_numerical_failure_exits_three(self, synth_dir, tmp_path):
        # lr * weight_decay >> 1 makes the weights themselves overflow f32
        with np.errstate(all="ignore"):
            code = main(["--quiet", "train", "--data_dir", str(synth_dir),
                         "--out", str(tmp_path / "x"), "--lr0", "1e10",
                         "--weight_decay", "1e10", "--epochs", "2",
                         "--batch_size", "32"])
        assert code == 3


class TestSweep:
    def test_grid_rows_and_zero_cell(self, synth_dir, tmp_path):
        out = tmp_path / "sweep"
        code = main(["--quiet", "sweep", "--data_dir", str(synth_dir),
                     "--alphas", "0,0.3", "--betas", "0,0.3",
                     "--out", str(out)] + TRAIN_ARGS)
        assert code == 0
        lines = (out / "sweep.csv").read_text().splitlines()
        assert lines[0] == "alpha,beta,final_top1,final_loss,status"
        assert len(lines) == 5  # 2x2 grid
        # the (0,0) cell must reproduce a plain-CE run with the same seed
        ce_out = tmp_path / "ce"
        main(["--quiet", "train", "--data_dir", str(synth_dir), "--loss",
              "ce", "--out", str(ce_out)] + TRAIN_ARGS)
        ce_val = [l for l in (ce_out / "runlog.csv").read_text().splitlines()
                  if l.split(",")[1] == "val"][-1].split(",")
        cell = [l for l in lines[1:] if l.startswith("0.0,0.0,")][0].split(",")
        assert cell[2] == ce_val[3]  # top1
        assert cell[3] == ce_val[2]  # loss
        assert cell[4] == "ok"

    def test_parallel_jobs_match_sequential(self, synth_dir, tmp_path):
        args = ["--quiet", "sweep", "--data_dir", str(synth_dir),
                "--alphas", "0.1,0.3", "--betas", "0.3",
                "--epochs", "1", "--batch_size", "32", "--lr0", "0.05",
                "--seed", "1", "--augment", "false", "--dropout", "0.0"]
        out1, out2 = tmp_path / "s1", tmp_path / "s2"
        assert main(args + ["--out", str(out1)]) == 0
        assert main(args + ["--out", str(out2), "--jobs", "2"]) == 0
        assert ((out1 / "sweep.csv").read_text()
                == (out2 / "sweep.csv").read_text())
