import numpy as np
import pytest

from lplp.bagdata import ConfigurationError
from lplp.cli import main
from lplp.experiment import parse_config, run_experiment

SMALL = """\
[experiment]
methods = ours, ce
seeds = 0, 1

[dataset]
n_train_pos = 8
n_train_neg = 8
n_val_pos = 4
n_val_neg = 4
n_test_pos = 4
n_test_neg = 2
bag_size = 16

[train]
max_epochs = 3

[ours]
aggregation = mean
"""


def test_small_grid(tmp_path):
    summary = run_experiment(parse_config(SMALL), tmp_path)
    assert not summary.failures
    assert len(summary.values("ours", "accuracy")) == 2
    text = (tmp_path / summary.run_dir.split("/")[-1] / "summary.tsv").read_text()
    assert text.startswith("method\tmetric\tn\tmean\tstd\tper_seed\n")
    assert "ours\taccuracy\t2\t" in text


def test_single_seed_has_no_std(tmp_path):
    summary = run_experiment(parse_config(SMALL.replace("seeds = 0, 1", "seeds = 0")), write=False)
    assert summary.std("ours", "accuracy") is None
    assert "ours\taccuracy\t1\t" in summary.to_text() and "\t-\t" in summary.to_text()


def test_summary_bytes_reproducible(tmp_path):
    cfg = parse_config(SMALL)
    a = run_experiment(cfg, tmp_path / "a")
    b = run_experiment(cfg, tmp_path / "b")
    with open(f"{a.run_dir}/summary.tsv", "rb") as fa, open(f"{b.run_dir}/summary.tsv", "rb") as fb:
        assert fa.read() == fb.read()


@pytest.mark.parametrize("bad", ["[experiment]\nmethods = svm\n", "[train]\nwarmup = 3\n",
                                 "[dataset]\nbag_size = many\n", "[train]\nseed = 3\n"])
def test_config_errors(bad):
    with pytest.raises(ConfigurationError):
        parse_config(bad)


class TestCli:
    def test_synth_train_eval(self, tmp_path, capsys):
        data = str(tmp_path / "d.lplp")
        assert main(["synth", "--out", data, "--c", "2", "--dim", "8", "--seed", "7",
                     "--counts", "8", "8", "4", "4", "4", "2", "--bag-size", "16"]) == 0
        out = str(tmp_path / "run")
        assert main(["train", "--data", data, "--method", "ours", "--seed", "7", "--out", out,
                     "--max-epochs", "2"]) == 0
        assert (tmp_path / "run/checkpoint.txt").exists() and (tmp_path / "run/metrics.txt").exists()
        capsys.readouterr()
        assert main(["eval", "--checkpoint", out + "/checkpoint.txt", "--data", data]) == 0
        printed = capsys.readouterr().out
        assert printed.startswith("accuracy ") and "miou " in printed

    def test_default_train_dir(self, tmp_path):
        data = str(tmp_path / "d.lplp")
        main(["synth", "--out", data, "--counts", "4", "4", "2", "2", "2", "1", "--bag-size", "8"])
        assert main(["train", "--data", data, "--method", "pl", "--seed", "3", "--max-epochs", "1"]) == 0
        assert (tmp_path / "d_pl_s3" / "checkpoint.txt").exists()

    def test_eval_supervised_oracle(self, tmp_path, capsys):
        data = str(tmp_path / "d.lplp")
        main(["synth", "--out", data, "--counts", "40", "40", "10", "10", "10", "2", "--seed", "1"])
        out = str(tmp_path / "ce")
        assert main(["train", "--data", data, "--method", "ce", "--out", out, "--lr", "0.003",
                     "--max-epochs", "40"]) == 0
        capsys.readouterr()
        assert main(["eval", "--checkpoint", out + "/checkpoint.txt", "--data", data]) == 0
        acc = float(capsys.readouterr().out.split("\n")[0].split()[1])
        assert acc >= 99.0

    def test_unknown_flag(self, capsys):
        assert main(["train", "--bogus"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert main(["eval", "--checkpoint", str(tmp_path / "nope"), "--data", str(tmp_path / "nope")]) == 1

    def test_bad_method(self, tmp_path):
        data = str(tmp_path / "d.lplp")
        main(["synth", "--out", data, "--counts", "4", "4", "2", "2", "2", "1", "--bag-size", "8"])
        assert main(["train", "--data", data, "--method", "svm"]) == 1

    def test_experiment_command(self, tmp_path, capsys):
        cfg = tmp_path / "c.ini"
        cfg.write_text(SMALL.replace("methods = ours, ce", "methods = ppl"))
        assert main(["experiment", "--config", str(cfg), "--out", str(tmp_path / "runs"), "--seed", "2"]) == 0
        assert "ppl" in capsys.readouterr().out
