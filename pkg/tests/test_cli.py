"""End-to-end tests of the command-line entry points on tiny configs."""

import os

import pytest

from e2po import cli, diagnostics
from e2po.netdiff import load_checkpoint

TINY = """
iterations = 2
G = 2
K = 1
n_modes = 4
prompt_batch = 2
pretrain_iters = 15
train_sample_steps = 4
inference_steps = 4
eval_samples = 8
t_emb = 5
"""


@pytest.fixture()
def tiny_config(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return str(path)


class TestTrain:
    def test_writes_metrics_and_checkpoint(self, tiny_config, tmp_path):
        out = str(tmp_path / "out")
        rc = cli.main(["train", "--config", tiny_config, "--out", out,
                       "--name", "tiny"])
        assert rc == 0
        csv_path = os.path.join(out, "metrics_tiny_42.csv")
        assert os.path.exists(csv_path)
        rows = diagnostics.parse_csv(csv_path)
        assert len(rows) == 2
        ckpt = os.path.join(out, "policy_tiny_42.ckpt")
        load_checkpoint(ckpt)

    def test_multiple_seeds(self, tiny_config, tmp_path):
        out = str(tmp_path / "out")
        rc = cli.main(["train", "--config", tiny_config, "--out", out,
                       "--name", "m", "--seeds", "1,2"])
        assert rc == 0
        assert os.path.exists(os.path.join(out, "metrics_m_1.csv"))
        assert os.path.exists(os.path.join(out, "metrics_m_2.csv"))

    def test_same_seed_is_byte_identical(self, tiny_config, tmp_path):
        out_a = str(tmp_path / "a")
        out_b = str(tmp_path / "b")
        cli.main(["train", "--config", tiny_config, "--out", out_a, "--name", "d"])
        cli.main(["train", "--config", tiny_config, "--out", out_b, "--name", "d"])
        with open(os.path.join(out_a, "metrics_d_42.csv"), "rb") as fa, \
                open(os.path.join(out_b, "metrics_d_42.csv"), "rb") as fb:
            assert fa.read() == fb.read()


class TestPretrain:
    def test_writes_checkpoint(self, tiny_config, tmp_path):
        out = str(tmp_path / "out")
        rc = cli.main(["pretrain", "--config", tiny_config, "--out", out,
                       "--name", "base"])
        assert rc == 0
        field = load_checkpoint(os.path.join(out, "pretrained_base_42.ckpt"))
        assert field.param_vector().numel() > 0


class TestCompare:
    def test_budget_sweep(self, tiny_config, tmp_path):
        out = str(tmp_path / "out")
        rc = cli.main(["compare", "--config", tiny_config, "--out", out,
                       "--name", "sw", "--sweep", "2x1,1x2"])
        assert rc == 0
        path = os.path.join(out, "compare_sw.csv")
        with open(path) as fh:
            lines = fh.read().splitlines()
        assert lines[0] == cli.COMPARE_HEADER
        assert len(lines) == 3
        assert lines[1].startswith("2,1,42,")
        assert lines[2].startswith("1,2,42,")

    def test_mismatched_budget_fails(self, tiny_config, tmp_path):
        rc = cli.main(["compare", "--config", tiny_config,
                       "--out", str(tmp_path / "out"), "--sweep", "2x1,2x2"])
        assert rc == 1

    def test_missing_sweep_fails(self, tiny_config, tmp_path):
        rc = cli.main(["compare", "--config", tiny_config,
                       "--out", str(tmp_path / "out")])
        assert rc == 1


class TestDiagnose:
    def test_summarizes_metrics(self, tiny_config, tmp_path, capsys):
        out = str(tmp_path / "out")
        cli.main(["train", "--config", tiny_config, "--out", out, "--name", "dg"])
        rc = cli.main(["diagnose", "--metrics",
                       os.path.join(out, "metrics_dg_42.csv")])
        assert rc == 0
        text = capsys.readouterr().out
        assert "final reward_mean" in text
        assert "final zero_std_ratio" in text

    def test_missing_file_fails(self, tmp_path):
        rc = cli.main(["diagnose", "--metrics", str(tmp_path / "nope.csv")])
        assert rc == 1

    def test_wrong_schema_fails(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("iteration,nope\n0,1\n")
        rc = cli.main(["diagnose", "--metrics", str(bad)])
        assert rc == 1


class TestBadConfig:
    def test_unknown_key_exits_nonzero(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("definitely_not_a_key = 3\n")
        rc = cli.main(["train", "--config", str(path),
                       "--out", str(tmp_path / "out")])
        assert rc == 1

    def test_bad_seed_list(self, tiny_config, tmp_path):
        rc = cli.main(["train", "--config", tiny_config,
                       "--out", str(tmp_path / "out"), "--seeds", "1,x"])
        assert rc == 1
