"""
Tests for CLI module
"""

import json
import tempfile
import unittest
from pathlib import Path
from unittest.mock import Mock, patch

import pytest
from click.testing import CliRunner

from src.prdl.cli import cli

TINY_CONFIG = """\
seed: 1
data:
  bags_per_class: 10
  patches_per_bag: 3
model:
  embed_dim: 6
  hidden_dims: [12]
  projector_hidden: 8
  out_dim: 5
pretrain:
  batch_size: 4
  epochs: 1
  n_local: 1
  max_images: 8
  warmup_steps: 0
mil:
  hidden_dim: 4
  epochs: 2
"""


class TestCLI(unittest.TestCase):
    """Test cases for the command group"""

    def setUp(self):
        """Set up test fixtures"""
        self.runner = CliRunner()

    def test_cli_help(self):
        """Test that CLI shows help information"""
        result = self.runner.invoke(cli, ["--help"])
        self.assertEqual(result.exit_code, 0)
        self.assertIn("PRDL", result.output)
        for command in ("gen-data", "pretrain", "extract", "train-mil", "eval", "gradcheck", "mask-sim"):
            self.assertIn(command, result.output)

    def test_cli_verbose_flag(self):
        """Test verbose flag sets logging level"""
        with patch("src.prdl.cli.logging") as mock_logging:
            mock_logger = Mock()
            mock_logging.getLogger.return_value = mock_logger
            self.runner.invoke(cli, ["--verbose", "mask-sim"])
            mock_logger.setLevel.assert_called_with(mock_logging.DEBUG)

    def test_cli_quiet_flag(self):
        """Test quiet flag sets logging level"""
        with patch("src.prdl.cli.logging") as mock_logging:
            mock_logger = Mock()
            mock_logging.getLogger.return_value = mock_logger
            self.runner.invoke(cli, ["--quiet", "mask-sim"])
            mock_logger.setLevel.assert_called_with(mock_logging.ERROR)


class TestArgumentErrors(unittest.TestCase):
    """Test cases for exit codes on bad input"""

    def setUp(self):
        """Set up test fixtures"""
        self.runner = CliRunner()
        self.temp_dir = tempfile.TemporaryDirectory()
        self.root = Path(self.temp_dir.name)

    def tearDown(self):
        """Clean up test fixtures"""
        self.temp_dir.cleanup()

    def test_invalid_aug_mode(self):
        """Test an unknown --aug exits 1 and lists the valid modes"""
        result = self.runner.invoke(
            cli,
            ["train-mil", "--store", "s.prsd", "--data", "d", "--out", "o", "--seed", "0", "--aug", "mixup"],
        )
        self.assertEqual(result.exit_code, 1)
        self.assertIn("prs-raw", result.output)
        self.assertIn("mc-discard", result.output)

    def test_mask_sim_needs_exactly_one_source(self):
        """Test mask-sim without a source exits 1"""
        result = self.runner.invoke(cli, ["mask-sim"])
        self.assertEqual(result.exit_code, 1)
        self.assertIn("exactly one", result.output)

    def test_unknown_config_key(self):
        """Test a bad config key exits 1 with its path"""
        config = self.root / "bad.yaml"
        config.write_text("mil:\n  nope: 1\n", encoding="utf-8")
        result = self.runner.invoke(cli, ["gen-data", "-c", str(config), "--out", str(self.root / "data")])
        self.assertEqual(result.exit_code, 1)
        self.assertIn("mil.nope", result.output)

    def test_missing_dataset_is_runtime_error(self):
        """Test a missing dataset directory exits 2"""
        result = self.runner.invoke(
            cli, ["pretrain", "--data", str(self.root / "missing"), "--out", str(self.root / "run"), "--seed", "0"]
        )
        self.assertEqual(result.exit_code, 2)

    def test_pretrain_requires_seed(self):
        """Test --seed is mandatory for pretraining"""
        result = self.runner.invoke(cli, ["pretrain", "--data", "d", "--out", "o"])
        self.assertNotEqual(result.exit_code, 0)
        self.assertIn("--seed", result.output)


class TestGradcheckCommand(unittest.TestCase):
    """Test cases for the gradcheck command"""

    def setUp(self):
        """Set up test fixtures"""
        self.runner = CliRunner()

    def test_passes_and_writes_report(self):
        """Test a small suite exits 0 and records the worst errors"""
        with tempfile.TemporaryDirectory() as temp_dir:
            result = self.runner.invoke(cli, ["gradcheck", "--n-seeds", "1", "--out", temp_dir])
            self.assertEqual(result.exit_code, 0, result.output)
            self.assertIn("gradient checks passed", result.output)
            report = json.loads((Path(temp_dir) / "gradcheck_report.json").read_text(encoding="utf-8"))
            self.assertEqual(report["failures"], [])
            self.assertIn("total", report["worst"])

    def test_zero_tolerance_fails(self):
        """Test failures exit 1"""
        result = self.runner.invoke(cli, ["gradcheck", "--n-seeds", "1", "--tolerance", "0"])
        self.assertEqual(result.exit_code, 1)


@pytest.mark.integration
@pytest.mark.cli
class TestPipeline(unittest.TestCase):
    """Test cases for the full gen-data to eval pipeline"""

    def setUp(self):
        """Set up test fixtures"""
        self.runner = CliRunner()
        self.temp_dir = tempfile.TemporaryDirectory()
        self.root = Path(self.temp_dir.name)
        self.config = self.root / "tiny.yaml"
        self.config.write_text(TINY_CONFIG, encoding="utf-8")

    def tearDown(self):
        """Clean up test fixtures"""
        self.temp_dir.cleanup()

    def invoke(self, *args: str):
        result = self.runner.invoke(cli, [args[0], "-c", str(self.config), *args[1:]])
        self.assertEqual(result.exit_code, 0, result.output)
        return result

    def build_store(self):
        """Generate data, pretrain and extract a store; returns (data, run, store)."""
        data = self.root / "data"
        run = self.root / "run"
        self.invoke("gen-data", "--out", str(data))
        self.invoke("pretrain", "--data", str(data), "--out", str(run), "--seed", "3")
        self.invoke("extract", "--data", str(data), "--checkpoint", str(run / "checkpoint.prdl"), "--out", str(run))
        return data, run, run / "store.prsd"

    def test_end_to_end(self):
        """Test every stage runs and writes its artifacts"""
        data = self.root / "data"
        run = self.root / "run"
        mil = self.root / "mil"

        result = self.invoke("gen-data", "--out", str(data))
        self.assertIn("Config hash:", result.output)
        self.assertTrue((data / "labels.csv").exists())
        self.assertTrue((data / "splits.csv").exists())

        result = self.invoke("pretrain", "--data", str(data), "--out", str(run), "--seed", "3", "--threads", "2")
        self.assertIn("final_eval_loss", result.output)
        self.assertTrue((run / "checkpoint.prdl").exists())
        self.assertTrue((run / "pretrain_log.txt").exists())
        self.assertTrue((run / "resolved_config.json").exists())

        self.invoke("extract", "--data", str(data), "--checkpoint", str(run / "checkpoint.prdl"), "--out", str(run))
        store = run / "store.prsd"
        self.assertEqual(store.read_bytes()[:4], b"PRSD")

        self.invoke(
            "train-mil", "--store", str(store), "--data", str(data), "--out", str(mil), "--seed", "0", "--aug", "prs"
        )
        rows = [json.loads(line) for line in (mil / "metrics.jsonl").read_text(encoding="utf-8").splitlines()]
        self.assertEqual([row["split"] for row in rows], ["val", "test"])
        self.assertEqual(rows[0]["method"], "prs")

        self.invoke(
            "eval", "--store", str(store), "--data", str(data), "--model", str(mil / "model.pmil"),
            "--out", str(mil), "--split", "val", "--split", "test",
        )
        lines = (mil / "eval_metrics.jsonl").read_text(encoding="utf-8").splitlines()
        self.assertEqual(len(lines), 2)
        self.assertEqual(json.loads(lines[-1])["auc"], rows[-1]["auc"])
        self.assertEqual(len((mil / "metrics.jsonl").read_text(encoding="utf-8").splitlines()), 2)

        result = self.invoke("mask-sim", "--checkpoint", str(run / "checkpoint.prdl"), "--out", str(run))
        self.assertIn("operator,ResizedCrop,HorizontalFlip", result.output)
        csv_lines = (run / "mask_similarity.csv").read_text(encoding="utf-8").splitlines()
        self.assertEqual(len(csv_lines), 7)

        from_store = self.invoke("mask-sim", "--store", str(store))
        self.assertIn("Solarization", from_store.output)

    def test_train_mil_rerun_is_byte_identical(self):
        """Test repeated train-mil runs with one seed reproduce model and metrics bytes"""
        data, _, store = self.build_store()
        first = self.root / "mil_a"
        second = self.root / "mil_b"
        args = ["--store", str(store), "--data", str(data), "--seed", "4", "--aug", "prs"]

        self.invoke("train-mil", *args, "--out", str(first))
        metrics = (first / "metrics.jsonl").read_bytes()
        model = (first / "model.pmil").read_bytes()

        self.invoke("train-mil", *args, "--out", str(first))
        self.assertEqual((first / "metrics.jsonl").read_bytes(), metrics)
        self.assertEqual((first / "model.pmil").read_bytes(), model)

        self.invoke("train-mil", *args, "--out", str(second))
        self.assertEqual((second / "metrics.jsonl").read_bytes(), metrics)
        self.assertEqual((second / "model.pmil").read_bytes(), model)


if __name__ == "__main__":
    unittest.main()
