"""Tests for darkformer.cli_dktf module."""

import math
import pathlib
from unittest.mock import patch

import numpy as np
import pytest

from darkformer.cli import EXIT_NUMERIC, EXIT_USAGE, EXIT_VERIFICATION, staged_output
from darkformer.cli_dktf import main
from darkformer.config import RunConfig
from darkformer.losses import LossTerms
from darkformer.tensor import Tensor


def _run(*argv: str) -> None:
    with patch("sys.argv", ["dktf", *argv]):
        main()


def _exit_code(*argv: str) -> int | str | None:
    try:
        _run(*argv)
        raise AssertionError("Should have raised SystemExit")
    except SystemExit as e:
        return e.code


@pytest.fixture
def tiny_config(tmp_path: pathlib.Path) -> pathlib.Path:
    """Config file for the smallest useful run."""
    path = tmp_path / "tiny.txt"
    path.write_text(RunConfig.tiny().to_text())
    return path


@pytest.fixture
def dataset(tmp_path: pathlib.Path, tiny_config: pathlib.Path) -> pathlib.Path:
    """A generated tiny dataset directory."""
    out = tmp_path / "data"
    _run("gen-data", "-c", str(tiny_config), "-o", str(out))
    return out


@pytest.fixture
def run_dir(tmp_path: pathlib.Path, tiny_config: pathlib.Path, dataset: pathlib.Path) -> pathlib.Path:
    """A trained tiny run directory."""
    out = tmp_path / "run"
    _run("train", "-c", str(tiny_config), "-d", str(dataset), "-o", str(out))
    return out


class TestGenData:
    """Test cases for the gen-data command."""

    def test_writes_manifest_and_config(self, dataset: pathlib.Path) -> None:
        """Test the dataset directory layout."""
        assert (dataset / "manifest.txt").exists()
        assert (dataset / "config.txt").read_text() == RunConfig.tiny().to_text()
        assert len(list((dataset / "train" / "tgt").glob("*.dkvc"))) == 6

    def test_unknown_key(self, tmp_path: pathlib.Path, capsys: pytest.CaptureFixture[str]) -> None:
        """Test an unknown --set key is a usage error naming the key."""
        assert _exit_code("gen-data", "--set", "bogus=1", "-o", str(tmp_path / "d")) == EXIT_USAGE
        assert "bogus" in capsys.readouterr().err
        assert not (tmp_path / "d").exists()

    def test_malformed_set_flag(self, tmp_path: pathlib.Path) -> None:
        """Test --set without '='."""
        assert _exit_code("gen-data", "--set", "lr", "-o", str(tmp_path / "d")) == EXIT_USAGE


class TestTrain:
    """Test cases for the train command."""

    def test_outputs(self, run_dir: pathlib.Path) -> None:
        """Test checkpoint, metrics, confusion matrix and config echo are written."""
        for name in ("checkpoint.dktf", "metrics.csv", "confusion.csv", "config.txt"):
            assert (run_dir / name).exists(), name
        lines = (run_dir / "metrics.csv").read_text().splitlines()
        assert len(lines) == 2
        assert lines[0].startswith("epoch,lr,loss_total")
        assert lines[1].startswith("1,")

    def test_seed_flag_is_echoed(
        self,
        tmp_path: pathlib.Path,
        tiny_config: pathlib.Path,
        dataset: pathlib.Path,
        capsys: pytest.CaptureFixture[str],
    ) -> None:
        """Test --seed overrides the config file and the final accuracy is printed."""
        capsys.readouterr()
        out = tmp_path / "seeded"
        _run("train", "-c", str(tiny_config), "-d", str(dataset), "-o", str(out), "--seed", "9")
        assert "seed = 9\n" in (out / "config.txt").read_text()
        assert "target top1" in capsys.readouterr().out

    def test_non_finite_loss(self, tmp_path: pathlib.Path, tiny_config: pathlib.Path, dataset: pathlib.Path) -> None:
        """Test a NaN objective exits with the numeric failure code and leaves no output."""

        def broken(triple: object, labels: object, weights: object) -> tuple[Tensor, LossTerms]:
            return Tensor(math.nan), LossTerms(total=math.nan)

        out = tmp_path / "nan"
        with patch("darkformer.training.total_loss", broken), patch("sys.stderr"):
            code = _exit_code("train", "-c", str(tiny_config), "-d", str(dataset), "-o", str(out))
        assert code == EXIT_NUMERIC
        assert not out.exists()

    def test_rerun_is_byte_identical(
        self, tmp_path: pathlib.Path, tiny_config: pathlib.Path, dataset: pathlib.Path, run_dir: pathlib.Path
    ) -> None:
        """Test a second run with the same seed writes the same metrics and checkpoint bytes."""
        again = tmp_path / "again"
        _run("train", "-c", str(tiny_config), "-d", str(dataset), "-o", str(again))
        for name in ("metrics.csv", "checkpoint.dktf", "confusion.csv"):
            assert (again / name).read_bytes() == (run_dir / name).read_bytes(), name

    def test_missing_dataset(self, tmp_path: pathlib.Path, tiny_config: pathlib.Path) -> None:
        """Test a missing dataset directory."""
        code = _exit_code("train", "-c", str(tiny_config), "-d", str(tmp_path / "none"), "-o", str(tmp_path / "r"))
        assert code == EXIT_USAGE

    def test_missing_data_argument(self, tmp_path: pathlib.Path) -> None:
        """Test argparse rejects a missing --data."""
        with patch("sys.stderr"):
            assert _exit_code("train", "-o", str(tmp_path / "r")) == 2


class TestEval:
    """Test cases for the eval command."""

    def test_target_split(
        self, run_dir: pathlib.Path, dataset: pathlib.Path, capsys: pytest.CaptureFixture[str]
    ) -> None:
        """Test evaluation prints top-1 and writes a confusion matrix next to the checkpoint."""
        _run("eval", "-k", str(run_dir / "checkpoint.dktf"), "-d", str(dataset))
        assert "top1 = " in capsys.readouterr().out
        lines = (run_dir / "eval-tgt" / "confusion.csv").read_text().splitlines()
        assert lines[0] == "true\\pred,0,1,2"
        assert sum(int(v) for line in lines[1:] for v in line.split(",")[1:]) == 6

    def test_bad_checkpoint(self, tmp_path: pathlib.Path, dataset: pathlib.Path) -> None:
        """Test a file that is not a checkpoint."""
        bogus = tmp_path / "bogus.dktf"
        bogus.write_bytes(b"not a checkpoint")
        with patch("sys.stderr"):
            assert _exit_code("eval", "-k", str(bogus), "-d", str(dataset)) == EXIT_USAGE


class TestExportAttn:
    """Test cases for the export-attn command."""

    def test_exports(self, tmp_path: pathlib.Path, run_dir: pathlib.Path, dataset: pathlib.Path) -> None:
        """Test per-branch, per-layer, per-head maps, features and the summary."""
        out = tmp_path / "attn"
        source = dataset / "test" / "src" / "00_00000.dkvc"
        target = dataset / "test" / "tgt" / "00_00000.dkvc"
        _run("export-attn", "-k", str(run_dir / "checkpoint.dktf"), "--clip", str(source), str(target), "-o", str(out))
        assert len(list(out.glob("attn_*.csv"))) == 3 * 2 * 2
        rows = (out / "attn_source_l0_h0.csv").read_text().splitlines()
        assert rows[0].split(",")[:3] == ["pass", "query", "k0"]
        assert len(rows) == 1 + 2 * 13
        weights = np.array([float(v) for v in rows[1].split(",")[2:]])
        assert weights.sum() == pytest.approx(1.0)
        assert len((out / "attn_bridge_l1_h1.csv").read_text().splitlines()) == 1 + 13
        features = (out / "features.csv").read_text().splitlines()
        assert [line.split(",")[0] for line in features[1:]] == ["source", "target", "bridge"]
        summary = (out / "summary.csv").read_text()
        assert "cosine_source_target" in summary


class TestAblate:
    """Test cases for the ablate command."""

    def test_grid(self, tmp_path: pathlib.Path, tiny_config: pathlib.Path) -> None:
        """Test one CSV row per cell with a generated dataset."""
        grid = tmp_path / "grid.txt"
        grid.write_text("cross_attention = on, off\n")
        out = tmp_path / "ablation"
        _run("ablate", "-c", str(tiny_config), "--set", "ablation_seeds=1", "-g", str(grid), "-o", str(out))
        lines = (out / "ablation.csv").read_text().splitlines()
        assert lines[0].startswith("cross_attention,seeds,")
        assert len(lines) == 3
        assert (out / "grid.txt").read_text() == grid.read_text()

    def test_frame_sweep_generates_long_enough_clips(self, tmp_path: pathlib.Path, tiny_config: pathlib.Path) -> None:
        """Test a grid over frame counts trains every cell."""
        grid = tmp_path / "grid.txt"
        grid.write_text("frames = 2, 4\n")
        out = tmp_path / "frames"
        _run("ablate", "-c", str(tiny_config), "--set", "ablation_seeds=1", "-g", str(grid), "-o", str(out))
        assert len((out / "ablation.csv").read_text().splitlines()) == 3

    def test_bad_grid(self, tmp_path: pathlib.Path, tiny_config: pathlib.Path) -> None:
        """Test an unknown grid key leaves no output."""
        grid = tmp_path / "grid.txt"
        grid.write_text("nonsense = 1, 2\n")
        out = tmp_path / "bad"
        with patch("sys.stderr"):
            assert _exit_code("ablate", "-c", str(tiny_config), "-g", str(grid), "-o", str(out)) == EXIT_USAGE
        assert not out.exists()


class TestGradcheck:
    """Test cases for the gradcheck command."""

    def test_passes(self, capsys: pytest.CaptureFixture[str]) -> None:
        """Test the suite passes on the tiny configuration."""
        _run("gradcheck")
        out = capsys.readouterr().out
        assert "total_loss" in out
        assert "FAIL" not in out

    def test_corrupted_backward_fails(self) -> None:
        """Test a wrong GELU derivative is caught with the verification exit code."""
        with patch("darkformer.tensor._gelu_grad", lambda x: np.ones_like(x)), patch("sys.stderr"), patch("sys.stdout"):
            assert _exit_code("gradcheck") == EXIT_VERIFICATION


class TestVersion:
    """Test cases for --version."""

    def test_version(self) -> None:
        """Test --version exits normally."""
        with patch("importlib.metadata.version", return_value="1.0.0"), patch("sys.stdout"):
            assert _exit_code("--version") == 0


class TestStagedOutput:
    """Test cases for staged_output."""

    def test_success_moves_files(self, tmp_path: pathlib.Path) -> None:
        """Test files appear in the target directory and the scratch directory is gone."""
        out = tmp_path / "out"
        with staged_output(out) as scratch:
            (scratch / "a.txt").write_text("a")
        assert (out / "a.txt").read_text() == "a"
        assert [p.name for p in tmp_path.iterdir()] == ["out"]

    def test_replaces_existing_files(self, tmp_path: pathlib.Path) -> None:
        """Test an existing output directory keeps unrelated files and gets new ones."""
        out = tmp_path / "out"
        out.mkdir()
        (out / "keep.txt").write_text("keep")
        (out / "a.txt").write_text("old")
        with staged_output(out) as scratch:
            (scratch / "a.txt").write_text("new")
        assert (out / "a.txt").read_text() == "new"
        assert (out / "keep.txt").exists()

    def test_failure_leaves_nothing(self, tmp_path: pathlib.Path) -> None:
        """Test an exception discards the staged files."""
        out = tmp_path / "out"
        with pytest.raises(RuntimeError), staged_output(out) as scratch:
            (scratch / "partial.txt").write_text("x")
            raise RuntimeError("boom")
        assert list(tmp_path.iterdir()) == []
