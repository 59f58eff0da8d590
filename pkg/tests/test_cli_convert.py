"""Tests for darkformer.cli_convert module."""

import pathlib
from unittest.mock import patch

import numpy as np
from PIL import Image
from result import Err

from darkformer.cli_convert import main
from darkformer.clipfile import read_clip


def _frames(directory: pathlib.Path, count: int = 3) -> pathlib.Path:
    directory.mkdir()
    for i in range(count):
        Image.new("L", (4, 4), 60 * i).save(directory / f"{i:02d}.png")
    return directory


class TestMain:
    """Test cases for the main function."""

    def test_import_directory(self, tmp_path: pathlib.Path) -> None:
        """Test a frame directory becomes a clip with the requested label and size."""
        frames = _frames(tmp_path / "frames")
        out = tmp_path / "clip.dkvc"
        test_args = ["dktf-convert", "-i", str(frames), "-o", str(out), "--label", "2", "--classes", "3",
                     "--height", "4", "--width", "4"]

        with patch("sys.argv", test_args), patch("builtins.print") as mock_print:
            main()

        clip, k = read_clip(out).unwrap()
        assert (clip.label, k) == (2, 3)
        assert clip.frames.shape == (3, 4, 4, 1)
        np.testing.assert_allclose(clip.frames[2], 120 / 255, atol=1e-6)
        mock_print.assert_called_once()

    def test_render_contact_sheet(self, tmp_path: pathlib.Path) -> None:
        """Test a clip renders to a PNG."""
        frames = _frames(tmp_path / "frames")
        clip_path = tmp_path / "clip.dkvc"
        sheet = tmp_path / "sheet.png"
        with patch("sys.argv", ["dktf-convert", "-i", str(frames), "-o", str(clip_path), "--height", "4",
                                "--width", "4"]), patch("builtins.print"):
            main()
        with patch("sys.argv", ["dktf-convert", "-i", str(clip_path), "-o", str(sheet)]), patch("builtins.print"):
            main()
        with Image.open(sheet) as im:
            assert im.size == (12, 4)

    def test_label_out_of_range(self, tmp_path: pathlib.Path) -> None:
        """Test a label not below the class count."""
        test_args = ["dktf-convert", "-i", str(tmp_path), "-o", str(tmp_path / "x.dkvc"), "--label", "8"]

        with patch("sys.argv", test_args), patch("sys.stderr"):
            try:
                main()
                raise AssertionError("Should have raised SystemExit")
            except SystemExit as e:
                assert e.code == 1

    def test_conversion_failure(self, tmp_path: pathlib.Path) -> None:
        """Test a failed import exits with an error."""
        test_args = ["dktf-convert", "-i", str(tmp_path), "-o", str(tmp_path / "x.dkvc")]

        with (
            patch("sys.argv", test_args),
            patch("darkformer.image.frames_from_directory", return_value=Err("no frames")),
            patch("sys.stderr"),
        ):
            try:
                main()
                raise AssertionError("Should have raised SystemExit")
            except SystemExit as e:
                assert e.code == 1

    def test_bad_clip(self, tmp_path: pathlib.Path) -> None:
        """Test rendering a file that is not a clip."""
        bogus = tmp_path / "bogus.dkvc"
        bogus.write_bytes(b"nope")
        with patch("sys.argv", ["dktf-convert", "-i", str(bogus), "-o", str(tmp_path / "s.png")]), patch("sys.stderr"):
            try:
                main()
                raise AssertionError("Should have raised SystemExit")
            except SystemExit as e:
                assert e.code == 1

    def test_main_missing_input_argument(self) -> None:
        """Test error handling when input argument is missing."""
        test_args = ["dktf-convert", "-o", "output.dkvc"]

        with patch("sys.argv", test_args), patch("sys.stderr"):  # Suppress argparse error output
            try:
                main()
                raise AssertionError("Should have raised SystemExit")
            except SystemExit as e:
                assert e.code == 2  # argparse error code

    def test_main_version_argument(self) -> None:
        """Test version argument displays version information."""
        test_args = ["dktf-convert", "--version"]

        with (
            patch("sys.argv", test_args),
            patch("importlib.metadata.version", return_value="1.0.0"),
            patch("sys.stdout"),
        ):
            try:
                main()
                raise AssertionError("Should have raised SystemExit")
            except SystemExit as e:
                assert e.code == 0
