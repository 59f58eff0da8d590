"""Command line interface utilities shared by the darkformer commands."""

import contextlib
import pathlib
import shutil
import sys
import tempfile
from collections.abc import Iterator

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VERIFICATION = 2
EXIT_NUMERIC = 3


def exit_with_error(msg: str, exit_code: int = EXIT_USAGE) -> None:
    """A function that prints an error message to the stderr and exits the program with a specified exit code.

    Parameters:
    -----------
        msg: str
            The error message to be printed.
        exit_code: int, optional
            The exit code to be used when exiting the program, defaults to 1.

    Returns:
    --------
        None
    """
    print(msg, file=sys.stderr)
    sys.exit(exit_code)


@contextlib.contextmanager
def staged_output(out: pathlib.Path) -> Iterator[pathlib.Path]:
    """Yield a scratch directory next to out and move its files into out on success.

    When the block raises (including SystemExit), the scratch directory is removed and
    out is left untouched.
    """
    out = out.resolve()
    out.parent.mkdir(parents=True, exist_ok=True)
    scratch = pathlib.Path(tempfile.mkdtemp(prefix=f".{out.name}-", dir=out.parent))
    try:
        yield scratch
    except BaseException:
        shutil.rmtree(scratch, ignore_errors=True)
        raise
    if not out.exists():
        scratch.rename(out)
        return
    for item in scratch.iterdir():
        target = out / item.name
        if target.is_dir():
            shutil.rmtree(target)
        elif target.exists():
            target.unlink()
        shutil.move(str(item), target)
    scratch.rmdir()
