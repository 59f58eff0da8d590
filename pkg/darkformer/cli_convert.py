"""Command line interface for converting between frame images and DKVC clips.

A directory of PNG/JPEG frames becomes a DKVC clip; a DKVC clip becomes a PNG contact sheet.
"""

import argparse
import importlib.metadata
import pathlib

from result import Err, Ok

from darkformer import clipfile, image
from darkformer.cli import exit_with_error
from darkformer.types import Domain


def main() -> None:
    """A command line interface to import frame images as a clip or preview a clip as a png.

    Parameters:
    -----------
        None

    Returns:
    --------
        None
    """
    parser = argparse.ArgumentParser()
    parser.add_argument(
        "-i",
        "--input",
        required=True,
        type=pathlib.Path,
        help="Directory of PNG/JPG frames to import, or a .dkvc clip to render",
    )
    parser.add_argument(
        "-o",
        "--output",
        required=True,
        type=pathlib.Path,
        help="Output .dkvc clip (when importing) or .png contact sheet (when rendering)",
    )
    parser.add_argument("--label", type=int, default=0, help="Class label of the imported clip")
    parser.add_argument("--classes", type=int, default=8, help="Class count K written into the clip header")
    parser.add_argument("--height", type=int, default=32, help="Frame height after resizing")
    parser.add_argument("--width", type=int, default=32, help="Frame width after resizing")
    parser.add_argument("--channels", type=int, choices=(1, 3), default=1, help="1 for grayscale, 3 for RGB")
    parser.add_argument("--columns", type=int, default=8, help="Frames per row of the contact sheet")
    parser.add_argument(
        "--version",
        action="version",
        version="%(prog)s {version}".format(version=importlib.metadata.version("darkformer")),
    )
    args = parser.parse_args()

    if args.input.suffix.lower() == ".dkvc":
        match clipfile.read_clip(args.input):
            case Ok((clip, _)):
                pass
            case Err(msg):
                exit_with_error(msg)
                return
        match image.contact_sheet(clip, args.output, args.columns):
            case Ok(msg):
                print(msg)
            case Err(msg):
                exit_with_error(msg)
        return

    if not 0 <= args.label < args.classes:
        exit_with_error(f"--label {args.label} is outside [0, {args.classes})")
        return
    match image.frames_from_directory(args.input, args.label, args.height, args.width, args.channels, Domain.Source):
        case Ok(clip):
            pass
        case Err(msg):
            exit_with_error(msg)
            return
    match clipfile.write_clip(args.output, clip, args.classes):
        case Ok(_):
            print(f'{clip.num_frames} frames from "{args.input}" converted to clip "{args.output}"')
        case Err(msg):
            exit_with_error(msg)


if __name__ == "__main__":
    main()
