"""Frame-image import and clip previews with pillow."""

import logging
import pathlib

import numpy as np
from PIL import Image
from result import Err, Ok, Result

from darkformer.types import Domain, VideoClip

logger = logging.getLogger(__name__)

FRAME_SUFFIXES = (".png", ".jpg", ".jpeg")


def load_frame(path: pathlib.Path, height: int, width: int, channels: int) -> Result[np.ndarray, str]:
    """Read one image as [H, W, C] floats in [0, 1].

    Parameters:
    -----------
    path : pathlib.Path:
        PNG or JPEG file.

    height, width : int:
        Output size; the image is resized with bilinear filtering when it differs.

    channels : int:
        1 converts to grayscale, 3 to RGB.

    Returns:
    --------
        Result[np.ndarray, str]:
            Ok(frame) if the image could be read, Err(str) if not.
    """
    if channels not in (1, 3):
        return Err(f"channels must be 1 or 3, got {channels}")
    try:
        with Image.open(path) as im:
            im = im.convert("L" if channels == 1 else "RGB")
            if im.size != (width, height):
                im = im.resize((width, height), Image.Resampling.BILINEAR)
            pixels = np.asarray(im, dtype=np.float32) / 255.0
    except Exception as ex:
        return Err(f"Fail to open png or jpg file {path}: {ex}")
    return Ok(pixels.reshape(height, width, channels))


def frames_from_directory(
    directory: pathlib.Path, label: int, height: int, width: int, channels: int, domain: Domain = Domain.Source
) -> Result[VideoClip, str]:
    """Build a clip from the image files of a directory, ordered by file name."""
    if not directory.is_dir():
        return Err(f"{directory} is not a directory")
    paths = sorted(p for p in directory.iterdir() if p.suffix.lower() in FRAME_SUFFIXES)
    if not paths:
        return Err(f"no png or jpg frames in {directory}")
    frames = []
    for path in paths:
        match load_frame(path, height, width, channels):
            case Ok(frame):
                frames.append(frame)
            case Err(msg):
                return Err(msg)
    logger.info("read %d frames from %s", len(frames), directory)
    return Ok(VideoClip(frames=np.stack(frames), label=label, domain=domain))


def contact_sheet(clip: VideoClip, output_file: pathlib.Path, columns: int = 8) -> Result[str, str]:
    """Tile the frames of a clip row by row into one PNG image."""
    n, h, w, c = clip.frames.shape
    columns = max(1, min(columns, n))
    rows = -(-n // columns)
    sheet = np.zeros((rows * h, columns * w, c), dtype=np.uint8)
    pixels = np.clip(np.rint(clip.frames * 255.0), 0, 255).astype(np.uint8)
    for i in range(n):
        r, col = divmod(i, columns)
        sheet[r * h : (r + 1) * h, col * w : (col + 1) * w] = pixels[i]
    image = Image.fromarray(np.ascontiguousarray(sheet[..., 0]) if c == 1 else sheet)
    try:
        image.save(output_file, format="PNG")
    except Exception as ex:
        return Err(f"Can't write the file {output_file}: {ex}")
    return Ok(f'clip with {n} frames rendered to "{output_file}"')
