"""DKVC clip files and the dataset manifest.

Clip layout, all little endian::

    b"DKVC"            magic
    u32                format version (1)
    u64 x 5            K (class count), N (frames), H, W, C
    i64                label
    f32 x N·H·W·C      pixels in [0, 1], frame-major, row-major, channels last

The manifest ``manifest.txt`` holds one line per clip: ``<relative path> <src|tgt> <label>``.
Datasets are laid out as ``train/src``, ``train/tgt``, ``test/src`` and ``test/tgt``.
"""

import logging
import pathlib
import struct

import numpy as np
from result import Err, Ok, Result

from darkformer.synth import PairedDataset
from darkformer.types import Domain, VideoClip

logger = logging.getLogger(__name__)

MAGIC = b"DKVC"
VERSION = 1
MANIFEST = "manifest.txt"
_HEADER = struct.Struct("<4sI5Qq")


def encode_clip(clip: VideoClip, num_classes: int) -> bytes:
    """Serialize a clip to DKVC bytes."""
    frames = np.asarray(clip.frames)
    if frames.ndim != 4:
        raise ValueError(f"clip frames must be [N, H, W, C], got {frames.shape}")
    header = _HEADER.pack(MAGIC, VERSION, num_classes, *frames.shape, clip.label)
    return header + np.ascontiguousarray(frames, dtype="<f4").tobytes()


def decode_clip(data: bytes, domain: Domain = Domain.Source) -> Result[tuple[VideoClip, int], str]:
    """Parse DKVC bytes.

    Returns:
    --------
        Result[tuple[VideoClip, int], str]:
            Ok((clip, K)) on success, Err(str) describing the first problem otherwise.
    """
    if len(data) < _HEADER.size:
        return Err(f"clip is truncated: {len(data)} bytes, header needs {_HEADER.size}")
    magic, version, k, n, h, w, c, label = _HEADER.unpack_from(data)
    if magic != MAGIC:
        return Err(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        return Err(f"unsupported clip version {version}")
    if not 0 <= label < k:
        return Err(f"label {label} outside [0, {k})")
    count = n * h * w * c
    payload = data[_HEADER.size :]
    if len(payload) != 4 * count:
        return Err(f"clip payload is {len(payload)} bytes, expected {4 * count} for {n}x{h}x{w}x{c}")
    frames = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(n, h, w, c)
    if not np.all((frames >= 0.0) & (frames <= 1.0)):
        return Err("clip pixels must lie in [0, 1]")
    return Ok((VideoClip(frames=frames, label=int(label), domain=domain), int(k)))


def write_clip(path: pathlib.Path, clip: VideoClip, num_classes: int) -> Result[str, str]:
    """Write one clip file, creating parent directories."""
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_clip(clip, num_classes))
    except (OSError, ValueError) as ex:
        return Err(f"Can't write clip {path}: {ex}")
    return Ok(f"wrote {path}")


def read_clip(path: pathlib.Path, domain: Domain = Domain.Source) -> Result[tuple[VideoClip, int], str]:
    """Read one clip file; see decode_clip."""
    try:
        data = path.read_bytes()
    except OSError as ex:
        return Err(f"Can't read clip {path}: {ex}")
    match decode_clip(data, domain):
        case Ok(value):
            return Ok(value)
        case Err(msg):
            return Err(f"{path}: {msg}")
    raise AssertionError("unreachable")


def parse_manifest(text: str) -> Result[list[tuple[str, Domain, int]], str]:
    """Parse manifest lines into (relative path, domain, label) entries."""
    entries = []
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            return Err(f"manifest line {number}: expected '<path> <src|tgt> <label>', got {line!r}")
        try:
            entries.append((parts[0], Domain.from_string(parts[1]), int(parts[2])))
        except ValueError as ex:
            return Err(f"manifest line {number}: {ex}")
    return Ok(entries)


def save_dataset(dataset: PairedDataset, root: pathlib.Path) -> Result[int, str]:
    """Write every clip and the manifest under root.

    Returns:
    --------
        Result[int, str]:
            Ok(number of clips written), Err(str) on the first failure.
    """
    lines = []
    for split, clips in dataset.splits().items():
        for i, clip in enumerate(clips):
            rel = f"{split}/{clip.label:02d}_{i:05d}.dkvc"
            if (res := write_clip(root / rel, clip, dataset.num_classes)).is_err():
                return Err(res.unwrap_err())
            lines.append(f"{rel} {clip.domain.tag} {clip.label}\n")
    try:
        (root / MANIFEST).write_text("".join(lines))
    except OSError as ex:
        return Err(f"Can't write manifest in {root}: {ex}")
    logger.info("saved %d clips to %s", len(lines), root)
    return Ok(len(lines))


def load_dataset(root: pathlib.Path) -> Result[PairedDataset, str]:
    """Read a dataset written by save_dataset (or laid out the same way by hand).

    Clips are assigned to splits by their first path component ('train' or 'test')
    and to domains by the manifest tag.
    """
    try:
        text = (root / MANIFEST).read_text()
    except OSError as ex:
        return Err(f"Can't read manifest in {root}: {ex}")
    match parse_manifest(text):
        case Ok(entries):
            pass
        case Err(msg):
            return Err(msg)
    if not entries:
        return Err(f"manifest in {root} lists no clips")
    dataset: PairedDataset | None = None
    for rel, domain, label in entries:
        split = pathlib.PurePosixPath(rel).parts[0]
        if split not in ("train", "test"):
            return Err(f"{rel}: first path component must be 'train' or 'test'")
        match read_clip(root / rel, domain):
            case Ok((clip, k)):
                pass
            case Err(msg):
                return Err(msg)
        if clip.label != label:
            return Err(f"{rel}: manifest label {label} differs from clip label {clip.label}")
        if dataset is None:
            dataset = PairedDataset(num_classes=k)
        elif k != dataset.num_classes:
            return Err(f"{rel}: class count {k} differs from {dataset.num_classes}")
        dataset.splits()[f"{split}/{domain.tag}"].append(clip)
    assert dataset is not None
    logger.info("loaded %d clips from %s", len(entries), root)
    return Ok(dataset)
