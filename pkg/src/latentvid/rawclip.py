"""Raw clip files: 16-byte header then little-endian float32 frames.

Header: four little-endian uint32 values ``MAGIC, H, W, L``. The body holds
``L`` frames, each ``H x W x 3`` in row-major order.
"""
import struct

import numpy as np

from .errors import IngestionError

MAGIC = 0x4C565243  # "LVRC" read as a little-endian integer
_HEADER = struct.Struct("<4I")


def write_raw_clip(path, video):
    """Write an ``(H, W, L, 3)`` video."""
    video = np.asarray(video, dtype=np.float32)
    if video.ndim != 4 or video.shape[3] != 3:
        raise ValueError(f"expected (H, W, L, 3), got {video.shape}")
    h, w, l, _ = video.shape
    frames = np.ascontiguousarray(np.transpose(video, (2, 0, 1, 3)), dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, h, w, l))
        fh.write(frames.tobytes())


def read_header(path):
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    if len(head) != _HEADER.size:
        raise IngestionError(f"truncated raw clip header: {path}")
    magic, h, w, l = _HEADER.unpack(head)
    if magic != MAGIC:
        raise IngestionError(f"bad raw clip magic in {path}: {magic:#x}")
    return h, w, l


def read_raw_clip(path):
    """Read back an ``(H, W, L, 3)`` float32 video."""
    h, w, l = read_header(path)
    body = np.fromfile(path, dtype="<f4", offset=_HEADER.size)
    if body.size != h * w * l * 3:
        raise IngestionError(f"raw clip {path} holds {body.size} values, header implies {h * w * l * 3}")
    return np.transpose(body.reshape(l, h, w, 3), (1, 2, 0, 3)).astype(np.float32)
