"""Video datasets: procedurally animated shapes and frame-folder ingestion.

Videos are exposed as ``(H, W, L, 3)`` float32 arrays with values in
``[-1, 1]`` (the channel-last layout used at the package boundary). Models use
``(B, 3, L, H, W)`` tensors; see :func:`to_model_layout`.
"""
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, IngestionError
from .kernels import DIAMOND, DISK, SQUARE, bounce_positions, rasterize_shapes

SOURCES = ("synthetic-shapes", "frame-folder")


@dataclass(frozen=True)
class DatasetSpec:
    source: str = "synthetic-shapes"
    clip_length: int = 16
    frame_stride: int = 1
    resolution: tuple = (32, 32)
    seed: int = 0
    num_videos: int = 256
    video_length: int = 64
    path: str = None

    def __post_init__(self):
        object.__setattr__(self, "resolution", tuple(int(r) for r in self.resolution))
        if self.source not in SOURCES:
            raise ConfigError(f"unknown dataset source {self.source!r}")
        if self.clip_length < 2:
            raise ConfigError(f"clip_length must be >= 2, got {self.clip_length}")
        if self.frame_stride < 1:
            raise ConfigError(f"frame_stride must be >= 1, got {self.frame_stride}")
        if len(self.resolution) != 2 or min(self.resolution) < 1:
            raise ConfigError(f"bad resolution {self.resolution}")

    @property
    def span(self):
        """Source frames covered by one clip."""
        return self.clip_length * self.frame_stride


def to_model_layout(video):
    """``(H, W, L, C)`` or ``(B, H, W, L, C)`` -> ``(B, C, L, H, W)``."""
    import torch

    x = torch.as_tensor(np.asarray(video) if not torch.is_tensor(video) else video)
    if x.ndim == 4:
        x = x.unsqueeze(0)
    if x.ndim != 5:
        raise ValueError(f"expected a 4-D or 5-D video, got shape {tuple(x.shape)}")
    return x.permute(0, 4, 3, 1, 2).contiguous()


def from_model_layout(x):
    """``(B, C, L, H, W)`` tensor -> ``(B, H, W, L, C)`` numpy array."""
    return x.detach().permute(0, 3, 4, 2, 1).cpu().numpy()


@dataclass(frozen=True)
class ShapeTrack:
    kind: int
    radius: float
    color: np.ndarray
    x: np.ndarray
    y: np.ndarray
    vx: np.ndarray
    vy: np.ndarray


class MovingShapes:
    """Deterministic bouncing-shape videos.

    Video ``i`` is a pure function of ``(spec.seed, i)``: 2-4 shapes (disk,
    square or diamond) with random colors, radii, start positions and constant
    speeds, reflecting off the frame borders. Frames are rendered on demand,
    so only the frames a clip actually needs are rasterized.
    """

    def __init__(self, spec):
        if spec.source != "synthetic-shapes":
            raise ConfigError("MovingShapes needs source='synthetic-shapes'")
        h, w = spec.resolution
        if h < 16 or w < 16:
            raise ConfigError(f"synthetic resolution must be at least 16x16, got {h}x{w}")
        if spec.num_videos < 1:
            raise ConfigError("num_videos must be >= 1")
        if spec.video_length < spec.span:
            raise ConfigError(
                f"video_length {spec.video_length} shorter than clip span {spec.span}"
            )
        self.spec = spec
        self._params = {}

    def __len__(self):
        return self.spec.num_videos

    def video_length(self, index):
        return self.spec.video_length

    def _shape_params(self, index):
        if index in self._params:
            return self._params[index]
        if not 0 <= index < len(self):
            raise IndexError(index)
        h, w = self.spec.resolution
        rng = np.random.default_rng([self.spec.seed, index])
        n = int(rng.integers(2, 5))
        small = min(h, w)
        params = []
        for _ in range(n):
            kind = int(rng.choice([DISK, SQUARE, DIAMOND]))
            radius = float(rng.uniform(0.08, 0.18) * small)
            color = rng.uniform(-0.6, 1.0, size=3)
            x0 = float(rng.uniform(radius, w - 1 - radius))
            y0 = float(rng.uniform(radius, h - 1 - radius))
            speed = float(rng.uniform(0.04, 0.1) * small)
            angle = float(rng.uniform(0.0, 2 * np.pi))
            params.append((kind, radius, color, x0, y0, speed * np.cos(angle), speed * np.sin(angle)))
        self._params[index] = params
        return params

    def trajectory(self, index, n_frames=None):
        """Per-shape center and velocity log for the first ``n_frames`` frames."""
        h, w = self.spec.resolution
        n_frames = self.spec.video_length if n_frames is None else n_frames
        tracks = []
        for kind, radius, color, x0, y0, vx, vy in self._shape_params(index):
            x, vxs = bounce_positions(x0, vx, radius, w - 1 - radius, n_frames)
            y, vys = bounce_positions(y0, vy, radius, h - 1 - radius, n_frames)
            tracks.append(ShapeTrack(kind, radius, color, x, y, vxs, vys))
        return tracks

    def frames(self, index, frame_indices):
        frame_indices = np.asarray(frame_indices, dtype=np.int64)
        if frame_indices.size and (frame_indices.min() < 0 or frame_indices.max() >= self.spec.video_length):
            raise IndexError("frame index outside the video")
        h, w = self.spec.resolution
        n_needed = int(frame_indices.max()) + 1 if frame_indices.size else 0
        tracks = self.trajectory(index, n_needed)
        centers = np.stack(
            [np.stack([t.x[frame_indices], t.y[frame_indices]], axis=-1) for t in tracks]
        )
        radii = np.array([t.radius for t in tracks])
        kinds = np.array([t.kind for t in tracks])
        colors = np.stack([t.color for t in tracks])
        background = np.full(3, -1.0)
        return rasterize_shapes(centers, radii, kinds, colors, background, h, w)

    def video(self, index):
        return self.frames(index, np.arange(self.spec.video_length))


def make_moving_shapes(spec):
    return MovingShapes(spec)


_NUM = re.compile(r"(\d+)")
_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}


def _frame_key(path):
    m = _NUM.search(path.stem)
    if m is None:
        raise IngestionError(f"frame file without a frame number: {path}")
    return int(m.group(1))


def pixels_to_unit(values):
    """Map 8-bit pixel values to ``[-1, 1]`` via ``v -> 2 v / 255 - 1``."""
    return np.asarray(values, dtype=np.float32) * np.float32(2.0 / 255.0) - np.float32(1.0)


class VideoDirDataset:
    """Frame-folder videos laid out as ``<root>/<video_id>/<frame_number>.png``.

    Frames are decoded lazily. Videos shorter than ``clip_length * frame_stride``
    are skipped with a warning.
    """

    def __init__(self, path, spec):
        root = Path(path)
        if not root.is_dir():
            raise IngestionError(f"dataset directory not found: {root}")
        self.spec = spec
        self.root = root
        self.videos = []
        for sub in sorted(p for p in root.iterdir() if p.is_dir()):
            files = [p for p in sub.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES]
            files.sort(key=_frame_key)
            if len(files) < spec.span:
                warnings.warn(
                    f"skipping video {sub.name}: {len(files)} frames < "
                    f"clip_length*frame_stride = {spec.span}"
                )
                continue
            self.videos.append((sub.name, files))

    def __len__(self):
        return len(self.videos)

    def video_length(self, index):
        return len(self.videos[index][1])

    def _read(self, path):
        from PIL import Image

        try:
            with Image.open(path) as im:
                arr = np.asarray(im.convert("RGB"))
        except Exception as exc:
            raise IngestionError(f"cannot decode frame {path}: {exc}") from exc
        h, w = self.spec.resolution
        if arr.shape[:2] != (h, w):
            raise IngestionError(
                f"frame {path} has size {arr.shape[1]}x{arr.shape[0]}, expected {w}x{h}"
            )
        return pixels_to_unit(arr)

    def frames(self, index, frame_indices):
        files = self.videos[index][1]
        frames = [self._read(files[int(i)]) for i in frame_indices]
        return np.stack(frames, axis=2)

    def video(self, index):
        return self.frames(index, np.arange(self.video_length(index)))


def load_video_dir(path, spec):
    return VideoDirDataset(path, spec)


def make_dataset(spec):
    if spec.source == "synthetic-shapes":
        return MovingShapes(spec)
    if spec.path is None:
        raise ConfigError("frame-folder dataset needs a path")
    return VideoDirDataset(spec.path, spec)


def clip_indices(start, clip_length, frame_stride):
    return start + frame_stride * np.arange(clip_length)


def draw_clip_location(dataset, rng):
    """Draw ``(video_index, start)`` uniformly: video first, then start frame."""
    spec = dataset.spec
    video = int(rng.integers(len(dataset)))
    n_starts = dataset.video_length(video) - spec.span + 1
    start = int(rng.integers(n_starts))
    return video, start


def sample_clip(dataset, rng):
    """A ``(H, W, clip_length, 3)`` clip keeping every ``frame_stride``-th frame."""
    spec = dataset.spec
    video, start = draw_clip_location(dataset, rng)
    return dataset.frames(video, clip_indices(start, spec.clip_length, spec.frame_stride))


def sample_batch(dataset, rng, batch_size):
    return np.stack([sample_clip(dataset, rng) for _ in range(batch_size)])
