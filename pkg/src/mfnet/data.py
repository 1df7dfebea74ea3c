"""Synthetic symmetric-gesture clips, frame-folder I/O, and augmentation.

The generator renders a single bright square on a dark background running
one of six motion programs. Classes come in temporally symmetric pairs:
reversing the frame order of any clip yields a valid clip of the paired
class. Frames are quantized to the 8-bit grid so the PNG export round-trips
pixel-identically.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

CLASS_NAMES = ("swipe_right", "swipe_left", "swipe_down", "swipe_up", "grow", "shrink")
# relabeling under frame reversal: each class maps to its temporal twin
REVERSAL_PAIR = {0: 1, 1: 0, 2: 3, 3: 2, 4: 5, 5: 4}
# classes 0, 2, 4 are rendered forward; their twins are the reversed frames
_CANONICAL = {0: (0, False), 1: (0, True), 2: (2, False), 3: (2, True),
              4: (4, False), 5: (4, True)}


class GenerationError(RuntimeError):
    """Raised when a motion program cannot be placed on the canvas."""


@dataclass
class VideoSample:
    """Decoded clip: frames are (T, 3, H, W) float32 in [0, 1].

    Frames are held as uint8 internally (8-bit grid) and decoded lazily for
    folder-backed samples; frame counts never require a full decode.
    """

    label: int
    clip_id: str
    _frames: np.ndarray = None
    _paths: list = None

    @property
    def frames(self):
        if self._frames is None:
            decoded = [_read_frame(p) for p in self._paths]
            self._frames = np.stack(decoded)
        if self._frames.dtype == np.uint8:
            return self._frames.astype(np.float32) / np.float32(255.0)
        return self._frames

    @property
    def num_frames(self):
        if self._frames is not None:
            return self._frames.shape[0]
        return len(self._paths)


@dataclass
class SyntheticSpec:
    image_size: tuple = (64, 64)
    num_frames: int = 16
    noise_std: float = 0.02
    rng_seed: int = 0
    speed_range: tuple = (1.0, 2.0)       # pixels per frame
    size_range: tuple = (10, 16)          # square side in pixels
    intensity_range: tuple = (0.6, 1.0)


@dataclass
class AugmentSpec:
    scales: tuple = (1.0, 0.875, 0.75, 0.625)
    crop_size: tuple = (64, 64)
    horizontal_flip: bool = False


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------

def _render_square(canvas_hw, x, y, side, intensity, channel, dtype=np.float32):
    H, W = canvas_hw
    frame = np.zeros((3, H, W), dtype=dtype)
    x0, y0 = int(round(x)), int(round(y))
    frame[channel, y0 : y0 + side, x0 : x0 + side] = intensity
    return frame


def _canonical_trajectory(canonical_cls, spec, rng, max_tries=50):
    """Per-frame (x, y, side) for the forward member of a symmetric pair."""
    H, W = spec.image_size
    T = spec.num_frames
    for _ in range(max_tries):
        side = int(rng.integers(spec.size_range[0], spec.size_range[1] + 1))
        speed = rng.uniform(*spec.speed_range)
        travel = speed * (T - 1)
        if canonical_cls == 0:      # swipe_right: x increases
            if W - side - travel < 1:
                continue
            x0 = rng.uniform(0, W - side - travel)
            y0 = rng.uniform(0, H - side)
            return [(x0 + speed * t, y0, side) for t in range(T)]
        if canonical_cls == 2:      # swipe_down: y increases
            if H - side - travel < 1:
                continue
            x0 = rng.uniform(0, W - side)
            y0 = rng.uniform(0, H - side - travel)
            return [(x0, y0 + speed * t, side) for t in range(T)]
        # grow: side increases, centre fixed
        grow = rng.uniform(0.5, 1.0)
        final = side + grow * (T - 1)
        cx = rng.uniform(final / 2 + 1, W - final / 2 - 1)
        cy = rng.uniform(final / 2 + 1, H - final / 2 - 1)
        if cx <= final / 2 or cx >= W - final / 2:
            continue
        traj = []
        for t in range(T):
            s = int(round(side + grow * t))
            traj.append((cx - s / 2, cy - s / 2, s))
        return traj
    raise GenerationError(f"could not place motion program for class {canonical_cls}")


def make_clip(class_idx, clip_rng, spec):
    """Render one clip deterministically from its own random stream."""
    canonical_cls, reverse = _CANONICAL[class_idx]
    traj = _canonical_trajectory(canonical_cls, spec, clip_rng)
    intensity = clip_rng.uniform(*spec.intensity_range)
    # each reversal pair gets its own colour channel, so the pair *group* is
    # readable from any single frame while the pair members stay identical
    # up to frame order
    channel = canonical_cls // 2
    frames = []
    for x, y, side in traj:
        frame = _render_square(spec.image_size, x, y, side, intensity, channel)
        if spec.noise_std > 0:
            frame = frame + clip_rng.normal(0, spec.noise_std, frame.shape)
        frames.append(np.clip(frame, 0.0, 1.0))
    clip = np.stack(frames)
    clip = np.round(clip * 255.0).astype(np.uint8)  # 8-bit grid, PNG-exact
    if reverse:
        clip = clip[::-1].copy()
    return clip.astype(np.float32) / np.float32(255.0)


def generate_synthetic(spec, count_per_class):
    """Class-balanced dataset; deterministic per (rng_seed, class, index)."""
    if count_per_class < 1:
        raise ValueError("count_per_class must be >= 1")
    samples = []
    for cls in range(len(CLASS_NAMES)):
        for i in range(count_per_class):
            ss = np.random.SeedSequence([spec.rng_seed, cls, i])
            clip = make_clip(cls, np.random.default_rng(ss), spec)
            stored = np.round(clip * 255.0).astype(np.uint8)
            clip_id = f"{CLASS_NAMES[cls]}_{i:05d}"
            samples.append(VideoSample(label=cls, clip_id=clip_id, _frames=stored))
    return samples


def split_by_id_hash(samples, eval_per_class):
    """Deterministic per-class split: clips sorted by id hash, tail is eval."""
    by_class = {}
    for s in samples:
        by_class.setdefault(s.label, []).append(s)
    train, evals = [], []
    for cls in sorted(by_class):
        group = sorted(
            by_class[cls],
            key=lambda s: hashlib.md5(s.clip_id.encode()).hexdigest(),
        )
        if eval_per_class > len(group):
            raise ValueError("eval_per_class exceeds clips available")
        cut = len(group) - eval_per_class
        train.extend(group[:cut])
        evals.extend(group[cut:])
    train.sort(key=lambda s: s.clip_id)
    evals.sort(key=lambda s: s.clip_id)
    return train, evals


# ---------------------------------------------------------------------------
# frame-folder layout
# ---------------------------------------------------------------------------

def _read_frame(path):
    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.uint8)
    return img.transpose(2, 0, 1)


def export_frame_folders(samples, root):
    """Write `<root>/<clip_id>/frame_%05d.png` plus labels.csv and classes.txt."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "classes.txt").write_text("\n".join(CLASS_NAMES) + "\n")
    with open(root / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        for s in samples:
            clip_dir = root / s.clip_id
            clip_dir.mkdir(exist_ok=True)
            for t, frame in enumerate(s.frames):
                arr = np.round(frame.transpose(1, 2, 0) * 255.0).astype(np.uint8)
                Image.fromarray(arr).save(clip_dir / f"frame_{t:05d}.png")
            writer.writerow([s.clip_id, s.label])


def load_frame_folder(root):
    """Lazily decodable samples; clips with problems are skipped and counted.

    Returns (samples, skipped_count).
    """
    root = Path(root)
    labels = {}
    labels_file = root / "labels.csv"
    if labels_file.exists():
        with open(labels_file, newline="") as fh:
            for row in csv.reader(fh):
                if row:
                    labels[row[0]] = int(row[1])
    samples, skipped = [], 0
    for clip_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        frame_paths = sorted(clip_dir.glob("frame_*"))
        if not frame_paths:
            skipped += 1
            continue
        if clip_dir.name not in labels:
            skipped += 1
            continue
        samples.append(VideoSample(
            label=labels[clip_dir.name], clip_id=clip_dir.name, _paths=frame_paths
        ))
    return samples, skipped


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def bilinear_resize(img, out_hw):
    """Resize (C, H, W) with half-pixel-centre bilinear sampling."""
    C, H, W = img.shape
    oh, ow = out_hw
    if (H, W) == (oh, ow):
        return img.copy()
    ys = (np.arange(oh) + 0.5) * (H / oh) - 0.5
    xs = (np.arange(ow) + 0.5) * (W / ow) - 0.5
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, H - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy = np.clip(ys - y0, 0.0, 1.0).astype(img.dtype)
    wx = np.clip(xs - x0, 0.0, 1.0).astype(img.dtype)
    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bot = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return top * (1 - wy)[None, :, None] + bot * wy[None, :, None]


def augment_clip(frames, spec, rng=None, training=False):
    """Crop/resize a whole clip with one shared set of crop parameters.

    Train mode: scale-jittered random square crop (+ optional flip); eval
    mode: scale-1.0 centre crop. Output is (T, 3, crop_h, crop_w) in [0, 1].
    """
    T_, C, H, W = frames.shape
    short = min(H, W)
    if training:
        scale = spec.scales[int(rng.integers(len(spec.scales)))]
        side = max(1, int(round(short * scale)))
        y0 = int(rng.integers(0, H - side + 1))
        x0 = int(rng.integers(0, W - side + 1))
        flip = bool(spec.horizontal_flip and rng.integers(2))
    else:
        side = short
        y0 = (H - side) // 2
        x0 = (W - side) // 2
        flip = False
    out = np.empty((T_, C) + tuple(spec.crop_size), dtype=frames.dtype)
    for t in range(T_):
        crop = frames[t, :, y0 : y0 + side, x0 : x0 + side]
        if flip:
            crop = crop[:, :, ::-1]
        out[t] = bilinear_resize(np.ascontiguousarray(crop), spec.crop_size)
    return np.clip(out, 0.0, 1.0)


def normalize(frames, mean, std):
    """Per-channel standardization with recorded constants."""
    mean = np.asarray(mean, dtype=frames.dtype).reshape(1, -1, 1, 1)
    std = np.asarray(std, dtype=frames.dtype).reshape(1, -1, 1, 1)
    return (frames - mean) / std
