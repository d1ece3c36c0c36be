"""Synthetic videos with separable action (motion) and privacy (static appearance) signals.

Each clip has a bright square moving along one of ``num_actions`` directions and
a static patch in a fixed privacy box. The box is split into quadrants; quadrant
j is bright when attribute j is set and dark otherwise. The patch is drawn over
the moving square, so appearance is never occluded.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numeric as nm
from .tokenizer import TubeletConfig, cell_index

ON, OFF, BACKGROUND, BLOB = 0.8, 0.2, 0.1, 1.0


@dataclass(frozen=True)
class SyntheticConfig:
    frames: int = 16
    channels: int = 3
    height: int = 32
    width: int = 32
    num_actions: int = 4
    num_attrs: int = 3
    privacy_box: tuple = (0, 8, 0, 8)  # row0, row1, col0, col1 (half-open)
    blob: int = 8
    travel: float = 28.0
    noise: float = 0.05
    n_train: int = 512
    n_test: int = 256
    seed: int = 42

    def __post_init__(self):
        if self.num_actions < 2 or self.num_attrs < 1:
            raise ValueError("need >= 2 action classes and >= 1 attribute")
        if self.num_attrs > 4:
            raise ValueError("the privacy patch has four quadrants; at most 4 attributes")
        r0, r1, c0, c1 = self.privacy_box
        if not (0 <= r0 <= r1 <= self.height and 0 <= c0 <= c1 <= self.width):
            raise ValueError(f"privacy box {self.privacy_box} outside the frame")
        if (r1 > r0) != (c1 > c0):
            raise ValueError("privacy box must be empty in both axes or neither")

    @property
    def video_shape(self):
        return (self.frames, self.channels, self.height, self.width)

    def check_alignment(self, tub: TubeletConfig) -> None:
        tub.grid(self.frames, self.height, self.width)
        r0, r1, c0, c1 = self.privacy_box
        if r0 % tub.dh or r1 % tub.dh or c0 % tub.dw or c1 % tub.dw:
            raise ValueError(f"privacy box {self.privacy_box} not aligned to {tub.dh}x{tub.dw} cells")


@dataclass
class Dataset:
    videos: np.ndarray  # (n, T, C, H, W)
    y_t: np.ndarray  # (n,) int
    y_b: np.ndarray  # (n, P) 0/1 float

    def __len__(self):
        return len(self.videos)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.videos[idx], self.y_t[idx], self.y_b[idx])


def directions(num_actions: int) -> np.ndarray:
    """Unit (row, col) velocity per action class, evenly spaced in angle."""
    ang = 2.0 * np.pi * np.arange(num_actions) / num_actions
    return np.stack([np.sin(ang), np.cos(ang)], axis=1)


def quadrant_slices(box) -> list[tuple[slice, slice]]:
    r0, r1, c0, c1 = box
    rm, cm = (r0 + r1) // 2, (c0 + c1) // 2
    return [(slice(r0, rm), slice(c0, cm)), (slice(r0, rm), slice(cm, c1)),
            (slice(rm, r1), slice(c0, cm)), (slice(rm, r1), slice(cm, c1))]


def render_clip(cfg: SyntheticConfig, action: int, attrs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    t_, c_, h_, w_ = cfg.video_shape
    video = np.full((t_, c_, h_, w_), BACKGROUND)
    vel = directions(cfg.num_actions)[action] * cfg.travel / max(t_ - 1, 1)
    half = cfg.blob / 2.0
    lo = np.array([half, half]) - np.minimum(vel * (t_ - 1), 0.0)
    hi = np.array([h_ - half, w_ - half]) - np.maximum(vel * (t_ - 1), 0.0)
    start = lo + rng.random(2) * np.maximum(hi - lo, 0.0)
    for t in range(t_):
        cy, cx = start + vel * t
        r0, c0 = int(round(cy - half)), int(round(cx - half))
        r0, c0 = min(max(r0, 0), h_ - cfg.blob), min(max(c0, 0), w_ - cfg.blob)
        video[t, :, r0:r0 + cfg.blob, c0:c0 + cfg.blob] = BLOB
    r0, r1, c0, c1 = cfg.privacy_box
    if r1 > r0:
        video[:, :, r0:r1, c0:c1] = 0.5
        for j, (rs, cs) in enumerate(quadrant_slices(cfg.privacy_box)[:cfg.num_attrs]):
            video[:, :, rs, cs] = ON if attrs[j] else OFF
    if cfg.noise > 0:
        video += rng.normal(0.0, cfg.noise, size=video.shape)
    return np.clip(video, 0.0, 1.0)


def generate_split(cfg: SyntheticConfig, n: int, split: int) -> Dataset:
    rng = nm.make_rng(cfg.seed, 10, split)
    y_t = rng.integers(0, cfg.num_actions, size=n)
    y_b = rng.integers(0, 2, size=(n, cfg.num_attrs)).astype(np.float64)
    videos = np.empty((n, *cfg.video_shape))
    for i in range(n):
        videos[i] = render_clip(cfg, int(y_t[i]), y_b[i], rng)
    return Dataset(videos, y_t.astype(np.int64), y_b)


def generate(cfg: SyntheticConfig) -> tuple[Dataset, Dataset]:
    """(train, test) datasets; fully determined by ``cfg.seed``."""
    return generate_split(cfg, cfg.n_train, 0), generate_split(cfg, cfg.n_test, 1)


def privacy_cells(cfg: SyntheticConfig, tub: TubeletConfig) -> set[int]:
    """Flat indices of every cell overlapping the privacy box, across all time segments."""
    cfg.check_alignment(tub)
    grid = tub.grid(cfg.frames, cfg.height, cfg.width)
    r0, r1, c0, c1 = cfg.privacy_box
    return {cell_index((t, h, w), grid)
            for t in range(grid[0])
            for h in range(r0 // tub.dh, r1 // tub.dh)
            for w in range(c0 // tub.dw, c1 // tub.dw)}


def privacy_cell_mask(cfg: SyntheticConfig, tub: TubeletConfig) -> np.ndarray:
    grid = tub.grid(cfg.frames, cfg.height, cfg.width)
    mask = np.zeros(int(np.prod(grid)), dtype=bool)
    mask[sorted(privacy_cells(cfg, tub))] = True
    return mask


def blank_privacy_region(videos: np.ndarray, cfg: SyntheticConfig, fill: float = 0.0) -> np.ndarray:
    out = np.array(videos, copy=True)
    r0, r1, c0, c1 = cfg.privacy_box
    out[..., r0:r1, c0:c1] = fill
    return out


# closed-form oracles: used to certify that the two signals are separable

def motion_oracle(videos: np.ndarray, cfg: SyntheticConfig, threshold: float = 0.6) -> np.ndarray:
    """Predict the action from the displacement of the bright-pixel centroid outside the privacy box."""
    videos = np.asarray(videos)
    r0, r1, c0, c1 = cfg.privacy_box
    dirs = directions(cfg.num_actions)
    rows, cols = np.mgrid[0:cfg.height, 0:cfg.width]
    preds = np.empty(len(videos), dtype=np.int64)
    for i, v in enumerate(videos):
        bright = v.mean(axis=1) > threshold
        bright[:, r0:r1, c0:c1] = False
        cents = []
        for t, frame in enumerate(bright):
            if frame.any():
                cents.append((t, rows[frame].mean(), cols[frame].mean()))
        if len(cents) < 2:
            preds[i] = 0
            continue
        t0, y0, x0 = cents[0]
        t1, y1, x1 = cents[-1]
        disp = np.array([y1 - y0, x1 - x0])
        preds[i] = int(np.argmax(dirs @ disp))
    return preds


def appearance_oracle(videos: np.ndarray, cfg: SyntheticConfig) -> np.ndarray:
    """Predict attribute j as 1 iff quadrant j's mean intensity exceeds 0.5."""
    videos = np.asarray(videos)
    quads = quadrant_slices(cfg.privacy_box)[:cfg.num_attrs]
    out = np.empty((len(videos), cfg.num_attrs))
    for j, (rs, cs) in enumerate(quads):
        out[:, j] = videos[..., rs, cs].mean(axis=(1, 2, 3, 4)) > 0.5
    return out
