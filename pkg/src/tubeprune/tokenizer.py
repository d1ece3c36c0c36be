"""Tubelet tokenization and the token -> pixel-region map.

A tubelet is a non-overlapping dt x dh x dw cell of the video. Embedding a cell
with an affine map over its flattened pixels is the same computation as a 3D
convolution whose kernel and stride both equal the cell size.

Cells are enumerated t-major, then h, then w. A cell's flattened pixel vector is
laid out (C, dt, dh, dw), matching a (D, C, kt, kh, kw) conv kernel.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numeric as nm

FUSED = -1


@dataclass(frozen=True)
class TubeletConfig:
    dt: int = 2
    dh: int = 8
    dw: int = 8
    dim: int = 64

    def __post_init__(self):
        if min(self.dt, self.dh, self.dw, self.dim) < 1:
            raise ValueError(f"tubelet extents must be >= 1: {self}")

    def grid(self, frames: int, height: int, width: int) -> tuple[int, int, int]:
        """(L, rows, cols) of the cell grid; raises if the video does not tile evenly."""
        if frames % self.dt or height % self.dh or width % self.dw:
            raise ValueError(
                f"video {frames}x{height}x{width} is not divisible by tubelet {self.dt}x{self.dh}x{self.dw}")
        return frames // self.dt, height // self.dh, width // self.dw

    def num_tokens(self, frames: int, height: int, width: int) -> int:
        L, gh, gw = self.grid(frames, height, width)
        return L * gh * gw

    def cell_size(self, channels: int) -> int:
        return self.dt * self.dh * self.dw * channels


@dataclass
class TokenState:
    """Live tubelet tokens plus the two CLS tokens.

    ``tokens`` is (B, M, D); ``origin`` is (B, M) of flat cell indices, FUSED for
    fused tokens; ``act_cls``/``priv_cls`` are (B, D).
    """

    tokens: nm.Tensor
    origin: np.ndarray
    act_cls: nm.Tensor
    priv_cls: nm.Tensor

    def __post_init__(self):
        if self.origin.shape != self.tokens.shape[:2]:
            raise nm.ShapeError(f"origin {self.origin.shape} vs tokens {self.tokens.shape}")

    @property
    def num_live(self) -> int:
        return self.tokens.shape[1]

    def sequence(self) -> nm.Tensor:
        """(B, M + 2, D) as [act_CLS, priv_CLS, tubelets...]."""
        b, _, d = self.tokens.shape
        return nm.concat_rows([self.act_cls.reshape(b, 1, d), self.priv_cls.reshape(b, 1, d), self.tokens])

    @classmethod
    def from_sequence(cls, seq: nm.Tensor, origin: np.ndarray) -> "TokenState":
        return cls(tokens=seq[:, 2:, :], origin=origin, act_cls=seq[:, 0, :], priv_cls=seq[:, 1, :])


def _batched(video: np.ndarray) -> tuple[np.ndarray, bool]:
    video = np.asarray(video, dtype=np.float64)
    if video.ndim == 4:
        return video[None], True
    if video.ndim != 5:
        raise nm.ShapeError(f"expected (T,C,H,W) or (B,T,C,H,W) video, got shape {video.shape}")
    return video, False


def patchify(video: np.ndarray, cfg: TubeletConfig) -> np.ndarray:
    """(B,T,C,H,W) -> (B, L*gh*gw, C*dt*dh*dw) flattened cells in token order."""
    video, single = _batched(video)
    b, t, c, h, w = video.shape
    L, gh, gw = cfg.grid(t, h, w)
    x = video.reshape(b, L, cfg.dt, c, gh, cfg.dh, gw, cfg.dw)
    x = x.transpose(0, 1, 4, 6, 3, 2, 5, 7).reshape(b, L * gh * gw, c * cfg.dt * cfg.dh * cfg.dw)
    return x[0] if single else x


def unpatchify(cells: np.ndarray, cfg: TubeletConfig, shape: tuple[int, int, int, int]) -> np.ndarray:
    """Inverse of :func:`patchify` for a single (M0, C*dt*dh*dw) array."""
    t, c, h, w = shape
    L, gh, gw = cfg.grid(t, h, w)
    x = np.asarray(cells).reshape(L, gh, gw, c, cfg.dt, cfg.dh, cfg.dw)
    return x.transpose(0, 4, 3, 1, 5, 2, 6).reshape(t, c, h, w)


def tokenize(video, cfg: TubeletConfig, weight, bias, pos, act_cls=None, priv_cls=None) -> TokenState:
    """Embed every cell affinely and add its positional row.

    ``weight`` is (C*dt*dh*dw, D), ``bias`` (D,), ``pos`` (M0, D). CLS tokens are
    (D,) parameters broadcast over the batch; zeros when omitted.
    """
    video = np.asarray(video, dtype=np.float64)
    if video.size and (video.min() < 0.0 or video.max() > 1.0):
        raise ValueError("video pixels must lie in [0, 1]")
    cells = patchify(video, cfg)
    if cells.ndim == 2:
        cells = cells[None]
    b, m0, k = cells.shape
    weight, bias, pos = nm.as_tensor(weight), nm.as_tensor(bias), nm.as_tensor(pos)
    if weight.shape != (k, cfg.dim):
        raise nm.ShapeError(f"embedding weight {weight.shape}, expected {(k, cfg.dim)}")
    if pos.shape != (m0, cfg.dim):
        raise nm.ShapeError(f"positional table {pos.shape}, expected {(m0, cfg.dim)}")
    tokens = nm.add(nm.linear(nm.Tensor(cells), weight, bias), pos)
    zeros = np.zeros(cfg.dim)
    act = nm.as_tensor(zeros if act_cls is None else act_cls)
    priv = nm.as_tensor(zeros if priv_cls is None else priv_cls)
    ones = nm.Tensor(np.ones((b, 1)))
    origin = np.tile(np.arange(m0), (b, 1))
    return TokenState(tokens=tokens, origin=origin,
                      act_cls=nm.mul(ones, act.reshape(1, cfg.dim)),
                      priv_cls=nm.mul(ones, priv.reshape(1, cfg.dim)))


def cell_coords(index: int, grid: tuple[int, int, int]) -> tuple[int, int, int]:
    if index == FUSED:
        raise ValueError("fused token has no cell coordinate")
    L, gh, gw = grid
    if not 0 <= index < L * gh * gw:
        raise IndexError(f"cell index {index} outside grid {grid}")
    return index // (gh * gw), (index // gw) % gh, index % gw


def cell_index(coords: tuple[int, int, int], grid: tuple[int, int, int]) -> int:
    t, h, w = coords
    _, gh, gw = grid
    return (t * gh + h) * gw + w


def index_to_region(origin, cfg: TubeletConfig) -> tuple[slice, slice, slice]:
    """Half-open (frames, rows, cols) pixel box of a cell given as (t, h, w)."""
    if isinstance(origin, (int, np.integer)):
        if origin == FUSED:
            raise ValueError("fused token has no pixel region")
        raise TypeError("pass a (t, h, w) cell coordinate; use cell_coords() for flat indices")
    t, h, w = origin
    return (slice(t * cfg.dt, (t + 1) * cfg.dt),
            slice(h * cfg.dh, (h + 1) * cfg.dh),
            slice(w * cfg.dw, (w + 1) * cfg.dw))


def cell_mask_to_pixels(cell_mask: np.ndarray, cfg: TubeletConfig, shape) -> np.ndarray:
    """Expand a per-cell boolean (M0,) into a (T, H, W) pixel mask."""
    t, _, h, w = shape
    L, gh, gw = cfg.grid(t, h, w)
    m = np.asarray(cell_mask, dtype=bool).reshape(L, gh, gw)
    return np.repeat(np.repeat(np.repeat(m, cfg.dt, 0), cfg.dh, 1), cfg.dw, 2)


def inflate_embedding(spatial_weights: np.ndarray, dt: int, channels: int) -> np.ndarray:
    """Turn a 2D patch embedding (C*dh*dw, D) into a tubelet one (C*dt*dh*dw, D).

    The kernel is repeated dt times along time and divided by dt, so a clip that
    is constant over time embeds the same as one frame under the 2D kernel.
    """
    if dt < 1:
        raise ValueError("dt must be >= 1")
    w = np.asarray(spatial_weights, dtype=np.float64)
    k, d = w.shape
    if k % channels:
        raise nm.ShapeError(f"{k} inputs not divisible by {channels} channels")
    w = w.reshape(channels, 1, k // channels, d)
    return (np.repeat(w, dt, axis=1) / dt).reshape(channels * dt * (k // channels), d)


def _side(n: int) -> int:
    s = int(round(np.sqrt(n)))
    if s * s != n:
        raise ValueError(f"{n} positions do not form a square grid")
    return s


def interpolate_positions(pos2d: np.ndarray, target: int, segments: int) -> np.ndarray:
    """Bilinearly resize an (N', D) square-grid table to N sites, tiled over L segments.

    Uses corner-aligned sampling, so functions linear in the grid coordinates are
    reproduced exactly.
    """
    pos2d = np.asarray(pos2d, dtype=np.float64)
    src, dst = _side(pos2d.shape[0]), _side(target)
    grid = pos2d.reshape(src, src, -1)
    if src == 1:
        out = np.broadcast_to(grid, (dst, dst, grid.shape[-1]))
    else:
        c = np.linspace(0.0, src - 1.0, dst) if dst > 1 else np.zeros(1)
        i0 = np.minimum(np.floor(c).astype(int), src - 2)
        f = c - i0
        rows = grid[i0] * (1 - f)[:, None, None] + grid[i0 + 1] * f[:, None, None]
        out = rows[:, i0] * (1 - f)[None, :, None] + rows[:, i0 + 1] * f[None, :, None]
    return np.tile(out.reshape(dst * dst, -1), (segments, 1))
