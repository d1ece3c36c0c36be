"""Utility-privacy tubelet scoring, top-k selection, and inattentive-token fusion."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import numeric as nm
from .attention import AttentionRecord
from .tokenizer import FUSED, TokenState


@dataclass
class AlphaPair:
    act: nm.Tensor
    priv: nm.Tensor


@dataclass
class ScoreVector:
    s: np.ndarray
    lambda_priv: float


@dataclass
class PruneDecision:
    kept: np.ndarray
    dropped: np.ndarray
    fused_appended: bool = False


@dataclass(frozen=True)
class PruneSchedule:
    layers: frozenset = field(default_factory=lambda: frozenset({2, 4}))
    keep_rate: float = 0.9
    fusion: bool = True

    def __post_init__(self):
        if not 0.0 < self.keep_rate <= 1.0:
            raise ValueError(f"keep rate must be in (0, 1], got {self.keep_rate}")
        if any(layer < 1 for layer in self.layers):
            raise ValueError("pruning layers are 1-based")


def keep_count(live: int, keep_rate: float) -> int:
    """ceil(r * M) with r read as the decimal it was written as (0.9 * 100 is 90, not 90.000...01)."""
    return math.ceil(Fraction(repr(float(keep_rate))) * live)


def live_counts(m0: int, num_prunes: int, keep_rate: float, fusion: bool = True) -> list[int]:
    counts = [m0]
    for _ in range(num_prunes):
        k = keep_count(counts[-1], keep_rate)
        counts.append(k + (1 if fusion and k < counts[-1] else 0))
    return counts


def _head_mean(rows: nm.Tensor) -> nm.Tensor:
    return nm.mean_over_axis(rows, axis=-2)


def compute_alpha(record: AttentionRecord, renormalize: bool = True) -> AlphaPair:
    """Head-averaged CLS -> tubelet attention, (B, M) or (M,) per task.

    With ``renormalize`` the tubelet entries are rescaled to sum to 1, which drops
    the CLS self-attention mass.
    """
    out = []
    for rows in (nm.as_tensor(record.act), nm.as_tensor(record.priv)):
        alpha = _head_mean(rows)[..., 2:]
        if renormalize:
            mass = alpha.data.sum(axis=-1, keepdims=True)
            if np.any(mass <= 0.0):
                raise ValueError("compute_alpha: zero attention mass on tubelets")
            alpha = nm.div(alpha, nm.sum_(alpha, axis=-1, keepdims=True))
        out.append(alpha)
    return AlphaPair(act=out[0], priv=out[1])


def score(alpha: AlphaPair, lambda_priv: float = 0.5) -> ScoreVector:
    a = alpha.act.data if isinstance(alpha.act, nm.Tensor) else np.asarray(alpha.act, dtype=np.float64)
    p = alpha.priv.data if isinstance(alpha.priv, nm.Tensor) else np.asarray(alpha.priv, dtype=np.float64)
    if a.shape != p.shape:
        raise nm.ShapeError(f"score: alpha shapes {a.shape} vs {p.shape}")
    return ScoreVector(s=a - lambda_priv * p, lambda_priv=lambda_priv)


def topk(s, k: int) -> PruneDecision:
    """Indices of the k largest scores (ties to the lower index), kept sorted ascending."""
    s = np.asarray(s.s if isinstance(s, ScoreVector) else s, dtype=np.float64)
    if s.ndim != 1:
        raise nm.ShapeError("topk expects a 1-D score vector; use topk_batch")
    if not 1 <= k <= s.size:
        raise ValueError(f"k={k} outside [1, {s.size}]")
    order = np.argsort(-s, kind="stable")
    return PruneDecision(kept=np.sort(order[:k]), dropped=np.sort(order[k:]))


def topk_batch(s: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise :func:`topk` on (B, M); returns (kept (B,k), dropped (B,M-k))."""
    s = np.asarray(s, dtype=np.float64)
    if not 1 <= k <= s.shape[-1]:
        raise ValueError(f"k={k} outside [1, {s.shape[-1]}]")
    order = np.argsort(-s, axis=-1, kind="stable")
    return np.sort(order[:, :k], axis=-1), np.sort(order[:, k:], axis=-1)


def fuse(dropped_tokens, alpha_dropped) -> nm.Tensor:
    """Action-attention weighted average of dropped tokens: (..., n, D), (..., n) -> (..., D)."""
    x, w = nm.as_tensor(dropped_tokens), nm.as_tensor(alpha_dropped)
    if x.shape[-2] == 0:
        raise ValueError("fuse: empty drop set")
    if np.any(w.data.sum(axis=-1) <= 0.0):
        raise ValueError("fuse: drop-set weights have zero mass")
    w = nm.div(w, nm.sum_(w, axis=-1, keepdims=True))
    return nm.weighted_row_sum(w, x)


def apply_prune(state: TokenState, kept: np.ndarray, t_fuse: nm.Tensor | None = None) -> TokenState:
    """Keep ``kept`` tubelets (B, k) in order, then append the fused token if given."""
    kept = np.asarray(kept, dtype=np.int64)
    if kept.ndim == 1:
        kept = np.tile(kept, (state.tokens.shape[0], 1))
    m = state.num_live
    if kept.shape[0] != state.tokens.shape[0] or kept.size == 0 or kept.min() < 0 or kept.max() >= m:
        raise ValueError("apply_prune: decision inconsistent with state")
    if any(len(np.unique(row)) != len(row) for row in kept):
        raise ValueError("apply_prune: duplicate kept index")
    tokens = nm.gather_rows(state.tokens, kept)
    origin = np.take_along_axis(state.origin, kept, axis=1)
    if t_fuse is not None:
        b, d = t_fuse.shape
        tokens = nm.concat_rows([tokens, t_fuse.reshape(b, 1, d)])
        origin = np.concatenate([origin, np.full((b, 1), FUSED)], axis=1)
    return TokenState(tokens=tokens, origin=origin, act_cls=state.act_cls, priv_cls=state.priv_cls)


@dataclass
class PruneTrace:
    """One pruning layer's outcome for a batch: origins of kept/dropped tokens and all scores."""

    layer: int
    kept_origin: np.ndarray
    dropped_origin: np.ndarray
    scores: np.ndarray
    live_before: int
    live_after: int

    def to_json(self, sample: int) -> dict:
        return {
            "layer": self.layer,
            "kept": [int(i) for i in self.kept_origin[sample]],
            "dropped": [int(i) for i in self.dropped_origin[sample]],
            "scores": [float(v) for v in self.scores[sample]],
            "live_before": self.live_before,
            "live_after": self.live_after,
        }


def prune_layer(state: TokenState, record: AttentionRecord, layer: int, keep_rate: float,
                lambda_priv: float = 0.5, fusion: bool = True, renormalize: bool = True):
    """Score, select, fuse, and apply for one scheduled layer; returns (state, trace)."""
    m = state.num_live
    k = keep_count(m, keep_rate)
    alpha = compute_alpha(record, renormalize=renormalize)
    sv = score(alpha, lambda_priv)
    if k >= m:
        trace = PruneTrace(layer, state.origin.copy(), np.zeros((state.origin.shape[0], 0), dtype=np.int64),
                           sv.s, m, m)
        return state, trace
    kept, dropped = topk_batch(sv.s, k)
    t_fuse = None
    if fusion:
        t_fuse = fuse(nm.gather_rows(state.tokens, dropped), nm.gather_rows(
            alpha.act.reshape(*alpha.act.shape, 1), dropped).reshape(*dropped.shape))
    new = apply_prune(state, kept, t_fuse)
    trace = PruneTrace(layer, np.take_along_axis(state.origin, kept, axis=1),
                       np.take_along_axis(state.origin, dropped, axis=1), sv.s, m, new.num_live)
    return new, trace
