"""The dual-CLS tubelet-pruning anonymizer: model, adversarial training, rendering."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numeric as nm
from .attention import build_dual_cls_mask, init_block, transformer_block
from .pruning import PruneTrace, prune_layer
from .tokenizer import FUSED, TokenState, TubeletConfig, cell_mask_to_pixels, tokenize

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    frames: int = 16
    channels: int = 3
    height: int = 32
    width: int = 32
    dt: int = 2
    dh: int = 8
    dw: int = 8
    dim: int = 64
    heads: int = 4
    depth: int = 6
    num_actions: int = 4
    num_attrs: int = 3
    prune_layers: tuple = (2, 4)
    keep_rate: float = 0.9
    fusion: bool = True
    lambda_priv: float = 0.5
    renormalize_alpha: bool = True
    drop: float = 0.2
    attn_drop: float = 0.1

    def __post_init__(self):
        if self.num_actions < 2 or self.num_attrs < 1:
            raise ValueError("need >= 2 action classes and >= 1 privacy attribute")
        if any(not 1 <= p <= self.depth for p in self.prune_layers):
            raise ValueError(f"pruning layers {self.prune_layers} outside 1..{self.depth}")
        if not 0.0 < self.keep_rate <= 1.0:
            raise ValueError(f"keep rate must be in (0, 1], got {self.keep_rate}")
        self.tubelet.grid(self.frames, self.height, self.width)

    @property
    def tubelet(self) -> TubeletConfig:
        return TubeletConfig(self.dt, self.dh, self.dw, self.dim)

    @property
    def grid(self) -> tuple[int, int, int]:
        return self.tubelet.grid(self.frames, self.height, self.width)

    @property
    def num_cells(self) -> int:
        L, gh, gw = self.grid
        return L * gh * gw

    @property
    def video_shape(self) -> tuple[int, int, int, int]:
        return (self.frames, self.channels, self.height, self.width)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    lr: float = 1e-3
    lambda_grl: float = 1.0
    seed: int = 42

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be >= 1")


@dataclass
class LossBreakdown:
    total: float
    utility: float
    budget: float

    def to_json(self) -> dict:
        return asdict(self)


HEAD_PREFIXES = ("head_act", "head_priv")


def init_params(cfg: ModelConfig, rng: np.random.Generator, std: float | None = None,
                token_std: float = 0.02) -> dict:
    """All learnable tensors keyed by name; heads are ``head_act_*``/``head_priv_*``.

    Linear weights are N(0, 1/fan_in) unless ``std`` is given; positional rows and
    CLS tokens are N(0, token_std^2).
    """
    d = cfg.dim
    k = cfg.tubelet.cell_size(cfg.channels)

    def w(*shape):
        sd = shape[0] ** -0.5 if std is None else std
        return nm.Tensor(rng.normal(0.0, sd, size=shape), requires_grad=True)

    def tok(*shape):
        return nm.Tensor(rng.normal(0.0, token_std, size=shape), requires_grad=True)

    def zeros(*shape):
        return nm.Tensor(np.zeros(shape), requires_grad=True)

    params = {
        "embed_w": w(k, d), "embed_b": zeros(d),
        "pos": tok(cfg.num_cells, d),
        "act_cls": tok(d), "priv_cls": tok(d),
        "norm_g": nm.Tensor(np.ones(d), requires_grad=True), "norm_b": zeros(d),
        "head_act_w": w(d, cfg.num_actions), "head_act_b": zeros(cfg.num_actions),
        "head_priv_w": w(d, cfg.num_attrs), "head_priv_b": zeros(cfg.num_attrs),
    }
    for i in range(cfg.depth):
        for name, t in init_block(rng, d, cfg.heads, std=std).items():
            params[f"block{i}.{name}"] = t
    return params


def anonymizer_keys(params: dict) -> list[str]:
    """Names of the backbone parameters (everything except the two heads)."""
    return sorted(k for k in params if not k.startswith(HEAD_PREFIXES))


def block_params(params: dict, i: int) -> dict:
    prefix = f"block{i}."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


@dataclass
class ForwardOutput:
    action_logits: nm.Tensor
    privacy_logits: nm.Tensor
    priv_features: nm.Tensor
    act_features: nm.Tensor
    traces: list[PruneTrace]
    state: TokenState
    live_counts: list[int] = field(default_factory=list)


def encode(videos, params: dict, cfg: ModelConfig, train: bool = False,
           rng: np.random.Generator | None = None):
    """Run tokenization and all blocks with scheduled pruning; returns (final normed seq, traces, state, counts)."""
    videos = np.asarray(videos, dtype=np.float64)
    if videos.ndim == 4:
        videos = videos[None]
    if videos.shape[1:] != cfg.video_shape:
        raise nm.ShapeError(f"video shape {videos.shape[1:]} != configured {cfg.video_shape}")
    state = tokenize(videos, cfg.tubelet, params["embed_w"], params["embed_b"], params["pos"],
                     params["act_cls"], params["priv_cls"])
    seq = state.sequence()
    origin = state.origin
    traces = []
    counts = [state.num_live]
    for i in range(cfg.depth):
        mask = build_dual_cls_mask(origin.shape[1])
        seq, record = transformer_block(seq, block_params(params, i), mask, cfg.heads, train=train, rng=rng,
                                        drop=cfg.drop, attn_drop=cfg.attn_drop)
        if i + 1 in cfg.prune_layers:
            state = TokenState.from_sequence(seq, origin)
            state, trace = prune_layer(state, record, i + 1, cfg.keep_rate, cfg.lambda_priv,
                                       fusion=cfg.fusion, renormalize=cfg.renormalize_alpha)
            traces.append(trace)
            seq, origin = state.sequence(), state.origin
            counts.append(state.num_live)
    seq = nm.layernorm(seq, params["norm_g"], params["norm_b"])
    return seq, traces, TokenState.from_sequence(seq, origin), counts


def forward(videos, params: dict, cfg: ModelConfig, train: bool = False,
            rng: np.random.Generator | None = None, lambda_grl: float | None = None) -> ForwardOutput:
    """Action and privacy logits for a batch; with ``lambda_grl`` the privacy head reads through a GRL."""
    seq, traces, state, counts = encode(videos, params, cfg, train=train, rng=rng)
    act_feat, priv_feat = seq[:, 0, :], seq[:, 1, :]
    priv_in = priv_feat if lambda_grl is None else nm.grl(priv_feat, lambda_grl)
    return ForwardOutput(
        action_logits=nm.linear(act_feat, params["head_act_w"], params["head_act_b"]),
        privacy_logits=nm.linear(priv_in, params["head_priv_w"], params["head_priv_b"]),
        priv_features=priv_feat, act_features=act_feat,
        traces=traces, state=state, live_counts=counts)


def adversarial_loss(videos, y_t, y_b, params, cfg: ModelConfig, lambda_grl: float,
                     train: bool = True, rng=None):
    out = forward(videos, params, cfg, train=train, rng=rng, lambda_grl=lambda_grl)
    y_b = np.asarray(y_b, dtype=np.float64)
    if y_b.ndim == 1:
        y_b = y_b[None]
    lt = nm.cross_entropy(out.action_logits, np.atleast_1d(y_t))
    lb = nm.bce_with_logits(out.privacy_logits, y_b)
    return nm.add(lt, lb), lt, lb, out


def adversarial_step(videos, y_t, y_b, params: dict, opt: nm.Adam, cfg: ModelConfig, lambda_grl: float,
                     rng: np.random.Generator | None = None) -> LossBreakdown:
    """One Adam update on L_T + L_B with the privacy head behind a gradient reversal."""
    opt.zero_grad()
    total, lt, lb, _ = adversarial_loss(videos, y_t, y_b, params, cfg, lambda_grl, train=True, rng=rng)
    total.backward()
    opt.step()
    u, b = float(lt.data), float(lb.data)
    return LossBreakdown(total=u + b, utility=u, budget=b)


def train(videos, y_t, y_b, cfg: ModelConfig, tcfg: TrainConfig, params: dict | None = None,
          on_epoch=None) -> tuple[dict, list[LossBreakdown]]:
    """Adversarial training over shuffled minibatches; returns (frozen params, per-step log)."""
    n = len(videos)
    if n == 0:
        raise ValueError("train: empty dataset")
    if params is None:
        params = init_params(cfg, nm.make_rng(tcfg.seed, 1))
    opt = nm.Adam(params, lr=tcfg.lr)
    shuffle_rng = nm.make_rng(tcfg.seed, 2)
    drop_rng = nm.make_rng(tcfg.seed, 3)
    steps = []
    for epoch in range(tcfg.epochs):
        order = shuffle_rng.permutation(n)
        epoch_log = []
        for start in range(0, n, tcfg.batch_size):
            idx = order[start:start + tcfg.batch_size]
            epoch_log.append(adversarial_step(videos[idx], y_t[idx], y_b[idx], params, opt, cfg,
                                              tcfg.lambda_grl, rng=drop_rng))
        steps.extend(epoch_log)
        summary = epoch_summary(epoch_log)
        log.info("epoch %d/%d  L_adv=%.4f  L_T=%.4f  L_B=%.4f", epoch + 1, tcfg.epochs,
                 summary.total, summary.utility, summary.budget)
        if on_epoch is not None:
            on_epoch(epoch, summary)
    return freeze(params), steps


def epoch_summary(entries: list[LossBreakdown]) -> LossBreakdown:
    u = float(np.mean([e.utility for e in entries]))
    b = float(np.mean([e.budget for e in entries]))
    return LossBreakdown(total=u + b, utility=u, budget=b)


def freeze(params: dict) -> dict:
    return {k: nm.Tensor(v.data.copy()) for k, v in params.items()}


def surviving_cells(videos, params: dict, cfg: ModelConfig, batch_size: int = 32):
    """(n, M0) boolean survival mask per video plus the per-batch prune traces."""
    videos = np.asarray(videos, dtype=np.float64)
    if videos.ndim == 4:
        videos = videos[None]
    masks, traces = [], []
    with nm.no_grad():
        for start in range(0, len(videos), batch_size):
            _, tr, state, _ = encode(videos[start:start + batch_size], params, cfg, train=False)
            mask = np.zeros((state.origin.shape[0], cfg.num_cells), dtype=bool)
            for row, origin in enumerate(state.origin):
                cells = origin[origin != FUSED]
                mask[row, cells] = True
            masks.append(mask)
            traces.append(tr)
    return np.concatenate(masks), traces


def render_with_mask(videos, cell_mask: np.ndarray, cfg: ModelConfig, fill: float = 0.0) -> np.ndarray:
    videos = np.asarray(videos, dtype=np.float64)
    out = np.empty_like(videos)
    for i, (v, m) in enumerate(zip(videos, cell_mask)):
        pix = cell_mask_to_pixels(m, cfg.tubelet, v.shape)[:, None, :, :]
        out[i] = np.where(pix, v, fill)
    return out


def render_anonymized(videos, params: dict, cfg: ModelConfig, fill: float = 0.0, batch_size: int = 32):
    """Blank every cell whose token did not survive all pruning layers; returns (videos, cell mask)."""
    single = np.asarray(videos).ndim == 4
    mask, _ = surviving_cells(videos, params, cfg, batch_size)
    out = render_with_mask(np.asarray(videos)[None] if single else videos, mask, cfg, fill)
    return (out[0], mask[0]) if single else (out, mask)


def to_arrays(params: dict) -> dict:
    return {k: v.data for k, v in params.items()}


def from_arrays(arrays: dict, requires_grad: bool = False) -> dict:
    return {k: nm.Tensor(np.array(v), requires_grad=requires_grad) for k, v in arrays.items()}


def save(path, params: dict) -> None:
    nm.save_checkpoint(path, to_arrays(params))


def load(path) -> dict:
    return from_arrays(nm.load_checkpoint(path))


def expected_live_counts(cfg: ModelConfig) -> list[int]:
    from .pruning import live_counts
    return live_counts(cfg.num_cells, len(cfg.prune_layers), cfg.keep_rate, cfg.fusion)


def steps_per_epoch(n: int, batch: int) -> int:
    return math.ceil(n / batch)
