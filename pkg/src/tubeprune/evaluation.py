"""Frozen-anonymizer evaluation: anonymize, train fresh probes on pixels, score them.

Probes never see anonymizer features, only rendered videos. A probe is a
non-overlapping conv stack applied to each consecutive frame pair
(frame_t, frame_{t+1} - frame_t), mean-pooled over time, then an MLP head.
"""
from __future__ import annotations

import csv
import io
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import anonymizer as an
from . import numeric as nm
from .datagen import Dataset, SyntheticConfig, generate, privacy_cell_mask
from .metrics import cmap, f1_macro, top1

log = logging.getLogger(__name__)

SWEEP_HEADER = ["keep_rate", "action_top1", "privacy_cmap", "privacy_f1", "seed", "wall_s"]


@dataclass(frozen=True)
class ProbeConfig:
    patch: int = 4
    pool: int = 2
    conv1: int = 16
    conv2: int = 32
    hidden: int = 64
    epochs_act: int = 30
    epochs_priv: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 42

    def __post_init__(self):
        if self.epochs_act < 1 or self.epochs_priv < 1:
            raise ValueError("probe epochs must be >= 1")


@dataclass
class MetricsReport:
    action_top1: float
    privacy_cmap: float
    privacy_f1_macro: float
    keep_rate: float
    seed: int
    wall_s: float

    def __post_init__(self):
        if not (0.0 <= self.action_top1 <= 100.0 and 0.0 <= self.privacy_cmap <= 100.0):
            raise ValueError(f"percent metrics out of range: {self}")
        if not 0.0 <= self.privacy_f1_macro <= 1.0:
            raise ValueError(f"F1 out of range: {self}")

    def to_json(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- probes

def probe_inputs(videos: np.ndarray, patch: int) -> np.ndarray:
    """(n,T,C,H,W) -> (n, T-1, H/p, W/p, 2C*p*p) patches of (frame, next-frame delta)."""
    v = np.asarray(videos, dtype=np.float64)
    x = np.concatenate([v[:, :-1], v[:, 1:] - v[:, :-1]], axis=2)
    n, t, c, h, w = x.shape
    if h % patch or w % patch:
        raise ValueError(f"frame {h}x{w} not divisible by probe patch {patch}")
    x = x.reshape(n, t, c, h // patch, patch, w // patch, patch)
    return x.transpose(0, 1, 3, 5, 2, 4, 6).reshape(n, t, h // patch, w // patch, c * patch * patch)


class Probe:
    """Small pixel-space classifier standing in for the large evaluators."""

    def __init__(self, cfg: ProbeConfig, video_shape, num_out: int, rng: np.random.Generator):
        t, c, h, w = video_shape
        self.cfg = cfg
        gh, gw = h // cfg.patch, w // cfg.patch
        if gh % cfg.pool or gw % cfg.pool:
            raise ValueError("probe feature map not divisible by pool size")
        in1 = 2 * c * cfg.patch ** 2
        in2 = cfg.conv1 * cfg.pool ** 2
        feat = (gh // cfg.pool) * (gw // cfg.pool) * cfg.conv2

        def he(fan_in, fan_out):
            return nm.Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)), requires_grad=True)

        def zeros(n):
            return nm.Tensor(np.zeros(n), requires_grad=True)

        self.params = {
            "c1_w": he(in1, cfg.conv1), "c1_b": zeros(cfg.conv1),
            "c2_w": he(in2, cfg.conv2), "c2_b": zeros(cfg.conv2),
            "fc1_w": he(feat, cfg.hidden), "fc1_b": zeros(cfg.hidden),
            "fc2_w": he(cfg.hidden, num_out), "fc2_b": zeros(num_out),
        }

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def logits(self, patches: np.ndarray) -> nm.Tensor:
        p, k = self.params, self.cfg.pool
        n, t, gh, gw, _ = patches.shape
        x = nm.gelu(nm.linear(nm.Tensor(patches), p["c1_w"], p["c1_b"]))
        c1 = x.shape[-1]
        x = x.reshape(n, t, gh // k, k, gw // k, k, c1).transpose(0, 1, 2, 4, 3, 5, 6)
        x = x.reshape(n, t, gh // k, gw // k, k * k * c1)
        x = nm.gelu(nm.linear(x, p["c2_w"], p["c2_b"]))
        x = nm.mean_over_axis(x.reshape(n, t, -1), axis=1)
        x = nm.gelu(nm.linear(x, p["fc1_w"], p["fc1_b"]))
        return nm.linear(x, p["fc2_w"], p["fc2_b"])

    def predict(self, videos: np.ndarray, batch: int = 64) -> np.ndarray:
        outs = []
        with nm.no_grad():
            for s in range(0, len(videos), batch):
                outs.append(self.logits(probe_inputs(videos[s:s + batch], self.cfg.patch)).data)
        return np.concatenate(outs)


def train_probe(dataset: Dataset, kind: str, cfg: ProbeConfig) -> tuple[Probe, list[float]]:
    """Fit a fresh probe on ``dataset`` pixels for ``kind`` in {"action", "privacy"}; returns (probe, epoch losses)."""
    if len(dataset) == 0:
        raise ValueError("train_probe: empty dataset")
    if kind not in ("action", "privacy"):
        raise ValueError(f"unknown probe kind {kind!r}")
    stream = 0 if kind == "action" else 1
    num_out = int(dataset.y_t.max()) + 1 if kind == "action" else dataset.y_b.shape[1]
    if kind == "action":
        num_out = max(num_out, 2)
    probe = Probe(cfg, dataset.videos.shape[1:], num_out, nm.make_rng(cfg.seed, 20, stream))
    opt = nm.Adam(probe.params, lr=cfg.lr)
    rng = nm.make_rng(cfg.seed, 21, stream)
    patches = probe_inputs(dataset.videos, cfg.patch)
    epochs = cfg.epochs_act if kind == "action" else cfg.epochs_priv
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(dataset))
        losses = []
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            opt.zero_grad()
            z = probe.logits(patches[idx])
            loss = nm.cross_entropy(z, dataset.y_t[idx]) if kind == "action" else nm.bce_with_logits(z, dataset.y_b[idx])
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
        history.append(float(np.mean(losses)))
    return probe, history


def probe_metrics(train: Dataset, test: Dataset, cfg: ProbeConfig, keep_rate: float = 1.0) -> MetricsReport:
    """Train both probes on ``train`` and score them on ``test``."""
    start = time.perf_counter()
    act, _ = train_probe(train, "action", cfg)
    priv, _ = train_probe(train, "privacy", cfg)
    probs = nm.sigmoid_np(priv.predict(test.videos))
    return MetricsReport(
        action_top1=top1(act.predict(test.videos), test.y_t),
        privacy_cmap=cmap(probs, test.y_b),
        privacy_f1_macro=f1_macro(probs, test.y_b),
        keep_rate=keep_rate, seed=cfg.seed, wall_s=round(time.perf_counter() - start, 3))


# ---------------------------------------------------------------- anonymization

@dataclass
class AnonymizedDataset:
    data: Dataset
    cell_masks: np.ndarray  # (n, M0) True where the cell survived
    traces: list = field(default_factory=list)

    @property
    def blanked_fraction(self) -> float:
        return float(1.0 - self.cell_masks.mean())


def anonymize_dataset(dataset: Dataset, params: dict, cfg: an.ModelConfig, fill: float = 0.0) -> AnonymizedDataset:
    """Replace every video by its rendering under the frozen anonymizer; labels untouched."""
    masks, traces = an.surviving_cells(dataset.videos, params, cfg)
    videos = an.render_with_mask(dataset.videos, masks, cfg, fill)
    return AnonymizedDataset(Dataset(videos, dataset.y_t.copy(), dataset.y_b.copy()), masks, traces)


# ---------------------------------------------------------------- localization

def enrichment_ratio(dropped: np.ndarray, privacy_mask: np.ndarray) -> float:
    """(privacy share of dropped cells) / (privacy share of all cells) for (n, M0) drop masks."""
    dropped = np.asarray(dropped, dtype=bool)
    total = dropped.sum()
    if total == 0:
        raise ValueError("enrichment_ratio: no dropped cells")
    base = np.asarray(privacy_mask, dtype=bool).mean()
    return float((dropped & privacy_mask).sum() / total / base)


def localization(cell_masks: np.ndarray, privacy_mask: np.ndarray) -> float:
    """Enrichment of privacy cells among the cells pruned away (survival masks in, ratio out)."""
    return enrichment_ratio(~np.asarray(cell_masks, dtype=bool), privacy_mask)


def random_drop_null(cell_masks: np.ndarray, privacy_mask: np.ndarray, resamples: int = 1000,
                     seed: int = 0) -> np.ndarray:
    """Enrichment ratios when each video drops the same number of cells uniformly at random."""
    cell_masks = np.asarray(cell_masks, dtype=bool)
    n, m0 = cell_masks.shape
    counts = (~cell_masks).sum(axis=1)
    rng = nm.make_rng(seed, 30)
    out = np.empty(resamples)
    for r in range(resamples):
        keys = rng.random((n, m0))
        ranks = np.argsort(np.argsort(keys, axis=1), axis=1)
        out[r] = enrichment_ratio(ranks < counts[:, None], privacy_mask)
    return out


# ---------------------------------------------------------------- pipeline

@dataclass
class PipelineResult:
    raw: MetricsReport
    anonymized: MetricsReport
    enrichment: float
    null_mean: float
    null_std: float
    blanked_fraction: float
    params: dict | None = None
    loss_log: list = field(default_factory=list)


def run_cell(train: Dataset, test: Dataset, model_cfg: an.ModelConfig, train_cfg: an.TrainConfig,
             probe_cfg: ProbeConfig, data_cfg: SyntheticConfig | None = None,
             raw_report: MetricsReport | None = None, fill: float = 0.0, localize: int = 32) -> PipelineResult:
    """Train the anonymizer from scratch, anonymize both splits, and evaluate fresh probes."""
    if raw_report is None:
        raw_report = probe_metrics(train, test, probe_cfg, keep_rate=1.0)
    start = time.perf_counter()
    if model_cfg.keep_rate == 1.0:
        # nothing is ever pruned, so rendering is the identity for any weights
        anon = MetricsReport(**{**raw_report.to_json(), "keep_rate": 1.0})
        return PipelineResult(raw_report, anon, float("nan"), float("nan"), float("nan"), 0.0)
    params, steps = an.train(train.videos, train.y_t, train.y_b, model_cfg, train_cfg)
    anon_train = anonymize_dataset(train, params, model_cfg, fill)
    anon_test = anonymize_dataset(test, params, model_cfg, fill)
    report = probe_metrics(anon_train.data, anon_test.data, probe_cfg, keep_rate=model_cfg.keep_rate)
    report.wall_s = round(time.perf_counter() - start, 3)
    enrichment = null_mean = null_std = float("nan")
    if data_cfg is not None and localize:
        pm = privacy_cell_mask(data_cfg, model_cfg.tubelet)
        masks = anon_test.cell_masks[:localize]
        enrichment = localization(masks, pm)
        null = random_drop_null(masks, pm, seed=train_cfg.seed)
        null_mean, null_std = float(null.mean()), float(null.std())
    return PipelineResult(raw_report, report, enrichment, null_mean, null_std,
                          anon_test.blanked_fraction, params, steps)


def _sweep_cell(args):
    train, test, model_cfg, train_cfg, probe_cfg, data_cfg, raw = args
    return run_cell(train, test, model_cfg, train_cfg, probe_cfg, data_cfg, raw_report=raw)


def sweep(keep_rates, data_cfg: SyntheticConfig, model_cfg: an.ModelConfig, train_cfg: an.TrainConfig,
          probe_cfg: ProbeConfig, datasets: tuple[Dataset, Dataset] | None = None,
          on_cell=None, jobs: int = 1) -> list[MetricsReport]:
    """One report per keep rate; each cell retrains the anonymizer from the same seed.

    Cells are independent, so ``jobs > 1`` runs them in worker processes; results
    do not depend on the worker count.
    """
    rates = [float(r) for r in keep_rates]
    for r in rates:
        if not 0.0 < r <= 1.0:
            raise ValueError(f"keep rate {r} outside (0, 1]")
    train, test = datasets if datasets is not None else generate(data_cfg)
    raw = probe_metrics(train, test, probe_cfg, keep_rate=1.0)
    cells = [(train, test, replace(model_cfg, keep_rate=r), train_cfg, probe_cfg, data_cfg, raw) for r in rates]
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(cells))) as pool:
            results = list(pool.map(_sweep_cell, cells))
    else:
        results = [_sweep_cell(c) for c in cells]
    reports = []
    for r, result in zip(rates, results):
        log.info("keep_rate=%.2f  top1=%.2f  cmap=%.2f  f1=%.3f", r, result.anonymized.action_top1,
                 result.anonymized.privacy_cmap, result.anonymized.privacy_f1_macro)
        if on_cell is not None:
            on_cell(r, result)
        reports.append(result.anonymized)
    return reports


def sweep_csv(reports: list[MetricsReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_HEADER)
    for rep in reports:
        writer.writerow([rep.keep_rate, f"{rep.action_top1:.4f}", f"{rep.privacy_cmap:.4f}",
                         f"{rep.privacy_f1_macro:.4f}", rep.seed, rep.wall_s])
    return buf.getvalue()
