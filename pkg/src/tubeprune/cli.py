"""Command-line front end: gen, train, anonymize, eval, sweep, gradcheck, visualize.

Every verb reads the same JSON run config (``--config``) with dotted ``--set``
overrides. Exit codes: 0 ok, 1 usage/config error, 2 data error, 3 check failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import anonymizer as an
from . import evaluation as ev
from . import gradcheck
from . import numeric as nm
from .config import ConfigError, RunConfig
from .datagen import Dataset, generate
from .videoio import frame_to_ppm, read_manifest, read_tvid, write_manifest, write_tvid

log = logging.getLogger("tubeprune")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3
SPLITS = ("train", "test")


class DataError(Exception):
    """Missing or malformed input artifacts."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- dataset files

def write_dataset(root, split: str, data: Dataset, provenance: dict) -> Path:
    root = Path(root)
    (root / split).mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (video, action, attrs) in enumerate(zip(data.videos, data.y_t, data.y_b)):
        name = f"{split}/{i:06d}.tvid"
        write_tvid(root / name, video)
        entries.append({"file": name, "action": int(action), "attrs": [int(a) for a in attrs]})
    manifest = root / f"{split}.json"
    write_manifest(manifest, entries, {"split": split, "provenance": provenance})
    return manifest


def read_dataset(root, split: str) -> Dataset:
    root = Path(root)
    manifest = root / f"{split}.json"
    try:
        doc = read_manifest(manifest)
        samples = doc["samples"]
        videos = np.stack([read_tvid(root / s["file"]) for s in samples]) if samples else None
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read {split} split under {root}: {exc}") from exc
    if videos is None:
        raise DataError(f"{manifest}: no samples")
    y_t = np.array([s["action"] for s in samples], dtype=np.int64)
    y_b = np.array([s["attrs"] for s in samples], dtype=np.float64)
    return Dataset(videos, y_t, y_b)


def _load_params(path) -> dict:
    try:
        return an.load(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc


def _write_json(path, doc) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _mask_rows(masks: np.ndarray) -> list[str]:
    return ["".join("1" if b else "0" for b in row) for row in masks]


# ---------------------------------------------------------------- verbs

def cmd_gen(cfg: RunConfig, args) -> int:
    train, test = generate(cfg.synthetic())
    out = Path(cfg.io.data_dir)
    for split, data in zip(SPLITS, (train, test)):
        write_dataset(out, split, data, cfg.provenance())
    print(f"wrote {len(train)} train / {len(test)} test clips to {out}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    data = read_dataset(cfg.io.data_dir, "train")
    mcfg, tcfg = cfg.model_config(), cfg.train_config()
    prov = cfg.provenance()
    log_path = Path(cfg.io.loss_log)
    log_path.parent.mkdir(parents=True, exist_ok=True)
    lines = []

    def on_epoch(epoch, summary):
        lines.append(json.dumps({"epoch": epoch + 1, **summary.to_json(), "provenance": prov}, sort_keys=True))

    params, _ = an.train(data.videos, data.y_t, data.y_b, mcfg, tcfg, on_epoch=on_epoch)
    log_path.write_text("\n".join(lines) + "\n")
    ckpt = Path(cfg.io.checkpoint)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    an.save(ckpt, params)
    _write_json(ckpt.with_suffix(ckpt.suffix + ".json"), {"provenance": prov, "epochs": len(lines)})
    print(f"checkpoint {ckpt}  loss log {log_path} ({len(lines)} epochs)")
    return EXIT_OK


def cmd_anonymize(cfg: RunConfig, args) -> int:
    params = _load_params(args.checkpoint or cfg.io.checkpoint)
    mcfg = cfg.model_config()
    prov = cfg.provenance()
    out = Path(cfg.io.anon_dir)
    traces, masks = {}, {}
    for split in SPLITS:
        data = read_dataset(cfg.io.data_dir, split)
        anon = ev.anonymize_dataset(data, params, mcfg, fill=cfg.eval.fill)
        write_dataset(out, split, anon.data, prov)
        masks[split] = _mask_rows(anon.cell_masks)
        rows = []
        for batch in anon.traces:
            n = batch[0].kept_origin.shape[0] if batch else 0
            rows.extend([t.to_json(j) for t in batch] for j in range(n))
        traces[split] = rows
        print(f"{split}: {len(data)} clips, blanked fraction {anon.blanked_fraction:.4f}")
    _write_json(out / "traces.json", {"provenance": prov, "traces": traces})
    _write_json(out / "masks.json", {"provenance": prov, "grid": list(mcfg.grid), "masks": masks})
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    root = Path(args.data or cfg.io.anon_dir)
    train, test = (read_dataset(root, s) for s in SPLITS)
    report = ev.probe_metrics(train, test, cfg.probe_config(), keep_rate=cfg.prune.keep_rate)
    doc = {**report.to_json(), "data": str(root), "provenance": cfg.provenance()}
    doc["wall_s"] = doc["wall_s"] if args.timing else 0.0
    _write_json(args.out or cfg.io.metrics, doc)
    print(json.dumps(report.to_json(), sort_keys=True))
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, args) -> int:
    data_root = Path(cfg.io.data_dir)
    if (data_root / "train.json").exists():
        datasets = (read_dataset(data_root, "train"), read_dataset(data_root, "test"))
    else:
        datasets = generate(cfg.synthetic())
    reports = ev.sweep(cfg.eval.keep_rates, cfg.synthetic(), cfg.model_config(), cfg.train_config(),
                       cfg.probe_config(), datasets=datasets, jobs=args.jobs)
    if not args.timing:
        for rep in reports:
            rep.wall_s = 0.0
    out = Path(args.out or cfg.io.sweep_csv)
    out.parent.mkdir(parents=True, exist_ok=True)
    text = ev.sweep_csv(reports)
    out.write_text(text)
    _write_json(out.with_suffix(out.suffix + ".json"), {"provenance": cfg.provenance(),
                                                          "rows": [r.to_json() for r in reports]})
    sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    results = gradcheck.full_suite(seed=cfg.seed)
    for r in results:
        print(f"{r.name:<20} max_rel_err={r.rel_err:.3e}  tol={r.tol:.0e}  {'PASS' if r.ok else 'FAIL'}")
    ok = all(r.ok for r in results)
    print("gradcheck:", "PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_CHECK


def cmd_visualize(cfg: RunConfig, args) -> int:
    try:
        video = read_tvid(args.video)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read video {args.video}: {exc}") from exc
    params = _load_params(args.checkpoint or cfg.io.checkpoint)
    anon, _ = an.render_anonymized(video, params, cfg.model_config(), fill=cfg.eval.fill)
    out = Path(args.out or cfg.io.frames_dir)
    out.mkdir(parents=True, exist_ok=True)
    comment = f"tubeprune {__version__} left=raw right=anonymized\n" + json.dumps(cfg.to_dict(), sort_keys=True)
    for t in range(video.shape[0]):
        pair = np.concatenate([video[t], anon[t]], axis=-1)
        (out / f"frame_{t:04d}.ppm").write_bytes(frame_to_ppm(pair, comment))
    print(f"wrote {video.shape[0]} frame pairs to {out}")
    return EXIT_OK


VERBS = {
    "gen": (cmd_gen, "generate the synthetic dataset"),
    "train": (cmd_train, "adversarially train the anonymizer"),
    "anonymize": (cmd_anonymize, "render both splits through a trained anonymizer"),
    "eval": (cmd_eval, "train fresh probes and report action/privacy metrics"),
    "sweep": (cmd_sweep, "retrain and evaluate across keep rates, write CSV"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of every op and a tiny model"),
    "visualize": (cmd_visualize, "write raw|anonymized PPM frame pairs for one video"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tubeprune", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key by dotted path, e.g. train.epochs=2")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    for name, (_, help_text) in VERBS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name in ("anonymize", "visualize"):
            p.add_argument("--checkpoint", help="defaults to io.checkpoint")
        if name == "eval":
            p.add_argument("--data", help="dataset directory (defaults to io.anon_dir)")
        if name in ("eval", "sweep"):
            p.add_argument("--out", help="output path override")
            p.add_argument("--timing", action="store_true",
                           help="record measured wall_s (otherwise 0, keeping outputs byte-stable)")
        if name == "sweep":
            p.add_argument("--jobs", type=int, default=1, help="parallel keep-rate cells")
        if name == "visualize":
            p.add_argument("video", help="TVID file")
            p.add_argument("--out", help="frame directory (defaults to io.frames_dir)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config, args.set)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if getattr(args, "jobs", 1) < 1:
        print("--jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return VERBS[args.verb][0](cfg, args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except nm.ShapeError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
