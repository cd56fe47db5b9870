"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime error.
"""

from __future__ import annotations

import argparse
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, load_config
from .errors import ConfigError, ContainerError, DataError, FedGraphError
from .features import FeatureExtractor, decode_conv_weights, extract_all, load_conv_weights
from .federation import SPLIT_STREAM, run_training
from .gnn import ModelConfig, decode_checkpoint, evaluate, load_checkpoint, save_checkpoint
from .graphs import assemble_dataset, decode_gds, gds_metadata, read_gds, write_gds
from .io_utils import atomic_write_bytes, atomic_write_text
from .numerics import RngStream
from .signal_ingest import (
    LabelSet,
    decode_recording,
    labels_to_csv,
    load_labels,
    load_positions,
    load_recording,
    positions_to_csv,
    split_train_test,
    write_recording,
)
from .synthetic import generate

log = logging.getLogger("fedgraph")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4


def _require(path: Path, what: str) -> Path:
    if not path.is_file():
        raise ConfigError(f"{what} not found: {path}")
    return path


def _save_npy(path: Path, array: np.ndarray) -> None:
    buf = io.BytesIO()
    np.save(buf, array, allow_pickle=False)
    atomic_write_bytes(path, buf.getvalue())


def _load_features(path: Path) -> np.ndarray:
    try:
        return np.load(path, allow_pickle=False)
    except ValueError as exc:
        raise ContainerError(f"{path}: not a feature tensor ({exc})") from None


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def cmd_gen_synthetic(cfg: ExperimentConfig, args) -> int:
    rec_path = cfg.paths.resolve("recording")
    lab_path = cfg.paths.resolve("labels")
    pos_path = cfg.paths.resolve("positions")
    rec, labels, pos = generate(cfg.synthetic, cfg.seed)
    write_recording(rec, rec_path)
    atomic_write_text(lab_path, labels_to_csv(labels))
    atomic_write_text(pos_path, positions_to_csv(pos))
    print(f"wrote {rec_path} ({rec.n_channels} channels x {rec.n_epochs} epochs x {rec.samples_per_epoch} samples)")
    return EXIT_OK


def _extractor(cfg: ExperimentConfig) -> FeatureExtractor:
    if cfg.extractor.kind == "conv":
        if cfg.paths.conv_weights is None:
            raise ConfigError("extractor.kind=conv requires paths.conv_weights")
        weights = load_conv_weights(_require(Path(cfg.paths.conv_weights), "conv weights file"))
        return FeatureExtractor("conv", weights=weights)
    return FeatureExtractor("stat", n_bands=cfg.extractor.n_bands)


def cmd_extract(cfg: ExperimentConfig, args) -> int:
    rec_path = _require(cfg.paths.resolve("recording"), "recording")
    lab_path = _require(cfg.paths.resolve("labels"), "labels file")
    if cfg.extractor.kind == "conv":
        _require(Path(cfg.paths.conv_weights or ""), "conv weights file")
    out_path = cfg.paths.resolve("features")
    rec = load_recording(rec_path)
    labels = load_labels(lab_path, cfg.model.n_classes)
    if len(labels) != rec.n_epochs:
        raise DataError(f"{lab_path}: {len(labels)} labels for {rec.n_epochs} epochs")
    features = extract_all(rec, _extractor(cfg), workers=args.workers)
    _save_npy(out_path, features)
    print(f"wrote {out_path} {features.shape}")
    return EXIT_OK


def cmd_build_graphs(cfg: ExperimentConfig, args) -> int:
    feat_path = _require(cfg.paths.resolve("features"), "features file")
    lab_path = _require(cfg.paths.resolve("labels"), "labels file")
    pos = None
    if cfg.corr.kind == "DB":
        pos_path = _require(cfg.paths.resolve("positions"), "positions file (required for DB)")
        pos = load_positions(pos_path)
        rec_path = cfg.paths.resolve("recording")
        if rec_path.is_file():
            pos = pos.aligned_to(load_recording(rec_path).channel_names)
    out_path = cfg.paths.resolve("graphs")
    features = _load_features(feat_path)
    labels = load_labels(lab_path, cfg.model.n_classes)
    samples = assemble_dataset(features, labels, cfg.corr, pos, workers=args.workers)
    meta = gds_metadata(samples, cfg.corr.kind, cfg.extractor.kind, cfg.model.n_classes)
    write_gds(samples, meta, out_path)
    print(f"wrote {out_path} ({len(samples)} graphs, corr={cfg.corr.kind})")
    return EXIT_OK


def _model_config(cfg: ExperimentConfig, in_dim: int) -> ModelConfig:
    m = cfg.model
    return ModelConfig(
        in_dim=in_dim,
        n_layers=m.n_layers,
        hidden_dim=m.hidden_dim,
        n_classes=m.n_classes,
        dropout_rate=m.dropout_rate,
    )


def cmd_train(cfg: ExperimentConfig, args) -> int:
    gds_path = _require(cfg.paths.resolve("graphs"), "graph dataset")
    out_dir = Path(cfg.paths.output_dir) / args.mode
    samples, meta = read_gds(gds_path)
    if int(meta.get("n_classes", cfg.model.n_classes)) != cfg.model.n_classes:
        raise ConfigError(f"{gds_path} has n_classes={meta['n_classes']} but model.n_classes={cfg.model.n_classes}")
    model_cfg = _model_config(cfg, int(meta["d"]))

    def progress(rep):
        log.info("round %d test_loss=%.4f macro_f1=%.4f", rep.round, rep.test_loss, rep.metrics.macro_f1)

    result = run_training(
        samples,
        args.mode,
        cfg.federation,
        model_cfg,
        cfg.seed,
        workers=args.workers,
        corr_kind=meta.get("corr_kind", ""),
        progress=progress,
    )
    atomic_write_text(out_dir / "metrics.json", result.metrics_json())
    atomic_write_text(out_dir / "losses.csv", result.losses_csv())
    save_checkpoint(result.weights, model_cfg, out_dir / "model.mwt")
    atomic_write_text(out_dir / "config.json", cfg.to_json())
    f = result.final
    print(f"{args.mode}: rounds={result.rounds} accuracy={f.accuracy:.4f} macro_f1={f.macro_f1:.4f} -> {out_dir}")
    return EXIT_OK


def cmd_evaluate(cfg: ExperimentConfig, args) -> int:
    gds_path = _require(cfg.paths.resolve("graphs"), "graph dataset")
    ckpt = cfg.paths.checkpoint or str(Path(cfg.paths.output_dir) / args.mode / "model.mwt")
    ws, model_cfg = load_checkpoint(_require(Path(ckpt), "checkpoint"))
    samples, _ = read_gds(gds_path)
    if not args.all:
        labels = LabelSet(np.array([g.y for g in samples]), model_cfg.n_classes)
        split = split_train_test(labels, cfg.federation.test_ratio, RngStream(cfg.seed, SPLIT_STREAM))
        samples = [samples[i] for i in split.test]
    metrics = evaluate(ws, samples, model_cfg)
    doc = metrics.to_dict() | {"loss": metrics.loss, "n_samples": len(samples)}
    print(json.dumps(doc, indent=2))
    return EXIT_OK


def _describe(path: Path) -> dict:
    data = path.read_bytes()
    if data.startswith(b"STSQ1"):
        rec = decode_recording(data)
        return {
            "type": "recording",
            "n_channels": rec.n_channels,
            "n_epochs": rec.n_epochs,
            "samples_per_epoch": rec.samples_per_epoch,
            "sample_rate": rec.sample_rate,
            "channels": rec.channel_names,
        }
    if data.startswith(b"CPW1"):
        w = decode_conv_weights(data)
        return {"type": "conv-weights", "layers": [[list(t.shape) for t in l.tensors()] for l in w.layers]}
    if data.startswith(b"MWT1"):
        ws, mc = decode_checkpoint(data)
        return {"type": "checkpoint", "config": mc.__dict__, "n_params": ws.n_params}
    if data.startswith(b"\x93NUMPY"):
        arr = _load_features(path)
        return {"type": "features", "shape": list(arr.shape)}
    try:
        samples, meta = decode_gds(data.decode("utf-8"))
    except (UnicodeDecodeError, ContainerError):
        raise ContainerError(f"{path}: unrecognised file format") from None
    counts = np.bincount([g.y for g in samples], minlength=int(meta.get("n_classes", 1)))
    return {"type": "graphs", "metadata": meta, "n_samples": len(samples), "class_counts": counts.tolist()}


def cmd_inspect(cfg: ExperimentConfig, args) -> int:
    path = _require(Path(args.path), "file")
    print(json.dumps(_describe(path), indent=2))
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON)")
    common.add_argument("--seed", type=int, help="master seed (overrides config)")
    common.add_argument("--workers", type=int, default=1, help="maximum worker threads")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. federation.epochs=3")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="fedgraph", description="Federated GNN training on correlation graphs.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-synthetic", parents=[common], help="write a synthetic recording, labels and positions")
    sub.add_parser("extract", parents=[common], help="extract node features from a recording")
    sub.add_parser("build-graphs", parents=[common], help="build the graph dataset from features")
    p = sub.add_parser("train", parents=[common], help="federated or centralized training")
    p.add_argument("--mode", choices=("federated", "centralized"), default="federated")
    p = sub.add_parser("evaluate", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--mode", choices=("federated", "centralized"), default="federated")
    p.add_argument("--all", action="store_true", help="evaluate on every sample instead of the test split")
    p = sub.add_parser("inspect", parents=[common], help="summarise a pipeline file")
    p.add_argument("path")
    return parser


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "extract": cmd_extract,
    "build-graphs": cmd_build_graphs,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "inspect": cmd_inspect,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.workers < 1:
            raise ConfigError("--workers must be at least 1")
        cfg = load_config(args.config, args.overrides, args.seed)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FedGraphError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        log.debug("unhandled", exc_info=True)
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
