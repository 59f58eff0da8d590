"""Command line interface for dataset generation, training, evaluation, ablation and verification.

Exit codes: 0 success, 1 usage or config error, 2 verification failure, 3 non-finite loss.
Every command that writes files stages them and moves them into ``--out`` only on success.
"""

import argparse
import csv
import dataclasses
import importlib.metadata
import logging
import pathlib

import numpy as np
from result import Err, Ok, Result

from darkformer import checkpoint, clipfile
from darkformer import tensor as T
from darkformer.cli import EXIT_NUMERIC, EXIT_VERIFICATION, exit_with_error, staged_output
from darkformer.config import RunConfig, grid_cells, load_config, parse_grid, parse_pairs, parse_set_flags
from darkformer.gradcheck import run_gradcheck
from darkformer.log import configure_logging, verbosity_to_level
from darkformer.model import ModelParams, forward_branch, forward_bridge
from darkformer.synth import PairedDataset, make_dataset
from darkformer.tokenizer import sample_frames
from darkformer.training import (
    NonFiniteLossError,
    ablate,
    build_model,
    evaluate_split,
    train,
    write_ablation_csv,
    write_confusion_csv,
    write_metrics_csv,
)
from darkformer.types import Domain

logger = logging.getLogger(__name__)

CONFIG_FILE = "config.txt"
CHECKPOINT_FILE = "checkpoint.dktf"


def _config(args: argparse.Namespace, base: RunConfig | None = None) -> RunConfig:
    match parse_set_flags(args.set or []):
        case Ok(overrides):
            pass
        case Err(msg):
            exit_with_error(msg)
            raise AssertionError("unreachable")
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    match load_config(args.config, overrides, base):
        case Ok(cfg):
            T.set_precision(cfg.precision)
            return cfg
        case Err(msg):
            exit_with_error(msg)
    raise AssertionError("unreachable")


def _dataset(path: pathlib.Path) -> PairedDataset:
    match clipfile.load_dataset(path):
        case Ok(dataset):
            return dataset
        case Err(msg):
            exit_with_error(msg)
    raise AssertionError("unreachable")


def _model(path: pathlib.Path) -> tuple[RunConfig, ModelParams]:
    match checkpoint.load(path):
        case Ok(ckpt):
            pass
        case Err(msg):
            exit_with_error(msg)
            raise AssertionError("unreachable")
    match parse_pairs(ckpt.config_text).and_then(lambda pairs: load_config(None, pairs)):
        case Ok(cfg):
            pass
        case Err(msg):
            exit_with_error(f"{path}: embedded config: {msg}")
            raise AssertionError("unreachable")
    T.set_precision(cfg.precision)
    match checkpoint.to_params(ckpt, cfg.model_config()):
        case Ok(params):
            return cfg, params
        case Err(msg):
            exit_with_error(f"{path}: {msg}")
    raise AssertionError("unreachable")


def _check(result: Result[object, str]) -> None:
    if result.is_err():
        exit_with_error(str(result.unwrap_err()))


def cmd_gen_data(args: argparse.Namespace) -> None:
    """Write the synthetic dataset and its manifest."""
    cfg = _config(args)
    dataset = make_dataset(cfg.synth_config())
    with staged_output(args.out) as out:
        _check(clipfile.save_dataset(dataset, out))
        (out / CONFIG_FILE).write_text(cfg.to_text())
    print(f"wrote {len(dataset.train_source)} training pairs and "
          f"{len(dataset.test_source) + len(dataset.test_target)} test clips to {args.out}")


def cmd_train(args: argparse.Namespace) -> None:
    """Train from scratch and write checkpoint, metrics and the final target confusion matrix."""
    cfg = _config(args)
    dataset = _dataset(args.data)
    params = build_model(cfg)
    with staged_output(args.out) as out:
        (out / CONFIG_FILE).write_text(cfg.to_text())
        try:
            result = train(params, dataset, cfg)
        except NonFiniteLossError as ex:
            exit_with_error(str(ex), EXIT_NUMERIC)
            return
        match result:
            case Ok((params, records)):
                pass
            case Err(msg):
                exit_with_error(msg)
                return
        _check(checkpoint.save(out / CHECKPOINT_FILE, cfg.to_text(), params.tensors))
        write_metrics_csv(out / "metrics.csv", records)
        write_confusion_csv(out / "confusion.csv", records[-1].target.confusion)
    final = records[-1]
    print(f"source top1 = {final.source.top1:.4f}")
    print(f"target top1 = {final.target.top1:.4f}")


def cmd_eval(args: argparse.Namespace) -> None:
    """Single-branch evaluation of one test split of a dataset."""
    cfg, params = _model(args.checkpoint)
    dataset = _dataset(args.data)
    if dataset.num_classes != cfg.num_classes:
        exit_with_error(f"dataset has {dataset.num_classes} classes, checkpoint expects {cfg.num_classes}")
    domain = Domain.from_string(args.split)
    match evaluate_split(params, dataset, domain):
        case Ok(result):
            pass
        case Err(msg):
            exit_with_error(msg)
            return
    out_dir = args.out or args.checkpoint.parent / f"eval-{domain.tag}"
    with staged_output(out_dir) as out:
        (out / CONFIG_FILE).write_text(cfg.to_text())
        write_confusion_csv(out / "confusion.csv", result.confusion)
    print(f"top1 = {result.top1:.4f}")
    if result.top5 is not None:
        print(f"top5 = {result.top5:.4f}")


def cmd_ablate(args: argparse.Namespace) -> None:
    """Train every cell of an ablation grid over the configured seeds."""
    cfg = _config(args)
    try:
        grid_text = args.grid.read_text()
    except OSError as ex:
        exit_with_error(f"Can't read grid {args.grid}: {ex}")
        return
    match parse_grid(grid_text):
        case Ok(axes):
            pass
        case Err(msg):
            exit_with_error(f"{args.grid}: {msg}")
            return
    cells = grid_cells(axes)
    if args.data is not None:
        dataset = _dataset(args.data)
    else:
        longest = max(cfg.clip_spec().raw_frames, *(_raw_frames(cfg, cell) for cell in cells))
        dataset = make_dataset(dataclasses.replace(cfg.synth_config(), raw_frames=longest))
    with staged_output(args.out) as out:
        (out / CONFIG_FILE).write_text(cfg.to_text())
        (out / "grid.txt").write_text(grid_text)
        try:
            result = ablate(dataset, cfg, cells)
        except NonFiniteLossError as ex:
            exit_with_error(str(ex), EXIT_NUMERIC)
            return
        match result:
            case Ok(rows):
                pass
            case Err(msg):
                exit_with_error(msg)
                return
        write_ablation_csv(out / "ablation.csv", [key for key, _ in axes], rows)
    for row in rows:
        print(f"{row.cell}: target top1 = {row.target_top1:.4f}, scores/layer = {row.attention_scores}")


def _raw_frames(cfg: RunConfig, cell: dict[str, str]) -> int:
    match cfg.with_overrides(cell):
        case Ok(cell_cfg):
            return cell_cfg.clip_spec().raw_frames
        case Err(msg):
            exit_with_error(f"grid cell {cell}: {msg}")
    raise AssertionError("unreachable")


def cmd_gradcheck(args: argparse.Namespace) -> None:
    """Finite-difference verification of every primitive and the full objective."""
    cfg = _config(args, base=RunConfig.tiny())
    report = run_gradcheck(cfg)
    for result in report.results:
        print(result)
    if not report.passed:
        exit_with_error(f"{len(report.failures())} gradient checks failed", EXIT_VERIFICATION)


def _read_sampled(path: pathlib.Path, domain: Domain, cfg: RunConfig) -> np.ndarray:
    match clipfile.read_clip(path, domain).and_then(lambda value: sample_frames(value[0], cfg.clip_spec())):
        case Ok(clip):
            return clip.frames[None]
        case Err(msg):
            exit_with_error(f"{path}: {msg}")
    raise AssertionError("unreachable")


def cmd_export_attn(args: argparse.Namespace) -> None:
    """Dump attention maps and class-token features of a source/target clip pair."""
    cfg, params = _model(args.checkpoint)
    source_frames = _read_sampled(args.clip[0], Domain.Source, cfg)
    target_frames = _read_sampled(args.clip[1], Domain.Target, cfg)
    with T.no_grad():
        source = forward_branch(source_frames, params, keep_maps=True)
        target = forward_branch(target_frames, params, keep_maps=True)
        bridge = forward_bridge(source, target, params, keep_maps=True)
    branches = {"source": source, "target": target, "bridge": bridge}
    with staged_output(args.out) as out:
        (out / CONFIG_FILE).write_text(cfg.to_text())
        for branch, output in branches.items():
            for layer, maps in enumerate(output.maps):
                dense = {kind: amap.dense()[0] for kind, amap in maps.items()}
                for head in range(cfg.heads):
                    with open(out / f"attn_{branch}_l{layer}_h{head}.csv", "w", newline="") as f:
                        writer = csv.writer(f, lineterminator="\n")
                        size = next(iter(dense.values())).shape[-1]
                        writer.writerow(["pass", "query", *(f"k{j}" for j in range(size))])
                        for kind, matrix in dense.items():
                            for query, row in enumerate(matrix[head]):
                                writer.writerow([kind, query, *(f"{v:.17g}" for v in row)])
        features = {branch: output.features.data[0] for branch, output in branches.items()}
        with open(out / "features.csv", "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["branch", *(f"f{i}" for i in range(cfg.dim))])
            for branch, vector in features.items():
                writer.writerow([branch, *(f"{v:.17g}" for v in vector)])
        a, b = features["source"], features["target"]
        cosine = float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b) + 1e-12))
        with open(out / "summary.csv", "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["key", "value"])
            writer.writerow(["cosine_source_target", f"{cosine:.17g}"])
            for branch, output in branches.items():
                writer.writerow([f"predicted_{branch}", int(np.argmax(output.logits.data[0]))])
    print(f"cosine_source_target = {cosine:.6f}")


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("-c", "--config", type=pathlib.Path, default=None, help="key = value config file")
    parser.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="Override a config key. May be given several times.",
    )
    parser.add_argument("--seed", type=int, default=None, help="Override the config seed")


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with one subcommand per operation."""
    parser = argparse.ArgumentParser(prog="dktf")
    parser.add_argument(
        "-v",
        "--verbose",
        action="count",
        default=0,
        help="Verbose output (-v info, -vv debug)",
    )
    parser.add_argument(
        "--version",
        action="version",
        version="%(prog)s {version}".format(version=importlib.metadata.version("darkformer")),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="Generate the synthetic paired-domain dataset")
    _common(p)
    p.add_argument("-o", "--out", type=pathlib.Path, required=True, help="Dataset directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="Train a model and write checkpoint and metrics")
    _common(p)
    p.add_argument("-d", "--data", type=pathlib.Path, required=True, help="Dataset directory")
    p.add_argument("-o", "--out", type=pathlib.Path, required=True, help="Run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Evaluate a checkpoint on one test split")
    p.add_argument("-k", "--checkpoint", type=pathlib.Path, required=True, help="Checkpoint file")
    p.add_argument("-d", "--data", type=pathlib.Path, required=True, help="Dataset directory")
    p.add_argument("-s", "--split", choices=("source", "target", "src", "tgt"), default="target")
    p.add_argument("-o", "--out", type=pathlib.Path, default=None, help="Output directory for confusion.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="Run an ablation grid")
    _common(p)
    p.add_argument("-g", "--grid", type=pathlib.Path, required=True, help="Grid file: key = v1, v2, ...")
    p.add_argument("-d", "--data", type=pathlib.Path, default=None, help="Dataset directory (generated if omitted)")
    p.add_argument("-o", "--out", type=pathlib.Path, required=True, help="Output directory")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="Finite-difference gradient verification")
    _common(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-attn", help="Export attention maps and features of a clip pair")
    p.add_argument("-k", "--checkpoint", type=pathlib.Path, required=True, help="Checkpoint file")
    p.add_argument(
        "--clip", type=pathlib.Path, nargs=2, required=True, metavar=("SOURCE", "TARGET"), help="Two .dkvc clips"
    )
    p.add_argument("-o", "--out", type=pathlib.Path, required=True, help="Output directory")
    p.set_defaults(func=cmd_export_attn)
    return parser


def main() -> None:
    """A command line interface to train and verify the triple-branch video transformer.

    Parameters:
    -----------
        None

    Returns:
    --------
        None
    """
    args = build_parser().parse_args()
    if args.verbose:
        configure_logging(verbosity_to_level(args.verbose))
    args.func(args)


if __name__ == "__main__":
    main()
