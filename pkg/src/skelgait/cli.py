"""skelgait command line: synth | train | eval | embed."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import ConfigError, RunConfig
from .data import (
    SequenceError,
    assemble_sequence,
    build_protocol,
    load_dataset,
    normalize_sequence,
    parse_sequence_name,
    write_sequence,
)
from .evaluate import evaluate, render_report
from .graph import PARTITION_STRATEGIES
from .nn import DEPTHS, embed
from .synth import generate_dataset, generate_from_manifest, read_manifest, write_manifest
from .train import (
    TrainingDivergedError,
    format_loss_trace,
    load_checkpoint,
    restore_model,
    save_checkpoint,
    train,
)

MANIFEST_NAME = "manifest.json"


def _shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat dotted-key TOML config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--data-dir")
    p.add_argument("--out-dir")
    p.add_argument("--partition", choices=PARTITION_STRATEGIES)
    p.add_argument("--depth", choices=DEPTHS)
    p.add_argument("--margin", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--checkpoint")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="skelgait", description="Skeleton gait embedding toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("synth", help="write a synthetic walker dataset and its manifest")
    _shared(p)
    p.add_argument("--manifest", help="regenerate exactly from an existing manifest")
    p.add_argument("--num-ids", type=int)
    p.add_argument("--seqs-per-id", type=int)
    p = sub.add_parser("train", help="batch-hard triplet training")
    _shared(p)
    p = sub.add_parser("eval", help="rank-1 gallery/probe evaluation")
    _shared(p)
    p.add_argument("--self-match", action="store_true", help="use the gallery as its own probe set")
    p = sub.add_parser("embed", help="embed one keypoint sequence directory")
    _shared(p)
    p.add_argument("--sequence", required=True, help="directory of per-frame keypoint JSON files")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides = {
        "seed": args.seed,
        "data.dir": args.data_dir,
        "out.dir": args.out_dir,
        "net.partition": args.partition,
        "net.depth": args.depth,
        "train.margin": args.margin,
        "train.epochs": args.epochs,
        "synth.num_ids": getattr(args, "num_ids", None),
        "synth.seqs_per_id": getattr(args, "seqs_per_id", None),
    }
    return RunConfig.load(args.config, overrides)


def _model_from_checkpoint(cfg: RunConfig, path):
    if path is None:
        raise ConfigError("--checkpoint is required")
    ckpt = load_checkpoint(path)
    # network keys set in the config or on the command line must match the checkpoint
    net = ckpt.network_config()
    if cfg.explicit & {k for k in cfg.values if k.startswith(("net.", "layout."))}:
        net = cfg.network_config()
    return restore_model(ckpt, net)


def cmd_synth(cfg: RunConfig, args) -> int:
    out = Path(cfg["data.dir"])
    if args.manifest:
        manifest = read_manifest(args.manifest)
        seqs = generate_from_manifest(manifest)
    else:
        seqs, manifest = generate_dataset(cfg.synth_config())
    out.mkdir(parents=True, exist_ok=True)
    for s in seqs:
        write_sequence(s, out)
    write_manifest(manifest, out / MANIFEST_NAME)
    cfg.echo(out)
    print(f"wrote {len(seqs)} sequences to {out}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    data = load_dataset(cfg["data.dir"], cfg.layout())
    proto = build_protocol(data, cfg.protocol_spec())
    out = Path(cfg["out.dir"])
    cfg.echo(out)
    tcfg = cfg.train_config()
    result = train(proto.train, tcfg, cfg.network_config(), checkpoint_dir=out,
                   on_step=lambda s, l: print(f"step {s} loss {l:.4f}", flush=True) if s % 25 == 0 else None)
    (out / "loss.csv").write_text(format_loss_trace(result.losses))
    path = result.checkpoint_path
    if args.checkpoint:
        path = save_checkpoint(result.model, args.checkpoint, result.optimizer, tcfg)
    print(f"checkpoint: {path}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    model = _model_from_checkpoint(cfg, args.checkpoint)
    data = load_dataset(cfg["data.dir"], model.layout)
    proto = build_protocol(data, cfg.protocol_spec())
    report = evaluate(model, proto, gallery_as_probe=args.self_match)
    out = Path(cfg["out.dir"])
    cfg.echo(out)
    text = render_report(report)
    (out / "report.txt").write_text(text)
    (out / "report.csv").write_text(render_report(report, "csv"))
    print(text, end="")
    return 0


def cmd_embed(cfg: RunConfig, args) -> int:
    model = _model_from_checkpoint(cfg, args.checkpoint)
    seq_dir = Path(args.sequence)
    try:
        meta = parse_sequence_name(seq_dir.name)
    except SequenceError:
        meta = {"identity": seq_dir.name}
    seq = assemble_sequence(seq_dir, model.layout, meta)
    x = normalize_sequence(seq, model.layout).to_network_input().astype(model.dtype)
    vec = embed(model, x)
    out = Path(cfg["out.dir"])
    cfg.echo(out)
    path = out / f"{seq_dir.name}.embedding.csv"
    path.write_text(",".join(repr(float(v)) for v in vec) + "\n")
    print(f"embedding: {path}")
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "embed": cmd_embed}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except (ValueError, OSError, KeyError, TrainingDivergedError) as exc:
        print(f"skelgait {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
