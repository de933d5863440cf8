"""Command-line entry point: ``smsge <subcommand>``.

The pipeline is staged through files::

    gen-synthetic -> manifest + sequences
    pretrain      -> checkpoint
    embed         -> features
    probe-train   -> probe
    evaluate      -> JSON report (+ optional CMC CSV)
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ABLATION_ALIASES, ConfigError, TrainConfig
from .data import SPLIT_POLICIES, DataError, DatasetManifest, generate_synthetic, parse_sequence, \
    split_dataset, write_dataset
from .graph import NUM_SCALES, PRESETS, SCALE_NAMES, SkeletonSpec, TopologyError, \
    build_multiscale, rest_pose
from .probe import FeatureSet, ProbeError, evaluate, extract_features, load_features, load_probe, \
    save_features, save_probe, train_probe
from .trainer import TrainingError, grad_check, max_error, pretrain, toy_instance

EXPECTED_ERRORS = (ConfigError, DataError, TopologyError, CheckpointError, ProbeError,
                   TrainingError, OSError)

# CLI flag -> TrainConfig field
CONFIG_FLAGS = {
    "lr": "learning_rate", "epochs": "epochs", "batch_size": "batch_size", "seed": "seed",
    "frames": "frames", "rounds": "rounds", "t1": "temperature_struct",
    "t2": "temperature_collab", "lambda_c": "fusion_coefficient", "heads": "heads",
    "feature_dim": "feature_dim", "hidden_dim": "hidden_dim", "threads": "threads",
    "dtype": "dtype", "grad_clip": "grad_clip",
}


class CliError(Exception):
    pass


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return value


def _env_seed() -> int | None:
    raw = os.environ.get("SMSGE_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise CliError(f"SMSGE_SEED must be an integer, got {raw!r}") from None


def _seed(args, default: int = 0) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = _env_seed()
    return default if env is None else env


def _log_run(args, extra: dict | None = None) -> None:
    record = {"command": args.command,
              "args": {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
                       if k not in ("func", "command")}}
    if extra:
        record.update(extra)
    line = json.dumps(record, sort_keys=True)
    print(f"run {line}", file=sys.stderr)
    if getattr(args, "run_log", None):
        with open(args.run_log, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")


def resolve_config(args) -> TrainConfig:
    """Defaults, then the JSON config file, then explicit flags."""
    config = TrainConfig.load(args.config) if args.config else TrainConfig()
    changes = {field: getattr(args, flag) for flag, field in CONFIG_FLAGS.items()
               if getattr(args, flag, None) is not None}
    if "seed" not in changes and args.config is None:
        env = _env_seed()
        if env is not None:
            changes["seed"] = env
    config = dataclasses.replace(config, **changes)
    if args.ablate:
        config = config.with_ablations(args.ablate)
    config.validate()
    return config


def _split(manifest: DatasetManifest, sequences, policy: str | None, seed: int):
    if policy is None:
        policy = "tags" if all(s.split for s in sequences) else "leave-one-out"
    return split_dataset(sequences, policy, seed)


# Subcommands ------------------------------------------------------------------

def cmd_gen_synthetic(args) -> int:
    seed = _seed(args)
    _log_run(args, {"seed": seed})
    manifest, seqs = generate_synthetic(args.ids, args.seqs, args.frames, args.preset, seed,
                                        args.noise, views=args.views)
    path = write_dataset(manifest, seqs, args.out)
    print(f"wrote {len(seqs)} sequences and {path}")
    return 0


def cmd_pretrain(args) -> int:
    config = resolve_config(args)
    manifest = DatasetManifest.load(args.manifest)
    spec = manifest.spec()
    sequences = manifest.load_sequences(config.frames)
    train, _ = _split(manifest, sequences, args.split_policy, config.seed)
    _log_run(args, {"config": config.to_dict(), "train_sequences": len(train)})
    resume = load_checkpoint(args.resume) if args.resume else None

    def report(epoch, loss):
        print(f"epoch {epoch} loss {loss:.6f}", flush=True)

    ckpt = pretrain(train, config, spec, resume=resume, on_epoch=report)
    save_checkpoint(ckpt, args.out)
    print(f"wrote checkpoint {args.out}")
    return 0


def cmd_embed(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    manifest = DatasetManifest.load(args.manifest)
    if SkeletonSpec.from_dict(ckpt.skeleton).to_dict()["edges"] != manifest.spec().to_dict()["edges"]:
        raise CliError("checkpoint topology does not match the manifest's skeleton")
    sequences = manifest.load_sequences(ckpt.config.frames)
    seed = _seed(args, ckpt.config.seed)
    train, test = _split(manifest, sequences, args.split_policy, seed)
    _log_run(args, {"seed": seed})
    ordered = train + test
    feats = extract_features(ordered, ckpt, manifest.normalize)
    fs = FeatureSet(feats, [s.identity for s in ordered], [s.source for s in ordered],
                    ["train"] * len(train) + ["test"] * len(test))
    save_features(fs, args.out)
    print(f"wrote features {feats.shape} to {args.out}")
    return 0


def cmd_probe_train(args) -> int:
    fs = load_features(args.features).subset("train")
    if not fs.identities:
        raise CliError("feature file has no training sequences")
    seed = _seed(args)
    _log_run(args, {"seed": seed})
    probe = train_probe(fs.features, fs.identities, epochs=args.epochs, lr=args.lr, seed=seed)
    save_probe(probe, args.out)
    print(f"wrote probe ({probe.num_classes} classes) to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    if not Path(args.probe).is_file():
        raise CliError(f"probe file not found: {args.probe}")
    probe = load_probe(args.probe)
    fs = load_features(args.features).subset(args.split)
    if not fs.identities:
        raise CliError(f"feature file has no {args.split!r} sequences")
    _log_run(args)
    report = evaluate(fs.features, fs.identities, probe)
    print(f"rank1 {report.rank1:.4f}")
    print(f"nauc {report.nauc:.4f}")
    if args.out:
        report.save_json(args.out)
    if args.csv:
        report.save_csv(args.csv)
    return 0


def cmd_inspect_graph(args) -> int:
    spec = SkeletonSpec.resolve(args.preset)
    if args.frame:
        frame = parse_sequence(args.frame, spec.joint_count).frames[args.index]
    elif spec.topology.preset_name in PRESETS:
        frame = rest_pose(spec.topology.preset_name)
    else:
        frame = np.zeros((spec.joint_count, 3))
    (ms,) = build_multiscale(frame[None], spec, normalize=not args.raw)
    print(f"topology {spec.topology.preset_name}: {spec.joint_count} joints, root {spec.topology.root}")
    for m in range(NUM_SCALES):
        g = ms[m]
        print(f"scale {m} ({SCALE_NAMES[m]}): {g.num_nodes} nodes, {len(g.edges)} edges")
        for i, (pos, nb) in enumerate(zip(g.positions, g.neighbors)):
            coords = " ".join(f"{v:.4f}" for v in pos)
            print(f"  node {i}: [{coords}] neighbors {list(nb)}")
    return 0


def cmd_grad_check(args) -> int:
    seed = _seed(args)
    _log_run(args, {"seed": seed})
    inst = toy_instance(seed)
    errors = grad_check(inst, args.groups or None, args.epsilon)
    for group, err in errors.items():
        print(f"{group} {err:.3e}")
    worst = max_error(errors)
    ok = worst < args.tolerance
    print(f"max relative error {worst:.3e} ({'pass' if ok else 'FAIL'} at {args.tolerance:g})")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smsge", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="write a synthetic walking-skeleton dataset")
    p.add_argument("--ids", type=_positive_int, default=5)
    p.add_argument("--seqs", type=_positive_int, default=4)
    p.add_argument("--frames", type=_positive_int, default=6)
    p.add_argument("--preset", choices=sorted(PRESETS), default="kinect20")
    p.add_argument("--noise", type=float, default=0.005)
    p.add_argument("--views", type=_positive_int, default=1)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--run-log", type=Path)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("pretrain", help="self-supervised pretraining")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--config", type=Path, help="JSON TrainConfig; flags override it")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--resume", type=Path)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--rounds", type=int)
    p.add_argument("--t1", type=float)
    p.add_argument("--t2", type=float)
    p.add_argument("--lambda-c", type=float)
    p.add_argument("--heads", type=int)
    p.add_argument("--feature-dim", type=int)
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--grad-clip", type=float)
    p.add_argument("--dtype", choices=("float64", "float32"))
    p.add_argument("--threads", type=int)
    p.add_argument("--ablate", action="append", default=[],
                   choices=sorted(ABLATION_ALIASES) + sorted(ABLATION_ALIASES.values()),
                   help="switch a component off (repeatable)")
    p.add_argument("--split-policy", choices=SPLIT_POLICIES)
    p.add_argument("--run-log", type=Path)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("embed", help="extract frozen per-frame features")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--split-policy", choices=SPLIT_POLICIES)
    p.add_argument("--seed", type=int)
    p.add_argument("--run-log", type=Path)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("probe-train", help="train the Re-ID classifier on frozen features")
    p.add_argument("--features", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--epochs", type=_positive_int, default=100)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int)
    p.add_argument("--run-log", type=Path)
    p.set_defaults(func=cmd_probe_train)

    p = sub.add_parser("evaluate", help="Rank-1 / nAUC / CMC of a probe")
    p.add_argument("--features", type=Path, required=True)
    p.add_argument("--probe", type=Path, required=True)
    p.add_argument("--split", choices=("test", "train"), default="test")
    p.add_argument("--out", type=Path)
    p.add_argument("--csv", type=Path)
    p.add_argument("--run-log", type=Path)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inspect-graph", help="print the four graph scales of one frame")
    p.add_argument("--preset", default="kinect20", help="preset name or topology JSON file")
    p.add_argument("--frame", type=Path, help="sequence file; defaults to the preset rest pose")
    p.add_argument("--index", type=int, default=0, help="frame index within --frame")
    p.add_argument("--raw", action="store_true", help="skip root centering")
    p.set_defaults(func=cmd_inspect_graph)

    p = sub.add_parser("grad-check", help="finite-difference check on a toy instance")
    p.add_argument("--epsilon", type=float, default=1e-6)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--groups", nargs="*", help="parameter groups, e.g. mgrn.node_map.1")
    p.add_argument("--seed", type=int)
    p.add_argument("--run-log", type=Path)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, *EXPECTED_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
