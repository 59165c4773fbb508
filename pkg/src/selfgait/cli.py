"""Command-line entry points: ``synth``, ``pretrain``, ``finetune``, ``eval``.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numeric failure during training.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import contextmanager
from pathlib import Path

import filelock
import torch

from .checkpoint import load_checkpoint
from .config import SCHEMA, RunConfig, format_value, parse_assignments
from .data import (
    DatasetIndex, generate_synthetic_dataset, index_casia_b, index_ou_mvlp, limit_sequences, protocol_split,
    select_fraction, write_casia_b,
)
from .errors import CheckpointError, ConfigError, NumericFailure, SelfGaitError, ShapeMismatch
from .evaluation import PROTOCOL_PRESETS, Protocol, evaluate, render_report
from .finetune import backbone_from_checkpoint, build_backbone, finetune
from .pretrain import build_networks, pretrain
from .rng import stream

logger = logging.getLogger("selfgait")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
RESOLVED_NAME = "resolved_config.txt"


class UsageError(SelfGaitError):
    pass


# ---------------------------------------------------------------- helpers

@contextmanager
def locked_output(out: Path):
    """Create ``out`` and hold an exclusive lock on it for the command's lifetime."""
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(e.errno, f"cannot create output directory {out}: {e.strerror}") from None
    lock = filelock.FileLock(str(out / ".lock"), timeout=0)
    try:
        lock.acquire()
    except filelock.Timeout:
        raise UsageError(f"output directory {out} is in use by another command") from None
    try:
        yield out
    finally:
        lock.release()


def load_index(cfg: RunConfig) -> DatasetIndex:
    if not cfg.data_root:
        raise UsageError("no dataset root given (--data-root or data_root)")
    root = Path(cfg.data_root)
    if not root.is_dir():
        raise UsageError(f"dataset root {root} does not exist")
    index = index_casia_b(root) if cfg.layout == "casia_b" else index_ou_mvlp(root)
    for w in index.warnings:
        logger.warning("layout: %s: %s", w.path, w.reason)
    if len(index) == 0:
        raise UsageError(f"no sequences found under {root}")
    return index


def split_ids(cfg: RunConfig, index: DatasetIndex) -> tuple[list[str], list[str]]:
    """Train/test identities.  Under ``custom`` an empty list means "all the others"."""
    ids = index.identities
    if cfg.split == "all":
        return list(ids), []
    if cfg.split != "custom":
        return protocol_split(index, cfg.split)
    train, test = list(cfg.train_ids), list(cfg.test_ids)
    unknown = sorted(set(train + test) - set(ids))
    if unknown:
        raise UsageError(f"split names identities not in the dataset: {unknown[:5]}")
    if not train and not test:
        raise UsageError("split = custom needs train_ids or test_ids")
    if not train:
        train = [i for i in ids if i not in set(test)]
    elif not test:
        test = [i for i in ids if i not in set(train)]
    return protocol_split(index, "custom", train, test)


def eval_protocol(cfg: RunConfig) -> Protocol:
    if cfg.eval_protocol != "custom":
        return PROTOCOL_PRESETS[cfg.eval_protocol]
    cond_seqs = tuple(cfg.condition_probe_sequences)
    return Protocol("custom", ("NM", tuple(cfg.gallery_sequences)),
                    {"NM": ("NM", tuple(cfg.probe_sequences)), "BG": ("BG", cond_seqs), "CL": ("CL", cond_seqs)},
                    f"Gallery NM#{','.join(map(str, cfg.gallery_sequences))}")


def device_of(cfg: RunConfig) -> torch.device:
    try:
        return torch.device(cfg.device)
    except RuntimeError as e:
        raise UsageError(f"bad device {cfg.device!r}: {e}") from None


def _open_log(path: Path):
    return open(path, "w", newline="")


# ---------------------------------------------------------------- commands

def cmd_synth(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    with locked_output(out):
        ds = generate_synthetic_dataset(cfg.synth_identities, cfg.synth_sequences, cfg.synth_views,
                                        cfg.synth_conditions, cfg.synth_frames, seed=cfg.seed)
        write_casia_b(ds, out)
        manifest = {
            "generator": "selfgait.synthetic",
            "seed": cfg.seed,
            "identities": cfg.synth_identities,
            "sequences_per_identity": cfg.synth_sequences,
            "views": list(cfg.synth_views),
            "conditions": list(cfg.synth_conditions),
            "frames_per_sequence": cfg.synth_frames,
            "sequence_count": len(ds),
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        cfg.write(out / RESOLVED_NAME)
    print(f"wrote {len(ds)} sequences to {out}")
    return EXIT_OK


def cmd_pretrain(cfg: RunConfig) -> int:
    index = load_index(cfg)
    train, _ = split_ids(cfg, index)
    pool = limit_sequences(index.subset(train), cfg.pretrain_max_sequences)
    bcfg, pcfg = cfg.backbone(), cfg.pretrain()
    out = Path(cfg.out)
    with locked_output(out):
        cfg.write(out / RESOLVED_NAME)
        online, target = build_networks(bcfg, pcfg.d2, pcfg.seed, pcfg.share_fc_bins, pcfg.batch_norm)
        dev = device_of(cfg)
        online.to(dev)
        target.to(dev)
        with _open_log(out / "pretrain_log.csv") as log:
            pretrain(pool, bcfg, pcfg, out_dir=out, log_file=log, networks=(online, target),
                     extra_meta={"run": cfg.echo()})
    final = out / "pretrain_final.ckpt"
    print(f"pre-training checkpoint: {final}")
    return EXIT_OK


def cmd_finetune(cfg: RunConfig) -> int:
    index = load_index(cfg)
    train, _ = split_ids(cfg, index)
    labelled = index.subset(train)
    if cfg.finetune_fraction < 1.0:
        labelled = select_fraction(labelled, cfg.finetune_fraction, cfg.fraction_mode,
                                   stream(cfg.seed, "fraction"))
    bcfg = cfg.backbone()
    if cfg.from_pretrained:
        ckpt = _read_checkpoint(cfg.from_pretrained)
        if ckpt.phase != "pretrain":
            raise UsageError(f"{cfg.from_pretrained} is a {ckpt.phase!r} checkpoint, expected pretrain")
        try:
            backbone = backbone_from_checkpoint(ckpt, bcfg)
        except ShapeMismatch as e:
            raise UsageError(f"--from-pretrained does not fit the configured backbone: {e}") from None
    else:
        backbone = build_backbone(bcfg, cfg.seed)
    out = Path(cfg.out)
    with locked_output(out):
        cfg.write(out / RESOLVED_NAME)
        backbone.to(device_of(cfg))
        with _open_log(out / "finetune_log.csv") as log:
            finetune(labelled, backbone, cfg.finetune(), out_dir=out, log_file=log,
                     extra_meta={"run": cfg.echo(), "pretrained": bool(cfg.from_pretrained)})
    print(f"fine-tuned checkpoint: {out / 'finetune_final.ckpt'}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    if not cfg.checkpoint:
        raise UsageError("no checkpoint given (--checkpoint)")
    ckpt = _read_checkpoint(cfg.checkpoint)
    backbone = backbone_from_checkpoint(ckpt).to(device_of(cfg))
    index = load_index(cfg)
    train, test = split_ids(cfg, index)
    if not test:
        raise UsageError("no test identities: set split to custom, casia_b_lt or ou_mvlp")
    proto = eval_protocol(cfg)
    mats, _ = evaluate(index.subset(test), backbone, proto, cfg.exclude_identical_view, train)
    text, table = render_report(mats, proto.gallery_label, proto.orientation)
    out = Path(cfg.out)
    with locked_output(out):
        cfg.write(out / RESOLVED_NAME)
        (out / "report.txt").write_text(text)
        (out / "report.csv").write_text(table)
    print(text, end="")
    for cond, m in mats.items():
        print(f"{cond} mean rank-1: {'n/a' if m.mean != m.mean else f'{100 * m.mean:.1f}%'}")
    return EXIT_OK


def _read_checkpoint(path: str):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"checkpoint {p} does not exist")
    return load_checkpoint(p)


COMMANDS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "finetune": cmd_finetune, "eval": cmd_eval}


# ---------------------------------------------------------------- argument parsing

def _flag_bool(s: str) -> str:
    if s.lower() not in ("true", "false", "1", "0", "yes", "no"):
        raise argparse.ArgumentTypeError("expected true or false")
    return s


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--profile", choices=("standard", "desk"), help="default set to start from")
    common.add_argument("--seed", type=int)
    common.add_argument("--data-root")
    common.add_argument("--out")
    common.add_argument("--device")
    common.add_argument("--ablation", choices=("full", "no_hpm", "no_mtb"))
    common.add_argument("--set", dest="assign", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="selfgait", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write a synthetic dataset in CASIA-B layout")
    sub.add_parser("pretrain", parents=[common], help="self-supervised pre-training")
    ft = sub.add_parser("finetune", parents=[common], help="triplet-loss fine-tuning")
    ft.add_argument("--from-pretrained", help="pre-training checkpoint (omit for random init)")
    ev = sub.add_parser("eval", parents=[common], help="cross-view rank-1 evaluation")
    ev.add_argument("--checkpoint", help="fine-tuned or pre-trained checkpoint")
    ev.add_argument("--exclude-identical-view", type=_flag_bool, metavar="{true,false}")
    keys = sub.add_parser("keys", help="list configuration keys and defaults")
    keys.add_argument("--profile", choices=("standard", "desk"), default="standard")
    return parser


def overrides_from_args(args: argparse.Namespace) -> dict[str, str]:
    flags = {}
    for attr, key in (("profile", "profile"), ("seed", "seed"), ("data_root", "data_root"), ("out", "out"),
                      ("device", "device"), ("ablation", "ablation"), ("from_pretrained", "from_pretrained"),
                      ("checkpoint", "checkpoint"), ("exclude_identical_view", "exclude_identical_view")):
        val = getattr(args, attr, None)
        if val is not None:
            flags[key] = str(val)
    # explicit flags win over --set
    return {**parse_assignments(args.assign), **flags}


def _list_keys(profile: str) -> int:
    cfg = RunConfig.resolve(overrides={"profile": profile})
    for key, entry in SCHEMA.items():
        print(f"{key:<26} {format_value(cfg[key]):<14} {entry.help}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on malformed flags
    if args.command == "keys":
        return _list_keys(args.profile)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.resolve(args.config, overrides_from_args(args))
        return COMMANDS[args.command](cfg)
    except (ConfigError, UsageError) as e:
        print(f"selfgait {args.command}: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericFailure as e:
        print(f"selfgait {args.command}: numeric failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SelfGaitError, CheckpointError, OSError) as e:
        print(f"selfgait {args.command}: data error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
