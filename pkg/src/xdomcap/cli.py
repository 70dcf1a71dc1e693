"""Command-line entry point: ``xdomcap <subcommand> ...``.

Relative paths are resolved against the run root, taken from the
``XDOMCAP_RUN_ROOT`` environment variable (default ``./runs``). On failure the
exit code is nonzero and stderr carries one ``error [stage]: ...`` line.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import checkpoint
from . import config as xconfig
from . import pipeline as pl
from .data import load_bundle
from .decoding import PlanningConfig

log = logging.getLogger("xdomcap")


def _path(p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else pl.run_root() / p


def _config(args) -> xconfig.ExperimentConfig:
    cfg = xconfig.load(_path(args.config)) if getattr(args, "config", None) else xconfig.ExperimentConfig()
    if getattr(args, "desk", False):
        cfg = cfg.with_overrides(xconfig.DESK)
    over = dict(kv.split("=", 1) for kv in (getattr(args, "set", None) or []))
    if getattr(args, "seed", None) is not None:
        over["seed"] = str(args.seed)
    return cfg.with_overrides({k.strip(): v.strip() for k, v in over.items()}) if over else cfg


def cmd_gen_data(args):
    cfg = _config(args)
    out = _path(args.out)
    bundle = pl.gen_data(cfg, out)
    print(f"wrote {len(bundle.source_paired)} source pairs, vocabulary {len(bundle.vocab)} to {out}")


def cmd_pretrain(args):
    cfg = _config(args)
    over = {}
    if args.lr is not None:
        over["learning_rate"] = args.lr
    if args.lr_decay is not None:
        over["lr_decay"] = args.lr_decay
    if args.epochs is not None:
        over["epochs"] = args.epochs
    cfg = dataclasses.replace(cfg, pretrain=dataclasses.replace(cfg.pretrain, **over))
    bundle = load_bundle(_path(args.data))
    pl.pretrain_stage(cfg, bundle, _path(args.out))
    print(f"saved captioner to {_path(args.out)}")


def cmd_adapt(args):
    cfg = _config(args)
    bundle = load_bundle(_path(args.data))
    cap = pl.load_captioner(_path(args.pretrained))

    def progress(rec):
        if rec.iteration % max(1, args.log_every) == 0:
            log.info("iter %d dc %.4f mc %.4f reward %.4f len %.2f", rec.iteration, rec.dc_loss, rec.mc_loss,
                     rec.mean_reward, rec.mean_len)

    pl.adapt_stage(cfg, bundle, cap, _path(args.out), args.critic, progress)
    print(f"saved adapted models to {_path(args.out)}")


def cmd_finetune(args):
    cfg = _config(args)
    bundle = load_bundle(_path(args.data))
    if not args.target_paired:
        raise pl.StageError("finetune", "--target-paired is required (fine-tuning uses paired target data)")
    cap = pl.load_captioner(_path(args.pretrained))
    pl.finetune_stage(cfg, bundle, cap, _path(args.out))
    print(f"saved fine-tuned captioner to {_path(args.out)}")


def cmd_decode(args):
    bundle = load_bundle(_path(args.data))
    cap = pl.load_captioner(_path(args.model))
    critics = pl.load_critics(_path(args.critics), args.critic) if args.critics else None
    records = getattr(bundle, args.split)
    planning = PlanningConfig(gamma=args.gamma, J=args.J, K=args.K, seed=args.seed)
    res = pl.decode_records(records, cap, bundle.vocab, args.mode, critics, planning, args.beam, _path(args.out))
    msg = f"decoded {len(res.sentences)} images to {_path(args.out)}"
    if args.mode == "plan":
        msg += f" (critic-decided fraction {res.critic_fraction:.4f})"
    print(msg)


def cmd_eval(args):
    rep = pl.eval_files(_path(args.candidates), _path(args.references), _path(args.out),
                        _path(args.scenes) if args.scenes else None, args.method, args.decode)
    print(" ".join(f"{c}={v:.4f}" for c, v in zip(pl.REPORT_COLUMNS, rep.row())))


def cmd_pipeline(args):
    cfg = _config(args)
    man = pl.run_pipeline(cfg, _path(args.out) if args.out else None)
    print((Path(man.run_dir) / "report.csv").read_text(), end="")
    print(f"run directory: {man.run_dir}")


def cmd_report(args):
    mans = [pl.RunManifest.load(_path(m)) for m in args.manifests]
    text = pl.compare_report(mans)
    if args.out:
        _path(args.out).write_text(text)
    print(text, end="")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xdomcap", description="Adversarial cross-domain captioning on a synthetic world.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="flat key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--desk", action="store_true", help="apply the synthetic-world settings (before --set)")

    sp = sub.add_parser("gen-data", help="generate the synthetic two-domain world")
    with_config(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_data, stage="gen-data")

    sp = sub.add_parser("pretrain", help="likelihood-train the captioner on source pairs")
    with_config(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--lr-decay", type=float)
    sp.add_argument("--epochs", type=int)
    sp.set_defaults(func=cmd_pretrain, stage="pretrain")

    sp = sub.add_parser("adapt", help="adversarial adaptation to the target domain")
    with_config(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--pretrained", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--critic", choices=("dc", "mc", "both"), default=None)
    sp.add_argument("--log-every", type=int, default=50)
    sp.set_defaults(func=cmd_adapt, stage="adapt")

    sp = sub.add_parser("finetune", help="supervised upper bound on paired target data")
    with_config(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--pretrained", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--target-paired", action="store_true")
    sp.set_defaults(func=cmd_finetune, stage="finetune")

    sp = sub.add_parser("decode", help="caption a split with greedy, beam or critic-based planning")
    sp.add_argument("--model", required=True)
    sp.add_argument("--critics", help="directory holding dc/ and mc/ checkpoints")
    sp.add_argument("--critic", choices=("dc", "mc", "both"), default="both")
    sp.add_argument("--mode", choices=pl.DECODE_MODES, default="greedy")
    sp.add_argument("--gamma", type=float, default=0.15)
    sp.add_argument("--J", type=int, default=2)
    sp.add_argument("--K", type=int, default=3)
    sp.add_argument("--beam", type=int, default=2)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="target_eval")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_decode, stage="decode")

    sp = sub.add_parser("eval", help="score decoded captions")
    sp.add_argument("--candidates", required=True)
    sp.add_argument("--references", required=True)
    sp.add_argument("--scenes")
    sp.add_argument("--out", required=True)
    sp.add_argument("--method", default="")
    sp.add_argument("--decode", default="")
    sp.set_defaults(func=cmd_eval, stage="eval")

    sp = sub.add_parser("pipeline", help="run every stage and write the comparison table")
    with_config(sp)
    sp.add_argument("--out", help="run directory (default: derived from the config hash)")
    sp.set_defaults(func=cmd_pipeline, stage="pipeline")

    sp = sub.add_parser("report", help="merge evaluation results of one or more runs")
    sp.add_argument("manifests", nargs="+", help="run directories or manifest files")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_report, stage="report")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except pl.StageError as exc:
        print(f"error [{exc.stage}]: {str(exc).split('] ', 1)[-1]}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError, checkpoint.CheckpointError, RuntimeError) as exc:
        print(f"error [{args.stage}]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
