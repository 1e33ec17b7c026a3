"""Command-line entry point: ``girnet {train,infer,eval,degrade,gradcheck,ablate}``."""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import math
import os
import sys
from pathlib import Path

from .checkpoint import CheckpointError
from .data import DataError, VideoClip, degrade_clip, load_clip, save_clip
from .metrics import evaluate_frames
from .model import ModelConfig

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("girnet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def load_config(path) -> ModelConfig:
    if path is None:
        return ModelConfig()
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"config {path} is not valid JSON: {exc}") from exc
    return ModelConfig.from_dict(data)


def _threads():
    n = os.environ.get("GIRNET_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(int(n))


def cmd_train(args) -> int:
    from .checkpoint import load_checkpoint
    from .train import load_manifest_clips, train

    cfg = load_config(args.config)
    clips = load_manifest_clips(args.manifest)
    resume = load_checkpoint(args.resume, cfg) if args.resume else None

    def report(epoch, step, loss, lr):
        print(f"{epoch}\t{step}\t{loss:.8g}\t{lr:.8g}", flush=True)

    train(clips, cfg, args.epochs, args.batch, args.seed, args.out, max_steps=args.steps, resume=resume, on_step=report)
    return EXIT_OK


def cmd_infer(args) -> int:
    from .train import infer

    paths = infer(args.ckpt, args.inp, args.out, args.scale)
    print(f"wrote {len(paths)} frames to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    pred = load_clip(args.pred)
    gt = load_clip(args.gt)
    report = evaluate_frames(pred.frames, gt.frames, luma_only=args.luma_only)
    clip_id = args.clip_id or Path(args.gt).name
    for i, (p, s) in enumerate(zip(report.psnr_db, report.ssim)):
        print(f"{clip_id}\t{i}\t{p:.4f}\t{s:.6f}")
    print(f"{clip_id}\tmean\t{report.mean_psnr:.4f}\t{report.mean_ssim:.6f}")
    return EXIT_OK


def cmd_degrade(args) -> int:
    lr = degrade_clip(load_clip(args.inp), args.scale)
    save_clip(lr, args.out)
    h, w = lr.size
    print(f"wrote {len(lr)} frames of {w}x{h} to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import CHECKS, run_check

    ops = [args.op] if args.op else list(CHECKS)
    if args.op and args.op not in CHECKS:
        raise UsageError(f"unknown op {args.op!r}; choose from {', '.join(CHECKS)}")
    ok = True
    for op in ops:
        res = run_check(op, args.seeds)
        ok &= res.passed
        print(f"{op}\t{res.max_rel_err:.3e}\t{'ok' if res.passed else 'FAIL'} (tol {res.tolerance:g}, {res.redraws} redraws)", flush=True)
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_ablate(args) -> int:
    from .train import ABLATIONS, ablation_table, load_manifest_clips, run_ablation

    cfg = load_config(args.config) if args.config else ModelConfig(
        channels=16, n_res_extract=2, n_res_recon=2, attention_kind="attention-2", scale=2
    )
    clips = load_manifest_clips(args.manifest)
    variants = args.variants.split(",") if args.variants else list(ABLATIONS)
    unknown = [v for v in variants if v not in ABLATIONS]
    if unknown:
        raise UsageError(f"unknown ablation variants {unknown}; choose from {', '.join(ABLATIONS)}")
    lr_fn = (lambda epoch: args.lr) if args.lr is not None else None
    kwargs = {"lr_fn": lr_fn} if lr_fn else {}
    rows = run_ablation(clips, cfg, args.steps, variants, args.batch, args.seed, **kwargs)
    table = ablation_table(rows)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.md").write_text(table, encoding="utf-8")
    print(table, end="")
    for r in rows:
        if not math.isfinite(r.final_loss):
            return EXIT_NUMERIC
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="girnet", description="Space-time video super-resolution (GIRNet).")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    t = sub.add_parser("train", help="train on a manifest of HR clip directories")
    t.add_argument("--manifest", required=True)
    t.add_argument("--config")
    t.add_argument("--epochs", type=int, required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--batch", type=int, default=8)
    t.add_argument("--steps", type=int, help="stop after this many optimizer steps")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="super-resolve an LR clip directory")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--in", dest="inp", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--scale", type=int, choices=(2, 4, 8))
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="per-frame PSNR/SSIM of a predicted clip")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--luma-only", action="store_true")
    e.add_argument("--clip-id")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("degrade", help="bicubic downscale and drop every second frame")
    d.add_argument("--in", dest="inp", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--scale", type=int, choices=(2, 4, 8), required=True)
    d.set_defaults(func=cmd_degrade)

    g = sub.add_parser("gradcheck", help="finite-difference checks of every differentiable op")
    g.add_argument("--op")
    g.add_argument("--seeds", type=int, default=5)
    g.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="train the toggle grid at tiny scale and write a Markdown table")
    a.add_argument("--manifest", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--config")
    a.add_argument("--steps", type=int, default=300)
    a.add_argument("--batch", type=int, default=8)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--lr", type=float, help="constant learning rate instead of the step schedule")
    a.add_argument("--variants", help="comma-separated subset of variants")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    from .train import NumericalError

    try:
        with _threads():
            return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
