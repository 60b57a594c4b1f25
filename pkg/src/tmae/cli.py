"""Command-line interface: synth, pretrain, finetune, eval, predict, sweep.

Exit codes: 0 success, 1 configuration/usage error, 2 data or metric
precondition failure, 3 numerical divergence.

Every command accepts --config/--set/--seed/--workers/--out; --seed
overrides [train] seed, and all subsystem randomness (data synthesis,
masking, init, shuffling) is derived from that single root. A run manifest
JSON is written into the output directory at start and finalized at exit;
it is the only artifact carrying timestamps.
"""

from __future__ import annotations

import argparse
import itertools
import json
import subprocess
import sys
import time
from pathlib import Path
from typing import Optional

import torch

from . import __version__
from .config import Config, describe_keys, load_config
from .datasets import ClipStore, generate_dataset
from .errors import (
    ConfigError,
    DataError,
    IoError,
    MetricError,
    NumericsError,
    TmaeError,
)
from .evaluation import evaluate_checkpoint, save_report
from .utils import atomic_write_text, derive_seed


def _common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="PATH", help="config file ([section] key = value)")
    parser.add_argument(
        "--set",
        metavar="SECTION.KEY=VALUE",
        action="append",
        default=[],
        dest="overrides",
        help="override a config key (repeatable)",
    )
    parser.add_argument("--seed", type=int, help="root seed (overrides [train] seed)")
    parser.add_argument("--workers", type=int, default=1, help="worker threads for data tasks")
    parser.add_argument("--out", metavar="DIR", default="runs", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tmae",
        description="Temporal masked-autoencoder pretraining and EF classification.",
    )
    parser.add_argument("--version", action="version", version=f"tmae {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    epilog = "config keys (defaults):\n" + describe_keys()

    def command(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(
            name,
            help=help_text,
            epilog=epilog,
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )
        _common_flags(p)
        return p

    p = command("synth", "synthesize a labeled pulsating-disk dataset")
    p.add_argument("--n-clips", type=int, default=200, help="number of clips to render")

    p = command("pretrain", "masked (+ contrastive) pretraining")
    p.add_argument("--resume", metavar="CKPT", help="continue from a last-state checkpoint")
    p.add_argument(
        "--stop-after-epoch",
        type=int,
        metavar="N",
        help="pause after N epochs (resume later with --resume)",
    )

    p = command("finetune", "train the classifier head (and optionally the encoder)")
    p.add_argument("--pretrained", metavar="CKPT", required=True, help="pretraining checkpoint")

    p = command("eval", "score a split and report the metric suite")
    p.add_argument("--checkpoint", metavar="CKPT", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--threshold", type=float, help="decision threshold (overrides [eval])")

    p = command("predict", "score one raw .tnsr clip")
    p.add_argument("--checkpoint", metavar="CKPT", required=True)
    p.add_argument("clip", metavar="CLIP.tnsr")
    p.add_argument("--fps", type=float, default=50.0, help="frame rate of the clip")
    p.add_argument("--start", type=int, default=0, help="window start frame")
    p.add_argument("--threshold", type=float, help="decision threshold (overrides [eval])")

    p = command("sweep", "grid over loss/masking hyperparameters at micro scale")
    p.add_argument("--lam", default="0.1", help="comma-separated lambda values")
    p.add_argument("--tau-p", default="1", help="comma-separated tau_p values")
    p.add_argument("--tau-m", default="0.5", help="comma-separated tau_m values")
    p.add_argument("--ratio", default="0.75", help="comma-separated mask ratios")
    return parser


# --- run manifests ---------------------------------------------------------


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


class RunManifest:
    """Start/finish record for one command, written atomically as JSON."""

    def __init__(self, command: str, args: argparse.Namespace, cfg: Config, out_dir: Path):
        self.path = out_dir / f"run_{command}.json"
        self.doc = {
            "command": command,
            "argv": sys.argv[1:],
            "config_path": getattr(args, "config", None),
            "config": cfg.echo(),
            "seed": cfg.get("train", "seed"),
            "git_describe": _git_describe(),
            "started_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "finished_at": None,
            "status": "running",
            "outputs": [],
        }
        self._write()

    def _write(self) -> None:
        atomic_write_text(self.path, json.dumps(self.doc, indent=2, sort_keys=True) + "\n")

    def finish(self, status: str, outputs: list[Path]) -> None:
        self.doc["finished_at"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        self.doc["status"] = status
        self.doc["outputs"] = sorted(str(p) for p in outputs)
        self._write()


def _prepare(args: argparse.Namespace) -> tuple[Config, Path]:
    cfg = load_config(args.config, args.overrides)
    if args.seed is not None:
        cfg.set("train", "seed", args.seed)
    out_dir = Path(args.out)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create output directory {out_dir}: {exc}") from None
    return cfg, out_dir


def _store_from_config(cfg: Config) -> ClipStore:
    manifest = cfg.get("data", "manifest")
    if not manifest:
        raise ConfigError("[data] manifest must point to a manifest CSV")
    return ClipStore.from_manifest(manifest, cfg.get("data", "clips_root"))


def _require_explicit_contrastive(cfg: Config) -> None:
    if not cfg.get("train", "use_contrastive"):
        return
    missing = [
        f"loss.{key}"
        for key in ("lambda", "tau_p", "tau_m")
        if not cfg.is_explicit("loss", key)
    ]
    if missing:
        raise ConfigError(
            "use_contrastive=true requires explicit values for: " + ", ".join(missing)
        )


# --- commands ------------------------------------------------------------


def cmd_synth(args: argparse.Namespace) -> int:
    cfg, out_dir = _prepare(args)
    manifest = RunManifest("synth", args, cfg, out_dir)
    try:
        path = generate_dataset(
            out_dir, args.n_clips, cfg, cfg.get("train", "seed"), workers=args.workers
        )
    except TmaeError:
        manifest.finish("failed", [])
        raise
    print(f"wrote {args.n_clips} clips and {path}")
    manifest.finish("ok", [path])
    return 0


def cmd_pretrain(args: argparse.Namespace) -> int:
    from .train import pretrain

    cfg, out_dir = _prepare(args)
    _require_explicit_contrastive(cfg)
    store = _store_from_config(cfg)
    manifest = RunManifest("pretrain", args, cfg, out_dir)
    try:
        result = pretrain(
            store, cfg, out_dir, resume=args.resume, stop_after=args.stop_after_epoch
        )
    except TmaeError:
        manifest.finish("failed", [])
        raise
    manifest.finish("ok", [result.best_path, result.last_path, result.curve_path])
    return 0


def cmd_finetune(args: argparse.Namespace) -> int:
    from .train import finetune

    cfg, out_dir = _prepare(args)
    store = _store_from_config(cfg)
    manifest = RunManifest("finetune", args, cfg, out_dir)
    try:
        result = finetune(store, cfg, args.pretrained, out_dir)
    except TmaeError:
        manifest.finish("failed", [])
        raise
    manifest.finish("ok", [result.best_path, result.last_path, result.curve_path])
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg, out_dir = _prepare(args)
    store = _store_from_config(cfg)
    manifest = RunManifest("eval", args, cfg, out_dir)
    try:
        report = evaluate_checkpoint(
            args.checkpoint, store, cfg, split=args.split, threshold=args.threshold
        )
    except TmaeError:
        manifest.finish("failed", [])
        raise
    report_path = out_dir / f"metrics_{args.split}.csv"
    save_report(report, report_path)
    print(report.pretty())
    manifest.finish("ok", [report_path])
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    from .checkpoint import load_checkpoint, load_params_into_model
    from .data import read_tnsr, sample_clip
    from .model import build_model_from_config
    from .train import adopt_checkpoint_config

    cfg, _ = _prepare(args)
    ckpt = load_checkpoint(args.checkpoint)
    cfg = adopt_checkpoint_config(cfg, ckpt)
    model = build_model_from_config(cfg, init_seed=derive_seed(cfg.get("train", "seed"), "init"))
    load_params_into_model(ckpt, model)
    d = cfg.values["data"]
    frames = read_tnsr(args.clip)
    clip = sample_clip(
        frames, args.fps, args.start, d["frames"], d["window_s"],
        H=d["height"], W=d["width"],
    )
    threshold = args.threshold if args.threshold is not None else cfg.get("eval", "threshold")
    with torch.no_grad():
        logit = model.score_clips(torch.from_numpy(clip.frames))
    prob = float(torch.sigmoid(logit)[0])
    verdict = "reduced" if prob >= threshold else "normal"
    print(f"p(reduced EF) = {prob:.4f} -> {verdict}")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    from .train import finetune, pretrain

    cfg, out_dir = _prepare(args)
    grid = []
    seen = set()
    lams = [float(v) for v in args.lam.split(",")]
    tau_ps = [int(v) for v in args.tau_p.split(",")]
    tau_ms = [float(v) for v in args.tau_m.split(",")]
    ratios = [float(v) for v in args.ratio.split(",")]
    for point in itertools.product(lams, tau_ps, tau_ms, ratios):
        if point in seen:
            print(f"warning: duplicate grid point {point} skipped")
            continue
        seen.add(point)
        grid.append(point)
    store = _store_from_config(cfg)
    manifest = RunManifest("sweep", args, cfg, out_dir)
    rows = ["lambda,tau_p,tau_m,ratio,auroc"]
    try:
        for i, (lam, tau_p, tau_m, ratio) in enumerate(grid):
            point_cfg = Config(values=cfg.echo(), explicit=set(cfg.explicit))
            if not point_cfg.is_explicit("model", "variant"):
                point_cfg.set("model", "variant", "micro")
            point_cfg.set("loss", "lambda", lam)
            point_cfg.set("loss", "tau_p", tau_p)
            point_cfg.set("loss", "tau_m", tau_m)
            point_cfg.set("mask", "ratio", ratio)
            point_dir = out_dir / f"point_{i:02d}"
            pre = pretrain(store, point_cfg, point_dir, log=lambda _: None)
            fin = finetune(store, point_cfg, pre.best_path, point_dir, log=lambda _: None)
            report = evaluate_checkpoint(fin.best_path, store, point_cfg)
            rows.append(f"{lam!r},{tau_p},{tau_m!r},{ratio!r},{report.auroc!r}")
            print(f"point {i}: lambda={lam} tau_p={tau_p} tau_m={tau_m} ratio={ratio} auroc={report.auroc:.4f}")
    except TmaeError:
        manifest.finish("failed", [])
        raise
    table = out_dir / "sweep.csv"
    atomic_write_text(table, "\n".join(rows) + "\n")
    manifest.finish("ok", [table])
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "sweep": cmd_sweep,
}


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (DataError, MetricError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericsError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
