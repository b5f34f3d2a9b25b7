"""Command-line entry point: ``dualmae VERB [--config FILE] [--dotted.key VALUE ...]``.

Exit codes: 0 success, 1 invalid usage or configuration, 2 runtime or numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .config import REGISTRY, dump_config, load_config, parse_text
from .errors import ConfigError, DualMAEError, FormatError, InputError, NumericError, ShapeError

VERBS = ("pretrain", "tta", "probe", "retrieve", "visualize", "verify", "gen-data")

ALIASES = {
    "steps": "train.steps",
    "seed": "seed",
    "classes": "data.classes",
    "per_class": "data.per_class",
    "manifest": "data.manifest",
    "batch_size": "train.batch_size",
}

logger = logging.getLogger("dualmae")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # exit code 1 instead of argparse's 2
        raise UsageError(f"{self.prog}: {message}")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    group = p.add_argument_group("config keys")
    for key, spec in REGISTRY.items():
        if key in ALIASES.values():
            continue
        group.add_argument(f"--{key}", dest=f"cfg:{key}", metavar=spec.kind.upper(), help=f"default {spec.default!r}")
    for alias, key in ALIASES.items():
        flags = dict.fromkeys((f"--{alias.replace('_', '-')}", f"--{key}"))
        group.add_argument(*flags, dest=f"cfg:{key}", metavar=REGISTRY[key].kind.upper(), help=f"{key}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dualmae", description="Dual-branch masked video autoencoder toolkit")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = sub.add_parser("pretrain", help="joint pre-training; writes loss_log.csv, checkpoints and a loss curve")
    _add_config_flags(p)
    p.add_argument("--checkpoint", type=Path, help="initialise from this checkpoint")
    p.add_argument("--no-figure", action="store_true", help="skip the loss-curve figure")

    p = sub.add_parser("tta", help="test-time adaptation on a batch; reports loss before and after")
    _add_config_flags(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--split", type=int, default=2, help="synthetic draw used as the test batch")
    p.add_argument("--save", action="store_true", help="write the adapted checkpoint to --out")

    for verb, help_text in (("probe", "linear probe on frozen embeddings"), ("retrieve", "nearest-neighbour retrieval R@1/R@5")):
        p = sub.add_parser(verb, help=help_text)
        _add_config_flags(p)
        p.add_argument("--checkpoint", type=Path, help="omit for a random-init encoder")
        p.add_argument("--split", type=int, default=1, help="synthetic draw used for evaluation")

    p = sub.add_parser("visualize", help="original / masked / reconstruction / attention figure")
    _add_config_flags(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--clip", type=Path, help="CVMT clip file; default: synthetic clips")
    p.add_argument("--count", type=int, default=4, help="synthetic clips to render")
    p.add_argument("--format", choices=("png", "ppm"), default="png")

    p = sub.add_parser("verify", help="run the acceptance self-checks")
    _add_config_flags(p)
    p.add_argument("--criteria", default="", help="comma-separated subset, e.g. 1,2,5")

    p = sub.add_parser("gen-data", help="write synthetic CVMT clips and a manifest")
    _add_config_flags(p)
    p.add_argument("--split", type=int, default=0)
    return parser


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    return {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg:") and v is not None}


def _effective_config(args: argparse.Namespace, base: dict[str, Any] | None = None) -> dict[str, Any]:
    merged: dict[str, Any] = dict(base or {})
    if args.config is not None:
        try:
            text = args.config.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc.strerror or exc}", str(args.config)) from None
        merged.update(parse_text(text, str(args.config)))
    merged.update(_overrides(args))
    return load_config(overrides=merged)


def _load_checkpoint(path: Path | None):
    """``(state, config dict)`` from a checkpoint, or ``(None, {})``."""
    if path is None:
        return None, {}
    from .backbone import load_checkpoint

    state, text = load_checkpoint(path)
    return state, parse_text(text, str(path))


def _model(cfg: dict[str, Any], state):
    from .backbone import load_state
    from .trainer import build_model

    model = build_model(cfg)
    if state is not None:
        load_state(model, state)
    return model


def _dataset(cfg: dict[str, Any], split: int) -> tuple[dict[str, Any], np.ndarray, np.ndarray]:
    """Clips and labels from ``data.manifest`` if set, else the synthetic set; geometry keys follow the data."""
    from .datakit import load_manifest_clips
    from .trainer import clip_shape, synthetic_data

    if cfg["data.manifest"]:
        clips, labels = load_manifest_clips(cfg["data.manifest"])
        C, T, H, W = clips.shape[1:]
        geometry = {"data.channels": C, "data.frames": T, "data.height": H, "data.width": W}
        for key, value in geometry.items():
            if key != "data.channels" and cfg[key] is not None and cfg[key] != value:
                raise ConfigError(f"manifest clips have {value}, config says {cfg[key]}", key)
        cfg = load_config(overrides={**cfg, **geometry})
        if clip_shape(cfg) != clips.shape[1:]:
            raise ConfigError(f"clip shape {clips.shape[1:]} does not match the model geometry {clip_shape(cfg)}", "data.manifest")
        return cfg, clips, labels
    clips, labels = synthetic_data(cfg, split)
    return cfg, clips, labels


def _prepare_out(args: argparse.Namespace, cfg: dict[str, Any]) -> Path | None:
    if args.out is None:
        return None
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write to {args.out}: {exc.strerror or exc}") from exc
    return args.out


def _emit(record: dict[str, Any], out: Path | None, name: str, quiet: bool) -> None:
    line = json.dumps(record, sort_keys=True)
    if not quiet:
        print(line)
    if out is not None:
        with open(out / name, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")


# --------------------------------------------------------------------------
# verbs
# --------------------------------------------------------------------------


def cmd_pretrain(args: argparse.Namespace, quiet: bool) -> int:
    from .plotting import plot_loss_curves
    from .trainer import LOG_COLUMNS, Trainer

    state, base = _load_checkpoint(args.checkpoint)
    cfg = _effective_config(args, base)
    cfg, clips, _ = _dataset(cfg, 0)
    out = _prepare_out(args, cfg)
    trainer = Trainer(cfg, clips=clips, model=_model(cfg, state))
    start = time.perf_counter()
    history = trainer.run(out_dir=out)
    elapsed = time.perf_counter() - start
    if out is not None and not args.no_figure and history:
        log = {c: [float(r.row()[i]) for r in history] for i, c in enumerate(LOG_COLUMNS)}
        plot_loss_curves(log, out / "loss_curve.png")
    last = history[-1]
    record = {"verb": "pretrain", "steps": last.step, "seconds": round(elapsed, 3), **last.losses.as_row()}
    _emit(record, out, "results.jsonl", quiet)
    return 0


def cmd_tta(args: argparse.Namespace, quiet: bool) -> int:
    from .backbone import save_checkpoint
    from .trainer import evaluate_loss, tta_adapt

    state, base = _load_checkpoint(args.checkpoint)
    cfg = _effective_config(args, base)
    cfg, clips, _ = _dataset(cfg, args.split)
    out = _prepare_out(args, cfg)
    model = _model(cfg, state)
    batch = clips[: cfg["train.batch_size"]]
    before = evaluate_loss(model, batch, cfg, cfg["seed"])
    adapted = tta_adapt(model, batch, cfg)
    after = evaluate_loss(adapted, batch, cfg, cfg["seed"])
    if args.save and out is not None:
        save_checkpoint(adapted, out / "adapted.ckpt", dump_config(cfg))
    record = {"verb": "tta", "steps": cfg["tta.steps"], "batch": len(batch), "total_before": before.total, "total_after": after.total}
    _emit(record, out, "results.jsonl", quiet)
    return 0


def _embeddings(args: argparse.Namespace):
    from .evalkit import embed_clips

    state, base = _load_checkpoint(args.checkpoint)
    cfg = _effective_config(args, base)
    cfg, clips, labels = _dataset(cfg, args.split)
    model = _model(cfg, state)
    norm = (cfg["data.norm_mean"], cfg["data.norm_std"]) if cfg["data.normalize"] else None
    return cfg, embed_clips(model, clips, normalize=norm), labels


def cmd_probe(args: argparse.Namespace, quiet: bool) -> int:
    from .evalkit import linear_probe, split_indices

    cfg, emb, labels = _embeddings(args)
    out = _prepare_out(args, cfg)
    train, test = split_indices(labels, cfg["probe.train_frac"], cfg["seed"])
    result = linear_probe(
        emb[train], labels[train], emb[test], labels[test], seed=cfg["seed"],
        steps=cfg["probe.steps"], lr=cfg["probe.lr"], momentum=cfg["probe.momentum"], weight_decay=cfg["probe.weight_decay"],
    )
    _emit(json.loads(result.to_json()), out, "results.jsonl", quiet)
    return 0


def cmd_retrieve(args: argparse.Namespace, quiet: bool) -> int:
    from .evalkit import retrieve, split_indices

    cfg, emb, labels = _embeddings(args)
    out = _prepare_out(args, cfg)
    gallery, queries = split_indices(labels, cfg["probe.train_frac"], cfg["seed"])
    result = retrieve(emb[queries], labels[queries], emb[gallery], labels[gallery])
    _emit(json.loads(result.to_json()), out, "results.jsonl", quiet)
    return 0


def cmd_visualize(args: argparse.Namespace, quiet: bool) -> int:
    from .datakit import read_clip_file
    from .evalkit import export_figure

    state, base = _load_checkpoint(args.checkpoint)
    cfg = _effective_config(args, base)
    if args.clip is not None:
        clips = read_clip_file(args.clip)[None]
    else:
        cfg, clips, _ = _dataset(cfg, 1)
        clips = clips[:: max(1, len(clips) // args.count)][: args.count]
    if args.out is None:
        raise ConfigError("visualize needs --out", "out")
    out = _prepare_out(args, cfg)
    model = _model(cfg, state)
    ratio = cfg["eval.mask_ratio"] if cfg["eval.mask_ratio"] > 0 else cfg["mask.video.ratio"]
    for i, clip in enumerate(clips):
        path = export_figure(model, clip, ratio, out / f"figure_{i:03d}.{args.format}", seed=cfg["seed"] + i)
        _emit({"verb": "visualize", "figure": str(path), "mask_ratio": ratio}, out, "results.jsonl", quiet)
    return 0


def cmd_verify(args: argparse.Namespace, quiet: bool) -> int:
    from .verify import CHECKS, run_all

    cfg = _effective_config(args)
    out = _prepare_out(args, cfg)
    only = None
    if args.criteria:
        try:
            only = [int(x) for x in args.criteria.split(",")]
        except ValueError:
            raise ConfigError(f"expected comma-separated integers, got {args.criteria!r}", "criteria") from None
        unknown = [n for n in only if n not in CHECKS]
        if unknown:
            raise ConfigError(f"no such criteria {unknown}", "criteria")
    results = run_all(cfg["seed"], only, echo=None if quiet else print)
    if out is not None:
        for r in results:
            _emit({"criterion": r.number, "name": r.name, "passed": r.passed, "detail": r.detail, "seconds": round(r.seconds, 2)}, out, "verify.jsonl", True)
    passed = sum(r.passed for r in results)
    if not quiet:
        print(f"{passed}/{len(results)} criteria passed")
    return 0 if passed == len(results) else 2


def cmd_gen_data(args: argparse.Namespace, quiet: bool) -> int:
    from .datakit import write_clip_file, write_manifest

    cfg = _effective_config(args)
    if args.out is None:
        raise ConfigError("gen-data needs --out", "out")
    cfg, clips, labels = _dataset(dict(cfg, **{"data.manifest": ""}), args.split)
    out = _prepare_out(args, cfg)
    rows = []
    for i, (clip, label) in enumerate(zip(clips, labels)):
        name = f"clip_{i:05d}.cvmt"
        write_clip_file(clip, out / name)
        rows.append((name, int(label)))
    write_manifest(rows, out / "manifest.csv")
    _emit({"verb": "gen-data", "clips": len(rows), "manifest": str(out / "manifest.csv")}, out, "results.jsonl", quiet)
    return 0


COMMANDS = {
    "pretrain": cmd_pretrain,
    "tta": cmd_tta,
    "probe": cmd_probe,
    "retrieve": cmd_retrieve,
    "visualize": cmd_visualize,
    "verify": cmd_verify,
    "gen-data": cmd_gen_data,
}


def main(argv: Sequence[str] | None = None, quiet: bool = False) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.verb](args, quiet)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericError, FormatError, ShapeError, InputError, DualMAEError, OSError, ArithmeticError, RuntimeError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
