"""Command-line entry point: ``omniqa <subcommand> ...``.

Exit status: 0 ok, 1 usage/config error, 2 data or checkpoint error,
3 numerical failure. Every error is also written to stderr as one JSON line
``{"code": ..., "message": ...}``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from .errors import ConfigError, DataError, NumericalError, OmniQAError

log = logging.getLogger("omniqa")

METRICS = ("ws-psnr", "s-psnr", "cpp-psnr", "ws-ssim")
CONFIG_NAME = "config.ini"


class UsageError(OmniQAError):
    code = "usage"
    exit_status = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _diagnostic(code: str, message: str) -> None:
    print(json.dumps({"code": code, "message": message}), file=sys.stderr)


# ---------------------------------------------------------------------------
# configuration


def _parse_set(items: Sequence[str]) -> dict:
    """``section.key=value`` pairs (value as JSON, bare strings allowed) -> nested dict."""
    out: dict = {}
    for item in items:
        key, sep, raw = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or not name:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        out.setdefault(section, {})[name] = value
    return out


def resolve_config(path: Optional[str], sets: Sequence[str] = (), **sections):
    from .config import RunConfig

    cfg = RunConfig.load(path) if path else RunConfig()
    overrides = _parse_set(sets)
    for section, values in sections.items():
        values = {k: v for k, v in values.items() if v is not None}
        if values:
            overrides.setdefault(section, {}).update(values)
    if overrides:
        unknown = set(overrides) - set(cfg.to_dict())
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        cfg = cfg.with_overrides(**overrides)
    return cfg


def _sampler_overrides(args) -> dict:
    k = getattr(args, "k", None)
    return {
        "sampler": {"k": k, "kappa_w": args.kappa_w, "kappa_h": args.kappa_h, "seed": args.seed},
        "model": {"k_patches": k},
    }


# ---------------------------------------------------------------------------
# subcommands


def cmd_sample(args) -> int:
    import numpy as np

    from .geometry import load_image, save_image
    from .sampling import PatchSampler, image_rng

    cfg = resolve_config(args.config, args.set, **_sampler_overrides(args))
    try:
        img = load_image(args.image)
    except OSError as exc:
        raise DataError(f"cannot read image {args.image}: {exc}") from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sampler = PatchSampler(cfg.sampler, cfg.prior)
    ps = sampler.sample(img, image_rng(cfg.sampler.seed, Path(args.image).stem))
    with open(out / "centers.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patch", "colatitude_deg", "longitude_deg", "block_index"])
        for i in range(len(ps)):
            save_image(out / f"patch_{i:02d}.png", ps.patches[i])
            block = int(ps.block_index[i]) if ps.block_index is not None else -1
            w.writerow([i, repr(float(90.0 - ps.centers.lat[i])), repr(float(ps.centers.lon[i])), block])
    cfg.save(out / CONFIG_NAME)
    print(f"wrote {len(ps)} patches of {ps.source_dims[0]}x{ps.source_dims[1]} px to {out}")
    return 0 if np.isfinite(ps.patches).all() else 3


def _fr_pairs(args) -> List[tuple]:
    if args.manifest:
        base = Path(args.manifest).parent
        try:
            with open(args.manifest, newline="") as fh:
                rows = list(csv.DictReader(fh))
        except OSError as exc:
            raise DataError(f"cannot read {args.manifest}: {exc}") from exc
        need = {"image_id", "ref_path", "dist_path"}
        if not rows or not need <= set(rows[0]):
            raise DataError(f"{args.manifest}: expected columns {sorted(need)}")
        return [(r["image_id"], base / r["ref_path"], base / r["dist_path"]) for r in rows]
    if not (args.ref and args.dist):
        raise UsageError("score-fr needs --ref and --dist, or --manifest")
    return [(Path(args.dist).stem, Path(args.ref), Path(args.dist))]


def cmd_score_fr(args) -> int:
    from . import fr_metrics
    from .geometry import load_image

    funcs = {"ws-psnr": fr_metrics.ws_psnr, "s-psnr": fr_metrics.s_psnr,
             "cpp-psnr": fr_metrics.cpp_psnr, "ws-ssim": fr_metrics.ws_ssim}
    names = METRICS if args.metric == "all" else (args.metric,)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    status = 0
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", "metric", "value"])
        for iid, ref_path, dist_path in _fr_pairs(args):
            try:
                ref, dist = load_image(ref_path), load_image(dist_path)
            except OSError as exc:
                _diagnostic("data", f"{iid}: {exc}")
                status = 2
                continue
            for name in names:
                try:
                    value = float(funcs[name](ref, dist))
                except ValueError as exc:
                    _diagnostic("data", f"{iid}: {exc}")
                    status = 2
                    break
                w.writerow([iid, name, f"{value:.6f}"])
    finally:
        if args.out:
            fh.close()
    return status


def cmd_synth(args) -> int:
    from .data import synth_dataset

    try:
        man, items = synth_dataset(args.out, n_contents=args.contents, distortions=args.distortions,
                                   levels=args.levels, seed=args.seed, height=args.height, width=args.width)
    except OSError as exc:
        raise DataError(str(exc)) from exc
    params = {"contents": args.contents, "distortions": list(args.distortions), "levels": args.levels,
              "seed": args.seed, "height": args.height, "width": args.width}
    (Path(args.out) / "synth_config.json").write_text(json.dumps(params, indent=2), encoding="utf-8")
    print(f"wrote {len(man)} images and manifest.csv to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .data import ImageCache, load_manifest
    from .engine import train_run, write_history

    cfg = resolve_config(args.config, args.set, train={"epochs": args.epochs, "seed": args.seed})
    man = load_manifest(args.manifest, seed=cfg.train.seed, train_fraction=cfg.train.train_fraction)
    rows = man.train
    if not rows:
        raise DataError(f"{args.manifest} has no training rows")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / CONFIG_NAME)
    man.write(out / "split.csv", relative_to=Path(args.manifest).parent)
    model, ckpt, history = train_run(rows, cfg, ImageCache())
    ckpt.save(out / "checkpoint")
    write_history(out / "history.csv", history)
    last = history[-1]
    print(f"trained {len(history)} epochs on {len(rows)} images; final loss {last.loss:.5f}, srcc {last.srcc:.4f}")
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import Checkpoint
    from .data import ImageCache, load_manifest
    from .engine import evaluate_run

    ckpt = Checkpoint.load(args.checkpoint)
    cfg = ckpt.config
    man = load_manifest(args.manifest, seed=cfg.train.seed, train_fraction=cfg.train.train_fraction)
    rows = man.rows if args.split == "all" else man.subset(args.split)
    if len(rows) < 5:
        raise DataError(f"need at least 5 rows in split {args.split!r}, got {len(rows)}")
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    report = evaluate_run(ckpt, rows, ImageCache())
    report.write(out)
    cfg.save(out / CONFIG_NAME)
    print(f"{args.split}: n={len(report.image_ids)} plcc={report.plcc:.4f} srcc={report.srcc:.4f} "
          f"rmse={report.rmse:.4f}")
    for iid, msg in report.errors.items():
        _diagnostic("fit" if iid == "__fit__" else "data", f"{iid}: {msg}")
    if not report.fit_converged:
        return 3
    return 2 if report.errors else 0


def cmd_report(args) -> int:
    from .report import render_report

    out = args.out or args.eval_dir
    for p in render_report(args.eval_dir, out, args.format):
        print(p)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="omniqa", description="Blind quality assessment for equirectangular images.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def config_args(sp):
        sp.add_argument("--config", help="config file (INI sections, JSON values)")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value; repeatable")

    s = sub.add_parser("sample", help="draw patches from one image")
    s.add_argument("image")
    s.add_argument("--out", required=True)
    s.add_argument("--k", type=int)
    s.add_argument("--kappa-w", type=float)
    s.add_argument("--kappa-h", type=float)
    s.add_argument("--seed", type=int)
    config_args(s)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("score-fr", help="full-reference baselines")
    s.add_argument("--metric", choices=METRICS + ("all",), default="all")
    s.add_argument("--ref")
    s.add_argument("--dist")
    s.add_argument("--manifest", help="CSV with image_id, ref_path, dist_path")
    s.add_argument("--out", help="CSV path (default stdout)")
    s.set_defaults(func=cmd_score_fr)

    s = sub.add_parser("synth", help="generate a synthetic ERP dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--contents", type=int, default=4)
    s.add_argument("--distortions", nargs="+", default=["blur", "noise", "quant"],
                   choices=["blur", "noise", "quant"])
    s.add_argument("--levels", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--height", type=int, default=512)
    s.add_argument("--width", type=int, default=1024)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    config_args(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score a manifest split with a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", choices=["train", "test", "all"], default="test")
    s.add_argument("--out", help="output directory (default: beside the checkpoint)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", help="plot and tabulate an evaluation")
    s.add_argument("eval_dir")
    s.add_argument("--out")
    s.add_argument("--format", nargs="+", default=["png", "svg"], choices=["png", "svg"])
    s.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
        return args.func(args)
    except OmniQAError as exc:
        _diagnostic(exc.code, str(exc))
        return exc.exit_status
    except (ValueError, TypeError) as exc:
        # remaining validation errors from config dataclasses
        _diagnostic("config", str(exc))
        return 1
    except ArithmeticError as exc:
        _diagnostic("numerical", str(exc))
        return NumericalError.exit_status
    except OSError as exc:
        _diagnostic("io", str(exc))
        return 2


if __name__ == "__main__":
    sys.exit(main())
