"""Command-line entry point: ``fracdet verify | cost | train-demo | heatmap``.

Exit codes: 0 pass, 1 verification failure, 2 usage or config error,
3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import params as P
from .complexity import cost_report
from .config import ConfigError, RunConfig
from .core.tensor import NonFiniteError
from .demo import _jsonable, run_demo, upsample, write_demo_outputs
from .detector.model import build_model
from .detector.scenes import read_pgm, write_pgm
from .detector.train import heatmap
from .verify import SUITES, run_suite

EXIT_PASS, EXIT_FAIL, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


def timestamp() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")


def parse_shape(text: str) -> tuple[int, int, int, int]:
    try:
        shape = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise UsageError(f"shape {text!r} is not a comma-separated list of integers") from None
    if len(shape) != 4 or min(shape) < 1:
        raise UsageError(f"shape {text!r} must be four positive integers N,C,H,W")
    return shape


def resolve_config(args) -> RunConfig:
    overrides = list(args.set or [])
    for key in ("seed", "outdir", "epochs", "lr", "with_dfa", "with_mc", "scenes"):
        value = getattr(args, key, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    for item in getattr(args, "tol", None) or []:
        key = item.partition("=")[0].strip()
        if key not in RunConfig.TOLERANCE_KEYS:
            raise ConfigError(f"{key!r} is not a tolerance; choose from {', '.join(RunConfig.TOLERANCE_KEYS)}")
        overrides.append(item)
    return RunConfig.load(args.config, overrides)


# ---------------------------------------------------------------------------
# commands


def cmd_verify(args) -> int:
    cfg = resolve_config(args)
    report = run_suite(
        args.suite,
        cfg.tolerances(),
        dfa=cfg.dfa_config(8),
        mc=cfg.mc_config(8),
        detector=cfg.detector_config(),
    )
    report.config = cfg.to_dict()
    doc = {**report.to_dict(), "timestamp": timestamp()}
    path = Path(cfg.outdir) / f"verify-{args.suite}.json"
    write_json(path, doc)
    failed = [e for e in report.entries if not e.passed]
    for e in failed:
        print(f"FAIL {e.id}: measured {e.measured:.3e} (tolerance {e.tolerance:.1e})", file=sys.stderr)
    print(f"{args.suite}: {len(report.entries) - len(failed)}/{len(report.entries)} checks passed -> {path}")
    return EXIT_PASS if report.passed else EXIT_FAIL


def cmd_cost(args) -> int:
    cfg = resolve_config(args)
    shape = parse_shape(args.shape)
    try:
        if args.module == "dfa":
            module = cfg.dfa_config(shape[1])
        elif args.module == "mc":
            module = cfg.mc_config(shape[1])
        else:
            module = cfg.detector_config()
        rep = cost_report(module, shape)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(cfg.outdir)
    stem = f"cost-{args.module}"
    write_json(out / f"{stem}.json", {**rep.to_dict(), "module": args.module, "config": cfg.to_dict(),
                                      "version": __version__, "timestamp": timestamp()})
    (out / f"{stem}.csv").write_text(rep.to_csv())
    print(f"{args.module} {shape}: params {rep.total_params}, MACs {rep.total_macs} -> {out / stem}.{{json,csv}}")
    return EXIT_PASS


def cmd_train_demo(args) -> int:
    cfg = resolve_config(args)
    result = run_demo(cfg)
    paths = write_demo_outputs(result, cfg, Path(cfg.outdir), timestamp())
    if result.diverged:
        print(f"training diverged after {len(result.history)} epochs: {result.diverged}", file=sys.stderr)
        return EXIT_RUNTIME
    s = result.summary
    print(f"AP50 {s['ap50']:.3f}  mAP {s['map_50_95']:.3f}  final loss {s['final_loss']:.4f}  params {s['params']['total']}"
          f" -> {paths['eval']}")
    return EXIT_PASS


def cmd_heatmap(args) -> int:
    try:
        blob = Path(args.model).read_bytes()
        header, _ = P.parse(blob)
        image = read_pgm(args.image)
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    cfg = RunConfig.from_values(header.get("meta", {}).get("config", {}))
    model = build_model(cfg.detector_config(), 0)
    P.loads(model, blob)
    cell = None
    if args.cell:
        try:
            r, c = (int(v) for v in args.cell.split(","))
        except ValueError:
            raise UsageError(f"cell {args.cell!r} must be 'row,col'") from None
        cell = (r, c)
    stride = model.config.stride
    h, w = image.shape
    if h % stride or w % stride:
        raise UsageError(f"image size {h}x{w} is not a multiple of the stride {stride}")
    if cell is not None and not (0 <= cell[0] < h // stride and 0 <= cell[1] < w // stride):
        raise UsageError(f"cell {cell} outside the {h // stride}x{w // stride} grid")
    cam = heatmap(model, image[None], cell)
    out = Path(args.out) if args.out else Path(args.image).with_suffix(".heatmap.pgm")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_pgm(out, upsample(cam, stride))
    r, c = np.unravel_index(int(np.argmax(cam)), cam.shape)
    print(f"heatmap peak at cell ({r}, {c}) -> {out}")
    return EXIT_PASS


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file, or a JSON report to re-run from")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    common.add_argument("--outdir", help="output directory (default: $FRACDET_OUTDIR or ./fracdet-out)")
    common.add_argument("--seed", type=int, help="seed for every random draw in the run")

    parser = argparse.ArgumentParser(prog="fracdet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", parents=[common], help="run an invariant/oracle suite")
    p.add_argument("--suite", required=True, choices=SUITES + ("all",))
    p.add_argument("--tol", action="append", metavar="NAME=VALUE", help="override one tolerance (repeatable)")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("cost", parents=[common], help="parameter and MAC table for a module")
    p.add_argument("--module", required=True, choices=("dfa", "mc", "detector"))
    p.add_argument("--shape", required=True, help="input shape N,C,H,W")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("train-demo", parents=[common], help="train and evaluate the toy detector")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--scenes", type=int)
    p.add_argument("--with-dfa", dest="with_dfa", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--with-mc", dest="with_mc", action=argparse.BooleanOptionalAction, default=None)
    p.set_defaults(func=cmd_train_demo)

    p = sub.add_parser("heatmap", help="gradient-weighted heatmap of a trained model on one image")
    p.add_argument("--model", required=True, help="model.params written by train-demo")
    p.add_argument("--image", required=True, help="binary PGM image")
    p.add_argument("--cell", help="target cell 'row,col' (default: highest objectness)")
    p.add_argument("--out", help="output PGM path")
    p.set_defaults(func=cmd_heatmap, config=None, set=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"fracdet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteError, RuntimeError, OSError, ValueError) as exc:
        print(f"fracdet: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
