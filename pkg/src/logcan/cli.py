"""Command-line entry point: ``logcan {profile,forward,gradcheck,train-toy,eval}``.

Exit status: 0 on success, 1 on invalid arguments or failed checks, 2 on
I/O or file-format errors.
"""
from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ModelConfig, default_config, parse_grid
from .serialization import FormatError, load_tensor, save_tensor

logger = logging.getLogger("logcan")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2
TARGET_PARAMS = 0.8e6
TARGET_FLOPS = 11.9e9
TARGET_MEMORY_MB = 53


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _fmt(prog):
    return argparse.ArgumentDefaultsHelpFormatter(prog, max_help_position=32)


def _add_model_flags(p, with_steps=False):
    p.add_argument("--config", help="key = value configuration file (shipped default.cfg if omitted)")
    p.add_argument("--classes", type=int, help="number of classes K (overrides config)")
    p.add_argument("--width-factor", type=float, help="backbone width scale (overrides config)")
    p.add_argument("--d", type=int, help="working width after mapping (overrides config)")
    p.add_argument("--grid", help="patch grid for every stage, e.g. 4x4 (overrides config)")
    p.add_argument("--seed", type=int, default=42, help="random seed")
    if with_steps:
        p.add_argument("--steps", type=int, default=300, help="optimisation steps")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="logcan", description=__doc__.splitlines()[0], formatter_class=_fmt)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("profile", help="analytic params / FLOPs / memory report", formatter_class=_fmt)
    p.add_argument("--module", choices=["lca", "gca", "decoder"], default="lca", help="what to profile")
    p.add_argument("--input", default="2048x128x128",
                   help="CxHxW feature shape (lca, gca) or HxW / 3xHxW image shape (decoder)")
    p.add_argument("--config", help="configuration file (decoder module)")
    p.add_argument("--classes", type=int, default=6, help="number of classes K")
    p.add_argument("--d", type=int, default=None, help="working width (default: from config)")
    p.add_argument("--grid", default="4x4", help="LCA patch grid")
    p.add_argument("--width-factor", type=float, default=None, help="backbone width scale (decoder module)")
    p.add_argument("--sweep", help="calibrate d over start:stop:step or a comma list, e.g. 8:256:8")
    p.add_argument("--target-params", type=float, default=TARGET_PARAMS, help="calibration target, params")
    p.add_argument("--target-flops", type=float, default=TARGET_FLOPS, help="calibration target, FLOPs/MACs")
    p.add_argument("--flop-convention", choices=["flops", "macs"], default="flops",
                   help="multiply-add counted as 2 (flops) or 1 (macs)")
    p.add_argument("--out", help="write the report as CSV to this path")

    p = sub.add_parser("forward", help="run the network on an LGT1 image batch", formatter_class=_fmt)
    _add_model_flags(p)
    p.add_argument("--checkpoint", required=True, help="LGC1 parameter file")
    p.add_argument("--input", required=True, help="LGT1 images, N x 3 x H x W")
    p.add_argument("--out", required=True, help="LGT1 logits output path")

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks", formatter_class=_fmt)
    p.add_argument("--seed", type=int, default=42, help="random seed")
    p.add_argument("--coords", type=int, default=4, help="probed coordinates per parameter tensor (network)")
    p.add_argument("--tolerance", type=float, default=1e-4, help="pass threshold on the max relative error")

    p = sub.add_parser("train-toy", help="overfit the network on synthetic data", formatter_class=_fmt)
    _add_model_flags(p, with_steps=True)
    p.add_argument("--images", type=int, default=8, help="number of synthetic images")
    p.add_argument("--size", type=int, default=64, help="synthetic image extent (multiple of 32)")
    p.add_argument("--out", default="toy_run", help="output directory")

    p = sub.add_parser("eval", help="metrics from prediction / label LGT1 files", formatter_class=_fmt)
    p.add_argument("--input", required=True, help="LGT1 predicted class indices, N x H x W")
    p.add_argument("--labels", required=True, help="LGT1 ground-truth class indices, N x H x W")
    p.add_argument("--classes", type=int, default=6, help="number of classes K")
    p.add_argument("--out", help="write per-class CSV (class,iou,f1) to this path")
    return parser


def _load_config(args) -> ModelConfig:
    config = ModelConfig.load(args.config) if args.config else default_config()
    grids = None
    if getattr(args, "grid", None):
        grids = (parse_grid(args.grid),) * 4
    return config.with_updates(
        classes=getattr(args, "classes", None), width_factor=getattr(args, "width_factor", None),
        d=getattr(args, "d", None), grids=grids, seed=getattr(args, "seed", None),
    )


def _parse_sweep(text: str) -> list[int]:
    if ":" in text:
        start, stop, step = (int(t) for t in text.split(":"))
        return list(range(start, stop + 1, step))
    return [int(t) for t in text.split(",") if t.strip()]


def cmd_profile(args) -> int:
    from .decoder import build_decoder_graph, build_gca_graph, build_lca_module_graph
    from .profiler import calibrate_width, format_csv, format_sweep, format_table, profile
    from .validation import parse_shape

    dims = parse_shape(args.input)
    grid = parse_grid(args.grid)
    if args.module == "decoder":
        hw = dims[-2:]
        if len(hw) != 2:
            raise ValueError(f"decoder input needs HxW, got {args.input}")

        def build(d):
            cfg = _load_config(argparse.Namespace(
                config=args.config, classes=args.classes, width_factor=args.width_factor, d=d,
                grid=args.grid, seed=None))
            return build_decoder_graph(cfg, 1, *hw)
    else:
        if len(dims) != 3:
            raise ValueError(f"--input must be CxHxW for module {args.module}, got {args.input}")
        shape = (1,) + dims
        if args.module == "lca":
            def build(d):
                return build_lca_module_graph(shape, args.classes, d, grid)
        else:
            def build(d):
                return build_gca_graph(shape, args.classes, d)

    d = args.d
    if args.sweep:
        d, rows = calibrate_width(args.target_params, args.target_flops, _parse_sweep(args.sweep), build,
                                  args.flop_convention)
        print(f"calibration against {args.target_params / 1e6:g} M params, "
              f"{args.target_flops / 1e9:g} G ({args.flop_convention}):")
        print(format_sweep(rows, d))
        print(f"chosen d = {d}\n")
    if d is None:
        d = (ModelConfig.load(args.config) if args.config else default_config()).d
    report = profile(build(d), args.module, args.flop_convention)
    print(format_table([report]))
    if args.module == "lca":
        print(f"target: {TARGET_PARAMS / 1e6:g} M params, {TARGET_FLOPS / 1e9:g} G, "
              f"{TARGET_MEMORY_MB} MB (memory reported only)")
    if args.out:
        Path(args.out).write_text(format_csv([report]), encoding="utf-8")
    return EXIT_OK


def cmd_forward(args) -> int:
    from .estimator import ClassAwareSegmenter

    config = _load_config(args)
    model = ClassAwareSegmenter.from_config(config).load(args.checkpoint)
    images = load_tensor(args.input).numpy()
    save_tensor(args.out, model.decision_function(images))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(args.seed, args.coords)
    for name, err in results.items():
        print(f"{name:<24} {err:.3e}")
    worst = max(results.values())
    print(f"max relative error: {worst:.3e}")
    return EXIT_OK if worst < args.tolerance else EXIT_INVALID


def cmd_train_toy(args) -> int:
    from .estimator import ClassAwareSegmenter
    from .training import synth_data

    config = _load_config(args)
    images, labels = synth_data(args.seed, args.images, (args.size, args.size), config.classes)
    model = ClassAwareSegmenter.from_config(config, steps=args.steps)

    def log(step, loss):
        if step % 25 == 0:
            logger.info("step %d loss %.6f", step, loss)

    model.fit(images, labels, callback=log)
    report = model.evaluate(images, labels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "model.lgc")
    config.save(out / "config.cfg")
    (out / "metrics.txt").write_text(report.to_text(), encoding="utf-8")
    (out / "metrics.csv").write_text(report.to_csv(), encoding="utf-8")
    hist = model.history_
    rows = ["step,loss,seg_loss"] + [f"{i},{a!r},{b!r}" for i, (a, b) in enumerate(zip(hist.loss, hist.seg_loss))]
    (out / "loss.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    if hist.seg_loss:
        first, last = hist.seg_loss[0], hist.seg_loss[-1]
        print(f"segmentation loss: {first:.6f} -> {last:.6f} (reduced {1 - last / first:.2%})")
        print(f"total objective:   {hist.loss[0]:.6f} -> {hist.loss[-1]:.6f}")
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import metrics_compute

    pred = load_tensor(args.input).numpy()
    labels = load_tensor(args.labels).numpy()
    if pred.shape != labels.shape:
        raise ValueError(f"prediction shape {pred.shape} differs from label shape {labels.shape}")
    for arr, what in ((pred, "predictions"), (labels, "labels")):
        if not np.array_equal(arr, np.round(arr)):
            raise ValueError(f"{what} must hold integer class indices")
    report = metrics_compute(pred.astype(np.int64), labels.astype(np.int64), args.classes)
    print(report.to_text(), end="")
    if args.out:
        Path(args.out).write_text(report.to_csv(), encoding="utf-8")
    return EXIT_OK


COMMANDS = {
    "profile": cmd_profile,
    "forward": cmd_forward,
    "gradcheck": cmd_gradcheck,
    "train-toy": cmd_train_toy,
    "eval": cmd_eval,
}


def _thread_limit():
    limit = os.environ.get("LOGCAN_THREADS")
    if not limit:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(limit))


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        with _thread_limit():
            return COMMANDS[args.command](args)
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, ConfigError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
