"""Command line entry point: run, eval, sweep, preview-fusion, inspect-memory, train."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np
from PIL import Image

log = logging.getLogger("rgbdvos")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p):
    p.add_argument("--sequence", required=True, help="sequence directory (rgb/, depth/, masks/)")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--checkpoint", help="model checkpoint (.npz)")
    p.add_argument("--refiner", choices=["none", "mock-identity", "mock-oracle", "external"])
    p.add_argument("--M", type=float, dest="shift", help="object shift threshold in pixels")
    p.add_argument("--E-threshold", type=float, dest="entropy", help="depth entropy threshold in bits")
    p.add_argument("--mem-every", type=int, help="insert into working memory every r frames")
    p.add_argument("--working-capacity", type=int, help="working memory capacity in frames")
    p.add_argument("--seed", type=int)
    p.add_argument("--endpoint", help="external refiner URL (or $RGBDVOS_REFINER_ENDPOINT)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rgbdvos", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("run", help="segment a sequence")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-memory", help="write the final memory stores to this .npz")

    p = sub.add_parser("eval", help="score predicted masks against ground truth")
    p.add_argument("--pred", required=True, help="directory of predicted label PNGs")
    p.add_argument("--gt", required=True, help="sequence directory with masks/")
    p.add_argument("--report", help="report path (default: <pred>/report.json)")
    p.add_argument("--tolerance", type=float, help="boundary tolerance in pixels")

    p = sub.add_parser("sweep", help="J&F over a grid of shift/entropy thresholds")
    _common(p)
    p.add_argument("--grid", default="default",
                   help="'default' or 'M1,M2,...:E1,E2,...'")
    p.add_argument("--out", help="write the table as JSON here")

    p = sub.add_parser("preview-fusion", help="write fused crops for inspection")
    _common(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("inspect-memory", help="summarize a memory dump")
    p.add_argument("dump")

    p = sub.add_parser("train", help="fit a toy model on annotated sequences")
    p.add_argument("--sequence", action="append", required=True)
    p.add_argument("--config")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint-out", required=True)
    p.add_argument("--trace", help="write loss records (JSON lines) here")
    return parser


def _config(args):
    from .pipeline import load_config
    overrides = {}
    for attr, key in (("refiner", "refiner"), ("shift", "refinement.shift_threshold"),
                      ("entropy", "refinement.entropy_threshold"),
                      ("mem_every", "memory.insert_every"),
                      ("working_capacity", "memory.working_capacity"),
                      ("endpoint", "endpoint"), ("checkpoint", "checkpoint")):
        v = getattr(args, attr, None)
        if v is not None:
            overrides[key] = str(v)
    seed = getattr(args, "seed", None)
    if seed is not None:
        overrides["seed"] = str(seed)
        overrides["backbone.seed"] = str(seed)
    return load_config(getattr(args, "config", None), overrides)


def _model(cfg):
    from .model import build_model, load_model
    return load_model(cfg.checkpoint) if cfg.checkpoint else build_model(cfg.model_config())


def cmd_run(args):
    from .core import load_sequence
    from .pipeline import dump_memory, run_sequence, write_outputs
    cfg = _config(args)
    ds = load_sequence(args.sequence)
    result = run_sequence(ds, cfg, _model(cfg))
    write_outputs(result, args.out)
    if args.dump_memory:
        dump_memory(result.memories, args.dump_memory)
    print(f"wrote {len(result.masks)} masks to {os.path.join(args.out, 'masks')}")
    if result.report is not None:
        print(result.report.summary())
    return 0


def _read_predictions(pred_dir):
    from .core import _frame_files, read_label_png
    d = os.path.join(pred_dir, "masks")
    files = _frame_files(d if os.path.isdir(d) else pred_dir)
    return {i: read_label_png(p) for i, p in files.items()}


def cmd_eval(args):
    from .core import load_sequence
    from .evaluation import evaluate_sequence
    ds = load_sequence(args.gt)
    report = evaluate_sequence(_read_predictions(args.pred), ds, args.tolerance)
    path = args.report or os.path.join(args.pred, "report.json")
    with open(path, "w") as fh:
        fh.write(report.to_json(indent=2))
    print(f"J: {report.J_M:.4f}")
    print(f"F: {report.F_M:.4f}")
    print(f"J&F: {report.JF:.4f}")
    return 0


def parse_grid(text):
    from .evaluation import DEFAULT_ENTROPIES, DEFAULT_SHIFTS
    if text == "default":
        return DEFAULT_SHIFTS, DEFAULT_ENTROPIES
    try:
        m, e = text.split(":")
        shifts = tuple(float(x) for x in m.split(",") if x)
        ents = tuple(float(x) for x in e.split(",") if x)
    except ValueError:
        raise UsageError(f"bad grid {text!r}; expected 'M1,M2:E1,E2'")
    if not shifts or not ents:
        raise UsageError("grid must be non-empty")
    return shifts, ents


def cmd_sweep(args):
    from .core import load_sequence
    from .evaluation import sweep
    from .pipeline import sweep_runner
    shifts, ents = parse_grid(args.grid)
    cfg = _config(args)
    ds = load_sequence(args.sequence)
    table = sweep(ds, sweep_runner(cfg, _model(cfg)), shifts, ents)
    print("M\tE\tJ&F")
    for m, e, s in table.rows():
        print(f"{m:g}\t{e:g}\t{s:.4f}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(table.to_dict(), fh, indent=2)
    return 0


def cmd_preview(args):
    from .core import load_sequence
    from .pipeline import run_sequence
    cfg = _config(args)
    if cfg.refiner == "none":
        cfg = cfg.replace(refiner="mock-identity")
    ds = load_sequence(args.sequence)
    result = run_sequence(ds, cfg, _model(cfg), evaluate=False)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "fusion.jsonl"), "w") as fh:
        for rec in result.fusions:
            stem = f"{rec.frame_index:05d}_obj{rec.object_id}"
            Image.fromarray(rec.fused.image).save(os.path.join(args.out, stem + "_fused.png"))
            Image.fromarray(rec.fused.pseudo).save(os.path.join(args.out, stem + "_pseudo.png"))
            fh.write(json.dumps({
                "frame": rec.frame_index, "object": rec.object_id,
                "crop": list(rec.fused.crop_box), "entropy": rec.fused.entropy,
                "depth_used": rec.fused.depth_used,
                "w_rgb": rec.fused.s_rgb, "w_d": rec.fused.s_d,
                "point_from": rec.prompt.point_source, "box_from": rec.prompt.box_source,
            }) + "\n")
    print(f"wrote {len(result.fusions)} fused crops to {args.out}")
    return 0


def summarize_dump(path) -> list[str]:
    lines = []
    with np.load(path) as z:
        objects = sorted({k.split(".")[0] for k in z.files})
        for obj in objects:
            keys = [k for k in z.files if k.startswith(obj + ".")]
            working = sorted({int(k.split(".")[2]) for k in keys if k.split(".")[1] == "working"})
            lines.append(f"{obj}: {len(working)} working entries")
            for i in working:
                pre = f"{obj}.working.{i}"
                usage = z[pre + ".usage"]
                lines.append(f"  frame {int(z[pre + '.frame'])}: key {z[pre + '.key'].shape} "
                             f"value {z[pre + '.value'].shape} usage total {int(usage.sum())} "
                             f"max {int(usage.max()) if usage.size else 0}")
            if f"{obj}.longterm.keys" in z.files:
                lt = z[f"{obj}.longterm.keys"]
                fr = z[f"{obj}.longterm.frames"]
                lines.append(f"  long-term: {lt.shape[0]} prototypes from frames {sorted(set(fr.tolist()))}")
            else:
                lines.append("  long-term: empty")
    return lines


def cmd_inspect(args):
    for line in summarize_dump(args.dump):
        print(line)
    return 0


def cmd_train(args):
    from .core import load_sequence
    from .model import save_checkpoint
    from .training import OptimizerConfig, fit_toy, write_loss_trace
    from .model import build_model
    cfg = _config(args)
    datasets = [load_sequence(p) for p in args.sequence]
    for d in datasets:
        if not all(f.has_gt for f in d.frames):
            raise ValueError(f"{d.name}: training needs masks for every frame")
    res = fit_toy(datasets, args.steps, OptimizerConfig(lr=args.lr),
                  model=build_model(cfg.model_config()))
    save_checkpoint(res.model, args.checkpoint_out)
    if args.trace:
        write_loss_trace(res.trace, args.trace)
    print(f"loss {res.losses[0]:.4f} -> {res.losses[-1]:.4f}; saved {args.checkpoint_out}")
    return 0


COMMANDS = {"run": cmd_run, "eval": cmd_eval, "sweep": cmd_sweep,
            "preview-fusion": cmd_preview, "inspect-memory": cmd_inspect, "train": cmd_train}


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_help(sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        log.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
