"""Command-line pipeline: gen -> train-teacher -> distill -> sample -> eval.

Exit codes: 0 success, 2 usage error (unknown flag or bad value), 3 missing
file, 4 configuration mismatch, 1 anything else.  Every command that
produces outputs writes a reproducibility stamp (config + seed + version)
beside them.  PADM_THREADS caps eval worker threads; aggregation is
index-ordered so the report does not depend on scheduling.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

import padm
from padm import ConfigMismatch, PadmError

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_CONFIG = 4


class _CliParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


class UsageError(Exception):
    pass


def _stamp(out_dir, command, config, seed):
    os.makedirs(out_dir, exist_ok=True)
    payload = {
        "command": command,
        "config": config,
        "seed": seed,
        "version": padm.__version__,
    }
    with open(os.path.join(out_dir, "stamp.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_train_config(path):
    from padm import trainer

    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path) as fh:
        return trainer.TrainConfig.from_dict(json.load(fh))


def _cmd_gen(args):
    from padm import phantom

    manifest = phantom.make_dataset(
        args.count,
        phantom.SpecRanges(),
        seed=args.seed,
        out_dir=args.out,
        grid_size=args.size,
        n_angles=args.angles,
    )
    _stamp(args.out, "gen",
           {"count": args.count, "size": args.size, "angles": args.angles},
           args.seed)
    print(f"generated {manifest['count']} phantoms in {args.out}")
    return EXIT_OK


def _cmd_train_teacher(args):
    from padm import trainer

    config = _read_train_config(args.config)
    dataset = trainer.load_dataset(args.data)
    _stamp(args.out, "train-teacher", config.to_dict(), config.seed)
    _, rows = trainer.train_teacher(dataset, config, args.out)
    print(f"teacher trained for {1 + int(rows[-1][0])} epochs -> {args.out}")
    return EXIT_OK


def _cmd_distill(args):
    from padm import model, trainer

    config = _read_train_config(args.config)
    if not os.path.exists(args.teacher):
        raise FileNotFoundError(args.teacher)
    teacher, meta = model.load_checkpoint(args.teacher)
    dataset = trainer.load_dataset(args.data)
    _stamp(args.out, "distill", config.to_dict(), config.seed)
    _, rows = trainer.distill_student(teacher, meta["schedule"], dataset, config, args.out)
    print(f"student distilled for {1 + int(rows[-1][0])} epochs -> {args.out}")
    return EXIT_OK


def _cmd_sample(args):
    from padm import bridge, model, trainer
    from padm.harness import io as hio

    if not os.path.exists(args.model):
        raise FileNotFoundError(args.model)
    m, meta = model.load_checkpoint(args.model)
    dataset = trainer.load_dataset(args.data)
    items = dataset.split(args.split)
    if not items:
        raise PadmError(f"dataset has no {args.split!r} items")
    timesteps = int(meta["schedule"]["T"])
    if not 2 <= args.steps <= timesteps:
        raise UsageError(f"--steps must lie in [2, {timesteps}]")
    sched = bridge.build_schedule(timesteps, float(meta["schedule"].get("s_max", 1.0)))
    os.makedirs(args.out, exist_ok=True)
    est = trainer.predict_slices(m, items, sched, args.steps)
    for k, item in enumerate(items):
        hio.write_tensor(os.path.join(args.out, f"{item.item_id}_pred.padt"),
                         est[k, 0].astype(np.float32))
    _stamp(args.out, "sample",
           {"model": os.path.abspath(args.model), "steps": args.steps, "split": args.split},
           int(meta.get("seed", 0)) if isinstance(meta.get("seed", 0), int) else 0)
    print(f"sampled {len(items)} {args.split} slices -> {args.out}")
    return EXIT_OK


def _cmd_eval(args):
    from padm import trainer
    from padm.harness import io as hio, metrics as hmetrics

    if not os.path.isdir(args.pred):
        raise FileNotFoundError(args.pred)
    dataset = trainer.load_dataset(args.gt)
    pairs = []
    for item in dataset.items:
        path = os.path.join(args.pred, f"{item.item_id}_pred.padt")
        if os.path.exists(path):
            pairs.append((item.item_id, path, item.x0))
    if not pairs:
        raise PadmError(f"no predictions matching {args.gt} items found in {args.pred}")

    def one(pair):
        item_id, path, gt = pair
        pred = hio.read_tensor(path)
        return (
            item_id,
            hmetrics.rmse(pred, gt),
            hmetrics.ssim(pred, gt),
            hmetrics.psnr(pred, gt),
        )

    workers = max(1, int(os.environ.get("PADM_THREADS", "1")))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one, pairs))  # map keeps input order
    else:
        rows = [one(p) for p in pairs]
    fmt = lambda v: f"{v:.17g}"
    with open(args.csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("id", "rmse", "ssim", "psnr"))
        for item_id, r, s, p in rows:
            w.writerow((item_id, fmt(r), fmt(s), fmt(p)))
        w.writerow((
            "aggregate",
            fmt(float(np.mean([r[1] for r in rows]))),
            fmt(float(np.mean([r[2] for r in rows]))),
            fmt(float(np.mean([r[3] for r in rows]))),
        ))
    _stamp(os.path.dirname(os.path.abspath(args.csv)) or ".", "eval",
           {"pred": os.path.abspath(args.pred), "count": len(rows)}, 0)
    print(f"evaluated {len(rows)} slices -> {args.csv}")
    return EXIT_OK


def _cmd_export_pgm(args):
    from padm.harness import io as hio

    if not os.path.exists(args.infile):
        raise FileNotFoundError(args.infile)
    hio.export_pgm(args.out, hio.read_tensor(args.infile))
    print(f"wrote {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _CliParser(prog="padm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_CliParser)

    p = sub.add_parser("gen", help="generate a synthetic phantom study")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--angles", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(run=_cmd_gen)

    p = sub.add_parser("train-teacher", help="train the attenuation-conditioned model")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(run=_cmd_train_teacher)

    p = sub.add_parser("distill", help="distill a NAC-only student from a teacher")
    p.add_argument("--teacher", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(run=_cmd_distill)

    p = sub.add_parser("sample", help="sample corrected slices from a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--input", dest="data", required=True)
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", required=True)
    p.set_defaults(run=_cmd_sample)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--csv", required=True)
    p.set_defaults(run=_cmd_eval)

    p = sub.add_parser("export-pgm", help="export a tensor file as an 8-bit PGM")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(run=_cmd_export_pgm)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.run(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigMismatch as exc:
        print(f"config mismatch: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PadmError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
