"""Command-line entry point: synth, train, enhance, evaluate, gradcheck, inspect.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path


from .data import (
    PPMError,
    list_images,
    parse_recipe_overrides,
    read_ppm,
    write_ppm,
    write_synthetic_dataset,
)
from .layers import ConfigError
from .metrics import QualityReport, measure_sitt, psnr, ssim
from .trainer import Checkpoint, CheckpointError, Enhancer, TrainConfig, train

USAGE_ERROR = 1
RUNTIME_ERROR = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _echo(args: argparse.Namespace) -> None:
    items = {k: v for k, v in vars(args).items() if k != "func"}
    print("# resolved: " + " ".join(f"{k}={v}" for k, v in items.items()))


def cmd_synth(args) -> int:
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    if args.size % 8 or args.size < 16:
        raise UsageError("--size must be a multiple of 8 and at least 16")
    overrides = parse_recipe_overrides(Path(args.recipe).read_text()) if args.recipe else None
    try:
        counts = write_synthetic_dataset(args.out, args.count, args.size, args.seed, overrides)
    except OSError as e:
        print(f"error: cannot write dataset: {e}", file=sys.stderr)
        return RUNTIME_ERROR
    for sub, n in counts.items():
        print(f"{sub}: {n} images")
    return 0


def cmd_train(args) -> int:
    try:
        text = Path(args.config).read_text()
    except OSError as e:
        raise UsageError(f"cannot read config: {e}") from None
    config = TrainConfig.from_text(text)
    config.validate(check_paths=True)
    print(config.to_text(), end="")
    if args.resume and not Path(args.resume).is_file():
        raise UsageError(f"--resume checkpoint {args.resume} does not exist")
    result = train(config, resume=args.resume, log=print)
    how = "early stop" if result.stopped_early else "epoch limit"
    print(f"finished at epoch {result.last_epoch} ({how}); best epoch {result.best_epoch} "
          f"total_g={result.best_loss:.9g}")
    return 0


def cmd_enhance(args) -> int:
    enhancer = Enhancer.from_file(args.ckpt)
    src = Path(args.inp)
    files = [src] if src.is_file() else list_images(src)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    failures = 0
    for f in files:
        try:
            img = read_ppm(f, "low").pixels
            write_ppm(out / f.name, enhancer(img))
        except (ConfigError, PPMError) as e:
            failures += 1
            print(f"warning: {f.name}: {e}", file=sys.stderr)
    print(f"enhanced {len(files) - failures} of {len(files)} images into {out}")
    return RUNTIME_ERROR if files and failures == len(files) else 0


def cmd_evaluate(args) -> int:
    enhanced = {p.name: p for p in list_images(args.enhanced)}
    reference = {p.name: p for p in list_images(args.reference)}
    report = QualityReport()
    for name in sorted(set(enhanced) | set(reference)):
        if name not in enhanced or name not in reference:
            report.skipped.append(name)
            print(f"warning: {name} has no counterpart; skipped", file=sys.stderr)
            continue
        a, b = read_ppm(enhanced[name]).pixels, read_ppm(reference[name]).pixels
        report.add(name, psnr(a, b), ssim(a, b))
    if report.count == 0:
        print("error: no image names match between the two directories", file=sys.stderr)
        return RUNTIME_ERROR
    if args.time:
        if not (args.ckpt and args.inp):
            raise UsageError("--time needs --ckpt and --in")
        enhancer = Enhancer.from_file(args.ckpt)
        images = [read_ppm(p).pixels for p in list_images(args.inp)]
        report.sitt_ms, report.sitt_std_ms = measure_sitt(enhancer, images)
    text = report.to_text()
    print(text, end="")
    if report.skipped:
        print(f"warnings: {len(report.skipped)}", file=sys.stderr)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "quality.txt").write_text(text)
        (out / "quality.kv").write_text(report.to_kv())
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    seeds = tuple(int(s) for s in args.seeds.split(","))
    reports = run_suite(seeds, log=print)
    return 0 if all(r.passed for r in reports) else RUNTIME_ERROR


def cmd_inspect(args) -> int:
    ck = Checkpoint.load(args.ckpt)
    total = 0
    for name, arr in ck.tensors.items():
        print(f"{name} {'x'.join(map(str, arr.shape)) or 'scalar'}")
    for arr in ck.model_tensors().values():
        total += arr.size
    print(f"total parameters: {total}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fundusgan", description=__doc__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    s = sub.add_parser("synth", help="write a synthetic unpaired dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--size", type=int, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--recipe", help="key = value file fixing degradation parameters")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train from a key = value config file")
    s.add_argument("--config", required=True)
    s.add_argument("--resume")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("enhance", help="run G_H over a PPM file or directory")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_enhance)

    s = sub.add_parser("evaluate", help="PSNR/SSIM by filename, optional SITT")
    s.add_argument("--enhanced", required=True)
    s.add_argument("--reference", required=True)
    s.add_argument("--time", action="store_true", help="also measure single-image test time")
    s.add_argument("--ckpt", help="checkpoint timed by --time")
    s.add_argument("--in", dest="inp", help="images timed by --time")
    s.add_argument("--out", help="directory for quality.txt and quality.kv")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    s.add_argument("--seeds", default="0,1,2")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("inspect", help="list checkpoint tensors and parameter count")
    s.add_argument("--ckpt", required=True)
    s.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _echo(args)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return USAGE_ERROR
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return USAGE_ERROR
    except (CheckpointError, PPMError, FileNotFoundError, OSError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
