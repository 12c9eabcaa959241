"""Command-line entry point: ``gsanet <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 validation or contract failure,
3 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import fileio
from .config import ConfigError, dump_config, parse_config
from .dataset import SegSample, gen_shapes_dataset
from .segnet import count_cost, param_shapes
from .sparsemax import softmax_rows, sparsemax
from .tensor import ContractError

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("gsanet")


class UsageError(Exception):
    pass


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ----------------------------------------------------------------------------
# dataset directories
# ----------------------------------------------------------------------------

def write_dataset(samples, out: Path, seed: int, num_classes: int, size: int):
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    files = []
    for i, s in enumerate(samples):
        img, lab = f"images/{i:05d}.ppm", f"labels/{i:05d}.pgm"
        fileio.write_ppm(out / img, s.image)
        fileio.write_pgm(out / lab, s.label)
        files.append({"image": img, "label": lab})
    manifest = {"format": "gsanet-shapes-1", "seed": seed, "num_classes": num_classes, "size": size,
                "count": len(files), "files": files}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_dataset(path: Path) -> tuple[list[SegSample], dict]:
    mpath = Path(path) / "manifest.json"
    if not mpath.is_file():
        raise FileNotFoundError(f"no dataset manifest at {mpath}")
    manifest = json.loads(mpath.read_text())
    samples = []
    for entry in manifest["files"]:
        img = fileio.read_ppm(Path(path) / entry["image"]).astype(np.float32) / 255
        lab = fileio.read_pgm(Path(path) / entry["label"])
        samples.append(SegSample(img, lab))
    return samples, manifest


def _configs(args):
    text = ""
    if args.config:
        text = Path(args.config).read_text()
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides += [f"model.seed={args.seed}", f"train.seed={args.seed}"]
    return parse_config(text, overrides)


def _check_classes(cfg, manifest, where):
    if manifest.get("num_classes") != cfg.num_classes:
        raise ValidationError(f"{where} has {manifest.get('num_classes')} classes but "
                              f"model.num_classes = {cfg.num_classes}")


def check_checkpoint(cfg, params: dict[str, np.ndarray]):
    expected = param_shapes(cfg)
    for name, shape in expected.items():
        if name not in params:
            raise ValidationError(f"checkpoint is missing tensor {name!r} required by the config")
        if tuple(params[name].shape) != tuple(shape):
            raise ValidationError(f"tensor {name!r} has shape {tuple(params[name].shape)} in the checkpoint, "
                                  f"config expects {tuple(shape)}")
    extra = sorted(set(params) - set(expected))
    if extra:
        raise ValidationError(f"checkpoint tensor {extra[0]!r} is not part of the configured model")


# ----------------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.classes < 2:
        raise UsageError("--classes must be at least 2")
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    try:
        samples = gen_shapes_dataset(args.n, args.classes, args.size, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    write_dataset(samples, Path(args.out), args.seed, args.classes, args.size)
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import train

    cfg, tcfg = _configs(args)
    if not Path(args.data).is_dir():
        raise FileNotFoundError(f"dataset directory {args.data} does not exist")
    train_set, manifest = load_dataset(Path(args.data))
    _check_classes(cfg, manifest, args.data)
    eval_set = None
    if args.eval_data:
        eval_set, emanifest = load_dataset(Path(args.eval_data))
        _check_classes(cfg, emanifest, args.eval_data)
    h, w = train_set[0].label.shape
    cfg.check_extent(h, w)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(dump_config(cfg, tcfg))
    with open(out / "metrics.log", "a") as fh:
        def on_log(line):
            fh.write(line + "\n")
            fh.flush()
            print(line)

        result = train(cfg, tcfg, train_set, eval_set, on_log=on_log)
    fileio.gst_write(result.params, out / "final.gst")
    fileio.gst_write(result.best_params, out / "best.gst")
    print(f"best miou={result.best_miou:.6f}; checkpoints in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import ConfusionMatrix, accumulate_confusion, miou, predict

    cfg, _ = _configs(args)
    if not Path(args.data).is_dir():
        raise FileNotFoundError(f"dataset directory {args.data} does not exist")
    samples, manifest = load_dataset(Path(args.data))
    _check_classes(cfg, manifest, args.data)
    labels = np.stack([s.label for s in samples])
    if args.predictions:
        preds = np.stack([fileio.read_pgm(Path(args.predictions) / Path(e["label"]).name)
                          for e in manifest["files"]])
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint or --predictions")
        params = fileio.gst_read(args.checkpoint)
        check_checkpoint(cfg, params)
        preds = predict(params, cfg, np.stack([s.image for s in samples]))
    if preds.shape != labels.shape:
        raise ValidationError(f"predictions {preds.shape} do not match labels {labels.shape}")
    if int(preds.max(initial=0)) >= cfg.num_classes:
        raise ValidationError(f"prediction class {int(preds.max())} outside [0, {cfg.num_classes})")
    if args.dump_preds:
        dump = Path(args.dump_preds)
        dump.mkdir(parents=True, exist_ok=True)
        for e, p in zip(manifest["files"], preds):
            fileio.write_pgm(dump / Path(e["label"]).name, p)
            fileio.write_ppm(dump / (Path(e["label"]).stem + "_color.ppm"), fileio.colorize(p))
    cm = accumulate_confusion(preds, labels, ConfusionMatrix(cfg.num_classes))
    score, ious = miou(cm)
    print(f"{'class':>6}  {'IoU':>8}")
    for k, v in enumerate(ious):
        print(f"{k:>6}  {'absent' if np.isnan(v) else f'{v:.6f}':>8}")
    print(f"miou={score:.6f}")
    return EXIT_OK


def cmd_count(args) -> int:
    cfg, _ = _configs(args)
    report = count_cost(cfg, args.height, args.width)
    print(report.as_kv() if args.format == "kv" else report.as_table())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import gradcheck, sparsemax as sm

    names = args.op or list(gradcheck.SUITES)
    unknown = [n for n in names if n not in gradcheck.SUITES and n != "sparsemax"]
    if unknown:
        raise UsageError(f"unknown op {unknown[0]!r}; choose from {', '.join(gradcheck.SUITES)}")
    # "sparsemax" selects every suite that routes through the sparsemax JVP
    names = [m for n in names for m in (["sparsemax_rows", "gaf_sparsemax"] if n == "sparsemax" else [n])]
    saved = sm._row_jvp
    if args.inject_wrong_jvp:
        # deliberately wrong: omits the mean subtraction on the support
        sm._row_jvp = lambda p, v: np.where(p > 0, v, 0).astype(v.dtype)
    failed = 0
    try:
        for r in gradcheck.run_all(names, probes=args.probes, seed=args.seed):
            status = "ok" if r.ok else "FAIL"
            print(f"{r.name:<22} worst_rel_err={r.worst:.3e} probes={r.probes} skipped={r.skipped} {status}")
            failed += not r.ok
    finally:
        sm._row_jvp = saved
    print(f"{len(names) - failed}/{len(names)} passed (tolerance {gradcheck.TOL:g})")
    return EXIT_OK if not failed else EXIT_INVALID


def _fmt(v: float) -> str:
    return f"{v:.10g}"


def cmd_sparsemax(args) -> int:
    raw = args.z if args.z is not None else sys.stdin.read()
    try:
        z = [float(t) for t in raw.replace(",", " ").split()]
    except ValueError as exc:
        raise UsageError(f"cannot parse input vector: {exc}") from None
    if not z:
        raise UsageError("empty input vector")
    if args.mode == "softmax":
        p = softmax_rows(np.asarray(z, dtype=np.float64)).data
        print(" ".join(_fmt(v) for v in p))
        return EXIT_OK
    proj = sparsemax(z)
    print(" ".join(_fmt(v) for v in proj.p))
    print(f"tau={_fmt(proj.tau)}")
    print("support=" + " ".join(str(i) for i in proj.support))
    return EXIT_OK


# ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gsanet", description="GSANet segmentation toolkit on synthetic data")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="config file with [model] and [train] sections")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config key")
        sp.add_argument("--seed", type=int, help="seed for every random stream (overrides the config)")

    g = sub.add_parser("gen-data", help="generate a synthetic shapes dataset")
    g.add_argument("--n", type=int, default=200)
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    with_config(t)
    t.add_argument("--data", required=True, help="training dataset directory")
    t.add_argument("--eval-data", help="held-out dataset directory for periodic mIoU")
    t.add_argument("--out", required=True, help="run directory for checkpoints and metrics.log")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="single-scale mIoU evaluation")
    with_config(e)
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--predictions", help="score PGM predictions from this directory instead of a model")
    e.add_argument("--dump-preds", help="write predicted label maps (PGM) and colour previews here")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("count", help="parameter and FLOP report")
    with_config(c)
    c.add_argument("--height", type=int, default=512)
    c.add_argument("--width", type=int, default=1024)
    c.add_argument("--format", choices=("table", "kv"), default="table")
    c.set_defaults(func=cmd_count)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    gc.add_argument("--op", action="append", help="restrict to one suite (repeatable); 'sparsemax' selects its users")
    gc.add_argument("--probes", type=int, default=64)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--inject-wrong-jvp", action="store_true", help=argparse.SUPPRESS)
    gc.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("sparsemax", help="project a vector onto the simplex")
    s.add_argument("--z", help="comma or space separated floats (default: read stdin)")
    s.add_argument("--mode", choices=("sparsemax", "softmax"), default="sparsemax")
    s.set_defaults(func=cmd_sparsemax)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"gsanet {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ContractError, ValidationError, fileio.FormatError, KeyError) as exc:
        print(f"gsanet {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"gsanet {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
