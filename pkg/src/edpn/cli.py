"""Command-line interface: ``edpn {degrade,train,eval,infer}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

import argparse
import logging
import os
import sys

from edpn import checkpoint as ckpt_io
from edpn.checkpoint import atomic_write
from edpn.config import load_config
from edpn.degradation import degrade
from edpn.errors import ConfigError, EDPNError
from edpn.imageio import list_images, read_image, write_image
from edpn.inference import restore
from edpn.losses import METRIC_COLUMNS, MetricReport, evaluate
from edpn.primitives import upsample_bilinear
from edpn.training import train, write_trace_csv

log = logging.getLogger("edpn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="edpn", description="Blurry image restoration (BISR / BID).")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", metavar="PATH", help="key = value config file")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
        sp.add_argument("--checkpoint", metavar="PATH")
        sp.add_argument("--out", metavar="DIR")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("degrade", help="build an (input, gt) corpus from sharp images")
    common(sp)
    sp.add_argument("--corpus", metavar="DIR", help="directory of sharp images")
    sp.add_argument("--format", choices=("ppm", "edpnt"), default="ppm")

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.add_argument("--corpus", metavar="DIR", help="sharp images, or a degraded corpus with input/ and gt/")

    for name, helptext in (("eval", "compute metrics over a degraded corpus"), ("infer", "restore images")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.add_argument("--self-ensemble", action="store_true")
        sp.add_argument("--model", dest="models", action="append", default=[], metavar="CKPT",
                        help="model-ensemble member (repeatable)")
        sp.add_argument("--weights", metavar="W1,W2,...")
        if name == "eval":
            sp.add_argument("--corpus", metavar="DIR", help="directory with input/ and gt/")
        else:
            sp.add_argument("--input", metavar="PATH", help="image file or directory")
    return p


def resolve_config(args):
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides += [f"train.seed={args.seed}", f"degrade.seed={args.seed}"]
    if args.checkpoint:
        overrides.append(f"paths.checkpoint={args.checkpoint}")
    if args.out:
        overrides.append(f"paths.out={args.out}")
    if getattr(args, "corpus", None):
        overrides.append(f"paths.corpus={args.corpus}")
    if getattr(args, "input", None):
        overrides.append(f"paths.input={args.input}")
    if getattr(args, "self_ensemble", False):
        overrides.append("ensemble.self_ensemble=true")
    if getattr(args, "models", None):
        overrides.append("ensemble.model_paths=" + ",".join(args.models))
    if getattr(args, "weights", None):
        overrides.append(f"ensemble.model_weights={args.weights}")
    return load_config(args.config, overrides)


def _require(value, key):
    if not value:
        raise ConfigError("required", key=key)
    return value


def _stem(path):
    return os.path.splitext(os.path.basename(path))[0]


def _pair_dirs(corpus):
    return os.path.join(corpus, "input"), os.path.join(corpus, "gt")


def _pairs_from_dir(corpus):
    inp_dir, gt_dir = _pair_dirs(corpus)
    gts = {_stem(p): p for p in list_images(gt_dir)}
    pairs = []
    for p in list_images(inp_dir):
        name = _stem(p)
        if name not in gts:
            raise EDPNError(f"no ground truth for {p}")
        pairs.append((name, p, gts[name]))
    if not pairs:
        raise EDPNError(f"no images found in {inp_dir}")
    return pairs


def cmd_degrade(cfg, args):
    corpus = _require(cfg.paths.corpus, "paths.corpus")
    out = _require(cfg.paths.out, "paths.out")
    files = list_images(corpus)
    if not files:
        raise EDPNError(f"no .ppm/.edpnt images in {corpus}")
    ext = "." + args.format
    inp_dir, gt_dir = _pair_dirs(out)
    for i, path in enumerate(files):
        inp, gt = degrade(read_image(path), cfg.degrade, i)
        write_image(os.path.join(inp_dir, _stem(path) + ext), inp)
        write_image(os.path.join(gt_dir, _stem(path) + ext), gt)
        log.info("degraded %s", path)
    print(f"wrote {len(files)} pairs to {out}")
    return 0


def cmd_train(cfg, args):
    corpus = _require(cfg.paths.corpus, "paths.corpus")
    out = _require(cfg.paths.out, "paths.out")
    inp_dir, gt_dir = _pair_dirs(corpus)
    resume = ckpt_io.load(cfg.paths.checkpoint) if cfg.paths.checkpoint else None
    if resume is not None and resume.model_cfg != cfg.model:
        raise ConfigError("checkpoint model config differs from the configured model", key="paths.checkpoint")
    if os.path.isdir(inp_dir) and os.path.isdir(gt_dir):
        pairs = [(read_image(i), read_image(g)) for _, i, g in _pairs_from_dir(corpus)]
        ckpt, trace = train(cfg.model, cfg.train, pairs=pairs, resume=resume, out_dir=out)
    else:
        images = [read_image(p) for p in list_images(corpus)]
        ckpt, trace = train(cfg.model, cfg.train, corpus=images, spec=cfg.degrade, resume=resume, out_dir=out)
    write_trace_csv(trace, os.path.join(out, "loss_trace.csv"))
    atomic_write(os.path.join(out, "run.cfg"), _config_text(cfg).encode())
    last = trace[-1]["total"] if trace else float("nan")
    print(f"trained {len(trace)} iterations, final loss {last:.6f}; checkpoint {os.path.join(out, 'last.edpn')}")
    return 0


def _config_text(cfg):
    from edpn.config import to_text

    return to_text(cfg)


def _ensemble_or_checkpoint(cfg):
    if not cfg.ensemble.model_paths and not cfg.paths.checkpoint:
        return None
    return cfg.paths.checkpoint or None


def cmd_eval(cfg, args):
    corpus = _require(cfg.paths.corpus, "paths.corpus")
    ckpt = _ensemble_or_checkpoint(cfg)
    model = ckpt_io.load(ckpt).build() if ckpt else None
    rows, reports = ["name," + ",".join(METRIC_COLUMNS)], []
    for name, inp_path, gt_path in _pairs_from_dir(corpus):
        inp, gt = read_image(inp_path), read_image(gt_path)
        if cfg.ensemble.model_paths or model is not None:
            pred = restore(inp, model, cfg.ensemble, cfg.infer.tile, cfg.infer.overlap)
        elif cfg.model.scale > 1:
            pred = upsample_bilinear(inp[None], cfg.model.scale)[0]  # no-model baseline
        else:
            pred = inp
        rep = evaluate(gt, pred)
        reports.append(rep)
        rows.append(f"{name},{rep.csv_row()}")
    mean = MetricReport.mean(reports)
    rows.append(f"mean,{mean.csv_row()}")
    text = "\n".join(rows) + "\n"
    if cfg.paths.out:
        atomic_write(os.path.join(cfg.paths.out, "metrics.csv"), text.encode())
    else:
        sys.stdout.write(text)
    sys.stdout.write(mean.as_text())
    return 0


def cmd_infer(cfg, args):
    src = _require(cfg.paths.input, "paths.input")
    out = _require(cfg.paths.out, "paths.out")
    ckpt = _ensemble_or_checkpoint(cfg)
    if ckpt is None and not cfg.ensemble.model_paths:
        raise ConfigError("required", key="paths.checkpoint")
    model = ckpt_io.load(ckpt).build() if ckpt else None
    files = list_images(src) if os.path.isdir(src) else [src]
    for path in files:
        pred = restore(read_image(path), model, cfg.ensemble, cfg.infer.tile, cfg.infer.overlap)
        write_image(os.path.join(out, os.path.basename(path)), pred)
    print(f"restored {len(files)} image(s) into {out}")
    return 0


COMMANDS = {"degrade": cmd_degrade, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"edpn: usage error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
    except (ConfigError, OSError) as exc:
        print(f"edpn: config error: {exc}", file=sys.stderr)
        return 1
    try:
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"edpn: config error: {exc}", file=sys.stderr)
        return 1
    except (EDPNError, OSError, RuntimeError, ValueError) as exc:
        print(f"edpn: {args.command} failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
