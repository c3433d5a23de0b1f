"""Command line: train, eval, segment, phantoms.

Every subcommand accepts --config (a JSON document) plus repeated
--set key=value overrides; the ablation switches --no-ran, --no-fspa and
--no-bcma are shorthand for the matching enabled flags.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from .. import numerics as nx
from ..encoder import load_features
from ..errors import ProtosegError
from .config import load_config
from .evaluation import evaluate, format_table, write_report_csv
from .pgm import (
    image_to_unit,
    mask_to_pgm_array,
    pgm_array_to_mask,
    read_pgm,
    write_pgm,
)
from .phantoms import generate_phantom
from .training import load_checkpoint, train


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None,
                        help="JSON config document (defaults apply otherwise)")
    parser.add_argument("--set", action="append", default=[], dest="overrides",
                        metavar="KEY=VALUE", help="override one config key")
    parser.add_argument("--no-ran", action="store_true",
                        help="bypass resemblance attention")
    parser.add_argument("--no-fspa", action="store_true",
                        help="plain masked pooling instead of cluster prototypes")
    parser.add_argument("--no-bcma", action="store_true",
                        help="unrefined background prototypes")


def _config_from(args) -> "RunConfig":
    overrides = list(args.overrides)
    if args.no_ran:
        overrides.append("ran.enabled=false")
    if args.no_fspa:
        overrides.append("fspa.enabled=false")
    if args.no_bcma:
        overrides.append("bcma.enabled=false")
    return load_config(args.config, overrides)


def _cmd_train(args) -> int:
    cfg = _config_from(args)
    log = None if args.quiet else (lambda msg: print(msg, flush=True))
    result = train(cfg, out_dir=args.out, log=log)
    final = result.rows[-1][4]
    print(f"trained {len(result.rows)} steps, final loss {final:.4f}")
    print(f"trace:      {result.trace_path}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _config_from(args)
    model = cfg.build_model()
    model.params.load_state(load_checkpoint(args.params))
    report = evaluate(model, cfg)
    print(format_table(report))
    if args.out is not None:
        write_report_csv(report, args.out)
        print(f"report: {args.out}")
    return 0


def _cmd_segment(args) -> int:
    cfg = _config_from(args)
    model = cfg.build_model()
    if args.params is not None:
        model.params.load_state(load_checkpoint(args.params))
    support = image_to_unit(read_pgm(args.support))
    mask = pgm_array_to_mask(read_pgm(args.support_mask))
    query = image_to_unit(read_pgm(args.query))
    sup_feat = qry_feat = None
    if args.features:
        if len(args.features) != 2:
            print("--features must be given twice: support features, then query "
                  "features", file=sys.stderr)
            return 2
        sup_feat = load_features(args.features[0])
        qry_feat = load_features(args.features[1])
    with nx.no_grad():
        bundle, _ = model.forward(support, mask, query,
                                  support_features=sup_feat,
                                  query_features=qry_feat)
    write_pgm(args.out, mask_to_pgm_array(bundle.mask))
    covered = float(bundle.mask.mean())
    print(f"wrote {args.out} (foreground fraction {covered:.3f})")
    return 0


def _cmd_phantoms(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = [("id", "image", "classes")]
    for i in range(args.count):
        ph = generate_phantom(args.seed, i, args.size, args.size)
        name = f"phantom_{i:03d}.pgm"
        write_pgm(out / name, (ph.image * 255).round().astype("uint8"))
        for cid, m in sorted(ph.masks.items()):
            write_pgm(out / f"phantom_{i:03d}_class{cid}.pgm", mask_to_pgm_array(m))
        manifest.append((str(i), name, ";".join(str(c) for c in sorted(ph.masks))))
    with open(out / "manifest.csv", "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(manifest)
    print(f"wrote {args.count} phantoms to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protoseg",
        description="few-shot prototype segmentation on synthetic phantoms",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="episodic SGD training")
    _add_config_args(p_train)
    p_train.add_argument("--out", type=Path, default=None,
                         help="output directory (default: train.out_dir)")
    p_train.add_argument("--quiet", action="store_true", help="no progress lines")
    p_train.set_defaults(fn=_cmd_train)

    p_eval = sub.add_parser("eval", help="Dice table for a checkpoint")
    _add_config_args(p_eval)
    p_eval.add_argument("--params", type=Path, required=True,
                        help="DSPC checkpoint to evaluate")
    p_eval.add_argument("--out", type=Path, default=None, help="CSV report path")
    p_eval.set_defaults(fn=_cmd_eval)

    p_seg = sub.add_parser("segment", help="segment one query image")
    _add_config_args(p_seg)
    p_seg.add_argument("--support", type=Path, required=True, help="support image (P5)")
    p_seg.add_argument("--support-mask", type=Path, required=True,
                       help="support mask (P5, foreground=255)")
    p_seg.add_argument("--query", type=Path, required=True, help="query image (P5)")
    p_seg.add_argument("--features", type=Path, action="append", default=[],
                       help="DSPF feature files bypassing the encoder "
                            "(give twice: support, query)")
    p_seg.add_argument("--params", type=Path, default=None, help="DSPC checkpoint")
    p_seg.add_argument("--out", type=Path, required=True, help="prediction PGM path")
    p_seg.set_defaults(fn=_cmd_segment)

    p_ph = sub.add_parser("phantoms", help="write synthetic slices as PGM files")
    p_ph.add_argument("--seed", type=int, required=True)
    p_ph.add_argument("--count", type=int, required=True)
    p_ph.add_argument("--out", type=Path, required=True)
    p_ph.add_argument("--size", type=int, default=64)
    p_ph.set_defaults(fn=_cmd_phantoms)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ProtosegError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
