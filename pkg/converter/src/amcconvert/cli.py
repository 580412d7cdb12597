"""CLI: `amcconvert convert <in> <out>` and `amcconvert verify <file>`."""

from __future__ import annotations

import argparse
import json
import sys

from .convert import ArchiveError, ContainerError, convert, verify


def build_parser():
    p = argparse.ArgumentParser(prog="amcconvert",
                                description="RML2016.10a archive to AMC1 container")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("convert", help="convert a pickled archive")
    c.add_argument("archive")
    c.add_argument("out")
    c.add_argument("--train-fraction", type=float, default=0.5)
    c.add_argument("--seed", type=int, default=0)

    v = sub.add_parser("verify", help="validate a container, print histograms")
    v.add_argument("file")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "convert":
            report = convert(args.archive, args.out, train_fraction=args.train_fraction,
                             seed=args.seed)
            print(f"wrote {report['records']} records, {len(report['classes'])} classes, "
                  f"{len(report['snr_levels'])} SNR levels -> {args.out}")
            return 0
        report = verify(args.file)
        print(f"records: {report['records']}")
        print(f"class histogram: {json.dumps(report['class_histogram'], sort_keys=True)}")
        print(f"snr histogram: {json.dumps({str(k): v for k, v in report['snr_histogram'].items()})}")
        print(f"payload sha256: {report['sha256']}")
        return 0
    except ContainerError as e:
        print(f"invalid container: {e}", file=sys.stderr)
        return 1
    except ArchiveError as e:
        print(f"invalid archive: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"missing file: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
