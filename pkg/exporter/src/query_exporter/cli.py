"""Command line for exporting and verifying query-bank assets."""

from __future__ import annotations

import argparse
import sys

from .encoders import EncoderError, load_encoders
from .export import ExportError, run_export, verify_manifest
from .u3dt import ContainerFormatError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="query-exporter",
        description="Build query-bank asset files from class descriptions and images.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    exp = sub.add_parser("export", help="embed descriptions and images, write the bank")
    exp.add_argument("--catalog", required=True, help="class catalog JSON")
    exp.add_argument("--descriptions-dir", required=True,
                     help="directory of <class>.txt files, one description per line")
    exp.add_argument("--images-dir", required=True,
                     help="directory of <class>/ image candidates")
    exp.add_argument("--k", type=int, required=True, help="descriptions per class")
    exp.add_argument("--l", type=int, required=True, help="images kept per class")
    exp.add_argument("--out", required=True, help="output directory")
    exp.add_argument("--encoder", default="hashed", choices=["hashed", "clip"])
    exp.add_argument("--d-e", type=int, default=512,
                     help="embedding width (hashed encoder only)")
    exp.add_argument("--provenance", default="", help="free-text source notes")

    ver = sub.add_parser("verify", help="re-check manifest content digests")
    ver.add_argument("--manifest", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "export":
            text_enc, image_enc = load_encoders(args.encoder, args.d_e)
            manifest = run_export(args.catalog, args.descriptions_dir, args.images_dir,
                                  args.k, args.l, args.out, text_enc, image_enc,
                                  provenance=args.provenance)
            print(f"wrote {manifest}")
        else:
            verify_manifest(args.manifest)
            print("digests verified")
        return 0
    except (ExportError, EncoderError, ContainerFormatError, OSError, KeyError,
            ValueError) as exc:
        print(f"ERROR[EXPORT] {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
