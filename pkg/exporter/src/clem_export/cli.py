import argparse
import json
import logging
import sys

from .export import ExportError, ExportJob, export
from .verify import verify


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clem-export",
        description="Dump last-layer token embeddings of a frozen pretrained "
                    "encoder into a CLEM corpus file.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("export", help="tokenize, encode and write CLEM")
    p.add_argument("--model", required=True, help="hub name or local model directory")
    p.add_argument("--input", required=True, help="UTF-8 text, one sentence per line")
    p.add_argument("--lang", required=True, help="ASCII language tag (max 8 bytes)")
    p.add_argument("--out", required=True, help="output CLEM path")
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--max-length", type=int, default=128)

    p = sub.add_parser("verify", help="re-check a CLEM file with an independent parser")
    p.add_argument("path")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "export":
            manifest = export(ExportJob(model_id=args.model, input_path=args.input,
                                        lang=args.lang, output_path=args.out,
                                        batch_size=args.batch_size,
                                        max_length=args.max_length))
            print(json.dumps({"exported": manifest["exported_records"],
                              "hidden_size": manifest["hidden_size"],
                              "output": manifest["output_path"]}))
            return 0
        report = verify(args.path)
        print(json.dumps(report, indent=2))
        return 0 if report["ok"] else 1
    except ExportError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
