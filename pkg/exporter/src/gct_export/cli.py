"""gct-export: dump per-word hidden states as GCTF1 feature files."""

from __future__ import annotations

import argparse
import sys

from .exporter import ExportSpec, ModelLoadError, export_features


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="gct-export", description=__doc__
    )
    parser.add_argument("--model", required=True, help="checkpoint name or local path")
    parser.add_argument("--layer", required=True, type=int,
                        help="hidden-state layer index (0 = embeddings)")
    parser.add_argument("--transcripts", required=True,
                        help="directory of word-time CSV transcripts")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--context", type=int, default=32,
                        help="running left-context window, in words")
    parser.add_argument("--dtype", default="float32", choices=["float32", "float16"])
    parser.add_argument("--batch-size", type=int, default=16)
    parser.add_argument("--no-resume", action="store_true",
                        help="re-export stories even when output already matches")
    args = parser.parse_args(argv)
    spec = ExportSpec(
        model=args.model,
        layer=args.layer,
        transcripts=args.transcripts,
        out_dir=args.out,
        context=args.context,
        dtype=args.dtype,
        batch_size=args.batch_size,
        resume=not args.no_resume,
    )
    try:
        manifest = export_features(spec)
    except (ModelLoadError, FileNotFoundError, ValueError) as exc:
        print(f"gct-export: {exc}", file=sys.stderr)
        return 1
    written = sum(1 for s in manifest["stories"].values() if s["status"] == "written")
    kept = len(manifest["stories"]) - written
    print(f"exported {written} stories ({kept} kept), layer {manifest['layer']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
