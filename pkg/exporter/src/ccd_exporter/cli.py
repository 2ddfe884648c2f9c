"""ccd-export command line.

    ccd-export make-toy --out DIR --classes cat,dog,horse
    ccd-export export --images DIR --classes cat,dog,horse --out DIR
    ccd-export serve EXPORT_DIR [--tcp PORT]
"""

from __future__ import annotations

import argparse
from pathlib import Path

from .export import DEFAULT_TEMPLATE, ExportJob, export_dataset
from .serve import main as serve_main
from .toy import make_toy_images


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="ccd-export")
    sub = parser.add_subparsers(dest="command", required=True)

    p_export = sub.add_parser("export", help="export a dataset to manifest + tensors")
    p_export.add_argument("--images", required=True)
    p_export.add_argument("--classes", required=True,
                          help="comma-separated class names")
    p_export.add_argument("--out", required=True)
    p_export.add_argument("--template", default=DEFAULT_TEMPLATE)
    p_export.add_argument("--encoder", default="builtin", choices=("builtin", "clip"))
    p_export.add_argument("--checkpoint", default=None,
                          help="local model path for --encoder clip")
    p_export.add_argument("--resolution", type=int, default=640)
    p_export.add_argument("--resize-long", type=int, default=640)
    p_export.add_argument("--no-augmented-views", action="store_true")

    p_serve = sub.add_parser("serve", help="serve crop embeddings (protocol v1)")
    p_serve.add_argument("export_dir")
    p_serve.add_argument("--tcp", type=int, default=None)

    p_toy = sub.add_parser("make-toy", help="write per-class toy images")
    p_toy.add_argument("--out", required=True)
    p_toy.add_argument("--classes", required=True)
    p_toy.add_argument("--template", default=DEFAULT_TEMPLATE)

    args = parser.parse_args(argv)
    if args.command == "export":
        job = ExportJob(
            image_dir=Path(args.images),
            class_names=[c.strip() for c in args.classes.split(",") if c.strip()],
            out_dir=Path(args.out),
            template=args.template,
            global_resolution=args.resolution,
            resize_long=args.resize_long,
            encoder_name=args.encoder,
            checkpoint=args.checkpoint,
            augmented_views=not args.no_augmented_views,
        )
        manifest = export_dataset(job)
        print(f"exported {len(manifest['image_records'])} images to {args.out}")
        return 0
    if args.command == "serve":
        serve_argv = [args.export_dir]
        if args.tcp is not None:
            serve_argv += ["--tcp", str(args.tcp)]
        return serve_main(serve_argv)
    if args.command == "make-toy":
        names = [c.strip() for c in args.classes.split(",") if c.strip()]
        paths = make_toy_images(args.out, names, template=args.template)
        print(f"wrote {len(paths)} toy images to {args.out}")
        return 0
    return 2


if __name__ == "__main__":
    raise SystemExit(main())
