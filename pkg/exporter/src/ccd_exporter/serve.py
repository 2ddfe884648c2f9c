"""Wire protocol v1 server over an exported dataset.

Each request crops the named box from the original image, resizes the longer
side to resize_long preserving aspect ratio, encodes it with the same encoder
that produced the export, and responds with the embedding. Per-request
failures produce error responses; the process never exits on them.
"""

from __future__ import annotations

import argparse
import json
import socketserver
import sys
from pathlib import Path

from PIL import Image

PROTOCOL_NAME = "ccd-view"
PROTOCOL_VERSION = 1


class CropServer:
    def __init__(self, export_dir: str | Path, encoder=None):
        export_dir = Path(export_dir)
        meta_path = export_dir / "export_meta.json"
        if not meta_path.exists():
            raise FileNotFoundError(f"not an export directory (no export_meta.json): {export_dir}")
        self.meta = json.loads(meta_path.read_text())
        if encoder is None:
            from .encoders import load_encoder
            encoder = load_encoder(self.meta["encoder"], self.meta.get("checkpoint"))
        self.encoder = encoder
        self.sources: dict[str, str] = self.meta["sources"]

    def handshake(self) -> dict:
        return {"protocol": PROTOCOL_NAME, "version": PROTOCOL_VERSION,
                "embedding_dim": int(self.meta["embedding_dim"])}

    def respond(self, request) -> dict:
        rid = request.get("id", -1) if isinstance(request, dict) else -1
        if not isinstance(rid, int):
            rid = -1
        if not isinstance(request, dict):
            return _error(rid, "bad_request", "request is not a JSON object")
        image_id = request.get("image")
        box = request.get("box")
        resize_long = request.get("resize_long", self.meta["resize_long"])
        if not isinstance(image_id, str) or not isinstance(box, list) or len(box) != 4 \
                or not all(isinstance(v, int) for v in box) or not isinstance(resize_long, int) \
                or resize_long < 1:
            return _error(rid, "bad_request", f"malformed request fields: {request}")
        if image_id not in self.sources:
            return _error(rid, "unknown_image", f"no such image: {image_id}")
        try:
            with Image.open(self.sources[image_id]) as handle:
                image = handle.convert("RGB")
        except OSError as exc:
            return _error(rid, "io_error", f"cannot read source image: {exc}")
        x0, y0, x1, y1 = box
        if not (0 <= x0 < x1 <= image.width and 0 <= y0 < y1 <= image.height):
            return _error(rid, "bad_box",
                          f"box {box} invalid for {image.width}x{image.height}")
        emb = self.encoder.encode_crop(image, (x0, y0, x1, y1), resize_long)
        return {"id": rid, "embedding": [float(v) for v in emb]}


def _error(rid: int, code: str, message: str) -> dict:
    return {"id": rid, "error": {"code": code, "message": message}}


def serve_stream(server: CropServer, lines, out) -> None:
    out.write(json.dumps(server.handshake()) + "\n")
    out.flush()
    for line in lines:
        line = line.strip()
        if not line:
            continue
        try:
            request = json.loads(line)
        except json.JSONDecodeError:
            response = _error(-1, "bad_request", f"not valid JSON: {line[:80]}")
        else:
            response = server.respond(request)
        out.write(json.dumps(response) + "\n")
        out.flush()


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        description="serve crop embeddings for an exported dataset (protocol v1)")
    parser.add_argument("export_dir", help="directory produced by ccd-export export")
    parser.add_argument("--tcp", type=int, default=None, metavar="PORT")
    args = parser.parse_args(argv)
    server = CropServer(args.export_dir)

    if args.tcp is None:
        serve_stream(server, sys.stdin, sys.stdout)
        return 0

    class Handler(socketserver.StreamRequestHandler):
        def handle(self):
            reader = (raw.decode("utf-8") for raw in self.rfile)
            serve_stream(server, reader, _TextWriter(self.wfile))

    with socketserver.ThreadingTCPServer(("127.0.0.1", args.tcp), Handler) as srv:
        print(f"listening on 127.0.0.1:{srv.server_address[1]}", file=sys.stderr, flush=True)
        srv.serve_forever()
    return 0


class _TextWriter:
    def __init__(self, binary):
        self._binary = binary

    def write(self, text: str) -> None:
        self._binary.write(text.encode("utf-8"))

    def flush(self) -> None:
        self._binary.flush()


if __name__ == "__main__":
    raise SystemExit(main())
