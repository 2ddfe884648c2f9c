"""Protocol v1 provider backed by a synthetic world.

The embedding for a crop is the normalized mixture of class prototypes
weighted by the crop's exact pixel overlap with each class's planted boxes,
plus the leftover fraction of the background prototype and optional seeded
noise. Runnable as ``python -m ccd.synth_provider world.json`` (stdio) or
with ``--tcp PORT``.
"""

from __future__ import annotations

import argparse
import json
import socketserver
import sys
from pathlib import Path

import numpy as np

from .cam_views import derive_seed
from .synth import SyntheticWorld
from .view_provider import PROTOCOL_NAME, PROTOCOL_VERSION


def _union_area(rects: list[tuple[int, int, int, int]]) -> int:
    """Exact area of a union of integer rectangles via coordinate compression."""
    rects = [r for r in rects if r[0] < r[2] and r[1] < r[3]]
    if not rects:
        return 0
    xs = sorted({v for r in rects for v in (r[0], r[2])})
    ys = sorted({v for r in rects for v in (r[1], r[3])})
    total = 0
    for i in range(len(xs) - 1):
        for j in range(len(ys) - 1):
            cx, cy = xs[i], ys[j]
            if any(r[0] <= cx < r[2] and r[1] <= cy < r[3] for r in rects):
                total += (xs[i + 1] - xs[i]) * (ys[j + 1] - ys[j])
    return total


def crop_overlap_fractions(world: SyntheticWorld, image_index: int,
                           box: tuple[int, int, int, int]) -> dict[int, float]:
    """Fraction of the crop covered by each class's planted boxes."""
    image = world.images[image_index]
    x0, y0, x1, y1 = box
    crop_area = (x1 - x0) * (y1 - y0)
    fractions: dict[int, float] = {}
    for c, gt in image.boxes.items():
        inter = (max(x0, gt[0]), max(y0, gt[1]), min(x1, gt[2]), min(y1, gt[3]))
        fractions[c] = _union_area([inter]) / crop_area
    return fractions


class SyntheticOracle:
    """Pure request->response logic, shared by the stdio/TCP servers and the
    in-process loopback channel."""

    def __init__(self, world: SyntheticWorld):
        self.world = world
        self._index = {im.image_id: i for i, im in enumerate(world.images)}

    def handshake(self) -> dict:
        return {"protocol": PROTOCOL_NAME, "version": PROTOCOL_VERSION,
                "embedding_dim": self.world.spec.embedding_dim}

    def crop_embedding(self, image_id: str, box: tuple[int, int, int, int],
                       resize_long: int) -> np.ndarray:
        idx = self._index[image_id]
        fractions = crop_overlap_fractions(self.world, idx, box)
        vec = np.zeros(self.world.spec.embedding_dim)
        covered = 0.0
        for c, frac in fractions.items():
            vec += frac * self.world.prototypes[c]
            covered += frac
        vec += max(0.0, 1.0 - covered) * self.world.background
        noise = self.world.spec.crop_noise
        if noise > 0:
            rng = np.random.default_rng(
                derive_seed(self.world.spec.seed, "crop", image_id, box, resize_long))
            vec = vec + noise * rng.normal(size=vec.shape)
        norm = np.linalg.norm(vec)
        if norm <= 1e-12:
            vec = self.world.background.copy()
            norm = np.linalg.norm(vec)
        return vec / norm

    def respond(self, request) -> dict:
        rid = request.get("id", -1) if isinstance(request, dict) else -1
        if not isinstance(rid, int):
            rid = -1
        if not isinstance(request, dict):
            return _error(rid, "bad_request", "request is not a JSON object")
        image_id = request.get("image")
        box = request.get("box")
        resize_long = request.get("resize_long", 640)
        if not isinstance(rid, int) or not isinstance(image_id, str) \
                or not isinstance(box, list) or len(box) != 4 \
                or not all(isinstance(v, int) for v in box) \
                or not isinstance(resize_long, int):
            return _error(rid, "bad_request", f"malformed request fields: {request}")
        if image_id not in self._index:
            return _error(rid, "unknown_image", f"no such image: {image_id}")
        x0, y0, x1, y1 = box
        image = self.world.images[self._index[image_id]]
        if not (0 <= x0 < x1 <= image.width and 0 <= y0 < y1 <= image.height):
            return _error(rid, "bad_box", f"box {box} invalid for {image.width}x{image.height}")
        if resize_long < 1:
            return _error(rid, "bad_request", f"resize_long must be positive, got {resize_long}")
        emb = self.crop_embedding(image_id, (x0, y0, x1, y1), resize_long)
        return {"id": rid, "embedding": [float(v) for v in emb]}


def _error(rid: int, code: str, message: str) -> dict:
    return {"id": rid, "error": {"code": code, "message": message}}


def _serve_stream(oracle: SyntheticOracle, lines, out) -> None:
    out.write(json.dumps(oracle.handshake()) + "\n")
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
            response = oracle.respond(request)
        out.write(json.dumps(response) + "\n")
        out.flush()


def load_world(path: str | Path) -> SyntheticWorld:
    return SyntheticWorld.from_json(json.loads(Path(path).read_text()))


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description="synthetic crop-embedding provider (protocol v1)")
    parser.add_argument("world", help="path to world.json")
    parser.add_argument("--tcp", type=int, default=None, metavar="PORT",
                        help="serve on a TCP port instead of stdio")
    args = parser.parse_args(argv)
    oracle = SyntheticOracle(load_world(args.world))

    if args.tcp is None:
        _serve_stream(oracle, sys.stdin, sys.stdout)
        return 0

    class Handler(socketserver.StreamRequestHandler):
        def handle(self):
            reader = (raw.decode("utf-8") for raw in self.rfile)
            writer = _TextWriter(self.wfile)
            _serve_stream(oracle, reader, writer)

    with socketserver.ThreadingTCPServer(("127.0.0.1", args.tcp), Handler) as server:
        port = server.server_address[1]
        print(f"listening on 127.0.0.1:{port}", file=sys.stderr, flush=True)
        server.serve_forever()
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
