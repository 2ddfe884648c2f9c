"""Conformance checks for wire protocol v1 providers.

Any provider executable (the synthetic oracle, an exporter serving real
crops, ...) can be checked with ``run_conformance``; each check returns a
(name, passed, detail) record. Used by this package's own tests and intended
for provider implementations in other ecosystems.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ProviderError
from .view_provider import SubprocessChannel, check_handshake


@dataclass
class ConformanceResult:
    name: str
    passed: bool
    detail: str = ""


def run_conformance(command: list[str], image_id: str, box: tuple[int, int, int, int],
                    embedding_dim: int | None = None, timeout: float = 10.0,
                    cwd: str | None = None) -> list[ConformanceResult]:
    """Exercise one provider process against the protocol contract.

    ``image_id``/``box`` must name a crop the provider can embed.
    """
    results: list[ConformanceResult] = []
    channel = SubprocessChannel(command, cwd=cwd)

    def check(name: str, fn) -> None:
        try:
            fn()
            results.append(ConformanceResult(name, True))
        except Exception as exc:  # report, don't raise: callers want the full list
            results.append(ConformanceResult(name, False, f"{type(exc).__name__}: {exc}"))

    state: dict = {}

    def _handshake():
        doc = channel.handshake(timeout)
        state["dim"] = check_handshake(doc, embedding_dim)

    def _recv_json(rid: int) -> dict:
        import json
        while True:
            line = channel.recv(timeout)
            if line is None:
                raise ProviderError(f"no response for request {rid} within {timeout}s")
            doc = json.loads(line)
            if doc.get("id") == rid:
                return doc

    def _ask(rid: int, payload: dict) -> dict:
        channel.send(payload)
        return _recv_json(rid)

    def _valid_roundtrip():
        doc = _ask(1, {"id": 1, "image": image_id, "box": list(box), "resize_long": 640})
        emb = doc.get("embedding")
        assert isinstance(emb, list) and len(emb) == state["dim"], f"bad embedding in {doc}"
        assert all(isinstance(v, (int, float)) for v in emb), "non-numeric embedding"
        state["embedding"] = emb

    def _deterministic():
        doc = _ask(2, {"id": 2, "image": image_id, "box": list(box), "resize_long": 640})
        assert doc.get("embedding") == state["embedding"], "same request, different embedding"

    def _unknown_image():
        doc = _ask(3, {"id": 3, "image": "__no_such_image__", "box": list(box),
                       "resize_long": 640})
        err = doc.get("error")
        assert isinstance(err, dict) and err.get("code"), f"expected error object, got {doc}"

    def _survives_malformed_line():
        channel._proc.stdin.write("this is not json\n")
        channel._proc.stdin.flush()
        line = channel.recv(timeout)
        assert line is not None, "no response to a malformed line"
        import json
        doc = json.loads(line)
        assert isinstance(doc.get("error"), dict) and doc["error"].get("code") == "bad_request", \
            f"malformed line should yield a bad_request error, got {doc}"
        # process must keep serving
        doc = _ask(4, {"id": 4, "image": image_id, "box": list(box), "resize_long": 640})
        assert "embedding" in doc, f"provider stopped serving after malformed line: {doc}"

    def _missing_fields():
        doc = _ask(5, {"id": 5})
        err = doc.get("error")
        assert isinstance(err, dict) and err.get("code"), f"expected error object, got {doc}"
        doc = _ask(6, {"id": 6, "image": image_id, "box": list(box), "resize_long": 640})
        assert "embedding" in doc, "provider stopped serving after a bad request"

    try:
        check("handshake_first_line", _handshake)
        if state.get("dim"):
            check("valid_request_roundtrip", _valid_roundtrip)
            check("determinism", _deterministic)
            check("unknown_image_error", _unknown_image)
            check("survives_malformed_line", _survives_malformed_line)
            check("survives_missing_fields", _missing_fields)
    finally:
        channel.close()
    return results


def format_results(results: list[ConformanceResult]) -> str:
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"[{status}] {r.name}" + (f": {r.detail}" if r.detail else ""))
    return "\n".join(lines)
