"""Generate the golden wire-conformance corpus under conformance/.

The corpus records one scripted dispatch session between the bundled client
and a stub server whose responses use fixed timestamps and identifiers, so
every byte of the transcript is reproducible. Alternate client
implementations replay the same script and must emit identical bytes,
normalizing only RPC correlation-token values.

Files:
  script.jsonl          merged transcript in exchange order
                        ({"dir": "client"|"server", "line": <wire line>})
  client_session.jsonl  the client's byte stream (one wire line per line)
  server_session.jsonl  the server's byte stream

Run directly to refresh the committed corpus: python3 tests/conformance_gen.py
"""

import asyncio
import json
from pathlib import Path

from dtnode.bundle import Bundle, BundleId, BundleMetadata, EndpointId, ExtensionBlock
from dtnode.client import DispatchClient
from dtnode.wire import (
    CORE_ACTION_DESCRIPTORS,
    Envelope,
    RpcError,
    TOPICS,
    drop,
    encode_message,
    hello_body,
    metadata_to_doc,
    bundle_id_to_doc,
    send_to,
)

CORPUS_DIR = Path(__file__).resolve().parent.parent / "conformance"

FIXED_ID = BundleId(EndpointId("A", "src"), 1_700_000_000_000, 7)
UNKNOWN_ID = BundleId(EndpointId("A", "src"), 1_700_000_000_000, 8)
FIXED_METADATA = BundleMetadata(
    id=FIXED_ID,
    destination=EndpointId("Z", "inbox"),
    lifetime=60_000,
    payload_length=14,
    arrival_time=1_700_000_000_100,
    update_seq=3,
    report_to=None,
    previous_node=EndpointId("Y"),
    extension_blocks=(ExtensionBlock(42, 0, b"xyz"),),
    current_actions=(send_to("Z"), drop()),
)


def _event_payload(topic: str) -> dict:
    md = metadata_to_doc(FIXED_METADATA)
    payloads = {
        "bundle-received": {"metadata": md},
        "forwarding-required": {"metadata": md},
        "bundle-forwarded": {"metadata": md, "action-index": 0, "peer": "Z"},
        "action-failed": {"metadata": md, "action-index": 0, "reason": "no-active-link"},
        "bundle-expired": {"metadata": md},
        "bundle-delivered": {"metadata": md},
        "link-up": {"peer": "Y", "address": "127.0.0.1:4556"},
        "link-down": {"peer": "Y", "address": "127.0.0.1:4556"},
    }
    return payloads[topic]


class _StubServer:
    """Accepts one connection and plays a fixed server side of the script."""

    def __init__(self):
        self.transcript: list[tuple[str, bytes]] = []
        self._seq = -1

    def _line(self, kind: str, body: dict) -> bytes:
        self._seq += 1
        line = encode_message(Envelope(kind, self._seq, body))
        self.transcript.append(("server", line))
        return line

    async def _read(self, reader) -> dict:
        line = await reader.readline()
        self.transcript.append(("client", line))
        return json.loads(line)

    async def handle(self, reader, writer):
        await self._read(reader)  # client hello
        writer.write(self._line("hello", hello_body("bpa", "stub")))
        await self._read(reader)  # subscribe
        for offset, topic in enumerate(TOPICS):
            writer.write(self._line("event", {
                "topic": topic,
                "timestamp": 1_700_000_001_000 + offset,
                "payload": _event_payload(topic),
            }))
        await writer.drain()
        responses = [
            {"result": {"ok": True}},
            {"result": {"actions": list(CORE_ACTION_DESCRIPTORS)}},
            {"result": {"bundles": [metadata_to_doc(FIXED_METADATA)]}},
            {"result": {"metadata": metadata_to_doc(FIXED_METADATA)}},
            {"result": {"ok": True}},
            {"error": {"code": "unknown-bundle",
                       "message": "no such bundle is stored"}},
        ]
        for body in responses:
            request = await self._read(reader)
            writer.write(self._line(
                "rpc-response", {"id": request["body"]["id"], **body}))
            await writer.drain()
        writer.close()


async def _run_script() -> list[tuple[str, bytes]]:
    stub = _StubServer()
    server = await asyncio.start_server(stub.handle, "127.0.0.1", 0)
    host, port = server.sockets[0].getsockname()[:2]
    client = await DispatchClient.connect(
        f"{host}:{port}", role="bdm", node="conformance")
    try:
        await client.subscribe(TOPICS)
        for _ in TOPICS:
            await client.next_event(timeout=5)
        await client.update_actions(FIXED_ID, [send_to("Z"), drop()])
        await client.query_supported_actions()
        await client.list_bundles()
        await client.get_bundle(FIXED_ID)
        await client.set_default_actions([])
        try:
            await client.update_actions(UNKNOWN_ID, [])
        except RpcError as exc:
            assert exc.code == "unknown-bundle", exc.code
        else:
            raise AssertionError("expected unknown-bundle error")
    finally:
        await client.close()
        server.close()
        await server.wait_closed()
    return stub.transcript


def generate() -> dict[str, bytes]:
    """Return corpus file contents keyed by file name."""
    transcript = asyncio.run(_run_script())
    script = b"".join(
        json.dumps({"dir": direction, "line": line.decode("utf-8").rstrip("\n")},
                   ensure_ascii=False, separators=(",", ":")).encode("utf-8") + b"\n"
        for direction, line in transcript)
    client_stream = b"".join(line for d, line in transcript if d == "client")
    server_stream = b"".join(line for d, line in transcript if d == "server")
    return {
        "script.jsonl": script,
        "client_session.jsonl": client_stream,
        "server_session.jsonl": server_stream,
    }


def main() -> None:
    CORPUS_DIR.mkdir(exist_ok=True)
    for name, data in generate().items():
        (CORPUS_DIR / name).write_bytes(data)
        print(f"wrote conformance/{name} ({len(data)} bytes)")


if __name__ == "__main__":
    main()
