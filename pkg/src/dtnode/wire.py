"""Wire protocol shared by the node daemon and all external clients.

One message per line: a compact UTF-8 JSON document terminated by a single
'\\n'. Documents never contain a raw 0x0A byte (JSON escapes control
characters), so framing is self-synchronizing at line boundaries. Byte
strings travel as standard base64. All numbers on the wire are integers.

Envelope shape: {"kind": K, "seq": N, "body": {...}} where kind is one of
hello | subscribe | event | rpc-request | rpc-response and seq counts from
0 per connection per direction, increasing by exactly 1.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from typing import Any

from .bundle import (
    Bundle,
    BundleId,
    BundleMetadata,
    EndpointId,
    EndpointError,
    ExtensionBlock,
    parse_endpoint,
    valid_node_name,
)

PROTOCOL_VERSION = 1

# Default framing cap for dispatch connections. Application-facing and
# convergence-layer channels carry payload bytes and use LARGE_LINE_CAP.
LINE_CAP = 1024 * 1024
LARGE_LINE_CAP = 16 * 1024 * 1024

KINDS = ("hello", "subscribe", "event", "rpc-request", "rpc-response")

TOPICS = (
    "bundle-received",
    "forwarding-required",
    "bundle-forwarded",
    "action-failed",
    "bundle-expired",
    "bundle-delivered",
    "link-up",
    "link-down",
)

ROLES = ("bpa", "bdm", "app", "monitor", "cla")

VERB_SEND_TO = "send-to"
VERB_DROP = "drop"


class WireError(ValueError):
    """Protocol-level failure; `code` names the error class on the wire."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


class ActionListError(ValueError):
    """Invalid action list; carries the offending index."""

    def __init__(self, code: str, index: int, message: str):
        super().__init__(f"{code} at index {index}: {message}")
        self.code = code
        self.index = index


class RpcError(Exception):
    """An RPC failure; `code` is the token carried in the error document."""

    def __init__(self, code: str, message: str = ""):
        super().__init__(f"{code}: {message}" if message else code)
        self.code = code
        self.message = message


@dataclass(frozen=True)
class Action:
    verb: str
    args: dict = field(default_factory=dict)

    def to_doc(self) -> dict:
        return {"verb": self.verb, "args": dict(self.args)}

    @classmethod
    def from_doc(cls, doc: Any) -> "Action":
        if not isinstance(doc, dict) or not isinstance(doc.get("verb"), str):
            raise WireError("malformed-document", f"bad action: {doc!r}")
        args = doc.get("args", {})
        if not isinstance(args, dict):
            raise WireError("malformed-document", f"bad action args: {doc!r}")
        return cls(doc["verb"], dict(args))

    def __hash__(self):
        return hash((self.verb, tuple(sorted(self.args.items()))))


def send_to(node: str) -> Action:
    return Action(VERB_SEND_TO, {"node": node})


def drop() -> Action:
    return Action(VERB_DROP)


@dataclass(frozen=True)
class Envelope:
    kind: str
    seq: int
    body: dict


# ---------------------------------------------------------------------------
# Envelope codec


def encode_message(envelope: Envelope, line_cap: int = LINE_CAP) -> bytes:
    """Encode one envelope as a newline-terminated JSON line.

    Raises WireError("unrepresentable-value") for values JSON cannot carry
    or encodings that would exceed the line cap.
    """
    doc = {"kind": envelope.kind, "seq": envelope.seq, "body": envelope.body}
    try:
        text = json.dumps(doc, separators=(",", ":"), ensure_ascii=False, allow_nan=False)
        data = text.encode("utf-8")
    except (TypeError, ValueError, UnicodeEncodeError) as exc:
        raise WireError("unrepresentable-value", str(exc)) from exc
    if len(data) + 1 > line_cap:
        raise WireError("unrepresentable-value", f"encoded message exceeds {line_cap} byte cap")
    return data + b"\n"


def decode_message(line: bytes, prev_seq: int | None = None, line_cap: int = LINE_CAP) -> Envelope:
    """Decode one complete line (trailing newline optional) into an Envelope.

    When prev_seq is given, enforces that seq == prev_seq + 1; the very
    first message of a direction must carry seq 0 (pass prev_seq=-1).
    Raises WireError with code malformed-document, unknown-kind, or
    seq-regression.
    """
    if len(line) > line_cap:
        raise WireError("malformed-document", f"line exceeds {line_cap} byte cap")
    try:
        doc = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WireError("malformed-document", str(exc)) from exc
    if not isinstance(doc, dict):
        raise WireError("malformed-document", "envelope must be an object")
    kind = doc.get("kind")
    seq = doc.get("seq")
    body = doc.get("body")
    if not isinstance(kind, str):
        raise WireError("malformed-document", "missing kind")
    if kind not in KINDS:
        raise WireError("unknown-kind", f"unknown envelope kind {kind!r}")
    if not isinstance(seq, int) or isinstance(seq, bool) or seq < 0:
        raise WireError("malformed-document", f"bad seq {seq!r}")
    if not isinstance(body, dict):
        raise WireError("malformed-document", "missing body")
    if prev_seq is not None and seq != prev_seq + 1:
        raise WireError("seq-regression", f"expected seq {prev_seq + 1}, got {seq}")
    return Envelope(kind, seq, body)


def hello_body(role: str, node: str) -> dict:
    return {"protocol-version": PROTOCOL_VERSION, "role": role, "node": node}


# ---------------------------------------------------------------------------
# Action validation

# Descriptors for the core verbs every node supports. `args` documents the
# argument schema; `example` is a valid instance of the verb.
CORE_ACTION_DESCRIPTORS = (
    {
        "verb": VERB_SEND_TO,
        "args": {"node": "next-hop node name (non-empty token)"},
        "example": {"verb": VERB_SEND_TO, "args": {"node": "peer"}},
    },
    {
        "verb": VERB_DROP,
        "args": {},
        "example": {"verb": VERB_DROP, "args": {}},
    },
)

CORE_VERBS = frozenset(d["verb"] for d in CORE_ACTION_DESCRIPTORS)


def validate_action_list(actions: list[Action], supported: frozenset[str] | set[str] = CORE_VERBS) -> None:
    """Check every action against the core verbs plus `supported`.

    An empty list is valid. Raises ActionListError("unknown-verb", i) for
    an unannounced verb and ActionListError("bad-args", i) for argument
    violations (send-to requires a non-empty node name; drop takes none).
    """
    allowed = CORE_VERBS | set(supported)
    for i, action in enumerate(actions):
        if action.verb not in allowed:
            raise ActionListError("unknown-verb", i, f"verb {action.verb!r} not supported")
        if action.verb == VERB_SEND_TO:
            node = action.args.get("node")
            if set(action.args) != {"node"} or not valid_node_name(node if isinstance(node, str) else ""):
                raise ActionListError("bad-args", i, f"send-to needs a non-empty node, got {action.args!r}")
        elif action.verb == VERB_DROP:
            if action.args:
                raise ActionListError("bad-args", i, f"drop takes no args, got {action.args!r}")


# ---------------------------------------------------------------------------
# Domain document encodings (bundles, ids, metadata)


def _b64encode(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def _b64decode(text: Any, what: str) -> bytes:
    if not isinstance(text, str):
        raise WireError("malformed-document", f"{what} must be base64 text")
    try:
        return base64.b64decode(text, validate=True)
    except (ValueError, TypeError) as exc:
        raise WireError("malformed-document", f"bad base64 in {what}: {exc}") from exc


def _eid(doc: Any, what: str) -> EndpointId:
    if not isinstance(doc, str):
        raise WireError("malformed-document", f"{what} must be an endpoint string")
    try:
        return parse_endpoint(doc)
    except EndpointError as exc:
        raise WireError("malformed-document", f"bad {what}: {exc}") from exc


def _opt_eid(doc: Any, what: str) -> EndpointId | None:
    return None if doc is None else _eid(doc, what)


def _ms(value: Any, what: str, minimum: int = 0) -> int:
    if not isinstance(value, int) or isinstance(value, bool) or value < minimum:
        raise WireError("malformed-document", f"bad {what}: {value!r}")
    return value


def bundle_id_to_doc(bid: BundleId) -> dict:
    return {
        "source": str(bid.source),
        "creation-time": bid.creation_time,
        "sequence": bid.sequence,
    }


def bundle_id_from_doc(doc: Any) -> BundleId:
    if not isinstance(doc, dict):
        raise WireError("malformed-document", f"bad bundle id: {doc!r}")
    return BundleId(
        source=_eid(doc.get("source"), "id source"),
        creation_time=_ms(doc.get("creation-time"), "creation-time"),
        sequence=_ms(doc.get("sequence"), "sequence"),
    )


def _blocks_to_doc(blocks) -> list:
    return [
        {"block-type": b.block_type, "flags": b.flags, "data": _b64encode(b.data)}
        for b in blocks
    ]


def _blocks_from_doc(doc: Any) -> tuple[ExtensionBlock, ...]:
    if doc is None:
        return ()
    if not isinstance(doc, list):
        raise WireError("malformed-document", "extension-blocks must be a list")
    out = []
    for b in doc:
        if not isinstance(b, dict):
            raise WireError("malformed-document", f"bad extension block: {b!r}")
        out.append(
            ExtensionBlock(
                block_type=_ms(b.get("block-type"), "block-type"),
                flags=_ms(b.get("flags"), "flags"),
                data=_b64decode(b.get("data"), "block data"),
            )
        )
    return tuple(out)


def bundle_to_doc(bundle: Bundle) -> dict:
    return {
        "id": bundle_id_to_doc(bundle.id),
        "destination": str(bundle.destination),
        "report-to": None if bundle.report_to is None else str(bundle.report_to),
        "lifetime": bundle.lifetime,
        "previous-node": None if bundle.previous_node is None else str(bundle.previous_node),
        "extension-blocks": _blocks_to_doc(bundle.extension_blocks),
        "payload": _b64encode(bundle.payload),
    }


def bundle_from_doc(doc: Any) -> Bundle:
    if not isinstance(doc, dict):
        raise WireError("malformed-document", f"bad bundle: {doc!r}")
    try:
        return Bundle(
            id=bundle_id_from_doc(doc.get("id")),
            destination=_eid(doc.get("destination"), "destination"),
            lifetime=_ms(doc.get("lifetime"), "lifetime", minimum=1),
            payload=_b64decode(doc.get("payload"), "payload"),
            report_to=_opt_eid(doc.get("report-to"), "report-to"),
            previous_node=_opt_eid(doc.get("previous-node"), "previous-node"),
            extension_blocks=_blocks_from_doc(doc.get("extension-blocks")),
        )
    except ValueError as exc:
        if isinstance(exc, WireError):
            raise
        raise WireError("malformed-document", str(exc)) from exc


def metadata_to_doc(md: BundleMetadata) -> dict:
    return {
        "id": bundle_id_to_doc(md.id),
        "destination": str(md.destination),
        "report-to": None if md.report_to is None else str(md.report_to),
        "previous-node": None if md.previous_node is None else str(md.previous_node),
        "lifetime": md.lifetime,
        "payload-length": md.payload_length,
        "extension-blocks": _blocks_to_doc(md.extension_blocks),
        "arrival-time": md.arrival_time,
        "current-actions": [a.to_doc() for a in md.current_actions],
        "update-seq": md.update_seq,
    }


def metadata_from_doc(doc: Any) -> BundleMetadata:
    if not isinstance(doc, dict):
        raise WireError("malformed-document", f"bad metadata: {doc!r}")
    actions_doc = doc.get("current-actions", [])
    if not isinstance(actions_doc, list):
        raise WireError("malformed-document", "current-actions must be a list")
    return BundleMetadata(
        id=bundle_id_from_doc(doc.get("id")),
        destination=_eid(doc.get("destination"), "destination"),
        lifetime=_ms(doc.get("lifetime"), "lifetime", minimum=1),
        payload_length=_ms(doc.get("payload-length"), "payload-length"),
        arrival_time=_ms(doc.get("arrival-time"), "arrival-time"),
        update_seq=_ms(doc.get("update-seq"), "update-seq"),
        report_to=_opt_eid(doc.get("report-to"), "report-to"),
        previous_node=_opt_eid(doc.get("previous-node"), "previous-node"),
        extension_blocks=_blocks_from_doc(doc.get("extension-blocks")),
        current_actions=tuple(Action.from_doc(a) for a in actions_doc),
    )


def payload_to_doc(data: bytes) -> str:
    return _b64encode(data)


def payload_from_doc(text: Any) -> bytes:
    return _b64decode(text, "payload")


def blocks_to_doc(blocks) -> list:
    return _blocks_to_doc(blocks)


def blocks_from_doc(doc: Any) -> tuple[ExtensionBlock, ...]:
    return _blocks_from_doc(doc)


def actions_to_doc(actions) -> list:
    return [a.to_doc() for a in actions]


def actions_from_doc(doc: Any) -> list[Action]:
    if not isinstance(doc, list):
        raise WireError("malformed-document", "actions must be a list")
    return [Action.from_doc(a) for a in doc]
