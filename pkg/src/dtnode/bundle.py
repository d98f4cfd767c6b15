"""Bundle, endpoint, and lifetime primitives shared by every other module.

All times are integer milliseconds since the Unix epoch; lifetimes are
integer millisecond durations. Values are immutable after construction.
"""

from __future__ import annotations

import re
import time
from dataclasses import dataclass, field


def now_ms() -> int:
    """Current wall-clock instant in epoch milliseconds."""
    return time.time_ns() // 1_000_000


class EndpointError(ValueError):
    """Raised for unparseable or invalid endpoint identifiers."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


_NODE_NAME_RE = re.compile(r"^[^/\s]+$")
_DEMUX_RE = re.compile(r"^[^\s]*$")


@dataclass(frozen=True, order=True)
class EndpointId:
    """A dtn-scheme endpoint: dtn://<node-name>/<demux>."""

    node_name: str
    demux: str = ""

    def __post_init__(self):
        if not _NODE_NAME_RE.match(self.node_name):
            raise EndpointError(
                "empty-node-name" if not self.node_name else "malformed-scheme",
                f"bad node name {self.node_name!r}",
            )
        if not _DEMUX_RE.match(self.demux):
            raise EndpointError("malformed-scheme", f"bad demux {self.demux!r}")

    def __str__(self) -> str:
        return f"dtn://{self.node_name}/{self.demux}"


def parse_endpoint(text: str) -> EndpointId:
    """Parse the canonical text form "dtn://<node-name>/<demux>".

    A missing trailing slash is accepted and normalizes to an empty demux.
    Raises EndpointError with code "malformed-scheme" or "empty-node-name".
    """
    if not isinstance(text, str) or not text.startswith("dtn://"):
        raise EndpointError("malformed-scheme", f"not a dtn URI: {text!r}")
    rest = text[len("dtn://"):]
    node_name, _, demux = rest.partition("/")
    if not node_name:
        raise EndpointError("empty-node-name", f"no node name in {text!r}")
    if not _NODE_NAME_RE.match(node_name):
        raise EndpointError("malformed-scheme", f"bad node name in {text!r}")
    if not _DEMUX_RE.match(demux):
        raise EndpointError("malformed-scheme", f"bad demux in {text!r}")
    return EndpointId(node_name, demux)


def valid_node_name(name: str) -> bool:
    return isinstance(name, str) and bool(_NODE_NAME_RE.match(name))


@dataclass(frozen=True, order=True)
class BundleId:
    """Unique bundle identity: (source, creation-time, sequence).

    Ordering is lexicographic over the three fields, which gives a strict
    total order across well-formed ids.
    """

    source: EndpointId
    creation_time: int
    sequence: int


@dataclass(frozen=True)
class ExtensionBlock:
    block_type: int
    flags: int
    data: bytes

    def __post_init__(self):
        if self.block_type < 0 or self.flags < 0:
            raise ValueError("block-type and flags must be non-negative")


@dataclass(frozen=True)
class Bundle:
    """In-memory unit of transfer: primary fields, extension blocks, payload."""

    id: BundleId
    destination: EndpointId
    lifetime: int
    payload: bytes
    report_to: EndpointId | None = None
    previous_node: EndpointId | None = None
    extension_blocks: tuple[ExtensionBlock, ...] = ()

    def __post_init__(self):
        if self.lifetime <= 0:
            raise ValueError("lifetime must be > 0")
        # normalize lists passed by callers
        if not isinstance(self.extension_blocks, tuple):
            object.__setattr__(self, "extension_blocks", tuple(self.extension_blocks))


def expires_at(bundle: Bundle) -> int:
    """Absolute expiry instant: creation time plus lifetime."""
    return bundle.id.creation_time + bundle.lifetime


def is_expired(bundle: Bundle, now: int) -> bool:
    """True once `now` has reached the expiry instant (inclusive)."""
    return now >= expires_at(bundle)


@dataclass(frozen=True)
class BundleMetadata:
    """Payload-free projection of a stored bundle plus node-local state.

    Carries everything a dispatcher needs to decide forwarding: identity,
    addressing, full extension blocks, the currently attached action list,
    and the update-order stamp. Never contains payload bytes.
    """

    id: BundleId
    destination: EndpointId
    lifetime: int
    payload_length: int
    arrival_time: int
    update_seq: int
    report_to: EndpointId | None = None
    previous_node: EndpointId | None = None
    extension_blocks: tuple[ExtensionBlock, ...] = ()
    current_actions: tuple = ()  # tuple of wire.Action

    def __post_init__(self):
        if not isinstance(self.extension_blocks, tuple):
            object.__setattr__(self, "extension_blocks", tuple(self.extension_blocks))
        if not isinstance(self.current_actions, tuple):
            object.__setattr__(self, "current_actions", tuple(self.current_actions))
