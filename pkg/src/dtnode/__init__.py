"""Delay-tolerant networking node with an external forwarding-decision interface.

The daemon (BpaNode) stores bundles, executes per-bundle action lists, and
publishes every state change over a socket protocol so that routing logic
can live in separate processes. See README.md for the wire format and CLI.
"""

from .bundle import (
    Bundle,
    BundleId,
    BundleMetadata,
    EndpointId,
    ExtensionBlock,
    parse_endpoint,
)
from .client import AppClient, DispatchClient
from .config import NodeConfig
from .node import BpaNode
from .wire import Action, RpcError, drop, send_to

__all__ = [
    "Action",
    "AppClient",
    "BpaNode",
    "Bundle",
    "BundleId",
    "BundleMetadata",
    "DispatchClient",
    "EndpointId",
    "ExtensionBlock",
    "NodeConfig",
    "RpcError",
    "drop",
    "parse_endpoint",
    "send_to",
]
