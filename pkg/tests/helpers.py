"""Shared fixtures-in-functions for tests that drive live nodes."""

import asyncio
import contextlib

from dtnode.bundle import Bundle, BundleId, EndpointId, now_ms
from dtnode.client import AppClient, DispatchClient
from dtnode.config import NodeConfig
from dtnode.node import BpaNode
from dtnode.wire import TOPICS


@contextlib.asynccontextmanager
async def running_node(name: str, **overrides):
    """A started BpaNode on ephemeral localhost ports, stopped on exit."""
    config = NodeConfig(node_name=name, dispatch="127.0.0.1:0",
                        app="127.0.0.1:0", cla="127.0.0.1:0", **overrides)
    node = BpaNode(config)
    await node.start()
    try:
        yield node
    finally:
        await node.stop()


@contextlib.asynccontextmanager
async def dispatch_client(node: BpaNode, *, role: str = "bdm", name: str = "test-bdm"):
    client = await DispatchClient.connect(
        node.describe()["dispatch"], role=role, node=name)
    try:
        yield client
    finally:
        await client.close()


@contextlib.asynccontextmanager
async def app_client(node: BpaNode, *, name: str = "test-app"):
    client = await AppClient.connect(node.describe()["app"], node=name)
    try:
        yield client
    finally:
        await client.close()


@contextlib.asynccontextmanager
async def monitor(node: BpaNode, topics=TOPICS):
    """A subscribed monitor session on the node's dispatch listener."""
    async with dispatch_client(node, role="monitor", name="test-monitor") as client:
        await client.subscribe(topics)
        # subscribe carries no ack; a round trip on the same ordered
        # connection guarantees the server processed it
        await client.call("list-bundles")
        yield client


async def connect_nodes(a: BpaNode, b: BpaNode) -> str:
    """Dial a CLA link from a to b; returns the peer name."""
    return await a.links.dial(b.describe()["cla"])


async def wait_until(predicate, timeout: float = 3.0, interval: float = 0.01):
    """Poll a sync predicate until truthy; raises on timeout."""
    deadline = asyncio.get_running_loop().time() + timeout
    while True:
        value = predicate()
        if value:
            return value
        if asyncio.get_running_loop().time() > deadline:
            raise TimeoutError("condition not reached")
        await asyncio.sleep(interval)


async def drain_events(client, count: int, timeout: float = 3.0):
    """Collect exactly `count` events as (topic, timestamp, payload) tuples."""
    events = []
    for _ in range(count):
        events.append(await client.next_event(timeout=timeout))
    return events


_DOC_KEYS = ["alpha", "beta", "gamma", "delta", "topic", "id", "n", "véla"]
_DOC_STRINGS = ["", "plain", "with space", "tab\there", "line\nbreak",
                "quote\"inside", "ünïcødé", "dtn://A/x", "0" * 40]


def random_doc(rng, depth: int = 0):
    """A random JSON-representable value (no floats, exact round trips)."""
    kinds = ["str", "int", "bool", "null"]
    if depth < 3:
        kinds += ["dict", "list"]
    kind = rng.choice(kinds)
    if kind == "str":
        return rng.choice(_DOC_STRINGS)
    if kind == "int":
        return rng.randint(-2**48, 2**48)
    if kind == "bool":
        return rng.random() < 0.5
    if kind == "null":
        return None
    if kind == "list":
        return [random_doc(rng, depth + 1) for _ in range(rng.randint(0, 4))]
    return {rng.choice(_DOC_KEYS): random_doc(rng, depth + 1)
            for _ in range(rng.randint(0, 4))}


def random_envelope(rng, seq: int):
    """A random well-formed envelope with the given seq."""
    from dtnode.wire import Envelope, KINDS
    body = {rng.choice(_DOC_KEYS): random_doc(rng, 1)
            for _ in range(rng.randint(0, 5))}
    return Envelope(rng.choice(list(KINDS)), seq, body)


def make_bundle(source: str = "dtn://A/src", dest: str = "dtn://Z/inbox",
                payload: bytes = b"payload", lifetime: int = 60_000,
                creation: int | None = None, sequence: int = 1,
                blocks=()) -> Bundle:
    from dtnode.bundle import parse_endpoint
    if creation is None:
        creation = now_ms()
    return Bundle(
        id=BundleId(parse_endpoint(source), creation, sequence),
        destination=parse_endpoint(dest),
        lifetime=lifetime,
        payload=payload,
        extension_blocks=blocks,
    )
