"""Client SDK edge cases: connection failures, version checks, event stream."""

import asyncio

import pytest

from dtnode.client import DispatchClient
from dtnode.wire import Envelope, RpcError, encode_message

from helpers import running_node


def test_refused_connection():
    async def run():
        with pytest.raises(RpcError) as err:
            await DispatchClient.connect("127.0.0.1:1", node="x")
        assert err.value.code == "refused"
    asyncio.run(run())


def test_version_mismatch():
    async def run():
        async def serve(reader, writer):
            await reader.readline()
            writer.write(encode_message(Envelope("hello", 0, {
                "protocol-version": 2, "role": "bpa", "node": "future"})))
            await writer.drain()

        server = await asyncio.start_server(serve, "127.0.0.1", 0)
        host, port = server.sockets[0].getsockname()[:2]
        try:
            with pytest.raises(RpcError) as err:
                await DispatchClient.connect(f"{host}:{port}", node="x")
            assert err.value.code == "version-mismatch"
        finally:
            server.close()
            await server.wait_closed()
    asyncio.run(run())


def test_server_identity_learned_from_hello():
    async def run():
        async with running_node("station-7") as node:
            client = await DispatchClient.connect(
                node.describe()["dispatch"], node="x")
            try:
                assert client.server_node == "station-7"
            finally:
                await client.close()
    asyncio.run(run())


def test_pending_rpcs_fail_when_server_goes_away():
    async def run():
        async with running_node("A") as node:
            client = await DispatchClient.connect(
                node.describe()["dispatch"], node="x")
            await node.stop()
            with pytest.raises((RpcError, ConnectionError)):
                await asyncio.wait_for(client.call("list-bundles"), timeout=3)
            await client.close()
        # running_node's stop() tolerates a second call
    asyncio.run(run())


def test_next_event_raises_after_close():
    async def run():
        async with running_node("A") as node:
            client = await DispatchClient.connect(
                node.describe()["dispatch"], node="x")
            await client.subscribe(["bundle-received"])
        with pytest.raises(ConnectionError):
            await client.next_event(timeout=2)
        await client.close()
    asyncio.run(run())


def test_concurrent_rpcs_correlate():
    async def run():
        async with running_node("A") as node:
            client = await DispatchClient.connect(
                node.describe()["dispatch"], node="x")
            try:
                results = await asyncio.gather(
                    client.call("list-bundles"),
                    client.call("query-supported-actions"),
                    client.call("list-bundles"),
                )
                assert results[0] == {"bundles": []}
                assert "actions" in results[1]
            finally:
                await client.close()
    asyncio.run(run())
