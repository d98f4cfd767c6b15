"""Scripted multi-node scenario runner.

The runner is a process supervisor: it spawns node daemons and BDMs as
subprocesses, feeds timed directives (link dials/closes, ADU injections)
through ordinary client connections, captures every observable wire
artifact into a run directory, and finally grades a list of assertions
against those captures. It never interprets bundle semantics itself.

Scenario file (YAML):

    name: fig2
    settle-ms: 2000          # wait after the last directive, default 2000
    grace-ms: 1500           # node+BDM startup budget before t0, default 1500
    nodes:
      - name: A
        apps: [src]          # demux registrations held by the runner
        default-actions: []  # optional action documents
    bdms:
      - node: A
        kind: opportunistic  # static | opportunistic | contact | external
        flood: false         # opportunistic only
        routes: {Z: Y}       # static (and external, written to a file)
        plan:                # contact; start/end are relative to t0
          - {from: A, to: Y, start-ms: 2500, end-ms: 8000, owlt-ms: 0}
        command: [...]       # external; {dispatch} and {routes} substituted
    links:
      - {at-ms: 100, dial: {from: A, to: Y}}
      - {at-ms: 5000, close: {from: A, peer: Y}}
    traffic:
      - {at-ms: 600, from: A, app: src, to: "dtn://Z/inbox",
         payload: "text", lifetime-ms: 60000}      # or payload-size: N
    assertions:
      - {type: delivered, node: Z, app: inbox, count: 1, within-ms: 3000}
      - {type: event-order, node: A, topics: [bundle-received, bundle-forwarded]}
      - {type: event-count, node: A, topic: bundle-forwarded, count: 1}
      - {type: event-within, node: A, topic: bundle-forwarded, from-ms: 2500, to-ms: 3000}
      - {type: retained-during, node: A, from-ms: 800, to-ms: 2300, min-count: 1}
      - {type: rpc-count, node: A, method: update-actions, count: 0}
      - {type: no-payload-leak}

Exit code 0 iff every assertion passes; one report line per assertion.
"""

from __future__ import annotations

import asyncio
import json
import logging
import random
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .bundle import now_ms
from .client import AppClient, DispatchClient
from .wire import RpcError, TOPICS, payload_to_doc

log = logging.getLogger(__name__)

READY_TIMEOUT = 8.0
RETAIN_POLL_MS = 150
DEFAULT_SETTLE_MS = 2000
DEFAULT_GRACE_MS = 1500


class ScenarioError(Exception):
    pass


@dataclass
class TrafficRecord:
    directive: dict
    bundle_id: dict | None = None
    payload: bytes = b""
    sent_at: int = 0


@dataclass
class Delivery:
    node: str
    demux: str
    payload: bytes
    received_at: int
    source: str


@dataclass
class NodeProc:
    name: str
    process: asyncio.subprocess.Process
    dispatch: str
    app: str
    cla: str
    wire_log: Path
    admin: DispatchClient | None = None
    monitor: DispatchClient | None = None
    apps: dict[str, AppClient] = field(default_factory=dict)
    events: list[dict] = field(default_factory=list)


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ScenarioError(message)


def load_scenario(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    _require(isinstance(doc, dict), "scenario must be a mapping")
    _require(isinstance(doc.get("nodes"), list) and doc["nodes"], "scenario needs nodes")
    names = [n.get("name") for n in doc["nodes"]]
    _require(all(isinstance(n, str) and n for n in names), "every node needs a name")
    _require(len(set(names)) == len(names), "duplicate node names")
    known = set(names)

    def check_node(ref, what):
        _require(ref in known, f"{what} references undefined node {ref!r}")

    for bdm in doc.get("bdms") or []:
        check_node(bdm.get("node"), "bdm")
        _require(bdm.get("kind") in ("static", "opportunistic", "contact", "external"),
                 f"unknown bdm kind {bdm.get('kind')!r}")
    for link in doc.get("links") or []:
        _require(isinstance(link.get("at-ms"), int) and link["at-ms"] >= 0,
                 f"link directive needs non-negative at-ms: {link!r}")
        if "dial" in link:
            check_node(link["dial"].get("from"), "dial")
            check_node(link["dial"].get("to"), "dial")
        elif "close" in link:
            check_node(link["close"].get("from"), "close")
        else:
            raise ScenarioError(f"link directive needs dial or close: {link!r}")
    for traffic in doc.get("traffic") or []:
        _require(isinstance(traffic.get("at-ms"), int) and traffic["at-ms"] >= 0,
                 f"traffic needs non-negative at-ms: {traffic!r}")
        check_node(traffic.get("from"), "traffic")
        _require(isinstance(traffic.get("to"), str), f"traffic needs to: {traffic!r}")
    for assertion in doc.get("assertions") or []:
        _require(isinstance(assertion, dict) and isinstance(assertion.get("type"), str),
                 f"bad assertion: {assertion!r}")
    return doc


class ScenarioRun:
    def __init__(self, doc: dict, out_dir: Path):
        self.doc = doc
        self.out = out_dir
        self.nodes: dict[str, NodeProc] = {}
        self.bdm_procs: list[asyncio.subprocess.Process] = []
        self.traffic_records: list[TrafficRecord] = []
        self.deliveries: list[Delivery] = []
        self.retained_samples: dict[int, list[tuple[int, int]]] = {}
        self.t0 = 0
        self._tasks: list[asyncio.Task] = []
        self._open_files = []

    # -- process management ------------------------------------------------

    async def start_nodes(self) -> None:
        for spec in self.doc["nodes"]:
            name = spec["name"]
            wire_log = self.out / f"{name}.wire.jsonl"
            stderr_path = self.out / f"{name}.node.log"
            argv = [
                sys.executable, "-m", "dtnode", "node", "run",
                "--name", name,
                "--dispatch", "127.0.0.1:0", "--app", "127.0.0.1:0", "--cla", "127.0.0.1:0",
                "--wire-log", str(wire_log),
            ]
            if spec.get("default-actions"):
                argv += ["--default-actions", json.dumps(spec["default-actions"])]
            stderr = open(stderr_path, "w")
            self._open_files.append(stderr)
            proc = await asyncio.create_subprocess_exec(
                *argv, stdout=asyncio.subprocess.PIPE, stderr=stderr)
            ready = await self._read_ready(proc, f"node {name}")
            _require(ready.startswith("READY "), f"node {name} sent {ready!r}")
            info = json.loads(ready[len("READY "):])
            self.nodes[name] = NodeProc(
                name=name, process=proc, dispatch=info["dispatch"],
                app=info["app"], cla=info["cla"], wire_log=wire_log)
            self._tasks.append(asyncio.get_running_loop().create_task(
                self._drain_stdout(proc)))

    async def _read_ready(self, proc, what: str) -> str:
        try:
            line = await asyncio.wait_for(proc.stdout.readline(), READY_TIMEOUT)
        except asyncio.TimeoutError:
            raise ScenarioError(f"{what} not ready within {READY_TIMEOUT} s")
        if not line:
            raise ScenarioError(f"{what} exited before READY")
        return line.decode("utf-8", errors="replace").strip()

    async def _drain_stdout(self, proc) -> None:
        while True:
            line = await proc.stdout.readline()
            if not line:
                return

    async def attach_clients(self) -> None:
        for spec in self.doc["nodes"]:
            np = self.nodes[spec["name"]]
            np.admin = await DispatchClient.connect(
                np.dispatch, role="bdm", node="scenario-admin")
            np.monitor = await DispatchClient.connect(
                np.dispatch, role="monitor", node="scenario-monitor")
            await np.monitor.subscribe(TOPICS)
            await np.monitor.call("list-bundles")  # fence: subscribe processed
            self._tasks.append(asyncio.get_running_loop().create_task(
                self._capture_events(np)))
            for demux in spec.get("apps") or []:
                app = await AppClient.connect(np.app, node=f"scenario-app-{demux}")
                await app.register(demux)
                np.apps[demux] = app
                self._tasks.append(asyncio.get_running_loop().create_task(
                    self._capture_deliveries(np.name, demux, app)))

    async def _capture_events(self, np: NodeProc) -> None:
        path = self.out / f"{np.name}.events.jsonl"
        with open(path, "w", encoding="utf-8") as fh:
            while True:
                try:
                    topic, timestamp, payload = await np.monitor.next_event()
                except ConnectionError:
                    return
                entry = {"t": now_ms(), "topic": topic,
                         "timestamp": timestamp, "payload": payload}
                np.events.append(entry)
                fh.write(json.dumps(entry, separators=(",", ":")) + "\n")
                fh.flush()

    async def _capture_deliveries(self, node: str, demux: str, app: AppClient) -> None:
        while True:
            try:
                bundle = await app.next_delivery()
            except ConnectionError:
                return
            self.deliveries.append(Delivery(
                node=node, demux=demux, payload=bundle.payload,
                received_at=now_ms(), source=str(bundle.id.source)))

    async def start_bdms(self) -> None:
        for index, spec in enumerate(self.doc.get("bdms") or []):
            np = self.nodes[spec["node"]]
            argv = self._bdm_argv(index, spec, np)
            log_path = self.out / f"{np.name}.bdm{index}.log"
            fh = open(log_path, "w")
            self._open_files.append(fh)
            proc = await asyncio.create_subprocess_exec(
                *argv, stdout=asyncio.subprocess.PIPE, stderr=fh)
            ready = await self._read_ready(proc, f"bdm {index} on {np.name}")
            _require(ready.startswith("READY"), f"bdm {index} sent {ready!r}")
            self.bdm_procs.append(proc)
            self._tasks.append(asyncio.get_running_loop().create_task(
                self._drain_stdout(proc)))

    def _bdm_argv(self, index: int, spec: dict, np: NodeProc) -> list[str]:
        kind = spec["kind"]
        if kind == "static":
            routes = self._write_routes(index, spec, np)
            return [sys.executable, "-m", "dtnode", "bdm", "static",
                    "--node", np.dispatch, "--routes", str(routes)]
        if kind == "opportunistic":
            argv = [sys.executable, "-m", "dtnode", "bdm", "opportunistic",
                    "--node", np.dispatch]
            if spec.get("flood"):
                argv.append("--flood")
            return argv
        if kind == "contact":
            plan_path = self.out / f"{np.name}.bdm{index}.plan"
            lines = []
            for entry in spec.get("plan") or []:
                lines.append("{} {} {} {} {}".format(
                    entry["from"], entry["to"],
                    self.t0 + entry["start-ms"], self.t0 + entry["end-ms"],
                    entry.get("owlt-ms", 0)))
            plan_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
            return [sys.executable, "-m", "dtnode", "bdm", "contact",
                    "--node", np.dispatch, "--plan", str(plan_path)]
        command = spec.get("command")
        _require(isinstance(command, list) and command,
                 f"external bdm needs a command list: {spec!r}")
        routes = self._write_routes(index, spec, np) if "routes" in spec else None
        out = []
        for part in command:
            part = str(part).replace("{dispatch}", np.dispatch)
            if routes is not None:
                part = part.replace("{routes}", str(routes))
            out.append(part)
        return out

    def _write_routes(self, index: int, spec: dict, np: NodeProc) -> Path:
        path = self.out / f"{np.name}.bdm{index}.routes"
        routes = spec.get("routes") or {}
        path.write_text(
            "".join(f"{dest} {hop}\n" for dest, hop in routes.items()), encoding="utf-8")
        return path

    # -- timed directives ----------------------------------------------------

    async def run_directives(self) -> None:
        directives = []
        for link in self.doc.get("links") or []:
            directives.append((link["at-ms"], "link", link))
        for traffic in self.doc.get("traffic") or []:
            record = TrafficRecord(directive=traffic)
            self.traffic_records.append(record)
            directives.append((traffic["at-ms"], "traffic", record))
        directives.sort(key=lambda d: d[0])
        for at, kind, item in directives:
            await self._sleep_until(self.t0 + at)
            if kind == "link":
                await self._do_link(item)
            else:
                await self._do_traffic(item)

    async def _sleep_until(self, target: int) -> None:
        while True:
            delta = target - now_ms()
            if delta <= 0:
                if delta < -200:
                    log.warning("directive is %d ms late", -delta)
                return
            await asyncio.sleep(min(delta, 50) / 1000.0)

    async def _do_link(self, link: dict) -> None:
        if "dial" in link:
            d = link["dial"]
            target = self.nodes[d["to"]]
            await self.nodes[d["from"]].admin.link_dial(target.cla)
        else:
            c = link["close"]
            await self.nodes[c["from"]].admin.link_close(c["peer"])

    async def _do_traffic(self, record: TrafficRecord) -> None:
        traffic = record.directive
        app = self.nodes[traffic["from"]].apps.get(traffic.get("app", ""))
        if app is None:
            registered = self.nodes[traffic["from"]].apps
            _require(len(registered) == 1,
                     f"traffic needs app: one of {sorted(registered)}")
            app = next(iter(registered.values()))
        record.payload = self._payload_for(traffic)
        record.sent_at = now_ms()
        bid = await app.send(traffic["to"], record.payload,
                             traffic.get("lifetime-ms", 60_000))
        from .wire import bundle_id_to_doc
        record.bundle_id = bundle_id_to_doc(bid)

    def _payload_for(self, traffic: dict) -> bytes:
        if "payload" in traffic:
            return str(traffic["payload"]).encode("utf-8")
        size = int(traffic.get("payload-size", 64))
        seed = len(self.traffic_records)
        return random.Random(seed).randbytes(size)

    # -- retained-during polling ----------------------------------------------

    def start_retention_polls(self) -> None:
        for index, assertion in enumerate(self.doc.get("assertions") or []):
            if assertion.get("type") == "retained-during":
                self.retained_samples[index] = []
                self._tasks.append(asyncio.get_running_loop().create_task(
                    self._poll_retention(index, assertion)))

    async def _poll_retention(self, index: int, assertion: dict) -> None:
        np = self.nodes[assertion["node"]]
        await self._sleep_until(self.t0 + assertion["from-ms"])
        deadline = self.t0 + assertion["to-ms"]
        while now_ms() <= deadline:
            try:
                bundles = await np.admin.list_bundles()
            except (ConnectionError, RpcError):
                return
            self.retained_samples[index].append((now_ms(), len(bundles)))
            await asyncio.sleep(RETAIN_POLL_MS / 1000.0)

    # -- assertions ------------------------------------------------------------

    def evaluate(self) -> list[dict]:
        results = []
        for index, assertion in enumerate(self.doc.get("assertions") or []):
            kind = assertion.get("type")
            checker = getattr(self, "_check_" + kind.replace("-", "_"), None)
            if checker is None:
                results.append({"assertion": assertion, "ok": False,
                                "detail": f"unknown assertion type {kind!r}"})
                continue
            try:
                detail = checker(assertion, index)
                results.append({"assertion": assertion, "ok": True, "detail": detail})
            except AssertionError as exc:
                results.append({"assertion": assertion, "ok": False, "detail": str(exc)})
        return results

    def _check_delivered(self, assertion: dict, index: int) -> str:
        matches = [d for d in self.deliveries
                   if d.node == assertion["node"] and d.demux == assertion["app"]]
        want = assertion.get("count", 1)
        assert len(matches) == want, f"saw {len(matches)} deliveries, want {want}"
        within = assertion.get("within-ms")
        if within is not None:
            for d in matches:
                sent = [r.sent_at for r in self.traffic_records if r.payload == d.payload]
                assert sent, "delivery does not match any injected payload"
                took = d.received_at - sent[0]
                assert took <= within, f"delivery took {took} ms, budget {within}"
        return f"{len(matches)} delivery(ies)"

    def _node_events(self, node: str) -> list[dict]:
        return self.nodes[node].events

    def _check_event_order(self, assertion: dict, index: int) -> str:
        wanted = list(assertion["topics"])
        seen = [e["topic"] for e in self._node_events(assertion["node"])]
        cursor = 0
        for topic in seen:
            if cursor < len(wanted) and topic == wanted[cursor]:
                cursor += 1
        assert cursor == len(wanted), \
            f"saw {seen}, missing {wanted[cursor:]} in order"
        return "ordered subsequence present"

    def _check_event_count(self, assertion: dict, index: int) -> str:
        events = [e for e in self._node_events(assertion["node"])
                  if e["topic"] == assertion["topic"]]
        want = assertion["count"]
        assert len(events) == want, f"saw {len(events)} {assertion['topic']}, want {want}"
        return f"{len(events)} event(s)"

    def _check_event_within(self, assertion: dict, index: int) -> str:
        lo = self.t0 + assertion["from-ms"]
        hi = self.t0 + assertion["to-ms"]
        stamps = [e["timestamp"] for e in self._node_events(assertion["node"])
                  if e["topic"] == assertion["topic"]]
        assert stamps, f"no {assertion['topic']} events at all"
        inside = [t for t in stamps if lo <= t <= hi]
        assert inside, (f"{assertion['topic']} at offsets "
                        f"{[t - self.t0 for t in stamps]}, window "
                        f"[{assertion['from-ms']}, {assertion['to-ms']}]")
        return f"event at offset {inside[0] - self.t0} ms"

    def _check_retained_during(self, assertion: dict, index: int) -> str:
        samples = self.retained_samples.get(index, [])
        assert len(samples) >= 2, f"only {len(samples)} store samples in the window"
        low = [count for _, count in samples if count < assertion.get("min-count", 1)]
        assert not low, f"store dipped to {min(low)} during the window"
        return f"{len(samples)} samples, all >= {assertion.get('min-count', 1)}"

    def _check_rpc_count(self, assertion: dict, index: int) -> str:
        count = 0
        for entry in self._wire_entries(assertion["node"]):
            if entry["dir"] != "in":
                continue
            try:
                doc = json.loads(entry["line"])
            except ValueError:
                continue
            if doc.get("kind") == "rpc-request" and \
                    doc.get("body", {}).get("method") == assertion["method"]:
                count += 1
        want = assertion["count"]
        assert count == want, f"saw {count} {assertion['method']} requests, want {want}"
        return f"{count} request(s)"

    def _wire_entries(self, node: str) -> list[dict]:
        path = self.nodes[node].wire_log
        entries = []
        if path.exists():
            for line in path.read_text(encoding="utf-8").splitlines():
                entries.append(json.loads(line))
        return entries

    def _check_no_payload_leak(self, assertion: dict, index: int) -> str:
        payloads = [(payload_to_doc(r.payload), r.bundle_id, len(r.payload))
                    for r in self.traffic_records if r.payload]
        lines_checked = 0
        for name in self.nodes:
            for entry in self._wire_entries(name):
                lines_checked += 1
                for b64, bundle_id, length in payloads:
                    assert b64 not in entry["line"], \
                        f"payload bytes of {bundle_id} in {name} wire log"
                self._check_lengths(entry, payloads, name)
        assert lines_checked > 0, "no wire log lines captured"
        return f"{lines_checked} lines clean"

    def _check_lengths(self, entry: dict, payloads, node: str) -> None:
        try:
            doc = json.loads(entry["line"])
        except ValueError:
            return
        for md in _iter_metadata(doc):
            for _, bundle_id, length in payloads:
                if bundle_id is not None and md.get("id") == bundle_id:
                    assert md.get("payload-length") == length, \
                        (f"payload-length {md.get('payload-length')} != {length} "
                         f"for {bundle_id} at {node}")

    # -- lifecycle --------------------------------------------------------------

    async def teardown(self) -> None:
        for task in self._tasks:
            task.cancel()
        for task in self._tasks:
            try:
                await task
            except (asyncio.CancelledError, Exception):
                pass
        for np in self.nodes.values():
            for client in [np.admin, np.monitor, *np.apps.values()]:
                if client is not None:
                    try:
                        await client.close()
                    except Exception:
                        pass
        procs = [np.process for np in self.nodes.values()] + self.bdm_procs
        for proc in procs:
            if proc.returncode is None:
                proc.terminate()
        for proc in procs:
            try:
                await asyncio.wait_for(proc.wait(), 3)
            except asyncio.TimeoutError:
                proc.kill()
                await proc.wait()
        for fh in self._open_files:
            fh.close()


def _iter_metadata(doc):
    """Yield every metadata-shaped document nested anywhere in `doc`."""
    if isinstance(doc, dict):
        if "payload-length" in doc and "id" in doc:
            yield doc
        for value in doc.values():
            yield from _iter_metadata(value)
    elif isinstance(doc, list):
        for value in doc:
            yield from _iter_metadata(value)


async def run_scenario(doc: dict, out_dir: Path, report=print) -> int:
    """Run one scenario; returns the process exit code."""
    run = ScenarioRun(doc, out_dir)
    try:
        await run.start_nodes()
        await run.attach_clients()
        run.t0 = now_ms() + doc.get("grace-ms", DEFAULT_GRACE_MS)
        await run.start_bdms()
        _require(now_ms() < run.t0,
                 "startup ran past t0; raise grace-ms")
        run.start_retention_polls()
        await run.run_directives()
        last = max([d["at-ms"] for d in (doc.get("links") or [])] +
                   [t["at-ms"] for t in (doc.get("traffic") or [])] +
                   [a.get("to-ms", 0) for a in (doc.get("assertions") or [])] + [0])
        await run._sleep_until(run.t0 + last + doc.get("settle-ms", DEFAULT_SETTLE_MS))
        results = run.evaluate()
    finally:
        await run.teardown()
    (out_dir / "report.json").write_text(
        json.dumps(results, indent=2, default=str), encoding="utf-8")
    failed = 0
    for result in results:
        status = "PASS" if result["ok"] else "FAIL"
        failed += 0 if result["ok"] else 1
        report(f"{status} {json.dumps(result['assertion'])} :: {result['detail']}")
    report(f"{'PASS' if failed == 0 else 'FAIL'} scenario "
           f"{doc.get('name', '?')}: {len(results) - failed}/{len(results)} assertions")
    return 0 if failed == 0 else 1


async def run_scenario_file(path: str, out_dir: str | None = None, report=print) -> int:
    doc = load_scenario(path)
    if out_dir is None:
        out_dir = tempfile.mkdtemp(prefix=f"scenario-{doc.get('name', 'run')}-")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report(f"run dir: {out}")
    return await run_scenario(doc, out, report=report)
