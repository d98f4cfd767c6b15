"""Node configuration: YAML file loading plus address parsing helpers."""

from __future__ import annotations

from dataclasses import dataclass, field

import yaml

from .bundle import valid_node_name
from .wire import Action, ActionListError, actions_from_doc, validate_action_list

DEFAULT_DISPATCH = "127.0.0.1:4550"
DEFAULT_APP = "127.0.0.1:4560"
DEFAULT_CLA = "127.0.0.1:4556"
DEFAULT_SCAN_PERIOD_MS = 100
DEFAULT_QUEUE_CAP = 1024


class ConfigError(ValueError):
    pass


def parse_address(text: str) -> tuple:
    """Parse "host:port" into ("tcp", host, port) or "unix:<path>" into ("unix", path)."""
    if not isinstance(text, str) or not text:
        raise ConfigError(f"bad address: {text!r}")
    if text.startswith("unix:"):
        path = text[len("unix:"):]
        if not path:
            raise ConfigError(f"bad unix address: {text!r}")
        return ("unix", path)
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise ConfigError(f"bad address: {text!r} (want host:port or unix:path)")
    try:
        return ("tcp", host, int(port))
    except ValueError as exc:
        raise ConfigError(f"bad port in {text!r}") from exc


def format_address(addr: tuple) -> str:
    if addr[0] == "unix":
        return f"unix:{addr[1]}"
    return f"{addr[1]}:{addr[2]}"


@dataclass
class NodeConfig:
    node_name: str
    dispatch: str = DEFAULT_DISPATCH
    app: str = DEFAULT_APP
    cla: str = DEFAULT_CLA
    default_actions: list[Action] = field(default_factory=list)
    expiry_scan_period_ms: int = DEFAULT_SCAN_PERIOD_MS
    subscriber_queue_cap: int = DEFAULT_QUEUE_CAP
    wire_log: str | None = None
    dials: list[str] = field(default_factory=list)

    def validate(self) -> None:
        if not valid_node_name(self.node_name):
            raise ConfigError(f"invalid node name {self.node_name!r}")
        addrs = [parse_address(a) for a in (self.dispatch, self.app, self.cla)]
        # explicit listener addresses must not collide (port 0 means auto-assign)
        concrete = [a for a in addrs if a[0] == "unix" or a[2] != 0]
        if len(set(concrete)) != len(concrete):
            raise ConfigError("duplicate listener addresses in config")
        for d in self.dials:
            parse_address(d)
        if self.expiry_scan_period_ms <= 0:
            raise ConfigError("expiry-scan-period-ms must be positive")
        if self.subscriber_queue_cap <= 0:
            raise ConfigError("subscriber-queue-cap must be positive")
        try:
            validate_action_list(self.default_actions)
        except ActionListError as exc:
            raise ConfigError(f"bad default-actions: {exc}") from exc


def load_node_config(path: str) -> NodeConfig:
    with open(path, "r", encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    return node_config_from_doc(doc, origin=path)


def node_config_from_doc(doc, origin: str = "<config>") -> NodeConfig:
    if not isinstance(doc, dict):
        raise ConfigError(f"{origin}: top level must be a mapping")
    known = {
        "node-name", "listeners", "default-actions", "expiry-scan-period-ms",
        "subscriber-queue-cap", "wire-log", "dials",
    }
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"{origin}: unknown keys {sorted(unknown)}")
    listeners = doc.get("listeners") or {}
    if not isinstance(listeners, dict):
        raise ConfigError(f"{origin}: listeners must be a mapping")
    try:
        default_actions = actions_from_doc(doc.get("default-actions") or [])
    except ValueError as exc:
        raise ConfigError(f"{origin}: bad default-actions: {exc}") from exc
    cfg = NodeConfig(
        node_name=doc.get("node-name", ""),
        dispatch=listeners.get("dispatch", DEFAULT_DISPATCH),
        app=listeners.get("app", DEFAULT_APP),
        cla=listeners.get("cla", DEFAULT_CLA),
        default_actions=default_actions,
        expiry_scan_period_ms=doc.get("expiry-scan-period-ms", DEFAULT_SCAN_PERIOD_MS),
        subscriber_queue_cap=doc.get("subscriber-queue-cap", DEFAULT_QUEUE_CAP),
        wire_log=doc.get("wire-log"),
        dials=list(doc.get("dials") or []),
    )
    cfg.validate()
    return cfg
