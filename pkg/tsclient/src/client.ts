// Dispatch-plane client: hello exchange, seq bookkeeping, RPC correlation,
// and a FIFO event queue, over one TCP connection to a node.

import net from "net";
import {
  ActionDoc,
  BundleIdDoc,
  Envelope,
  LINE_CAP,
  LineSplitter,
  MetadataDoc,
  PROTOCOL_VERSION,
  RpcError,
  WireError,
  decodeMessage,
  encodeMessage,
  helloBody,
} from "./wire";

export interface NodeEvent {
  topic: string;
  timestamp: number;
  payload: Record<string, unknown>;
}

interface Pending {
  resolve: (result: unknown) => void;
  reject: (err: Error) => void;
}

function parseAddress(address: string): { host: string; port: number } {
  const colon = address.lastIndexOf(":");
  const port = Number(address.slice(colon + 1));
  if (colon <= 0 || !Number.isInteger(port) || port < 0 || port > 65535) {
    throw new RpcError("refused", `bad address ${JSON.stringify(address)}`);
  }
  return { host: address.slice(0, colon), port };
}

export class DispatchClient {
  serverNode: string | null = null;

  private txSeq = 0;
  private rxSeq = -1;
  private nextRpc = 0;
  private pending = new Map<string, Pending>();
  private events: NodeEvent[] = [];
  private waiters: Pending[] = [];
  private splitter: LineSplitter;
  private closed = false;

  private constructor(private socket: net.Socket, private lineCap: number) {
    this.splitter = new LineSplitter(lineCap);
  }

  static connect(
    address: string,
    role: string,
    node = "client",
    lineCap = LINE_CAP
  ): Promise<DispatchClient> {
    const { host, port } = parseAddress(address);
    return new Promise((resolve, reject) => {
      const socket = net.connect({ host, port });
      socket.once("error", (err) =>
        reject(new RpcError("refused", `${address}: ${err.message}`))
      );
      socket.once("connect", () => {
        const client = new DispatchClient(socket, lineCap);
        client
          .handshake(role, node)
          .then(() => resolve(client))
          .catch((err) => {
            socket.destroy();
            reject(err);
          });
      });
    });
  }

  private handshake(role: string, node: string): Promise<void> {
    this.write("hello", helloBody(role, node));
    return new Promise((resolve, reject) => {
      let settled = false;
      const fail = (err: Error) => {
        if (!settled) {
          settled = true;
          reject(err);
        }
      };
      const onData = (chunk: Buffer) => {
        let lines: Buffer[];
        try {
          lines = this.splitter.push(chunk);
        } catch (err) {
          fail(err as Error);
          return;
        }
        if (lines.length === 0) {
          return;
        }
        this.socket.off("data", onData);
        try {
          const env = decodeMessage(lines[0], this.rxSeq, this.lineCap);
          this.rxSeq = env.seq;
          if (env.kind !== "hello") {
            throw new RpcError("protocol-error", `expected hello, got ${env.kind}`);
          }
          if (env.body["protocol-version"] !== PROTOCOL_VERSION) {
            throw new RpcError(
              "version-mismatch",
              `server speaks version ${JSON.stringify(env.body["protocol-version"])}`
            );
          }
          this.serverNode = (env.body["node"] as string) ?? null;
          this.attachReader();
          for (const extra of lines.slice(1)) {
            this.handleLine(extra);
          }
          settled = true;
          resolve();
        } catch (err) {
          fail(err as Error);
        }
      };
      this.socket.on("data", onData);
      this.socket.once("close", () =>
        fail(new RpcError("refused", "server closed during hello"))
      );
      this.socket.once("error", (err) =>
        fail(new RpcError("refused", err.message))
      );
    });
  }

  private attachReader(): void {
    this.socket.on("data", (chunk: Buffer) => {
      let lines: Buffer[];
      try {
        lines = this.splitter.push(chunk);
      } catch (err) {
        this.abort(err as Error);
        return;
      }
      for (const line of lines) {
        this.handleLine(line);
      }
    });
    this.socket.on("close", () => this.abort(new Error("connection closed")));
    this.socket.on("error", (err) => this.abort(err));
  }

  private handleLine(line: Buffer): void {
    let env: Envelope;
    try {
      env = decodeMessage(line, this.rxSeq, this.lineCap);
    } catch (err) {
      this.abort(err as Error);
      return;
    }
    this.rxSeq = env.seq;
    if (env.kind === "event") {
      const event: NodeEvent = {
        topic: env.body["topic"] as string,
        timestamp: env.body["timestamp"] as number,
        payload: env.body["payload"] as Record<string, unknown>,
      };
      const waiter = this.waiters.shift();
      if (waiter) {
        waiter.resolve(event);
      } else {
        this.events.push(event);
      }
    } else if (env.kind === "rpc-response") {
      const id = env.body["id"] as string;
      const pending = this.pending.get(id);
      if (!pending) {
        return; // response to a caller that already gave up
      }
      this.pending.delete(id);
      if (env.body["error"] !== undefined && env.body["error"] !== null) {
        const err = env.body["error"] as Record<string, unknown>;
        pending.reject(
          new RpcError(
            (err["code"] as string) ?? "unknown",
            (err["message"] as string) ?? ""
          )
        );
      } else {
        pending.resolve(env.body["result"]);
      }
    } else {
      this.abort(new WireError("protocol-error", `unexpected ${env.kind} from server`));
    }
  }

  private abort(err: Error): void {
    if (this.closed) {
      return;
    }
    this.closed = true;
    this.socket.destroy();
    for (const pending of this.pending.values()) {
      pending.reject(err);
    }
    this.pending.clear();
    for (const waiter of this.waiters) {
      waiter.reject(err);
    }
    this.waiters = [];
  }

  private write(kind: Envelope["kind"], body: Record<string, unknown>): void {
    const data = encodeMessage({ kind, seq: this.txSeq, body }, this.lineCap);
    this.txSeq += 1;
    this.socket.write(data);
  }

  subscribe(topics: readonly string[]): void {
    this.write("subscribe", { topics: [...topics] });
  }

  call(method: string, params: Record<string, unknown> = {}): Promise<unknown> {
    if (this.closed) {
      return Promise.reject(new Error("session closed"));
    }
    this.nextRpc += 1;
    const id = `r${this.nextRpc}`;
    return new Promise((resolve, reject) => {
      this.pending.set(id, { resolve, reject });
      this.write("rpc-request", { id, method, params });
    });
  }

  nextEvent(timeoutMs?: number): Promise<NodeEvent> {
    const queued = this.events.shift();
    if (queued) {
      return Promise.resolve(queued);
    }
    if (this.closed) {
      return Promise.reject(new Error("session closed"));
    }
    return new Promise((resolve, reject) => {
      const waiter: Pending = { resolve: resolve as (v: unknown) => void, reject };
      if (timeoutMs !== undefined) {
        const timer = setTimeout(() => {
          const i = this.waiters.indexOf(waiter);
          if (i >= 0) {
            this.waiters.splice(i, 1);
          }
          reject(new Error(`no event within ${timeoutMs} ms`));
        }, timeoutMs);
        waiter.resolve = (value) => {
          clearTimeout(timer);
          resolve(value as NodeEvent);
        };
        waiter.reject = (err) => {
          clearTimeout(timer);
          reject(err);
        };
      }
      this.waiters.push(waiter);
    });
  }

  async updateActions(id: BundleIdDoc, actions: ActionDoc[]): Promise<void> {
    await this.call("update-actions", { id, actions });
  }

  async querySupportedActions(): Promise<Record<string, unknown>[]> {
    const result = (await this.call("query-supported-actions")) as {
      actions: Record<string, unknown>[];
    };
    return result.actions;
  }

  async listBundles(): Promise<MetadataDoc[]> {
    const result = (await this.call("list-bundles")) as { bundles: MetadataDoc[] };
    return result.bundles;
  }

  async getBundle(id: BundleIdDoc): Promise<MetadataDoc> {
    const result = (await this.call("get-bundle", { id })) as {
      metadata: MetadataDoc;
    };
    return result.metadata;
  }

  async setDefaultActions(actions: ActionDoc[]): Promise<void> {
    await this.call("set-default-actions", { actions });
  }

  async linkDial(address: string): Promise<string> {
    const result = (await this.call("link-dial", { address })) as { peer: string };
    return result.peer;
  }

  async linkClose(peer: string): Promise<void> {
    await this.call("link-close", { peer });
  }

  close(): void {
    this.abort(new Error("session closed"));
  }

  get isClosed(): boolean {
    return this.closed;
  }
}
