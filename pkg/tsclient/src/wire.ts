// Envelope codec for the dtnode wire protocol: newline-delimited JSON,
// compact separators, kebab-case keys, per-direction seq counting from 0.
// Key insertion order matters: encoded bytes must match the reference
// implementation exactly.

export const PROTOCOL_VERSION = 1;
export const LINE_CAP = 1024 * 1024;
export const LARGE_LINE_CAP = 16 * 1024 * 1024;

export const KINDS = [
  "hello",
  "subscribe",
  "event",
  "rpc-request",
  "rpc-response",
] as const;

export const TOPICS = [
  "bundle-received",
  "forwarding-required",
  "bundle-forwarded",
  "action-failed",
  "bundle-expired",
  "bundle-delivered",
  "link-up",
  "link-down",
] as const;

export type Kind = (typeof KINDS)[number];
export type Topic = (typeof TOPICS)[number];

export interface Envelope {
  kind: Kind;
  seq: number;
  body: Record<string, unknown>;
}

export interface ActionDoc {
  verb: string;
  args: Record<string, unknown>;
}

export interface BundleIdDoc {
  source: string;
  "creation-time": number;
  sequence: number;
}

export interface MetadataDoc {
  id: BundleIdDoc;
  destination: string;
  "report-to": string | null;
  "previous-node": string | null;
  lifetime: number;
  "payload-length": number;
  "extension-blocks": { "block-type": number; flags: number; data: string }[];
  "arrival-time": number;
  "current-actions": ActionDoc[];
  "update-seq": number;
}

export class WireError extends Error {
  constructor(public code: string, message: string) {
    super(`${code}: ${message}`);
    this.name = "WireError";
  }
}

export class RpcError extends Error {
  constructor(public code: string, message: string) {
    super(`${code}: ${message}`);
    this.name = "RpcError";
  }
}

export function sendTo(node: string): ActionDoc {
  return { verb: "send-to", args: { node } };
}

export function dropAction(): ActionDoc {
  return { verb: "drop", args: {} };
}

export function helloBody(role: string, node: string): Record<string, unknown> {
  return { "protocol-version": PROTOCOL_VERSION, role, node };
}

export function encodeMessage(envelope: Envelope, lineCap = LINE_CAP): Buffer {
  const doc = { kind: envelope.kind, seq: envelope.seq, body: envelope.body };
  const data = Buffer.from(JSON.stringify(doc), "utf-8");
  if (data.length + 1 > lineCap) {
    throw new WireError(
      "unrepresentable-value",
      `encoded message exceeds ${lineCap} byte cap`
    );
  }
  return Buffer.concat([data, Buffer.from("\n")]);
}

export function decodeMessage(
  line: Buffer | string,
  prevSeq: number | null = null,
  lineCap = LINE_CAP
): Envelope {
  const raw = typeof line === "string" ? Buffer.from(line, "utf-8") : line;
  if (raw.length > lineCap) {
    throw new WireError("malformed-document", `line exceeds ${lineCap} byte cap`);
  }
  let doc: unknown;
  try {
    doc = JSON.parse(raw.toString("utf-8"));
  } catch (err) {
    throw new WireError("malformed-document", String(err));
  }
  if (typeof doc !== "object" || doc === null || Array.isArray(doc)) {
    throw new WireError("malformed-document", "envelope must be an object");
  }
  const { kind, seq, body } = doc as Record<string, unknown>;
  if (typeof kind !== "string") {
    throw new WireError("malformed-document", "missing kind");
  }
  if (!(KINDS as readonly string[]).includes(kind)) {
    throw new WireError("unknown-kind", `unknown envelope kind ${JSON.stringify(kind)}`);
  }
  if (typeof seq !== "number" || !Number.isInteger(seq) || seq < 0) {
    throw new WireError("malformed-document", `bad seq ${JSON.stringify(seq)}`);
  }
  if (typeof body !== "object" || body === null || Array.isArray(body)) {
    throw new WireError("malformed-document", "missing body");
  }
  if (prevSeq !== null && seq !== prevSeq + 1) {
    throw new WireError("seq-regression", `expected seq ${prevSeq + 1}, got ${seq}`);
  }
  return { kind: kind as Kind, seq, body: body as Record<string, unknown> };
}

/** Stateful splitter: feed arbitrary chunks, get complete lines out. */
export class LineSplitter {
  private buffer = Buffer.alloc(0);

  constructor(private lineCap = LINE_CAP) {}

  push(chunk: Buffer): Buffer[] {
    this.buffer = Buffer.concat([this.buffer, chunk]);
    const lines: Buffer[] = [];
    let start = 0;
    for (;;) {
      const newline = this.buffer.indexOf(0x0a, start);
      if (newline < 0) {
        break;
      }
      lines.push(this.buffer.subarray(start, newline + 1));
      start = newline + 1;
    }
    this.buffer = this.buffer.subarray(start);
    if (this.buffer.length > this.lineCap) {
      throw new WireError(
        "malformed-document",
        `unterminated line exceeds ${this.lineCap} byte cap`
      );
    }
    return lines;
  }
}
