#!/usr/bin/env node
// Static-route dispatcher: destination node -> fixed next hop, with "*"
// as the fallback entry. Subscribes, reconciles against list-bundles,
// prints READY, then reacts to events until the node connection drops.

import fs from "fs";
import { DispatchClient } from "./client";
import { MetadataDoc, RpcError, dropAction, sendTo } from "./wire";

function usage(): never {
  process.stderr.write(
    "usage: static_bdm --node <host:port> --routes <file>\n"
  );
  process.exit(2);
}

function parseArgs(argv: string[]): { node: string; routes: string } {
  let node: string | undefined;
  let routes: string | undefined;
  for (let i = 0; i < argv.length; i += 2) {
    const flag = argv[i];
    const value = argv[i + 1];
    if (value === undefined) {
      usage();
    }
    if (flag === "--node") {
      node = value;
    } else if (flag === "--routes") {
      routes = value;
    } else {
      usage();
    }
  }
  if (!node || !routes) {
    usage();
  }
  return { node, routes };
}

function loadRoutes(path: string): Map<string, string> {
  const routes = new Map<string, string>();
  const text = fs.readFileSync(path, "utf-8");
  text.split("\n").forEach((raw, index) => {
    const line = raw.trim();
    if (!line || line.startsWith("#")) {
      return;
    }
    const parts = line.split(/\s+/);
    if (parts.length !== 2) {
      throw new Error(
        `${path}:${index + 1}: want '<dest> <next-hop>', got ${JSON.stringify(raw)}`
      );
    }
    routes.set(parts[0], parts[1]);
  });
  return routes;
}

function destinationNode(metadata: MetadataDoc): string {
  // dtn://<node-name>/<demux>
  return metadata.destination.slice("dtn://".length).split("/")[0];
}

async function run(): Promise<number> {
  const args = parseArgs(process.argv.slice(2));
  let routes: Map<string, string>;
  try {
    routes = loadRoutes(args.routes);
  } catch (err) {
    process.stderr.write(`static_bdm: ${(err as Error).message}\n`);
    return 2;
  }

  let client: DispatchClient;
  try {
    client = await DispatchClient.connect(args.node, "bdm", "static-bdm");
  } catch (err) {
    process.stderr.write(
      `static_bdm: cannot connect to ${args.node}: ${(err as Error).message}\n`
    );
    return 2;
  }

  const selfNode = client.serverNode;
  const active = new Set<string>();

  async function consider(metadata: MetadataDoc): Promise<void> {
    const dest = destinationNode(metadata);
    if (dest === selfNode) {
      return;
    }
    const hop = routes.get(dest) ?? routes.get("*");
    if (hop === undefined || !active.has(hop)) {
      return;
    }
    await client.updateActions(metadata.id, [sendTo(hop), dropAction()]);
  }

  async function reconcile(): Promise<void> {
    for (const metadata of await client.listBundles()) {
      await consider(metadata);
    }
  }

  client.subscribe(["forwarding-required", "link-up", "link-down"]);
  await reconcile();
  process.stdout.write("READY\n");

  for (;;) {
    let event;
    try {
      event = await client.nextEvent();
    } catch {
      break;
    }
    try {
      if (event.topic === "link-up") {
        active.add(event.payload["peer"] as string);
        await reconcile();
      } else if (event.topic === "link-down") {
        active.delete(event.payload["peer"] as string);
      } else if (event.topic === "forwarding-required") {
        await consider(event.payload["metadata"] as unknown as MetadataDoc);
      }
    } catch (err) {
      if (err instanceof RpcError) {
        process.stderr.write(`static_bdm: rpc failed: ${err.message}\n`);
      } else {
        break;
      }
    }
  }
  process.stderr.write("static_bdm: node connection lost\n");
  return 1;
}

run().then((code) => process.exit(code));
