/**
 * End-to-end check against the real review service: runs the extraction
 * pipeline on the fixture corpus, starts the HTTP server, and drives it
 * through the same ApiClient the browser uses.
 */
import { afterAll, beforeAll, describe, expect, it } from "vitest";
import { execFileSync, spawn, type ChildProcess } from "node:child_process";
import { mkdtempSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join, resolve } from "node:path";

import { ApiClient, ApiError } from "../src/api.js";
import type { FetchLike } from "../src/api.js";

const REPO = resolve(__dirname, "../..");
const E2E = join(REPO, "tests", "fixtures", "e2e");
const PORT = 8765;
const ENV = { ...process.env, PYTHONPATH: join(REPO, "src") };

let server: ChildProcess | null = null;
let runId = "";

function writeRunConfig(dir: string): string {
  const models = ["alpha", "beta", "gamma"].map((name) => ({
    model_id: name,
    provider: "mock",
    script: join(E2E, "mock", `${name}.json`),
  }));
  const config = {
    models,
    strategies: ["ext", "combined_ext"],
    docs_dir: join(E2E, "docs"),
    gt_dir: join(E2E, "gt"),
    profiles_dir: join(E2E, "profiles"),
    judge: "deterministic",
    seed: 7,
    cache_dir: join(dir, "cache"),
    runs_dir: join(dir, "runs"),
  };
  const path = join(dir, "config.json");
  writeFileSync(path, JSON.stringify(config));
  return path;
}

async function waitForServer(client: ApiClient): Promise<void> {
  for (let i = 0; i < 50; i++) {
    try {
      await client.loadEffort(runId);
      return;
    } catch {
      await new Promise((r) => setTimeout(r, 100));
    }
  }
  throw new Error("review service did not come up");
}

const realFetch: FetchLike = (url, init) => fetch(url, init);
const client = new ApiClient(`http://127.0.0.1:${PORT}`, realFetch);

beforeAll(async () => {
  const dir = mkdtempSync(join(tmpdir(), "review-ui-"));
  const configPath = writeRunConfig(dir);
  const cli = (cmd: string) =>
    execFileSync("python3", ["-m", "metaextract.cli", cmd, "--config", configPath], {
      env: ENV,
    });
  cli("extract");
  cli("merge");
  server = spawn(
    "python3",
    ["-m", "metaextract.cli", "review-serve", "--config", configPath,
     "--port", String(PORT)],
    { env: ENV },
  );
  runId = await new Promise<string>((resolvePromise, rejectPromise) => {
    let buffer = "";
    server!.stderr!.on("data", (chunk: Buffer) => {
      buffer += chunk.toString();
      const match = buffer.match(/serving run (\w+)/);
      if (match) resolvePromise(match[1]!);
    });
    server!.on("exit", () => rejectPromise(new Error(`server exited: ${buffer}`)));
    setTimeout(() => rejectPromise(new Error("no run id announced")), 15000);
  });
  await waitForServer(client);
}, 30000);

afterAll(() => {
  server?.kill();
});

describe("review service integration", () => {
  it("T3 queue contains only statistics-category items", async () => {
    const items = await client.loadQueue(runId, { tier: "T3" });
    expect(items.length).toBeGreaterThan(0);
    // T3 holds statistics plus uncategorized fields, never the lower tiers
    expect(items.some((it) => it.category === "statistics")).toBe(true);
    for (const it of items) {
      expect(["study_info", "quality_assessment"]).not.toContain(it.category);
    }
    expect(items.every((it) => it.status !== "AutoAccepted")).toBe(true);
  });

  it("decisions update server state and tokens deduplicate", async () => {
    const pending = await client.loadQueue(runId, {
      tier: "T3",
      status: "Pending",
    });
    const target = pending[0]!;
    const body = {
      decision: "Accepted" as const,
      reviewer_id: "ui-tester",
      token: "integration-tok-1",
    };
    const first = await client.submitDecision(target.item_id, body);
    expect(first.status).toBe("Accepted");

    // double submission with the same token is a no-op replay
    const replay = await client.submitDecision(target.item_id, body);
    expect(replay).toEqual(first);

    // a genuinely new decision attempt conflicts
    const conflict = await client
      .submitDecision(target.item_id, { ...body, token: "integration-tok-2" })
      .catch((e) => e);
    expect(conflict).toBeInstanceOf(ApiError);
    expect(conflict.code).toBe("already_decided");

    const refreshed = await client.getItem(target.item_id);
    expect(refreshed.status).toBe("Accepted");
    expect(refreshed.reviewer_id).toBe("ui-tester");
  });

  it("correct and reject round-trip", async () => {
    const pending = await client.loadQueue(runId, {
      tier: "T3",
      status: "Pending",
    });
    const [a, b] = [pending[0]!, pending[1]!];
    const corrected = await client.submitDecision(a.item_id, {
      decision: "Corrected",
      corrected_value: 999,
      reviewer_id: "ui-tester",
      token: "integration-tok-3",
    });
    expect(corrected.status).toBe("Corrected");
    expect(corrected.corrected_value).toBe(999);
    const rejected = await client.submitDecision(b.item_id, {
      decision: "Rejected",
      reviewer_id: "ui-tester",
      token: "integration-tok-4",
    });
    expect(rejected.status).toBe("Rejected");

    const effort = await client.loadEffort(runId);
    expect(effort.T3.items_reviewed).toBeGreaterThanOrEqual(3);
  });
});
