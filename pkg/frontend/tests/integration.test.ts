/** End-to-end flow against a live Python service: upload a synthetic slide,
 * run a segmentation job, delete one predicted polygon, add one human
 * polygon, save once, and verify a fresh GET reflects both edits with the
 * revision bumped by exactly one. Requires the slideseg package installed. */

import { execFile, spawn, type ChildProcess } from "node:child_process";
import { mkdtempSync, readFileSync, rmSync } from "node:fs";
import { createServer } from "node:net";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { promisify } from "node:util";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { ApiClient, ConflictError } from "../src/api.js";
import { EditorSession } from "../src/editor.js";
import type { Point } from "../src/types.js";
import { visibleElements, visibleTiles } from "../src/viewer.js";

const run = promisify(execFile);
const STARTUP_MS = 30_000;

function freePort(): Promise<number> {
  return new Promise((resolve, reject) => {
    const srv = createServer();
    srv.once("error", reject);
    srv.listen(0, "127.0.0.1", () => {
      const { port } = srv.address() as { port: number };
      srv.close(() => resolve(port));
    });
  });
}

let dataDir: string;
let server: ChildProcess;
let api: ApiClient;

beforeAll(async () => {
  dataDir = mkdtempSync(join(tmpdir(), "slideseg-it-"));
  const port = await freePort();
  server = spawn(
    "python3",
    ["-m", "slideseg", "serve", "--data-dir", dataDir,
      "--port", String(port), "--workers", "2", "--max-jobs", "2"],
    { stdio: ["ignore", "inherit", "inherit"] },
  );
  api = new ApiClient(`http://127.0.0.1:${port}`);
  const deadline = Date.now() + STARTUP_MS;
  for (;;) {
    if (server.exitCode !== null) throw new Error("server exited during startup");
    try {
      await api.listSlides();
      break;
    } catch {
      if (Date.now() > deadline) throw new Error("server did not come up");
      await new Promise((r) => setTimeout(r, 200));
    }
  }
}, STARTUP_MS + 10_000);

afterAll(() => {
  server?.kill("SIGTERM");
  if (dataDir) rmSync(dataDir, { recursive: true, force: true });
});

describe("annotator against a live service", () => {
  let slideId: string;

  it("uploads a synthetic slide", async () => {
    const png = join(dataDir, "synthetic.png");
    await run("python3", ["-c", [
      "from PIL import Image",
      "from slideseg.synthetic import make_synthetic",
      "image, _ = make_synthetic(512, 3, seed=21)",
      `Image.fromarray(image).save(${JSON.stringify(png)})`,
    ].join("\n")]);
    const meta = await api.uploadSlide(new Uint8Array(readFileSync(png)), "it.png");
    slideId = meta.slide_id;
    expect(meta.state).toBe("ready");
    expect(meta.width0).toBe(512);
    expect(meta.levels).toBeGreaterThanOrEqual(1);

    // the viewer math yields fetchable tile URLs for this slide
    const state = { slideId, centerX: 256, centerY: 256, zoom: 0,
      visibleLayers: new Set<string>(), selection: null };
    const tiles = visibleTiles(meta, state, 512, 512);
    expect(tiles.length).toBeGreaterThan(0);
    const res = await fetch(api.tileUrl(slideId, tiles[0]!.level, tiles[0]!.x, tiles[0]!.y));
    expect(res.status).toBe(200);
    expect(res.headers.get("content-type")).toBe("image/png");
  }, 60_000);

  it("a submitted job yields a visible predicted layer", async () => {
    const job = await api.submitJob({ slide_id: slideId });
    expect(["queued", "running"]).toContain(job.state);
    const done = await api.pollJob(job.job_id, { intervalMs: 200 });
    expect(done.progress.done).toBe(done.progress.total);

    const doc = await api.getAnnotations(slideId);
    expect(doc.revision).toBe(1);
    const overlay = visibleElements(doc, new Set(doc.layers.map((l) => l.name)));
    expect(overlay.length).toBeGreaterThan(0);
    expect(overlay.every((o) => o.predicted)).toBe(true);
  }, 120_000);

  it("delete + add, one save: fresh GET shows both edits, revision +1", async () => {
    const session = new EditorSession(await api.getAnnotations(slideId));
    const baseRevision = session.revision;
    const layerName = session.doc.layers[0]!.name;
    const victim = session.doc.layers[0]!.elements[0]!.id;

    session.apply({ op: "delete", elementId: victim });
    const triangle: Point[] = [[10.25, 10.5], [90, 12], [40.75, 80]];
    const added = session.apply({ op: "add", layer: layerName, points: triangle });
    expect(session.dirty).toBe(true);

    const saved = await api.putAnnotations(slideId, session.doc.layers, baseRevision);
    expect(saved.revision).toBe(baseRevision + 1);

    const fresh = await api.getAnnotations(slideId);
    session.markSaved(fresh);
    expect(session.dirty).toBe(false);
    expect(fresh.revision).toBe(baseRevision + 1);
    const ids = fresh.layers.flatMap((l) => l.elements.map((e) => e.id));
    expect(ids).not.toContain(victim);
    expect(ids).toContain(added);
    const mine = fresh.layers[0]!.elements.find((e) => e.id === added)!;
    expect(mine.source).toBe("human");
    expect(mine.points).toEqual(triangle); // already 2-decimal; wire-exact
  }, 30_000);

  it("a stale save raises ConflictError with the current document", async () => {
    const err = await api.putAnnotations(slideId, [], 0).catch((e) => e);
    expect(err).toBeInstanceOf(ConflictError);
    const current = await api.getAnnotations(slideId);
    expect(err.current).toEqual(current);
  }, 30_000);
});
