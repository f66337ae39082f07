// End-to-end flow against the real game service: an automated session plays
// one full game (two reveals, a correct guess, two labels) and the labels
// must appear in the next export. Every resource the client touches is
// recorded to prove it only ever requests composited images.

import { afterAll, beforeAll, describe, expect, it } from "vitest";
import { execFileSync, spawn, type ChildProcess } from "node:child_process";
import { mkdtempSync, readFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";

import { DeepRevealApi } from "../src/api.js";
import { createApp, type AppHandle } from "../src/app.js";

const PORT = 8900 + (process.pid % 80);
const BASE = `http://127.0.0.1:${PORT}`;

let runDir: string;
let server: ChildProcess | null = null;
const requestLog: string[] = [];

function python(code: string): string {
  return execFileSync("python3", ["-c", code], { encoding: "utf-8" });
}

async function serverReady(): Promise<void> {
  for (let attempt = 0; attempt < 60; attempt++) {
    try {
      const response = await fetch(`${BASE}/api/leaderboard`);
      if (response.ok) return;
    } catch {
      // not up yet
    }
    await new Promise((resolve) => setTimeout(resolve, 500));
  }
  throw new Error("game service did not come up");
}

beforeAll(async () => {
  runDir = mkdtempSync(join(tmpdir(), "deep-reveal-int-"));
  python(
    [
      "from pathlib import Path",
      "from layerlens.fixture import write_fixture, MODEL_NAME, IMAGE_NAMES",
      "from layerlens.cli import main",
      `base = Path(${JSON.stringify(runDir)})`,
      "fx = base / 'fixture'",
      "write_fixture(fx)",
      "out = base / 'run'",
      "args = ['extract', '--model', str(fx / MODEL_NAME), '--layers', 'conv1,conv2', '--out', str(out)]",
      "for n in IMAGE_NAMES: args += ['--image', str(fx / (n + '.png'))]",
      "assert main(args) == 0",
      "assert main(['cluster', '--seed', '7', '--out', str(out)]) == 0",
      "assert main(['masks', '--screening', 'auto:2', '--out', str(out)]) == 0",
    ].join("\n"),
  );
  server = spawn(
    "python3",
    ["-m", "layerlens.cli", "serve", "--out", join(runDir, "run"), "--port", String(PORT), "--static", "dist"],
    { stdio: ["ignore", "pipe", "pipe"], cwd: process.cwd() },
  );
  await serverReady();
});

afterAll(() => {
  server?.kill("SIGTERM");
});

function recordingFetch(input: string, init?: RequestInit): Promise<Response> {
  requestLog.push(input);
  return fetch(BASE + input, init);
}

function storageStub() {
  const data = new Map<string, string>();
  return {
    getItem: (k: string) => data.get(k) ?? null,
    setItem: (k: string, v: string) => void data.set(k, v),
    removeItem: (k: string) => void data.delete(k),
  };
}

async function settle() {
  for (let i = 0; i < 20; i++) await Promise.resolve();
  await new Promise((resolve) => setTimeout(resolve, 50));
}

function trueClassFor(imageUrl: string): string {
  const manifest = JSON.parse(
    readFileSync(join(runDir, "run", "masks", "games.json"), "utf-8"),
  ) as { items: { true_class: string; levels: string[] }[] };
  const path = imageUrl.replace("/api/image/", "");
  const item = manifest.items.find((it) => it.levels.includes(path));
  if (!item) throw new Error(`no pool item serves ${imageUrl}`);
  return item.true_class;
}

describe("live service flow", () => {
  let app: AppHandle;
  let root: HTMLElement;

  it("completes a full game and the labels reach the export", async () => {
    document.body.innerHTML = '<div id="app"></div>';
    root = document.getElementById("app")!;
    app = createApp(root, new DeepRevealApi(recordingFetch), storageStub());
    await app.boot();
    await settle();

    // nickname -> session -> first game
    (root.querySelector(".nickname-input") as HTMLInputElement).value = "browser-bot";
    (root.querySelector(".start-button") as HTMLElement).click();
    await settle();
    expect(app.state().phase).toBe("guessing");
    const img = root.querySelector(".masked-image") as HTMLImageElement;
    expect(img.src).toContain("/api/image/");

    // the composite endpoint really serves the level-0 PNG
    const level0 = await fetch(BASE + app.state().imageUrl!);
    expect(level0.status).toBe(200);
    expect(level0.headers.get("content-type")).toBe("image/png");

    // reveal twice
    for (let reveal = 1; reveal <= 2; reveal++) {
      (root.querySelector(".reveal-button") as HTMLElement).click();
      await settle();
      expect(app.state().hintLevel).toBe(reveal);
    }

    // correct guess (truth looked up operator-side from the pool manifest)
    const truth = trueClassFor(app.state().imageUrl!);
    const button = [...root.querySelectorAll(".option-button")].find(
      (b) => (b as HTMLElement).dataset.className === truth,
    );
    expect(button).toBeDefined();
    (button as HTMLElement).click();
    await settle();
    expect(app.state().phase).toBe("labeling");
    expect(app.state().lastCorrect).toBe(true);
    expect(app.state().lastPoints).toBe(100 - 15 * 2);

    // two labels
    const inputs = [...root.querySelectorAll(".label-input")] as HTMLInputElement[];
    inputs[0].value = "glowing disc";
    inputs[1].value = "round edge";
    (root.querySelector(".label-form") as HTMLFormElement).dispatchEvent(
      new Event("submit", { bubbles: true, cancelable: true }),
    );
    await settle();
    expect(app.state().phase).toBe("done");

    // the next export contains the labels
    const exportOut = python(
      [
        "from pathlib import Path",
        "from layerlens.service import GamePool, GameService",
        `run = Path(${JSON.stringify(runDir)}) / 'run'`,
        "pool = GamePool.load(run / 'masks' / 'games.json')",
        "svc = GameService.replay(pool, run / 'service' / 'events.jsonl')",
        "print(svc.write_label_export(run / 'labels' / 'export.jsonl').read_text())",
      ].join("\n"),
    );
    const records = exportOut
      .trim()
      .split("\n")
      .filter((line) => line.trim())
      .map((line) => JSON.parse(line));
    const mine = records.find((r) => r.labels.includes("glowing disc"));
    expect(mine).toBeDefined();
    expect(mine.labels).toEqual(["glowing disc", "round edge"]);
    expect(mine.hints_used).toBe(2);
    expect(mine.correct).toBe(true);

    // the client only ever fetched API routes, and images only composites
    expect(requestLog.length).toBeGreaterThan(0);
    for (const url of requestLog) {
      expect(url.startsWith("/api/")).toBe(true);
    }
    const imageRequests = requestLog.filter((url) => url.includes("image"));
    for (const url of imageRequests) {
      expect(url.startsWith("/api/image/")).toBe(true);
    }
    expect(img.src).toContain("/api/image/");
  });

  it("serves the built client as static assets", async () => {
    const page = await fetch(`${BASE}/`);
    expect(page.status).toBe(200);
    const html = await page.text();
    expect(html).toContain('<div id="app">');
  });
});
