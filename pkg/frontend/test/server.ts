// Spawns the real backend (`python3 -m smartpark.cli serve`) for
// integration tests; the UI may only talk to its public interfaces.

import { ChildProcess, spawn } from "node:child_process";
import { mkdtempSync, rmSync } from "node:fs";
import { createServer } from "node:net";
import { tmpdir } from "node:os";
import { join } from "node:path";

function freePort(): Promise<number> {
  return new Promise((resolve, reject) => {
    const probe = createServer();
    probe.listen(0, "127.0.0.1", () => {
      const address = probe.address();
      if (address === null || typeof address === "string") {
        reject(new Error("no port"));
        return;
      }
      probe.close(() => resolve(address.port));
    });
  });
}

export class BackendServer {
  url = "";
  private proc: ChildProcess | null = null;
  private dataDir = "";

  async start(): Promise<string> {
    const httpPort = await freePort();
    const devicePort = await freePort();
    this.dataDir = mkdtempSync(join(tmpdir(), "smartpark-ui-test-"));
    this.url = `http://127.0.0.1:${httpPort}`;
    this.proc = spawn(
      "python3",
      [
        "-m",
        "smartpark.cli",
        "serve",
        "--data-dir",
        this.dataDir,
        "--http",
        `127.0.0.1:${httpPort}`,
        "--device",
        `127.0.0.1:${devicePort}`,
      ],
      { stdio: ["ignore", "pipe", "pipe"] },
    );
    const deadline = Date.now() + 15_000;
    for (;;) {
      try {
        const response = await fetch(`${this.url}/healthz`);
        if (response.ok) break;
      } catch {
        if (Date.now() > deadline) throw new Error("backend never came up");
        await new Promise((resolve) => setTimeout(resolve, 100));
      }
    }
    return this.url;
  }

  async stop(): Promise<void> {
    if (this.proc) {
      this.proc.kill("SIGTERM");
      await new Promise<void>((resolve) => {
        this.proc!.once("exit", () => resolve());
        setTimeout(() => {
          this.proc?.kill("SIGKILL");
          resolve();
        }, 5000);
      });
      this.proc = null;
    }
    if (this.dataDir) rmSync(this.dataDir, { recursive: true, force: true });
  }
}

export async function registerSpace(url: string, capacity: number, name = "Lot A") {
  const response = await fetch(`${url}/spaces`, {
    method: "POST",
    headers: { "Content-Type": "application/json" },
    body: JSON.stringify({
      name,
      location: { latitude: 0.315, longitude: 32.582 },
      capacity,
      admin_name: "K. Admin",
      admin_contact: "+256-700",
      tariff: { free: true, rate_per_unit: 0, billing_unit_minutes: 15, free_minutes: 0 },
    }),
  });
  if (response.status !== 201) throw new Error(`space setup failed: ${response.status}`);
  return response.json();
}

let uidCounter = 0x10;

export async function registerMotorist(url: string, name: string) {
  uidCounter += 1;
  const response = await fetch(`${url}/motorists`, {
    method: "POST",
    headers: { "Content-Type": "application/json" },
    body: JSON.stringify({
      full_name: name,
      nationality: "Ugandan",
      national_id: `ID-${name}-${uidCounter}`,
      contact: "+256-701",
      rfid_uid: `AB00CD${uidCounter.toString(16).padStart(2, "0").toUpperCase()}`,
    }),
  });
  if (response.status !== 201) throw new Error(`motorist setup failed: ${response.status}`);
  return response.json();
}
