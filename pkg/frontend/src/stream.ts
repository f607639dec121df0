// Resumable NDJSON event-stream consumer.
//
// One connection at a time; on any drop it reconnects with exponential
// backoff carrying the last seen seq, so the reducer never misses events.
// Heartbeat comment lines (starting with '#') only feed the staleness
// watchdog: a silent stream flips the status to "stale" and forces a
// reconnect.

import { StreamEvent } from "./types.js";

export type StreamStatus = "live" | "reconnecting" | "stale";

export interface StreamOptions {
  token?: string;
  onEvent: (event: StreamEvent) => void;
  onStatus?: (status: StreamStatus) => void;
  /** silence longer than this marks the stream stale (ms) */
  heartbeatTimeoutMs?: number;
  backoffBaseMs?: number;
  backoffMaxMs?: number;
  fetchImpl?: typeof fetch;
}

export class EventStream {
  lastSeq: number;
  status: StreamStatus = "reconnecting";
  private stopped = false;
  private attempt = 0;
  private controller: AbortController | null = null;
  private watchdog: ReturnType<typeof setTimeout> | null = null;
  private readonly options: Required<Omit<StreamOptions, "token" | "fetchImpl" | "onStatus">> &
    StreamOptions;

  constructor(
    private baseUrl: string,
    since: number,
    options: StreamOptions,
  ) {
    this.baseUrl = baseUrl.replace(/\/+$/, "");
    this.lastSeq = since;
    this.options = {
      heartbeatTimeoutMs: 45_000,
      backoffBaseMs: 500,
      backoffMaxMs: 10_000,
      ...options,
    };
  }

  start(): void {
    this.stopped = false;
    void this.loop();
  }

  stop(): void {
    this.stopped = true;
    this.clearWatchdog();
    this.controller?.abort();
  }

  /** Full resync entry point: restart the tail from a fresh snapshot seq. */
  restartFrom(seq: number): void {
    this.lastSeq = seq;
    this.controller?.abort(); // the loop reconnects with the new cursor
  }

  private setStatus(status: StreamStatus): void {
    if (this.status !== status) {
      this.status = status;
      this.options.onStatus?.(status);
    }
  }

  private clearWatchdog(): void {
    if (this.watchdog !== null) {
      clearTimeout(this.watchdog);
      this.watchdog = null;
    }
  }

  private armWatchdog(): void {
    this.clearWatchdog();
    this.watchdog = setTimeout(() => {
      this.setStatus("stale");
      this.controller?.abort();
    }, this.options.heartbeatTimeoutMs);
  }

  private async loop(): Promise<void> {
    const fetchImpl = this.options.fetchImpl ?? fetch;
    while (!this.stopped) {
      this.controller = new AbortController();
      try {
        const params = new URLSearchParams({ since: String(this.lastSeq) });
        if (this.options.token) params.set("token", this.options.token);
        const response = await fetchImpl(`${this.baseUrl}/events?${params}`, {
          signal: this.controller.signal,
        });
        if (!response.ok || !response.body) throw new Error(`stream got ${response.status}`);
        this.setStatus("live");
        this.attempt = 0;
        this.armWatchdog();
        await this.consume(response.body);
      } catch {
        // fall through to reconnect
      }
      this.clearWatchdog();
      if (this.stopped) return;
      if (this.status === "live") this.setStatus("reconnecting");
      const delay = Math.min(
        this.options.backoffMaxMs,
        this.options.backoffBaseMs * 2 ** this.attempt,
      );
      this.attempt += 1;
      await new Promise((resolve) => setTimeout(resolve, delay));
    }
  }

  private async consume(body: ReadableStream<Uint8Array>): Promise<void> {
    const reader = body.getReader();
    const decoder = new TextDecoder();
    let buffer = "";
    for (;;) {
      const { done, value } = await reader.read();
      if (done) return;
      buffer += decoder.decode(value, { stream: true });
      let index;
      while ((index = buffer.indexOf("\n")) >= 0) {
        const line = buffer.slice(0, index).trim();
        buffer = buffer.slice(index + 1);
        this.armWatchdog(); // any traffic proves liveness
        if (!line || line.startsWith("#")) continue;
        const event = JSON.parse(line) as StreamEvent;
        this.lastSeq = Math.max(this.lastSeq, event.seq);
        this.options.onEvent(event);
      }
    }
  }
}
