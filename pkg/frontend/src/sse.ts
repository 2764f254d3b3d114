// Server-sent-events client over fetch streaming, with cursor resume.
// EventSource is not available in every runtime we target (node tests,
// token headers), so the wire format is parsed by hand.

export interface SseRecord {
  id?: string;
  event?: string;
  data: string;
}

/** Incremental text/event-stream parser; safe across arbitrary chunking. */
export class SseParser {
  private buffer = "";
  private current: { id?: string; event?: string; data: string[] } = { data: [] };

  feed(chunk: string): SseRecord[] {
    this.buffer += chunk;
    const records: SseRecord[] = [];
    for (;;) {
      const nl = this.buffer.indexOf("\n");
      if (nl < 0) break;
      let line = this.buffer.slice(0, nl);
      this.buffer = this.buffer.slice(nl + 1);
      if (line.endsWith("\r")) line = line.slice(0, -1);
      if (line === "") {
        if (this.current.data.length > 0) {
          records.push({
            id: this.current.id,
            event: this.current.event,
            data: this.current.data.join("\n"),
          });
        }
        this.current = { data: [] };
        continue;
      }
      if (line.startsWith(":")) continue; // heartbeat/comment
      const colon = line.indexOf(":");
      const field = colon < 0 ? line : line.slice(0, colon);
      let value = colon < 0 ? "" : line.slice(colon + 1);
      if (value.startsWith(" ")) value = value.slice(1);
      if (field === "data") this.current.data.push(value);
      else if (field === "id") this.current.id = value;
      else if (field === "event") this.current.event = value;
      // "retry" and unknown fields are ignored
    }
    return records;
  }
}

export type StreamStatus = "connecting" | "live" | "stale" | "stopped";

export interface AlertStreamOptions {
  url: (cursor: number) => string;
  onRecord: (record: SseRecord) => void;
  onStatus?: (status: StreamStatus) => void;
  cursor?: number;
  fetchFn?: typeof fetch;
  /** initial reconnect delay; doubles per failure up to 10x */
  retryMs?: number;
  headers?: Record<string, string>;
}

/**
 * Long-lived alert subscription. Tracks the last seen record id and
 * reconnects with it as the cursor, so records missed during a drop are
 * backfilled; the UI only ever sees at-least-once delivery and dedupes.
 */
export class AlertStream {
  private stopped = false;
  private controller: AbortController | null = null;
  cursor: number;

  constructor(private readonly opts: AlertStreamOptions) {
    this.cursor = opts.cursor ?? 0;
  }

  start(): void {
    this.stopped = false;
    void this.loop();
  }

  stop(): void {
    this.stopped = true;
    this.controller?.abort();
    this.opts.onStatus?.("stopped");
  }

  private async loop(): Promise<void> {
    const fetchFn = this.opts.fetchFn ?? fetch;
    const baseRetry = this.opts.retryMs ?? 1000;
    let retry = baseRetry;
    while (!this.stopped) {
      this.opts.onStatus?.("connecting");
      this.controller = new AbortController();
      try {
        const resp = await fetchFn(this.opts.url(this.cursor), {
          signal: this.controller.signal,
          headers: { Accept: "text/event-stream", ...(this.opts.headers ?? {}) },
        });
        if (!resp.ok || !resp.body) throw new Error(`stream HTTP ${resp.status}`);
        this.opts.onStatus?.("live");
        retry = baseRetry;
        const parser = new SseParser();
        const reader = resp.body.getReader();
        const decoder = new TextDecoder();
        for (;;) {
          const { done, value } = await reader.read();
          if (done) break;
          for (const record of parser.feed(decoder.decode(value, { stream: true }))) {
            if (record.id !== undefined) {
              const id = Number(record.id);
              if (Number.isFinite(id)) this.cursor = Math.max(this.cursor, id);
            }
            this.opts.onRecord(record);
          }
        }
      } catch {
        // drop through to retry
      }
      if (this.stopped) break;
      this.opts.onStatus?.("stale");
      await new Promise((resolve) => setTimeout(resolve, retry));
      retry = Math.min(retry * 2, baseRetry * 10);
    }
  }
}
