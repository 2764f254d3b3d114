import { describe, expect, it } from "vitest";
import { AlertStream, SseParser, type SseRecord, type StreamStatus } from "../src/sse.js";

describe("SseParser", () => {
  it("parses a complete record", () => {
    const parser = new SseParser();
    const records = parser.feed('id: 4\ndata: {"a":1}\n\n');
    expect(records).toEqual([{ id: "4", event: undefined, data: '{"a":1}' }]);
  });

  it("handles arbitrary chunk boundaries", () => {
    const parser = new SseParser();
    const whole = 'id: 7\ndata: {"x":"hello"}\n\nid: 8\ndata: {"y":2}\n\n';
    const out: SseRecord[] = [];
    for (const ch of whole) out.push(...parser.feed(ch));
    expect(out.map((r) => r.id)).toEqual(["7", "8"]);
    expect(JSON.parse(out[1]!.data)).toEqual({ y: 2 });
  });

  it("ignores heartbeats and comments", () => {
    const parser = new SseParser();
    expect(parser.feed(": heartbeat\n\n: another\n\n")).toEqual([]);
    expect(parser.feed("data: 1\n\n")).toHaveLength(1);
  });

  it("joins multi-line data fields", () => {
    const parser = new SseParser();
    const records = parser.feed("data: line1\ndata: line2\n\n");
    expect(records[0]!.data).toBe("line1\nline2");
  });

  it("tolerates crlf", () => {
    const parser = new SseParser();
    const records = parser.feed("id: 2\r\ndata: ok\r\n\r\n");
    expect(records).toEqual([{ id: "2", event: undefined, data: "ok" }]);
  });
});

function streamResponse(body: string, status = 200): Response {
  const encoder = new TextEncoder();
  const stream = new ReadableStream<Uint8Array>({
    start(controller) {
      controller.enqueue(encoder.encode(body));
      controller.close();
    },
  });
  return new Response(stream, { status, headers: { "content-type": "text/event-stream" } });
}

describe("AlertStream", () => {
  it("delivers records and tracks the cursor", async () => {
    const seen: SseRecord[] = [];
    const urls: string[] = [];
    let calls = 0;
    const stream = new AlertStream({
      url: (cursor) => `/alerts/stream?cursor=${cursor}`,
      onRecord: (r) => seen.push(r),
      retryMs: 10,
      fetchFn: async (input) => {
        urls.push(String(input));
        calls += 1;
        if (calls === 1) {
          return streamResponse('id: 3\ndata: {"event_id":"e1"}\n\nid: 9\ndata: {"event_id":"e2"}\n\n');
        }
        stream.stop();
        return streamResponse("");
      },
    });
    stream.start();
    await new Promise((resolve) => setTimeout(resolve, 100));
    expect(seen).toHaveLength(2);
    expect(stream.cursor).toBe(9);
    // reconnect resumed from the last seen id
    expect(urls[1]).toBe("/alerts/stream?cursor=9");
  });

  it("reports stale on drop and reconnects with backoff", async () => {
    const statuses: StreamStatus[] = [];
    let calls = 0;
    const stream = new AlertStream({
      url: (c) => `/s?cursor=${c}`,
      onRecord: () => {},
      onStatus: (s) => statuses.push(s),
      retryMs: 5,
      fetchFn: async () => {
        calls += 1;
        if (calls < 3) throw new Error("network down");
        stream.stop();
        return streamResponse("data: x\n\n");
      },
    });
    stream.start();
    await new Promise((resolve) => setTimeout(resolve, 150));
    expect(statuses.filter((s) => s === "stale").length).toBeGreaterThanOrEqual(2);
    expect(calls).toBeGreaterThanOrEqual(3);
  });
});
