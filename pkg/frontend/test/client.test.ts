import { describe, expect, it } from "vitest";

import {
  BACKOFF_BASE_MS,
  COMMAND_INTERVAL_MS,
  TeleopClient,
  WsLike,
} from "../src/client.js";

class FakeWs implements WsLike {
  sent: string[] = [];
  closed = false;
  onopen: ((ev?: unknown) => void) | null = null;
  onclose: ((ev?: unknown) => void) | null = null;
  onmessage: ((ev: { data: string }) => void) | null = null;
  onerror: ((ev?: unknown) => void) | null = null;
  send(data: string): void {
    this.sent.push(data);
  }
  close(): void {
    this.closed = true;
    this.onclose?.();
  }
}

interface Timer {
  fn: () => void;
  at: number;
}

/** Deterministic clock + timer queue so debounce/backoff are exact. */
function harness() {
  const sockets: FakeWs[] = [];
  const timers: Timer[] = [];
  let t = 0;
  const client = new TeleopClient("ws://test/ws", undefined, {
    wsFactory: () => {
      const ws = new FakeWs();
      sockets.push(ws);
      return ws;
    },
    setTimer: (fn, ms) => {
      const timer = { fn, at: t + ms };
      timers.push(timer);
      return timer;
    },
    clearTimer: (h) => {
      const i = timers.indexOf(h as Timer);
      if (i >= 0) timers.splice(i, 1);
    },
    now: () => t,
  });
  const advance = (ms: number) => {
    const deadline = t + ms;
    for (;;) {
      const due = timers
        .filter((x) => x.at <= deadline)
        .sort((a, b) => a.at - b.at)[0];
      if (due === undefined) break;
      timers.splice(timers.indexOf(due), 1);
      t = due.at;
      due.fn();
    }
    t = deadline;
  };
  return { client, sockets, timers, advance, time: () => t };
}

describe("command debounce", () => {
  it("sends at most one command per 50 ms, keeping the newest", () => {
    const { client, sockets, advance } = harness();
    client.connect();
    sockets[0]!.onopen?.();

    client.sendCommand(0.1); // immediate
    client.sendCommand(0.2); // queued
    client.sendCommand(0.3); // replaces 0.2
    expect(sockets[0]!.sent).toEqual([JSON.stringify({ type: "command", vx: 0.1 })]);

    advance(COMMAND_INTERVAL_MS);
    expect(sockets[0]!.sent).toHaveLength(2);
    expect(JSON.parse(sockets[0]!.sent[1]!)).toEqual({
      type: "command",
      vx: 0.3,
    });
  });

  it("a burst of N commands yields at most N/20Hz-window sends", () => {
    const { client, sockets, advance } = harness();
    client.connect();
    sockets[0]!.onopen?.();
    for (let k = 0; k < 100; k += 1) {
      client.sendCommand(k / 100);
      advance(5); // 200 Hz input
    }
    advance(COMMAND_INTERVAL_MS);
    // 500 ms of input at a 50 ms floor -> no more than 11 sends
    expect(sockets[0]!.sent.length).toBeLessThanOrEqual(11);
  });

  it("clamps slider values before sending", () => {
    const { client, sockets } = harness();
    client.connect();
    sockets[0]!.onopen?.();
    client.sendCommand(5);
    expect(JSON.parse(sockets[0]!.sent[0]!)).toEqual({
      type: "command",
      vx: 1.0,
    });
  });
});

describe("reconnect backoff", () => {
  it("retries with exponential delays after a drop", () => {
    const { client, sockets, advance } = harness();
    client.connect();
    sockets[0]!.onopen?.();
    expect(client.model.connection).toBe("open");

    sockets[0]!.onclose?.(); // server drop
    expect(client.model.connection).toBe("closed");
    expect(sockets).toHaveLength(1);

    advance(BACKOFF_BASE_MS);
    expect(sockets).toHaveLength(2); // first retry after 500 ms
    sockets[1]!.onclose?.();
    advance(BACKOFF_BASE_MS); // second retry needs 1000 ms
    expect(sockets).toHaveLength(2);
    advance(BACKOFF_BASE_MS);
    expect(sockets).toHaveLength(3);

    sockets[2]!.onopen?.();
    expect(client.model.connection).toBe("open");
    expect(client.reconnectAttempts).toBe(0);
  });

  it("does not retry after a user close", () => {
    const { client, sockets, advance } = harness();
    client.connect();
    sockets[0]!.onopen?.();
    client.close();
    advance(60000);
    expect(sockets).toHaveLength(1);
  });
});

describe("other outbound paths", () => {
  it("reset, pause and override messages conform to the schema", () => {
    const { client, sockets } = harness();
    client.connect();
    sockets[0]!.onopen?.();
    client.sendReset("stairs-up", 4);
    client.sendPause();
    client.sendFreqOverride(1.2);
    client.sendFreqOverride(null);
    expect(sockets[0]!.sent.map((s) => JSON.parse(s))).toEqual([
      { type: "reset", terrain: "stairs-up", level: 4 },
      { type: "pause" },
      { type: "freq_override", f: 1.2 },
      { type: "freq_override", f: null },
    ]);
    expect(client.model.paused).toBe(true);
  });

  it("inbound frames reach the model", () => {
    const { client, sockets } = harness();
    client.connect();
    sockets[0]!.onopen?.();
    sockets[0]!.onmessage?.({
      data: JSON.stringify({ type: "event", kind: "fell", detail: "x" }),
    });
    client.model.drain();
    expect(client.model.lastEvent?.kind).toBe("fell");
  });
});
