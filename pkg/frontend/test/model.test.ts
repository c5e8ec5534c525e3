import { describe, expect, it } from "vitest";

import { BUFFER_SECONDS, SessionModel } from "../src/model.js";
import { StateMsg } from "../src/schema.js";

function stateMsg(t: number, over: Partial<StateMsg> = {}): string {
  const base: StateMsg = {
    type: "state",
    t,
    base: { x: 0.1 * t, z: 0.85, pitch: 0 },
    joints: [0.3, -0.6, 0.3, 0.3, -0.6, 0.3],
    feet: [
      { x: 0, z: 0, contact: true },
      { x: 0.2, z: 0, contact: false },
    ],
    phase: t % 1,
    freq: 1.0,
    vcmd: 0.4,
    terrain_window: [0, 0, 0],
    hmap_raw: Array(25).fill(0),
    hmap_recon: Array(25).fill(0),
    reward_total: 0.5,
    config_hash: "h",
  };
  return JSON.stringify({ ...base, ...over });
}

describe("message intake", () => {
  it("counts malformed frames instead of throwing", () => {
    const m = new SessionModel();
    m.receive("garbage");
    m.receive('{"type": "state"}');
    m.drain();
    expect(m.droppedMessages).toBe(2);
    expect(m.latest).toBeNull();
  });

  it("coalesces queued states to the newest per drain", () => {
    const m = new SessionModel();
    m.receive(stateMsg(0.1));
    m.receive(stateMsg(0.2));
    m.receive(stateMsg(0.3));
    m.drain();
    expect(m.latest?.t).toBe(0.3);
    // all frames still reach the trace buffer
    expect(m.trace.map((p) => p.t)).toEqual([0.1, 0.2, 0.3]);
  });

  it("applies events in order and keeps the last", () => {
    const m = new SessionModel();
    m.receive(JSON.stringify({ type: "event", kind: "fell", detail: "a" }));
    m.receive(JSON.stringify({ type: "event", kind: "reset", detail: "b" }));
    m.drain();
    expect(m.lastEvent?.kind).toBe("reset");
  });
});

describe("trace buffer", () => {
  it("stays time-ordered and trimmed to the window", () => {
    const m = new SessionModel();
    for (let k = 0; k <= 300; k += 1) {
      m.receive(stateMsg(k * 0.05));
      m.drain();
    }
    const ts = m.trace.map((p) => p.t);
    expect(ts).toEqual([...ts].sort((a, b) => a - b));
    const span = ts[ts.length - 1]! - ts[0]!;
    expect(span).toBeLessThanOrEqual(BUFFER_SECONDS + 1e-9);
    expect(span).toBeGreaterThan(BUFFER_SECONDS - 0.5);
  });

  it("clears when simulation time rewinds (reset)", () => {
    const m = new SessionModel();
    m.receive(stateMsg(5.0));
    m.drain();
    m.receive(stateMsg(0.02));
    m.drain();
    expect(m.trace.map((p) => p.t)).toEqual([0.02]);
  });
});

describe("operator input", () => {
  it("clamps the vx slider to the command range", () => {
    const m = new SessionModel();
    expect(m.setTargetVx(3)).toBe(1.0);
    expect(m.setTargetVx(-3)).toBe(-1.0);
    expect(m.setTargetVx(0.45)).toBe(0.45);
  });

  it("arrow keys step vx by 0.1 within the range", () => {
    const m = new SessionModel();
    expect(m.nudgeVx(1)).toBeCloseTo(0.1, 10);
    expect(m.nudgeVx(1)).toBeCloseTo(0.2, 10);
    expect(m.nudgeVx(-1)).toBeCloseTo(0.1, 10);
    for (let i = 0; i < 20; i += 1) m.nudgeVx(1);
    expect(m.targetVx).toBe(1.0);
  });

  it("clamps the frequency override and allows clearing", () => {
    const m = new SessionModel();
    expect(m.setOverrideF(9)).toBe(1.3);
    expect(m.setOverrideF(0.1)).toBe(0.7);
    expect(m.setOverrideF(null)).toBeNull();
  });
});

describe("replay determinism", () => {
  it("the same message log yields identical model state", () => {
    const log: string[] = [];
    for (let k = 0; k < 50; k += 1) log.push(stateMsg(k * 0.04));
    log.splice(20, 0, JSON.stringify({ type: "event", kind: "fell", detail: "x" }));
    log.splice(30, 0, "malformed");

    const run = () => {
      const m = new SessionModel();
      for (const raw of log) {
        m.receive(raw);
        m.drain();
      }
      return m;
    };
    const a = run();
    const b = run();
    expect(a.latest).toEqual(b.latest);
    expect(a.trace).toEqual(b.trace);
    expect(a.droppedMessages).toBe(b.droppedMessages);
    expect(a.lastEvent?.kind).toBe(b.lastEvent?.kind);
  });
});
