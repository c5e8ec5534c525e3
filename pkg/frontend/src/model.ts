/**
 * Session model: a pure reducer over (inbound messages, operator input).
 * Rendering reads only this model, so replaying a recorded message log
 * reproduces identical render states.
 */
import {
  COMMAND_MAX,
  FREQ_MAX,
  FREQ_MIN,
  InboundMsg,
  StateMsg,
  parseInbound,
} from "./schema.js";

export const BUFFER_SECONDS = 10;
export const VX_STEP = 0.1;

export type ConnectionState = "connecting" | "open" | "closed";

export interface TracePoint {
  t: number;
  vcmd: number;
  freq: number;
  phase: number;
  baseX: number;
}

export interface BannerEvent {
  kind: "fell" | "reset" | "error";
  detail: string;
  t: number;
}

export class SessionModel {
  connection: ConnectionState = "connecting";
  latest: StateMsg | null = null;
  trace: TracePoint[] = [];
  lastEvent: BannerEvent | null = null;
  droppedMessages = 0;
  /** Operator inputs (what the UI intends, not yet echoed by the server). */
  targetVx = 0;
  overrideF: number | null = null;
  paused = false;

  private queue: InboundMsg[] = [];

  setConnection(state: ConnectionState): void {
    this.connection = state;
    if (state !== "open") this.queue = [];
  }

  /** Validate and enqueue one raw frame; malformed frames are counted. */
  receive(raw: string): void {
    const msg = parseInbound(raw);
    if (msg === null) {
      this.droppedMessages += 1;
      return;
    }
    this.queue.push(msg);
  }

  /**
   * Apply queued messages once per animation frame: state messages are
   * coalesced to the newest one (all still enter the trace buffer), events
   * are applied in order.
   */
  drain(): void {
    let newestState: StateMsg | null = null;
    for (const msg of this.queue) {
      if (msg.type === "state") {
        newestState = msg;
        this.pushTrace(msg);
      } else {
        this.lastEvent = { kind: msg.kind, detail: msg.detail, t: Date.now() };
      }
    }
    this.queue = [];
    if (newestState !== null) this.latest = newestState;
  }

  private pushTrace(msg: StateMsg): void {
    const point: TracePoint = {
      t: msg.t,
      vcmd: msg.vcmd,
      freq: msg.freq,
      phase: msg.phase,
      baseX: msg.base.x,
    };
    // a reset rewinds simulation time; drop the stale buffer
    const last = this.trace[this.trace.length - 1];
    if (last !== undefined && point.t < last.t) this.trace = [];
    this.trace.push(point);
    const cutoff = point.t - BUFFER_SECONDS;
    let start = 0;
    while (start < this.trace.length && this.trace[start]!.t < cutoff) {
      start += 1;
    }
    if (start > 0) this.trace = this.trace.slice(start);
  }

  setTargetVx(vx: number): number {
    this.targetVx = Math.min(COMMAND_MAX, Math.max(-COMMAND_MAX, vx));
    return this.targetVx;
  }

  nudgeVx(direction: 1 | -1): number {
    // keyboard steering: one step per arrow-key press
    return this.setTargetVx(
      Math.round((this.targetVx + direction * VX_STEP) * 10) / 10,
    );
  }

  setOverrideF(f: number | null): number | null {
    this.overrideF =
      f === null ? null : Math.min(FREQ_MAX, Math.max(FREQ_MIN, f));
    return this.overrideF;
  }

  togglePause(): boolean {
    this.paused = !this.paused;
    return this.paused;
  }
}
