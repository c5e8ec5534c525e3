/**
 * WebSocket client: schema-enforced sends, a 20 Hz debounce on velocity
 * commands, and automatic reconnection with exponential backoff.
 */
import { OutboundMsg, encodeOutbound } from "./schema.js";
import { SessionModel } from "./model.js";

export const COMMAND_INTERVAL_MS = 50; // 20 Hz ceiling on command sends
export const BACKOFF_BASE_MS = 500;
export const BACKOFF_MAX_MS = 8000;

/** Subset of the WebSocket API the client uses (injectable for tests). */
export interface WsLike {
  send(data: string): void;
  close(): void;
  onopen: ((ev?: unknown) => void) | null;
  onclose: ((ev?: unknown) => void) | null;
  onmessage: ((ev: { data: string }) => void) | null;
  onerror: ((ev?: unknown) => void) | null;
}

export type WsFactory = (url: string) => WsLike;

export interface ClientOptions {
  wsFactory?: WsFactory;
  setTimer?: (fn: () => void, ms: number) => unknown;
  clearTimer?: (handle: unknown) => void;
  now?: () => number;
}

export class TeleopClient {
  readonly model: SessionModel;
  private ws: WsLike | null = null;
  private attempts = 0;
  private pendingVx: number | null = null;
  private lastCommandAt = -Infinity;
  private commandTimer: unknown = null;
  private closedByUser = false;

  private readonly wsFactory: WsFactory;
  private readonly setTimer: (fn: () => void, ms: number) => unknown;
  private readonly clearTimer: (handle: unknown) => void;
  private readonly now: () => number;

  constructor(
    private readonly url: string,
    model?: SessionModel,
    opts: ClientOptions = {},
  ) {
    this.model = model ?? new SessionModel();
    this.wsFactory = opts.wsFactory ?? ((u) => new WebSocket(u) as WsLike);
    this.setTimer = opts.setTimer ?? ((fn, ms) => setTimeout(fn, ms));
    this.clearTimer = opts.clearTimer ?? ((h) => clearTimeout(h as number));
    this.now = opts.now ?? (() => Date.now());
  }

  connect(): void {
    this.closedByUser = false;
    this.model.setConnection("connecting");
    this.ws = this.wsFactory(this.url);
    this.ws.onopen = () => {
      this.attempts = 0;
      this.model.setConnection("open");
    };
    this.ws.onmessage = (ev) => this.model.receive(ev.data);
    this.ws.onerror = () => {};
    this.ws.onclose = () => {
      this.ws = null;
      this.model.setConnection("closed");
      if (!this.closedByUser) this.scheduleReconnect();
    };
  }

  close(): void {
    this.closedByUser = true;
    this.ws?.close();
    this.ws = null;
    this.model.setConnection("closed");
  }

  private scheduleReconnect(): void {
    const delay = Math.min(
      BACKOFF_MAX_MS,
      BACKOFF_BASE_MS * 2 ** this.attempts,
    );
    this.attempts += 1;
    this.setTimer(() => {
      if (!this.closedByUser) this.connect();
    }, delay);
  }

  /** Current reconnect attempt count (for the UI banner). */
  get reconnectAttempts(): number {
    return this.attempts;
  }

  private sendRaw(msg: OutboundMsg): boolean {
    if (this.ws === null || this.model.connection !== "open") return false;
    this.ws.send(encodeOutbound(msg));
    return true;
  }

  /**
   * Debounced velocity command: sends immediately when the 50 ms window
   * is free, otherwise keeps only the newest value and flushes it when
   * the window expires.
   */
  sendCommand(vx: number): void {
    const clamped = this.model.setTargetVx(vx);
    const elapsed = this.now() - this.lastCommandAt;
    if (elapsed >= COMMAND_INTERVAL_MS) {
      this.lastCommandAt = this.now();
      this.sendRaw({ type: "command", vx: clamped });
      return;
    }
    this.pendingVx = clamped;
    if (this.commandTimer === null) {
      this.commandTimer = this.setTimer(() => {
        this.commandTimer = null;
        if (this.pendingVx !== null) {
          const v = this.pendingVx;
          this.pendingVx = null;
          this.lastCommandAt = this.now();
          this.sendRaw({ type: "command", vx: v });
        }
      }, COMMAND_INTERVAL_MS - elapsed);
    }
  }

  sendReset(terrain: string, level: number): void {
    this.sendRaw({ type: "reset", terrain, level });
  }

  sendPause(): void {
    this.model.togglePause();
    this.sendRaw({ type: "pause" });
  }

  sendFreqOverride(f: number | null): void {
    const clamped = this.model.setOverrideF(f);
    this.sendRaw({ type: "freq_override", f: clamped });
  }
}
