/**
 * 2-D canvas renderer: side view of the robot and terrain, height-strip
 * overlay (raw holes hatched vs. reconstructed), a phase dial, and a
 * 10-second sparkline of commanded velocity vs. gait frequency.
 *
 * The renderer is a pure function of the session model; it draws through
 * a narrow Ctx2D interface so tests can use a recording stub.
 */
import { SessionModel, TracePoint } from "./model.js";
import { STRIP_CELLS } from "./schema.js";
import { skeleton } from "./fk.js";

/** Subset of CanvasRenderingContext2D the renderer needs. */
export interface Ctx2D {
  fillStyle: string | CanvasGradient | CanvasPattern;
  strokeStyle: string | CanvasGradient | CanvasPattern;
  lineWidth: number;
  font: string;
  clearRect(x: number, y: number, w: number, h: number): void;
  fillRect(x: number, y: number, w: number, h: number): void;
  strokeRect(x: number, y: number, w: number, h: number): void;
  beginPath(): void;
  moveTo(x: number, y: number): void;
  lineTo(x: number, y: number): void;
  arc(x: number, y: number, r: number, a0: number, a1: number): void;
  stroke(): void;
  fill(): void;
  fillText(text: string, x: number, y: number): void;
}

export interface Viewport {
  width: number;
  height: number;
}

const SCENE_METERS = 5.0; // horizontal span of the side view
const STRIP_SPAN = 1.2; // meters covered by the 25-cell strip
const TERRAIN_RES = 0.05;

interface Camera {
  px: (x: number) => number;
  py: (z: number) => number;
}

function camera(model: SessionModel, vp: Viewport): Camera {
  const s = model.latest!;
  const scale = vp.width / SCENE_METERS;
  const cx = s.base.x;
  const cz = s.base.z - 0.4;
  return {
    px: (x) => vp.width / 2 + (x - cx) * scale,
    py: (z) => vp.height * 0.62 - (z - cz) * scale,
  };
}

function drawTerrain(ctx: Ctx2D, model: SessionModel, cam: Camera): void {
  const s = model.latest!;
  const window = s.terrain_window;
  const x0 = s.base.x - ((window.length - 1) / 2) * TERRAIN_RES;
  ctx.strokeStyle = "#7c5a3a";
  ctx.lineWidth = 2;
  ctx.beginPath();
  window.forEach((h, i) => {
    const px = cam.px(x0 + i * TERRAIN_RES);
    const py = cam.py(h);
    if (i === 0) ctx.moveTo(px, py);
    else ctx.lineTo(px, py);
  });
  ctx.stroke();
}

function drawRobot(ctx: Ctx2D, model: SessionModel, cam: Camera): void {
  const s = model.latest!;
  const sk = skeleton(s.base.x, s.base.z, s.base.pitch, s.joints);
  ctx.lineWidth = 3;
  const polyline = (pts: [number, number][], color: string) => {
    ctx.strokeStyle = color;
    ctx.beginPath();
    pts.forEach(([x, z], i) => {
      if (i === 0) ctx.moveTo(cam.px(x), cam.py(z));
      else ctx.lineTo(cam.px(x), cam.py(z));
    });
    ctx.stroke();
  };
  polyline(sk.torso, "#222");
  sk.legs.forEach((leg, i) => polyline(leg, i === 0 ? "#c0392b" : "#2980b9"));
  sk.soles.forEach((sole, i) =>
    polyline(sole, i === 0 ? "#c0392b" : "#2980b9"),
  );
  // contact markers under the reported foot points
  s.feet.forEach((foot) => {
    if (!foot.contact) return;
    ctx.fillStyle = "#27ae60";
    ctx.beginPath();
    ctx.arc(cam.px(foot.x), cam.py(foot.z), 4, 0, 2 * Math.PI);
    ctx.fill();
  });
}

function drawStrip(ctx: Ctx2D, model: SessionModel, vp: Viewport): void {
  const s = model.latest!;
  const w = vp.width * 0.5;
  const x0 = vp.width * 0.25;
  const y0 = vp.height - 58;
  const cellW = w / STRIP_CELLS;
  const zScale = 18; // px per meter of strip height, drawn around the midline
  const rows: Array<[Array<number | null>, number, string]> = [
    [s.hmap_raw, y0, "#999"],
    [s.hmap_recon, y0 + 26, "#2980b9"],
  ];
  for (const [cells, rowY, color] of rows) {
    for (let i = 0; i < STRIP_CELLS; i += 1) {
      const v = cells[i];
      const px = x0 + i * cellW;
      if (v === null || v === undefined) {
        // hatched hole cell
        ctx.strokeStyle = "#d35400";
        ctx.lineWidth = 1;
        ctx.beginPath();
        ctx.moveTo(px, rowY + 8);
        ctx.lineTo(px + cellW, rowY - 8);
        ctx.stroke();
        ctx.strokeRect(px, rowY - 8, cellW, 16);
      } else {
        ctx.fillStyle = color;
        const h = Math.max(-0.4, Math.min(0.4, v)) * zScale;
        ctx.fillRect(px, rowY - h, cellW - 1, Math.max(2, Math.abs(h)));
      }
    }
  }
  ctx.fillStyle = "#555";
  ctx.font = "10px sans-serif";
  ctx.fillText("strip raw / recon (±" + STRIP_SPAN / 2 + " m)", x0, y0 - 14);
}

function drawPhaseDial(ctx: Ctx2D, model: SessionModel, vp: Viewport): void {
  const s = model.latest!;
  const cx = vp.width - 44;
  const cy = 44;
  const r = 22;
  ctx.strokeStyle = "#888";
  ctx.lineWidth = 2;
  ctx.beginPath();
  ctx.arc(cx, cy, r, 0, 2 * Math.PI);
  ctx.stroke();
  const a = 2 * Math.PI * s.phase - Math.PI / 2;
  ctx.strokeStyle = "#8e44ad";
  ctx.beginPath();
  ctx.moveTo(cx, cy);
  ctx.lineTo(cx + r * Math.cos(a), cy + r * Math.sin(a));
  ctx.stroke();
  ctx.fillStyle = "#555";
  ctx.font = "10px sans-serif";
  ctx.fillText(`f=${s.freq.toFixed(2)} Hz`, cx - r, cy + r + 12);
}

function drawSparkline(ctx: Ctx2D, trace: TracePoint[], vp: Viewport): void {
  if (trace.length < 2) return;
  const w = vp.width * 0.4;
  const h = 48;
  const x0 = 10;
  const y0 = 16;
  const t0 = trace[0]!.t;
  const t1 = trace[trace.length - 1]!.t;
  const span = Math.max(t1 - t0, 1e-6);
  ctx.strokeStyle = "#ccc";
  ctx.lineWidth = 1;
  ctx.strokeRect(x0, y0, w, h);
  const line = (get: (p: TracePoint) => number, lo: number, hi: number,
                color: string) => {
    ctx.strokeStyle = color;
    ctx.beginPath();
    trace.forEach((p, i) => {
      const px = x0 + ((p.t - t0) / span) * w;
      const py = y0 + h - ((get(p) - lo) / (hi - lo)) * h;
      if (i === 0) ctx.moveTo(px, py);
      else ctx.lineTo(px, py);
    });
    ctx.stroke();
  };
  line((p) => p.vcmd, -1.0, 1.0, "#27ae60");
  line((p) => p.freq, 0.6, 1.4, "#8e44ad");
  ctx.fillStyle = "#555";
  ctx.font = "10px sans-serif";
  ctx.fillText("vcmd (green) / f (purple), last 10 s", x0 + 4, y0 + h + 12);
}

function drawHud(ctx: Ctx2D, model: SessionModel, vp: Viewport): void {
  ctx.fillStyle = "#333";
  ctx.font = "12px sans-serif";
  const s = model.latest;
  const parts = [
    `conn: ${model.connection}`,
    s ? `t=${s.t.toFixed(2)}s` : "no state yet",
    s ? `vcmd=${s.vcmd.toFixed(2)}` : "",
    `target=${model.targetVx.toFixed(2)}`,
    model.overrideF === null ? "" : `override f=${model.overrideF.toFixed(2)}`,
    model.paused ? "PAUSED" : "",
    model.droppedMessages ? `dropped=${model.droppedMessages}` : "",
  ].filter((p) => p.length > 0);
  ctx.fillText(parts.join("  |  "), 10, vp.height - 8);
  if (model.lastEvent !== null && Date.now() - model.lastEvent.t < 3000) {
    ctx.fillStyle = model.lastEvent.kind === "error" ? "#c0392b" : "#2c3e50";
    ctx.fillText(
      `[${model.lastEvent.kind}] ${model.lastEvent.detail}`,
      vp.width / 2 - 60,
      16,
    );
  }
}

/** Draw one frame; safe to call with no state received yet. */
export function render(ctx: Ctx2D, model: SessionModel, vp: Viewport): void {
  ctx.clearRect(0, 0, vp.width, vp.height);
  ctx.fillStyle = "#f7f5f0";
  ctx.fillRect(0, 0, vp.width, vp.height);
  if (model.latest !== null) {
    const cam = camera(model, vp);
    drawTerrain(ctx, model, cam);
    drawRobot(ctx, model, cam);
    drawStrip(ctx, model, vp);
    drawPhaseDial(ctx, model, vp);
  }
  drawSparkline(ctx, model.trace, vp);
  drawHud(ctx, model, vp);
}
