/** DOM wiring for the teleop console. */
import { TeleopClient } from "./client.js";
import { render } from "./render.js";

function byId<T extends HTMLElement>(id: string): T {
  const el = document.getElementById(id);
  if (el === null) throw new Error(`missing element #${id}`);
  return el as T;
}

export function start(url?: string): TeleopClient {
  const canvas = byId<HTMLCanvasElement>("scene");
  const ctx = canvas.getContext("2d");
  if (ctx === null) throw new Error("2d canvas unavailable");

  const target =
    url ?? `ws://${window.location.host || "127.0.0.1:8787"}/ws`;
  const client = new TeleopClient(target);
  const model = client.model;
  client.connect();

  const slider = byId<HTMLInputElement>("vx");
  const vxLabel = byId<HTMLSpanElement>("vx-label");
  slider.addEventListener("input", () => {
    client.sendCommand(parseFloat(slider.value));
    vxLabel.textContent = model.targetVx.toFixed(1);
  });

  window.addEventListener("keydown", (ev) => {
    if (ev.key === "ArrowUp" || ev.key === "ArrowRight") {
      client.sendCommand(model.targetVx + 0.1);
    } else if (ev.key === "ArrowDown" || ev.key === "ArrowLeft") {
      client.sendCommand(model.targetVx - 0.1);
    } else if (ev.key === " ") {
      client.sendPause();
      ev.preventDefault();
    } else {
      return;
    }
    slider.value = String(model.targetVx);
    vxLabel.textContent = model.targetVx.toFixed(1);
  });

  byId<HTMLButtonElement>("reset").addEventListener("click", () => {
    const terrain = byId<HTMLSelectElement>("terrain").value;
    const level = parseInt(byId<HTMLInputElement>("level").value, 10) || 0;
    client.sendReset(terrain, level);
  });
  byId<HTMLButtonElement>("pause").addEventListener("click", () =>
    client.sendPause(),
  );

  const freq = byId<HTMLInputElement>("freq");
  const freqOn = byId<HTMLInputElement>("freq-on");
  const pushOverride = () => {
    client.sendFreqOverride(freqOn.checked ? parseFloat(freq.value) : null);
  };
  freq.addEventListener("input", pushOverride);
  freqOn.addEventListener("change", pushOverride);

  const vp = { width: canvas.width, height: canvas.height };
  const frame = () => {
    model.drain();
    render(ctx, model, vp);
    requestAnimationFrame(frame);
  };
  requestAnimationFrame(frame);
  return client;
}

if (typeof document !== "undefined" && document.getElementById("scene")) {
  start();
}
