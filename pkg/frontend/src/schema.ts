/**
 * Wire schema for the teleop WebSocket bridge. Every inbound message is
 * validated before it reaches the session model, and every outbound
 * message is validated before send.
 */
import { z } from "zod";

export const COMMAND_MAX = 1.0;
export const FREQ_MIN = 0.7;
export const FREQ_MAX = 1.3;
export const STRIP_CELLS = 25;

const finite = z.number().finite();

export const footSchema = z
  .object({ x: finite, z: finite, contact: z.boolean() })
  .strict();

export const stateSchema = z
  .object({
    type: z.literal("state"),
    t: finite.nonnegative(),
    base: z.object({ x: finite, z: finite, pitch: finite }).strict(),
    joints: z.array(finite).length(6),
    feet: z.array(footSchema).length(2),
    phase: finite.gte(0).lt(1),
    freq: finite,
    vcmd: finite.gte(-COMMAND_MAX).lte(COMMAND_MAX),
    terrain_window: z.array(finite),
    hmap_raw: z.array(finite.nullable()).length(STRIP_CELLS),
    hmap_recon: z.array(finite).length(STRIP_CELLS),
    reward_total: finite,
    config_hash: z.string(),
  })
  .strict();

export const eventSchema = z
  .object({
    type: z.literal("event"),
    kind: z.enum(["fell", "reset", "error"]),
    detail: z.string(),
  })
  .strict();

export const inboundSchema = z.discriminatedUnion("type", [
  stateSchema,
  eventSchema,
]);

export const commandSchema = z
  .object({
    type: z.literal("command"),
    vx: finite.gte(-COMMAND_MAX).lte(COMMAND_MAX),
  })
  .strict();

export const resetSchema = z
  .object({
    type: z.literal("reset"),
    terrain: z.string(),
    level: z.number().int().gte(0),
  })
  .strict();

export const pauseSchema = z.object({ type: z.literal("pause") }).strict();

export const freqOverrideSchema = z
  .object({
    type: z.literal("freq_override"),
    f: finite.gte(FREQ_MIN).lte(FREQ_MAX).nullable(),
  })
  .strict();

export const outboundSchema = z.discriminatedUnion("type", [
  commandSchema,
  resetSchema,
  pauseSchema,
  freqOverrideSchema,
]);

export type StateMsg = z.infer<typeof stateSchema>;
export type EventMsg = z.infer<typeof eventSchema>;
export type InboundMsg = z.infer<typeof inboundSchema>;
export type OutboundMsg = z.infer<typeof outboundSchema>;

/** Parse an inbound frame; returns null on any malformed input. */
export function parseInbound(raw: string): InboundMsg | null {
  let doc: unknown;
  try {
    doc = JSON.parse(raw);
  } catch {
    return null;
  }
  const res = inboundSchema.safeParse(doc);
  return res.success ? res.data : null;
}

/** Serialize an outbound message, enforcing the schema first. */
export function encodeOutbound(msg: OutboundMsg): string {
  return JSON.stringify(outboundSchema.parse(msg));
}
