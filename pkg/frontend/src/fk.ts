/**
 * Planar forward kinematics for drawing the robot skeleton. Mirrors the
 * simulator's link geometry: torso 0.5 m up from the base, 0.4 m thigh and
 * shank per leg hinged at the base, and a foot segment from heel (-0.05 m)
 * to toe (+0.15 m) along the foot axis, with the sole 0.08 m below it.
 */
export const L_TORSO = 0.5;
export const L_THIGH = 0.4;
export const L_SHANK = 0.4;
export const HEEL_OFFSET = -0.05;
export const TOE_OFFSET = 0.15;
export const SOLE_DROP = 0.08;

export type Pt = [number, number];

export interface Skeleton {
  torso: [Pt, Pt];
  /** per leg: hip -> knee -> ankle */
  legs: [Pt, Pt, Pt][];
  /** per leg: heel -> toe along the sole contact line */
  soles: [Pt, Pt][];
}

const down = (a: number): Pt => [Math.sin(a), -Math.cos(a)];
const axis = (a: number): Pt => [Math.cos(a), Math.sin(a)];

export function skeleton(
  baseX: number,
  baseZ: number,
  pitch: number,
  joints: number[],
): Skeleton {
  const hip: Pt = [baseX, baseZ];
  const top: Pt = [baseX - L_TORSO * Math.sin(pitch), baseZ + L_TORSO * Math.cos(pitch)];
  const legs: [Pt, Pt, Pt][] = [];
  const soles: [Pt, Pt][] = [];
  for (let leg = 0; leg < 2; leg += 1) {
    const [hipQ, kneeQ, ankQ] = [
      joints[3 * leg]!,
      joints[3 * leg + 1]!,
      joints[3 * leg + 2]!,
    ];
    const aThigh = pitch + hipQ;
    const aShank = aThigh + kneeQ;
    const aFoot = aShank + ankQ;
    const d1 = down(aThigh);
    const d2 = down(aShank);
    const knee: Pt = [hip[0] + L_THIGH * d1[0], hip[1] + L_THIGH * d1[1]];
    const ankle: Pt = [knee[0] + L_SHANK * d2[0], knee[1] + L_SHANK * d2[1]];
    legs.push([hip, knee, ankle]);
    const f = axis(aFoot);
    const g: Pt = [-f[1], f[0]]; // perpendicular (local "up" of the foot)
    const solePt = (along: number): Pt => [
      ankle[0] + along * f[0] - SOLE_DROP * g[0],
      ankle[1] + along * f[1] - SOLE_DROP * g[1],
    ];
    soles.push([solePt(HEEL_OFFSET), solePt(TOE_OFFSET)]);
  }
  return { torso: [hip, top], legs, soles };
}
