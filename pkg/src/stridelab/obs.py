"""Observation assembly: proprioceptive, privileged, history, depth scan.

Everything here is a pure function of the batched simulator state (plus an
explicit RNG where noise is involved), vectorized over environments.
"""

import numpy as np
from dataclasses import dataclass

from . import sim

PROPRIO_DIM = 25
PRIV_DIM = 19
HISTORY_LEN = 5
HISTORY_DIM = HISTORY_LEN * PROPRIO_DIM

STRIP_CELLS = 25
STRIP_HALF_SPAN = 0.6          # strip covers [-0.6, +0.6] m around base x

N_RAYS = 41
RAY_SPACING = 0.05             # ground footprints span [-1.0, +1.0] m
LEG_CAPSULE_RADIUS = 0.03
NEAR_CLIP = 0.15               # camera minimum range: thighs hug the mount

COMMAND_MAX = 1.0
COMMAND_HOLD = 10.0            # seconds between resamples
STAND_PROB = 0.1

FOOT_HEIGHT_FLOOR = -0.02      # penetration tolerance in privileged obs

# slices into the flat proprio vector
P_COMMAND = slice(0, 1)
P_PITCH_RATE = slice(1, 2)
P_GRAVITY = slice(2, 4)
P_JOINT_POS = slice(4, 10)
P_JOINT_VEL = slice(10, 16)
P_PREV_ACTION = slice(16, 22)
P_GAIT = slice(22, 25)         # (f_t, sin 2*pi*phi, cos 2*pi*phi)


def assemble_proprio(state, command, prev_action, phase, freq):
    """Flat proprio observation (N, 25).

    `prev_action` is the previous joint-target action (N, 6); `phase` and
    `freq` are the current gait phase in [0, 1) and the filtered frequency.
    """
    n = state.n_envs
    out = np.zeros((n, PROPRIO_DIM))
    out[:, P_COMMAND] = np.asarray(command).reshape(n, 1)
    out[:, P_PITCH_RATE] = state.qd[:, sim.PITCH, None]
    pitch = state.q[:, sim.PITCH]
    out[:, P_GRAVITY] = np.stack([np.sin(pitch), np.cos(pitch)], axis=1)
    out[:, P_JOINT_POS] = state.q[:, sim.JOINT_SLICE]
    out[:, P_JOINT_VEL] = state.qd[:, sim.JOINT_SLICE]
    out[:, P_PREV_ACTION] = prev_action
    out[:, 22] = freq
    out[:, 23] = np.sin(2.0 * np.pi * phase)
    out[:, 24] = np.cos(2.0 * np.pi * phase)
    return out


def assemble_priv(state, bank):
    """Privileged observation (N, 19): exact quantities from the simulator.

    Layout: base velocity (v_x, v_z), joint torques (6), joint
    accelerations (6), per-foot normal force (2), foot heights above local
    terrain (2), base height above mean foot height (1).
    """
    n = state.n_envs
    out = np.zeros((n, PRIV_DIM))
    out[:, 0] = state.qd[:, sim.X]
    out[:, 1] = state.qd[:, sim.Z]
    out[:, 2:8] = state.tau
    out[:, 8:14] = state.qdd[:, sim.JOINT_SLICE]
    fz = state.contact_forces[:, :, 1]
    out[:, 14] = fz[:, 0] + fz[:, 1]
    out[:, 15] = fz[:, 2] + fz[:, 3]
    foot_x = state.foot_pos[:, :, 0]
    ground = bank.height_at_many(foot_x)
    foot_h = state.foot_pos[:, :, 1] - ground
    np.clip(foot_h, FOOT_HEIGHT_FLOOR, None, out=foot_h)
    out[:, 16:18] = foot_h
    out[:, 18] = state.q[:, sim.Z] - state.foot_pos[:, :, 1].mean(axis=1)
    return out


class ObsHistory:
    """Ring of the H most recent proprio frames, flattened oldest-first."""

    def __init__(self, n_envs):
        self.buf = np.zeros((n_envs, HISTORY_LEN, PROPRIO_DIM))

    def reset(self, frame, env_mask=None):
        """Pre-fill every slot with the first frame after reset."""
        if env_mask is None:
            self.buf[:] = frame[:, None, :]
        else:
            self.buf[env_mask] = frame[env_mask, None, :]

    def push(self, frame):
        self.buf[:, :-1] = self.buf[:, 1:]
        self.buf[:, -1] = frame

    def flat(self):
        return self.buf.reshape(self.buf.shape[0], HISTORY_DIM)


def _segment_points(kin):
    """Leg link segments per env: (N, 6, 2, 2) endpoints for
    thigh/shank/foot of each leg."""
    n = kin.anchors.shape[0]
    seg = np.zeros((n, 6, 2, 2))
    for leg, (hip, knee, ank) in enumerate(
            [(sim.HIP_L, sim.KNEE_L, sim.ANK_L),
             (sim.HIP_R, sim.KNEE_R, sim.ANK_R)]):
        seg[:, 3 * leg + 0, 0] = kin.anchors[:, hip]
        seg[:, 3 * leg + 0, 1] = kin.anchors[:, knee]
        seg[:, 3 * leg + 1, 0] = kin.anchors[:, knee]
        seg[:, 3 * leg + 1, 1] = kin.anchors[:, ank]
        seg[:, 3 * leg + 2, 0] = kin.contacts[:, 2 * leg]
        seg[:, 3 * leg + 2, 1] = kin.contacts[:, 2 * leg + 1]
    return seg


def depth_scan(state, bank, model, n_samples=96, refine=25):
    """Downward depth scan with leg self-occlusion.

    Rays leave a camera mounted at CAMERA_MOUNT below the base and are aimed
    at the terrain surface points spanning +-1.0 m around base x. Returns
    (distances (N, 41), occluded (N, 41) bool, dirs (N, 41, 2)) where dirs
    are unit ray directions expressed in the base (body) frame, as a real
    depth sensor would report them. Distances are euclidean ray lengths to
    the first hit among terrain and 0.06 m wide leg capsules.
    """
    n = state.n_envs
    cam = state.q[:, 0:2] + np.asarray(sim.CAMERA_MOUNT)
    offsets = (np.arange(N_RAYS) - (N_RAYS - 1) / 2) * RAY_SPACING
    target_x = state.q[:, sim.X, None] + offsets          # (N, R)
    target_z = bank.height_at_many(target_x)

    dx = target_x - cam[:, 0:1]
    dz = target_z - cam[:, 1:2]
    t_target = np.sqrt(dx * dx + dz * dz)
    t_target = np.maximum(t_target, 1e-6)
    dirx, dirz = dx / t_target, dz / t_target

    # terrain hit: first crossing along the ray; the aimed point is on the
    # surface, so the hit parameter never exceeds t_target. Coarse sampling
    # followed by bisection.
    s = np.linspace(0.0, 1.0, n_samples)                  # (S,)
    px = cam[:, 0, None, None] + dirx[:, :, None] * (s * t_target[:, :, None])
    pz = cam[:, 1, None, None] + dirz[:, :, None] * (s * t_target[:, :, None])
    below = pz <= bank.height_at_many(px)                 # (N, R, S)
    below[:, :, -1] = True
    first = np.argmax(below, axis=2)                      # (N, R)
    hi = s[first] * t_target
    lo = s[np.maximum(first - 1, 0)] * t_target
    for _ in range(refine):
        mid = 0.5 * (lo + hi)
        mx = cam[:, 0:1] + dirx * mid
        mz = cam[:, 1:2] + dirz * mid
        under = mz <= bank.height_at_many(mx)
        hi = np.where(under, mid, hi)
        lo = np.where(under, lo, mid)
    t_hit = 0.5 * (lo + hi)

    # leg capsules: closest approach between each (truncated) ray and each
    # link segment; a pass within the capsule radius occludes the ray.
    kin = sim.kinematics(state.q, state.qd, model)
    seg = _segment_points(kin)                            # (N, 6, 2, 2)
    a = seg[:, None, :, 0]                                # (N, 1, 6, 2)
    b = seg[:, None, :, 1]
    d_ray = np.stack([dirx, dirz], axis=-1)[:, :, None]   # (N, R, 1, 2)
    o = cam[:, None, None]                                # (N, 1, 1, 2)

    u = b - a                                             # segment direction
    w0 = o - a
    uu = np.sum(u * u, axis=-1)
    ud = np.sum(u * d_ray, axis=-1)
    uw = np.sum(u * w0, axis=-1)
    dw = np.sum(d_ray * w0, axis=-1)
    denom = uu - ud * ud                                  # |d_ray| = 1
    denom = np.where(np.abs(denom) < 1e-12, 1e-12, denom)
    sc = np.clip((ud * dw - uw) / denom * -1.0, 0.0, 1.0)
    # closest ray parameter to the clamped segment point
    tc = np.sum((a + sc[..., None] * u - o) * d_ray, axis=-1)
    tc = np.clip(tc, 0.0, t_hit[:, :, None])
    closest = o + tc[..., None] * d_ray
    seg_pt = a + np.clip(np.sum((closest - a) * u, axis=-1)
                         / np.maximum(uu, 1e-12), 0.0, 1.0)[..., None] * u
    gap = np.linalg.norm(closest - seg_pt, axis=-1)       # (N, R, 6)
    hit_leg = gap < LEG_CAPSULE_RADIUS
    back = np.sqrt(np.maximum(LEG_CAPSULE_RADIUS ** 2 - gap ** 2, 0.0))
    t_entry = tc - back
    hit_leg &= t_entry > NEAR_CLIP
    t_leg = np.where(hit_leg, t_entry, np.inf).min(axis=2)

    occluded = t_leg < t_hit
    dist = np.where(occluded, t_leg, t_hit)

    # rotate world-frame directions into the body frame (undo base pitch)
    pitch = state.q[:, sim.PITCH]
    cp, sp = np.cos(pitch)[:, None], np.sin(pitch)[:, None]
    dirs = np.stack([cp * dirx + sp * dirz,
                     -sp * dirx + cp * dirz], axis=-1)
    return np.maximum(dist, 0.01), occluded, dirs


@dataclass
class NoiseModel:
    joint_pos: float = 0.01
    joint_vel: float = 0.5
    pitch_rate: float = 0.2
    gravity: float = 0.05
    heightmap: float = 0.02
    shift_prob: float = 0.1

    @classmethod
    def zero(cls):
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


def add_noise(proprio, noise: NoiseModel, rng):
    """Additive Gaussian noise per group; gravity re-normalized to the unit
    circle afterwards. Command, previous action and gait signals are exact."""
    out = proprio.copy()
    n = out.shape[0]
    out[:, P_PITCH_RATE] += noise.pitch_rate * rng.standard_normal((n, 1))
    out[:, P_GRAVITY] += noise.gravity * rng.standard_normal((n, 2))
    norm = np.linalg.norm(out[:, P_GRAVITY], axis=1, keepdims=True)
    out[:, P_GRAVITY] /= np.maximum(norm, 1e-9)
    out[:, P_JOINT_POS] += noise.joint_pos * rng.standard_normal((n, 6))
    out[:, P_JOINT_VEL] += noise.joint_vel * rng.standard_normal((n, 6))
    return out


def add_strip_noise(strip, noise: NoiseModel, rng):
    """Shift the strip by one cell with probability shift_prob (edge cells
    replicate), then add cell-wise Gaussian noise."""
    out = strip.copy()
    n = out.shape[0]
    do_shift = rng.random(n) < noise.shift_prob
    direction = np.where(rng.random(n) < 0.5, -1, 1)
    left = np.concatenate([out[:, :1], out[:, :-1]], axis=1)
    right = np.concatenate([out[:, 1:], out[:, -1:]], axis=1)
    shifted = np.where((direction == 1)[:, None], left, right)
    out = np.where(do_shift[:, None], shifted, out)
    out = out + noise.heightmap * rng.standard_normal(out.shape)
    return out


def sample_command(rng, n):
    """Uniform commanded velocity in [-1, 1] m/s; 10% stand (zero)."""
    v = rng.uniform(-COMMAND_MAX, COMMAND_MAX, size=n)
    v[rng.random(n) < STAND_PROB] = 0.0
    return v


class CommandSchedule:
    """Holds each environment's command for COMMAND_HOLD seconds of sim
    time, resampling on expiry or reset."""

    def __init__(self, n_envs, rng):
        self.value = sample_command(rng, n_envs)
        self.expires = np.full(n_envs, COMMAND_HOLD)

    def step(self, t, rng, reset_mask=None):
        due = t >= self.expires
        if reset_mask is not None:
            due = due | reset_mask
        if due.any():
            self.value[due] = sample_command(rng, int(due.sum()))
            t_due = t[due] if np.ndim(t) else t
            self.expires[due] = t_due + COMMAND_HOLD
        return self.value
