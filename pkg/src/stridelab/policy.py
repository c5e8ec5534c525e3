"""Actor-critic networks, the unified joint + gait-frequency action, phase
machinery, expected-contact schedule, and the sagittal mirror transforms.

The teacher path encodes exact privileged state and the ground-truth height
strip; the student path encodes the proprio history and a noisy or
reconstructed strip. Both feed the same Gaussian policy head.
"""

import numpy as np

from . import nets, obs

LATENT_DIM = 32
Z_DIM = 2 * LATENT_DIM

ACTION_DIM = 7                 # 6 joint targets + raw gait frequency
JOINT_ACTION_SCALE = 0.5       # rad per action unit around nominal posture

FREQ_NOMINAL = 1.0
FREQ_GAIN = 0.3
FREQ_MIN, FREQ_MAX = 0.7, 1.3
FREQ_FILTER_W = 5

LEG_OFFSETS = np.array([0.0, 0.5])   # left, right
DUTY_FACTOR = 0.55
CONTROL_DT = 0.02

VALUE_IN = obs.PRIV_DIM + obs.STRIP_CELLS + obs.PROPRIO_DIM

OBS_CLIP = 10.0


def _proprio_scale():
    s = np.ones(obs.PROPRIO_DIM, dtype=np.float32)
    s[obs.P_PITCH_RATE] = 0.25
    s[obs.P_JOINT_VEL] = 0.05
    return s


def _priv_scale():
    s = np.ones(obs.PRIV_DIM, dtype=np.float32)
    s[2:8] = 0.01      # joint torques, ~1e2 N*m
    s[8:14] = 0.0025   # joint accelerations, spiky at contact
    s[14:16] = 0.01    # foot normal forces, ~1e2 N
    return s


PROPRIO_SCALE = _proprio_scale()
PRIV_SCALE = _priv_scale()


def scale_proprio(proprio):
    """Per-channel rescale + clip applied at the network boundary."""
    out = proprio.astype(np.float32) * PROPRIO_SCALE
    return np.clip(out, -OBS_CLIP, OBS_CLIP)


def scale_history(history):
    frames = history.reshape(history.shape[0], obs.HISTORY_LEN,
                             obs.PROPRIO_DIM)
    out = frames.astype(np.float32) * PROPRIO_SCALE
    return np.clip(out, -OBS_CLIP, OBS_CLIP).reshape(history.shape[0], -1)


def scale_priv(s_pri):
    out = s_pri.astype(np.float32) * PRIV_SCALE
    return np.clip(out, -OBS_CLIP, OBS_CLIP)


class PolicyNets:
    """All trainable networks. Parameter layout is fixed so checkpoints and
    optimizer slots line up across runs."""

    def __init__(self, rng, dtype=np.float32):
        self.e_pri = nets.Mlp([obs.PRIV_DIM, 128, 64, LATENT_DIM], rng,
                              dtype=dtype)
        self.e_per_t = nets.Mlp([obs.STRIP_CELLS, 64, LATENT_DIM], rng,
                                dtype=dtype)
        self.e_pro = nets.Mlp([obs.HISTORY_DIM, 128, 64, LATENT_DIM], rng,
                              dtype=dtype)
        self.e_per_s = nets.Mlp([obs.STRIP_CELLS, 64, LATENT_DIM], rng,
                                dtype=dtype)
        self.pi = nets.Mlp([Z_DIM + obs.PROPRIO_DIM, 256, 128, ACTION_DIM],
                           rng, dtype=dtype, out_scale=0.01)
        self.head = nets.GaussianHead(ACTION_DIM, dtype=dtype)
        self.value = nets.Mlp([VALUE_IN, 512, 256, 1], rng, dtype=dtype)

    # parameter groups, used by the trainer's gradient-flow rules
    def teacher_encoder_modules(self):
        return [self.e_pri, self.e_per_t]

    def student_encoder_modules(self):
        return [self.e_pro, self.e_per_s]

    def head_modules(self):
        return [self.pi, self.head]

    def all_modules(self):
        return (self.teacher_encoder_modules()
                + self.student_encoder_modules()
                + self.head_modules() + [self.value])

    def params(self):
        out = []
        for m in self.all_modules():
            out.extend(m.params())
        return out

    def grads(self):
        out = []
        for m in self.all_modules():
            out.extend(m.grads())
        return out

    def arch_description(self):
        widths = []
        for p in self.params():
            widths.append("x".join(str(s) for s in p.shape))
        return "stridelab-policy:" + ",".join(widths)


def teacher_latent(nets_, s_pri, strip):
    return np.concatenate([nets_.e_pri.forward(scale_priv(s_pri)),
                           nets_.e_per_t.forward(strip.astype(np.float32))],
                          axis=1)


def student_latent(nets_, history, strip):
    return np.concatenate([nets_.e_pro.forward(scale_history(history)),
                           nets_.e_per_s.forward(strip.astype(np.float32))],
                          axis=1)


def _act(nets_, z, proprio, rng, deterministic):
    if not (np.isfinite(z).all() and np.isfinite(proprio).all()):
        raise FloatingPointError("non-finite policy input")
    mean = nets_.pi.forward(
        np.concatenate([z, scale_proprio(proprio)], axis=1))
    if deterministic:
        action = mean.copy()
        logp = nets_.head.log_prob(mean, action)
    else:
        action, logp = nets_.head.sample(mean, rng)
    return action, logp, mean


def act_teacher(nets_, s_pri, strip_gt, proprio, rng, deterministic=False):
    z = teacher_latent(nets_, s_pri, strip_gt)
    action, logp, mean = _act(nets_, z, proprio, rng, deterministic)
    return action, logp, z, mean


def act_student(nets_, history, strip, proprio, rng, deterministic=False):
    z = student_latent(nets_, history, strip)
    action, logp, mean = _act(nets_, z, proprio, rng, deterministic)
    return action, logp, z, mean


def value_input(s_pri, strip_gt, proprio):
    return np.concatenate([scale_priv(s_pri), strip_gt.astype(np.float32),
                           scale_proprio(proprio)], axis=1)


def joint_targets(action):
    """Map the first 6 action channels to PD targets (rad)."""
    from . import sim
    return sim.NOMINAL_POSTURE + JOINT_ACTION_SCALE * action[:, :6]


class GaitState:
    """Per-environment phase, filtered frequency, and raw-frequency ring."""

    def __init__(self, n_envs):
        self.phase = np.zeros(n_envs)
        self.freq = np.full(n_envs, FREQ_NOMINAL)
        self.ring = np.full((n_envs, FREQ_FILTER_W), FREQ_NOMINAL)

    def reset(self, env_mask):
        self.phase[env_mask] = 0.0
        self.freq[env_mask] = FREQ_NOMINAL
        self.ring[env_mask] = FREQ_NOMINAL


def postprocess_freq(a_f, gait: GaitState):
    """Scale, clip, and moving-average the raw frequency action. Returns
    (f_t, pre-clip f_raw); updates the gait state ring and freq."""
    f_unclipped = FREQ_NOMINAL + FREQ_GAIN * np.asarray(a_f)
    f_raw = np.clip(f_unclipped, FREQ_MIN, FREQ_MAX)
    gait.ring[:, :-1] = gait.ring[:, 1:]
    gait.ring[:, -1] = f_raw
    gait.freq = gait.ring.mean(axis=1)
    return gait.freq, f_unclipped


def phase_update(phase, freq, dt=CONTROL_DT):
    return np.mod(phase + dt * freq, 1.0)


def leg_phases(phase):
    """(N, 2) per-leg phases with the fixed half-cycle offset."""
    return np.mod(phase[:, None] + LEG_OFFSETS[None, :], 1.0)


def expected_contact(leg_phase):
    """Stance/swing indicators (C, 1-C); stance iff phase < duty factor."""
    c = (leg_phase < DUTY_FACTOR).astype(float)
    return c, 1.0 - c


# observation index pairs swapped by the sagittal mirror (left leg <-> right
# leg blocks of joint pos, joint vel, and previous action)
def _mirror_perm():
    perm = np.arange(obs.PROPRIO_DIM)
    for sl in (obs.P_JOINT_POS, obs.P_JOINT_VEL, obs.P_PREV_ACTION):
        i = sl.start
        perm[i:i + 3], perm[i + 3:i + 6] = (
            np.arange(i + 3, i + 6), np.arange(i, i + 3))
    return perm


_PROPRIO_MIRROR_PERM = _mirror_perm()


def mirror_proprio(proprio):
    """Swap the leg blocks and advance the phase signals by half a cycle
    (sin/cos negate); command, gravity, pitch rate, frequency unchanged."""
    out = proprio[:, _PROPRIO_MIRROR_PERM].copy()
    out[:, 23] = -proprio[:, 23]
    out[:, 24] = -proprio[:, 24]
    return out


def mirror_history(history):
    h = history.reshape(history.shape[0], obs.HISTORY_LEN, obs.PROPRIO_DIM)
    m = mirror_proprio(h.reshape(-1, obs.PROPRIO_DIM))
    return m.reshape(history.shape)


def mirror_priv(priv):
    """Swap per-foot and per-leg blocks of the privileged observation."""
    out = priv.copy()
    out[:, 2:5], out[:, 5:8] = priv[:, 5:8], priv[:, 2:5].copy()
    out[:, 8:11], out[:, 11:14] = priv[:, 11:14], priv[:, 8:11].copy()
    out[:, 14], out[:, 15] = priv[:, 15], priv[:, 14].copy()
    out[:, 16], out[:, 17] = priv[:, 17], priv[:, 16].copy()
    return out


def mirror_action(action):
    out = action.copy()
    out[:, 0:3], out[:, 3:6] = action[:, 3:6], action[:, 0:3].copy()
    return out
