"""Per-step reward terms with a per-term weighted breakdown.

All terms are pure functions of the post-step simulator state plus short
action/torque histories, vectorized over environments. Exponential shaping
terms lie in (0, 1]; every L2 term enters as a penalty.
"""

import numpy as np
from dataclasses import dataclass, field

from . import policy, sim

JOINT_VEL_LIMIT = 20.0    # rad/s, for the joint-limit violation count


def _default_weights():
    return {
        "lin_track": 1.0,
        "base_height": 0.4,
        "contact_swing": 0.5,
        "action_smoothness": -2.5e-3,
        "gait_action_limit": -0.25,
        "joint_accel": -5e-7,
        "joint_vel": -1e-3,
        "torque": -4e-7,
        "torque_rate": -1.5e-7,
        "joint_power": -2.5e-7,
        "joint_limit_pos": -0.2,
        "joint_limit_vel": -0.025,
        "joint_limit_torque": -0.01,
        "hip_deviation": -0.5,
        "lin_accel": -2e-3,
        "pitch_rate": -0.15,
        "proj_gravity": -0.15,
        "undesired_contacts": -1.5,
        "stumble": -1.5,
        "slide": -0.05,
        "air_time": 0.03,
        "feet_hold": 0.5,
        "stair_flat": 0.25,
    }


@dataclass
class RewardConfig:
    weights: dict = field(default_factory=_default_weights)
    h_target: float = 0.85
    dt: float = 0.02


@dataclass
class RewardBreakdown:
    terms: dict          # term -> (N,) weighted contribution
    total: np.ndarray    # (N,)


def compute(state, model, bank, command, actions, f_unclipped,
            leg_phase, cfg: RewardConfig) -> RewardBreakdown:
    """Evaluate every term after a control step.

    `actions` is (a_t, a_{t-1}, a_{t-2}), each (N, 7); `f_unclipped` is the
    pre-clip scaled frequency; `leg_phase` is (N, 2).
    """
    w = cfg.weights
    a_t, a_p, a_pp = actions
    raw = {}

    v_x = state.qd[:, sim.X]
    raw["lin_track"] = np.exp(-4.0 * (command - v_x) ** 2)

    h = state.q[:, sim.Z] - state.foot_pos[:, :, 1].mean(axis=1)
    raw["base_height"] = np.exp(-200.0 * (cfg.h_target - h) ** 2)

    c, c_bar = policy.expected_contact(leg_phase)
    f_foot = np.stack([state.contact_forces[:, 0] + state.contact_forces[:, 1],
                       state.contact_forces[:, 2] + state.contact_forces[:, 3]],
                      axis=1)                                    # (N, 2, 2)
    f_mag2 = np.sum(f_foot ** 2, axis=2)
    v_hor2 = state.foot_vel[:, :, 0] ** 2
    raw["contact_swing"] = (
        -np.sum(c_bar * (1.0 - np.exp(-f_mag2 / 50.0)), axis=1)
        - np.sum(c * (1.0 - np.exp(-v_hor2 / 5.0)), axis=1))

    raw["action_smoothness"] = np.sum((a_t - 2 * a_p + a_pp) ** 2, axis=1)

    raw["gait_action_limit"] = (
        (f_unclipped < policy.FREQ_MIN)
        | (f_unclipped > policy.FREQ_MAX)).astype(float)

    qj, qdj = state.q[:, sim.JOINT_SLICE], state.qd[:, sim.JOINT_SLICE]
    raw["joint_accel"] = np.sum(state.qdd[:, sim.JOINT_SLICE] ** 2, axis=1)
    raw["joint_vel"] = np.sum(qdj ** 2, axis=1)
    raw["torque"] = np.sum(state.tau ** 2, axis=1)
    raw["torque_rate"] = np.sum((state.tau - state.prev_tau) ** 2, axis=1)
    raw["joint_power"] = np.sum(np.abs(state.tau) * np.abs(qdj), axis=1)

    raw["joint_limit_pos"] = np.sum(
        (qj < sim.JOINT_LO) | (qj > sim.JOINT_HI), axis=1).astype(float)
    raw["joint_limit_vel"] = np.sum(
        np.abs(qdj) > JOINT_VEL_LIMIT, axis=1).astype(float)
    raw["joint_limit_torque"] = np.sum(
        np.abs(state.tau) >= sim.TORQUE_LIMIT - 1e-9, axis=1).astype(float)

    hips = qj[:, [0, 3]] - np.asarray(sim.NOMINAL_POSTURE)[[0, 3]]
    raw["hip_deviation"] = np.sum(hips ** 2, axis=1)

    lin_acc = (state.qd[:, 0:2] - state.base_vel_prev) / cfg.dt
    raw["lin_accel"] = np.sum(lin_acc ** 2, axis=1)
    raw["pitch_rate"] = state.qd[:, sim.PITCH] ** 2
    raw["proj_gravity"] = np.sin(state.q[:, sim.PITCH]) ** 2

    raw["undesired_contacts"] = sim.undesired_contact_count(
        state, bank, model).astype(float)

    f_hor = np.abs(f_foot[:, :, 0])
    f_ver = np.abs(f_foot[:, :, 1])
    raw["stumble"] = np.sum(f_hor > 2.0 * f_ver, axis=1).astype(float)

    # foot angular velocity: pitch + all leg joint rates down the chain
    w_foot = np.stack(
        [state.qd[:, [sim.PITCH, sim.HIP_L, sim.KNEE_L, sim.ANK_L]].sum(axis=1),
         state.qd[:, [sim.PITCH, sim.HIP_R, sim.KNEE_R, sim.ANK_R]].sum(axis=1)],
        axis=1)
    v_foot = np.linalg.norm(state.foot_vel, axis=2)
    raw["slide"] = np.sum(
        state.foot_contact * (v_foot + 0.25 * np.abs(w_foot)), axis=1)

    raw["air_time"] = np.sum(
        state.touchdown_event * np.minimum(state.touchdown_air, 0.5), axis=1)

    # exp-style foot terms average over the feet in contact so they stay in
    # (0, 1]; a sum would pay double support twice and make quiet standing
    # outscore stepping
    n_contact = np.maximum(1.0, np.sum(state.foot_contact, axis=1))
    hold = np.exp(-100.0 * (state.foot_pos[:, :, 0] - state.touchdown_x) ** 2)
    raw["feet_hold"] = np.sum(state.foot_contact * hold, axis=1) / n_contact

    d_edge = np.stack([bank.edge_distance_at(state.foot_pos[:, 0, 0]),
                       bank.edge_distance_at(state.foot_pos[:, 1, 0])], axis=1)
    r_d = np.maximum(0.0, 0.06 - d_edge)
    raw["stair_flat"] = np.sum(state.foot_contact * np.exp(-4.0 * r_d),
                               axis=1) / n_contact

    terms = {k: w[k] * v for k, v in raw.items()}
    total = np.sum(list(terms.values()), axis=0)
    return RewardBreakdown(terms=terms, total=total)
