"""Planar (sagittal) articulated biped dynamics with penalty contacts.

Nine generalized coordinates: base x, base z, base pitch, and six leg joints
[hip_L, knee_L, ankle_L, hip_R, knee_R, ankle_R]. Dynamics are assembled via
body Jacobians (M = sum J^T H J) and solved exactly, including the velocity
bias term, so passive motion conserves energy up to integrator error.

Everything is vectorized across N independent environments; per-environment
arrays live in SimState and per-environment physical parameters in
RobotModel. Integration is semi-implicit Euler at 1 kHz with a 50 Hz control
decimation of 20.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import terrain as terrain_mod

GRAVITY = 9.81
DT_PHYSICS = 1.0e-3
DECIMATION = 20
DT_CONTROL = DT_PHYSICS * DECIMATION

# generalized coordinate indices
X, Z, PITCH = 0, 1, 2
HIP_L, KNEE_L, ANK_L, HIP_R, KNEE_R, ANK_R = 3, 4, 5, 6, 7, 8
N_Q = 9
N_JOINTS = 6
JOINT_SLICE = slice(3, 9)

# bodies
TORSO, THIGH_L, SHANK_L, FOOT_L, THIGH_R, SHANK_R, FOOT_R = range(7)
N_BODIES = 7

# geometry (m)
L_TORSO, L_THIGH, L_SHANK, L_FOOT = 0.5, 0.4, 0.4, 0.2
TORSO_COM_UP = 0.25
SOLE_DROP = 0.08            # contact surface below the ankle
HEEL_OFFSET, TOE_OFFSET = -0.05, 0.15   # along the foot axis from the ankle
FOOT_COM_ALONG, FOOT_COM_DOWN = 0.05, 0.04
CAMERA_MOUNT = (0.0, -0.05)  # under-base depth camera offset in the base frame

NOMINAL_MASS = np.array([10.0, 3.0, 2.5, 0.5, 3.0, 2.5, 0.5])
_L_BODY = np.array([L_TORSO, L_THIGH, L_SHANK, L_FOOT, L_THIGH, L_SHANK, L_FOOT])
NOMINAL_INERTIA = NOMINAL_MASS * _L_BODY ** 2 / 12.0

NOMINAL_KP = np.array([80.0, 80.0, 40.0, 80.0, 80.0, 40.0])
NOMINAL_KD = np.array([2.0, 2.0, 1.0, 2.0, 2.0, 1.0])
TORQUE_LIMIT = np.array([120.0, 120.0, 60.0, 120.0, 120.0, 60.0])
VELOCITY_LIMIT = np.full(6, 20.0)
JOINT_LO = np.array([-1.5, -2.6, -1.0, -1.5, -2.6, -1.0])
JOINT_HI = np.array([1.5, 0.0, 1.0, 1.5, 0.0, 1.0])

# nominal standing posture: slight knee bend, foot flat, base at 0.85 m
NOMINAL_POSTURE = np.array([0.275, -0.55, 0.275, 0.275, -0.55, 0.275])
NOMINAL_BASE_HEIGHT = 0.85

# penalty contact
K_NORMAL = 3.0e4
C_NORMAL = 300.0
C_TANGENT = 300.0
PENETRATION_CAP = 0.03
CONTACT_FORCE_EPS = 1.0     # N, contact considered active above this

# termination thresholds
FALL_PITCH = 1.0
FALL_HEIGHT = 0.45
RUNNING, FELL, FAULT = 0, 1, 2

# body -> ancestor rotational dofs (base translations are implicit ancestors)
_ANCESTORS = {
    TORSO: (PITCH,),
    THIGH_L: (PITCH, HIP_L),
    SHANK_L: (PITCH, HIP_L, KNEE_L),
    FOOT_L: (PITCH, HIP_L, KNEE_L, ANK_L),
    THIGH_R: (PITCH, HIP_R),
    SHANK_R: (PITCH, HIP_R, KNEE_R),
    FOOT_R: (PITCH, HIP_R, KNEE_R, ANK_R),
}
_W_ANG = np.zeros((N_BODIES, N_Q))
for _b, _dofs in _ANCESTORS.items():
    _W_ANG[_b, list(_dofs)] = 1.0
_WW_ANG = _W_ANG[:, :, None] * _W_ANG[:, None, :]   # per-body outer products

_FOOT_BODIES = (FOOT_L, FOOT_R)
_CONTACT_FOOT = np.array([0, 0, 1, 1])   # heel_L, toe_L, heel_R, toe_R


@dataclass
class RandomizationRanges:
    mass_scale: tuple = (0.85, 1.15)
    com_offset: float = 0.03
    friction: tuple = (0.4, 1.0)
    restitution: tuple = (0.0, 0.1)
    gain_scale: tuple = (0.8, 1.2)
    push_interval: tuple = (4.0, 8.0)
    push_impulse_max: float = 30.0


@dataclass
class RobotModel:
    """Per-environment physical parameters (all arrays batched over envs)."""

    mass: np.ndarray            # (N, 7)
    inertia: np.ndarray         # (N, 7)
    com_offset: np.ndarray      # (N, 2) torso CoM shift in the base frame
    kp: np.ndarray              # (N, 6)
    kd: np.ndarray              # (N, 6)
    friction: np.ndarray        # (N,)
    restitution: np.ndarray     # (N,)

    @classmethod
    def nominal(cls, n_envs: int) -> "RobotModel":
        return cls(
            mass=np.tile(NOMINAL_MASS, (n_envs, 1)),
            inertia=np.tile(NOMINAL_INERTIA, (n_envs, 1)),
            com_offset=np.zeros((n_envs, 2)),
            kp=np.tile(NOMINAL_KP, (n_envs, 1)),
            kd=np.tile(NOMINAL_KD, (n_envs, 1)),
            friction=np.full(n_envs, 0.7),
            restitution=np.zeros(n_envs),
        )

    @property
    def n_envs(self) -> int:
        return self.mass.shape[0]


def randomize(model: RobotModel, ranges: RandomizationRanges, rng) -> RobotModel:
    """Sample a perturbed copy of the nominal model within the given ranges."""
    n = model.n_envs
    scale = rng.uniform(*ranges.mass_scale, size=(n, N_BODIES))
    gain = rng.uniform(*ranges.gain_scale, size=(n, 1))
    return replace(
        model,
        mass=np.tile(NOMINAL_MASS, (n, 1)) * scale,
        inertia=np.tile(NOMINAL_INERTIA, (n, 1)) * scale,
        com_offset=rng.uniform(-ranges.com_offset, ranges.com_offset, size=(n, 2)),
        kp=np.tile(NOMINAL_KP, (n, 1)) * gain,
        kd=np.tile(NOMINAL_KD, (n, 1)) * gain,
        friction=rng.uniform(*ranges.friction, size=n),
        restitution=rng.uniform(*ranges.restitution, size=n),
    )


class TerrainBank:
    """Batched terrain: one height strip per environment, common grid."""

    def __init__(self, profiles):
        self.profiles = list(profiles)
        n_cells = {p.n_cells for p in self.profiles}
        if len(n_cells) != 1:
            raise ValueError("all profiles must share the same cell count")
        self.heights = np.stack([p.samples for p in self.profiles])
        self.origin = np.array([p.origin_x for p in self.profiles])
        self.levels = np.array([p.level for p in self.profiles])
        self.n_cells = self.heights.shape[1]
        self._edge_dist = None

    def replace_env(self, env: int, profile) -> None:
        self.profiles[env] = profile
        self.heights[env] = profile.samples
        self.origin[env] = profile.origin_x
        self.levels[env] = profile.level
        if self._edge_dist is not None:
            self._edge_dist[env] = _edge_distances(profile.samples)

    def height_at(self, x: np.ndarray) -> np.ndarray:
        """Vectorized nearest-cell lookup, one query point per environment."""
        idx = np.floor((x - self.origin) / terrain_mod.RESOLUTION + 0.5).astype(int)
        np.clip(idx, 0, self.n_cells - 1, out=idx)
        return self.heights[np.arange(len(x)), idx]

    def height_at_many(self, x: np.ndarray) -> np.ndarray:
        """Nearest-cell lookup for (N, ...) query points, N rows of envs."""
        origin = self.origin.reshape((-1,) + (1,) * (x.ndim - 1))
        idx = np.floor((x - origin) / terrain_mod.RESOLUTION + 0.5).astype(int)
        np.clip(idx, 0, self.n_cells - 1, out=idx)
        env = np.arange(x.shape[0]).reshape((-1,) + (1,) * (x.ndim - 1))
        return self.heights[env, idx]

    def edge_distance_at(self, x: np.ndarray) -> np.ndarray:
        """Distance (m) to the nearest edge-labeled cell, per environment."""
        if self._edge_dist is None:
            self._edge_dist = np.stack(
                [_edge_distances(p.samples) for p in self.profiles])
        idx = np.floor((x - self.origin) / terrain_mod.RESOLUTION + 0.5).astype(int)
        np.clip(idx, 0, self.n_cells - 1, out=idx)
        return self._edge_dist[np.arange(len(x)), idx]


def _edge_distances(samples: np.ndarray) -> np.ndarray:
    labels = terrain_mod.edge_labels(samples)
    idx = np.flatnonzero(labels)
    cells = np.arange(len(samples))
    if len(idx) == 0:
        return np.full(len(samples), 1e6)
    return np.abs(cells[:, None] - idx[None, :]).min(axis=1) * terrain_mod.RESOLUTION


@dataclass
class SimState:
    """Batched simulator state for N environments."""

    q: np.ndarray               # (N, 9)
    qd: np.ndarray              # (N, 9)
    tau: np.ndarray             # (N, 6) last applied joint torques
    prev_tau: np.ndarray        # (N, 6) torques one control step before
    qdd: np.ndarray             # (N, 9) last accelerations
    contact_forces: np.ndarray  # (N, 4, 2) per contact point (heelL,toeL,heelR,toeR)
    foot_contact: np.ndarray    # (N, 2) bool
    air_time: np.ndarray        # (N, 2) seconds airborne
    touchdown_x: np.ndarray     # (N, 2) anchor x at last touchdown
    touchdown_event: np.ndarray # (N, 2) bool, touchdown happened this control step
    touchdown_air: np.ndarray   # (N, 2) air time consumed at this step's touchdown
    foot_pos: np.ndarray        # (N, 2, 2) mid-sole points
    foot_vel: np.ndarray        # (N, 2, 2)
    base_vel_prev: np.ndarray   # (N, 2) base velocity one control step before
    t: np.ndarray               # (N,) sim time
    fault: np.ndarray           # (N,) bool

    @classmethod
    def zeros(cls, n: int) -> "SimState":
        return cls(
            q=np.zeros((n, N_Q)), qd=np.zeros((n, N_Q)),
            tau=np.zeros((n, N_JOINTS)), prev_tau=np.zeros((n, N_JOINTS)),
            qdd=np.zeros((n, N_Q)),
            contact_forces=np.zeros((n, 4, 2)),
            foot_contact=np.zeros((n, 2), dtype=bool),
            air_time=np.zeros((n, 2)),
            touchdown_x=np.zeros((n, 2)),
            touchdown_event=np.zeros((n, 2), dtype=bool),
            touchdown_air=np.zeros((n, 2)),
            foot_pos=np.zeros((n, 2, 2)), foot_vel=np.zeros((n, 2, 2)),
            base_vel_prev=np.zeros((n, 2)),
            t=np.zeros(n), fault=np.zeros(n, dtype=bool),
        )

    @property
    def n_envs(self) -> int:
        return self.q.shape[0]


@dataclass
class Kinematics:
    """Body/contact geometry for the current configuration."""

    com: np.ndarray          # (N, 7, 2)
    com_vel: np.ndarray      # (N, 7, 2)
    ang: np.ndarray          # (N, 7) body orientations
    ang_vel: np.ndarray      # (N, 7)
    anchors: np.ndarray      # (N, 9, 2) rotational-dof pivot points
    anchor_vel: np.ndarray   # (N, 9, 2)
    contacts: np.ndarray     # (N, 4, 2) heel/toe points
    contact_vel: np.ndarray  # (N, 4, 2)
    sole_mid: np.ndarray     # (N, 2, 2) mid-sole per foot
    sole_mid_vel: np.ndarray # (N, 2, 2)
    knees: np.ndarray        # (N, 2, 2)
    torso_top: np.ndarray    # (N, 2)


def _dir_down(a):
    return np.stack([np.sin(a), -np.cos(a)], axis=-1)


def _axis(a):
    return np.stack([np.cos(a), np.sin(a)], axis=-1)


def _perp(v):
    return np.stack([-v[..., 1], v[..., 0]], axis=-1)


def kinematics(q: np.ndarray, qd: np.ndarray, model: RobotModel) -> Kinematics:
    n = q.shape[0]
    base = q[:, 0:2]
    v_base = qd[:, 0:2]
    pitch = q[:, PITCH]

    ang = np.zeros((n, N_BODIES))
    ang[:, TORSO] = pitch
    ang[:, THIGH_L] = pitch + q[:, HIP_L]
    ang[:, SHANK_L] = ang[:, THIGH_L] + q[:, KNEE_L]
    ang[:, FOOT_L] = ang[:, SHANK_L] + q[:, ANK_L]
    ang[:, THIGH_R] = pitch + q[:, HIP_R]
    ang[:, SHANK_R] = ang[:, THIGH_R] + q[:, KNEE_R]
    ang[:, FOOT_R] = ang[:, SHANK_R] + q[:, ANK_R]

    ang_vel = qd @ _W_ANG.T

    up = np.stack([-np.sin(pitch), np.cos(pitch)], axis=-1)
    side = _axis(pitch)  # base-frame forward axis in world

    anchors = np.zeros((n, N_Q, 2))
    anchor_vel = np.zeros((n, N_Q, 2))
    anchors[:, PITCH] = base
    anchor_vel[:, PITCH] = v_base

    com = np.zeros((n, N_BODIES, 2))
    com_vel = np.zeros((n, N_BODIES, 2))
    off = model.com_offset
    torso_shift = TORSO_COM_UP * up + off[:, 0:1] * side + off[:, 1:2] * up
    com[:, TORSO] = base + torso_shift
    com_vel[:, TORSO] = v_base + qd[:, PITCH, None] * _perp(torso_shift)
    torso_top = base + L_TORSO * up

    knees = np.zeros((n, 2, 2))
    sole_mid = np.zeros((n, 2, 2))
    sole_mid_vel = np.zeros((n, 2, 2))
    contacts = np.zeros((n, 4, 2))
    contact_vel = np.zeros((n, 4, 2))

    for leg, (hip_i, knee_i, ank_i, thigh_b, shank_b, foot_b) in enumerate(
            [(HIP_L, KNEE_L, ANK_L, THIGH_L, SHANK_L, FOOT_L),
             (HIP_R, KNEE_R, ANK_R, THIGH_R, SHANK_R, FOOT_R)]):
        d1 = _dir_down(ang[:, thigh_b])
        d2 = _dir_down(ang[:, shank_b])
        f = _axis(ang[:, foot_b])
        g = _perp(f)

        w1 = qd[:, PITCH] + qd[:, hip_i]
        w2 = w1 + qd[:, knee_i]
        w3 = w2 + qd[:, ank_i]

        knee = base + L_THIGH * d1
        v_knee = v_base + w1[:, None] * _perp(L_THIGH * d1)
        ankle = knee + L_SHANK * d2
        v_ankle = v_knee + w2[:, None] * _perp(L_SHANK * d2)

        anchors[:, hip_i] = base
        anchor_vel[:, hip_i] = v_base
        anchors[:, knee_i] = knee
        anchor_vel[:, knee_i] = v_knee
        anchors[:, ank_i] = ankle
        anchor_vel[:, ank_i] = v_ankle

        com[:, thigh_b] = base + (L_THIGH / 2) * d1
        com_vel[:, thigh_b] = v_base + w1[:, None] * _perp((L_THIGH / 2) * d1)
        com[:, shank_b] = knee + (L_SHANK / 2) * d2
        com_vel[:, shank_b] = v_knee + w2[:, None] * _perp((L_SHANK / 2) * d2)

        foot_shift = FOOT_COM_ALONG * f - FOOT_COM_DOWN * g
        com[:, foot_b] = ankle + foot_shift
        com_vel[:, foot_b] = v_ankle + w3[:, None] * _perp(foot_shift)

        knees[:, leg] = knee
        for ci, along in ((2 * leg, HEEL_OFFSET), (2 * leg + 1, TOE_OFFSET)):
            shift = along * f - SOLE_DROP * g
            contacts[:, ci] = ankle + shift
            contact_vel[:, ci] = v_ankle + w3[:, None] * _perp(shift)
        mid_shift = ((HEEL_OFFSET + TOE_OFFSET) / 2) * f - SOLE_DROP * g
        sole_mid[:, leg] = ankle + mid_shift
        sole_mid_vel[:, leg] = v_ankle + w3[:, None] * _perp(mid_shift)

    return Kinematics(com=com, com_vel=com_vel, ang=ang, ang_vel=ang_vel,
                      anchors=anchors, anchor_vel=anchor_vel,
                      contacts=contacts, contact_vel=contact_vel,
                      sole_mid=sole_mid, sole_mid_vel=sole_mid_vel,
                      knees=knees, torso_top=torso_top)


def _point_jacobian(points, anchors, body_of_point):
    """Linear Jacobian (N, P, 2, 9) for points attached to given bodies."""
    n, p = points.shape[0], points.shape[1]
    mask = _W_ANG[list(body_of_point)]                       # (P, 9)
    diff = points[:, :, None, :] - anchors[:, None, :, :]    # (N, P, 9, 2)
    J = np.zeros((n, p, 2, N_Q))
    J[:, :, 0, X] = 1.0
    J[:, :, 1, Z] = 1.0
    J[:, :, 0, :] -= diff[..., 1] * mask
    J[:, :, 1, :] += diff[..., 0] * mask
    return J


def _contact_forces(kin: Kinematics, bank: TerrainBank, model: RobotModel):
    px = kin.contacts[:, :, 0]
    pz = kin.contacts[:, :, 1]
    h = np.stack([bank.height_at(px[:, c]) for c in range(4)], axis=1)
    pen = h - pz
    active = pen > 0.0
    vz = kin.contact_vel[:, :, 1]
    vx = kin.contact_vel[:, :, 0]
    c_n = C_NORMAL * (1.0 - model.restitution)[:, None]
    fn = np.where(active,
                  np.maximum(0.0, K_NORMAL * np.minimum(pen, PENETRATION_CAP)
                             - c_n * vz),
                  0.0)
    cap = model.friction[:, None] * fn
    ft = np.clip(-C_TANGENT * vx, -cap, cap) * active
    return np.stack([ft, fn], axis=-1)


def _pd_torques(q, qd, targets, model: RobotModel):
    err = targets - q[:, JOINT_SLICE]
    tau = model.kp * err - model.kd * qd[:, JOINT_SLICE]
    return np.clip(tau, -TORQUE_LIMIT, TORQUE_LIMIT)


def forward_accel(q, qd, targets, model: RobotModel, bank: TerrainBank,
                  locked=None, gravity: float = GRAVITY):
    """Exact forward dynamics of the 9-DoF planar tree.

    Returns (qdd, tau, contact_forces, kinematics). Mass matrix and velocity
    bias are assembled from body Jacobians, so conserved quantities of the
    continuous dynamics (energy, horizontal momentum in free flight) hold
    exactly at this level.
    """
    kin = kinematics(q, qd, model)

    J = _point_jacobian(kin.com, kin.anchors, list(range(N_BODIES)))
    m, inertia = model.mass, model.inertia
    n = q.shape[0]

    Jf = J.reshape(n, 2 * N_BODIES, N_Q)
    Jw = (J * m[:, :, None, None]).reshape(n, 2 * N_BODIES, N_Q)
    M = np.matmul(Jf.transpose(0, 2, 1), Jw)
    M += np.tensordot(inertia, _WW_ANG, axes=(1, 0))

    # velocity bias: Jdot qdot per body (angular rows are constant)
    rel = kin.com_vel[:, :, None, :] - kin.anchor_vel[:, None, :, :]
    w = qd[:, None, :] * _W_ANG[None, :, :]                 # (N, 7, 9)
    jdqd = np.empty_like(kin.com)
    jdqd[..., 0] = -(w * rel[..., 1]).sum(axis=2)
    jdqd[..., 1] = (w * rel[..., 0]).sum(axis=2)

    # gravity acts at CoMs, routed through the Jacobians
    F = -jdqd * m[:, :, None]
    F[:, :, 1] -= gravity * m
    Q = np.matmul(F.reshape(n, 1, 2 * N_BODIES), Jf)[:, 0]

    tau = _pd_torques(q, qd, targets, model)
    Q[:, JOINT_SLICE] += tau

    forces = _contact_forces(kin, bank, model)
    Jc = _point_jacobian(kin.contacts, kin.anchors,
                         [FOOT_L, FOOT_L, FOOT_R, FOOT_R])
    Q += np.matmul(forces.reshape(n, 1, 8), Jc.reshape(n, 8, N_Q))[:, 0]

    if locked is not None:
        free = ~np.asarray(locked)
        qdd = np.zeros_like(q)
        sub = np.linalg.solve(M[:, free][:, :, free], Q[:, free, None])
        qdd[:, free] = sub[:, :, 0]
    else:
        qdd = np.linalg.solve(M, Q[:, :, None])[:, :, 0]
    return qdd, tau, forces, kin


def com_accel_balance_x(q, qd, qdd, model: RobotModel):
    """Sum of mass-weighted horizontal CoM accelerations (N,).

    Zero (to solver precision) whenever no horizontal external force acts:
    the discretization-free statement of momentum conservation.
    """
    kin = kinematics(q, qd, model)
    J = _point_jacobian(kin.com, kin.anchors, list(range(N_BODIES)))
    acc = np.einsum("nbpi,ni->nbp", J, qdd, optimize=True)
    for b in range(N_BODIES):
        for dof in _ANCESTORS[b]:
            acc[:, b] += qd[:, dof, None] * _perp(
                kin.com_vel[:, b] - kin.anchor_vel[:, dof])
    return np.sum(model.mass * acc[:, :, 0], axis=1)


def dynamics_step(state: SimState, targets: np.ndarray, model: RobotModel,
                  bank: TerrainBank, dt: float = DT_PHYSICS,
                  locked=None, gravity: float = GRAVITY) -> None:
    """One physics sub-step in place, velocity-Verlet integrated.

    Exact for constant acceleration (free fall) and symplectic for passive
    motion, so pendulum fixtures hold energy to well under 1%. `locked` is
    an optional boolean mask over the 9 dofs: locked dofs are held at zero
    velocity (test fixtures: clamped base, passive pendulum).
    """
    q, qd = state.q, state.qd
    if locked is not None:
        qd[:, np.asarray(locked)] = 0.0

    a1, _, _, _ = forward_accel(q, qd, targets, model, bank,
                                locked=locked, gravity=gravity)
    q += dt * qd + 0.5 * dt * dt * a1
    v_pred = qd + dt * a1
    a2, tau, forces, kin = forward_accel(q, v_pred, targets, model, bank,
                                         locked=locked, gravity=gravity)
    qd += 0.5 * dt * (a1 + a2)
    np.clip(qd[:, JOINT_SLICE], -VELOCITY_LIMIT, VELOCITY_LIMIT,
            out=qd[:, JOINT_SLICE])
    if locked is not None:
        qd[:, np.asarray(locked)] = 0.0

    state.qdd = a2
    state.tau = tau
    state.contact_forces = forces
    state.foot_pos = kin.sole_mid
    state.foot_vel = kin.sole_mid_vel
    state.t += dt

    bad = ~np.isfinite(q).all(axis=1) | ~np.isfinite(qd).all(axis=1)
    if bad.any():
        state.fault |= bad
        q[bad] = np.nan_to_num(q[bad], nan=0.0, posinf=0.0, neginf=0.0)
        qd[bad] = 0.0


def control_step(state: SimState, targets: np.ndarray, model: RobotModel,
                 bank: TerrainBank, locked=None,
                 decimation: int = DECIMATION) -> None:
    """One 50 Hz policy step = `decimation` physics sub-steps.

    Maintains per-foot contact state, air time (in whole control steps, i.e.
    +0.02 s per fully airborne step), touchdown anchors, and the air time
    consumed at touchdown for the air-time reward.
    """
    state.prev_tau = state.tau.copy()
    state.base_vel_prev = state.qd[:, 0:2].copy()
    state.touchdown_event[...] = False
    state.touchdown_air[...] = 0.0
    contacted = np.zeros((state.n_envs, 2), dtype=bool)
    qd_start = state.qd.copy()

    for _ in range(decimation):
        dynamics_step(state, targets, model, bank, locked=locked)
        fn = state.contact_forces[:, :, 1]
        foot_now = np.stack([fn[:, 0] + fn[:, 1] > CONTACT_FORCE_EPS,
                             fn[:, 2] + fn[:, 3] > CONTACT_FORCE_EPS], axis=1)
        new_touchdown = foot_now & ~state.foot_contact & ~state.touchdown_event
        if new_touchdown.any():
            state.touchdown_event |= new_touchdown
            state.touchdown_air = np.where(new_touchdown, state.air_time,
                                           state.touchdown_air)
            state.touchdown_x = np.where(new_touchdown,
                                         state.foot_pos[:, :, 0],
                                         state.touchdown_x)
            state.air_time = np.where(new_touchdown, 0.0, state.air_time)
        state.foot_contact = foot_now
        contacted |= foot_now

    state.air_time += np.where(contacted, 0.0, DT_CONTROL)
    # accelerations exposed to rewards/observations are control-rate finite
    # differences: the instantaneous sub-step values carry contact-spring
    # transients orders of magnitude above anything the policy can act on
    state.qdd = (state.qd - qd_start) / (decimation * DT_PHYSICS)


def reset_envs(state: SimState, env_mask: np.ndarray, bank: TerrainBank,
               rng, joint_noise: float = 0.05, center_spread: float = 0.5) -> None:
    """Re-initialize the masked environments near the terrain center, standing."""
    idx = np.flatnonzero(env_mask)
    if len(idx) == 0:
        return
    n = len(idx)
    q = np.zeros((n, N_Q))
    q[:, X] = rng.uniform(-center_spread, center_spread, size=n)
    q[:, JOINT_SLICE] = NOMINAL_POSTURE + rng.uniform(
        -joint_noise, joint_noise, size=(n, N_JOINTS))

    # place the base so the lowest contact point rests on local ground
    sub_model = RobotModel.nominal(n)
    kin = kinematics(q, np.zeros((n, N_Q)), sub_model)
    origin = bank.origin[idx]
    heights = bank.heights[idx]

    def h_of(xq):
        cell = np.floor((xq - origin) / terrain_mod.RESOLUTION + 0.5).astype(int)
        np.clip(cell, 0, bank.n_cells - 1, out=cell)
        return heights[np.arange(n), cell]

    clearance = 0.002
    need = np.full(n, -np.inf)
    for c in range(4):
        ground = h_of(kin.contacts[:, c, 0])
        need = np.maximum(need, ground - kin.contacts[:, c, 1])
    q[:, Z] = need + clearance

    state.q[idx] = q
    state.qd[idx] = 0.0
    state.tau[idx] = 0.0
    state.prev_tau[idx] = 0.0
    state.qdd[idx] = 0.0
    state.contact_forces[idx] = 0.0
    state.foot_contact[idx] = False
    state.air_time[idx] = 0.0
    kin2 = kinematics(q, np.zeros((n, N_Q)), sub_model)
    state.touchdown_x[idx] = kin2.sole_mid[:, :, 0]
    state.touchdown_event[idx] = False
    state.touchdown_air[idx] = 0.0
    state.foot_pos[idx] = kin2.sole_mid
    state.foot_vel[idx] = 0.0
    state.base_vel_prev[idx] = 0.0
    state.t[idx] = 0.0
    state.fault[idx] = False


def apply_push(state: SimState, model: RobotModel, env_mask: np.ndarray,
               rng, impulse_max: float = 30.0) -> np.ndarray:
    """Horizontal base velocity impulse: delta-v = impulse / total mass."""
    impulse = rng.uniform(-impulse_max, impulse_max, size=state.n_envs)
    impulse = np.where(env_mask, impulse, 0.0)
    state.qd[:, X] += impulse / model.mass.sum(axis=1)
    return impulse


def static_stance_targets(model: RobotModel,
                          gravity: float = GRAVITY) -> np.ndarray:
    """PD targets that compensate gravity at the nominal stance (n, 6).

    Solves the static balance [S^T, Jc_z^T][tau; f_n] = -Q_gravity in the
    least-squares sense, then offsets the nominal posture by tau / kp so the
    proportional term alone supplies the holding torque.
    """
    n = model.mass.shape[0]
    q = np.zeros((n, N_Q))
    q[:, Z] = NOMINAL_BASE_HEIGHT
    q[:, JOINT_SLICE] = NOMINAL_POSTURE
    qd = np.zeros_like(q)
    kin = kinematics(q, qd, model)

    J = _point_jacobian(kin.com, kin.anchors, list(range(N_BODIES)))
    Fg = np.zeros_like(kin.com)
    Fg[:, :, 1] = -gravity * model.mass
    Qg = np.einsum("nbpi,nbp->ni", J, Fg, optimize=True)

    Jc = _point_jacobian(kin.contacts, kin.anchors,
                         [FOOT_L, FOOT_L, FOOT_R, FOOT_R])
    A = np.zeros((n, N_Q, 10))
    A[:, JOINT_SLICE, :6] = np.eye(6)
    A[:, :, 6:] = np.transpose(Jc[:, :, 1, :], (0, 2, 1))

    tau = np.empty((n, 6))
    for i in range(n):
        u, *_ = np.linalg.lstsq(A[i], -Qg[i], rcond=None)
        tau[i] = u[:6]
    return NOMINAL_POSTURE + tau / model.kp


def base_height_above_ground(state: SimState, bank: TerrainBank) -> np.ndarray:
    return state.q[:, Z] - bank.height_at(state.q[:, X])


def termination_check(state: SimState, bank: TerrainBank,
                      model: RobotModel) -> np.ndarray:
    """Per environment: RUNNING, FELL, or FAULT."""
    kin = kinematics(state.q, state.qd, model)
    fell = np.abs(state.q[:, PITCH]) > FALL_PITCH
    fell |= base_height_above_ground(state, bank) < FALL_HEIGHT

    # non-foot link touching the ground: knees, base point, torso top
    for pt in (kin.knees[:, 0], kin.knees[:, 1], state.q[:, 0:2], kin.torso_top):
        fell |= pt[:, 1] < bank.height_at(pt[:, 0])

    out = np.where(fell, FELL, RUNNING)
    return np.where(state.fault, FAULT, out)


def undesired_contact_count(state: SimState, bank: TerrainBank,
                            model: RobotModel) -> np.ndarray:
    kin = kinematics(state.q, state.qd, model)
    count = np.zeros(state.n_envs, dtype=int)
    for pt in (kin.knees[:, 0], kin.knees[:, 1], state.q[:, 0:2], kin.torso_top):
        count += pt[:, 1] < bank.height_at(pt[:, 0])
    return count


def mechanical_energy(state: SimState, model: RobotModel,
                      gravity: float = GRAVITY) -> np.ndarray:
    """Kinetic + gravitational potential energy (no contact storage)."""
    kin = kinematics(state.q, state.qd, model)
    kinetic = 0.5 * np.sum(model.mass * np.sum(kin.com_vel ** 2, axis=-1), axis=1)
    kinetic += 0.5 * np.sum(model.inertia * kin.ang_vel ** 2, axis=1)
    potential = gravity * np.sum(model.mass * kin.com[:, :, 1], axis=1)
    return kinetic + potential


def horizontal_momentum(state: SimState, model: RobotModel) -> np.ndarray:
    kin = kinematics(state.q, state.qd, model)
    return np.sum(model.mass * kin.com_vel[:, :, 0], axis=1)


def dump_trajectory_record(state: SimState, env: int) -> str:
    """One JSONL record per control step for debugging and the teleop bridge."""
    rec = {
        "t": round(float(state.t[env]), 6),
        "q_g": [float(v) for v in state.q[env]],
        "v_g": [float(v) for v in state.qd[env]],
        "torques": [float(v) for v in state.tau[env]],
        "contacts": [bool(v) for v in state.foot_contact[env]],
        "foot_forces": [[float(f) for f in cf] for cf in state.contact_forces[env]],
    }
    return json.dumps(rec)
