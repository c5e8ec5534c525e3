"""WebSocket bridge: one live simulated robot driven by a student policy.

The simulation loop and message I/O are two cooperating asyncio tasks; the
sim loop is the only writer of simulator state and only runs while at least
one client is connected (no compute burn when idle). Control runs at 50 Hz,
state broadcast at 25 Hz.

Wire protocol (JSON text frames):
  client -> server: {"type":"command","vx":float}
                    {"type":"reset","terrain":str,"level":int}
                    {"type":"pause"}
                    {"type":"freq_override","f":float|null}
  server -> client: {"type":"state", ...} at 25 Hz
                    {"type":"event","kind":"fell"|"reset"|"error","detail":str}
"""

from __future__ import annotations

import asyncio
import json

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect

from . import evaluate, obs, perception, policy, rewards, sim, terrain

CONTROL_HZ = 50
BROADCAST_DECIMATION = 2       # 25 Hz
TERRAIN_WINDOW = 3.0           # m of terrain sent around the base

RESET_KINDS = set(terrain.KINDS) | {"stairs"}


class Session:
    """Single-robot simulation state plus the operator's live inputs."""

    def __init__(self, nets_, recon, run_hash="", seed=0,
                 kind="flat", level=0):
        self.nets = nets_
        self.recon = recon
        self.run_hash = run_hash
        self.seed = seed
        self.vx = 0.0
        self.paused = False
        self.freq_override = None
        self.reward_cfg = rewards.RewardConfig()
        self.reward_total = 0.0
        self.step_count = 0
        self.noise = obs.NoiseModel()
        self.rng = np.random.default_rng(seed)
        self.model = sim.RobotModel.nominal(1)
        self.reset(kind, level)

    def reset(self, kind, level):
        if kind == "stairs":
            kind = "stairs-up"
        if kind not in terrain.KINDS:
            raise ValueError(f"unknown terrain {kind!r}")
        level = int(np.clip(level, 0, terrain.MAX_LEVEL))
        profile = terrain.generate(kind, level, seed=self.seed)
        self.bank = sim.TerrainBank([profile])
        self.state = sim.SimState.zeros(1)
        sim.reset_envs(self.state, np.ones(1, dtype=bool), self.bank,
                       self.rng)
        self.gait = policy.GaitState(1)
        self.history = obs.ObsHistory(1)
        self.prev_action = np.zeros((1, policy.ACTION_DIM))
        self.prev_prev_action = np.zeros((1, policy.ACTION_DIM))
        self.first = True
        self.kind = kind
        self.level = level
        self.hmap_raw = np.zeros(obs.STRIP_CELLS)
        self.hmap_mask = np.ones(obs.STRIP_CELLS, dtype=bool)
        self.hmap_recon = np.zeros(obs.STRIP_CELLS)

    def step(self):
        """One 50 Hz control step; returns True if the robot fell."""
        command = np.array([self.vx])
        proprio = obs.assemble_proprio(self.state, command,
                                       self.prev_action[:, :6],
                                       self.gait.phase, self.gait.freq)
        noisy = obs.add_noise(proprio, self.noise, self.rng)
        self.history.push(noisy)
        if self.first:
            self.history.reset(noisy)
            self.first = False
        dist, occ, dirs = obs.depth_scan(self.state, self.bank, self.model)
        base_pose = self.state.q[:, [sim.X, sim.Z, sim.PITCH]]
        values, mask = perception.rasterize(dist, occ, dirs, base_pose)
        strip = (perception.infer(self.recon, values, mask)
                 if self.recon is not None else values)
        self.hmap_raw, self.hmap_mask, self.hmap_recon = \
            values[0], mask[0].astype(bool), strip[0]

        action, _, _, _ = policy.act_student(
            self.nets, self.history.flat(), strip, noisy, self.rng,
            deterministic=True)
        action = action.astype(np.float64)
        f_t, f_unclipped = policy.postprocess_freq(action[:, 6], self.gait)
        if self.freq_override is not None:
            self.gait.freq[:] = self.freq_override
        targets = policy.joint_targets(action)
        sim.control_step(self.state, targets, self.model, self.bank)
        self.gait.phase = policy.phase_update(self.gait.phase, self.gait.freq)

        breakdown = rewards.compute(
            self.state, self.model, self.bank, command,
            (action, self.prev_action, self.prev_prev_action),
            f_unclipped, policy.leg_phases(self.gait.phase), self.reward_cfg)
        self.reward_total = float(breakdown.total[0])
        self.prev_prev_action = self.prev_action
        self.prev_action = action
        self.step_count += 1
        status = sim.termination_check(self.state, self.bank, self.model)
        return status[0] != sim.RUNNING

    def state_message(self):
        q = self.state.q[0]
        kin = sim.kinematics(self.state.q, self.state.qd, self.model)
        lo = q[sim.X] - TERRAIN_WINDOW / 2
        hi = q[sim.X] + TERRAIN_WINDOW / 2
        xs = np.arange(lo, hi + 1e-9, terrain.RESOLUTION)
        window = self.bank.height_at_many(xs[None, :])[0]
        return {
            "type": "state",
            "t": round(float(self.state.t[0]), 4),
            "base": {"x": float(q[sim.X]), "z": float(q[sim.Z]),
                     "pitch": float(q[sim.PITCH])},
            "joints": [float(v) for v in q[sim.JOINT_SLICE]],
            "feet": [
                {"x": float(kin.sole_mid[0, leg, 0]),
                 "z": float(kin.sole_mid[0, leg, 1]),
                 "contact": bool(self.state.foot_contact[0, leg])}
                for leg in range(2)
            ],
            "phase": float(self.gait.phase[0]),
            "freq": float(self.gait.freq[0]),
            "vcmd": self.vx,
            "terrain_window": [round(float(h), 4) for h in window],
            "hmap_raw": [round(float(v), 4) if m else None
                         for v, m in zip(self.hmap_raw, self.hmap_mask)],
            "hmap_recon": [round(float(v), 4) for v in self.hmap_recon],
            "reward_total": self.reward_total,
            "config_hash": self.run_hash,
        }


def handle_message(session: Session, raw: str):
    """Apply one client message; returns an event dict to send back, or
    None. Malformed input yields an error event and the session continues."""
    try:
        msg = json.loads(raw)
        if not isinstance(msg, dict):
            raise ValueError("message must be an object")
        mtype = msg.get("type")
        if mtype == "command":
            vx = float(msg["vx"])
            if not np.isfinite(vx):
                raise ValueError("vx must be finite")
            session.vx = float(np.clip(vx, -obs.COMMAND_MAX,
                                       obs.COMMAND_MAX))
            return None
        if mtype == "reset":
            session.reset(str(msg.get("terrain", "flat")),
                          int(msg.get("level", 0)))
            return {"type": "event", "kind": "reset",
                    "detail": f"{session.kind} level {session.level}"}
        if mtype == "pause":
            session.paused = not session.paused
            return {"type": "event", "kind": "reset",
                    "detail": "paused" if session.paused else "resumed"}
        if mtype == "freq_override":
            f = msg.get("f")
            if f is None:
                session.freq_override = None
            else:
                f = float(f)
                if not np.isfinite(f):
                    raise ValueError("f must be finite")
                session.freq_override = float(
                    np.clip(f, policy.FREQ_MIN, policy.FREQ_MAX))
            return None
        raise ValueError(f"unknown message type {mtype!r}")
    except (ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
        return {"type": "event", "kind": "error", "detail": str(exc)}


def create_app(nets_, recon=None, run_hash="", seed=0,
               kind="flat", level=0, realtime=True) -> FastAPI:
    app = FastAPI()
    session = Session(nets_, recon, run_hash=run_hash, seed=seed,
                      kind=kind, level=level)
    app.state.session = session

    @app.websocket("/ws")
    async def ws_endpoint(ws: WebSocket):
        await ws.accept()
        dt = 1.0 / CONTROL_HZ

        async def sim_loop():
            while True:
                t0 = asyncio.get_event_loop().time()
                if not session.paused:
                    fell = await asyncio.to_thread(session.step)
                    if session.step_count % BROADCAST_DECIMATION == 0:
                        await ws.send_text(json.dumps(
                            session.state_message()))
                    if fell:
                        await ws.send_text(json.dumps(
                            {"type": "event", "kind": "fell",
                             "detail": f"t={float(session.state.t[0]):.2f}"}))
                        session.reset(session.kind, session.level)
                        await ws.send_text(json.dumps(
                            {"type": "event", "kind": "reset",
                             "detail": "auto reset after fall"}))
                if realtime:
                    elapsed = asyncio.get_event_loop().time() - t0
                    await asyncio.sleep(max(0.0, dt - elapsed))
                else:
                    await asyncio.sleep(0)

        task = asyncio.create_task(sim_loop())
        try:
            while True:
                raw = await ws.receive_text()
                reply = handle_message(session, raw)
                if reply is not None:
                    await ws.send_text(json.dumps(reply))
        except WebSocketDisconnect:
            pass
        finally:
            task.cancel()

    return app


def run(nets_, recon=None, port=8787, **kw):
    import uvicorn
    app = create_app(nets_, recon, **kw)
    uvicorn.run(app, host="127.0.0.1", port=port, log_level="warning")
