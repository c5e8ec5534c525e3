"""Policy evaluation: success-ratio scenarios and gait traces.

Evaluation exercises the deployable student path end to end: noisy
proprioceptive history, a depth scan rasterized into the strip, and the
reconstruction network filling occlusion holes. Trials are vectorized as
parallel environments on a shared scenario terrain; per-trial variation
(reset pose jitter) uses seeds derived from (seed, trial index) so trials
are independent and reproducible.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import obs, perception, policy, sim, terrain

FALL_CAUSES = ("fell", "fault", "timeout")


@dataclass
class EvalScenario:
    name: str
    kind: str                  # flat | stairs | gap
    param: float = 0.0         # stair rise (m) or gap width (m)
    vx: float = 0.5
    trials: int = 50
    distance: float = 6.0      # required travel (m) along the command sign
    max_time: float = 30.0

    def __post_init__(self):
        if self.trials < 20:
            raise ValueError("reported ratios need at least 20 trials")


@dataclass
class SuccessReport:
    scenario: str
    successes: int
    trials: int
    ratio: float
    mean_freq: float
    mean_speed: float
    fall_causes: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "scenario": self.scenario, "successes": self.successes,
            "trials": self.trials, "ratio": self.ratio,
            "mean_freq": self.mean_freq, "mean_speed": self.mean_speed,
            "fall_causes": dict(self.fall_causes),
        }


def scenario_profile(kind: str, param: float,
                     span: float = terrain.DEFAULT_SPAN) -> terrain.TerrainProfile:
    """Deterministic scenario terrain with an exact physical parameter
    (stair rise or gap width in meters) rather than a curriculum level."""
    n = int(round(span / terrain.RESOLUTION)) + 1
    x = -span / 2 + terrain.RESOLUTION * np.arange(n)
    if kind == "flat":
        h = np.zeros(n)
    elif kind == "stairs":
        d = np.abs(x) - terrain.START_ZONE
        steps = np.floor(np.maximum(d, 0.0) / terrain.STAIR_RUN)
        h = param * steps
    elif kind == "gap":
        d = np.abs(x) - terrain.START_ZONE
        in_gap = (d >= 0) & (np.mod(d, 2.0) < param)
        h = np.where(in_gap, terrain.GAP_DEPTH, 0.0)
    else:
        raise ValueError(f"unknown scenario terrain {kind!r}")
    return terrain.TerrainProfile(samples=h, origin_x=float(x[0]), kind=kind,
                                  level=0, params={"param": param})


class StudentRunner:
    """Batched closed-loop student policy with the full perception stack."""

    def __init__(self, nets_, recon, n, bank, model, rng_reset,
                 noise=None, no_gait=False):
        self.nets = nets_
        self.recon = recon
        self.bank = bank
        self.model = model
        self.no_gait = no_gait
        self.noise = noise if noise is not None else obs.NoiseModel()
        self.state = sim.SimState.zeros(n)
        mask = np.ones(n, dtype=bool)
        for i in range(n):
            one = np.zeros(n, dtype=bool)
            one[i] = True
            sim.reset_envs(self.state, one, bank, rng_reset[i])
        del mask
        self.gait = policy.GaitState(n)
        self.history = obs.ObsHistory(n)
        self.prev_action = np.zeros((n, policy.ACTION_DIM))
        self.first = True

    def strip(self):
        dist, occ, dirs = obs.depth_scan(self.state, self.bank, self.model)
        base_pose = self.state.q[:, [sim.X, sim.Z, sim.PITCH]]
        values, mask = perception.rasterize(dist, occ, dirs, base_pose)
        if self.recon is None:
            return values
        return perception.infer(self.recon, values, mask)

    def step(self, command, rng_noise):
        proprio = obs.assemble_proprio(self.state, command,
                                       self.prev_action[:, :6],
                                       self.gait.phase, self.gait.freq)
        noisy = obs.add_noise(proprio, self.noise, rng_noise)
        self.history.push(noisy)
        if self.first:
            self.history.reset(noisy)
            self.first = False
        strip = self.strip()
        action, _, _, _ = policy.act_student(
            self.nets, self.history.flat(), strip, noisy, rng_noise,
            deterministic=True)
        action = action.astype(np.float64)
        if self.no_gait:
            self.gait.freq[:] = policy.FREQ_NOMINAL
            self.gait.ring[:] = policy.FREQ_NOMINAL
        else:
            policy.postprocess_freq(action[:, 6], self.gait)
        targets = policy.joint_targets(action)
        sim.control_step(self.state, targets, self.model, self.bank)
        self.gait.phase = policy.phase_update(self.gait.phase, self.gait.freq)
        self.prev_action = action
        return action


def success_ratio(nets_, recon, scenario: EvalScenario, seed: int,
                  noise=None) -> SuccessReport:
    """Deterministic given seed: fraction of trials traveling the required
    distance along the command sign without falling."""
    n = scenario.trials
    profile = scenario_profile(scenario.kind, scenario.param)
    bank = sim.TerrainBank([profile] * n)
    model = sim.RobotModel.nominal(n)
    rngs = [np.random.default_rng([seed, trial]) for trial in range(n)]
    runner = StudentRunner(nets_, recon, n, bank, model, rngs, noise=noise)
    rng_noise = np.random.default_rng([seed, 10 ** 6])

    command = np.full(n, scenario.vx)
    start_x = runner.state.q[:, sim.X].copy()
    sign = np.sign(scenario.vx) if scenario.vx else 1.0
    steps = int(round(scenario.max_time / policy.CONTROL_DT))

    alive = np.ones(n, dtype=bool)
    succeeded = np.zeros(n, dtype=bool)
    cause = np.array(["timeout"] * n, dtype=object)
    freq_sum = np.zeros(n)
    freq_cnt = np.zeros(n)
    end_t = np.full(n, scenario.max_time)
    end_x = runner.state.q[:, sim.X].copy()

    for _ in range(steps):
        runner.step(command, rng_noise)
        freq_sum[alive] += runner.gait.freq[alive]
        freq_cnt[alive] += 1
        status = sim.termination_check(runner.state, bank, model)
        traveled = (runner.state.q[:, sim.X] - start_x) * sign
        newly_done = alive & ((status != sim.RUNNING)
                              | (traveled >= scenario.distance))
        for i in np.flatnonzero(newly_done):
            end_t[i] = runner.state.t[i]
            end_x[i] = runner.state.q[i, sim.X]
            if traveled[i] >= scenario.distance and status[i] == sim.RUNNING:
                succeeded[i] = True
            else:
                cause[i] = "fault" if status[i] == sim.FAULT else "fell"
        alive &= ~newly_done
        if not alive.any():
            break
    end_x[alive] = runner.state.q[alive, sim.X]

    causes = {}
    for i in range(n):
        if not succeeded[i]:
            causes[cause[i]] = causes.get(cause[i], 0) + 1
    speed = np.abs(end_x - start_x) / np.maximum(end_t, policy.CONTROL_DT)
    return SuccessReport(
        scenario=scenario.name,
        successes=int(succeeded.sum()),
        trials=n,
        ratio=float(succeeded.sum() / n),
        mean_freq=float((freq_sum / np.maximum(freq_cnt, 1)).mean()),
        mean_speed=float(speed.mean()),
        fall_causes=causes,
    )


FIG6_GRID = (
    EvalScenario("stairs15_back", "stairs", 0.15, vx=-0.5),
    EvalScenario("stairs20_fwd05", "stairs", 0.20, vx=0.5),
    EvalScenario("stairs20_fwd08", "stairs", 0.20, vx=0.8),
    EvalScenario("gap40_fwd05", "gap", 0.40, vx=0.5),
)


def gait_trace(nets_, recon, command_steps, duration, seed,
               kind="flat", param=0.0, noise=None, no_gait=False):
    """50 Hz time series {t, v_cmd, f, phase, base_x} for one rollout.

    `command_steps` is a list of (t_start, vx); the active command is the
    last one whose start time has passed.
    """
    profile = scenario_profile(kind, param)
    bank = sim.TerrainBank([profile])
    model = sim.RobotModel.nominal(1)
    runner = StudentRunner(nets_, recon, 1, bank, model,
                           [np.random.default_rng([seed, 0])],
                           noise=noise, no_gait=no_gait)
    rng_noise = np.random.default_rng([seed, 10 ** 6])
    rows = []
    steps = int(round(duration / policy.CONTROL_DT))
    for k in range(steps):
        t = k * policy.CONTROL_DT
        vx = 0.0
        for t0, v in command_steps:
            if t >= t0:
                vx = v
        runner.step(np.array([vx]), rng_noise)
        rows.append({
            "t": round(t + policy.CONTROL_DT, 6),
            "v_cmd": vx,
            "f": float(runner.gait.freq[0]),
            "phase": float(runner.gait.phase[0]),
            "base_x": float(runner.state.q[0, sim.X]),
        })
        if sim.termination_check(runner.state, bank, model)[0] != sim.RUNNING:
            break
    return rows


def write_trace_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["t", "v_cmd", "f",
                                                "phase", "base_x"])
        writer.writeheader()
        writer.writerows(rows)
