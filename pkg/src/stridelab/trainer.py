"""Successive teacher-student PPO.

The trainer owns a vectorized batch of simulated robots, collects rollouts
under the switch gate (teacher environments act from privileged state and
ground-truth terrain strips, student environments from noisy proprioceptive
history and noisy strips), and optimizes three objectives: a clipped PPO
surrogate with stream-dependent gradient routing, a latent reconstruction
loss that pulls the student encoders toward the teacher's latents, and a
mirror-symmetry loss on the policy mean.

Gradient flow is strict: the teacher PPO stream updates teacher encoders
plus the shared policy head; the student PPO stream updates the head only;
the reconstruction loss updates student encoders only; the value loss
updates the value network only.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import nets, obs, perception, policy, rewards, sim, terrain

MODES = ("sts", "cts", "baseline", "sts-no-gait")

EPISODE_TIMEOUT = 10.0         # seconds: one command hold per episode; the
                               # terrain curriculum updates on episode end, so
                               # shorter episodes double promotion throughput
PUSH_INTERVAL = 5.0            # seconds between base pushes
PUSH_IMPULSE_MAX = 10.0        # N*s during training (milder than the sim cap;
                               # fallen episodes demote the terrain curriculum,
                               # so harder pushes stall level progression)
PROBE_BATCH = 512              # reconstruction probe rows while lambda = 0
CHECKPOINT_EVERY = 100


@dataclass
class PpoConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    lr: float = 3e-4
    epochs: int = 5
    minibatches: int = 4
    entropy_coef: float = 0.005
    value_coef: float = 1.0
    grad_clip: float = 1.0
    n_envs: int = 256
    horizon: int = 24
    iterations: int = 2000
    kl_stop: float = 0.2
    mirror_weight: float = 0.5
    lambda_max: float = 0.5
    rec_lr: float = 1e-3
    rec_steps: int = 4

    def __post_init__(self):
        if not 0.0 < self.clip < 1.0:
            raise ValueError("clip must be in (0, 1)")
        if not (0.0 < self.gamma <= 1.0 and 0.0 < self.lam <= 1.0):
            raise ValueError("gamma and lam must be in (0, 1]")

    @property
    def ramp_start(self) -> int:
        return self.iterations // 2


def gate_lambda(k: int, cfg: PpoConfig, mode: str = "sts"):
    """Student ratio lambda_k and the (teacher, student) env partition.

    The partition is deterministic: the first ceil((1-lambda)N) environment
    indices are teacher environments.
    """
    if k < 0:
        raise ValueError("iteration index must be non-negative")
    if mode == "baseline":
        lam = 1.0
    elif mode == "cts":
        lam = cfg.lambda_max
    else:
        k1 = cfg.ramp_start
        if k < k1:
            lam = 0.0
        else:
            lam = cfg.lambda_max * (k - k1) / max(cfg.iterations - k1, 1)
        lam = min(lam, cfg.lambda_max)
    n_teacher = int(np.ceil((1.0 - lam) * cfg.n_envs))
    is_teacher = np.zeros(cfg.n_envs, dtype=bool)
    is_teacher[:n_teacher] = True
    return lam, is_teacher


class VecEnv:
    """Batch of simulated robots with terrain curriculum, command schedule,
    gait state, observation history, and episode bookkeeping."""

    def __init__(self, n_envs, rng, no_gait=False,
                 reward_cfg=None, noise=None, randomization=True):
        self.n = n_envs
        self.no_gait = no_gait
        self.reward_cfg = reward_cfg or rewards.RewardConfig()
        self.noise = noise or obs.NoiseModel()
        self.model = sim.RobotModel.nominal(n_envs)
        if randomization:
            self.model = sim.randomize(self.model,
                                       sim.RandomizationRanges(), rng)
        self.curriculum = terrain.CurriculumState.for_envs(n_envs)
        profiles = [self._new_profile(0, rng) for _ in range(n_envs)]
        self.bank = sim.TerrainBank(profiles)
        self.state = sim.SimState.zeros(n_envs)
        sim.reset_envs(self.state, np.ones(n_envs, dtype=bool), self.bank, rng)
        self.schedule = obs.CommandSchedule(n_envs, rng)
        self.gait = policy.GaitState(n_envs)
        self.history = obs.ObsHistory(n_envs)
        self.prev_action = np.zeros((n_envs, policy.ACTION_DIM))
        self.prev_prev_action = np.zeros((n_envs, policy.ACTION_DIM))
        self.steps_alive = np.zeros(n_envs, dtype=np.int64)
        self.last_timeout = np.zeros(n_envs, dtype=bool)
        self.ep_start_x = self.state.q[:, sim.X].copy()
        self.cmd_integral = np.zeros(n_envs)
        self.command = self.schedule.value.copy()
        self.pending_reset = np.ones(n_envs, dtype=bool)
        self.push_every = int(round(PUSH_INTERVAL / policy.CONTROL_DT))
        self.episode_rewards = np.zeros(n_envs)
        self.finished_rewards = []   # rolling list of completed episode returns

    @staticmethod
    def _new_profile(level, rng):
        kind = terrain.KINDS[rng.integers(len(terrain.KINDS))]
        return terrain.generate(kind, level, int(rng.integers(2 ** 31)))

    def observe(self, rng):
        """Observation bundle for the current state.

        Pushes one (noisy) proprio frame into the history per call; call
        exactly once per control step.
        """
        self.command = self.schedule.step(self.state.t, rng,
                                          reset_mask=self.pending_reset)
        proprio = obs.assemble_proprio(self.state, self.command,
                                       self.prev_action[:, :6],
                                       self.gait.phase, self.gait.freq)
        s_pri = obs.assemble_priv(self.state, self.bank)
        strip_gt = perception.ground_truth_strip(self.state, self.bank)
        proprio_noisy = obs.add_noise(proprio, self.noise, rng)
        strip_noisy = obs.add_strip_noise(strip_gt, self.noise, rng)
        self.history.push(proprio_noisy)
        if self.pending_reset.any():
            self.history.reset(proprio_noisy, self.pending_reset)
        self.pending_reset = np.zeros(self.n, dtype=bool)
        return {
            "proprio": proprio, "proprio_noisy": proprio_noisy,
            "s_pri": s_pri, "strip_gt": strip_gt, "strip_noisy": strip_noisy,
            "history": self.history.flat(),
        }

    def bootstrap_inputs(self):
        """Value-network inputs for the current state, without touching the
        history or the noise stream (used for the GAE bootstrap)."""
        proprio = obs.assemble_proprio(self.state, self.command,
                                       self.prev_action[:, :6],
                                       self.gait.phase, self.gait.freq)
        s_pri = obs.assemble_priv(self.state, self.bank)
        strip_gt = perception.ground_truth_strip(self.state, self.bank)
        return s_pri, strip_gt, proprio

    def step(self, action, rng):
        """Advance one control step. Returns (reward, done, breakdown)."""
        action = np.asarray(action, dtype=np.float64)
        if self.no_gait:
            self.gait.freq[:] = policy.FREQ_NOMINAL
            self.gait.ring[:] = policy.FREQ_NOMINAL
            f_unclipped = np.full(self.n, policy.FREQ_NOMINAL)
        else:
            _, f_unclipped = policy.postprocess_freq(action[:, 6], self.gait)

        targets = policy.joint_targets(action)
        sim.control_step(self.state, targets, self.model, self.bank)
        self.gait.phase = policy.phase_update(self.gait.phase, self.gait.freq)
        leg_phase = policy.leg_phases(self.gait.phase)

        breakdown = rewards.compute(
            self.state, self.model, self.bank, self.command,
            (action, self.prev_action, self.prev_prev_action),
            f_unclipped, leg_phase, self.reward_cfg)
        reward = breakdown.total

        self.prev_prev_action = self.prev_action
        self.prev_action = action
        self.steps_alive += 1
        self.cmd_integral += self.command * self.reward_cfg.dt
        self.episode_rewards += reward

        status = sim.termination_check(self.state, self.bank, self.model)
        fell = status != sim.RUNNING
        timeout = self.steps_alive * policy.CONTROL_DT >= EPISODE_TIMEOUT
        done = fell | timeout
        # pure time limits are not task failures; collect() bootstraps the
        # value through them so advantages near a timeout stay unbiased
        self.last_timeout = timeout & ~fell

        push_due = (self.steps_alive % self.push_every == 0) & ~done
        if push_due.any():
            sim.apply_push(self.state, self.model, push_due, rng,
                           impulse_max=PUSH_IMPULSE_MAX)

        if done.any():
            self._reset_done(done, fell, rng)
        return reward, done, breakdown

    def _reset_done(self, done, fell, rng):
        traveled = self.state.q[:, sim.X] - self.ep_start_x
        for env in np.flatnonzero(done):
            commanded = self.cmd_integral[env]
            dist = traveled[env] * np.sign(commanded) if commanded else 0.0
            level = terrain.curriculum_update(
                self.curriculum, env, float(dist), float(abs(commanded)),
                bool(fell[env]))
            self.bank.replace_env(env, self._new_profile(level, rng))
            self.finished_rewards.append(float(self.episode_rewards[env]))
        sim.reset_envs(self.state, done, self.bank, rng)
        self.gait.reset(done)
        self.prev_action[done] = 0.0
        self.prev_prev_action[done] = 0.0
        self.steps_alive[done] = 0
        self.cmd_integral[done] = 0.0
        self.episode_rewards[done] = 0.0
        self.ep_start_x[done] = self.state.q[done, sim.X]
        self.pending_reset = done.copy()
        if len(self.finished_rewards) > 4 * self.n:
            self.finished_rewards = self.finished_rewards[-4 * self.n:]


@dataclass
class RolloutBuffer:
    """(T, N, ...) arrays of raw network inputs and PPO statistics; every
    collected step belongs to exactly one stream via `is_teacher`."""

    proprio: np.ndarray
    proprio_noisy: np.ndarray
    s_pri: np.ndarray
    strip_gt: np.ndarray
    strip_noisy: np.ndarray
    history: np.ndarray
    action: np.ndarray
    logp: np.ndarray
    value: np.ndarray
    reward: np.ndarray
    done: np.ndarray
    timeout: np.ndarray          # (T, N) done was a pure time limit, not a fall
    is_teacher: np.ndarray       # (N,)
    bootstrap: np.ndarray        # (N,)
    reward_terms: dict           # term -> mean over the rollout

    @property
    def horizon(self):
        return self.reward.shape[0]

    @property
    def n_envs(self):
        return self.reward.shape[1]


def collect(env: VecEnv, nets_: policy.PolicyNets, is_teacher, horizon,
            rng) -> RolloutBuffer:
    T, N = horizon, env.n
    buf = {
        "proprio": np.zeros((T, N, obs.PROPRIO_DIM), np.float32),
        "proprio_noisy": np.zeros((T, N, obs.PROPRIO_DIM), np.float32),
        "s_pri": np.zeros((T, N, obs.PRIV_DIM), np.float32),
        "strip_gt": np.zeros((T, N, obs.STRIP_CELLS), np.float32),
        "strip_noisy": np.zeros((T, N, obs.STRIP_CELLS), np.float32),
        "history": np.zeros((T, N, obs.HISTORY_DIM), np.float32),
        "action": np.zeros((T, N, policy.ACTION_DIM), np.float32),
        "logp": np.zeros((T, N), np.float32),
        "value": np.zeros((T, N), np.float32),
        "reward": np.zeros((T, N), np.float32),
        "done": np.zeros((T, N), bool),
        "timeout": np.zeros((T, N), bool),
    }
    term_sums = {}
    t_rows = np.flatnonzero(is_teacher)
    s_rows = np.flatnonzero(~is_teacher)

    for t in range(T):
        o = env.observe(rng)
        action = np.zeros((N, policy.ACTION_DIM), np.float32)
        logp = np.zeros(N, np.float32)
        if t_rows.size:
            a, lp, _, _ = policy.act_teacher(
                nets_, o["s_pri"][t_rows], o["strip_gt"][t_rows],
                o["proprio"][t_rows], rng)
            action[t_rows], logp[t_rows] = a, lp
        if s_rows.size:
            a, lp, _, _ = policy.act_student(
                nets_, o["history"][s_rows], o["strip_noisy"][s_rows],
                o["proprio_noisy"][s_rows], rng)
            action[s_rows], logp[s_rows] = a, lp
        value = nets_.value.forward(policy.value_input(
            o["s_pri"], o["strip_gt"], o["proprio"]))[:, 0]

        reward, done, breakdown = env.step(action, rng)
        for k, v in breakdown.terms.items():
            term_sums[k] = term_sums.get(k, 0.0) + float(v.mean())

        for k in ("proprio", "proprio_noisy", "s_pri",
                  "strip_gt", "strip_noisy", "history"):
            buf[k][t] = o[k]
        buf["action"][t] = action
        buf["logp"][t] = logp
        buf["value"][t] = value
        buf["reward"][t] = reward
        buf["done"][t] = done
        buf["timeout"][t] = env.last_timeout

    s_pri, strip_gt, proprio = env.bootstrap_inputs()
    bootstrap = nets_.value.forward(
        policy.value_input(s_pri, strip_gt, proprio))[:, 0]
    terms = {k: v / T for k, v in term_sums.items()}
    return RolloutBuffer(is_teacher=np.asarray(is_teacher, bool),
                         bootstrap=bootstrap.astype(np.float32),
                         reward_terms=terms, **buf)


def gae(reward, value, done, bootstrap, gamma, lam):
    """Standard GAE recursion over (T, N) arrays; `done` cuts the episode
    after the step where it is set. Returns (advantages, returns)."""
    reward = np.asarray(reward, np.float64)
    value = np.asarray(value, np.float64)
    done = np.asarray(done, bool)
    T = reward.shape[0]
    adv = np.zeros_like(reward)
    next_value = np.asarray(bootstrap, np.float64)
    carry = np.zeros(reward.shape[1:], np.float64)
    for t in range(T - 1, -1, -1):
        live = ~done[t]
        delta = reward[t] + gamma * next_value * live - value[t]
        carry = delta + gamma * lam * live * carry
        adv[t] = carry
        next_value = value[t]
    return adv, adv + value


def normalize_advantages(adv):
    flat = adv - adv.mean()
    std = flat.std()
    return flat / (std + 1e-8)


def _flatten(buf: RolloutBuffer, adv, ret):
    """Row-major (T*N, ...) views plus per-row stream tags."""
    T, N = buf.horizon, buf.n_envs
    rows = {
        "proprio": buf.proprio.reshape(T * N, -1),
        "proprio_noisy": buf.proprio_noisy.reshape(T * N, -1),
        "s_pri": buf.s_pri.reshape(T * N, -1),
        "strip_gt": buf.strip_gt.reshape(T * N, -1),
        "strip_noisy": buf.strip_noisy.reshape(T * N, -1),
        "history": buf.history.reshape(T * N, -1),
        "action": buf.action.reshape(T * N, -1),
        "logp": buf.logp.reshape(T * N),
        "adv": adv.reshape(T * N).astype(np.float32),
        "ret": ret.reshape(T * N).astype(np.float32),
        "is_teacher": np.broadcast_to(buf.is_teacher, (T, N)).reshape(T * N),
    }
    return rows


def _route_latent_grads(nets_, g_z, t_rows, s_rows, mode):
    """Send policy-input latent gradients to the encoders whose caches hold
    the matching forward pass. Teacher streams train the teacher encoders;
    the student PPO stream trains the head only, except in baseline mode
    where the student encoders are the trained path."""
    half = policy.LATENT_DIM
    if mode == "baseline":
        if s_rows.size:
            nets_.e_pro.backward(g_z[s_rows, :half])
            nets_.e_per_s.backward(g_z[s_rows, half:])
    else:
        if t_rows.size:
            nets_.e_pri.backward(g_z[t_rows, :half])
            nets_.e_per_t.backward(g_z[t_rows, half:])


def _forward_policy(nets_, mb, t_rows, s_rows):
    """Encoder + policy-mean forward over one minibatch, teacher rows on the
    privileged path and student rows on the noisy path."""
    B = mb["action"].shape[0]
    z = np.zeros((B, policy.Z_DIM), np.float32)
    if t_rows.size:
        z[t_rows] = policy.teacher_latent(nets_, mb["s_pri"][t_rows],
                                          mb["strip_gt"][t_rows])
    if s_rows.size:
        z[s_rows] = policy.student_latent(nets_, mb["history"][s_rows],
                                          mb["strip_noisy"][s_rows])
    proprio_in = mb["proprio"].copy()
    if s_rows.size:
        proprio_in[s_rows] = mb["proprio_noisy"][s_rows]
    mean = nets_.pi.forward(
        np.concatenate([z, policy.scale_proprio(proprio_in)], axis=1))
    return z, proprio_in, mean


def mirror_inputs(nets_, mb, rows, mode):
    """Latent and proprio inputs for the mirrored copies of `rows`."""
    if mode == "baseline":
        zm = policy.student_latent(
            nets_, policy.mirror_history(mb["history"][rows]),
            mb["strip_noisy"][rows])
        pm = policy.mirror_proprio(mb["proprio_noisy"][rows])
    else:
        zm = policy.teacher_latent(
            nets_, policy.mirror_priv(mb["s_pri"][rows]),
            mb["strip_gt"][rows])
        pm = policy.mirror_proprio(mb["proprio"][rows])
    return zm, pm


def ppo_minibatch(nets_, mb, cfg: PpoConfig, mode: str, mirror=True):
    """Losses and accumulated gradients for one minibatch.

    Leaves gradients in the modules (caller zeroes and steps); returns a
    dict with loss_pi, loss_v, loss_mirror, entropy, and kl.
    """
    B = mb["action"].shape[0]
    t_rows = np.flatnonzero(mb["is_teacher"])
    s_rows = np.flatnonzero(~mb["is_teacher"])
    act_rows = s_rows if mode == "baseline" else t_rows

    z, proprio_in, mean = _forward_policy(nets_, mb, t_rows, s_rows)
    logp_new = nets_.head.log_prob(mean, mb["action"])
    ratio = np.exp(logp_new - mb["logp"])
    adv = mb["adv"]
    surr1 = ratio * adv
    surr2 = np.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip) * adv
    loss_pi = -float(np.minimum(surr1, surr2).mean())
    kl = float(np.mean(mb["logp"] - logp_new))

    # d(-mean(min(surr1, surr2)))/d logp; the clipped branch has zero slope
    g_logp = np.where(surr1 <= surr2, -surr1 / B, 0.0).astype(np.float32)

    # value loss on both streams; gradients only reach the value network
    v_in = policy.value_input(mb["s_pri"], mb["strip_gt"], mb["proprio"])
    v = nets_.value.forward(v_in)[:, 0]
    err = v - mb["ret"]
    loss_v = float(np.mean(err ** 2))
    nets_.value.backward(
        (cfg.value_coef * 2.0 * err / B)[:, None].astype(np.float32))

    nets_.head.entropy_backward(
        np.full(policy.ACTION_DIM, -cfg.entropy_coef, np.float32))
    entropy = nets_.head.entropy()

    loss_mirror = 0.0
    g_mirror = None
    if mirror and cfg.mirror_weight > 0.0 and act_rows.size:
        m1 = mean[act_rows]
        zm, pm = mirror_inputs(nets_, mb, act_rows, mode)
        m2 = nets_.pi.forward(
            np.concatenate([zm, policy.scale_proprio(pm)], axis=1))
        diff = m2 - policy.mirror_action(m1)
        loss_mirror = float(np.mean(np.sum(diff ** 2, axis=1)))
        g_m2 = (cfg.mirror_weight * 2.0 / act_rows.size) * diff
        g_in = nets_.pi.backward(g_m2.astype(np.float32))
        g_zm = g_in[:, :policy.Z_DIM]
        if mode == "baseline":
            nets_.e_pro.backward(g_zm[:, :policy.LATENT_DIM])
            nets_.e_per_s.backward(g_zm[:, policy.LATENT_DIM:])
        else:
            nets_.e_pri.backward(g_zm[:, :policy.LATENT_DIM])
            nets_.e_per_t.backward(g_zm[:, policy.LATENT_DIM:])
        g_mirror = -(cfg.mirror_weight * 2.0 / act_rows.size) * \
            policy.mirror_action(diff)
        # restore the original-forward caches for the PPO backward below
        z, proprio_in, mean = _forward_policy(nets_, mb, t_rows, s_rows)

    g_mean = nets_.head.log_prob_backward(mean, mb["action"], g_logp)
    if g_mirror is not None:
        g_mean = g_mean.copy()
        g_mean[act_rows] += g_mirror
    g_in = nets_.pi.backward(g_mean.astype(np.float32))
    _route_latent_grads(nets_, g_in[:, :policy.Z_DIM], t_rows, s_rows, mode)

    return {"loss_pi": loss_pi, "loss_v": loss_v,
            "loss_mirror": loss_mirror, "entropy": entropy, "kl": kl}


def clip_grad_norm(grads, max_norm):
    total = np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2))
                        for g in grads))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            g *= scale
    return total


def rl_modules(nets_: policy.PolicyNets, mode: str):
    enc = (nets_.student_encoder_modules() if mode == "baseline"
           else nets_.teacher_encoder_modules())
    return enc + nets_.head_modules() + [nets_.value]


def ppo_update(nets_, rows, cfg: PpoConfig, mode, opt, rng):
    """Epochs of shuffled minibatch updates with KL early stopping."""
    n = rows["action"].shape[0]
    modules = rl_modules(nets_, mode)
    params = [p for m in modules for p in m.params()]
    grads = [g for m in modules for g in m.grads()]
    stats = {"loss_pi": [], "loss_v": [], "loss_mirror": [], "kl": []}
    stop = False
    for _ in range(cfg.epochs):
        if stop:
            break
        order = rng.permutation(n)
        for chunk in np.array_split(order, cfg.minibatches):
            mb = {k: v[chunk] for k, v in rows.items()}
            nets.zero_grads(nets_.all_modules())
            out = ppo_minibatch(nets_, mb, cfg, mode)
            if out["kl"] > cfg.kl_stop:
                stop = True
                break
            clip_grad_norm(grads, cfg.grad_clip)
            if not opt.step(grads):
                raise FloatingPointError("non-finite PPO gradients")
            for k in stats:
                stats[k].append(out[k])
    return {k: float(np.mean(v)) if v else 0.0 for k, v in stats.items()}


def rec_loss_and_grads(nets_, history, strip_noisy, s_pri, strip_gt):
    """L^rec = mean squared latent error; gradients go to the student
    encoders only (teacher latents are constants)."""
    z_t = policy.teacher_latent(nets_, s_pri, strip_gt)
    z_s = policy.student_latent(nets_, history, strip_noisy)
    diff = z_s - z_t
    loss = float(np.mean(diff ** 2))
    g = (2.0 / diff.size) * diff.astype(np.float32)
    nets_.e_pro.backward(g[:, :policy.LATENT_DIM])
    nets_.e_per_s.backward(g[:, policy.LATENT_DIM:])
    return loss


def rec_update(nets_, rows, cfg: PpoConfig, lam, opt, rng,
               probes=True):
    """Reconstruction steps on student-stream rows, or on probe batches of
    teacher-visited states while lambda = 0."""
    student = np.flatnonzero(~rows["is_teacher"])
    if student.size == 0:
        if not probes:
            return 0.0
        pool = np.arange(rows["action"].shape[0])
    else:
        pool = student
    modules = nets_.student_encoder_modules()
    grads = [g for m in modules for g in m.grads()]
    losses = []
    for _ in range(cfg.rec_steps):
        pick = rng.choice(pool, size=min(PROBE_BATCH, pool.size),
                          replace=False)
        nets.zero_grads(modules)
        loss = rec_loss_and_grads(
            nets_, rows["history"][pick], rows["strip_noisy"][pick],
            rows["s_pri"][pick], rows["strip_gt"][pick])
        if not opt.step(grads):
            raise FloatingPointError("non-finite reconstruction gradients")
        losses.append(loss)
    return float(np.mean(losses)) if losses else 0.0


def train(cfg: PpoConfig, mode: str, seed: int, out_dir,
          rec_probes: bool = True, log=None, noise=None, reward_cfg=None):
    """Full training run; writes metrics.jsonl and periodic checkpoints.

    Returns (nets, metrics list). On a non-finite loss the run aborts,
    keeping the last saved checkpoint.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    nets_ = policy.PolicyNets(rng)
    env = VecEnv(cfg.n_envs, rng, no_gait=(mode == "sts-no-gait"),
                 reward_cfg=reward_cfg, noise=noise)
    opt_rl = nets.Adam([p for m in rl_modules(nets_, mode)
                        for p in m.params()], lr=cfg.lr)
    opt_rec = nets.Adam([p for m in nets_.student_encoder_modules()
                         for p in m.params()], lr=cfg.rec_lr)
    metrics = []
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    aborted = False

    with open(metrics_path, "w") as fh:
        for k in range(cfg.iterations):
            lam, is_teacher = gate_lambda(k, cfg, mode)
            try:
                buf = collect(env, nets_, is_teacher, cfg.horizon, rng)
                # pure time limits are truncations, not failures: fold the
                # critic's own estimate back into the cut step so the done
                # mask in the GAE recursion does not zero out post-timeout
                # value and poison the advantage normalization
                rew = buf.reward + cfg.gamma * buf.value * buf.timeout
                adv, ret = gae(rew, buf.value, buf.done,
                               buf.bootstrap, cfg.gamma, cfg.lam)
                rows = _flatten(buf, normalize_advantages(adv), ret)
                stats = ppo_update(nets_, rows, cfg, mode, opt_rl, rng)
                loss_rec = 0.0
                if mode != "baseline":
                    loss_rec = rec_update(nets_, rows, cfg, lam, opt_rec,
                                          rng, probes=rec_probes)
            except FloatingPointError:
                aborted = True
            if aborted:
                break

            if env.finished_rewards:
                mean_reward = float(np.mean(env.finished_rewards[-cfg.n_envs:]))
            else:
                mean_reward = float(env.episode_rewards.mean())
            record = {
                "iter": k,
                "lambda": round(lam, 10),
                "mean_reward": mean_reward,
                "terrain_level_mean": float(env.curriculum.levels.mean()),
                "loss_pi": stats["loss_pi"],
                "loss_v": stats["loss_v"],
                "loss_rec": loss_rec,
                "loss_mirror": stats["loss_mirror"],
                "kl": stats["kl"],
                "reward_terms": {kk: round(vv, 8)
                                 for kk, vv in buf.reward_terms.items()},
            }
            metrics.append(record)
            fh.write(json.dumps(record) + "\n")
            fh.flush()
            if log is not None and k % log == 0:
                print(f"[{mode} seed {seed}] iter {k} lambda {lam:.3f} "
                      f"reward {mean_reward:.2f} "
                      f"level {record['terrain_level_mean']:.2f}", flush=True)
            if (k + 1) % CHECKPOINT_EVERY == 0 or k + 1 == cfg.iterations:
                save_policy(os.path.join(out_dir, f"ckpt_{k + 1:06d}.bin"),
                            nets_)
    if aborted:
        with open(os.path.join(out_dir, "ABORTED"), "w") as fh:
            fh.write("non-finite loss; last good checkpoint retained\n")
    return nets_, metrics


def save_policy(path, nets_: policy.PolicyNets):
    nets.save_checkpoint(path, nets_.params(), nets_.arch_description())


def load_policy(path, rng=None) -> policy.PolicyNets:
    nets_ = policy.PolicyNets(rng or np.random.default_rng(0))
    nets.load_checkpoint(path, nets_.params(), nets_.arch_description())
    return nets_
