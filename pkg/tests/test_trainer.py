import json
import os

import numpy as np
import pytest

from stridelab import nets, obs, policy, trainer


def small_cfg(**kw):
    base = dict(n_envs=8, horizon=8, iterations=4)
    base.update(kw)
    return trainer.PpoConfig(**base)


def make_minibatch(rng, n, n_teacher):
    mb = {
        "proprio": rng.standard_normal((n, obs.PROPRIO_DIM)).astype(np.float32),
        "proprio_noisy": rng.standard_normal((n, obs.PROPRIO_DIM)).astype(np.float32),
        "s_pri": rng.standard_normal((n, obs.PRIV_DIM)).astype(np.float32),
        "strip_gt": rng.standard_normal((n, obs.STRIP_CELLS)).astype(np.float32),
        "strip_noisy": rng.standard_normal((n, obs.STRIP_CELLS)).astype(np.float32),
        "history": rng.standard_normal((n, obs.HISTORY_DIM)).astype(np.float32),
        "action": rng.standard_normal((n, policy.ACTION_DIM)).astype(np.float32),
        "adv": rng.standard_normal(n).astype(np.float32),
        "ret": rng.standard_normal(n).astype(np.float32),
        "is_teacher": np.arange(n) < n_teacher,
    }
    return mb


def fill_logp(nets_, mb, offset=0.0):
    """Store behavior log-probs consistent with the current nets."""
    t = np.flatnonzero(mb["is_teacher"])
    s = np.flatnonzero(~mb["is_teacher"])
    logp = np.zeros(mb["action"].shape[0], np.float32)
    if t.size:
        z = policy.teacher_latent(nets_, mb["s_pri"][t], mb["strip_gt"][t])
        mean = nets_.pi.forward(
            np.concatenate([z, policy.scale_proprio(mb["proprio"][t])], axis=1))
        logp[t] = nets_.head.log_prob(mean, mb["action"][t])
    if s.size:
        z = policy.student_latent(nets_, mb["history"][s], mb["strip_noisy"][s])
        mean = nets_.pi.forward(
            np.concatenate([z, policy.scale_proprio(mb["proprio_noisy"][s])],
                           axis=1))
        logp[s] = nets_.head.log_prob(mean, mb["action"][s])
    mb["logp"] = logp + offset
    return mb


def module_grads(modules):
    return [g for m in modules for g in m.grads()]


def test_config_validation():
    with pytest.raises(ValueError):
        trainer.PpoConfig(clip=1.5)
    with pytest.raises(ValueError):
        trainer.PpoConfig(gamma=0.0)


def test_gate_endpoints():
    cfg = trainer.PpoConfig()
    lam, is_t = trainer.gate_lambda(0, cfg, "sts")
    assert lam == 0.0 and is_t.all()
    lam, _ = trainer.gate_lambda(cfg.iterations, cfg, "sts")
    assert lam == pytest.approx(0.5)
    k1 = cfg.ramp_start
    mid = k1 + (cfg.iterations - k1) // 2
    lam, is_t = trainer.gate_lambda(mid, cfg, "sts")
    assert lam == pytest.approx(0.25)
    assert is_t.sum() == int(np.ceil(0.75 * cfg.n_envs))


def test_gate_monotone_and_bounded():
    cfg = trainer.PpoConfig()
    lams = [trainer.gate_lambda(k, cfg, "sts")[0]
            for k in range(0, cfg.iterations + 1, 50)]
    assert all(0.0 <= l <= 0.5 for l in lams)
    assert all(b >= a for a, b in zip(lams, lams[1:]))


def test_gate_modes():
    cfg = trainer.PpoConfig()
    assert trainer.gate_lambda(0, cfg, "cts")[0] == 0.5
    lam, is_t = trainer.gate_lambda(0, cfg, "baseline")
    assert lam == 1.0 and not is_t.any()
    with pytest.raises(ValueError):
        trainer.gate_lambda(-1, cfg)


def test_gae_single_step():
    adv, ret = trainer.gae(np.array([[1.0]]), np.array([[0.3]]),
                           np.array([[False]]), np.array([0.7]), 0.99, 0.95)
    assert adv[0, 0] == pytest.approx(1.0 + 0.99 * 0.7 - 0.3)
    assert ret[0, 0] == pytest.approx(adv[0, 0] + 0.3)


def test_gae_zero_rewards_zero_values():
    adv, ret = trainer.gae(np.zeros((5, 3)), np.zeros((5, 3)),
                           np.zeros((5, 3), bool), np.zeros(3), 0.99, 0.95)
    assert np.all(adv == 0.0) and np.all(ret == 0.0)


def brute_force_gae(reward, value, done, bootstrap, gamma, lam):
    """Independent oracle: A_t = sum_l (gamma*lam)^l * delta_{t+l}, with the
    sum truncated at the first done."""
    T, N = reward.shape
    v_next = np.concatenate([value[1:], bootstrap[None]], axis=0)
    delta = reward + gamma * v_next * ~done - value
    adv = np.zeros((T, N))
    for n in range(N):
        for t in range(T):
            acc, coef = 0.0, 1.0
            for l in range(t, T):
                acc += coef * delta[l, n]
                if done[l, n]:
                    break
                coef *= gamma * lam
            adv[t, n] = acc
    return adv


def test_gae_fixture_matches_brute_force():
    reward = np.array([[1.0], [1.0], [1.0]])
    value = np.array([[0.5], [0.5], [0.5]])
    done = np.zeros((3, 1), bool)
    boot = np.array([0.5])
    adv, _ = trainer.gae(reward, value, done, boot, 0.99, 0.95)
    ref = brute_force_gae(reward, value, done, boot, 0.99, 0.95)
    assert np.max(np.abs(adv - ref)) < 1e-10


def test_gae_random_with_dones_matches_brute_force():
    rng = np.random.default_rng(7)
    T, N = 24, 6
    reward = rng.standard_normal((T, N))
    value = rng.standard_normal((T, N))
    done = rng.random((T, N)) < 0.15
    boot = rng.standard_normal(N)
    adv, ret = trainer.gae(reward, value, done, boot, 0.99, 0.95)
    ref = brute_force_gae(reward, value, done, boot, 0.99, 0.95)
    assert np.max(np.abs(adv - ref)) < 1e-10
    assert np.max(np.abs(ret - (adv + value))) < 1e-12


def test_advantage_normalization():
    rng = np.random.default_rng(1)
    adv = trainer.normalize_advantages(rng.standard_normal((24, 256)) * 40 + 7)
    assert abs(adv.mean()) < 1e-6
    assert 0.99 <= adv.std() <= 1.01


def test_clip_objective_examples():
    # ratio 1.5, A = +1 -> clipped objective 1.2; ratio 0.5, A = -1 -> -0.8
    rng = np.random.default_rng(2)
    nets_ = policy.PolicyNets(rng)
    cfg = small_cfg()
    for ratio, a, want in ((1.5, 1.0, 1.2), (0.5, -1.0, -0.8)):
        mb = make_minibatch(rng, 6, 6)
        mb["adv"][:] = a
        fill_logp(nets_, mb, offset=-np.log(ratio))
        nets.zero_grads(nets_.all_modules())
        out = trainer.ppo_minibatch(nets_, mb, cfg, "sts", mirror=False)
        assert out["loss_pi"] == pytest.approx(-want, rel=1e-5)


def test_kl_estimate_zero_when_unchanged():
    rng = np.random.default_rng(3)
    nets_ = policy.PolicyNets(rng)
    mb = fill_logp(nets_, make_minibatch(rng, 8, 4))
    nets.zero_grads(nets_.all_modules())
    out = trainer.ppo_minibatch(nets_, mb, small_cfg(), "sts", mirror=False)
    assert abs(out["kl"]) < 1e-5


def grads_all_zero(modules):
    return all(np.all(g == 0.0) for m in modules for g in m.grads())


def grads_any_nonzero(modules):
    return any(np.any(g != 0.0) for m in modules for g in m.grads())


def test_gradient_flow_teacher_stream():
    """Teacher-stream PPO gradients reach teacher encoders and the head,
    never the student encoders."""
    rng = np.random.default_rng(4)
    nets_ = policy.PolicyNets(rng)
    mb = fill_logp(nets_, make_minibatch(rng, 12, 12))
    nets.zero_grads(nets_.all_modules())
    trainer.ppo_minibatch(nets_, mb, small_cfg(), "sts", mirror=False)
    assert grads_any_nonzero(nets_.teacher_encoder_modules())
    assert grads_any_nonzero([nets_.pi])
    assert grads_all_zero(nets_.student_encoder_modules())


def test_gradient_flow_student_stream():
    """Student-stream PPO gradients reach only the shared head."""
    rng = np.random.default_rng(5)
    nets_ = policy.PolicyNets(rng)
    mb = fill_logp(nets_, make_minibatch(rng, 12, 0))
    nets.zero_grads(nets_.all_modules())
    trainer.ppo_minibatch(nets_, mb, small_cfg(), "sts", mirror=False)
    assert grads_any_nonzero([nets_.pi])
    assert grads_all_zero(nets_.student_encoder_modules())
    assert grads_all_zero(nets_.teacher_encoder_modules())


def test_gradient_flow_value():
    """The value loss touches only the value network."""
    rng = np.random.default_rng(6)
    nets_ = policy.PolicyNets(rng)
    mb = fill_logp(nets_, make_minibatch(rng, 12, 6))
    mb["adv"][:] = 0.0          # kill the surrogate gradient
    cfg = small_cfg(entropy_coef=0.0, mirror_weight=0.0)
    nets.zero_grads(nets_.all_modules())
    trainer.ppo_minibatch(nets_, mb, cfg, "sts", mirror=False)
    assert grads_any_nonzero([nets_.value])
    assert grads_all_zero(nets_.teacher_encoder_modules())
    assert grads_all_zero(nets_.student_encoder_modules())
    assert grads_all_zero([nets_.pi])


def test_gradient_flow_reconstruction():
    """L^rec updates student encoders only; teacher latents are constants."""
    rng = np.random.default_rng(8)
    nets_ = policy.PolicyNets(rng)
    mb = make_minibatch(rng, 16, 8)
    nets.zero_grads(nets_.all_modules())
    loss = trainer.rec_loss_and_grads(nets_, mb["history"], mb["strip_noisy"],
                                      mb["s_pri"], mb["strip_gt"])
    assert loss > 0.0
    assert grads_any_nonzero(nets_.student_encoder_modules())
    assert grads_all_zero(nets_.teacher_encoder_modules())
    assert grads_all_zero(nets_.head_modules())
    assert grads_all_zero([nets_.value])


def test_gradient_flow_baseline_mode():
    """In baseline mode the student encoders are the trained RL path."""
    rng = np.random.default_rng(9)
    nets_ = policy.PolicyNets(rng)
    mb = fill_logp(nets_, make_minibatch(rng, 12, 0))
    nets.zero_grads(nets_.all_modules())
    trainer.ppo_minibatch(nets_, mb, small_cfg(), "baseline", mirror=False)
    assert grads_any_nonzero(nets_.student_encoder_modules())
    assert grads_all_zero(nets_.teacher_encoder_modules())


def test_rec_loss_zero_when_latents_match():
    rng = np.random.default_rng(10)
    nets_ = policy.PolicyNets(rng)
    # constant-zero proprio branches and shared strip-encoder weights with a
    # shared strip input force z_T = z_S exactly
    for enc in (nets_.e_pri, nets_.e_pro):
        enc.layers[-1].W[...] = 0.0
        enc.layers[-1].b[...] = 0.0
    for src, dst in zip(nets_.e_per_t.params(), nets_.e_per_s.params()):
        dst[...] = src
    mb = make_minibatch(rng, 8, 0)
    strip = mb["strip_gt"]
    nets.zero_grads(nets_.all_modules())
    loss = trainer.rec_loss_and_grads(nets_, mb["history"], strip,
                                      mb["s_pri"], strip)
    assert loss == 0.0
    assert grads_all_zero(nets_.student_encoder_modules())


def test_rec_monotone_decrease_on_frozen_batch():
    rng = np.random.default_rng(11)
    nets_ = policy.PolicyNets(rng)
    mb = make_minibatch(rng, 64, 0)
    opt = nets.Adam([p for m in nets_.student_encoder_modules()
                     for p in m.params()], lr=1e-3)
    grads = [g for m in nets_.student_encoder_modules() for g in m.grads()]
    losses = []
    for _ in range(100):
        nets.zero_grads(nets_.student_encoder_modules())
        losses.append(trainer.rec_loss_and_grads(
            nets_, mb["history"], mb["strip_noisy"],
            mb["s_pri"], mb["strip_gt"]))
        assert opt.step(grads)
    assert losses[-1] < losses[0]
    # broadly decreasing: every 10th-step checkpoint is an improvement
    assert all(losses[i + 10] < losses[i] for i in range(0, 90, 10))


def test_mirror_loss_zero_for_symmetric_net():
    rng = np.random.default_rng(12)
    nets_ = policy.PolicyNets(rng)
    # zero final layer -> policy mean identically zero, a symmetric function
    last = nets_.pi.layers[-1]
    last.W[...] = 0.0
    last.b[...] = 0.0
    mb = fill_logp(nets_, make_minibatch(rng, 8, 8))
    nets.zero_grads(nets_.all_modules())
    out = trainer.ppo_minibatch(nets_, mb, small_cfg(), "sts", mirror=True)
    assert out["loss_mirror"] == pytest.approx(0.0, abs=1e-12)


def test_mirror_loss_nonnegative_and_grads_on_active_path():
    rng = np.random.default_rng(13)
    nets_ = policy.PolicyNets(rng)
    mb = fill_logp(nets_, make_minibatch(rng, 8, 8))
    mb["adv"][:] = 0.0
    cfg = small_cfg(entropy_coef=0.0, value_coef=0.0)
    nets.zero_grads(nets_.all_modules())
    out = trainer.ppo_minibatch(nets_, mb, cfg, "sts", mirror=True)
    assert out["loss_mirror"] > 0.0
    assert grads_any_nonzero([nets_.pi])
    assert grads_any_nonzero(nets_.teacher_encoder_modules())
    assert grads_all_zero(nets_.student_encoder_modules())


def test_kl_early_stop_leaves_params_unchanged():
    rng = np.random.default_rng(14)
    nets_ = policy.PolicyNets(rng)
    mb = fill_logp(nets_, make_minibatch(rng, 16, 16), offset=1.0)
    rows = {k: v for k, v in mb.items()}
    cfg = small_cfg()
    opt = nets.Adam([p for m in trainer.rl_modules(nets_, "sts")
                     for p in m.params()], lr=cfg.lr)
    before = [p.copy() for p in nets_.params()]
    stats = trainer.ppo_update(nets_, rows, cfg, "sts", opt, rng)
    assert stats["loss_pi"] == 0.0
    for p, b in zip(nets_.params(), before):
        assert np.array_equal(p, b)


def test_collect_accounting_and_shapes():
    cfg = small_cfg()
    rng = np.random.default_rng(15)
    nets_ = policy.PolicyNets(rng)
    env = trainer.VecEnv(cfg.n_envs, rng)
    lam, is_t = trainer.gate_lambda(cfg.iterations, cfg, "sts")
    buf = trainer.collect(env, nets_, is_t, cfg.horizon, rng)
    assert buf.reward.shape == (cfg.horizon, cfg.n_envs)
    n_teacher = int(buf.is_teacher.sum())
    n_student = int((~buf.is_teacher).sum())
    assert (n_teacher + n_student) * cfg.horizon == cfg.n_envs * cfg.horizon
    assert n_teacher == int(np.ceil((1 - lam) * cfg.n_envs))
    assert np.isfinite(buf.logp).all() and np.isfinite(buf.value).all()


def test_step_flags_pure_timeouts_not_falls():
    rng = np.random.default_rng(21)
    env = trainer.VecEnv(4, rng, randomization=False)
    env.observe(rng)
    # one step before the time limit; env 0 is knocked over so it terminates
    # as a fall, the others as pure timeouts
    env.steps_alive[:] = int(trainer.EPISODE_TIMEOUT / policy.CONTROL_DT) - 1
    env.state.q[0, 2] = 2.0
    _, done, _ = env.step(np.zeros((4, policy.ACTION_DIM)), rng)
    assert done.all()
    assert not env.last_timeout[0]
    assert env.last_timeout[1:].all()


def test_collect_records_timeout_mask():
    cfg = small_cfg()
    rng = np.random.default_rng(22)
    nets_ = policy.PolicyNets(rng)
    env = trainer.VecEnv(cfg.n_envs, rng)
    env.observe(rng)
    env.steps_alive[:] = (int(trainer.EPISODE_TIMEOUT / policy.CONTROL_DT)
                          - 2)
    _, is_t = trainer.gate_lambda(0, cfg, "sts")
    buf = trainer.collect(env, nets_, is_t, cfg.horizon, rng)
    hit = buf.timeout[1]                       # the pre-advanced step
    assert hit.shape == (cfg.n_envs,)
    assert (buf.done[1] | ~hit).all()          # timeout implies done
    assert hit.any()                           # survivors time out here


def test_vecenv_no_gait_fixes_frequency():
    rng = np.random.default_rng(16)
    env = trainer.VecEnv(4, rng, no_gait=True)
    env.observe(rng)
    action = np.zeros((4, policy.ACTION_DIM))
    action[:, 6] = 5.0          # would be clipped to 1.3 Hz if honored
    phase0 = env.gait.phase.copy()
    env.step(action, rng)
    assert np.allclose(env.gait.freq, 1.0)
    expect = np.mod(phase0 + policy.CONTROL_DT, 1.0)
    assert np.allclose(env.gait.phase, expect)


def test_vecenv_resets_on_done():
    rng = np.random.default_rng(17)
    env = trainer.VecEnv(4, rng, randomization=False)
    env.observe(rng)
    env.state.q[:, 2] = 2.0     # pitch far beyond the fall limit
    _, done, _ = env.step(np.zeros((4, policy.ACTION_DIM)), rng)
    assert done.all()
    assert np.all(env.steps_alive == 0)
    assert env.pending_reset.all()
    obs_next = env.observe(rng)
    assert np.isfinite(obs_next["history"]).all()


def test_train_determinism(tmp_path):
    cfg = small_cfg(iterations=3)
    _, m1 = trainer.train(cfg, "sts", 5, tmp_path / "a")
    _, m2 = trainer.train(cfg, "sts", 5, tmp_path / "b")
    assert json.dumps(m1) == json.dumps(m2)
    _, m3 = trainer.train(cfg, "sts", 6, tmp_path / "c")
    assert json.dumps(m1) != json.dumps(m3)


def test_train_probe_free_phase_keeps_student_encoders(tmp_path):
    cfg = small_cfg(iterations=2)      # ramp_start = 1, lambda stays 0
    rng = np.random.default_rng(18)
    ref = policy.PolicyNets(np.random.default_rng(18))
    nets_, metrics = trainer.train(cfg, "sts", 18, tmp_path / "r",
                                   rec_probes=False)
    assert all(m["lambda"] == 0.0 for m in metrics)
    assert all(m["loss_rec"] == 0.0 for m in metrics)
    for got, init in zip(
            [p for m in nets_.student_encoder_modules() for p in m.params()],
            [p for m in ref.student_encoder_modules() for p in m.params()]):
        assert np.array_equal(got, init)
    del rng


def test_train_baseline_keeps_teacher_encoders(tmp_path):
    cfg = small_cfg(iterations=2)
    ref = policy.PolicyNets(np.random.default_rng(19))
    nets_, metrics = trainer.train(cfg, "baseline", 19, tmp_path / "r")
    assert all(m["lambda"] == 1.0 for m in metrics)
    for got, init in zip(
            [p for m in nets_.teacher_encoder_modules() for p in m.params()],
            [p for m in ref.teacher_encoder_modules() for p in m.params()]):
        assert np.array_equal(got, init)


def test_train_writes_metrics_and_checkpoints(tmp_path):
    cfg = small_cfg(iterations=4)
    _, metrics = trainer.train(cfg, "sts", 20, tmp_path)
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 4 == len(metrics)
    rec = json.loads(lines[0])
    for key in ("iter", "lambda", "mean_reward", "terrain_level_mean",
                "loss_pi", "loss_v", "loss_rec", "loss_mirror", "kl",
                "reward_terms"):
        assert key in rec
    ckpts = [f for f in os.listdir(tmp_path) if f.startswith("ckpt_")]
    assert ckpts, "expected a final checkpoint"
    reloaded = trainer.load_policy(tmp_path / ckpts[-1])
    assert reloaded.arch_description() == policy.PolicyNets(
        np.random.default_rng(0)).arch_description()


def test_train_rejects_unknown_mode(tmp_path):
    with pytest.raises(ValueError):
        trainer.train(small_cfg(), "bogus", 0, tmp_path)
