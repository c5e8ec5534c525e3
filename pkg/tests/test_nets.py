import numpy as np
import pytest

from stridelab import nets


def finite_diff_check(build, n_trials, seed=0, rel_tol=1e-4, h=1e-5):
    """Compare analytic gradients against central finite differences (float64).

    `build(rng)` returns (module, x) where module supports forward/backward
    and exposes params()/grads(). The loss is a fixed random projection of
    the output, so upstream gradients exercise every output element.
    """
    rng = np.random.default_rng(seed)
    for _ in range(n_trials):
        module, x = build(rng)
        out = module.forward(x)
        proj = rng.standard_normal(out.shape)

        def loss(xv):
            return float(np.sum(module.forward(xv) * proj))

        nets.zero_grads([module])
        module.forward(x)
        gx = module.backward(proj.copy())

        # input gradient
        num_gx = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            xp = x.copy(); xp[idx] += h
            xm = x.copy(); xm[idx] -= h
            num_gx[idx] = (loss(xp) - loss(xm)) / (2 * h)
        scale = max(np.abs(num_gx).max(), np.abs(gx).max(), 1e-8)
        assert np.abs(gx - num_gx).max() / scale < rel_tol

        # parameter gradients
        for p, g in zip(module.params(), module.grads()):
            flat = p.reshape(-1)
            picks = rng.choice(flat.size, size=min(8, flat.size), replace=False)
            for j in picks:
                orig = flat[j]
                flat[j] = orig + h
                lp = loss(x)
                flat[j] = orig - h
                lm = loss(x)
                flat[j] = orig
                num = (lp - lm) / (2 * h)
                scale = max(abs(num), abs(g.reshape(-1)[j]), 1e-8)
                assert abs(g.reshape(-1)[j] - num) / scale < rel_tol


class TestElu:
    def test_fixed_points(self):
        assert nets.elu(0.0) == 0.0
        assert nets.elu(1.0) == 1.0
        assert abs(nets.elu(-20.0) - (np.exp(-20.0) - 1.0)) < 1e-12

    def test_c1_at_zero(self):
        h = 1e-7
        left = (nets.elu(0.0) - nets.elu(-h)) / h
        right = (nets.elu(h) - nets.elu(0.0)) / h
        assert abs(left - 1.0) < 1e-6
        assert abs(right - 1.0) < 1e-6

    def test_no_overflow_on_large_negative(self):
        assert np.isfinite(nets.elu(np.float32(-1e4)))


class TestDense:
    def test_zero_weights_zero_output(self):
        rng = np.random.default_rng(0)
        d = nets.Dense(4, 3, rng)
        d.W[...] = 0.0
        assert np.all(d.forward(rng.standard_normal((5, 4)).astype(np.float32)) == 0)

    def test_one_by_one(self):
        rng = np.random.default_rng(0)
        d = nets.Dense(1, 1, rng, dtype=np.float64)
        d.W[...] = 2.0
        d.b[...] = 1.0
        assert d.forward(np.array([[3.0]]))[0, 0] == 7.0

    def test_scalar_chain_rule(self):
        # f(x) = elu(w x), w = 1, x = 2, upstream 1 -> dw = 2
        rng = np.random.default_rng(0)
        d = nets.Dense(1, 1, rng, dtype=np.float64)
        d.W[...] = 1.0
        act = nets.Elu()
        y = act.forward(d.forward(np.array([[2.0]])))
        assert y[0, 0] == 2.0
        d.backward(act.backward(np.array([[1.0]])))
        assert d.gW[0, 0] == 2.0

    def test_shape_mismatch(self):
        rng = np.random.default_rng(0)
        d = nets.Dense(4, 3, rng)
        with pytest.raises(ValueError):
            d.forward(np.zeros((2, 5), dtype=np.float32)) @ np.zeros(1)

    def test_backward_requires_cache(self):
        rng = np.random.default_rng(0)
        with pytest.raises(RuntimeError):
            nets.Dense(2, 2, rng).backward(np.zeros((1, 2), dtype=np.float32))


class TestConv1d:
    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        conv = nets.Conv1d(1, 1, 3, rng, dtype=np.float64)
        conv.W[...] = np.array([[[0.0, 1.0, 0.0]]])
        conv.b[...] = 0.0
        x = rng.standard_normal((2, 1, 25))
        assert np.allclose(conv.forward(x), x)

    def test_even_kernel_rejected(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            nets.Conv1d(1, 1, 4, rng)

    def test_stride_two_length(self):
        rng = np.random.default_rng(0)
        conv = nets.Conv1d(2, 8, 3, rng, stride=2)
        out = conv.forward(np.zeros((1, 2, 25), dtype=np.float32))
        assert out.shape == (1, 8, 13)


class TestUpsample:
    def test_round_trip_shape(self):
        up = nets.Upsample1d(25)
        x = np.arange(13, dtype=np.float64).reshape(1, 1, 13)
        y = up.forward(x)
        assert y.shape == (1, 1, 25)
        assert y[0, 0, 0] == 0 and y[0, 0, -1] == 12


class TestGradientChecks:
    """Analytic vs. central finite differences, float64, rel error < 1e-4."""

    def test_dense(self):
        def build(rng):
            n_in, n_out = rng.integers(1, 8, size=2)
            d = nets.Dense(int(n_in), int(n_out), rng, dtype=np.float64)
            return d, rng.standard_normal((int(rng.integers(1, 5)), int(n_in)))
        finite_diff_check(build, 25)

    def test_mlp(self):
        def build(rng):
            widths = [int(w) for w in rng.integers(1, 8, size=int(rng.integers(3, 5)))]
            m = nets.Mlp(widths, rng, dtype=np.float64)
            return m, rng.standard_normal((3, widths[0]))
        finite_diff_check(build, 25)

    def test_conv1d(self):
        def build(rng):
            c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            k = int(rng.choice([1, 3, 5]))
            stride = int(rng.choice([1, 2]))
            conv = nets.Conv1d(c_in, c_out, k, rng, stride=stride, dtype=np.float64)
            return conv, rng.standard_normal((2, c_in, int(rng.integers(5, 12))))
        finite_diff_check(build, 25)

    def test_upsample(self):
        class WithParams(nets.Upsample1d):
            pass

        def build(rng):
            up = WithParams(int(rng.integers(8, 20)))
            return up, rng.standard_normal((2, 2, int(rng.integers(3, 8))))
        finite_diff_check(build, 25)


class TestGaussianHead:
    def test_standard_normal_logprob(self):
        head = nets.GaussianHead(1, init_log_std=0.0, dtype=np.float64)
        lp = head.log_prob(np.zeros((1, 1)), np.zeros((1, 1)))
        assert abs(lp[0] - (-0.5 * np.log(2 * np.pi))) < 1e-12

    def test_one_sigma_logprob(self):
        head = nets.GaussianHead(1, init_log_std=-0.7, dtype=np.float64)
        sigma = float(head.std()[0])
        m = 0.3
        lp = head.log_prob(np.array([[m]]), np.array([[m + sigma]]))
        expect = -0.5 - 0.5 * np.log(2 * np.pi) - np.log(sigma)
        assert abs(lp[0] - expect) < 1e-12

    def test_sample_logprob_consistent(self):
        rng = np.random.default_rng(3)
        head = nets.GaussianHead(7, dtype=np.float64)
        mean = rng.standard_normal((16, 7))
        action, lp = head.sample(mean, rng)
        assert np.abs(head.log_prob(mean, action) - lp).max() < 1e-6

    def test_grad_wrt_mean_at_mode_is_zero(self):
        head = nets.GaussianHead(3, dtype=np.float64)
        mean = np.ones((2, 3))
        g = head.log_prob_backward(mean, mean.copy(), np.ones(2))
        assert np.all(g == 0.0)

    def test_logprob_gradients_match_fd(self):
        rng = np.random.default_rng(5)
        head = nets.GaussianHead(4, init_log_std=-0.3, dtype=np.float64)
        mean = rng.standard_normal((6, 4))
        action = rng.standard_normal((6, 4))
        up = rng.standard_normal(6)
        nets.zero_grads([head])
        g_mean = head.log_prob_backward(mean, action, up)
        h = 1e-6
        for idx in np.ndindex(mean.shape):
            mp = mean.copy(); mp[idx] += h
            mm = mean.copy(); mm[idx] -= h
            num = (np.sum(up * head.log_prob(mp, action))
                   - np.sum(up * head.log_prob(mm, action))) / (2 * h)
            assert abs(num - g_mean[idx]) < 1e-5
        for j in range(4):
            orig = head.log_std[j]
            head.log_std[j] = orig + h
            lp = np.sum(up * head.log_prob(mean, action))
            head.log_std[j] = orig - h
            lm = np.sum(up * head.log_prob(mean, action))
            head.log_std[j] = orig
            assert abs((lp - lm) / (2 * h) - head.g_log_std[j]) < 1e-4

    def test_log_std_clamp(self):
        head = nets.GaussianHead(2, dtype=np.float64)
        head.log_std[...] = [-10.0, 10.0]
        assert np.allclose(np.log(head.std()), [nets.LOG_STD_MIN, nets.LOG_STD_MAX])


class TestAdam:
    def test_zero_gradient_no_change(self):
        p = np.array([1.0, 2.0])
        opt = nets.Adam([p], lr=0.1)
        assert opt.step([np.zeros(2)])
        assert np.allclose(p, [1.0, 2.0])

    def test_first_step_bias_corrected(self):
        # p=0, g=1, lr=0.1 -> p ~ -0.1 (m-hat = 1, v-hat = 1)
        p = np.array([0.0])
        opt = nets.Adam([p], lr=0.1)
        opt.step([np.array([1.0])])
        assert abs(p[0] - (-0.1)) < 1e-6

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(11)
            p = rng.standard_normal(5)
            opt = nets.Adam([p], lr=0.01)
            for _ in range(10):
                opt.step([rng.standard_normal(5)])
            return p
        assert np.array_equal(run(), run())

    def test_nonfinite_gradient_rejected(self):
        p = np.array([1.0])
        opt = nets.Adam([p], lr=0.1)
        assert not opt.step([np.array([np.nan])])
        assert p[0] == 1.0
        assert opt.step_count == 0


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        m = nets.Mlp([4, 8, 2], rng)
        path = tmp_path / "net.ckpt"
        nets.save_checkpoint(path, m.params(), "mlp-4-8-2")
        m2 = nets.Mlp([4, 8, 2], np.random.default_rng(99))
        nets.load_checkpoint(path, m2.params(), "mlp-4-8-2")
        for a, b in zip(m.params(), m2.params()):
            assert np.array_equal(a, b)

    def test_hash_mismatch_refused(self, tmp_path):
        rng = np.random.default_rng(0)
        m = nets.Mlp([4, 8, 2], rng)
        path = tmp_path / "net.ckpt"
        nets.save_checkpoint(path, m.params(), "mlp-4-8-2")
        with pytest.raises(ValueError, match="hash"):
            nets.load_checkpoint(path, m.params(), "other-arch")

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOPE!!" + b"\0" * 32)
        with pytest.raises(ValueError, match="magic"):
            nets.load_checkpoint(path, [np.zeros(1, dtype=np.float32)], "x")


def test_forward_determinism():
    rng = np.random.default_rng(7)
    m = nets.Mlp([6, 16, 3], rng)
    x = rng.standard_normal((4, 6)).astype(np.float32)
    assert np.array_equal(m.forward(x), m.forward(x))
