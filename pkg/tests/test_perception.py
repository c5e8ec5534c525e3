"""Rasterizer geometry, loss closed forms, recon-net gradients, dataset
round trip, and short training sanity runs."""

import numpy as np
import pytest

from stridelab import obs, perception, sim, terrain


def flat_bank(n=1):
    return sim.TerrainBank([terrain.generate("rough", 0, seed=0)
                            for _ in range(n)])


def scan_state(cam_height=0.8, pitch=0.0, legs_folded=True):
    state = sim.SimState.zeros(1)
    state.q[0, sim.Z] = cam_height - sim.CAMERA_MOUNT[1]
    state.q[0, sim.PITCH] = pitch
    if legs_folded:
        state.q[0, sim.JOINT_SLICE] = [-1.4, -0.1, 0.0, -1.4, -0.1, 0.0]
    return state


def scan_and_rasterize(state, bank, model):
    dist, occ, dirs = obs.depth_scan(state, bank, model)
    pose = np.stack([state.q[:, sim.X], state.q[:, sim.Z],
                     state.q[:, sim.PITCH]], axis=1)
    return perception.rasterize(dist, occ, dirs, pose)


class TestRasterize:
    def test_flat_zero_pitch(self):
        state = scan_state()
        bank = flat_bank()
        model = sim.RobotModel.nominal(1)
        values, mask = scan_and_rasterize(state, bank, model)
        gt = perception.ground_truth_strip(state, bank)
        assert np.all(np.abs(values - gt) <= 0.025)
        assert not mask.any()

    def test_pitched_base_gravity_aligned(self):
        state = scan_state(pitch=0.1)
        bank = flat_bank()
        model = sim.RobotModel.nominal(1)
        values, mask = scan_and_rasterize(state, bank, model)
        gt = perception.ground_truth_strip(state, bank)
        sel = mask[0] == 0
        assert np.all(np.abs(values[0, sel] - gt[0, sel]) <= 0.025)

    def test_stairs_zero_pitch_half_resolution(self):
        prof = terrain.generate("stairs-up", 6, seed=2)
        bank = sim.TerrainBank([prof])
        state = scan_state()
        state.q[0, sim.X] = 2.3
        model = sim.RobotModel.nominal(1)
        values, mask = scan_and_rasterize(state, bank, model)
        gt = perception.ground_truth_strip(state, bank)
        sel = mask[0] == 0
        assert np.all(np.abs(values[0, sel] - gt[0, sel]) <= 0.025)

    def test_occlusion_makes_holes_with_neighbor_fill(self):
        state = scan_state(legs_folded=False)
        state.q[0, sim.HIP_L] = 1.2   # leg across the forward rays
        bank = flat_bank()
        model = sim.RobotModel.nominal(1)
        values, mask = scan_and_rasterize(state, bank, model)
        assert mask[0].any()
        hole = np.flatnonzero(mask[0])[0]
        valid = np.flatnonzero(mask[0] == 0)
        nearest = valid[np.argmin(np.abs(valid - hole))]
        assert values[0, hole] == values[0, nearest]


class TestEdgeTarget:
    def test_flat_zero(self):
        assert perception.make_edge_target(np.zeros((1, 25))).sum() == 0

    def test_step_flanking_cells(self):
        gt = np.zeros((1, 25))
        gt[0, 13:] = 0.15
        e = perception.make_edge_target(gt)
        assert e[0, 12] == 1 and e[0, 13] == 1
        assert e.sum() == 2

    def test_subthreshold_ramp(self):
        gt = (0.02 * np.arange(25))[None]
        assert perception.make_edge_target(gt).sum() == 0


class TestLosses:
    def test_l1_cases(self):
        gt = np.zeros((1, 25))
        assert perception.loss_height(gt, gt) == 0.0
        assert np.isclose(perception.loss_height(gt + 0.01, gt), 0.01)
        pred = gt.copy()
        pred[0, 7] = 0.25
        assert np.isclose(perception.loss_height(pred, gt), 0.01)

    def test_bce_perfect_is_clamp_scale(self):
        y = np.zeros((1, 25))
        y[0, :5] = 1.0
        p = y.copy()
        assert perception.loss_bce(p, y) < 1e-5

    def test_dice_empty_target_convention(self):
        y = np.zeros((1, 25))
        p = np.zeros((1, 25))
        assert np.isclose(perception.loss_dice(p, y), 0.0)

    def test_dice_closed_form(self):
        y = np.zeros((1, 25))
        y[0, [3, 9]] = 1.0
        p = np.zeros((1, 25))
        p[0, 3] = 1.0
        assert np.isclose(perception.loss_dice(p, y), 0.25)

    def test_total_arithmetic(self):
        # components 0.02 (L1), 0.4 (BCE), 0.3 (Dice) at lambda 0.5 -> 0.37
        assert np.isclose(0.02 + 0.5 * (0.4 + 0.3), 0.37)

    def test_total_reduces_to_height_at_zero_lambda(self):
        rng = np.random.default_rng(0)
        h, gt_h = rng.normal(size=(2, 3, 25))
        p = rng.uniform(0.01, 0.99, (3, 25))
        y = (rng.random((3, 25)) < 0.2).astype(float)
        assert np.isclose(perception.loss_total(h, p, gt_h, y, 0.0),
                          perception.loss_height(h, gt_h))


class TestReconNetGradients:
    @pytest.mark.parametrize("ablation", perception.ABLATIONS)
    def test_finite_difference(self, ablation):
        rng = np.random.default_rng(0)
        net = perception.ReconNet(rng, dtype=np.float64)
        x_raw = rng.normal(0, 0.1, (3, 25))
        x_mask = (rng.random((3, 25)) < 0.2).astype(np.uint8)
        gt_h = rng.normal(0, 0.1, (3, 25))
        gt_e = (rng.random((3, 25)) < 0.2).astype(float)

        def loss_fn():
            h, e = net.forward(perception.net_input(x_raw, x_mask)
                               .astype(np.float64))
            loss, *_ = perception._loss_and_grads(h, e, gt_h, gt_e, ablation)
            return loss

        h, e = net.forward(perception.net_input(x_raw, x_mask)
                           .astype(np.float64))
        _, g_h, g_e, _ = perception._loss_and_grads(h, e, gt_h, gt_e,
                                                    ablation)
        net.zero_grads()
        net.backward(g_h, g_e)

        check_rng = np.random.default_rng(1)
        for p, g in zip(net.params(), net.grads()):
            flat_p, flat_g = p.ravel(), g.ravel()
            for idx in check_rng.choice(flat_p.size,
                                        size=min(4, flat_p.size),
                                        replace=False):
                eps = 1e-6
                old = flat_p[idx]
                flat_p[idx] = old + eps
                lp = loss_fn()
                flat_p[idx] = old - eps
                lm = loss_fn()
                flat_p[idx] = old
                num = (lp - lm) / (2 * eps)
                if abs(num) < 1e-10 and abs(flat_g[idx]) < 1e-10:
                    continue
                rel = abs(num - flat_g[idx]) / max(abs(num), abs(flat_g[idx]))
                assert rel < 1e-4, (p.shape, idx, num, flat_g[idx])


class TestDataset:
    def test_record_shapes_and_determinism(self):
        d1 = perception.record_dataset(4, 10, seed=5)
        d2 = perception.record_dataset(4, 10, seed=5)
        assert d1["raw"].shape == (40, 25)
        for k in ("raw", "mask", "gt", "edge"):
            assert np.array_equal(d1[k], d2[k])

    def test_gt_is_terrain_only(self):
        # same pose and terrain, different noise seeds: gt identical
        d1 = perception.record_dataset(2, 5, seed=9)
        assert np.isfinite(d1["gt"]).all()
        assert np.all(np.abs(d1["gt"]) <= perception.VALUE_CAP)

    def test_save_load_roundtrip(self, tmp_path):
        d = perception.record_dataset(2, 5, seed=1)
        path = tmp_path / "percep.bin"
        perception.save_dataset(path, d["raw"], d["mask"], d["gt"],
                                d["edge"], d["frames_per_episode"])
        back = perception.load_dataset(path)
        for k in ("raw", "mask", "gt", "edge"):
            assert np.array_equal(back[k], d[k])
        assert back["frames_per_episode"] == 5

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"NOPE!" + b"\x00" * 32)
        with pytest.raises(ValueError):
            perception.load_dataset(path)

    def test_split_by_episode(self):
        d = perception.record_dataset(10, 8, seed=2)
        train, hold = perception.split_dataset(d)
        assert train["raw"].shape[0] == 72 and hold["raw"].shape[0] == 8


class TestTraining:
    def test_loss_decreases(self):
        d = perception.record_dataset(10, 20, seed=3)
        net = perception.ReconNet(np.random.default_rng(0))
        report = perception.train_recon(net, d, epochs=5, seed=0, lr=3e-3)
        assert report["history"][-1]["loss"] < report["history"][0]["loss"]
        assert np.isfinite(report["mae_cm"])

    def test_infer_deterministic(self):
        net = perception.ReconNet(np.random.default_rng(0))
        rng = np.random.default_rng(1)
        raw = rng.normal(0, 0.1, (4, 25))
        mask = np.zeros((4, 25), dtype=np.uint8)
        out1 = perception.infer(net, raw, mask)
        out2 = perception.infer(net, raw, mask)
        assert np.array_equal(out1, out2)
        assert out1.shape == (4, 25)

    def test_unknown_ablation_rejected(self):
        d = perception.record_dataset(2, 5, seed=4)
        net = perception.ReconNet(np.random.default_rng(0))
        with pytest.raises(ValueError):
            perception.train_recon(net, d, epochs=1, seed=0,
                                   ablation="bogus")
