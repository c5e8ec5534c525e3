"""Height-strip perception: rasterize depth scans, reconstruct dense strips
with a small 1-D encoder-decoder (height head + edge head), dataset
recording, and training with L1 + lambda_edge * (BCE + Dice).
"""

import struct

import numpy as np

from . import nets, obs, policy, sim, terrain

DATASET_MAGIC = b"GFPD1"
CELLS = obs.STRIP_CELLS
CELL_OFFSETS = (np.arange(CELLS) - (CELLS - 1) / 2) * terrain.RESOLUTION

LAMBDA_EDGE = 0.5
EDGE_TAU = 0.05
PROB_CLAMP = 1e-6
DICE_EPS = 1.0
VALUE_CAP = 2.0

ABLATIONS = ("full", "only-dice", "only-bce", "no-edge-branch")


def strip_reference(base_z):
    """Ground reference: where the feet would stand at nominal height."""
    return base_z - sim.NOMINAL_BASE_HEIGHT


def ground_truth_strip(state, bank):
    """Exact strip (N, 25): terrain heights at cell centers around base x,
    relative to the base ground reference."""
    x = state.q[:, sim.X, None] + CELL_OFFSETS
    h = bank.height_at_many(x)
    ref = strip_reference(state.q[:, sim.Z])[:, None]
    return np.clip(h - ref, -VALUE_CAP, VALUE_CAP)


def rasterize(dist, occluded, dirs, base_pose):
    """Bin a depth scan into the 25-cell strip.

    `base_pose` is (N, 3) = (x, z, pitch); `dirs` are body-frame unit ray
    directions. Rays are gravity-aligned (rotated by pitch), converted to
    world points, and binned by x offset from the base; among rays landing
    in the same cell, the one nearest the cell center wins, later rays
    winning exact ties. Occluded rays and empty cells become holes, filled
    with the nearest valid cell value (mask stays set).
    Returns (values (N, 25), mask (N, 25) uint8).
    """
    n = dist.shape[0]
    x_b, z_b, pitch = base_pose[:, 0], base_pose[:, 1], base_pose[:, 2]
    cam_x = x_b + sim.CAMERA_MOUNT[0]
    cam_z = z_b + sim.CAMERA_MOUNT[1]

    cp, sp = np.cos(pitch)[:, None], np.sin(pitch)[:, None]
    wx = cp * dirs[:, :, 0] - sp * dirs[:, :, 1]
    wz = sp * dirs[:, :, 0] + cp * dirs[:, :, 1]
    px = cam_x[:, None] + dist * wx
    pz = cam_z[:, None] + dist * wz

    rel = px - x_b[:, None]
    cell_f = rel / terrain.RESOLUTION + (CELLS - 1) / 2
    cell = np.floor(cell_f + 0.5).astype(int)
    in_crop = (cell >= 0) & (cell < CELLS)
    center_err = np.abs(cell_f - cell)
    height = pz - strip_reference(z_b)[:, None]

    values = np.zeros((n, CELLS))
    best = np.full((n, CELLS), np.inf)
    filled = np.zeros((n, CELLS), dtype=bool)
    rows = np.arange(n)
    for r in range(dist.shape[1]):
        ok = in_crop[:, r] & ~occluded[:, r]
        if not ok.any():
            continue
        c = np.where(ok, cell[:, r], 0)
        better = ok & (center_err[:, r] <= best[rows, c])
        values[rows[better], c[better]] = height[better, r]
        best[rows[better], c[better]] = center_err[better, r]
        filled[rows[better], c[better]] = True

    mask = (~filled).astype(np.uint8)
    # nearest-valid-neighbor fill for holes
    idx = np.arange(CELLS)
    for i in range(n):
        if filled[i].all():
            continue
        if not filled[i].any():
            values[i] = 0.0
            continue
        valid = idx[filled[i]]
        nearest = valid[np.argmin(np.abs(idx[:, None] - valid[None, :]),
                                  axis=1)]
        values[i, ~filled[i]] = values[i, nearest[~filled[i]]]
    return np.clip(values, -VALUE_CAP, VALUE_CAP), mask


def make_edge_target(gt_strip):
    """Binary edge labels from the ground-truth strip (threshold 0.05 m)."""
    gt_strip = np.atleast_2d(gt_strip)
    return np.stack([terrain.edge_labels(row, tau=EDGE_TAU)
                     for row in gt_strip]).astype(np.float64)


class ReconNet:
    """1-D encoder-decoder over the 25-cell strip.

    Input is 2 channels (hole-filled heights, hole mask). Encoder downsamples
    25 -> 13 -> 7 with stride-2 convs; a dense bottleneck mixes the 16 x 7
    code; the decoder upsamples with skip connections; two 1x1-conv heads
    emit heights and edge logits.
    """

    def __init__(self, rng, dtype=np.float32):
        self.conv1 = nets.Conv1d(2, 8, 3, rng, stride=2, dtype=dtype)
        self.act1 = nets.Elu()
        self.conv2 = nets.Conv1d(8, 16, 3, rng, stride=2, dtype=dtype)
        self.act2 = nets.Elu()
        self.bottleneck = nets.Dense(16 * 7, 16 * 7, rng, dtype=dtype)
        self.act_b = nets.Elu()
        self.up1 = nets.Upsample1d(13)
        self.conv_d1 = nets.Conv1d(16 + 8, 8, 3, rng, dtype=dtype)
        self.act_d1 = nets.Elu()
        self.up2 = nets.Upsample1d(25)
        self.conv_d2 = nets.Conv1d(8 + 2, 8, 3, rng, dtype=dtype)
        self.act_d2 = nets.Elu()
        self.head_h = nets.Conv1d(8, 1, 1, rng, dtype=dtype)
        self.head_e = nets.Conv1d(8, 1, 1, rng, dtype=dtype)

    def modules(self):
        return [self.conv1, self.act1, self.conv2, self.act2,
                self.bottleneck, self.act_b, self.up1, self.conv_d1,
                self.act_d1, self.up2, self.conv_d2, self.act_d2,
                self.head_h, self.head_e]

    def params(self):
        return [p for m in self.modules() for p in m.params()]

    def grads(self):
        return [g for m in self.modules() for g in m.grads()]

    def zero_grads(self):
        nets.zero_grads(self.modules())

    def arch_description(self):
        shapes = ",".join("x".join(str(s) for s in p.shape)
                          for p in self.params())
        return "stridelab-recon:" + shapes

    def forward(self, x):
        """x: (B, 2, 25) float32. Returns (heights (B, 25), edge logits
        (B, 25)); caches activations for backward."""
        x = x.astype(np.float32)
        self._x = x
        e1 = self.act1.forward(self.conv1.forward(x))          # (B, 8, 13)
        e2 = self.act2.forward(self.conv2.forward(e1))         # (B, 16, 7)
        b = e2.shape[0]
        z = self.act_b.forward(
            self.bottleneck.forward(e2.reshape(b, -1)))
        z = z.reshape(b, 16, 7)
        d1_in = np.concatenate([self.up1.forward(z), e1], axis=1)
        d1 = self.act_d1.forward(self.conv_d1.forward(d1_in))  # (B, 8, 13)
        d2_in = np.concatenate([self.up2.forward(d1), x], axis=1)
        d2 = self.act_d2.forward(self.conv_d2.forward(d2_in))  # (B, 8, 25)
        h = self.head_h.forward(d2)[:, 0]
        e = self.head_e.forward(d2)[:, 0]
        return h, e

    def backward(self, g_h, g_e):
        """Accumulate gradients given dL/dheights and dL/dedge_logits."""
        g = self.head_h.backward(g_h[:, None].astype(np.float32))
        g = g + self.head_e.backward(g_e[:, None].astype(np.float32))
        g = self.conv_d2.backward(self.act_d2.backward(g))
        g_d1 = self.up2.backward(g[:, :8])
        g = self.conv_d1.backward(self.act_d1.backward(g_d1))
        g_z = self.up1.backward(g[:, :16])
        g_e1_skip = g[:, 16:]
        b = g_z.shape[0]
        g_e2 = self.bottleneck.backward(
            self.act_b.backward(g_z.reshape(b, -1))).reshape(b, 16, 7)
        g_e1 = self.conv2.backward(self.act2.backward(g_e2)) + g_e1_skip
        self.conv1.backward(self.act1.backward(g_e1))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def loss_height(pred, gt):
    return float(np.mean(np.abs(pred - gt)))


def clamp_prob(p):
    return np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


def loss_bce(prob, target):
    p = clamp_prob(prob)
    return float(np.mean(-(target * np.log(p)
                           + (1.0 - target) * np.log(1.0 - p))))


def loss_dice(prob, target):
    """Soft Dice with eps = 1 smoothing, per frame then averaged."""
    prob = np.atleast_2d(prob)
    target = np.atleast_2d(target)
    inter = np.sum(prob * target, axis=-1)
    denom = np.sum(prob, axis=-1) + np.sum(target, axis=-1)
    return float(np.mean(1.0 - (2.0 * inter + DICE_EPS)
                         / (denom + DICE_EPS)))


def loss_total(pred_h, pred_e_prob, gt_h, gt_e, lambda_edge=LAMBDA_EDGE):
    return (loss_height(pred_h, gt_h)
            + lambda_edge * (loss_bce(pred_e_prob, gt_e)
                             + loss_dice(pred_e_prob, gt_e)))


def _loss_and_grads(h, e_logit, gt_h, gt_e, ablation):
    """Training loss and gradients w.r.t. heights and edge logits."""
    b, c = h.shape
    l1 = loss_height(h, gt_h)
    g_h = np.sign(h - gt_h) / (b * c)

    p = _sigmoid(e_logit)
    bce = loss_bce(p, gt_e)
    dice = loss_dice(p, gt_e)
    if ablation == "no-edge-branch":
        return l1, g_h, np.zeros_like(e_logit), {"l1": l1, "bce": bce,
                                                 "dice": dice}

    g_p = np.zeros_like(p)
    active = (p > PROB_CLAMP) & (p < 1.0 - PROB_CLAMP)
    if ablation in ("full", "only-bce"):
        pc = clamp_prob(p)
        g_p += np.where(active, (pc - gt_e) / (pc * (1.0 - pc)), 0.0) / (b * c)
    if ablation in ("full", "only-dice"):
        inter = np.sum(p * gt_e, axis=1, keepdims=True)
        denom = np.sum(p, axis=1, keepdims=True) + np.sum(
            gt_e, axis=1, keepdims=True) + DICE_EPS
        g_dice = -(2.0 * gt_e * denom - (2.0 * inter + DICE_EPS)) / denom ** 2
        g_p += g_dice / b
    g_e = LAMBDA_EDGE * g_p * p * (1.0 - p)

    edge_part = {"full": bce + dice, "only-bce": bce,
                 "only-dice": dice}[ablation]
    total = l1 + LAMBDA_EDGE * edge_part
    return total, g_h, g_e, {"l1": l1, "bce": bce, "dice": dice}


def net_input(values, mask):
    return np.stack([values, mask.astype(values.dtype)],
                    axis=1).astype(np.float32)


def infer(net, values, mask):
    """Dense strip from a raw profile; the edge head is discarded."""
    h, _ = net.forward(net_input(values, mask))
    return np.clip(h.astype(np.float64), -VALUE_CAP, VALUE_CAP)


# ---------------------------------------------------------------------------
# dataset

def save_dataset(path, raw, mask, gt, edge, frames_per_episode):
    raw = np.asarray(raw, dtype=np.float32)
    gt = np.asarray(gt, dtype=np.float32)
    edge = np.asarray(edge, dtype=np.float32)
    mask = np.asarray(mask, dtype=np.uint8)
    n = raw.shape[0]
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<QII", n, CELLS, frames_per_episode))
        for i in range(n):
            f.write(raw[i].tobytes())
            f.write(gt[i].tobytes())
            f.write(edge[i].tobytes())
            f.write(mask[i].tobytes())


def load_dataset(path):
    with open(path, "rb") as f:
        magic = f.read(len(DATASET_MAGIC))
        if magic != DATASET_MAGIC:
            raise ValueError("not a perception dataset")
        n, cells, fpe = struct.unpack("<QII", f.read(16))
        if cells != CELLS:
            raise ValueError(f"unexpected cell count {cells}")
        raw = np.empty((n, CELLS), dtype=np.float32)
        gt = np.empty((n, CELLS), dtype=np.float32)
        edge = np.empty((n, CELLS), dtype=np.float32)
        mask = np.empty((n, CELLS), dtype=np.uint8)
        for i in range(n):
            raw[i] = np.frombuffer(f.read(4 * CELLS), dtype="<f4")
            gt[i] = np.frombuffer(f.read(4 * CELLS), dtype="<f4")
            edge[i] = np.frombuffer(f.read(4 * CELLS), dtype="<f4")
            mask[i] = np.frombuffer(f.read(CELLS), dtype=np.uint8)
    return {"raw": raw, "gt": gt, "edge": edge, "mask": mask,
            "frames_per_episode": fpe}


def record_dataset(n_episodes, frames_per_episode, seed,
                   noise=None, kinds=("stairs-up", "stairs-down", "gap",
                                      "rough", "mixed")):
    """Scripted kinematic rollouts over mixed terrains at 10 Hz.

    The base glides across the terrain with bounded pose noise while the
    legs swing through a nominal gait cycle, producing realistic leg
    occlusion patterns in the depth scan. Ground truth comes from the
    terrain alone.
    """
    rng = np.random.default_rng(seed)
    noise = noise if noise is not None else obs.NoiseModel()
    raws, masks, gts, edges = [], [], [], []
    model = sim.RobotModel.nominal(1)
    for ep in range(n_episodes):
        kind = kinds[ep % len(kinds)]
        level = int(rng.integers(0, 10))
        prof = terrain.generate(kind, level, seed=int(rng.integers(1 << 30)))
        bank = sim.TerrainBank([prof])
        state = sim.SimState.zeros(1)
        x = rng.uniform(-5.0, 5.0)
        v = rng.uniform(-1.0, 1.0)
        phase = rng.uniform(0.0, 1.0)
        for k in range(frames_per_episode):
            x += v * 0.1
            phase = (phase + 0.1) % 1.0
            state.q[0, sim.X] = x
            ground = bank.height_at(np.array([x]))[0]
            state.q[0, sim.Z] = (ground + sim.NOMINAL_BASE_HEIGHT
                                 + rng.normal(0.0, 0.02))
            state.q[0, sim.PITCH] = rng.normal(0.0, 0.05)
            swing = 0.35 * np.sin(2 * np.pi * phase)
            state.q[0, sim.JOINT_SLICE] = sim.NOMINAL_POSTURE + np.array(
                [swing, -0.1 * abs(swing), 0.0,
                 -swing, -0.1 * abs(swing), 0.0])
            dist, occ, dirs = obs.depth_scan(state, bank, model)
            pose = np.stack([state.q[:, sim.X], state.q[:, sim.Z],
                             state.q[:, sim.PITCH]], axis=1)
            values, mask = rasterize(dist, occ, dirs, pose)
            values = obs.add_strip_noise(values, noise, rng)
            gt = ground_truth_strip(state, bank)
            raws.append(values[0])
            masks.append(mask[0])
            gts.append(gt[0])
            edges.append(make_edge_target(gt)[0])
    return {"raw": np.asarray(raws, dtype=np.float32),
            "mask": np.asarray(masks, dtype=np.uint8),
            "gt": np.asarray(gts, dtype=np.float32),
            "edge": np.asarray(edges, dtype=np.float32),
            "frames_per_episode": frames_per_episode}


def split_dataset(data, holdout_frac=0.1):
    """90/10 split by episode (episodes are contiguous frame blocks)."""
    fpe = data["frames_per_episode"]
    n = data["raw"].shape[0]
    n_ep = n // fpe
    n_hold = max(1, int(round(n_ep * holdout_frac)))
    cut = (n_ep - n_hold) * fpe
    train = {k: v[:cut] for k, v in data.items() if k != "frames_per_episode"}
    hold = {k: v[cut:] for k, v in data.items() if k != "frames_per_episode"}
    return train, hold


def evaluate(net, data):
    h, e_logit = net.forward(net_input(data["raw"], data["mask"]))
    p = _sigmoid(e_logit)
    return {"mae_cm": 100.0 * loss_height(h, data["gt"]),
            "bce": loss_bce(p, data["edge"]),
            "dice": loss_dice(p, data["edge"])}


def train_recon(net, data, epochs, seed, ablation="full", lr=1e-3,
                batch_size=64):
    """Adam on loss_total over the episode-split training set.

    Returns per-epoch metrics plus a final holdout report."""
    if ablation not in ABLATIONS:
        raise ValueError(f"unknown ablation {ablation!r}")
    rng = np.random.default_rng(seed)
    train, hold = split_dataset(data)
    n = train["raw"].shape[0]
    opt = nets.Adam(net.params(), lr=lr)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for s in range(0, n, batch_size):
            sel = order[s:s + batch_size]
            x = net_input(train["raw"][sel], train["mask"][sel])
            h, e_logit = net.forward(x)
            loss, g_h, g_e, parts = _loss_and_grads(
                h.astype(np.float64), e_logit.astype(np.float64),
                train["gt"][sel], train["edge"][sel], ablation)
            if not np.isfinite(loss):
                raise FloatingPointError("perception training diverged")
            net.zero_grads()
            net.backward(g_h, g_e)
            opt.step(net.grads())
            losses.append(loss)
        history.append({"epoch": epoch, "loss": float(np.mean(losses))})
    report = evaluate(net, hold)
    report["ablation"] = ablation
    report["history"] = history
    return report
