"""Acceptance suite: one test per shipped guarantee.

Each test prints a single ``[acceptance] <name>: PASS/FAIL`` line on the
real terminal (bypassing capture) so a full run reads as a checklist.
Tolerances are pinned here and never loosened to fit an observed run;
the ordering experiment uses a configuration and margin frozen from a
calibration run recorded before the suite was written.
"""

import time
from collections import deque

import numpy as np
import pytest

import egorep.nn as nn
import egorep.objectives as O
import egorep.tensor as T
from conftest import build_micro_objective, fd_check_params, micro_config
from egorep.data import (FLIP_PERM, WorldConfig, flip_sequence,
                         generate_synthetic_world)
from egorep.encoder import (DualEncoderState, InteractionModel, MemoryBank,
                            ModelConfig)
from egorep.objectives import MovementTarget, PARTS
from egorep.sync import (audio_offset, estimate_homography,
                         homography_errors, label_movements, rotation_angles)
from egorep.tensor import Tensor
from egorep.trainer import TrainConfig, Trainer
from egorep.transfer import (TransferConfig, binary_iou, per_class_top1,
                             rmse_log, run_transfer_task)
from test_tensor import _SEED, _op_cases


def _report(capsys, name, failures, detail):
    ok = not failures
    text = detail if ok else "; ".join(failures)
    with capsys.disabled():
        print(f"\n[acceptance] {name}: {'PASS' if ok else 'FAIL'} ({text})",
              flush=True)
    assert ok, f"{name}: {text}"


# ---------------------------------------------------------------------------
# 1. gradient suite: every op, then the combined objective on a micro model


def test_gradient_suite(capsys):
    t0 = time.monotonic()
    failures = []
    ops = sorted(T.OPS)
    missing = set(ops) - set(_op_cases(np.random.default_rng(_SEED)))
    if missing:
        failures.append(f"ops without gradient cases: {sorted(missing)}")
    worst_op = ("", 0.0)
    for op in ops:
        for trial in range(2):
            rng = np.random.default_rng(_SEED + trial)
            for fn, point in _op_cases(rng)[op]:
                err = T.grad_check(fn, point, eps=1e-4)
                if err >= 1e-4:
                    failures.append(f"{op}: rel err {err:.3e} >= 1e-4")
                if err > worst_op[1]:
                    worst_op = (op, err)
    build_loss, params, _ = build_micro_objective()
    composite = max(fd_check_params(build_loss, params).values())
    if composite >= 1e-3:
        failures.append(f"composite objective rel err {composite:.3e} >= 1e-3")
    elapsed = time.monotonic() - t0
    if elapsed >= 120.0:
        failures.append(f"runtime {elapsed:.0f}s >= 120s")
    _report(capsys, "gradient suite", failures,
            f"{len(ops)} ops, worst {worst_op[0]} {worst_op[1]:.1e}, "
            f"composite {composite:.1e}, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 2. loss closed forms


def test_loss_closed_forms(capsys):
    failures = []
    vals = O.huber(Tensor(np.array([0.0, 0.4, 2.0])), delta=1.0).data
    if not np.allclose(vals, [0.0, 0.08, 1.5], atol=1e-6):
        failures.append(f"huber values {vals} != [0, 0.08, 1.5]")
    eps = 1e-7
    lo = O.huber(Tensor(np.array([1.0 - eps])), delta=1.0).data[0]
    hi = O.huber(Tensor(np.array([1.0 + eps])), delta=1.0).data[0]
    if abs(hi - lo) >= 1e-6:
        failures.append(f"huber jump {abs(hi - lo):.2e} at |e|=delta")

    k = 8
    q = np.zeros((2, 4), dtype=np.float64)
    q[:, 0] = 1.0
    negs = np.tile(q[:1], (k, 1))
    uniform = O.infonce_loss(Tensor(q), q.copy(), negs, tau=0.07).item()
    if abs(uniform - np.log(k + 1)) >= 1e-6:
        failures.append(f"uniform infonce {uniform:.8f} != log({k + 1})")

    rng = np.random.default_rng(202)
    logits = rng.uniform(-50, 50, (4, 3, 6))
    labels = (rng.uniform(size=logits.shape) < 0.5).astype(np.float64)
    mask = rng.uniform(size=logits.shape) < 0.6
    mask[0, 0, 0] = True  # at least one supervised entry
    base = O.movement_loss(Tensor(logits), MovementTarget(labels, mask)).item()
    drift = 0
    for _ in range(1000):
        fuzzed = logits.copy()
        fuzzed[~mask] = rng.uniform(-50, 50, int((~mask).sum()))
        got = O.movement_loss(Tensor(fuzzed), MovementTarget(labels, mask)).item()
        if got != base:
            drift += 1
    if drift:
        failures.append(f"{drift}/1000 masked-logit fuzz trials moved the loss")
    _report(capsys, "loss closed forms", failures,
            "huber branches + continuity, uniform infonce = log(K+1), "
            "1000 gray-mask fuzz trials bit-exact")


# ---------------------------------------------------------------------------
# 3. momentum update closed form and bank FIFO vs a queue oracle


def test_momentum_and_bank_mechanics(capsys):
    failures = []
    dual = DualEncoderState(micro_config(), np.random.default_rng(42),
                            dtype=np.float64)
    q0 = {name: p.data.copy() for name, p in nn.prefixed("backbone", dual.model.backbone)}
    q0.update({name: p.data.copy() for name, p in nn.prefixed("projection", dual.model.projection)})
    k0 = {name: p.data.copy() for name, p in dual.named_key_params()}
    m = 0.85
    for t in range(1, 11):
        dual.momentum_update(m)
        decay = m ** t
        for name, p in dual.named_key_params():
            expect = decay * k0[name] + (1.0 - decay) * q0[name.removeprefix("key.")]
            err = np.abs(p.data - expect).max()
            if err >= 1e-12:
                failures.append(f"key decay t={t} {name}: |err| {err:.2e}")
                break

    rng = np.random.default_rng(99)
    bank = MemoryBank(64, 4)
    oracle = deque(maxlen=64)
    for i in range(100_000):
        batch = rng.standard_normal((int(rng.integers(1, 9)), 4))
        batch /= np.linalg.norm(batch, axis=1, keepdims=True)
        bank.push(batch.astype(np.float32))
        oracle.extend(np.asarray(batch, dtype=np.float32))
        if (i + 1) % 5000 == 0 and not np.array_equal(bank.as_array(), np.asarray(oracle)):
            failures.append(f"bank diverged from queue oracle after {i + 1} batches")
            break
    if not np.array_equal(bank.as_array(), np.asarray(oracle)):
        failures.append("bank != queue oracle at the end")
    _report(capsys, "momentum and bank mechanics", failures,
            "m^t decay exact to 1e-12 for t<=10, "
            "FIFO == deque oracle over 1e5 push batches")


# ---------------------------------------------------------------------------
# 4. augmentation exactness


def test_augmentation_exactness(capsys):
    failures = []
    world = generate_synthetic_world(
        WorldConfig(n_sequences=8, image_size=16, k=3,
                    gaze_missing_rate=0.2, gray_rate=0.2), seed=11)
    perm = np.zeros((6, 6), dtype=np.uint8)
    perm[list(FLIP_PERM), range(6)] = 1  # column j reads part FLIP_PERM[j]
    hand = (0, 1, 3, 2, 5, 4)
    if FLIP_PERM != hand:
        failures.append(f"part permutation {FLIP_PERM} != hand order {hand}")
    for i in range(len(world)):
        seq = world[i]
        flipped = flip_sequence(seq)
        twice = flip_sequence(flipped)
        if not (np.array_equal(twice.frames, seq.frames)
                and np.array_equal(twice.gaze, seq.gaze)
                and np.array_equal(twice.movement.labels, seq.movement.labels)
                and np.array_equal(twice.movement.mask, seq.movement.mask)):
            failures.append(f"seq {i}: double flip is not the identity")
        if not np.array_equal(flipped.gaze[:, 0], 1.0 - seq.gaze[:, 0]):
            failures.append(f"seq {i}: flipped gaze x != 1 - x exactly")
        if not np.array_equal(flipped.gaze[:, 1], seq.gaze[:, 1]):
            failures.append(f"seq {i}: flip moved gaze y")
        if not (np.array_equal(flipped.movement.labels,
                               seq.movement.labels @ perm)
                and np.array_equal(flipped.movement.mask.astype(np.uint8),
                                   seq.movement.mask.astype(np.uint8) @ perm)):
            failures.append(f"seq {i}: labels/masks != labels @ P")
        if failures:
            break
    _report(capsys, "augmentation exactness", failures,
            f"double flip identity, gaze remap exact, "
            f"part swap == P for {len(world)} sequences")


# ---------------------------------------------------------------------------
# 5. sensor synchronization oracles


def test_sync_oracles(capsys):
    failures = []
    rate = 8000.0
    rng = np.random.default_rng(505)
    base = np.convolve(rng.standard_normal(6000), np.ones(9) / 9.0, "same")
    for s in (0, 3, 150, 997):
        other = np.concatenate([np.zeros(s), base])[: len(base)]
        err = abs(audio_offset(base, other, rate) - s / rate)
        if err > 0.5 / rate:
            failures.append(f"clean shift {s}: error {err * rate:.2f} samples")
    lead = np.concatenate([base[40:], np.zeros(40)])
    err = abs(audio_offset(base, lead, rate) + 40 / rate)
    if err > 0.5 / rate:
        failures.append(f"clean shift -40: error {err * rate:.2f} samples")

    power = float(np.mean(base**2))
    hits = 0
    for trial in range(100):
        trng = np.random.default_rng(7000 + trial)
        s = int(trng.integers(-200, 201))
        shifted = (np.concatenate([np.zeros(s), base])[: len(base)] if s >= 0
                   else np.concatenate([base[-s:], np.zeros(-s)]))
        noisy_ref = base + trng.standard_normal(len(base)) * np.sqrt(power)
        noisy_other = shifted + trng.standard_normal(len(base)) * np.sqrt(power)
        if abs(audio_offset(noisy_ref, noisy_other, rate) - s / rate) <= 1.0 / rate:
            hits += 1
    if hits < 95:
        failures.append(f"0 dB offset recovery {hits}/100 < 95")

    h_true = np.array([[1.02, 0.03, 4.0], [-0.02, 0.98, -3.0],
                       [1e-4, -2e-4, 1.0]])
    prng = np.random.default_rng(17)
    src = prng.uniform(0, 100, (30, 2))
    ones = np.hstack([src, np.ones((30, 1))])
    proj = ones @ h_true.T
    dst = proj[:, :2] / proj[:, 2:]
    h_est = estimate_homography(src, dst, seed=0)
    clean_err = homography_errors(h_est, src, dst).max()
    if clean_err >= 1e-6:
        failures.append(f"exact-pair reprojection {clean_err:.2e} >= 1e-6")
    corrupted = dst.copy()
    bad = prng.choice(30, size=9, replace=False)  # 30% outliers
    corrupted[bad] += prng.uniform(20, 50, (9, 2))
    h_robust = estimate_homography(src, corrupted, seed=0)
    keep = np.setdiff1d(np.arange(30), bad)
    robust_err = homography_errors(h_robust, src[keep], dst[keep]).max()
    if robust_err >= 1e-3:
        failures.append(f"outlier-pair reprojection {robust_err:.2e} >= 1e-3")

    step = np.array([[1.0, 0.0, 0.0, 0.0],
                     [np.cos(np.pi / 4), np.sin(np.pi / 4), 0.0, 0.0]])
    angle = rotation_angles(step)[0]
    if abs(angle - np.pi / 2) >= 1e-6:
        failures.append(f"90 degree step angle {angle:.8f} != pi/2")

    mags = np.random.default_rng(33).uniform(0.1, 1.0, 10_000)
    target = label_movements({"torso": mags})
    col = PARTS.index("torso")
    moving = float(((target.labels[:, col] == 1) & target.mask[:, col]).mean())
    still = float(((target.labels[:, col] == 0) & target.mask[:, col]).mean())
    gray = float((~target.mask[:, col]).mean())
    for name, frac in (("moving", moving), ("still", still), ("gray", gray)):
        if abs(frac - 1 / 3) > 0.03:
            failures.append(f"tertile {name} fraction {frac:.3f} outside 33%+-3%")
    _report(capsys, "sync oracles", failures,
            f"audio clean<=1/2 sample and {hits}/100 at 0 dB, homography "
            f"{clean_err:.0e}/{robust_err:.0e}, quat step pi/2, tertiles "
            f"{moving:.2f}/{still:.2f}/{gray:.2f}")


# ---------------------------------------------------------------------------
# 6. evaluation metrics vs scalar-loop oracles


def test_metric_oracles(capsys):
    failures = []
    for trial in range(100):
        rng = np.random.default_rng(8000 + trial)
        n = int(rng.integers(5, 60))
        n_classes = int(rng.integers(2, 6))
        true = rng.integers(0, n_classes, n)
        pred = rng.integers(0, n_classes + 1, n)  # may predict an absent class
        value, per_class, excluded = per_class_top1(pred, true, n_classes + 1)
        accs = {}
        for c in range(n_classes + 1):
            hits = total = 0
            for p, t in zip(pred, true):
                if t == c:
                    total += 1
                    hits += p == c
            if total:
                accs[c] = 100.0 * hits / total
        oracle = sum(accs.values()) / len(accs)
        if abs(value - oracle) >= 1e-7 or per_class.keys() != accs.keys():
            failures.append(f"top1 trial {trial}: {value} vs oracle {oracle}")
            break
        if sorted(excluded) != [c for c in range(n_classes + 1) if c not in accs]:
            failures.append(f"top1 trial {trial}: wrong excluded classes")
            break

        a = rng.uniform(size=(7, 9)) < 0.5
        b = rng.uniform(size=(7, 9)) < 0.5
        inter = union = 0
        for x, y in zip(a.ravel(), b.ravel()):
            inter += x and y
            union += x or y
        oracle = inter / union if union else 1.0
        if abs(binary_iou(a, b) - oracle) >= 1e-7:
            failures.append(f"iou trial {trial}")
            break

        depth_true = np.exp(rng.uniform(-1, 1, 40))
        depth_pred = np.exp(rng.uniform(-1, 1, 40))
        acc = 0.0
        for p, t in zip(depth_pred, depth_true):
            acc += (np.log(p) - np.log(t)) ** 2
        oracle = float(np.sqrt(acc / 40))
        if abs(rmse_log(depth_pred, depth_true) - oracle) >= 1e-7:
            failures.append(f"rmse-log trial {trial}")
            break

    depth = np.random.default_rng(5).uniform(0.5, 4.0, 50)
    doubled = rmse_log(np.exp(2.0) * depth, depth)
    if abs(doubled - 2.0) >= 1e-12:
        failures.append(f"rmse-log of e^2-scaled depths {doubled!r} != 2.0")
    _report(capsys, "metric oracles", failures,
            "top-1/IoU/RMSE-log == scalar loops over 100 trials, "
            "e^2 scaling pins 2.0")


# ---------------------------------------------------------------------------
# 7. end-to-end ordering: trained > random features, contrastive > autoencoder
#
# Configuration and margin are frozen from a calibration run; see the
# docstring of test_training_objective_ordering.

ORDERING_WORLD = WorldConfig(n_sequences=2000, image_size=16, k=3)
ORDERING_MODEL = ModelConfig(image_size=16, k=3, backbone_channels=(6, 12, 16),
                             backbone_strides=(1, 2, 2), reducer_channels=8,
                             lstm_hidden=64, lstm_layers=2, contrastive_dim=16,
                             bank_size=256, gaze_embed_dim=16)
ORDERING_HEAD_SEEDS = range(8)  # scene accuracy = mean over head fits
ORDERING_MARGIN = 8.0  # calibrated margin; the frozen config measures ~20.9


def _scene_accuracy(model, world):
    """Frozen-backbone scene top-1, averaged over small-head refits.

    The head is deliberately low capacity (hidden 8, 20 epochs at 1e-3);
    a wide head trained long enough substitutes its own capacity for
    representation quality, which is exactly what this probe must not
    reward.  Averaging over head seeds removes single-init luck."""
    vals = []
    for seed in ORDERING_HEAD_SEEDS:
        cfg = TransferConfig(epochs=20, batch_size=32, lr=1e-3, seed=seed,
                             eval_fraction=0.25, hidden=8)
        vals.append(run_transfer_task(model, world, "scene", cfg)["value"])
    return float(np.mean(vals))


@pytest.mark.slow
def test_training_objective_ordering(capsys):
    """Train {vis, vis-move-attn} x {infonce, ae} at the pinned desk scale
    and require the calibrated ranking on frozen-backbone scene transfer:

        vis-move-attn >= vis >= random-init,
        vis-move-attn - random >= ORDERING_MARGIN,
        infonce >= ae (both under vis-move-attn),

    all inside a 30 minute CPU budget.
    """
    t0 = time.monotonic()
    failures = []
    world = generate_synthetic_world(ORDERING_WORLD, seed=0)
    accs = {"random": _scene_accuracy(
        InteractionModel(ORDERING_MODEL, np.random.default_rng(0)), world)}
    for label, mode, visual in (("vis", "vis", "infonce"),
                                ("vmattn", "vis-move-attn", "infonce"),
                                ("ae", "vis-move-attn", "ae")):
        cfg = TrainConfig(mode=mode, visual=visual, epochs=30, batch_size=16,
                          seed=0, model=ORDERING_MODEL)
        trainer = Trainer(world, cfg)
        trainer.train()
        accs[label] = _scene_accuracy(trainer.model, world)
    if not accs["vmattn"] >= accs["vis"]:
        failures.append(f"vis-move-attn {accs['vmattn']:.2f} < vis {accs['vis']:.2f}")
    if not accs["vis"] >= accs["random"]:
        failures.append(f"vis {accs['vis']:.2f} < random {accs['random']:.2f}")
    if not accs["vmattn"] - accs["random"] >= ORDERING_MARGIN:
        failures.append(f"margin {accs['vmattn'] - accs['random']:.2f} "
                        f"< {ORDERING_MARGIN}")
    if not accs["vmattn"] >= accs["ae"]:
        failures.append(f"infonce {accs['vmattn']:.2f} < ae {accs['ae']:.2f}")
    elapsed = time.monotonic() - t0
    if elapsed >= 1800.0:
        failures.append(f"runtime {elapsed:.0f}s >= 1800s")
    _report(capsys, "objective ordering", failures,
            "scene top-1 " + " ".join(f"{k}={v:.2f}" for k, v in accs.items())
            + f", margin {accs['vmattn'] - accs['random']:.2f}, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 8. bitwise determinism and resume equivalence


def test_determinism_and_resume(capsys, tmp_path):
    failures = []
    world = generate_synthetic_world(
        WorldConfig(n_sequences=24, image_size=8, k=2), seed=5)
    cfg = TrainConfig(mode="vis-move-attn", visual="infonce", epochs=2,
                      batch_size=6, seed=9, model=micro_config())

    paths = [tmp_path / f"run{i}.ckpt" for i in range(3)]
    for path in paths[:2]:
        trainer = Trainer(world, cfg)
        trainer.train()
        trainer.save_checkpoint(path)
    if paths[0].read_bytes() != paths[1].read_bytes():
        failures.append("two identical seeded runs differ on disk")

    interrupted = Trainer(world, cfg)
    for _ in range(5):  # 4 steps per epoch: stop mid-way through epoch 1
        interrupted.step()
    mid = tmp_path / "mid.ckpt"
    interrupted.save_checkpoint(mid)
    resumed = Trainer.resume(mid, world)
    resumed.train(1)  # finish epoch 1
    resumed.save_checkpoint(paths[2])
    if paths[0].read_bytes() != paths[2].read_bytes():
        failures.append("mid-epoch resume diverged from the uninterrupted run")
    _report(capsys, "determinism and resume", failures,
            "identical seeded runs byte-equal, mid-epoch resume byte-equal")
