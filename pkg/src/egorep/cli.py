"""Command-line interface: dataset generation, training, transfer evaluation,
ablation grids, sensor-sync utilities, and a fast self-test.

Configuration is layered: built-in defaults, then a JSON config file
(``--config``), then explicit flags.  Every report file echoes the fully
resolved configuration so a run can be reproduced from its outputs alone.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import nn
from . import objectives
from . import sync
from . import tensor as T
from .data import (DatasetError, InteractionDataset, WorldConfig,
                   generate_synthetic_world)
from .encoder import InteractionModel, ModelConfig
from .trainer import (MODES, PART_GROUPS, VISUAL_OBJECTIVES, NumericFailure,
                      TrainConfig, Trainer, movement_from_gaze_experiment)
from .transfer import TASKS, TransferConfig, run_transfer_suite, write_results_csv

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_SELFTEST = 5

_EPILOG = f"""commands:
  gen-data            write a synthetic interaction dataset
  train               fit a model; writes a checkpoint and a report CSV
  eval                frozen-feature transfer metrics from a checkpoint
  ablate              run a training grid: modes, masks, or modes-x-masks
  sync audio-offset   clock offset in seconds between two WAV recordings
  sync homography     robust 3x3 plane mapping from point correspondences
  sync label-moves    per-part movement labels from an IMU quaternion table
  movement-from-gaze  train the gaze-conditioned movement probe
  selftest            fast end-to-end battery; fails on any threshold miss

exit codes:
  {EXIT_OK}  success
  {EXIT_USAGE}  usage error: bad flags or an inconsistent configuration
  {EXIT_IO}  input/output error: missing or malformed files
  {EXIT_NUMERIC}  numeric failure: training hit a non-finite loss
  {EXIT_SELFTEST}  selftest threshold failure
"""


class UsageError(Exception):
    """Inconsistent flags or configuration values."""


class IoFormatError(Exception):
    """A file is missing, unreadable, or malformed."""


# ---------------------------------------------------------------------------
# config layering


def _read_json(path) -> dict:
    try:
        with open(path) as fh:
            loaded = json.load(fh)
    except json.JSONDecodeError as e:
        raise IoFormatError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(loaded, dict):
        raise IoFormatError(f"{path}: config must be a JSON object")
    return loaded


def _merge_into(base: dict, layer: dict, context: str) -> None:
    for key, value in layer.items():
        if key not in base:
            raise UsageError(f"unknown {context} key {key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise UsageError(f"{context}.{key} must be an object")
            _merge_into(base[key], value, f"{context}.{key}")
        else:
            base[key] = value


def _apply_flags(base: dict, flags: dict) -> None:
    for key, value in flags.items():
        if value is not None:
            base[key] = value


def _world_config(args) -> WorldConfig:
    base = dataclasses.asdict(WorldConfig())
    if args.config:
        _merge_into(base, _read_json(args.config), "config")
    _apply_flags(base, {"n_sequences": args.seqs, "image_size": args.image_size,
                        "k": args.k, "noise": args.noise})
    cfg = WorldConfig(**base)
    cfg.validate()
    return cfg


_TRAIN_FLAG_NAMES = ("mode", "visual", "epochs", "batch_size", "optimizer",
                     "lr", "clip_norm", "seed")


def _train_config(args) -> TrainConfig:
    base = TrainConfig().to_dict()
    if args.config:
        _merge_into(base, _read_json(args.config), "config")
    _apply_flags(base, {name: getattr(args, name) for name in _TRAIN_FLAG_NAMES})
    if args.mask_parts is not None:
        base["mask_parts"] = (None if args.mask_parts == "all"
                              else [s.strip() for s in args.mask_parts.split(",") if s.strip()])
    cfg = TrainConfig.from_dict(base)
    cfg.validate()
    return cfg


def _transfer_config(args, file_cfg: dict) -> TransferConfig:
    base = dataclasses.asdict(TransferConfig())
    _merge_into(base, file_cfg.get("transfer", {}), "config.transfer")
    _apply_flags(base, {"epochs": args.head_epochs, "lr": args.head_lr,
                        "batch_size": args.batch_size, "hidden": args.hidden,
                        "eval_fraction": args.eval_fraction, "seed": args.seed})
    cfg = TransferConfig(**base)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# shared loading helpers


def _load_dataset(path) -> InteractionDataset:
    try:
        return InteractionDataset.load(path)
    except (FileNotFoundError, NotADirectoryError) as e:
        raise IoFormatError(str(e)) from None


def _model_from_checkpoint(path) -> tuple[InteractionModel, TrainConfig]:
    try:
        arrays, meta = nn.load_checkpoint(path)
    except FileNotFoundError as e:
        raise IoFormatError(str(e)) from None
    if meta.get("kind") != "trainer":
        raise IoFormatError(f"{path}: not a training checkpoint")
    cfg = TrainConfig.from_dict(meta["config"])
    model = InteractionModel(cfg.model, np.random.default_rng(0))
    for name, p in model.named_params():
        arr = arrays.get(f"model.{name}")
        if arr is None or arr.shape != p.data.shape:
            raise IoFormatError(f"{path}: missing or misshaped parameter '{name}'")
        p.data = arr.astype(p.data.dtype)
    return model, cfg


def _parse_tasks(text: str) -> tuple[str, ...]:
    if text == "all":
        return TASKS
    names = tuple(s.strip() for s in text.split(",") if s.strip())
    unknown = [n for n in names if n not in TASKS]
    if not names or unknown:
        raise UsageError(f"tasks must be 'all' or names from {TASKS}; got {text!r}")
    return names


# ---------------------------------------------------------------------------
# commands


def _cmd_gen_data(args) -> int:
    cfg = _world_config(args)
    dataset = generate_synthetic_world(cfg, seed=args.seed)
    dataset.save(args.out)
    print(f"wrote {len(dataset)} sequences ({cfg.image_size}px, k={cfg.k}) to {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    dataset = _load_dataset(args.data)
    report = Path(args.report) if args.report else Path(args.out).with_suffix(".csv")
    if args.resume:
        explicit = ([name for name in _TRAIN_FLAG_NAMES
                     if name != "epochs" and getattr(args, name) is not None]
                    + (["mask-parts"] if args.mask_parts is not None else [])
                    + (["config"] if args.config else []))
        if explicit:
            raise UsageError("--resume reuses the checkpointed configuration; "
                             f"drop {explicit} (only --epochs may change)")
        trainer = Trainer.resume(args.resume, dataset)
        trainer.train(args.epochs)
    else:
        trainer = Trainer(dataset, _train_config(args))
        trainer.train()
    trainer.save_checkpoint(args.out)
    trainer.write_report(report)
    last = trainer.history[-1]
    print(f"trained {trainer.config.mode}/{trainer.config.visual} to epoch "
          f"{last['epoch']}: loss {last['total']:.6f}; checkpoint {args.out}, "
          f"report {report}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    if (args.ckpt is None) == (not args.random_init):
        raise UsageError("give exactly one of --ckpt or --random-init")
    file_cfg = _read_json(args.config) if args.config else {}
    unknown = set(file_cfg) - {"transfer", "model"}
    if unknown:
        raise UsageError(f"unknown config keys for eval: {sorted(unknown)}")
    dataset = _load_dataset(args.data)
    if args.random_init:
        base = ModelConfig().to_dict()
        _merge_into(base, file_cfg.get("model", {}), "config.model")
        base.update(image_size=dataset.image_size, k=dataset.k)
        model = InteractionModel(ModelConfig.from_dict(base),
                                 np.random.default_rng(args.seed or 0))
        label = args.label or "random"
        source = "random-init"
    else:
        model, train_cfg = _model_from_checkpoint(args.ckpt)
        label = args.label or f"{train_cfg.mode}/{train_cfg.visual}"
        source = str(args.ckpt)
    tasks = _parse_tasks(args.tasks)
    cfg = _transfer_config(args, file_cfg)
    rows = run_transfer_suite(model, dataset, tasks, cfg)
    for row in rows:
        row["label"] = label
    write_results_csv(rows, args.out, config_lines={
        "source": source, "label": label, "tasks": list(tasks),
        "transfer": dataclasses.asdict(cfg)})
    for row in rows:
        print(f"{label} {row['task']} {row['metric']} {row['value']:.4f}")
    return EXIT_OK


_MASK_GRID = (None, ("torso",), ("neck",), ("arms",), ("legs",))


def _grid_cells(grid: str) -> list[tuple[str, tuple[str, ...] | None]]:
    if grid == "modes":
        return [(mode, None) for mode in MODES]
    if grid == "masks":
        return [("vis-move-attn", parts) for parts in _MASK_GRID]
    cells = []
    for mode in MODES:
        # mask choices only matter where the movement objective is active
        for parts in (_MASK_GRID if "move" in mode else (None,)):
            cells.append((mode, parts))
    return cells


def _cell_label(mode: str, parts) -> str:
    if parts is None:
        return mode
    return f"{mode}+parts-{'-'.join(parts)}"


def _cmd_ablate(args) -> int:
    dataset = _load_dataset(args.data)
    base = _train_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = []
    for mode, parts in _grid_cells(args.grid):
        cfg = dataclasses.replace(base, mode=mode, mask_parts=parts)
        label = _cell_label(mode, parts)
        trainer = Trainer(dataset, cfg)
        trainer.train()
        trainer.save_checkpoint(out_dir / f"{label}.npz")
        trainer.write_report(out_dir / f"{label}.csv")
        last = trainer.history[-1]
        summary.append({"label": label, "mode": mode,
                        "mask_parts": "all" if parts is None else ",".join(parts),
                        "loss": last["total"]})
        print(f"{label}: loss {last['total']:.6f}")
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        for key in ("grid", "visual", "epochs", "batch_size", "seed"):
            value = getattr(args, key, None)
            fh.write(f"# {key}={json.dumps(value if value is not None else getattr(base, key, None))}\n")
        writer = csv.DictWriter(fh, fieldnames=["label", "mode", "mask_parts", "loss"])
        writer.writeheader()
        writer.writerows(summary)
    print(f"wrote {len(summary)} cells to {out_dir}")
    return EXIT_OK


def _cmd_sync_audio(args) -> int:
    try:
        rate_a, samples_a = sync.load_wav(args.a)
        rate_b, samples_b = sync.load_wav(args.b)
    except (FileNotFoundError, ValueError) as e:
        raise IoFormatError(str(e)) from None
    if rate_a != rate_b:
        raise IoFormatError(f"sample rates differ: {rate_a} vs {rate_b}")
    offset = sync.audio_offset(samples_a, samples_b, rate_a)
    print(f"{offset:.6f}")
    return EXIT_OK


def _cmd_sync_homography(args) -> int:
    try:
        src, dst = sync.load_points_csv(args.points)
    except (FileNotFoundError, ValueError) as e:
        raise IoFormatError(str(e)) from None
    h = sync.estimate_homography(src, dst, iterations=args.iterations,
                                 threshold=args.threshold, seed=args.seed)
    inliers = int((sync.homography_errors(h, src, dst) < args.threshold).sum())
    print(" ".join(f"{v:.10g}" for v in h.ravel()))
    print(f"inliers {inliers} {len(src)}")
    return EXIT_OK


def _cmd_sync_label_moves(args) -> int:
    if args.fps <= 0:
        raise UsageError("--fps must be positive")
    try:
        tracks = sync.load_imu_table(args.imu)
    except (FileNotFoundError, ValueError) as e:
        raise IoFormatError(str(e)) from None
    interval = 1.0 / args.fps
    t0 = min(times[0] for times, _ in tracks.values())
    t1 = max(times[-1] for times, _ in tracks.values())
    frame_times = t0 + np.arange(int(np.floor((t1 - t0) * args.fps)) + 1) / args.fps
    magnitudes = {name: sync.movement_magnitudes(times, quats, frame_times, interval)
                  for name, (times, quats) in tracks.items()}
    target = sync.label_movements(magnitudes)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        out.write(f"# source={json.dumps(str(args.imu))}\n")
        out.write(f"# fps={args.fps}\n")
        out.write(f"# sensors={json.dumps(sorted(tracks))}\n")
        writer = csv.writer(out)
        writer.writerow(["t"] + [f"label_{p}" for p in objectives.PARTS]
                        + [f"mask_{p}" for p in objectives.PARTS])
        for i, t in enumerate(frame_times):
            writer.writerow([f"{t:.6f}"] + [int(v) for v in target.labels[i]]
                            + [int(v) for v in target.mask[i]])
    finally:
        if args.out:
            out.close()
    if args.out:
        print(f"wrote {len(frame_times)} frames to {args.out}")
    return EXIT_OK


def _cmd_movement_from_gaze(args) -> int:
    dataset = _load_dataset(args.data)
    model = None
    if args.config:
        file_cfg = _read_json(args.config)
        unknown = set(file_cfg) - {"model"}
        if unknown:
            raise UsageError(f"unknown config keys for movement-from-gaze: {sorted(unknown)}")
        if "model" in file_cfg:
            base = ModelConfig().to_dict()
            base["gaze_conditioned"] = True  # the probe requires it
            _merge_into(base, file_cfg["model"], "config.model")
            base.update(image_size=dataset.image_size, k=dataset.k)
            model = ModelConfig.from_dict(base)
    result = movement_from_gaze_experiment(
        dataset, epochs=args.epochs, batch_size=args.batch_size, seed=args.seed,
        model=model, eval_fraction=args.eval_fraction)
    result["config"] = {"epochs": args.epochs, "batch_size": args.batch_size,
                        "seed": args.seed, "eval_fraction": args.eval_fraction,
                        "model": model.to_dict() if model else None}
    text = json.dumps(result, sort_keys=True, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
        avg = result["average"]
        print(f"average per-part accuracy "
              f"{'n/a' if avg is None else format(avg, '.4f')}; wrote {args.out}")
    else:
        print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# selftest


def _micro_model() -> ModelConfig:
    return ModelConfig(image_size=8, k=2, backbone_channels=(2, 3),
                       backbone_strides=(1, 2), reducer_channels=2, lstm_hidden=4,
                       lstm_layers=1, contrastive_dim=4, bank_size=8,
                       gaze_embed_dim=4)


def _selftest_checks(seed: int):
    def huber_closed_forms():
        got = objectives.huber(T.Tensor(np.array([0.0, 0.4, 2.0])), 1.0).data
        want = np.array([0.0, 0.08, 1.5])
        assert np.allclose(got, want, atol=1e-6), f"huber {got} != {want}"
        return f"huber(0,.4,2)={np.round(got, 6).tolist()}"

    def infonce_uniform():
        vec = np.zeros((1, 4), np.float32)
        vec[0, 0] = 1.0
        loss = objectives.infonce_loss(T.Tensor(vec), T.Tensor(vec.copy()),
                                       np.repeat(vec, 7, axis=0)).item()
        want = float(np.log(8.0))
        assert abs(loss - want) < 1e-6, f"infonce {loss} != log(8)={want}"
        return f"uniform infonce={loss:.6f}"

    def flip_involution():
        from .data import flip_sequence
        world = generate_synthetic_world(
            WorldConfig(n_sequences=2, image_size=8, k=2), seed=seed)
        seq = world[0]
        back = flip_sequence(flip_sequence(seq))
        assert np.array_equal(back.frames, seq.frames), "frames changed"
        assert np.array_equal(back.gaze, seq.gaze), "gaze changed"
        assert np.array_equal(back.movement.labels, seq.movement.labels), "labels changed"
        return "double flip is exact"

    def audio_offset_recovery():
        rng = np.random.default_rng(seed)
        kernel = np.exp(-np.linspace(-3, 3, 41) ** 2)
        a = np.convolve(rng.normal(size=3000), kernel / kernel.sum(), mode="same")
        b = np.concatenate([np.zeros(150), a])[:3000]
        offset = sync.audio_offset(a, b, 1000.0)
        assert abs(offset - 0.150) <= 5.5e-4, f"offset {offset} != 0.150"
        return f"150-sample shift -> {offset:.6f}s"

    def homography_recovery():
        h_true = np.array([[1.2, 0.1, 5.0], [-0.05, 0.9, -3.0], [1e-4, -2e-4, 1.0]])
        rng = np.random.default_rng(seed)
        src = rng.uniform(0, 100, size=(40, 2))
        mapped = np.hstack([src, np.ones((40, 1))]) @ h_true.T
        dst = mapped[:, :2] / mapped[:, 2:3]
        h = sync.estimate_homography(src, dst)
        err = sync.homography_errors(h, src, dst).max()
        assert err < 1e-6, f"max transfer error {err}"
        return f"max transfer error {err:.2e}"

    def tertile_fractions():
        rng = np.random.default_rng(seed)
        target = sync.label_movements({"torso": rng.uniform(0, 1, size=6000)})
        moving = float(target.labels[:, 0].mean())
        assert abs(moving - 1.0 / 3.0) < 0.05, f"moving fraction {moving}"
        return f"moving fraction {moving:.3f}"

    def train_determinism():
        world = generate_synthetic_world(
            WorldConfig(n_sequences=6, image_size=8, k=2), seed=seed)
        cfg = TrainConfig(mode="vis-move-attn", visual="infonce", epochs=1,
                          batch_size=3, seed=seed, model=_micro_model())
        hashes = []
        for _ in range(2):
            trainer = Trainer(world, cfg)
            history = trainer.train()
            assert np.isfinite(history[-1]["total"]), "non-finite loss"
            hashes.append(nn.params_sha256(trainer.model.named_params()))
        assert hashes[0] == hashes[1], "two seeded runs diverged"
        return f"params sha {hashes[0][:12]}"

    def ae_objective_runs():
        world = generate_synthetic_world(
            WorldConfig(n_sequences=6, image_size=8, k=2), seed=seed)
        cfg = TrainConfig(mode="vis", visual="ae", epochs=1, batch_size=3,
                          seed=seed, model=_micro_model())
        history = Trainer(world, cfg).train()
        assert np.isfinite(history[-1]["total"]), "non-finite loss"
        return f"ae loss {history[-1]['total']:.4f}"

    def transfer_scene_runs():
        from .transfer import run_transfer_task
        world = generate_synthetic_world(
            WorldConfig(n_sequences=8, image_size=8, k=2), seed=seed)
        model = InteractionModel(_micro_model(), np.random.default_rng(seed))
        res = run_transfer_task(model, world, "scene",
                                TransferConfig(epochs=1, batch_size=4, hidden=8,
                                               seed=seed))
        assert 0.0 <= res["value"] <= 100.0, f"accuracy {res['value']}"
        return f"scene per-class top-1 {res['value']:.1f}%"

    return [
        ("huber-closed-forms", huber_closed_forms),
        ("infonce-uniform", infonce_uniform),
        ("flip-involution", flip_involution),
        ("audio-offset", audio_offset_recovery),
        ("homography", homography_recovery),
        ("tertile-fractions", tertile_fractions),
        ("train-determinism", train_determinism),
        ("ae-objective", ae_objective_runs),
        ("transfer-scene", transfer_scene_runs),
    ]


def _cmd_selftest(args) -> int:
    started = time.time()
    failures = 0
    checks = _selftest_checks(args.seed)
    for name, fn in checks:
        try:
            detail = fn()
            print(f"ok   {name}: {detail}")
        except AssertionError as e:
            failures += 1
            print(f"FAIL {name}: {e}")
    verdict = "PASS" if failures == 0 else "FAIL"
    print(f"selftest: {verdict} ({len(checks) - failures}/{len(checks)} checks, "
          f"{time.time() - started:.1f}s)")
    return EXIT_OK if failures == 0 else EXIT_SELFTEST


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="egorep",
        description="Interaction-based self-supervised representation learning "
                    "on egocentric image sequences.",
        epilog=_EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", help="write a synthetic interaction dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seqs", type=int, help="number of sequences")
    p.add_argument("--image-size", type=int, help="square frame size in pixels")
    p.add_argument("--k", type=int, help="frames per sequence")
    p.add_argument("--noise", type=float, help="pixel noise sigma")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="JSON file with world-config overrides")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="fit a model; writes checkpoint + report CSV")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--report", help="report CSV path (default: checkpoint with .csv)")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--visual", choices=VISUAL_OBJECTIVES)
    p.add_argument("--mask-parts",
                   help=f"comma list from {tuple(PART_GROUPS)} or 'all' "
                        "(limits movement supervision)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--optimizer", choices=("auto", "sgd", "adam"))
    p.add_argument("--lr", type=float)
    p.add_argument("--clip-norm", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="JSON file with train-config overrides")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="frozen-feature transfer metrics")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--ckpt", help="trained checkpoint to evaluate")
    p.add_argument("--random-init", action="store_true",
                   help="evaluate an untrained model instead of a checkpoint")
    p.add_argument("--tasks", default="all",
                   help=f"'all' or comma list from {TASKS}")
    p.add_argument("--out", required=True, help="results CSV path")
    p.add_argument("--label", help="row label (default: mode/visual or 'random')")
    p.add_argument("--head-epochs", type=int)
    p.add_argument("--head-lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--eval-fraction", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="JSON file with 'transfer'/'model' overrides")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="run a training grid")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory, one report per cell")
    p.add_argument("--grid", required=True, choices=("modes", "masks", "modes-x-masks"))
    p.add_argument("--visual", choices=VISUAL_OBJECTIVES)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--optimizer", choices=("auto", "sgd", "adam"))
    p.add_argument("--lr", type=float)
    p.add_argument("--clip-norm", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="JSON file with train-config overrides")
    p.set_defaults(func=_cmd_ablate, mode=None, mask_parts=None)

    p = sub.add_parser("sync", help="sensor synchronization utilities")
    sync_sub = p.add_subparsers(dest="sync_command", required=True, metavar="UTILITY")

    q = sync_sub.add_parser("audio-offset", help="clock offset between two WAVs")
    q.add_argument("a", help="reference WAV")
    q.add_argument("b", help="other WAV")
    q.set_defaults(func=_cmd_sync_audio)

    q = sync_sub.add_parser("homography", help="robust plane mapping from x1,y1,x2,y2 CSV")
    q.add_argument("points", help="correspondence CSV")
    q.add_argument("--threshold", type=float, default=3.0)
    q.add_argument("--iterations", type=int, default=2000)
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(func=_cmd_sync_homography)

    q = sync_sub.add_parser("label-moves",
                            help="movement labels from a t,sensor_id,qw,qx,qy,qz CSV")
    q.add_argument("imu", help="IMU quaternion CSV")
    q.add_argument("--fps", type=float, default=6.0, help="video frame rate")
    q.add_argument("--out", help="label CSV path (default: stdout)")
    q.set_defaults(func=_cmd_sync_label_moves)

    p = sub.add_parser("movement-from-gaze",
                       help="gaze-conditioned movement probe, reports per-part accuracy")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eval-fraction", type=float, default=0.25)
    p.add_argument("--config", help="JSON file with a 'model' override")
    p.add_argument("--out", help="JSON output path (default: stdout)")
    p.set_defaults(func=_cmd_movement_from_gaze)

    p = sub.add_parser("selftest", help="fast end-to-end battery")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_selftest)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse already printed usage or help
        return EXIT_OK if not e.code else int(e.code)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: usage: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericFailure as e:
        print(f"error: numeric: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (IoFormatError, DatasetError, nn.CheckpointError, OSError) as e:
        print(f"error: io: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"error: usage: {e}", file=sys.stderr)
        return EXIT_USAGE


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
