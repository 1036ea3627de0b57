"""Frozen-representation evaluation on the synthetic downstream tasks.

A trained (or random) backbone is frozen and small task heads are fitted on
top of its features: scene kind, action, and focus-object dynamics
classification, walkable-floor segmentation, and pseudo-depth regression.
Head training never touches the backbone; a parameter hash taken at freeze
time is re-checked after every evaluation.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from . import tensor as T
from .data import (ACTIONS, DYNAMICS, InteractionDataset, SHAPE_KINDS,
                   SequenceSampler, depth_map, ground_mask, split_indices)
from .encoder import InteractionModel

TASKS = ("scene", "action", "dynamics", "walkable", "depth")

_N_CLASSES = {"scene": len(SHAPE_KINDS), "action": len(ACTIONS), "dynamics": len(DYNAMICS)}
_META_KEY = {"scene": "scene_class", "action": "action_class", "dynamics": "dyn_class"}


@dataclass(frozen=True)
class TransferConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    eval_fraction: float = 0.25
    hidden: int = 64

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.hidden < 1:
            raise ValueError("transfer config: sizes must be positive")
        if self.lr <= 0:
            raise ValueError("transfer config: lr must be positive")
        if not 0 < self.eval_fraction < 1:
            raise ValueError("transfer config: eval fraction must lie in (0, 1)")


# ---------------------------------------------------------------------------
# metrics


def per_class_top1(pred: np.ndarray, true: np.ndarray, n_classes: int):
    """Mean over classes of within-class accuracy, in percent.

    Classes with no ground-truth samples cannot be scored; they are excluded
    from the mean and reported separately.
    """
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.shape != true.shape:
        raise ValueError(f"prediction shape {pred.shape} != label shape {true.shape}")
    per_class = {}
    excluded = []
    for c in range(n_classes):
        sel = true == c
        if not sel.any():
            excluded.append(c)
            continue
        per_class[c] = float((pred[sel] == c).mean() * 100.0)
    if not per_class:
        raise ValueError("no class has any ground-truth samples")
    return float(np.mean(list(per_class.values()))), per_class, excluded


def binary_iou(pred: np.ndarray, true: np.ndarray) -> float:
    """Intersection over union of two boolean masks; both empty counts as a
    perfect match (1.0)."""
    pred = np.asarray(pred, dtype=bool)
    true = np.asarray(true, dtype=bool)
    if pred.shape != true.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {true.shape}")
    union = np.logical_or(pred, true).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, true).sum() / union)


def rmse_log(pred: np.ndarray, true: np.ndarray) -> float:
    """Root mean squared error between log depths; inputs must be positive."""
    pred = np.asarray(pred, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    if pred.shape != true.shape:
        raise ValueError(f"depth shapes differ: {pred.shape} vs {true.shape}")
    if np.any(pred <= 0) or np.any(true <= 0):
        raise ValueError("depths must be strictly positive")
    return float(np.sqrt(np.mean((np.log(pred) - np.log(true)) ** 2)))


# ---------------------------------------------------------------------------
# frozen feature extraction


class FrozenBackbone:
    """Read-only view of a model's convolutional backbone.

    Features are always computed without gradient tracking, and ``check``
    verifies against the freeze-time parameter hash that nothing modified
    the backbone.
    """

    def __init__(self, model: InteractionModel):
        self.model = model
        self.cfg = model.cfg
        self.sha256 = nn.params_sha256(nn.prefixed("backbone", model.backbone))

    def check(self) -> None:
        now = nn.params_sha256(nn.prefixed("backbone", self.model.backbone))
        if now != self.sha256:
            raise RuntimeError("frozen backbone changed during transfer "
                               f"(hash {self.sha256[:12]} -> {now[:12]})")

    def frame_features(self, images: np.ndarray) -> np.ndarray:
        """(N, 3, S, S) -> (N, C, g, g) final-stage features."""
        with T.no_grad():
            return self.model.backbone.forward(T.Tensor(images)).data.copy()

    def stage_features(self, images: np.ndarray) -> list[np.ndarray]:
        """(N, 3, S, S) -> per-stage feature maps, shallowest first."""
        with T.no_grad():
            stages = self.model.backbone.forward(T.Tensor(images), return_stages=True)
        return [s.data.copy() for s in stages]


def _batched(fn, images: np.ndarray, batch: int = 64):
    outs = [fn(images[i : i + batch]) for i in range(0, len(images), batch)]
    if isinstance(outs[0], list):
        return [np.concatenate(parts) for parts in zip(*outs)]
    return np.concatenate(outs)


# ---------------------------------------------------------------------------
# task heads


def _head_rng(seed: int, task: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, TASKS.index(task), 7041)))


class _ClassifierHead:
    """1x1 conv over the feature map, pooled, then two fully connected layers."""

    def __init__(self, rng, channels: int, hidden: int, n_classes: int):
        self.conv = nn.Conv2d(rng, channels, hidden, 1)
        self.fc1 = nn.Linear(rng, hidden, hidden)
        self.fc2 = nn.Linear(rng, hidden, n_classes)

    def forward(self, feats: T.Tensor) -> T.Tensor:
        y = T.leaky_relu(self.conv.forward(feats), 0.1)
        y = y.mean(axis=(2, 3))
        y = T.leaky_relu(self.fc1.forward(y), 0.1)
        return self.fc2.forward(y)

    def named_params(self):
        yield from nn.prefixed("conv", self.conv)
        yield from nn.prefixed("fc1", self.fc1)
        yield from nn.prefixed("fc2", self.fc2)


class _ActionHead:
    """Shared 1x1 conv per frame, an LSTM over the sequence, two FC layers."""

    def __init__(self, rng, channels: int, grid: int, hidden: int, n_classes: int):
        reduce_ch = max(hidden // 4, 4)
        self.reduce = nn.Conv2d(rng, channels, reduce_ch, 1)
        self.lstm = nn.LstmStack(rng, reduce_ch * grid * grid, hidden, 1)
        self.fc1 = nn.Linear(rng, hidden, hidden)
        self.fc2 = nn.Linear(rng, hidden, n_classes)
        self.grid = grid
        self.reduce_ch = reduce_ch

    def forward(self, feats: T.Tensor) -> T.Tensor:
        # feats: (B, k, C, g, g)
        b, k = feats.shape[0], feats.shape[1]
        flat = feats.reshape(b * k, feats.shape[2], self.grid, self.grid)
        red = T.leaky_relu(self.reduce.forward(flat), 0.1)
        seq = red.reshape(b, k, self.reduce_ch * self.grid * self.grid)
        steps = [seq[:, t, :] for t in range(k)]
        tops, _ = self.lstm.run(steps)
        y = T.leaky_relu(self.fc1.forward(tops[-1]), 0.1)
        return self.fc2.forward(y)

    def named_params(self):
        yield from nn.prefixed("reduce", self.reduce)
        yield from nn.prefixed("lstm", self.lstm)
        yield from nn.prefixed("fc1", self.fc1)
        yield from nn.prefixed("fc2", self.fc2)


class _DynamicsHead:
    """Shared 1x1 conv over the first and last frame's features, channel
    concat, two 3x3 convs, pooled, then a linear classifier."""

    def __init__(self, rng, channels: int, hidden: int, n_classes: int):
        self.reduce = nn.Conv2d(rng, channels, hidden, 1)
        self.conv1 = nn.Conv2d(rng, 2 * hidden, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(rng, hidden, hidden, 3, padding=1)
        self.fc = nn.Linear(rng, hidden, n_classes)

    def forward(self, first: T.Tensor, last: T.Tensor) -> T.Tensor:
        a = T.leaky_relu(self.reduce.forward(first), 0.1)
        b = T.leaky_relu(self.reduce.forward(last), 0.1)
        y = T.concat([a, b], axis=1)
        y = T.leaky_relu(self.conv1.forward(y), 0.1)
        y = T.leaky_relu(self.conv2.forward(y), 0.1)
        return self.fc.forward(y.mean(axis=(2, 3)))

    def named_params(self):
        yield from nn.prefixed("reduce", self.reduce)
        yield from nn.prefixed("conv1", self.conv1)
        yield from nn.prefixed("conv2", self.conv2)
        yield from nn.prefixed("fc", self.fc)


class _MapHead:
    """Pixel-shuffle decoder over the backbone stages to a full-resolution
    one-channel map (segmentation logits or log depth)."""

    def __init__(self, rng, stage_channels: list[int], stage_grids: list[int],
                 image_size: int, hidden: int):
        for coarse, fine in zip(stage_grids[1:], stage_grids[:-1]):
            if fine != 2 * coarse:
                raise ValueError(f"stage grids {stage_grids} must halve stepwise")
        self.stage_grids = stage_grids
        self.image_size = image_size
        self.start = nn.Conv2d(rng, stage_channels[-1], hidden, 1)
        self.ups = []
        self.skips = []
        for ch in reversed(stage_channels[:-1]):
            self.ups.append(nn.Conv2d(rng, hidden, 4 * hidden, 3, padding=1))
            self.skips.append(nn.Conv2d(rng, ch, hidden, 1))
        self.extra = []
        size = stage_grids[0]
        while size < image_size:
            self.extra.append(nn.Conv2d(rng, hidden, 4 * hidden, 3, padding=1))
            size *= 2
        if size != image_size:
            raise ValueError(f"cannot reach image size {image_size} from grid {stage_grids[0]}")
        self.out = nn.Conv2d(rng, hidden, 1, 1)

    def forward(self, stages: list[T.Tensor]) -> T.Tensor:
        y = T.leaky_relu(self.start.forward(stages[-1]), 0.1)
        for up, skip, feats in zip(self.ups, self.skips, reversed(stages[:-1])):
            y = T.pixel_shuffle(up.forward(y), 2)
            y = T.leaky_relu(y + skip.forward(feats), 0.1)
        for conv in self.extra:
            y = T.leaky_relu(T.pixel_shuffle(conv.forward(y), 2), 0.1)
        out = self.out.forward(y)
        return out.reshape(out.shape[0], self.image_size, self.image_size)

    def named_params(self):
        yield from nn.prefixed("start", self.start)
        for i, conv in enumerate(self.ups):
            yield from nn.prefixed(f"up{i}", conv)
        for i, conv in enumerate(self.skips):
            yield from nn.prefixed(f"skip{i}", conv)
        for i, conv in enumerate(self.extra):
            yield from nn.prefixed(f"extra{i}", conv)
        yield from nn.prefixed("out", self.out)


# ---------------------------------------------------------------------------
# head objectives


def _cross_entropy(logits: T.Tensor, labels: np.ndarray) -> T.Tensor:
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(labels)), labels] = 1.0
    true_logit = (logits * T.constant(onehot, dtype=logits.dtype)).sum(axis=1)
    return (T.logsumexp(logits, axis=1) - true_logit).mean()


def _bce_with_logits(logits: T.Tensor, targets: np.ndarray) -> T.Tensor:
    y = T.constant(targets.astype(logits.dtype), dtype=logits.dtype)
    per = T.relu(logits) - logits * y + T.log(T.exp(-T.abs_(logits)) + 1.0)
    return per.mean()


def _squared_log_error(raw: T.Tensor, depth: np.ndarray) -> T.Tensor:
    target = T.constant(np.log(depth).astype(raw.dtype), dtype=raw.dtype)
    diff = raw - target
    return (diff * diff).mean()


# ---------------------------------------------------------------------------
# the evaluation protocol


def _train_head(params: list, loss_of_batch, n_train: int, cfg: TransferConfig) -> None:
    sampler = SequenceSampler(n_train, min(cfg.batch_size, n_train), cfg.seed)
    opt = nn.Adam(cfg.lr)
    for _ in range(cfg.epochs * sampler.batches_per_epoch()):
        idx = np.asarray(sampler.next_batch())
        with T.Tape():
            loss = loss_of_batch(idx)
            loss.backward()
        nn.clip_gradients(params, 5.0)
        opt.step(params)
        nn.zero_grads(params)


def run_transfer_task(model: InteractionModel, dataset: InteractionDataset,
                      task: str, cfg: TransferConfig = TransferConfig()) -> dict:
    """Freeze the model's backbone, fit the task head, return the eval metric."""
    if task not in TASKS:
        raise ValueError(f"task {task!r} not one of {TASKS}")
    cfg.validate()
    backbone = FrozenBackbone(model)
    mc = backbone.cfg
    if dataset.image_size != mc.image_size or dataset.k != mc.k:
        raise ValueError("dataset geometry does not match the model")
    train_idx, eval_idx = split_indices(len(dataset), cfg.eval_fraction, cfg.seed)
    rng = _head_rng(cfg.seed, task)
    result = {"task": task, "n_train": int(len(train_idx)), "n_eval": int(len(eval_idx))}

    if task in ("scene", "dynamics"):
        n_classes = _N_CLASSES[task]
        labels = np.array([dataset[i].meta[_META_KEY[task]] for i in range(len(dataset))])
        firsts = np.stack([dataset[i].frames[0] for i in range(len(dataset))])
        f_first = _batched(backbone.frame_features, firsts)
        if task == "dynamics":
            lasts = np.stack([dataset[i].frames[-1] for i in range(len(dataset))])
            f_last = _batched(backbone.frame_features, lasts)
            head = _DynamicsHead(rng, mc.feature_channels, cfg.hidden, n_classes)
            params = list(nn.prefixed("head", head))

            def loss_of_batch(idx):
                sel = train_idx[idx]
                return _cross_entropy(head.forward(T.Tensor(f_first[sel]),
                                                   T.Tensor(f_last[sel])), labels[sel])

            def predict(sel):
                with T.no_grad():
                    return head.forward(T.Tensor(f_first[sel]),
                                        T.Tensor(f_last[sel])).data.argmax(axis=1)
        else:
            head = _ClassifierHead(rng, mc.feature_channels, cfg.hidden, n_classes)
            params = list(nn.prefixed("head", head))

            def loss_of_batch(idx):
                sel = train_idx[idx]
                return _cross_entropy(head.forward(T.Tensor(f_first[sel])), labels[sel])

            def predict(sel):
                with T.no_grad():
                    return head.forward(T.Tensor(f_first[sel])).data.argmax(axis=1)

        _train_head(params, loss_of_batch, len(train_idx), cfg)
        pred = predict(eval_idx)
        value, per_class, excluded = per_class_top1(pred, labels[eval_idx], n_classes)
        result.update(metric="per_class_top1", value=value,
                      per_class={str(c): v for c, v in per_class.items()},
                      excluded_classes=excluded)

    elif task == "action":
        n_classes = _N_CLASSES[task]
        labels = np.array([dataset[i].meta[_META_KEY[task]] for i in range(len(dataset))])
        frames = np.stack([dataset[i].frames for i in range(len(dataset))])
        n, k = frames.shape[0], frames.shape[1]
        flat = _batched(backbone.frame_features, frames.reshape(n * k, *frames.shape[2:]))
        seq_feats = flat.reshape(n, k, *flat.shape[1:])
        head = _ActionHead(rng, mc.feature_channels, mc.grid, cfg.hidden, n_classes)
        params = list(nn.prefixed("head", head))

        def loss_of_batch(idx):
            sel = train_idx[idx]
            return _cross_entropy(head.forward(T.Tensor(seq_feats[sel])), labels[sel])

        _train_head(params, loss_of_batch, len(train_idx), cfg)
        with T.no_grad():
            pred = head.forward(T.Tensor(seq_feats[eval_idx])).data.argmax(axis=1)
        value, per_class, excluded = per_class_top1(pred, labels[eval_idx], n_classes)
        result.update(metric="per_class_top1", value=value,
                      per_class={str(c): v for c, v in per_class.items()},
                      excluded_classes=excluded)

    else:  # walkable or depth: dense maps over the first frame
        firsts = np.stack([dataset[i].frames[0] for i in range(len(dataset))])
        stages = _batched(backbone.stage_features, firsts)
        if task == "walkable":
            targets = np.stack([ground_mask(dataset[i]) for i in range(len(dataset))])
        else:
            targets = np.stack([depth_map(dataset[i]) for i in range(len(dataset))])
        head = _MapHead(rng, [s.shape[1] for s in stages], [s.shape[2] for s in stages],
                        mc.image_size, cfg.hidden)
        params = list(nn.prefixed("head", head))

        def loss_of_batch(idx):
            sel = train_idx[idx]
            out = head.forward([T.Tensor(s[sel]) for s in stages])
            if task == "walkable":
                return _bce_with_logits(out, targets[sel])
            return _squared_log_error(out, targets[sel])

        _train_head(params, loss_of_batch, len(train_idx), cfg)
        with T.no_grad():
            raw = head.forward([T.Tensor(s[eval_idx]) for s in stages]).data
        if task == "walkable":
            result.update(metric="iou", value=binary_iou(raw > 0, targets[eval_idx]))
        else:
            result.update(metric="rmse_log",
                          value=rmse_log(np.exp(raw.astype(np.float64)),
                                         targets[eval_idx]))

    backbone.check()
    return result


def run_transfer_suite(model: InteractionModel, dataset: InteractionDataset,
                       tasks=TASKS, cfg: TransferConfig = TransferConfig()) -> list[dict]:
    return [run_transfer_task(model, dataset, task, cfg) for task in tasks]


def write_results_csv(rows: list[dict], path, config_lines: dict | None = None) -> None:
    """One CSV row per (label, task); comment lines echo the configuration."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        for key, value in sorted((config_lines or {}).items()):
            fh.write(f"# {key}={json.dumps(value, sort_keys=True)}\n")
        writer = csv.writer(fh)
        writer.writerow(["label", "task", "metric", "value", "details"])
        for row in rows:
            details = {k: row[k] for k in ("per_class", "excluded_classes")
                       if k in row and row[k]}
            writer.writerow([row.get("label", ""), row["task"], row["metric"],
                             f"{row['value']:.4f}",
                             json.dumps(details, sort_keys=True) if details else ""])
