"""Self-supervised training loop over interaction sequences.

One trainer instance owns the model, the optimizer, the augmentation RNG,
and (for the contrastive objective) the momentum key encoder plus the
negative bank.  Runs are bitwise deterministic in the seed, and checkpoints
carry everything needed to resume mid-epoch with results identical to an
uninterrupted run.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import nn
from . import tensor as T
from .data import (AugmentConfig, InteractionDataset, SequenceSampler,
                   augment, split_indices)
from .encoder import AeDecoder, DualEncoderState, InteractionModel, ModelConfig
from .objectives import (LossWeights, MovementTarget, PARTS, ae_loss, gaze_loss,
                         infonce_loss, movement_loss, total_loss)

# which objective terms are active: the contrastive/reconstruction term is
# always on; gaze (attn) and body movement (move) are switchable
MODES = ("vis", "vis-attn", "vis-move", "vis-move-attn")
VISUAL_OBJECTIVES = ("infonce", "ae")

# selectable part groups for movement-supervision ablations; left/right limbs
# are ablated together
PART_GROUPS = {
    "torso": ("torso",),
    "neck": ("neck",),
    "arms": ("right_arm", "left_arm"),
    "legs": ("right_leg", "left_leg"),
}


class NumericFailure(RuntimeError):
    """Training hit a non-finite loss; the message carries the batch context."""


@dataclass
class TrainConfig:
    mode: str = "vis-move-attn"
    visual: str = "infonce"
    epochs: int = 1
    batch_size: int = 8
    seed: int = 0
    optimizer: str = "auto"          # auto | sgd | adam
    lr: float | None = None         # None: 0.03 for sgd, 1e-3 for adam
    clip_norm: float = 5.0
    weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    mask_parts: tuple[str, ...] | None = None  # None: supervise all parts

    @property
    def attention_on(self) -> bool:
        return "attn" in self.mode

    @property
    def movement_on(self) -> bool:
        return "move" in self.mode

    def effective_weights(self) -> LossWeights:
        """Mode-gated loss weights: switched-off terms get coefficient zero."""
        return LossWeights(
            attention=self.weights.attention if self.attention_on else 0.0,
            movement=self.weights.movement if self.movement_on else 0.0,
            visual=self.weights.visual,
            huber_delta=self.weights.huber_delta,
        )

    def resolved_optimizer(self) -> str:
        if self.optimizer != "auto":
            return self.optimizer
        return "sgd" if self.mode == "vis" else "adam"

    def resolved_lr(self) -> float:
        if self.lr is not None:
            return float(self.lr)
        return 0.03 if self.resolved_optimizer() == "sgd" else 1e-3

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode {self.mode!r} not one of {MODES}")
        if self.visual not in VISUAL_OBJECTIVES:
            raise ValueError(f"visual {self.visual!r} not one of {VISUAL_OBJECTIVES}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be positive")
        if self.optimizer not in ("auto", "sgd", "adam"):
            raise ValueError(f"optimizer {self.optimizer!r} not one of auto/sgd/adam")
        if self.lr is not None and self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.clip_norm < 0:
            raise ValueError("clip_norm must be non-negative (0 disables clipping)")
        if self.mask_parts is not None:
            if not self.mask_parts:
                raise ValueError("mask_parts must name at least one part group")
            unknown = sorted(set(self.mask_parts) - set(PART_GROUPS))
            if unknown:
                raise ValueError(
                    f"unknown part groups {unknown}; expected names from "
                    f"{tuple(PART_GROUPS)}")
        self.effective_weights().validate()
        self.model.validate()

    def supervised_part_columns(self) -> tuple[int, ...]:
        """Indices into PARTS whose movement labels stay unmasked."""
        if self.mask_parts is None:
            return tuple(range(len(PARTS)))
        keep = {p for g in self.mask_parts for p in PART_GROUPS[g]}
        return tuple(i for i, p in enumerate(PARTS) if p in keep)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        if self.mask_parts is not None:
            d["mask_parts"] = list(self.mask_parts)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["weights"] = LossWeights(**d["weights"])
        d["model"] = ModelConfig.from_dict(d["model"])
        aug = d["augment"]
        for key in ("brightness", "contrast", "saturation"):
            aug[key] = tuple(aug[key])
        d["augment"] = AugmentConfig(**aug)
        if d.get("mask_parts") is not None:
            d["mask_parts"] = tuple(d["mask_parts"])
        return cls(**d)


class Trainer:
    """Owns one training run.  ``train`` advances whole epochs, ``step`` one
    batch; ``save_checkpoint``/``resume`` round-trip the full run state."""

    def __init__(self, dataset: InteractionDataset, config: TrainConfig):
        config.validate()
        if dataset.image_size != config.model.image_size or dataset.k != config.model.k:
            raise ValueError(
                f"dataset geometry ({dataset.image_size}px, k={dataset.k}) does not "
                f"match the model ({config.model.image_size}px, k={config.model.k})")
        self.dataset = dataset
        self.config = config
        self.weights = config.effective_weights()
        root = np.random.SeedSequence(config.seed)
        init_ss, aug_ss = root.spawn(2)
        init_rng = np.random.default_rng(init_ss)
        self.dual = None
        self.bank = None
        self.decoder = None
        if config.visual == "infonce":
            self.dual = DualEncoderState(config.model, init_rng)
            self.model = self.dual.model
            self.bank = self.dual.bank
        else:
            self.model = InteractionModel(config.model, init_rng)
        if config.visual == "ae" and self.weights.visual > 0:
            self.decoder = AeDecoder(config.model, init_rng)
        self.rng = np.random.default_rng(aug_ss)
        self.sampler = SequenceSampler(len(dataset), config.batch_size, config.seed)
        self.optimizer = nn.make_optimizer(config.resolved_optimizer(), config.resolved_lr())
        self.step_count = 0
        self.history: list[dict] = []
        self._accum = {"samples": 0, "total": 0.0, "attention": 0.0,
                       "movement": 0.0, "visual": 0.0}
        self._trainable = self._select_trainable()
        if self.bank is not None:
            self._warm_bank()

    # -- parameter selection ------------------------------------------------

    def _select_trainable(self) -> list[tuple[str, T.Tensor]]:
        """Parameters the active objectives actually reach.

        Giving the optimizer exactly this set keeps the missing-gradient check
        meaningful: a gradient that should exist but does not is a bug, not
        something to skip silently.
        """
        cfg = self.config
        seq = cfg.attention_on or cfg.movement_on
        vis = self.weights.visual > 0
        keep_root = {
            "backbone": seq or vis,
            "reducer": seq,
            "encoder_lstm": seq,
            "decoder_lstm": seq,
            "decoder_token": seq,
            "gaze_head": cfg.attention_on,
            "movement_head": cfg.movement_on,
            "projection": vis and cfg.visual == "infonce",
            "gaze_embed1": seq,
            "gaze_embed2": seq,
        }
        pairs = [(f"model.{name}", p) for name, p in self.model.named_params()
                 if keep_root[name.split(".")[0]]]
        if self.decoder is not None:
            pairs += list(nn.prefixed("ae_decoder", self.decoder))
        return pairs

    def _all_params(self):
        yield from ((f"model.{n}", p) for n, p in self.model.named_params())
        if self.decoder is not None:
            yield from nn.prefixed("ae_decoder", self.decoder)

    # -- contrastive machinery ----------------------------------------------

    def _warm_bank(self) -> None:
        # seed the negative bank with key embeddings of the first frames so
        # the contrastive loss has negatives from the very first step
        n = min(len(self.dataset), self.config.batch_size)
        firsts = np.stack([self.dataset[i].frames[0] for i in range(n)])
        self.bank.push(self.dual.key_encode(firsts))

    # -- one batch ------------------------------------------------------------

    def _assemble(self, idxs: list[int]) -> dict:
        cfg = self.config.model
        b = len(idxs)
        frames = np.empty((b, cfg.k, 3, cfg.image_size, cfg.image_size), np.float32)
        view1 = np.empty((b, 3, cfg.image_size, cfg.image_size), np.float32)
        view2 = np.empty_like(view1)
        gaze = np.empty((b, cfg.k, 2), np.float32)
        valid = np.empty((b, cfg.k), bool)
        labels = np.empty((b, cfg.k, len(PARTS)), np.uint8)
        mask = np.empty((b, cfg.k, len(PARTS)), bool)
        for j, i in enumerate(idxs):
            v1, v2, aug = augment(self.dataset[i], self.rng, self.config.augment)
            frames[j] = aug.frames
            view1[j] = v1
            view2[j] = v2
            gaze[j] = aug.gaze
            valid[j] = aug.gaze_valid
            labels[j] = aug.movement.labels
            mask[j] = aug.movement.mask
        keep = self.config.supervised_part_columns()
        if len(keep) != len(PARTS):
            off = [i for i in range(len(PARTS)) if i not in keep]
            mask[:, :, off] = False
        return {"frames": frames, "view1": view1, "view2": view2,
                "gaze": gaze, "valid": valid, "labels": labels, "mask": mask}

    def step(self) -> dict:
        """One optimization step; returns the raw loss components."""
        cfg = self.config
        epoch = self.sampler.epoch
        idxs = self.sampler.next_batch()
        batch = self._assemble(idxs)
        b = len(idxs)
        keys = None
        with T.Tape():
            l_attn = l_move = l_vis = None
            if cfg.attention_on or cfg.movement_on:
                pred_gaze, move_logits = self.model.predict_sequence(
                    T.Tensor(batch["frames"]),
                    gaze=batch["gaze"] if cfg.model.gaze_conditioned else None)
                if cfg.attention_on:
                    l_attn = gaze_loss(pred_gaze, batch["gaze"], batch["valid"],
                                       delta=self.weights.huber_delta)
                if cfg.movement_on:
                    target = MovementTarget(batch["labels"], batch["mask"])
                    if target.mask.any():
                        l_move = movement_loss(move_logits, target)
                    else:
                        # keep the movement head in the graph so its params
                        # still receive (zero) grads on fully-masked batches
                        l_move = (move_logits * 0.0).sum()
            if cfg.visual == "infonce":
                keys = self.dual.key_encode(batch["view2"])
                if self.weights.visual > 0:
                    _, z = self.model.encode_frame(T.Tensor(batch["view1"]))
                    l_vis = infonce_loss(z, keys, self.bank.as_array(), cfg.model.tau)
            elif self.weights.visual > 0:
                feats, _ = self.model.encode_frame(T.Tensor(batch["view1"]))
                recon = self.decoder.forward(feats)
                l_vis = ae_loss(recon, batch["view1"])
            total = total_loss(l_attn, l_move, l_vis, self.weights)
            comps = {
                "total": float(total.item()),
                "attention": float(l_attn.item()) if l_attn is not None else 0.0,
                "movement": float(l_move.item()) if l_move is not None else 0.0,
                "visual": float(l_vis.item()) if l_vis is not None else 0.0,
            }
            if not all(np.isfinite(v) for v in comps.values()):
                raise NumericFailure(
                    f"non-finite loss at epoch {epoch} step {self.step_count} "
                    f"(sequences {idxs}): {comps}")
            total.backward()
        if cfg.clip_norm > 0:
            nn.clip_gradients(self._trainable, cfg.clip_norm)
        self.optimizer.step(self._trainable)
        nn.zero_grads(self._all_params())
        if self.dual is not None:
            self.dual.momentum_update()
            self.bank.push(keys)
        self.step_count += 1
        self._accum["samples"] += b
        for key in ("total", "attention", "movement", "visual"):
            self._accum[key] += comps[key] * b
        if self.sampler.cursor == 0:  # the batch closed an epoch
            n = self._accum.pop("samples")
            self.history.append({"epoch": epoch,
                                 **{k: v / n for k, v in self._accum.items()}})
            self._accum = {"samples": 0, "total": 0.0, "attention": 0.0,
                           "movement": 0.0, "visual": 0.0}
        return comps

    def train(self, epochs: int | None = None) -> list[dict]:
        """Advance ``epochs`` full epochs (default: the configured count)."""
        target = self.sampler.epoch + (self.config.epochs if epochs is None else epochs)
        while self.sampler.epoch < target:
            self.step()
        return self.history

    # -- reporting ------------------------------------------------------------

    def write_report(self, path) -> None:
        """CSV of per-epoch mean loss components, prefixed by the resolved
        configuration as comment lines."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            for key, value in sorted(self.config.to_dict().items()):
                fh.write(f"# {key}={json.dumps(value, sort_keys=True)}\n")
            fh.write(f"# optimizer_resolved={self.config.resolved_optimizer()}\n")
            fh.write(f"# lr_resolved={self.config.resolved_lr()}\n")
            writer = csv.writer(fh)
            writer.writerow(["epoch", "L_total", "L_attn", "L_move", "L_vis"])
            for row in self.history:
                writer.writerow([row["epoch"],
                                 f"{row['total']:.6f}", f"{row['attention']:.6f}",
                                 f"{row['movement']:.6f}", f"{row['visual']:.6f}"])

    # -- checkpointing ----------------------------------------------------------

    def save_checkpoint(self, path) -> None:
        arrays = {name: p.data for name, p in self._all_params()}
        if self.dual is not None:
            arrays.update({name: p.data for name, p in self.dual.named_key_params()})
            buffer, bank_meta = self.bank.state()
            arrays["bank.buffer"] = buffer
        opt_state = self.optimizer.state_dict()
        arrays.update({f"opt.{k}": v for k, v in opt_state["arrays"].items()})
        meta = {
            "kind": "trainer",
            "config": self.config.to_dict(),
            "progress": {"step": self.step_count},
            "sampler": self.sampler.state_dict(),
            "rng": self.rng.bit_generator.state,
            "optimizer": {"kind": opt_state["kind"], "scalars": opt_state["scalars"]},
            "bank": bank_meta if self.dual is not None else None,
            "history": self.history,
            "accum": self._accum,
        }
        nn.save_checkpoint(path, arrays, meta)

    @classmethod
    def resume(cls, path, dataset: InteractionDataset,
               config: TrainConfig | None = None) -> "Trainer":
        """Rebuild a trainer from a checkpoint; continuing reproduces an
        uninterrupted run bit for bit.  A ``config`` argument, when given,
        must match the checkpointed one."""
        arrays, meta = nn.load_checkpoint(path)
        if meta.get("kind") != "trainer":
            raise ValueError(f"{path}: not a trainer checkpoint")
        stored = TrainConfig.from_dict(meta["config"])
        if config is not None and config.to_dict() != stored.to_dict():
            diffs = [k for k, v in config.to_dict().items()
                     if stored.to_dict().get(k) != v]
            raise ValueError(f"configuration mismatch with the checkpoint: {diffs}")
        trainer = cls(dataset, stored)
        for name, p in trainer._all_params():
            arr = arrays.get(name)
            if arr is None or arr.shape != p.data.shape:
                raise ValueError(f"checkpoint is missing or misshapes parameter '{name}'")
            p.data = arr.astype(p.data.dtype)
        if trainer.dual is not None:
            for name, p in trainer.dual.named_key_params():
                p.data = arrays[name].astype(p.data.dtype)
            trainer.bank.load_state(arrays["bank.buffer"], meta["bank"])
        opt_meta = meta["optimizer"]
        trainer.optimizer.load_state_dict({
            "kind": opt_meta["kind"],
            "scalars": opt_meta["scalars"],
            "arrays": {k[len("opt."):]: v for k, v in arrays.items()
                       if k.startswith("opt.")},
        })
        trainer.sampler.load_state_dict(meta["sampler"])
        trainer.rng.bit_generator.state = meta["rng"]
        trainer.step_count = int(meta["progress"]["step"])
        trainer.history = list(meta["history"])
        trainer._accum = dict(meta["accum"])
        return trainer


# ---------------------------------------------------------------------------
# gaze-to-movement probe


def movement_from_gaze_experiment(dataset: InteractionDataset, *, epochs: int = 3,
                                  batch_size: int = 8, seed: int = 0,
                                  model: ModelConfig | None = None,
                                  eval_fraction: float = 0.25) -> dict:
    """How well does knowing where someone looks predict what their body does?

    Trains a gaze-conditioned model on the movement objective alone, then
    reports held-out per-part accuracy (masked frames are skipped) and their
    average.
    """
    if model is None:
        model = ModelConfig(image_size=dataset.image_size, k=dataset.k,
                            gaze_conditioned=True)
    elif not model.gaze_conditioned:
        raise ValueError("the gaze-to-movement probe needs a gaze conditioned model")
    train_idx, eval_idx = split_indices(len(dataset), eval_fraction, seed)
    train_ds = InteractionDataset([dataset[i] for i in train_idx], dataset.world)
    config = TrainConfig(
        mode="vis-move",
        visual="infonce",
        epochs=epochs,
        batch_size=min(batch_size, len(train_ds)),
        seed=seed,
        weights=LossWeights(attention=0.0, movement=1.0, visual=0.0),
        model=model,
        augment=AugmentConfig(flip_prob=0.0, brightness=(1, 1), contrast=(1, 1),
                              saturation=(1, 1), hue=0.0),
    )
    trainer = Trainer(train_ds, config)
    trainer.train()
    correct = np.zeros(len(PARTS))
    counted = np.zeros(len(PARTS))
    for i in eval_idx:
        seq = dataset[i]
        with T.no_grad():
            _, logits = trainer.model.predict_sequence(
                T.Tensor(seq.frames[None]), gaze=seq.gaze[None].astype(np.float32))
        pred = logits.data[0] > 0
        hit = (pred == (seq.movement.labels > 0)) & seq.movement.mask
        correct += hit.sum(axis=0)
        counted += seq.movement.mask.sum(axis=0)
    with np.errstate(invalid="ignore"):
        per_part = correct / counted
    scored = np.isfinite(per_part)
    return {
        "per_part": {part: (float(per_part[i]) if scored[i] else None)
                     for i, part in enumerate(PARTS)},
        "average": float(per_part[scored].mean()) if scored.any() else None,
        "n_eval": int(len(eval_idx)),
        "final_train_loss": trainer.history[-1]["movement"] if trainer.history else None,
    }
