"""Synthetic interaction sequences, the on-disk dataset container, batch
sampling, and training-time augmentation.

The generated world is deliberately simple but keeps the label structure of
real first-person recordings: short frame sequences with a gaze point on the
visually salient object, per-frame binary movement labels for six body parts
with a gray-area mask, and per-sequence metadata from which the transfer
task labels (scene kind, action, dynamics, ground region, depth) are pure
functions.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import tensor as T
from .objectives import PARTS, MovementTarget

# mirror permutation of PARTS: arms and legs swap sides, torso and neck stay
FLIP_PERM = (0, 1, 3, 2, 5, 4)

SHAPE_KINDS = ("disc", "square", "triangle")
ACTIONS = ("idle", "walk", "scan", "reach")
DYNAMICS = ("still", "right", "left", "down", "up")

_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


class DatasetError(ValueError):
    """The on-disk container is missing, malformed, or inconsistent."""


@dataclass(frozen=True)
class WorldConfig:
    n_sequences: int = 100
    image_size: int = 56
    k: int = 5
    frame_interval: float = 1.0 / 6.0
    min_objects: int = 3
    max_objects: int = 6
    noise: float = 0.0
    gaze_missing_rate: float = 0.05
    gray_rate: float = 0.1

    def validate(self) -> None:
        if self.n_sequences < 1 or self.k < 1 or self.image_size < 8:
            raise ValueError("world config: sizes must be positive (image size >= 8)")
        if not 0 < self.min_objects <= self.max_objects:
            raise ValueError("world config: bad object count range")
        if self.noise < 0 or not 0 <= self.gaze_missing_rate < 1 or not 0 <= self.gray_rate < 1:
            raise ValueError("world config: rates out of range")


@dataclass
class InteractionSequence:
    """One training example: k frames with gaze and movement targets."""

    frames: np.ndarray          # (k, 3, S, S) float32 in [0, 1]
    gaze: np.ndarray            # (k, 2) float64, normalized [0, 1] coordinates
    gaze_valid: np.ndarray      # (k,) bool
    movement: MovementTarget    # labels/mask (k, len(PARTS))
    timestamps: np.ndarray      # (k,) float64 seconds
    meta: dict

    def validate(self) -> None:
        k = self.frames.shape[0]
        if self.frames.ndim != 4 or self.frames.shape[1] != 3:
            raise ValueError(f"frames must be (k, 3, S, S), got {self.frames.shape}")
        if self.frames.shape[2] != self.frames.shape[3]:
            raise ValueError("frames must be square")
        if self.gaze.shape != (k, 2) or self.gaze_valid.shape != (k,):
            raise ValueError("gaze arrays do not match frame count")
        if self.movement.labels.shape != (k, len(PARTS)):
            raise ValueError("movement target does not match frame count")
        if self.timestamps.shape != (k,):
            raise ValueError("timestamps do not match frame count")
        if np.any(self.frames < 0) or np.any(self.frames > 1):
            raise ValueError("frame values must lie in [0, 1]")
        if np.any(self.gaze < 0) or np.any(self.gaze > 1):
            raise ValueError("gaze must lie in [0, 1]")
        dt = np.diff(self.timestamps)
        if k > 1 and (np.any(dt <= 0) or np.ptp(dt) > 1e-9):
            raise ValueError("timestamps must be strictly increasing and evenly spaced")

    @property
    def k(self) -> int:
        return self.frames.shape[0]

    @property
    def image_size(self) -> int:
        return self.frames.shape[2]


# ---------------------------------------------------------------------------
# rasterization


def _pixel_grid(size: int):
    coords = np.arange(size, dtype=np.float64) + 0.5
    return np.meshgrid(coords, coords)  # xx, yy with [y, x] layout


def object_mask(kind: int, center, radius: float, size: int) -> np.ndarray:
    """Boolean footprint of one object on the pixel grid."""
    xx, yy = _pixel_grid(size)
    cx, cy = float(center[0]), float(center[1])
    dx = xx - cx
    dy = yy - cy
    if SHAPE_KINDS[kind] == "disc":
        return dx * dx + dy * dy <= radius * radius
    if SHAPE_KINDS[kind] == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= radius
    # upward-pointing triangle: apex at (cx, cy - r), base at cy + 0.7 r
    top = cy - radius
    bottom = cy + 0.7 * radius
    inside_rows = (yy >= top) & (yy <= bottom)
    frac = np.clip((yy - top) / (bottom - top + 1e-12), 0, 1)
    return inside_rows & (np.abs(dx) <= frac * 0.9 * radius)


def _render_frame(size, bg, floor_y, floor_color, objects, positions, radii, focus_idx):
    img = np.empty((3, size, size), dtype=np.float64)
    img[:] = np.asarray(bg).reshape(3, 1, 1)
    img[:, floor_y:, :] = np.asarray(floor_color).reshape(3, 1, 1)
    order = [i for i in range(len(objects)) if i != focus_idx] + [focus_idx]
    for i in order:
        obj = objects[i]
        mask = object_mask(obj["kind"], positions[i], radii[i], size)
        color = np.asarray(obj["color"]).reshape(3, 1)
        img[:, mask] = color
        if i == focus_idx:
            # white highlight peaking at exactly the snapped center pixel,
            # which makes that pixel the unique brightness argmax
            xx, yy = _pixel_grid(size)
            cx, cy = positions[i]
            dist = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
            w = np.clip(1.0 - dist / max(radii[i], 1e-9), 0.0, 1.0) ** 2
            w = np.where(mask, w, 0.0)
            img = img * (1.0 - w) + 1.0 * w
    return img


def _snap_to_pixel_center(x: float, size: int) -> float:
    i = int(np.clip(np.floor(x), 0, size - 1))
    return i + 0.5


# ---------------------------------------------------------------------------
# world generation


def _movement_script(action: int, k: int) -> np.ndarray:
    labels = np.zeros((k, len(PARTS)), dtype=np.uint8)
    name = ACTIONS[action]
    if name == "walk":
        labels[:, PARTS.index("torso")] = 1
        for t in range(k):
            leg = "right_leg" if t % 2 == 0 else "left_leg"
            labels[t, PARTS.index(leg)] = 1
    elif name == "scan":
        labels[:, PARTS.index("neck")] = 1
    elif name == "reach":
        labels[:, PARTS.index("right_arm")] = 1
    return labels


def _dynamics_class(velocity, size: int) -> int:
    vx, vy = velocity
    speed = float(np.hypot(vx, vy))
    if speed < 0.015 * size:
        return 0
    if abs(vx) >= abs(vy):
        return 1 if vx > 0 else 2
    return 3 if vy > 0 else 4


def generate_synthetic_world(cfg: WorldConfig, seed: int) -> "InteractionDataset":
    """Deterministic synthetic dataset; the same seed gives identical bytes."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    size = cfg.image_size
    sequences = []
    lo_gaze = 0.5 / size
    hi_gaze = 1.0 - 0.5 / size
    for _ in range(cfg.n_sequences):
        scene = int(rng.integers(len(SHAPE_KINDS)))
        action = int(rng.integers(len(ACTIONS)))
        n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
        n_major = max(2, int(np.ceil(0.7 * n_obj)))
        n_major = min(n_major, n_obj)
        kinds = [scene] * n_major
        others = [k for k in range(len(SHAPE_KINDS)) if k != scene]
        kinds += [int(rng.choice(others)) for _ in range(n_obj - n_major)]
        rng.shuffle(kinds)
        focus_idx = int(rng.choice([i for i, k in enumerate(kinds) if k == scene]))

        bg_base = rng.uniform(0.12, 0.30)
        bg = np.clip(bg_base + rng.uniform(-0.03, 0.03, 3), 0.05, 0.35)
        floor_color = bg * 0.6
        floor_y = int(rng.uniform(0.60, 0.85) * size)

        name = ACTIONS[action]
        if name == "walk":
            ang = rng.uniform(0, 2 * np.pi)
            cam_v = rng.uniform(0.04, 0.08) * size * np.array([np.cos(ang), np.sin(ang)])
        elif name == "scan":
            cam_v = np.array([rng.choice([-1.0, 1.0]) * rng.uniform(0.04, 0.08) * size, 0.0])
        else:
            cam_v = np.zeros(2)

        objects = []
        for i in range(n_obj):
            radius = rng.uniform(0.08, 0.16) * size
            self_ang = rng.uniform(0, 2 * np.pi)
            self_speed = rng.uniform(0.0, 0.02) * size
            vel = cam_v + self_speed * np.array([np.cos(self_ang), np.sin(self_ang)])
            if i == focus_idx:
                # keep the focus object fully visible through the sequence
                travel = np.abs(vel) * (cfg.k - 1)
                lo = radius + 1.0 + np.maximum(-vel * (cfg.k - 1), 0)
                hi = size - radius - 1.0 - np.maximum(vel * (cfg.k - 1), 0)
                lo = np.minimum(lo, hi - 1.0)
                center = np.array([rng.uniform(lo[0], hi[0]), rng.uniform(lo[1], hi[1])])
            else:
                center = rng.uniform(0.1 * size, 0.9 * size, 2)
            color = rng.uniform(0.2, 0.85, 3)
            objects.append({
                "kind": int(kinds[i]),
                "color": [float(c) for c in color],
                "center": [float(center[0]), float(center[1])],
                "velocity": [float(vel[0]), float(vel[1])],
                "radius": float(radius),
                "pulse": bool(name == "reach" and i == focus_idx),
            })

        dyn = _dynamics_class(objects[focus_idx]["velocity"], size)
        labels = _movement_script(action, cfg.k)
        mask = rng.uniform(size=(cfg.k, len(PARTS))) >= cfg.gray_rate

        frames = np.zeros((cfg.k, 3, size, size), dtype=np.float32)
        gaze = np.zeros((cfg.k, 2), dtype=np.float64)
        for t in range(cfg.k):
            positions, radii = [], []
            for obj in objects:
                c = np.asarray(obj["center"]) + np.asarray(obj["velocity"]) * t
                r = obj["radius"]
                if obj["pulse"]:
                    r = r * (1.0 + 0.3 * np.sin(2 * np.pi * t / max(cfg.k, 2)))
                positions.append(c)
                radii.append(r)
            fc = positions[focus_idx]
            snapped = (_snap_to_pixel_center(fc[0], size), _snap_to_pixel_center(fc[1], size))
            positions[focus_idx] = np.asarray(snapped)
            img = _render_frame(size, bg, floor_y, floor_color, objects, positions, radii, focus_idx)
            if cfg.noise > 0:
                img = img + rng.normal(0, cfg.noise, img.shape)
            frames[t] = np.clip(img, 0.0, 1.0).astype(np.float32)
            gx = snapped[0] / size
            gy = snapped[1] / size
            if cfg.noise > 0:
                gx += rng.normal(0, cfg.noise * 0.1)
                gy += rng.normal(0, cfg.noise * 0.1)
            # round through storage precision so container round-trips are exact
            gaze[t, 0] = np.float32(np.clip(gx, lo_gaze, hi_gaze))
            gaze[t, 1] = np.float32(np.clip(gy, lo_gaze, hi_gaze))

        gaze_valid = rng.uniform(size=cfg.k) >= cfg.gaze_missing_rate
        meta = {
            "scene_class": scene,
            "action_class": action,
            "dyn_class": dyn,
            "floor_y": floor_y,
            "background": [float(c) for c in bg],
            "objects": objects,
            "focus_index": focus_idx,
            "flipped": False,
        }
        seq = InteractionSequence(
            frames=frames,
            gaze=gaze,
            gaze_valid=gaze_valid,
            movement=MovementTarget(labels, mask),
            timestamps=np.arange(cfg.k, dtype=np.float64) * cfg.frame_interval,
            meta=meta,
        )
        seq.validate()
        sequences.append(seq)
    return InteractionDataset(sequences, cfg)


# ---------------------------------------------------------------------------
# transfer-task label functions (pure functions of the metadata)


def ground_mask(seq: InteractionSequence) -> np.ndarray:
    """Walkable-floor pixels of the first frame: the floor band minus object
    footprints."""
    size = seq.image_size
    meta = seq.meta
    mask = np.zeros((size, size), dtype=bool)
    mask[meta["floor_y"] :, :] = True
    for obj in meta["objects"]:
        mask &= ~object_mask(obj["kind"], obj["center"], obj["radius"], size)
    if meta.get("flipped"):
        mask = mask[:, ::-1].copy()
    return mask


def depth_map(seq: InteractionSequence) -> np.ndarray:
    """Pseudo-depth of the first frame: distance to the nearest object center,
    normalized by the image size, offset to stay strictly positive."""
    size = seq.image_size
    xx, yy = _pixel_grid(size)
    best = np.full((size, size), np.inf)
    for obj in seq.meta["objects"]:
        cx, cy = obj["center"]
        d = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
        best = np.minimum(best, d)
    depth = (0.3 + best / size).astype(np.float32)
    if seq.meta.get("flipped"):
        depth = depth[:, ::-1].copy()
    return depth


# ---------------------------------------------------------------------------
# on-disk container


class InteractionDataset:
    """In-memory dataset plus its directory serialization.

    Layout: ``manifest.json`` (config echo and per-record byte offsets),
    ``frames.itns`` (one serialized tensor per sequence), ``gaze.bin``
    (float32 x, y, valid triples), ``movement.bin`` (uint8 label, mask pairs).
    """

    def __init__(self, sequences: list[InteractionSequence], world: WorldConfig | None = None):
        if not sequences:
            raise ValueError("dataset must hold at least one sequence")
        self.sequences = sequences
        self.world = world
        first = sequences[0]
        self.image_size = first.image_size
        self.k = first.k
        self.frame_interval = float(first.timestamps[1] - first.timestamps[0]) if first.k > 1 else 0.0

    def __len__(self) -> int:
        return len(self.sequences)

    def __getitem__(self, i: int) -> InteractionSequence:
        return self.sequences[i]

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        records = []
        frames_blob = bytearray()
        gaze_blob = bytearray()
        move_blob = bytearray()
        for seq in self.sequences:
            rec = {
                "frames_offset": len(frames_blob),
                "gaze_offset": len(gaze_blob),
                "movement_offset": len(move_blob),
                "meta": seq.meta,
            }
            frames_blob += T.tensor_to_bytes(seq.frames)
            triples = np.empty((seq.k, 3), dtype="<f4")
            triples[:, :2] = seq.gaze
            triples[:, 2] = seq.gaze_valid
            gaze_blob += triples.tobytes()
            pairs = np.empty((seq.k, len(PARTS), 2), dtype=np.uint8)
            pairs[..., 0] = seq.movement.labels
            pairs[..., 1] = seq.movement.mask
            move_blob += pairs.tobytes()
            records.append(rec)
        manifest = {
            "format": "egorep-dataset",
            "version": 1,
            "image_size": self.image_size,
            "k": self.k,
            "frame_interval": self.frame_interval,
            "n_sequences": len(self.sequences),
            "world": asdict(self.world) if self.world else None,
            "records": records,
        }
        (directory / "manifest.json").write_text(
            json.dumps(manifest, sort_keys=True, separators=(",", ":"))
        )
        (directory / "frames.itns").write_bytes(bytes(frames_blob))
        (directory / "gaze.bin").write_bytes(bytes(gaze_blob))
        (directory / "movement.bin").write_bytes(bytes(move_blob))

    @classmethod
    def load(cls, directory) -> "InteractionDataset":
        directory = Path(directory)
        mpath = directory / "manifest.json"
        if not mpath.exists():
            raise DatasetError(f"{directory}: no manifest.json (not a dataset directory)")
        try:
            manifest = json.loads(mpath.read_text())
        except json.JSONDecodeError as e:
            raise DatasetError(f"{mpath}: malformed manifest: {e}") from e
        if manifest.get("format") != "egorep-dataset":
            raise DatasetError(f"{mpath}: not an egorep dataset manifest")
        frames_blob = (directory / "frames.itns").read_bytes()
        gaze_blob = (directory / "gaze.bin").read_bytes()
        move_blob = (directory / "movement.bin").read_bytes()
        k = int(manifest["k"])
        size = int(manifest["image_size"])
        n = int(manifest["n_sequences"])
        records = manifest["records"]
        if len(records) != n:
            raise DatasetError(f"{mpath}: record count {len(records)} != n_sequences {n}")
        interval = float(manifest["frame_interval"])
        gaze_stride = k * 3 * 4
        move_stride = k * len(PARTS) * 2
        sequences = []
        for idx, rec in enumerate(records):
            fo, go, mo = rec["frames_offset"], rec["gaze_offset"], rec["movement_offset"]
            if fo >= len(frames_blob) or go + gaze_stride > len(gaze_blob) or mo + move_stride > len(move_blob):
                raise DatasetError(f"{directory}: record {idx} offsets out of bounds")
            try:
                frames, _ = T.tensor_from_bytes(frames_blob, fo)
            except ValueError as e:
                raise DatasetError(f"{directory}: record {idx}: {e}") from e
            if frames.shape != (k, 3, size, size):
                raise DatasetError(f"{directory}: record {idx} frame shape {frames.shape}")
            triples = np.frombuffer(gaze_blob, dtype="<f4", count=k * 3, offset=go).reshape(k, 3)
            pairs = np.frombuffer(move_blob, dtype=np.uint8, count=k * len(PARTS) * 2,
                                  offset=mo).reshape(k, len(PARTS), 2)
            seq = InteractionSequence(
                frames=frames,
                gaze=triples[:, :2].astype(np.float64),
                gaze_valid=triples[:, 2] != 0,
                movement=MovementTarget(pairs[..., 0].copy(), pairs[..., 1] != 0),
                timestamps=np.arange(k, dtype=np.float64) * interval,
                meta=rec["meta"],
            )
            seq.validate()
            sequences.append(seq)
        world = WorldConfig(**manifest["world"]) if manifest.get("world") else None
        return cls(sequences, world)


# ---------------------------------------------------------------------------
# sampling


class SequenceSampler:
    """Without-replacement batch sampler with a serializable position.

    The permutation of epoch e is a pure function of (seed, e), so training
    can resume mid-epoch from just (epoch, cursor).
    """

    def __init__(self, n: int, batch_size: int, seed: int):
        if batch_size < 1 or batch_size > n:
            raise ValueError(f"batch size {batch_size} not in [1, {n}]")
        self.n = n
        self.batch_size = batch_size
        self.seed = seed
        self.epoch = 0
        self.cursor = 0

    def _perm(self, epoch: int) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence((self.seed, epoch)))
        return rng.permutation(self.n)

    def batches_per_epoch(self) -> int:
        return int(np.ceil(self.n / self.batch_size))

    def next_batch(self) -> list[int]:
        perm = self._perm(self.epoch)
        batch = perm[self.cursor : self.cursor + self.batch_size].tolist()
        self.cursor += self.batch_size
        if self.cursor >= self.n:
            self.epoch += 1
            self.cursor = 0
        return batch

    def state_dict(self) -> dict:
        return {"epoch": self.epoch, "cursor": self.cursor,
                "seed": self.seed, "batch_size": self.batch_size, "n": self.n}

    def load_state_dict(self, state: dict) -> None:
        if state["n"] != self.n or state["batch_size"] != self.batch_size:
            raise ValueError("sampler state does not match dataset or batch size")
        self.seed = int(state["seed"])
        self.epoch = int(state["epoch"])
        self.cursor = int(state["cursor"])


def sample_batch(dataset: InteractionDataset, batch_size: int, seed: int) -> list[InteractionSequence]:
    """First batch of a seeded epoch; deterministic in (dataset, batch_size, seed)."""
    sampler = SequenceSampler(len(dataset), batch_size, seed)
    return [dataset[i] for i in sampler.next_batch()]


def split_indices(n: int, eval_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic (train, eval) index split; both halves are non-empty."""
    if n < 2:
        raise ValueError("need at least two items to split")
    if not 0 < eval_fraction < 1:
        raise ValueError("eval fraction must lie strictly between 0 and 1")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 3517)))
    perm = rng.permutation(n)
    n_eval = int(np.clip(round(n * eval_fraction), 1, n - 1))
    return np.sort(perm[n_eval:]), np.sort(perm[:n_eval])


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    brightness: tuple[float, float] = (0.6, 1.4)
    contrast: tuple[float, float] = (0.6, 1.4)
    saturation: tuple[float, float] = (0.6, 1.4)
    hue: float = 0.1


def flip_sequence(seq: InteractionSequence) -> InteractionSequence:
    """Mirror the whole sequence: frames left-right, gaze x -> 1 - x, and the
    left/right movement columns swapped (masks included).  An exact involution."""
    gaze = seq.gaze.copy()
    gaze[:, 0] = 1.0 - gaze[:, 0]
    meta = dict(seq.meta)
    meta["flipped"] = not seq.meta.get("flipped", False)
    return InteractionSequence(
        frames=seq.frames[:, :, :, ::-1].copy(),
        gaze=gaze,
        gaze_valid=seq.gaze_valid.copy(),
        movement=MovementTarget(seq.movement.labels[:, FLIP_PERM].copy(),
                                seq.movement.mask[:, FLIP_PERM].copy()),
        timestamps=seq.timestamps.copy(),
        meta=meta,
    )


def _rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    r, g, b = img[0], img[1], img[2]
    mx = img.max(axis=0)
    mn = img.min(axis=0)
    diff = mx - mn
    safe = np.where(diff > 0, diff, 1.0)
    h = np.select(
        [mx == r, mx == g],
        [((g - b) / safe) % 6.0, (b - r) / safe + 2.0],
        default=(r - g) / safe + 4.0,
    )
    h = np.where(diff > 0, h / 6.0, 0.0)
    s = np.where(mx > 0, diff / np.where(mx > 0, mx, 1.0), 0.0)
    return np.stack([h, s, mx])


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[0] * 6.0, hsv[1], hsv[2]
    i = np.floor(h).astype(int) % 6
    f = h - np.floor(h)
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b])


def color_jitter(frames: np.ndarray, rng: np.random.Generator,
                 cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Random brightness/contrast/saturation/hue, one parameter draw applied
    to every frame passed in.  Output stays in [0, 1].

    ``frames`` is (..., 3, H, W).  With all ranges pinned to (1, 1) and hue 0
    the input is returned unchanged.
    """
    b = rng.uniform(*cfg.brightness)
    c = rng.uniform(*cfg.contrast)
    s = rng.uniform(*cfg.saturation)
    h = rng.uniform(-cfg.hue, cfg.hue)
    x = frames.astype(np.float64)
    x = x * b
    luma = np.einsum("...chw,c->...hw", x, _LUMA)[..., None, :, :]
    mean = luma.mean(axis=(-2, -1), keepdims=True)
    x = (x - mean) * c + mean
    x = luma + (x - luma) * s
    x = np.clip(x, 0.0, 1.0)
    if cfg.hue > 0:
        flat = x.reshape(-1, 3, *x.shape[-2:])
        out = np.empty_like(flat)
        for i in range(flat.shape[0]):
            hsv = _rgb_to_hsv(flat[i])
            hsv[0] = (hsv[0] + h) % 1.0
            out[i] = _hsv_to_rgb(hsv)
        x = out.reshape(x.shape)
    return np.clip(x, 0.0, 1.0).astype(np.float32)


def augment(seq: InteractionSequence, rng: np.random.Generator,
            cfg: AugmentConfig = AugmentConfig()):
    """Training-time transform of one sequence.

    Possibly mirrors the whole sequence (one coin flip: frames, gaze, and
    movement targets stay consistent), then jitters the sequence frames with
    one parameter draw, and produces two independently jittered views of the
    first frame for the contrastive objective.

    Returns (view1, view2, augmented sequence); the views share the flip with
    the sequence.
    """
    flipped = rng.uniform() < cfg.flip_prob
    base = flip_sequence(seq) if flipped else seq
    frames_aug = color_jitter(base.frames, rng, cfg)
    view1 = color_jitter(base.frames[0], rng, cfg)
    view2 = color_jitter(base.frames[0], rng, cfg)
    out = InteractionSequence(
        frames=frames_aug,
        gaze=base.gaze.copy(),
        gaze_valid=base.gaze_valid.copy(),
        movement=MovementTarget(base.movement.labels.copy(), base.movement.mask.copy()),
        timestamps=base.timestamps.copy(),
        meta=dict(base.meta),
    )
    return view1, view2, out
