"""The interaction model: a residual CNN feeding a sequence-to-sequence LSTM
with gaze and body-movement heads, plus the dual-encoder machinery for
contrastive training (momentum key encoder, FIFO memory bank) and a small
decoder for the reconstruction baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import nn
from . import tensor as T
from .objectives import PARTS
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions of the interaction model.

    Defaults are the desk-scale configuration: 56x56 inputs, a 4-stage
    residual backbone ending in (128, 7, 7), a 1x1 reduction to 16 channels
    before the LSTMs, and a 32-d contrastive embedding.  ``full_size`` gives
    the original-scale sizes for reference; nothing in the code depends on
    which scale is used.
    """

    image_size: int = 56
    k: int = 5
    backbone_channels: tuple[int, ...] = (16, 32, 64, 128)
    backbone_strides: tuple[int, ...] = (1, 2, 2, 2)
    blocks_per_stage: int = 1
    stem_stride: int = 1
    stem_pool: bool = False
    reducer_channels: int = 16
    lstm_hidden: int = 128
    lstm_layers: int = 3
    contrastive_dim: int = 32
    bank_size: int = 512
    tau: float = 0.07
    momentum: float = 0.999
    gaze_conditioned: bool = False
    gaze_embed_dim: int = 32
    leaky_slope: float = 0.1

    @classmethod
    def full_size(cls) -> "ModelConfig":
        return cls(
            image_size=224,
            backbone_channels=(64, 128, 256, 512),
            backbone_strides=(1, 2, 2, 2),
            blocks_per_stage=2,
            stem_stride=2,
            stem_pool=True,
            reducer_channels=64,
            lstm_hidden=512,
            contrastive_dim=128,
            bank_size=16384,
            gaze_embed_dim=512,
        )

    def backbone_config(self) -> nn.BackboneConfig:
        return nn.BackboneConfig(
            image_size=self.image_size,
            channels=self.backbone_channels,
            strides=self.backbone_strides,
            blocks_per_stage=self.blocks_per_stage,
            stem_stride=self.stem_stride,
            stem_pool=self.stem_pool,
            leaky_slope=self.leaky_slope,
        )

    @property
    def grid(self) -> int:
        return self.backbone_config().out_grid()

    @property
    def feature_channels(self) -> int:
        return self.backbone_channels[-1]

    @property
    def lstm_input_size(self) -> int:
        size = self.reducer_channels * self.grid * self.grid
        if self.gaze_conditioned:
            size += self.gaze_embed_dim
        return size

    def validate(self) -> None:
        self.backbone_config().validate()
        if self.k < 1:
            raise ValueError("sequence length k must be at least 1")
        if min(self.reducer_channels, self.lstm_hidden, self.lstm_layers,
               self.contrastive_dim, self.bank_size) < 1:
            raise ValueError("model dimensions must be positive")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone_channels"] = list(self.backbone_channels)
        d["backbone_strides"] = list(self.backbone_strides)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["backbone_channels"] = tuple(d["backbone_channels"])
        d["backbone_strides"] = tuple(d["backbone_strides"])
        return cls(**d)


class InteractionModel:
    """Query-side network: per-frame CNN features are reduced, flattened, and
    run through an encoder LSTM; a decoder LSTM started from the encoder's
    final state emits one gaze point and one movement logit vector per frame.

    The contrastive embedding comes straight off the backbone (average-pooled
    final feature map through a projection, then unit-normalized), so it is
    shared with the sequence path only up to the backbone.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.backbone = nn.ResidualBackbone(cfg.backbone_config(), rng, dtype)
        self.reducer = nn.Conv2d(rng, cfg.feature_channels, cfg.reducer_channels, 1, dtype=dtype)
        self.encoder_lstm = nn.LstmStack(rng, cfg.lstm_input_size, cfg.lstm_hidden,
                                         cfg.lstm_layers, dtype)
        self.decoder_lstm = nn.LstmStack(rng, cfg.lstm_hidden, cfg.lstm_hidden,
                                         cfg.lstm_layers, dtype)
        # learned constant fed to the decoder at every step
        self.decoder_token = nn.fanin_uniform(rng, (cfg.lstm_hidden,), cfg.lstm_hidden, dtype)
        self.gaze_head = nn.Linear(rng, cfg.lstm_hidden, 2, dtype=dtype)
        self.movement_head = nn.Linear(rng, cfg.lstm_hidden, len(PARTS), dtype=dtype)
        self.projection = nn.Linear(rng, cfg.feature_channels, cfg.contrastive_dim, dtype=dtype)
        if cfg.gaze_conditioned:
            self.gaze_embed1 = nn.Linear(rng, 2, cfg.gaze_embed_dim, dtype=dtype)
            self.gaze_embed2 = nn.Linear(rng, cfg.gaze_embed_dim, cfg.gaze_embed_dim, dtype=dtype)
        else:
            self.gaze_embed1 = None
            self.gaze_embed2 = None

    def named_params(self):
        yield from nn.prefixed("backbone", self.backbone)
        yield from nn.prefixed("reducer", self.reducer)
        yield from nn.prefixed("encoder_lstm", self.encoder_lstm)
        yield from nn.prefixed("decoder_lstm", self.decoder_lstm)
        yield "decoder_token", self.decoder_token
        yield from nn.prefixed("gaze_head", self.gaze_head)
        yield from nn.prefixed("movement_head", self.movement_head)
        yield from nn.prefixed("projection", self.projection)
        if self.gaze_embed1 is not None:
            yield from nn.prefixed("gaze_embed1", self.gaze_embed1)
            yield from nn.prefixed("gaze_embed2", self.gaze_embed2)

    def encode_frame(self, images: Tensor) -> tuple[Tensor, Tensor]:
        """Single-frame path: (N, C, S, S) -> (backbone features, unit embedding)."""
        feats = self.backbone.forward(images)
        pooled = feats.mean(axis=(2, 3))
        z = T.l2_normalize(self.projection.forward(pooled), axis=1)
        return feats, z

    def _frame_vectors(self, frames: Tensor) -> Tensor:
        """(B, k, C, S, S) -> (B, k, reduced) via backbone + 1x1 reduction."""
        cfg = self.cfg
        b = frames.shape[0]
        flat = frames.reshape(b * cfg.k, frames.shape[2], frames.shape[3], frames.shape[4])
        feats = self.backbone.forward(flat)
        red = T.leaky_relu(self.reducer.forward(feats), cfg.leaky_slope)
        return red.reshape(b, cfg.k, cfg.reducer_channels * cfg.grid * cfg.grid)

    def predict_sequence(self, frames: Tensor, gaze: np.ndarray | None = None):
        """Run the full sequence path.

        frames: (B, k, C, S, S) tensor.  When the model is gaze conditioned,
        ``gaze`` (B, k, 2) must be given and is embedded and concatenated to
        each frame's feature vector.  Returns (gaze_pred (B, k, 2),
        movement_logits (B, k, n_parts)).
        """
        cfg = self.cfg
        if frames.ndim != 5 or frames.shape[1] != cfg.k:
            raise T.ShapeError("predict_sequence", frames.shape,
                               (frames.shape[0] if frames.ndim else 0, cfg.k, 3,
                                cfg.image_size, cfg.image_size),
                               detail="expected (batch, k, channels, size, size)")
        if cfg.gaze_conditioned and gaze is None:
            raise ValueError("model is gaze conditioned: predict_sequence needs gaze input")
        if not cfg.gaze_conditioned and gaze is not None:
            raise ValueError("model is not gaze conditioned but gaze input was given")
        b = frames.shape[0]
        seq = self._frame_vectors(frames)
        steps = []
        for t in range(cfg.k):
            x_t = seq[:, t, :]
            if cfg.gaze_conditioned:
                g_t = T.constant(np.asarray(gaze)[:, t, :], dtype=frames.dtype)
                e = T.leaky_relu(self.gaze_embed1.forward(g_t), cfg.leaky_slope)
                e = T.leaky_relu(self.gaze_embed2.forward(e), cfg.leaky_slope)
                x_t = T.concat([x_t, e], axis=1)
            steps.append(x_t)
        _, enc_state = self.encoder_lstm.run(steps)
        token = T.tile_rows(self.decoder_token, b)
        gaze_steps, move_steps = [], []
        state = enc_state
        for _ in range(cfg.k):
            top, state = self.decoder_lstm.step(token, state)
            gaze_steps.append(self.gaze_head.forward(top).reshape(b, 1, 2))
            move_steps.append(self.movement_head.forward(top).reshape(b, 1, len(PARTS)))
        return T.concat(gaze_steps, axis=1), T.concat(move_steps, axis=1)


class MemoryBank:
    """Fixed-capacity FIFO ring of unit-norm vectors (the contrastive negatives)."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1 or dim < 1:
            raise ValueError("bank capacity and dim must be positive")
        self.capacity = capacity
        self.dim = dim
        self.buffer = np.zeros((capacity, dim), dtype=np.float32)
        self.count = 0
        self.head = 0  # next write slot

    def __len__(self) -> int:
        return self.count

    def push(self, vectors: np.ndarray) -> None:
        v = np.asarray(vectors, dtype=np.float32)
        if v.ndim != 2 or v.shape[1] != self.dim:
            raise T.ShapeError("bank_push", v.shape, (v.shape[0] if v.ndim else 0, self.dim))
        if not np.all(np.isfinite(v)):
            raise ValueError("bank_push: non-finite vector")
        norms = np.linalg.norm(v.astype(np.float64), axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-3):
            worst = float(np.abs(norms - 1.0).max())
            raise ValueError(f"bank_push: vectors must be unit norm (worst deviation {worst:.2e})")
        if v.shape[0] >= self.capacity:
            v = v[-self.capacity :]  # only the newest fit
        for row in v:
            self.buffer[self.head] = row
            self.head = (self.head + 1) % self.capacity
        self.count = min(self.count + v.shape[0], self.capacity)

    def as_array(self) -> np.ndarray:
        """Current contents, oldest first."""
        if self.count < self.capacity:
            return self.buffer[: self.count].copy()
        return np.roll(self.buffer, -self.head, axis=0).copy()

    def state(self) -> tuple[np.ndarray, dict]:
        return self.buffer.copy(), {"count": self.count, "head": self.head}

    def load_state(self, buffer: np.ndarray, meta: dict) -> None:
        if buffer.shape != self.buffer.shape:
            raise ValueError(f"bank buffer shape {buffer.shape} != {self.buffer.shape}")
        self.buffer = np.array(buffer, dtype=np.float32)
        self.count = int(meta["count"])
        self.head = int(meta["head"])


class DualEncoderState:
    """Query model plus its slow-moving key twin and the negative bank.

    The key branch mirrors only what the contrastive path uses (backbone and
    projection).  Its parameters never receive gradients; they track the
    query parameters through ``momentum_update``.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.model = InteractionModel(cfg, rng, dtype)
        # fresh layers, then overwrite with exact query values
        key_rng = np.random.default_rng(0)
        self.key_backbone = nn.ResidualBackbone(cfg.backbone_config(), key_rng, dtype)
        self.key_projection = nn.Linear(key_rng, cfg.feature_channels, cfg.contrastive_dim, dtype=dtype)
        for (qn, q), (kn, k) in zip(self._query_pairs(), self._key_pairs()):
            assert qn == kn, f"key/query parameter mismatch: {qn} vs {kn}"
            k.data = q.data.copy()
            k.requires_grad = False
        self.bank = MemoryBank(cfg.bank_size, cfg.contrastive_dim)

    def _query_pairs(self):
        yield from nn.prefixed("backbone", self.model.backbone)
        yield from nn.prefixed("projection", self.model.projection)

    def _key_pairs(self):
        yield from nn.prefixed("backbone", self.key_backbone)
        yield from nn.prefixed("projection", self.key_projection)

    def named_key_params(self):
        for name, p in self._key_pairs():
            yield f"key.{name}", p

    def momentum_update(self, m: float | None = None) -> None:
        """key <- m * key + (1 - m) * query, elementwise over shared leaves."""
        m = self.cfg.momentum if m is None else float(m)
        if not 0.0 <= m <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        for (qn, q), (kn, k) in zip(self._query_pairs(), self._key_pairs()):
            if q.data.shape != k.data.shape:
                raise ValueError(f"diverged key parameter '{qn}': {q.data.shape} vs {k.data.shape}")
            k.data = m * k.data + (1.0 - m) * q.data

    def key_encode(self, images) -> np.ndarray:
        """Key-branch embedding of (N, C, S, S) images; never tracked."""
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.model.dtype))
        with T.no_grad():
            feats = self.key_backbone.forward(x)
            pooled = feats.mean(axis=(2, 3))
            z = T.l2_normalize(self.key_projection.forward(pooled), axis=1)
        return z.data.copy()


class AeDecoder:
    """Five conv layers mapping the backbone feature map back to an image.

    Upsampling is done by 2x pixel shuffle after a channel-expanding conv;
    the number of upsampling stages is fixed by the geometry (grid -> image
    size), and the remaining layers are plain convs, the last one 1x1 down
    to the image channels with no activation.
    """

    N_LAYERS = 5

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32,
                 out_channels: int = 3):
        grid = cfg.grid
        size = cfg.image_size
        ratio = size // grid
        ups = int(np.log2(ratio)) if ratio >= 1 else -1
        if grid * (2**ups) != size or ups < 1 or ups > self.N_LAYERS - 1:
            raise ValueError(
                f"decoder cannot map grid {grid} to image size {size} with "
                f"{self.N_LAYERS} layers and 2x upsampling stages"
            )
        self.ups = ups
        self.slope = cfg.leaky_slope
        self.convs = []
        ch = cfg.feature_channels
        for _ in range(ups):
            nxt = max(ch // 2, 8)
            self.convs.append(nn.Conv2d(rng, ch, 4 * nxt, 3, padding=1, dtype=dtype))
            ch = nxt
        for _ in range(self.N_LAYERS - ups - 1):
            self.convs.append(nn.Conv2d(rng, ch, ch, 3, padding=1, dtype=dtype))
        self.convs.append(nn.Conv2d(rng, ch, out_channels, 1, dtype=dtype))

    def forward(self, feats: Tensor) -> Tensor:
        y = feats
        for i, conv in enumerate(self.convs):
            y = conv.forward(y)
            if i < self.ups:
                y = T.pixel_shuffle(y, 2)
            if i < len(self.convs) - 1:
                y = T.leaky_relu(y, self.slope)
        return y

    def named_params(self):
        for i, conv in enumerate(self.convs):
            for sub, p in conv.named_params():
                yield f"conv{i}.{sub}", p
