"""Network building blocks: layers, a residual CNN, an LSTM stack,
optimizers, gradient clipping, and the checkpoint container.

Parameters are plain :class:`~egorep.tensor.Tensor` leaves with
``requires_grad=True``.  Every layer yields ``(path, tensor)`` pairs from
``named_params``; containers prefix the paths, so the full parameter tree is
addressable by stable dotted names.  Optimizer state and checkpoints are
keyed by those names.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from typing import Iterator, Mapping

import numpy as np

from . import tensor as T
from .tensor import Tensor


def fanin_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> Tensor:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)); variance bound^2 / 3."""
    bound = 1.0 / np.sqrt(float(fan_in))
    return Tensor(rng.uniform(-bound, bound, shape).astype(dtype), requires_grad=True)


class Linear:
    def __init__(self, rng, in_features: int, out_features: int, bias: bool = True, dtype=np.float32):
        self.in_features = in_features
        self.out_features = out_features
        self.w = fanin_uniform(rng, (out_features, in_features), in_features, dtype)
        self.b = fanin_uniform(rng, (out_features,), in_features, dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.w, self.b)

    def named_params(self) -> Iterator[tuple[str, Tensor]]:
        yield "w", self.w
        if self.b is not None:
            yield "b", self.b


class Conv2d:
    def __init__(self, rng, in_channels: int, out_channels: int, kernel: int,
                 stride: int = 1, padding: int = 0, bias: bool = True, dtype=np.float32):
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel * kernel
        self.w = fanin_uniform(rng, (out_channels, in_channels, kernel, kernel), fan_in, dtype)
        self.b = fanin_uniform(rng, (out_channels,), fan_in, dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)

    def named_params(self) -> Iterator[tuple[str, Tensor]]:
        yield "w", self.w
        if self.b is not None:
            yield "b", self.b


class ChannelAffine:
    """Per-channel gain and bias; the normalization-free stand-in for BN."""

    def __init__(self, channels: int, dtype=np.float32):
        self.gain = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return T.scale_channels(x, self.gain, self.bias)

    def named_params(self) -> Iterator[tuple[str, Tensor]]:
        yield "gain", self.gain
        yield "bias", self.bias


class LstmStack:
    """Stacked LSTM; gate layout along the 4H axis is (input, forget, cell, output).

    Forget-gate biases start at 1 so early training does not immediately
    flush the cell state.
    """

    def __init__(self, rng, input_size: int, hidden_size: int, num_layers: int, dtype=np.float32):
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.num_layers = num_layers
        self.dtype = np.dtype(dtype)
        self.layers = []
        for li in range(num_layers):
            in_size = input_size if li == 0 else hidden_size
            w_ih = fanin_uniform(rng, (4 * hidden_size, in_size), hidden_size, dtype)
            w_hh = fanin_uniform(rng, (4 * hidden_size, hidden_size), hidden_size, dtype)
            b = np.zeros(4 * hidden_size, dtype=dtype)
            b[hidden_size : 2 * hidden_size] = 1.0
            self.layers.append((w_ih, w_hh, Tensor(b, requires_grad=True)))

    def initial_state(self, batch: int) -> list[tuple[Tensor, Tensor]]:
        z = lambda: Tensor(np.zeros((batch, self.hidden_size), dtype=self.dtype))
        return [(z(), z()) for _ in range(self.num_layers)]

    def step(self, x: Tensor, state: list[tuple[Tensor, Tensor]]):
        """One time step. Returns (top hidden, new state)."""
        if x.ndim != 2 or x.shape[1] != (self.input_size):
            raise T.ShapeError("lstm_step", x.shape, (x.shape[0], self.input_size))
        h = self.hidden_size
        new_state = []
        inp = x
        for li, (w_ih, w_hh, b) in enumerate(self.layers):
            h_prev, c_prev = state[li]
            gates = T.linear(inp, w_ih, b) + T.linear(h_prev, w_hh, None)
            i = T.sigmoid(gates[:, 0:h])
            f = T.sigmoid(gates[:, h : 2 * h])
            g = T.tanh(gates[:, 2 * h : 3 * h])
            o = T.sigmoid(gates[:, 3 * h : 4 * h])
            c = f * c_prev + i * g
            hid = o * T.tanh(c)
            new_state.append((hid, c))
            inp = hid
        return inp, new_state

    def run(self, xs: list[Tensor], state=None):
        """Chain ``step`` over a sequence; returns (top hiddens, final state)."""
        if state is None:
            state = self.initial_state(xs[0].shape[0])
        outs = []
        for x in xs:
            top, state = self.step(x, state)
            outs.append(top)
        return outs, state

    def named_params(self) -> Iterator[tuple[str, Tensor]]:
        for li, (w_ih, w_hh, b) in enumerate(self.layers):
            yield f"l{li}.w_ih", w_ih
            yield f"l{li}.w_hh", w_hh
            yield f"l{li}.b", b


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 56
    in_channels: int = 3
    channels: tuple[int, ...] = (16, 32, 64, 128)
    strides: tuple[int, ...] = (1, 2, 2, 2)
    blocks_per_stage: int = 1
    stem_stride: int = 1
    stem_pool: bool = False
    leaky_slope: float = 0.1

    def total_stride(self) -> int:
        s = self.stem_stride * (2 if self.stem_pool else 1)
        for st in self.strides:
            s *= st
        return s

    def out_grid(self) -> int:
        return self.image_size // self.total_stride()

    def validate(self) -> None:
        if len(self.channels) != len(self.strides):
            raise ValueError("channels and strides must have equal length")
        if self.image_size % self.total_stride() != 0:
            raise ValueError(
                f"image size {self.image_size} is not divisible by total stride {self.total_stride()}"
            )
        if self.out_grid() < 1:
            raise ValueError("backbone reduces the image below 1x1")


class BasicBlock:
    """Two 3x3 convs with a skip connection; 1x1 projection when shape changes."""

    def __init__(self, rng, in_ch: int, out_ch: int, stride: int, slope: float, dtype=np.float32):
        self.slope = slope
        self.conv1 = Conv2d(rng, in_ch, out_ch, 3, stride=stride, padding=1, dtype=dtype)
        self.aff1 = ChannelAffine(out_ch, dtype)
        self.conv2 = Conv2d(rng, out_ch, out_ch, 3, stride=1, padding=1, dtype=dtype)
        self.aff2 = ChannelAffine(out_ch, dtype)
        if stride != 1 or in_ch != out_ch:
            self.proj = Conv2d(rng, in_ch, out_ch, 1, stride=stride, padding=0, bias=False, dtype=dtype)
            self.proj_aff = ChannelAffine(out_ch, dtype)
        else:
            self.proj = None
            self.proj_aff = None

    def forward(self, x: Tensor) -> Tensor:
        y = T.leaky_relu(self.aff1.forward(self.conv1.forward(x)), self.slope)
        y = self.aff2.forward(self.conv2.forward(y))
        skip = x if self.proj is None else self.proj_aff.forward(self.proj.forward(x))
        return T.leaky_relu(y + skip, self.slope)

    def named_params(self):
        for name, mod in (
            ("conv1", self.conv1), ("aff1", self.aff1),
            ("conv2", self.conv2), ("aff2", self.aff2),
            ("proj", self.proj), ("proj_aff", self.proj_aff),
        ):
            if mod is None:
                continue
            for sub, p in mod.named_params():
                yield f"{name}.{sub}", p


class ResidualBackbone:
    """Strided residual CNN mapping (N, C, S, S) images to a coarse feature map.

    Batch statistics are avoided entirely: inputs are rescaled from [0, 1] to
    [-1, 1] at the front, and each conv is followed by a learned per-channel
    affine instead of batch norm, so single-example and batched forward passes
    agree exactly.
    """

    def __init__(self, cfg: BackboneConfig, rng, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.stem = Conv2d(rng, cfg.in_channels, cfg.channels[0], 3,
                           stride=cfg.stem_stride, padding=1, dtype=dtype)
        self.stem_aff = ChannelAffine(cfg.channels[0], dtype)
        self.stages = []
        prev = cfg.channels[0]
        for ch, stride in zip(cfg.channels, cfg.strides):
            blocks = []
            for bi in range(cfg.blocks_per_stage):
                blocks.append(BasicBlock(rng, prev, ch, stride if bi == 0 else 1,
                                         cfg.leaky_slope, dtype))
                prev = ch
            self.stages.append(blocks)

    @property
    def feature_channels(self) -> int:
        return self.cfg.channels[-1]

    def forward(self, x: Tensor, return_stages: bool = False):
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1] != cfg.in_channels or x.shape[2] != cfg.image_size or x.shape[3] != cfg.image_size:
            raise T.ShapeError("backbone", x.shape,
                               (x.shape[0] if x.ndim == 4 else 0, cfg.in_channels, cfg.image_size, cfg.image_size),
                               detail="input resolution does not match the configuration")
        y = x * 2.0 - 1.0
        y = T.leaky_relu(self.stem_aff.forward(self.stem.forward(y)), cfg.leaky_slope)
        if cfg.stem_pool:
            y = T.maxpool2d(y, 2)
        stage_outs = []
        for blocks in self.stages:
            for blk in blocks:
                y = blk.forward(y)
            stage_outs.append(y)
        return stage_outs if return_stages else y

    def named_params(self):
        for sub, p in self.stem.named_params():
            yield f"stem.{sub}", p
        for sub, p in self.stem_aff.named_params():
            yield f"stem_aff.{sub}", p
        for si, blocks in enumerate(self.stages):
            for bi, blk in enumerate(blocks):
                for sub, p in blk.named_params():
                    yield f"stage{si}.block{bi}.{sub}", p


def prefixed(prefix: str, module) -> Iterator[tuple[str, Tensor]]:
    for name, p in module.named_params():
        yield f"{prefix}.{name}", p


def zero_grads(params: Iterator[tuple[str, Tensor]]) -> None:
    for _, p in params:
        p.grad = None


def global_grad_norm(params) -> float:
    total = 0.0
    for _, p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return float(np.sqrt(total))


def clip_gradients(params, max_norm: float) -> float:
    """Scale all gradients so their global norm is at most ``max_norm``.

    Returns the pre-clip norm.
    """
    params = list(params)
    norm = global_grad_norm(params)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for _, p in params:
            if p.grad is not None:
                p.grad = (p.grad * np.asarray(scale, dtype=p.grad.dtype))
    return norm


class MissingGradError(RuntimeError):
    """A parameter reached the optimizer without a gradient."""

    def __init__(self, path: str):
        self.path = path
        super().__init__(f"parameter '{path}' has no gradient; was backward run?")


class Sgd:
    def __init__(self, lr: float):
        self.lr = float(lr)

    def step(self, params) -> None:
        for path, p in params:
            if p.grad is None:
                raise MissingGradError(path)
            p.data = p.data - p.grad * np.asarray(self.lr, dtype=p.data.dtype)

    def state_dict(self) -> dict:
        return {"kind": "sgd", "arrays": {}, "scalars": {"lr": self.lr}}

    def load_state_dict(self, state: dict) -> None:
        if state.get("kind") != "sgd":
            raise ValueError(f"optimizer state kind {state.get('kind')!r} is not 'sgd'")
        self.lr = float(state["scalars"]["lr"])


class Adam:
    """Adam with bias correction; moments are kept per parameter path."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params) -> None:
        params = list(params)
        for path, p in params:
            if p.grad is None:
                raise MissingGradError(path)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for path, p in params:
            g = p.grad
            m = self.m.get(path)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            else:
                v = self.v[path]
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * (g * g)
            self.m[path] = m
            self.v[path] = v
            mh = m / bc1
            vh = v / bc2
            p.data = p.data - np.asarray(self.lr, dtype=p.data.dtype) * mh / (np.sqrt(vh) + self.eps)

    def state_dict(self) -> dict:
        arrays = {}
        for path, arr in self.m.items():
            arrays[f"m.{path}"] = arr
        for path, arr in self.v.items():
            arrays[f"v.{path}"] = arr
        return {
            "kind": "adam",
            "arrays": arrays,
            "scalars": {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                        "eps": self.eps, "t": self.t},
        }

    def load_state_dict(self, state: dict) -> None:
        if state.get("kind") != "adam":
            raise ValueError(f"optimizer state kind {state.get('kind')!r} is not 'adam'")
        sc = state["scalars"]
        self.lr = float(sc["lr"])
        self.beta1 = float(sc["beta1"])
        self.beta2 = float(sc["beta2"])
        self.eps = float(sc["eps"])
        self.t = int(sc["t"])
        self.m = {}
        self.v = {}
        for key, arr in state["arrays"].items():
            kind, path = key.split(".", 1)
            (self.m if kind == "m" else self.v)[path] = np.array(arr)


def make_optimizer(kind: str, lr: float) -> Sgd | Adam:
    if kind == "sgd":
        return Sgd(lr)
    if kind == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer '{kind}'; expected 'sgd' or 'adam'")


# ---------------------------------------------------------------------------
# checkpoint container: a JSON manifest followed by concatenated "ITNS"
# records.  The manifest stores per-tensor offsets into the payload region
# plus a SHA-256 over the payload so corruption is refused at load time.


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], meta: dict) -> None:
    chunks = []
    entries = {}
    offset = 0
    # canonical payload layout: the same arrays produce the same file bytes
    # no matter what order the caller's mapping was built in
    for name in sorted(arrays):
        arr = arrays[name]
        blob = T.tensor_to_bytes(np.asarray(arr))
        entries[name] = {"offset": offset, "shape": [int(d) for d in np.asarray(arr).shape]}
        chunks.append(blob)
        offset += len(blob)
    payload = b"".join(chunks)
    manifest = {
        "format": "egorep-checkpoint",
        "version": 1,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "meta": meta,
        "tensors": entries,
    }
    manifest_bytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(manifest_bytes)))
        f.write(manifest_bytes)
        f.write(payload)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (mlen,) = struct.unpack_from("<I", raw, 0)
    if 4 + mlen > len(raw):
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[4 : 4 + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable manifest: {e}") from e
    if manifest.get("format") != "egorep-checkpoint":
        raise CheckpointError(f"{path}: not an egorep checkpoint")
    payload = raw[4 + mlen :]
    digest = hashlib.sha256(payload).hexdigest()
    if digest != manifest["payload_sha256"]:
        raise CheckpointError(f"{path}: payload hash mismatch; file is corrupt")
    arrays = {}
    for name, entry in manifest["tensors"].items():
        arr, _ = T.tensor_from_bytes(payload, entry["offset"])
        if list(arr.shape) != entry["shape"]:
            raise CheckpointError(f"{path}: tensor '{name}' shape mismatch")
        arrays[name] = arr
    return arrays, manifest["meta"]


def params_sha256(named_params) -> str:
    """Order-sensitive digest of parameter names and float32 payloads."""
    h = hashlib.sha256()
    for name, p in named_params:
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return h.hexdigest()
