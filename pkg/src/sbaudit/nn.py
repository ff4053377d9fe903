"""MiniPadNet: a fixed three-block CNN with hand-written forward/backward passes.

Architecture (input 1x32x32, all float64)::

    conv3x3(1->8, pad 1)  + ReLU + maxpool2   -> 8x16x16
    conv3x3(8->16, pad 1) + ReLU + maxpool2   -> 16x8x8
    conv3x3(16->32, pad 1)+ ReLU              -> 32x8x8   (target layer)
    global average pool                       -> 32
    linear(32 -> 1)                           -> logit

``sigmoid(logit)`` is the probability of the attack class.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .rng import Xoshiro256

INPUT_SHAPE = (1, 32, 32)
TARGET_SHAPE = (32, 8, 8)
CONV_CHANNELS = ((1, 8), (8, 16), (16, 32))
TARGET_LAYER_ID = 2

WEIGHT_MAGIC = b"SBAW"
WEIGHT_VERSION = 1
_KIND_TAGS = {"conv": 1, "linear": 2}
_TAG_KINDS = {v: k for k, v in _KIND_TAGS.items()}

# Images scored per block; fixed so results never depend on how work is split.
SCORE_CHUNK = 8


class ShapeError(ValueError):
    pass


class ModelMismatchError(ValueError):
    pass


class WeightFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Layer:
    kind: str
    weight: np.ndarray
    bias: np.ndarray

    @property
    def params(self) -> tuple[np.ndarray, np.ndarray]:
        return (self.weight, self.bias)


def _architecture_shapes() -> list[tuple[str, tuple[int, ...], tuple[int, ...]]]:
    shapes = [("conv", (o, i, 3, 3), (o,)) for i, o in CONV_CHANNELS]
    shapes.append(("linear", (1, CONV_CHANNELS[-1][1]), (1,)))
    return shapes


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class MiniPadNet:
    layers: tuple[Layer, ...]
    target_layer_id: int = TARGET_LAYER_ID
    input_shape: tuple[int, int, int] = INPUT_SHAPE

    def __post_init__(self):
        expected = _architecture_shapes()
        if len(self.layers) != len(expected):
            raise ShapeError(f"expected {len(expected)} layers, got {len(self.layers)}")
        for idx, (layer, (kind, wshape, bshape)) in enumerate(zip(self.layers, expected)):
            if layer.kind != kind:
                raise ShapeError(f"layer {idx}: expected kind {kind!r}, got {layer.kind!r}")
            if layer.weight.shape != wshape or layer.bias.shape != bshape:
                raise ShapeError(
                    f"layer {idx}: expected shapes {wshape}/{bshape}, "
                    f"got {layer.weight.shape}/{layer.bias.shape}"
                )
        if self.target_layer_id != TARGET_LAYER_ID:
            raise ShapeError("target layer must be the last conv layer")

    @classmethod
    def from_params(cls, params: list[np.ndarray]) -> "MiniPadNet":
        """Build from a flat ``[w0, b0, w1, b1, ...]`` list (copies, read-only)."""
        kinds = [k for k, _, _ in _architecture_shapes()]
        layers = tuple(
            Layer(kind, _frozen(params[2 * i]), _frozen(params[2 * i + 1]))
            for i, kind in enumerate(kinds)
        )
        return cls(layers)

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params]

    @cached_property
    def digest(self) -> str:
        h = hashlib.sha256()
        for p in self.params():
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()

    def equals(self, other: "MiniPadNet") -> bool:
        """Bit-identical parameters."""
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.params(), other.params())
        )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 0.02
    momentum: float = 0.9
    seed: int = 0
    grad_clip: float = 1.0  # max global gradient L2 norm per step; 0 disables

    def __post_init__(self):
        if not isinstance(self.epochs, int) or self.epochs < 0:
            raise ValueError("epochs must be a non-negative integer")
        if not isinstance(self.batch_size, int) or self.batch_size <= 0:
            raise ValueError("batch_size must be a positive integer")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if not self.grad_clip >= 0:
            raise ValueError("grad_clip must be non-negative (0 disables clipping)")


@dataclass
class ActivationCache:
    """Layer outputs of one forward pass over a batch.

    ``outputs`` maps layer names to arrays with a leading batch axis.  For a
    single image (see :func:`forward`) the batch axis has length one.
    """

    outputs: dict[str, np.ndarray]
    logit: np.ndarray
    model_digest: str
    _tape: Optional[dict] = field(default=None, repr=False)

    @property
    def target(self) -> np.ndarray:
        return self.outputs["conv3"]

    @property
    def score(self) -> np.ndarray:
        return sigmoid(self.logit)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def init_model(seed: int) -> MiniPadNet:
    """Uniform(-b, b) init with ``b = sqrt(6 / fan_in)`` for every weight and bias.

    Parameters are drawn layer by layer, weight entries (row-major) before
    bias entries, from one xoshiro256** stream.
    """
    rng = Xoshiro256(seed)
    params = []
    for _, wshape, bshape in _architecture_shapes():
        fan_in = int(np.prod(wshape[1:]))
        bound = np.sqrt(6.0 / fan_in)
        for shape in (wshape, bshape):
            n = int(np.prod(shape))
            vals = np.array([rng.uniform() for _ in range(n)], dtype=np.float64)
            params.append((bound * (2.0 * vals - 1.0)).reshape(shape))
    return MiniPadNet.from_params(params)


# ---------------------------------------------------------------------------
# layer primitives (batched; internal layout is channel-major CNHW)


def _im2col(x: np.ndarray) -> np.ndarray:
    """(C, N, H, W) -> (C*9, N*H*W) for a same-padded 3x3 kernel."""
    c, n, h, w = x.shape
    xp = np.zeros((c, n, h + 2, w + 2))
    xp[:, :, 1:-1, 1:-1] = x
    cols = np.empty((c, 3, 3, n, h, w))
    for di in range(3):
        for dj in range(3):
            cols[:, di, dj] = xp[:, :, di:di + h, dj:dj + w]
    return cols.reshape(c * 9, n * h * w)


def _conv_forward(x, weight, bias):
    _, n, h, w = x.shape
    out_c = weight.shape[0]
    cols = _im2col(x)
    out = weight.reshape(out_c, -1) @ cols
    out += bias[:, None]
    return out.reshape(out_c, n, h, w), cols


def _conv_backward(dout, cols, weight, in_shape, need_input_grad=True):
    c, n, h, w = in_shape
    out_c = weight.shape[0]
    d2 = dout.reshape(out_c, -1)
    dweight = (d2 @ cols.T).reshape(weight.shape)
    dbias = d2.sum(axis=1)
    if not need_input_grad:
        return None, dweight, dbias
    # input gradient of a same-padded 3x3 conv is a conv of dout with the flipped, transposed kernel
    flipped = weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    dx = (flipped.reshape(c, -1) @ _im2col(dout)).reshape(c, n, h, w)
    return dx, dweight, dbias


def _pool_quads(x):
    return (x[..., 0::2, 0::2], x[..., 0::2, 1::2], x[..., 1::2, 0::2], x[..., 1::2, 1::2])


def _pool_forward(x):
    q0, q1, q2, q3 = _pool_quads(x)
    return np.maximum(np.maximum(q0, q1), np.maximum(q2, q3))


def _pool_backward(dout, x, out):
    # gradient goes to the first maximum of each 2x2 window (row-major)
    dx = np.zeros_like(x)
    taken = np.zeros(out.shape, dtype=bool)
    for (r, c), q in zip(((0, 0), (0, 1), (1, 0), (1, 1)), _pool_quads(x)):
        hit = (q == out) & ~taken
        taken |= hit
        dx[..., r::2, c::2] = dout * hit
    return dx


def _nchw(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(1, 0, 2, 3))


def _head(model: MiniPadNet, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``target`` is NCHW."""
    head = model.layers[3]
    pooled = target.mean(axis=(2, 3))
    logit = (pooled * head.weight[0]).sum(axis=1) + head.bias[0]
    return pooled, logit


def head_logit(model: MiniPadNet, target: np.ndarray) -> np.ndarray:
    """Logit from target-layer activations of shape (N, 32, 8, 8) or (32, 8, 8)."""
    target = np.asarray(target, dtype=np.float64)
    if target.shape == TARGET_SHAPE:
        return _head(model, target[None])[1][0]
    return _head(model, target)[1]


def forward_batch(model: MiniPadNet, images: np.ndarray, keep_tape: bool = False) -> ActivationCache:
    """Forward a batch of shape (N, 1, 32, 32).  Cached outputs are NCHW."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[1:] != INPUT_SHAPE:
        raise ShapeError(f"expected images of shape (N, 1, 32, 32), got {images.shape}")
    c1, c2, c3 = model.layers[:3]
    x = np.ascontiguousarray(images.transpose(1, 0, 2, 3))
    z1, cols1 = _conv_forward(x, c1.weight, c1.bias)
    a1 = np.maximum(z1, 0.0)
    p1 = _pool_forward(a1)
    z2, cols2 = _conv_forward(p1, c2.weight, c2.bias)
    a2 = np.maximum(z2, 0.0)
    p2 = _pool_forward(a2)
    z3, cols3 = _conv_forward(p2, c3.weight, c3.bias)
    a3 = _nchw(np.maximum(z3, 0.0))
    pooled, logit = _head(model, a3)
    if not np.all(np.isfinite(logit)):
        raise FloatingPointError("non-finite logit")
    tape = None
    if keep_tape:
        tape = dict(x=x, z1=z1, a1=a1, p1=p1, cols1=cols1, z2=z2, a2=a2, p2=p2,
                    cols2=cols2, z3=z3, cols3=cols3)
    return ActivationCache({"conv3": a3, "gap": pooled}, logit, model.digest, tape)


def forward(model: MiniPadNet, image: np.ndarray) -> ActivationCache:
    """Forward a single 1x32x32 image, keeping every layer output.

    ``cache.logit`` is a 0-d array and outputs drop the batch axis.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.shape != INPUT_SHAPE:
        raise ShapeError(f"expected image of shape {INPUT_SHAPE}, got {image.shape}")
    cache = forward_batch(model, image[None], keep_tape=True)
    t = cache._tape
    outputs = {name: _nchw(t[key])[0] for name, key in
               (("conv1", "a1"), ("pool1", "p1"), ("conv2", "a2"), ("pool2", "p2"))}
    outputs.update({k: v[0] for k, v in cache.outputs.items()})
    cache.outputs = outputs
    cache.logit = cache.logit[0]
    cache._tape = None
    return cache


def score_images(model: MiniPadNet, images: np.ndarray, executor=None) -> np.ndarray:
    """Attack probabilities for (N, 1, 32, 32) images.

    Work is cut into fixed blocks of ``SCORE_CHUNK`` images; an optional
    ``concurrent.futures`` executor runs the blocks in parallel without
    changing any output bit.
    """
    return sigmoid(logits_of(model, images, executor))


def logits_of(model: MiniPadNet, images: np.ndarray, executor=None) -> np.ndarray:
    starts = range(0, len(images), SCORE_CHUNK)

    def run(s):
        return forward_batch(model, images[s:s + SCORE_CHUNK]).logit

    parts = list(executor.map(run, starts)) if executor is not None else [run(s) for s in starts]
    return np.concatenate(parts) if parts else np.zeros(0)


def backward_to_layer(model: MiniPadNet, cache: ActivationCache, target_sign: int) -> np.ndarray:
    """Gradient of ``target_sign * logit`` with respect to the target-layer activations.

    Returns an array shaped like ``cache.target`` (32x8x8 for a single image).
    Since the head is global-average-pool followed by a linear layer, every
    spatial position of channel ``k`` receives ``target_sign * w_k / 64``.
    """
    signs = np.asarray(target_sign)
    if not np.all((signs == 1) | (signs == -1)):
        raise ValueError("target_sign must be +1 or -1")
    if cache.model_digest != model.digest:
        raise ModelMismatchError("activation cache was produced by a different model")
    target = cache.target
    h, w = target.shape[-2:]
    if signs.ndim == 1:
        signs = signs[:, None]
    per_channel = signs * model.layers[3].weight[0] / (h * w)
    return np.broadcast_to(per_channel[..., :, None, None], target.shape).copy()


# ---------------------------------------------------------------------------
# training


def bce_with_logits(logit: np.ndarray, label: np.ndarray) -> np.ndarray:
    """Per-sample binary cross-entropy, numerically stable."""
    return np.maximum(logit, 0.0) - logit * label + np.log1p(np.exp(-np.abs(logit)))


def _micro_grads(model: MiniPadNet, images, labels, scale):
    cache = forward_batch(model, images, keep_tape=True)
    t = cache._tape
    dlogit = (sigmoid(cache.logit) - labels) * scale
    head_w = model.layers[3].weight[0]
    dhw = (dlogit[:, None] * cache.outputs["gap"]).sum(axis=0)[None, :]
    dhb = np.array([dlogit.sum()])
    z3 = t["z3"]
    da3 = np.broadcast_to((head_w[:, None] * dlogit[None, :])[:, :, None, None] / 64.0, z3.shape)

    dz3 = da3 * (z3 > 0)
    dp2, dw3, db3 = _conv_backward(dz3, t["cols3"], model.layers[2].weight, t["p2"].shape)
    dz2 = _pool_backward(dp2, t["a2"], t["p2"]) * (t["z2"] > 0)
    dp1, dw2, db2 = _conv_backward(dz2, t["cols2"], model.layers[1].weight, t["p1"].shape)
    dz1 = _pool_backward(dp1, t["a1"], t["p1"]) * (t["z1"] > 0)
    _, dw1, db1 = _conv_backward(dz1, t["cols1"], model.layers[0].weight, t["x"].shape,
                                 need_input_grad=False)
    return bce_with_logits(cache.logit, labels), [dw1, db1, dw2, db2, dw3, db3, dhw, dhb]


def loss_and_grads(model: MiniPadNet, images: np.ndarray, labels: np.ndarray):
    """Mean BCE over the batch and its gradient for every parameter.

    The batch is processed in blocks of ``SCORE_CHUNK`` images (keeps the
    working set in cache); block gradients are summed in order.
    """
    labels = np.asarray(labels, dtype=np.float64)
    n = len(labels)
    losses, total = [], None
    for s in range(0, n, SCORE_CHUNK):
        loss, grads = _micro_grads(model, images[s:s + SCORE_CHUNK], labels[s:s + SCORE_CHUNK], 1.0 / n)
        losses.append(loss)
        if total is None:
            total = grads
        else:
            for acc, g in zip(total, grads):
                acc += g
    return float(np.concatenate(losses).mean()), total


def dataset_loss(model: MiniPadNet, images: np.ndarray, labels: np.ndarray) -> float:
    logits = logits_of(model, images)
    return float(bce_with_logits(logits, np.asarray(labels, dtype=np.float64)).mean())


def train_with_history(model: MiniPadNet, data, cfg: TrainConfig) -> tuple[MiniPadNet, list[float]]:
    """SGD with momentum on mean BCE; returns the model and per-epoch mean batch loss."""
    images, labels = data.images, np.asarray(data.labels, dtype=np.float64)
    if len(labels) == 0:
        raise ValueError("training data is empty")
    if len(np.unique(labels)) < 2:
        raise ValueError("training data must contain both bona fide and attack samples")
    if cfg.epochs == 0:
        return model, []

    rng = Xoshiro256(cfg.seed)
    params = [p.copy() for p in model.params()]
    velocity = [np.zeros_like(p) for p in params]
    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(labels))
        losses = []
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            current = MiniPadNet.from_params(params)
            loss, grads = loss_and_grads(current, images[idx], labels[idx])
            losses.append(loss)
            if cfg.grad_clip > 0:
                norm = np.sqrt(sum(float(np.vdot(g, g)) for g in grads))
                if norm > cfg.grad_clip:
                    grads = [g * (cfg.grad_clip / norm) for g in grads]
            for p, v, g in zip(params, velocity, grads):
                v *= cfg.momentum
                v += g
                p -= cfg.learning_rate * v
        history.append(float(np.mean(losses)))
        if not all(np.all(np.isfinite(p)) for p in params):
            raise FloatingPointError("training diverged")
    return MiniPadNet.from_params(params), history


def train(model: MiniPadNet, data, cfg: TrainConfig) -> MiniPadNet:
    return train_with_history(model, data, cfg)[0]


# ---------------------------------------------------------------------------
# weight files


def dump_model(model: MiniPadNet) -> bytes:
    out = [WEIGHT_MAGIC, struct.pack("<HHH", WEIGHT_VERSION, model.target_layer_id, len(model.layers))]
    for layer in model.layers:
        out.append(struct.pack("<BB", _KIND_TAGS[layer.kind], 2))
        for p in layer.params:
            out.append(struct.pack("<B", p.ndim))
            out.append(struct.pack(f"<{p.ndim}I", *p.shape))
            out.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return b"".join(out)


def parse_model(blob: bytes) -> MiniPadNet:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise WeightFormatError("weight file is truncated")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    if len(blob) < 4 or blob[:4] != WEIGHT_MAGIC:
        raise WeightFormatError("unrecognized format: bad magic bytes")
    take(4)
    version, target_id, n_layers = struct.unpack("<HHH", take(6))
    if version != WEIGHT_VERSION:
        raise WeightFormatError(f"unsupported weight format version {version}")
    params = []
    kinds = []
    for _ in range(n_layers):
        tag, n_tensors = struct.unpack("<BB", take(2))
        if tag not in _TAG_KINDS:
            raise WeightFormatError(f"unknown layer kind tag {tag}")
        kinds.append(_TAG_KINDS[tag])
        for _ in range(n_tensors):
            (ndim,) = struct.unpack("<B", take(1))
            shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
            count = int(np.prod(shape)) if ndim else 1
            params.append(np.frombuffer(take(8 * count), dtype="<f8").reshape(shape))
    if pos != len(blob):
        raise WeightFormatError("trailing bytes after weight data")
    try:
        layers = tuple(Layer(k, _frozen(params[2 * i]), _frozen(params[2 * i + 1]))
                       for i, k in enumerate(kinds))
        return MiniPadNet(layers, target_layer_id=target_id)
    except (ShapeError, IndexError) as exc:
        raise WeightFormatError(f"weights do not match the architecture: {exc}") from exc


def save_model(model: MiniPadNet, path) -> None:
    Path(path).write_bytes(dump_model(model))


def load_model(path) -> MiniPadNet:
    return parse_model(Path(path).read_bytes())
