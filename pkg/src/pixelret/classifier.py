"""Convolutional classifier over IIP classes, implemented directly on numpy.

Stack: repeated valid-padding conv blocks (3x3 kernels, stride-2 default,
ReLU) feeding a global average pool and a dense softmax head.  Weights and
activations are float32; softmax and loss run in float64.  Everything is
seeded and single-threaded over the batch sequence, so training twice with
one seed reproduces history and weights bitwise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ArchError,
    ChecksumError,
    EmptyDataset,
    FormatError,
    ParamError,
    ShapeError,
)
from .grid import sha256_bytes
from .tiling import PixelDataset

MODEL_FORMAT_VERSION = 1
MOMENTUM = 0.9


@dataclass
class ConvBlock:
    filters: int
    kernel: int = 3
    stride: int = 2
    activation: str = "relu"

    def __post_init__(self):
        if self.filters < 1:
            raise ArchError(f"filters must be >= 1, got {self.filters}")
        if self.kernel < 1 or self.kernel % 2 != 1:
            raise ArchError(f"kernel must be odd >= 1, got {self.kernel}")
        if self.stride < 1:
            raise ArchError(f"stride must be >= 1, got {self.stride}")
        if self.activation != "relu":
            raise ArchError(f"unsupported activation {self.activation!r}")


@dataclass
class ArchDescriptor:
    input_side: int
    num_classes: int
    conv_blocks: list[ConvBlock]
    pool: str = "global_average"

    def __post_init__(self):
        if not self.conv_blocks:
            raise ArchError("at least one conv block is required")
        if self.num_classes < 2:
            raise ArchError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.pool != "global_average":
            raise ArchError(f"unsupported pool {self.pool!r}")
        side = self.input_side
        for i, b in enumerate(self.conv_blocks):
            if side < b.kernel:
                raise ArchError(
                    f"block {i}: spatial size {side} smaller than kernel {b.kernel}"
                )
            side = (side - b.kernel) // b.stride + 1
        self.feature_sides = self._sides()

    def _sides(self) -> list[int]:
        sides = [self.input_side]
        for b in self.conv_blocks:
            sides.append((sides[-1] - b.kernel) // b.stride + 1)
        return sides

    def to_dict(self) -> dict:
        return {
            "input_side": self.input_side,
            "num_classes": self.num_classes,
            "conv_blocks": [
                {"filters": b.filters, "kernel": b.kernel,
                 "stride": b.stride, "activation": b.activation}
                for b in self.conv_blocks
            ],
            "pool": self.pool,
        }

    @staticmethod
    def from_dict(d: dict) -> "ArchDescriptor":
        return ArchDescriptor(
            input_side=int(d["input_side"]),
            num_classes=int(d["num_classes"]),
            conv_blocks=[ConvBlock(**b) for b in d["conv_blocks"]],
            pool=d.get("pool", "global_average"),
        )


def default_arch(input_side: int, num_classes: int) -> ArchDescriptor:
    """Three stride-2 blocks (8, 16, 32 filters) + GAP + dense head."""
    return ArchDescriptor(
        input_side=input_side,
        num_classes=num_classes,
        conv_blocks=[ConvBlock(8), ConvBlock(16), ConvBlock(32)],
    )


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 32
    learning_rate: float = 0.05
    optimizer: str = "sgd_momentum"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ParamError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ParamError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ParamError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.optimizer != "sgd_momentum":
            raise ParamError(f"unsupported optimizer {self.optimizer!r}")


@dataclass
class ModelParams:
    arch: ArchDescriptor
    weights: dict[str, np.ndarray] = field(repr=False)
    seed: int
    train_meta: dict = field(default_factory=dict)

    def tensor_names(self) -> list[str]:
        names = []
        for i in range(len(self.arch.conv_blocks)):
            names += [f"conv{i}_w", f"conv{i}_b"]
        names += ["dense_w", "dense_b"]
        return names

    def copy(self) -> "ModelParams":
        return ModelParams(
            arch=self.arch,
            weights={k: v.copy() for k, v in self.weights.items()},
            seed=self.seed,
            train_meta=dict(self.train_meta),
        )

    def checksum(self) -> str:
        h = json.dumps(self.arch.to_dict(), sort_keys=True).encode()
        for name in self.tensor_names():
            h += self.weights[name].astype("<f4").tobytes()
        return sha256_bytes(h)


def init_model(arch: ArchDescriptor, seed: int) -> ModelParams:
    """Seeded uniform fan-in initialization; biases start at zero."""
    rng = np.random.Generator(np.random.PCG64(seed))
    weights: dict[str, np.ndarray] = {}
    cin = 1
    for i, b in enumerate(arch.conv_blocks):
        fan_in = cin * b.kernel * b.kernel
        bound = float(np.sqrt(1.0 / fan_in))
        weights[f"conv{i}_w"] = rng.uniform(
            -bound, bound, (b.filters, cin, b.kernel, b.kernel)
        ).astype(np.float32)
        weights[f"conv{i}_b"] = np.zeros(b.filters, dtype=np.float32)
        cin = b.filters
    bound = float(np.sqrt(1.0 / cin))
    weights["dense_w"] = rng.uniform(
        -bound, bound, (arch.num_classes, cin)
    ).astype(np.float32)
    weights["dense_b"] = np.zeros(arch.num_classes, dtype=np.float32)
    return ModelParams(arch=arch, weights=weights, seed=seed)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, k: int, s: int) -> tuple[np.ndarray, int, int]:
    n, c, h, w = x.shape
    oh = (h - k) // s + 1
    ow = (w - k) // s + 1
    cols = np.empty((n, c, k, k, oh, ow), dtype=x.dtype)
    for ky in range(k):
        for kx in range(k):
            cols[:, :, ky, kx] = x[:, :, ky : ky + s * oh : s, kx : kx + s * ow : s]
    return cols.reshape(n, c * k * k, oh * ow), oh, ow


def _col2im(dcols: np.ndarray, xshape: tuple, k: int, s: int, oh: int, ow: int) -> np.ndarray:
    n, c, h, w = xshape
    dx = np.zeros(xshape, dtype=dcols.dtype)
    dc = dcols.reshape(n, c, k, k, oh, ow)
    for ky in range(k):
        for kx in range(k):
            dx[:, :, ky : ky + s * oh : s, kx : kx + s * ow : s] += dc[:, :, ky, kx]
    return dx


def _forward_batch(m: ModelParams, images: np.ndarray, keep_cache: bool = False):
    """images: (n, side, side) float32 -> (logits float32, cache)."""
    arch = m.arch
    x = images[:, None, :, :]
    cache = []
    for i, b in enumerate(arch.conv_blocks):
        w2 = m.weights[f"conv{i}_w"].reshape(b.filters, -1)
        cols, oh, ow = _im2col(x, b.kernel, b.stride)
        z = np.matmul(w2, cols) + m.weights[f"conv{i}_b"][None, :, None]
        a = np.maximum(z, 0.0)
        if keep_cache:
            cache.append((x.shape, cols, z, oh, ow))
        x = a.reshape(x.shape[0], b.filters, oh, ow)
    gap = x.mean(axis=(2, 3))
    logits = gap @ m.weights["dense_w"].T + m.weights["dense_b"]
    if keep_cache:
        return logits, (cache, gap, x.shape)
    return logits, None


def _softmax64(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z -= z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward(m: ModelParams, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Single image -> (probs, logits); probs sum to 1 within 1e-6."""
    img = np.asarray(image)
    if img.shape != (m.arch.input_side, m.arch.input_side):
        raise ShapeError(
            f"image {img.shape}, model expects "
            f"({m.arch.input_side}, {m.arch.input_side})"
        )
    logits, _ = _forward_batch(m, img.astype(np.float32)[None])
    return _softmax64(logits)[0], logits[0]


def predict(m: ModelParams, image: np.ndarray) -> int:
    """Argmax class; ties resolve to the lower class index."""
    probs, _ = forward(m, image)
    return int(np.argmax(probs))


def predict_batch(m: ModelParams, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Vectorized argmax prediction for evaluation loops."""
    imgs = np.asarray(images, dtype=np.float32)
    if imgs.ndim != 3 or imgs.shape[1] != imgs.shape[2] or imgs.shape[1] != m.arch.input_side:
        raise ShapeError(f"images {imgs.shape} incompatible with model")
    out = np.empty(imgs.shape[0], dtype=np.int64)
    for start in range(0, imgs.shape[0], batch_size):
        logits, _ = _forward_batch(m, imgs[start : start + batch_size])
        out[start : start + logits.shape[0]] = np.argmax(logits, axis=1)
    return out


def backward(m: ModelParams, batch: tuple[np.ndarray, np.ndarray]):
    """Mean cross-entropy loss and its gradients for (images, labels)."""
    images, labels = batch
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels)
    if images.ndim != 3 or images.shape[0] == 0:
        raise ShapeError("batch images must be a nonempty (n, side, side) array")
    if images.shape[1] != m.arch.input_side or images.shape[2] != m.arch.input_side:
        raise ShapeError(f"batch images {images.shape} incompatible with model")
    if labels.shape != (images.shape[0],) or labels.max() >= m.arch.num_classes:
        raise ShapeError("labels must be per-sample class ids below num_classes")

    logits, (cache, gap, xshape) = _forward_batch(m, images, keep_cache=True)
    n = images.shape[0]
    probs = _softmax64(logits)
    picked = probs[np.arange(n), labels]
    loss = float(-np.mean(np.log(np.maximum(picked, 1e-300))))
    dlogits = probs
    dlogits[np.arange(n), labels] -= 1.0
    dlogits = (dlogits / n).astype(np.float32)

    grads: dict[str, np.ndarray] = {
        "dense_w": dlogits.T @ gap,
        "dense_b": dlogits.sum(axis=0),
    }
    dgap = dlogits @ m.weights["dense_w"]
    nb, f, oh, ow = xshape
    dx = np.broadcast_to(
        dgap[:, :, None, None] / (oh * ow), xshape
    ).astype(np.float32)
    for i in range(len(m.arch.conv_blocks) - 1, -1, -1):
        b = m.arch.conv_blocks[i]
        in_shape, cols, z, oh, ow = cache[i]
        dz = dx.reshape(dx.shape[0], b.filters, oh * ow) * (
            z > 0.0
        ).astype(np.float32)
        grads[f"conv{i}_b"] = dz.sum(axis=(0, 2))
        dw2 = np.matmul(dz, cols.transpose(0, 2, 1)).sum(axis=0)
        grads[f"conv{i}_w"] = dw2.reshape(m.weights[f"conv{i}_w"].shape)
        w2 = m.weights[f"conv{i}_w"].reshape(b.filters, -1)
        dcols = np.matmul(w2.T, dz)
        dx = _col2im(dcols, in_shape, b.kernel, b.stride, oh, ow)
    return loss, grads


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def train(
    m: ModelParams, d: PixelDataset, cfg: TrainConfig
) -> tuple[ModelParams, dict]:
    """SGD with momentum over the train split; history carries per-epoch
    train loss and val accuracy; the best-val-accuracy weights are returned
    (ties go to the earlier epoch).
    """
    if d.num_classes != m.arch.num_classes:
        raise ShapeError(
            f"dataset has {d.num_classes} classes, model {m.arch.num_classes}"
        )
    if d.image_side != m.arch.input_side:
        raise ShapeError(
            f"dataset images {d.image_side}px, model input {m.arch.input_side}px"
        )
    train_idx = d.split_indices("train")
    val_idx = d.split_indices("val")
    if train_idx.size == 0:
        raise EmptyDataset("train split is empty")
    if val_idx.size == 0:
        raise EmptyDataset("val split is empty")

    x_train = d.images[train_idx]
    y_train = d.labels[train_idx]
    x_val = d.images[val_idx]
    y_val = d.labels[val_idx]

    cur = m.copy()
    velocity = {k: np.zeros_like(v) for k, v in cur.weights.items()}
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    lr = np.float32(cfg.learning_rate)
    mu = np.float32(MOMENTUM)

    history: dict = {"train_loss": [], "val_accuracy": []}
    best_acc = -1.0
    best_weights = {k: v.copy() for k, v in cur.weights.items()}
    best_epoch = -1
    for epoch in range(cfg.epochs):
        order = rng.permutation(train_idx.size)
        losses = []
        for start in range(0, order.size, cfg.batch_size):
            sel = order[start : start + cfg.batch_size]
            loss, grads = backward(cur, (x_train[sel], y_train[sel]))
            losses.append(loss)
            for k in cur.weights:
                velocity[k] = mu * velocity[k] - lr * grads[k]
                cur.weights[k] = cur.weights[k] + velocity[k]
        val_pred = predict_batch(cur, x_val)
        acc = float(np.mean(val_pred == y_val))
        history["train_loss"].append(float(np.mean(losses)))
        history["val_accuracy"].append(acc)
        if acc > best_acc:
            best_acc = acc
            best_weights = {k: v.copy() for k, v in cur.weights.items()}
            best_epoch = epoch
    train_meta = {
        "epochs": cfg.epochs,
        "lr": cfg.learning_rate,
        "best_epoch": best_epoch,
        "final_val_accuracy": best_acc,
    }
    # Carry the window geometry the model was trained on, so deployment can
    # detect a mismatched tiling config instead of silently degrading.
    for key in (
        "interaction_distance",
        "px_per_nm",
        "compression_factor",
        "row_reducer",
        "col_reducer",
        "num_classes",
    ):
        if key in d.meta:
            train_meta[key] = d.meta[key]
    out = ModelParams(
        arch=m.arch,
        weights=best_weights,
        seed=m.seed,
        train_meta=train_meta,
    )
    return out, history


# ---------------------------------------------------------------------------
# Nearest-neighbor baseline
# ---------------------------------------------------------------------------

def knn_predict(train_set: PixelDataset, image: np.ndarray, k: int) -> int:
    """Majority class among the k nearest training images (Euclidean on
    flattened pixels); distance order and vote ties are deterministic.
    """
    if k < 1:
        raise ParamError(f"k must be >= 1, got {k}")
    if len(train_set) == 0:
        raise EmptyDataset("knn_predict needs a nonempty train set")
    q = np.asarray(image, dtype=np.float64).ravel()
    flat = train_set.images.reshape(len(train_set), -1).astype(np.float64)
    if flat.shape[1] != q.size:
        raise ShapeError(f"query size {q.size}, train images {flat.shape[1]}")
    d2 = ((flat - q) ** 2).sum(axis=1)
    nearest = np.argsort(d2, kind="stable")[: min(k, d2.size)]
    votes = np.bincount(
        train_set.labels[nearest], minlength=train_set.num_classes
    )
    return int(np.argmax(votes))


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def save_model(m: ModelParams, path: str | Path) -> None:
    """One JSON header line (arch, seed, tensor manifest, payload digest)
    followed by the raw little-endian float32 tensors in manifest order.
    """
    names = m.tensor_names()
    payload = b"".join(m.weights[n].astype("<f4").tobytes() for n in names)
    header = {
        "format": "pixel-correction-model",
        "version": MODEL_FORMAT_VERSION,
        "arch": m.arch.to_dict(),
        "seed": m.seed,
        "train_meta": m.train_meta,
        "tensors": [[n, list(m.weights[n].shape)] for n in names],
        "payload_sha256": sha256_bytes(payload),
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        f.write(payload)


def load_model(path: str | Path) -> ModelParams:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read model file {path}: {e}") from None
    nl = data.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: missing model header")
    try:
        header = json.loads(data[:nl].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: bad model header: {e}") from None
    if header.get("format") != "pixel-correction-model":
        raise FormatError(f"{path}: not a model file")
    if header.get("version") != MODEL_FORMAT_VERSION:
        raise FormatError(
            f"{path}: model format version {header.get('version')} "
            f"(supported: {MODEL_FORMAT_VERSION})"
        )
    payload = data[nl + 1 :]
    expected = sum(
        int(np.prod(shape)) for _, shape in header["tensors"]
    ) * 4
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, manifest needs {expected}"
        )
    if sha256_bytes(payload) != header["payload_sha256"]:
        raise ChecksumError(f"{path}: payload checksum mismatch")
    weights = {}
    offset = 0
    for name, shape in header["tensors"]:
        count = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        weights[name] = arr.reshape(shape).astype(np.float32)
        offset += count * 4
    return ModelParams(
        arch=ArchDescriptor.from_dict(header["arch"]),
        weights=weights,
        seed=int(header["seed"]),
        train_meta=header.get("train_meta", {}),
    )
