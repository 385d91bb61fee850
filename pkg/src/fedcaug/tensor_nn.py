"""SimpleCNN with hand-written forward/backward passes.

Architecture: conv(k x k, same padding) -> ReLU -> 2x2 max-pool -> flatten
-> dense(hidden) -> ReLU -> dense(num_classes). The output of the hidden
ReLU is the feature vector used by the alignment term; the last dense layer
is the classifier head shared by the plain and augmented cross-entropy terms.

Tensors are plain numpy arrays. Image batches are N x C x H x W; dense weights
are stored input-major (in_features x out_features) so ``x @ W + b``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PARAM_ORDER = ("conv.weight", "conv.bias", "fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias")

FCAW_MAGIC = b"FCAW"
FCAW_VERSION = 1


class ShapeError(ValueError):
    """Raised when an array does not have the shape an operation expects."""

    def __init__(self, what: str, expected, actual):
        self.what = what
        self.expected = tuple(expected) if expected is not None else None
        self.actual = tuple(actual)
        super().__init__(f"{what}: expected shape {self.expected}, got {self.actual}")


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, layer: str, step: Optional[int], detail: str = ""):
        self.layer = layer
        self.step = step
        msg = f"non-finite gradient in {layer!r} at step {step}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


@dataclass(frozen=True)
class Architecture:
    in_channels: int = 3
    height: int = 28
    width: int = 28
    conv_channels: int = 16
    kernel_size: int = 3
    hidden: int = 64
    num_classes: int = 10

    def __post_init__(self):
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd for same padding")
        if self.height % 2 or self.width % 2:
            raise ValueError("height and width must be even for 2x2 pooling")

    @property
    def input_shape(self) -> tuple:
        return (self.in_channels, self.height, self.width)

    @property
    def flat_dim(self) -> int:
        return self.conv_channels * (self.height // 2) * (self.width // 2)

    @property
    def feature_dim(self) -> int:
        return self.hidden

    def param_shapes(self) -> Dict[str, tuple]:
        k = self.kernel_size
        return {
            "conv.weight": (self.conv_channels, self.in_channels, k, k),
            "conv.bias": (self.conv_channels,),
            "fc1.weight": (self.flat_dim, self.hidden),
            "fc1.bias": (self.hidden,),
            "fc2.weight": (self.hidden, self.num_classes),
            "fc2.bias": (self.num_classes,),
        }

    def fan_in(self, name: str) -> int:
        k = self.kernel_size
        return {
            "conv": self.in_channels * k * k,
            "fc1": self.flat_dim,
            "fc2": self.hidden,
        }[name.split(".")[0]]


@dataclass
class ModelParams:
    arch: Architecture
    tensors: Dict[str, np.ndarray]

    def __post_init__(self):
        expected = self.arch.param_shapes()
        if set(self.tensors) != set(expected):
            raise KeyError(f"parameter names {sorted(self.tensors)} != {sorted(expected)}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ShapeError(name, shape, self.tensors[name].shape)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, {k: v.copy() for k, v in self.tensors.items()})

    def names(self) -> Sequence[str]:
        return PARAM_ORDER

    def num_parameters(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def is_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.tensors.values())

    def equal(self, other: "ModelParams") -> bool:
        return self.arch == other.arch and all(
            np.array_equal(self.tensors[k], other.tensors[k]) for k in PARAM_ORDER
        )


@dataclass
class LossValue:
    """Scalar loss plus gradients keyed like the parameters (or ``"logits"``).

    ``parts`` breaks the objective into its terms (``ce``, ``ca``, ``align``).
    """

    scalar: float
    gradients: Dict[str, np.ndarray]
    parts: Dict[str, float] = field(default_factory=dict)


def init_params(arch: Architecture, seed: int = 0, zero: bool = False) -> ModelParams:
    """Kaiming-uniform (fan-in) weights, zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name in PARAM_ORDER:
        shape = arch.param_shapes()[name]
        if zero or name.endswith("bias"):
            tensors[name] = np.zeros(shape)
        else:
            bound = np.sqrt(6.0 / arch.fan_in(name))
            tensors[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(arch, tensors)


# -- layers -----------------------------------------------------------------

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """x is channels-last (N, H, W, C); rows are (C, ky, kx)-ordered patches."""
    n, h, w, c = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # N, H, W, C, k, k
    return win.reshape(n * h * w, c * k * k)


def _maxpool2(x: np.ndarray):
    """2x2/2 max-pool on (N, H, W, C); the mask marks the first max per window."""
    quads = (x[:, 0::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 0::2], x[:, 1::2, 1::2])
    out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))
    taken = np.zeros(out.shape, dtype=bool)
    masks = []
    for q in quads:
        m = (q == out) & ~taken
        taken |= m
        masks.append(m)
    return out, masks


def _maxpool2_backward(dout: np.ndarray, masks) -> np.ndarray:
    n, hh, wh, c = dout.shape
    dx = np.zeros((n, hh * 2, wh * 2, c), dtype=dout.dtype)
    dx[:, 0::2, 0::2] = dout * masks[0]
    dx[:, 0::2, 1::2] = dout * masks[1]
    dx[:, 1::2, 0::2] = dout * masks[2]
    dx[:, 1::2, 1::2] = dout * masks[3]
    return dx


def _check_batch(params: ModelParams, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    want = params.arch.input_shape
    if batch.ndim != 4 or batch.shape[1:] != want or batch.shape[0] < 1:
        raise ShapeError("batch", ("N",) + want, batch.shape)
    return batch


def _forward(params: ModelParams, batch: np.ndarray):
    """Full forward pass; returns (logits, cache).

    Activations are kept channels-last, so the flattened pooled map is in
    (row, col, channel) order; ``fc1.weight`` rows follow that order.
    """
    arch = params.arch
    x = _check_batch(params, batch).transpose(0, 2, 3, 1)
    n = x.shape[0]
    cols = _im2col(x, arch.kernel_size)
    wc = params["conv.weight"].reshape(arch.conv_channels, -1)
    z1 = (cols @ wc.T + params["conv.bias"]).reshape(n, arch.height, arch.width, arch.conv_channels)
    a1 = np.maximum(z1, 0.0)
    p1, pmask = _maxpool2(a1)
    h = p1.reshape(n, -1)
    z2 = h @ params["fc1.weight"] + params["fc1.bias"]
    f = np.maximum(z2, 0.0)
    logits = f @ params["fc2.weight"] + params["fc2.bias"]
    cache = dict(cols=cols, z1=z1, pmask=pmask, h=h, z2=z2, f=f)
    return logits, cache


def forward_features(params: ModelParams, batch: np.ndarray) -> np.ndarray:
    """Penultimate (post-ReLU hidden) features, shape N x hidden."""
    _, cache = _forward(params, batch)
    return cache["f"]


def forward_logits(params: ModelParams, features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    d = params.arch.feature_dim
    if features.ndim != 2 or features.shape[1] != d:
        raise ShapeError("features", ("N", d), features.shape)
    return features @ params["fc2.weight"] + params["fc2.bias"]


def predict_logits(params: ModelParams, batch: np.ndarray, chunk: int = 512) -> np.ndarray:
    batch = np.asarray(batch)
    out = [_forward(params, batch[i:i + chunk])[0] for i in range(0, len(batch), chunk)]
    return np.concatenate(out, axis=0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels) -> LossValue:
    """Mean softmax cross-entropy; gradient is w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise ShapeError("logits", ("N", "C"), logits.shape)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError("labels", (n,), labels.shape)
    bad = (labels < 0) | (labels >= c)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise ValueError(f"label {int(labels[i])} at index {i} outside [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    logp = z[np.arange(n), labels] - logsumexp
    scalar = float(-logp.mean())
    grad = np.exp(z - logsumexp[:, None])
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return LossValue(max(scalar, 0.0), {"logits": grad})


def _backprop(params: ModelParams, cache, dlogits: np.ndarray, dfeat: Optional[np.ndarray]):
    arch = params.arch
    f, z2, h = cache["f"], cache["z2"], cache["h"]
    n = f.shape[0]
    grads = {}
    grads["fc2.weight"] = f.T @ dlogits
    grads["fc2.bias"] = dlogits.sum(axis=0)
    df = dlogits @ params["fc2.weight"].T
    if dfeat is not None:
        df = df + dfeat
    dz2 = df * (z2 > 0)
    grads["fc1.weight"] = h.T @ dz2
    grads["fc1.bias"] = dz2.sum(axis=0)
    dh = dz2 @ params["fc1.weight"].T
    dp1 = dh.reshape(n, arch.height // 2, arch.width // 2, arch.conv_channels)
    da1 = _maxpool2_backward(dp1, cache["pmask"])
    dz1 = (da1 * (cache["z1"] > 0)).reshape(-1, arch.conv_channels)
    grads["conv.weight"] = (dz1.T @ cache["cols"]).reshape(arch.param_shapes()["conv.weight"])
    grads["conv.bias"] = dz1.sum(axis=0)
    return grads


def backward(
    params: ModelParams,
    batch: np.ndarray,
    labels,
    aug_batch: Optional[np.ndarray] = None,
    aug_labels=None,
    align_weight: float = 0.0,
    step: Optional[int] = None,
) -> LossValue:
    """Loss and parameter gradients of CE(batch) [+ CE(aug_batch) + align].

    The alignment term is ``align_weight * mean((f_I - f_CA)**2)`` over all
    N x D feature entries; it backpropagates into both branches. Without
    ``aug_batch`` only the plain cross-entropy is computed.
    """
    if align_weight < 0:
        raise ValueError("align_weight must be >= 0")
    labels = np.asarray(labels, dtype=np.int64)
    batch = _check_batch(params, batch)
    n = batch.shape[0]
    if aug_batch is None:
        logits, cache = _forward(params, batch)
        ce = cross_entropy(logits, labels)
        grads = _backprop(params, cache, ce.gradients["logits"], None)
        parts = {"ce": ce.scalar, "ca": 0.0, "align": 0.0}
        return _finish(ce.scalar, grads, parts, step)

    aug_batch = _check_batch(params, aug_batch)
    if aug_batch.shape != batch.shape:
        raise ShapeError("aug_batch", batch.shape, aug_batch.shape)
    aug_labels = labels if aug_labels is None else np.asarray(aug_labels, dtype=np.int64)
    logits, cache = _forward(params, np.concatenate([batch, aug_batch]))
    ce = cross_entropy(logits[:n], labels)
    ca = cross_entropy(logits[n:], aug_labels)
    dlogits = np.concatenate([ce.gradients["logits"], ca.gradients["logits"]])

    dfeat = None
    align = 0.0
    if align_weight > 0:
        diff = cache["f"][:n] - cache["f"][n:]
        align = float(align_weight * np.mean(diff ** 2))
        g = (2.0 * align_weight / diff.size) * diff
        dfeat = np.concatenate([g, -g])
    grads = _backprop(params, cache, dlogits, dfeat)
    parts = {"ce": ce.scalar, "ca": ca.scalar, "align": align}
    return _finish(ce.scalar + ca.scalar + align, grads, parts, step)


def _finish(scalar, grads, parts, step) -> LossValue:
    for name in PARAM_ORDER:
        g = grads[name]
        if not np.isfinite(g).all():
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise NonFiniteGradientError(name, step, f"{bad} of {g.size} entries")
    return LossValue(float(scalar), grads, parts)


def sgd_step(params: ModelParams, grads: Dict[str, np.ndarray], lr: float, weight_decay: float = 0.0) -> ModelParams:
    """p <- p - lr * (g + weight_decay * p) for every tensor; returns a new ModelParams."""
    if lr < 0 or weight_decay < 0:
        raise ValueError("lr and weight_decay must be non-negative")
    out = {}
    for name in PARAM_ORDER:
        p = params[name]
        g = np.asarray(grads[name])
        if g.shape != p.shape:
            raise ShapeError(f"grad {name}", p.shape, g.shape)
        out[name] = p - lr * (g + weight_decay * p)
    return ModelParams(params.arch, out)


# -- FCAW binary format -----------------------------------------------------

def params_to_bytes(params: ModelParams) -> bytes:
    chunks = [FCAW_MAGIC, struct.pack("<II", FCAW_VERSION, len(PARAM_ORDER))]
    for name in PARAM_ORDER:
        t = params[name]
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", t.ndim))
        chunks.append(struct.pack(f"<{t.ndim}I", *t.shape))
        chunks.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    return b"".join(chunks)


def tensors_from_bytes(data: bytes) -> Dict[str, np.ndarray]:
    """Parse an FCAW blob into a name -> float64 array map."""
    if data[:4] != FCAW_MAGIC:
        raise ValueError(f"bad magic {data[:4]!r} at offset 0, expected {FCAW_MAGIC!r}")
    pos = 4

    def take(nbytes: int) -> bytes:
        nonlocal pos
        if pos + nbytes > len(data):
            raise ValueError(f"truncated FCAW blob at offset {pos}: need {nbytes} bytes")
        chunk = data[pos:pos + nbytes]
        pos += nbytes
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != FCAW_VERSION:
        raise ValueError(f"unsupported FCAW version {version}")
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(4 * size), dtype="<f4").astype(np.float64)
        out[name] = arr.reshape(dims)
    if pos != len(data):
        raise ValueError(f"trailing bytes after offset {pos}")
    return out


def params_from_bytes(data: bytes, arch: Optional[Architecture] = None) -> ModelParams:
    tensors = tensors_from_bytes(data)
    if arch is None:
        arch = _infer_arch(tensors)
    return ModelParams(arch, tensors)


def _infer_arch(tensors: Dict[str, np.ndarray]) -> Architecture:
    # input assumed square: fc1 fan-in only fixes H*W
    cout, cin, k, _ = tensors["conv.weight"].shape
    flat, hidden = tensors["fc1.weight"].shape
    side = int(round(np.sqrt(flat // cout))) * 2
    return Architecture(in_channels=cin, height=side, width=side, conv_channels=cout,
                        kernel_size=k, hidden=hidden, num_classes=tensors["fc2.weight"].shape[1])


def save_params(path, params: ModelParams) -> None:
    Path(path).write_bytes(params_to_bytes(params))


def load_params(path, arch: Optional[Architecture] = None) -> ModelParams:
    return params_from_bytes(Path(path).read_bytes(), arch)
