"""Layer forward passes, classifier-head backprop, and the SGD-momentum step.

Convolution, ReLU, and max pooling operate on FeatureMap3 values and are the
frozen feature-extraction layers; only fully-connected heads are trainable.
Geometry is strict: an output side that is not an exact integer raises
InvalidGeometry instead of being floored silently.

conv_forward accumulates each output element in (x, y, c) order starting from
the bias, with one rounding per multiply and per add.  A scalar loop written
in the same order therefore reproduces it bit for bit in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidGeometry, ShapeMismatch
from .tensor import FeatureMap3, Vector1, zero_pad

CROSS_ENTROPY_EPS = 1e-12


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

def conv_output_side(n_in: int, v: int, s: int, p: int) -> int:
    """Output side (n_in + 2p - v + s) / s; raises unless it divides exactly."""
    if v > n_in + 2 * p:
        raise InvalidGeometry(
            f"filter size {v} exceeds padded input {n_in + 2 * p}")
    span = n_in + 2 * p - v + s
    if span % s != 0:
        raise InvalidGeometry(
            f"(N={n_in} + 2p={2 * p} - V={v} + s={s}) is not divisible by s={s}")
    return span // s


def pool_output_side(n_in: int, q: int, s: int) -> int:
    """Output side (n_in - q + s) / s; raises unless it divides exactly."""
    if q > n_in:
        raise InvalidGeometry(f"pooling region {q} exceeds input {n_in}")
    span = n_in - q + s
    if span % s != 0:
        raise InvalidGeometry(
            f"(N={n_in} - Q={q} + s={s}) is not divisible by s={s}")
    return span // s


# ---------------------------------------------------------------------------
# feature-extraction layers
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ConvSpec:
    """Bank of square filters: weights (c_out, v, v, c_in), biases (c_out,)."""

    weights: np.ndarray
    biases: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.biases, dtype=np.float64)
        if w.ndim != 4 or w.shape[1] != w.shape[2]:
            raise ShapeMismatch(f"conv weights must be (c_out, v, v, c_in), got {w.shape}")
        if b.shape != (w.shape[0],):
            raise ShapeMismatch(f"need one bias per filter, got {b.shape}")
        if self.stride < 1 or self.padding < 0:
            raise InvalidGeometry(f"stride {self.stride} / padding {self.padding}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "biases", b)

    @property
    def filter_size(self) -> int:
        return self.weights.shape[1]

    @property
    def c_in(self) -> int:
        return self.weights.shape[3]

    @property
    def c_out(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class PoolSpec:
    size: int
    stride: int

    def __post_init__(self):
        if self.size < 1 or self.stride < 1:
            raise InvalidGeometry(f"pool size {self.size} / stride {self.stride}")


def conv_forward(fm: FeatureMap3, spec: ConvSpec) -> FeatureMap3:
    """Convolve every filter across the zero-padded input.

    out[i][j][k] = b_k + sum over (x, y, c) of padded[s*i+x][s*j+y][c] * w_k[x][y][c]
    """
    if fm.depth != spec.c_in:
        raise ShapeMismatch(
            f"input depth {fm.depth} does not match filter depth {spec.c_in}")
    v, s, p = spec.filter_size, spec.stride, spec.padding
    n_out = conv_output_side(fm.side, v, s, p)
    padded = zero_pad(fm, p).data

    out = np.empty((n_out, n_out, spec.c_out), dtype=np.float64)
    out[:, :, :] = spec.biases
    # Accumulate one (x, y, c) term at a time so every element sees the exact
    # rounding sequence of the defining triple sum.
    for x in range(v):
        for y in range(v):
            for c in range(spec.c_in):
                window = padded[x:x + s * n_out:s, y:y + s * n_out:s, c]
                out += window[:, :, None] * spec.weights[:, x, y, c]
    return FeatureMap3(out)


def relu_forward(fm: FeatureMap3) -> FeatureMap3:
    """Elementwise max(0, x); dimensions unchanged."""
    return FeatureMap3(np.maximum(fm.data, 0.0))


def maxpool_forward(fm: FeatureMap3, spec: PoolSpec) -> FeatureMap3:
    """Per-channel windowed maximum; depth unchanged."""
    q, s = spec.size, spec.stride
    n_out = pool_output_side(fm.side, q, s)
    data = fm.data
    out = data[0:s * n_out:s, 0:s * n_out:s, :].copy()
    for x in range(q):
        for y in range(q):
            if x == 0 and y == 0:
                continue
            np.maximum(out, data[x:x + s * n_out:s, y:y + s * n_out:s, :], out=out)
    return FeatureMap3(out)


# ---------------------------------------------------------------------------
# fully-connected pieces
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class DenseSpec:
    """Affine map y = W x + b with an optional trailing ReLU."""

    weights: np.ndarray  # (out, in)
    biases: np.ndarray   # (out,)
    activation: Optional[str] = None  # "relu" or None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ShapeMismatch(f"dense weights must be 2-D, got {self.weights.shape}")
        if self.biases.shape != (self.weights.shape[0],):
            raise ShapeMismatch(
                f"bias shape {self.biases.shape} vs weights {self.weights.shape}")
        if self.activation not in (None, "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def input_width(self) -> int:
        return self.weights.shape[1]

    @property
    def output_width(self) -> int:
        return self.weights.shape[0]


def dense_forward(x: Vector1, spec: DenseSpec) -> Vector1:
    """y = W x + b, then ReLU when the spec asks for it."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (spec.input_width,):
        raise ShapeMismatch(
            f"input length {x.shape} does not match dense width {spec.input_width}")
    y = spec.weights @ x + spec.biases
    if spec.activation == "relu":
        y = np.maximum(y, 0.0)
    return y


@dataclass(frozen=True)
class DropoutSpec:
    rate: float
    training: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"dropout rate must be in [0, 1], got {self.rate}")


def dropout_apply(
    x: Vector1, spec: DropoutSpec, rng: Optional[np.random.Generator] = None,
) -> tuple[Vector1, np.ndarray]:
    """Inverted dropout: zero with probability rate, scale survivors by 1/(1-rate).

    Inference mode is the identity.  Returns (output, binary keep-mask); the
    mask is what backprop must reuse.  rate 1 in training yields all zeros.
    """
    x = np.asarray(x, dtype=np.float64)
    if not spec.training or spec.rate == 0.0:
        return x.copy(), np.ones_like(x)
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    mask = (rng.random(x.shape) >= spec.rate).astype(np.float64)
    if spec.rate == 1.0:
        return np.zeros_like(x), mask
    return x * mask / (1.0 - spec.rate), mask


def softmax(x: Vector1) -> Vector1:
    """Stable softmax (max subtraction); output sums to 1 and keeps the argmax."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size < 1:
        raise ShapeMismatch("softmax expects a non-empty 1-D vector")
    shifted = x - x.max()
    e = np.exp(shifted)
    return e / e.sum()


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(prob: Vector1, true_class: int) -> float:
    """-ln(prob[true_class] + eps) with a 1e-12 floor against -ln 0."""
    prob = np.asarray(prob, dtype=np.float64)
    assert 0 <= true_class < prob.size, (true_class, prob.size)
    return float(-np.log(prob[true_class] + CROSS_ENTROPY_EPS))


def sgd_momentum_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    velocity: Sequence[np.ndarray],
    lr: float,
    mu: float,
) -> None:
    """Classical momentum, in place: v <- mu*v - lr*g; w <- w + v."""
    if not (len(params) == len(grads) == len(velocity)):
        raise ShapeMismatch("params, grads, velocity must align")
    for w, g, v in zip(params, grads, velocity):
        if w.shape != g.shape or w.shape != v.shape:
            raise ShapeMismatch(f"shape mismatch {w.shape} / {g.shape} / {v.shape}")
        v *= mu
        v -= lr * g
        w += v


# ---------------------------------------------------------------------------
# classifier head: dense stack + softmax + cross-entropy
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HeadConfig:
    """Hidden-layer plan for one classifier head.

    Each hidden layer is dense -> ReLU -> dropout; the output layer is dense
    followed by softmax.  hidden_widths may be empty (a bare softmax layer).
    """

    hidden_widths: tuple[int, ...] = (4096, 4096)
    dropout_rate: float = 0.5


@dataclass
class HeadCache:
    """Per-forward-pass state the backward pass needs."""

    inputs: list[np.ndarray] = field(default_factory=list)   # input to each dense layer
    preacts: list[np.ndarray] = field(default_factory=list)  # pre-activation of each dense layer
    masks: list[Optional[np.ndarray]] = field(default_factory=list)  # dropout keep-masks per hidden
    probs: Optional[np.ndarray] = None


class Head:
    """Fully-connected softmax classifier over a fused feature vector."""

    def __init__(self, layers: list[DenseSpec], dropout_rate: float):
        if not layers:
            raise ShapeMismatch("a head needs at least an output layer")
        self.layers = layers
        self.dropout_rate = float(dropout_rate)

    @classmethod
    def initialize(
        cls, input_width: int, output_width: int, cfg: HeadConfig,
        rng: np.random.Generator,
    ) -> "Head":
        """Zero biases; weights uniform in +-sqrt(6/(fan_in + fan_out))."""
        widths = [input_width, *cfg.hidden_widths, output_width]
        layers = []
        for i in range(len(widths) - 1):
            fan_in, fan_out = widths[i], widths[i + 1]
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            is_hidden = i < len(widths) - 2
            layers.append(DenseSpec(w, np.zeros(fan_out),
                                    activation="relu" if is_hidden else None))
        return cls(layers, cfg.dropout_rate)

    @property
    def input_width(self) -> int:
        return self.layers[0].input_width

    @property
    def output_width(self) -> int:
        return self.layers[-1].output_width

    def parameters(self) -> list[np.ndarray]:
        out = []
        for spec in self.layers:
            out.append(spec.weights)
            out.append(spec.biases)
        return out

    def forward(
        self,
        x: np.ndarray,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
        forced_masks: Optional[list[np.ndarray]] = None,
    ) -> tuple[np.ndarray, HeadCache]:
        """Run a (batch, input_width) matrix through the head.

        Returns row-wise softmax probabilities and the cache for backward().
        forced_masks replays the dropout masks of an earlier pass (used by
        gradient checks); otherwise training mode draws fresh masks from rng.
        """
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.input_width:
            raise ShapeMismatch(
                f"feature width {x.shape[1]} does not match head input {self.input_width}")
        cache = HeadCache()
        a = x
        n_hidden = len(self.layers) - 1
        for i, spec in enumerate(self.layers):
            cache.inputs.append(a)
            z = a @ spec.weights.T + spec.biases
            cache.preacts.append(z)
            if i < n_hidden:
                a = np.maximum(z, 0.0)
                mask = None
                if training and self.dropout_rate > 0.0:
                    if forced_masks is not None:
                        mask = forced_masks[i]
                    else:
                        if rng is None:
                            rng = np.random.default_rng(0)
                        mask = (rng.random(a.shape) >= self.dropout_rate).astype(np.float64)
                    if self.dropout_rate == 1.0:
                        a = np.zeros_like(a)
                    else:
                        a = a * mask / (1.0 - self.dropout_rate)
                cache.masks.append(mask)
            else:
                cache.probs = _softmax_rows(z)
        return cache.probs, cache

    def loss(self, probs: np.ndarray, true_classes: np.ndarray) -> float:
        """Mean cross-entropy over the batch."""
        picked = probs[np.arange(probs.shape[0]), true_classes]
        return float(np.mean(-np.log(picked + CROSS_ENTROPY_EPS)))

    def backward(self, cache: HeadCache, true_classes: np.ndarray) -> list[np.ndarray]:
        """Exact gradients of the mean cross-entropy w.r.t. every W and b.

        Returned list interleaves (dW, db) per layer, matching parameters().
        Dropout masks cached by the forward pass are reused.
        """
        if cache.probs is None:
            raise ShapeMismatch("backward() requires a completed forward pass")
        true_classes = np.asarray(true_classes, dtype=np.int64)
        batch = cache.probs.shape[0]
        delta = cache.probs.copy()
        delta[np.arange(batch), true_classes] -= 1.0
        delta /= batch

        grads: list[np.ndarray] = [np.empty(0)] * (2 * len(self.layers))
        for i in range(len(self.layers) - 1, -1, -1):
            spec = self.layers[i]
            grads[2 * i] = delta.T @ cache.inputs[i]
            grads[2 * i + 1] = delta.sum(axis=0)
            if i == 0:
                break
            delta = delta @ spec.weights
            mask = cache.masks[i - 1]
            if mask is not None:
                if self.dropout_rate == 1.0:
                    delta = np.zeros_like(delta)
                else:
                    delta = delta * mask / (1.0 - self.dropout_rate)
            delta = delta * (cache.preacts[i - 1] > 0.0)
        return grads

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        probs, _ = self.forward(x, training=False)
        return probs
