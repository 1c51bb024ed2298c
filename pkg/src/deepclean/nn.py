"""Small numpy layer kernel with hand-written reverse-mode passes.

Activations are batch-first, channels-last arrays: ``[batch, length, channels]``
for the 1-D layers and ``[batch, units]`` for dense layers.  Every layer caches
what its backward pass needs during ``forward`` and writes parameter gradients
into ``self.grads`` on ``backward``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class ShapeError(ValueError):
    pass


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------------------
# functional kernels


def _same_pad(kernel: int) -> tuple[int, int]:
    left = (kernel - 1) // 2
    return left, kernel - 1 - left


def _padded_rows(x: np.ndarray, kernel: int) -> np.ndarray:
    """Stack 'same'-padded batch elements end to end: ``[batch * (length + kernel - 1), ch]``.

    Tap ``j`` of the convolution is then the contiguous row block ``[j, j + n)``;
    rows that straddle two batch elements are computed and discarded.
    """
    batch, length, ch = x.shape
    left, _ = _same_pad(kernel)
    xp = np.zeros((batch, length + kernel - 1, ch))
    xp[:, left:left + length] = x
    return xp.reshape(-1, ch)


_NARROW = 32


def _shift_stack(rows: np.ndarray, kernel: int, n: int) -> np.ndarray:
    """``[n, kernel * ch]`` whose column block ``j`` is ``rows[j:j + n]``."""
    ch = rows.shape[1]
    out = np.empty((n, kernel, ch))
    for j in range(kernel):
        out[:, j, :] = rows[j:j + n]
    return out.reshape(n, kernel * ch)


def conv1d_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray, rows: np.ndarray | None = None) -> np.ndarray:
    """'Same'-padded cross-correlation.

    x is ``[length, in_ch]`` or ``[batch, length, in_ch]``; weights are
    ``[kernel, in_ch, out_ch]``.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if x.ndim != 3 or weights.ndim != 3 or x.shape[2] != weights.shape[1] or bias.shape != (weights.shape[2],):
        raise ShapeError(f"conv1d: input {x.shape}, weights {weights.shape}, bias {bias.shape}")
    k, cin, cout = weights.shape
    batch, length, _ = x.shape
    if rows is None:
        rows = _padded_rows(x, k)
    n = rows.shape[0] - (k - 1)
    full = np.empty((rows.shape[0], cout))
    full[n:] = 0.0
    acc = full[:n]
    if k * cin <= _NARROW:
        np.matmul(_shift_stack(rows, k, n), weights.reshape(k * cin, cout), out=acc)
    else:
        np.matmul(rows[0:n], weights[0], out=acc)
        for j in range(1, k):
            acc += rows[j:j + n] @ weights[j]
    out = full.reshape(batch, length + k - 1, cout)[:, :length]
    out += bias
    return out[0] if squeeze else out


def conv1d_backward(x: np.ndarray, weights: np.ndarray, grad_out: np.ndarray, rows: np.ndarray | None = None,
                    input_grad: bool = True):
    """Return (grad_x, grad_weights, grad_bias) for a batched conv1d (grad_x None if not requested)."""
    k, cin, cout = weights.shape
    batch, length, _ = x.shape
    left, _ = _same_pad(k)
    if rows is None:
        rows = _padded_rows(x, k)
    total = rows.shape[0]
    n = total - (k - 1)
    gfull = np.zeros((total, cout))
    gfull.reshape(batch, length + k - 1, cout)[:, :length] = grad_out
    g = gfull[:n]
    if k * cin <= _NARROW:
        gw = (_shift_stack(rows, k, n).T @ g).reshape(k, cin, cout)
    else:
        gw = np.empty_like(weights)
        for j in range(k):
            gw[j] = rows[j:j + n].T @ g
    gb = grad_out.reshape(-1, cout).sum(axis=0)
    if not input_grad:
        return None, gw, gb
    if k * cout <= _NARROW:
        # row r receives g[r - j] @ w[j].T; stack the shifted gradients and do one GEMM
        gpad = np.zeros((total + k - 1, cout))
        gpad[k - 1:k - 1 + n] = g
        shifted = _shift_stack(gpad[::-1], k, total)[::-1]
        grows = shifted @ weights.transpose(0, 2, 1).reshape(k * cout, cin)
    else:
        grows = np.zeros_like(rows)
        for j in range(k):
            grows[j:j + n] += g @ weights[j].T
    gx = grows.reshape(batch, length + k - 1, cin)[:, left:left + length]
    return gx, gw, gb


def maxpool1d(x: np.ndarray, pool_size: int, return_index: bool = False):
    """Non-overlapping max pool with output length ceil(length / pool_size)."""
    if pool_size < 1:
        raise ShapeError("pool_size must be >= 1")
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :, None]
    elif x.ndim == 2:
        x = x[None]
    batch, length, ch = x.shape
    out_len = -(-length // pool_size)
    if out_len * pool_size == length:
        blocks = x.reshape(batch, out_len, pool_size, ch)
    else:
        padded = np.full((batch, out_len * pool_size, ch), -np.inf)
        padded[:, :length] = x
        blocks = padded.reshape(batch, out_len, pool_size, ch)
    out = blocks[:, :, 0, :]
    idx = np.zeros(out.shape, dtype=np.intp)
    for j in range(1, pool_size):
        cand = blocks[:, :, j, :]
        better = cand > out  # strict: the first index wins ties
        idx = np.where(better, j, idx)
        out = np.where(better, cand, out)
    if squeeze:
        out = out[0, :, 0]
    if return_index:
        return out, idx
    return out


def upsample1d_crop(x: np.ndarray, factor: int, target_length: int) -> np.ndarray:
    """Repeat each step ``factor`` times along the length axis, then truncate."""
    axis = 0 if x.ndim == 1 else (1 if x.ndim == 3 else 0)
    if target_length > factor * x.shape[axis]:
        raise ShapeError(f"target length {target_length} exceeds {factor} x {x.shape[axis]}")
    up = np.repeat(x, factor, axis=axis)
    return up[:target_length] if axis == 0 else up[:, :target_length]


def dense_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if x.shape[-1] != weights.shape[0] or bias.shape != (weights.shape[1],):
        raise ShapeError(f"dense: input {x.shape}, weights {weights.shape}, bias {bias.shape}")
    return x @ weights + bias


def dropout(x: np.ndarray, rate: float, training: bool, seed=None) -> np.ndarray:
    """Inverted dropout; identity outside training mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    if not training or rate == 0.0:
        return x
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    keep = rng.random(x.shape) >= rate
    return np.where(keep, x / (1.0 - rate), 0.0)


# ---------------------------------------------------------------------------
# layer objects


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: int = 0
    kernel_size: int = 0
    pool_size: int = 0
    units: int = 0
    rate: float = 0.0
    target_shape: tuple[int, ...] = ()
    activation: str = "linear"

    def __post_init__(self):
        kinds = {"conv1d", "maxpool1d", "upsample1d_crop", "dense", "dropout", "relu", "reshape"}
        if self.kind not in kinds:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv1d" and (self.filters < 1 or self.kernel_size < 1):
            raise ValueError("conv1d needs positive filters and kernel_size")
        if self.kind in ("maxpool1d", "upsample1d_crop") and self.pool_size < 1:
            raise ValueError("pool_size must be positive")
        if self.kind == "dense" and self.units < 1:
            raise ValueError("dense needs positive units")
        if self.kind == "dropout" and not 0.0 <= self.rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")


class Layer:
    """Base layer: no parameters, identity pattern signature."""

    params: dict[str, np.ndarray]
    grads: dict[str, np.ndarray]

    def __init__(self):
        self.params = {}
        self.grads = {}

    def forward(self, x: np.ndarray, training: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def pattern(self) -> bytes:
        """Bytes identifying the branch taken at non-smooth points (for grad checks)."""
        return b""


class Conv1D(Layer):
    def __init__(self, in_ch: int, filters: int, kernel_size: int, activation: str = "linear"):
        super().__init__()
        self.params = {
            "w": np.zeros((kernel_size, in_ch, filters)),
            "b": np.zeros(filters),
        }
        self.activation = activation
        self.input_grad = True
        self._x = None
        self._mask = None

    def init(self, rng):
        k, cin, cout = self.params["w"].shape
        self.params["w"] = glorot_uniform(rng, (k, cin, cout), k * cin, k * cout)
        self.params["b"] = np.zeros(cout)

    def forward(self, x, training=False, rng=None):
        self._x = x
        self._rows = _padded_rows(x, self.params["w"].shape[0])
        out = conv1d_forward(x, self.params["w"], self.params["b"], rows=self._rows)
        if self.activation == "relu":
            self._mask = out > 0
            out = out * self._mask
        return out

    def backward(self, grad):
        if self.activation == "relu":
            grad = grad * self._mask
        gx, gw, gb = conv1d_backward(self._x, self.params["w"], grad, rows=self._rows,
                                     input_grad=self.input_grad)
        self.grads = {"w": gw, "b": gb}
        return gx

    def pattern(self):
        return np.packbits(self._mask).tobytes() if self._mask is not None else b""


class Dense(Layer):
    def __init__(self, n_in: int, units: int, activation: str = "linear"):
        super().__init__()
        self.params = {"w": np.zeros((n_in, units)), "b": np.zeros(units)}
        self.activation = activation
        self._x = None
        self._mask = None

    def init(self, rng):
        n, m = self.params["w"].shape
        self.params["w"] = glorot_uniform(rng, (n, m), n, m)
        self.params["b"] = np.zeros(m)

    def forward(self, x, training=False, rng=None):
        self._x = x
        out = dense_forward(x, self.params["w"], self.params["b"])
        if self.activation == "relu":
            self._mask = out > 0
            out = out * self._mask
        return out

    def backward(self, grad):
        if self.activation == "relu":
            grad = grad * self._mask
        self.grads = {"w": self._x.T @ grad, "b": grad.sum(axis=0)}
        return grad @ self.params["w"].T

    def pattern(self):
        return np.packbits(self._mask).tobytes() if self._mask is not None else b""


class MaxPool1D(Layer):
    def __init__(self, pool_size: int):
        super().__init__()
        self.pool_size = pool_size
        self._idx = None
        self._shape = None

    def forward(self, x, training=False, rng=None):
        self._shape = x.shape
        out, self._idx = maxpool1d(x, self.pool_size, return_index=True)
        return out

    def backward(self, grad):
        batch, length, ch = self._shape
        out_len = grad.shape[1]
        blocks = np.zeros((batch, out_len, self.pool_size, ch))
        np.put_along_axis(blocks, self._idx[:, :, None, :], grad[:, :, None, :], axis=2)
        return blocks.reshape(batch, out_len * self.pool_size, ch)[:, :length]

    def pattern(self):
        return self._idx.astype(np.int8).tobytes() if self._idx is not None else b""


class Upsample1DCrop(Layer):
    def __init__(self, factor: int, target_length: int):
        super().__init__()
        self.factor = factor
        self.target_length = target_length
        self._in_len = None

    def forward(self, x, training=False, rng=None):
        self._in_len = x.shape[1]
        return upsample1d_crop(x, self.factor, self.target_length)

    def backward(self, grad):
        batch, _, ch = grad.shape
        full = np.zeros((batch, self._in_len * self.factor, ch))
        full[:, :self.target_length] = grad
        return full.reshape(batch, self._in_len, self.factor, ch).sum(axis=2)


class Dropout(Layer):
    def __init__(self, rate: float):
        super().__init__()
        self.rate = rate
        self._scale = None

    def forward(self, x, training=False, rng=None):
        if not training or self.rate == 0.0:
            self._scale = None
            return x
        if rng is None:
            raise ValueError("training-mode dropout needs a generator")
        keep = rng.random(x.shape) >= self.rate
        self._scale = keep / (1.0 - self.rate)
        return x * self._scale

    def backward(self, grad):
        return grad if self._scale is None else grad * self._scale


class Reshape(Layer):
    def __init__(self, target_shape: tuple[int, ...]):
        super().__init__()
        self.target_shape = tuple(target_shape)
        self._in_shape = None

    def forward(self, x, training=False, rng=None):
        self._in_shape = x.shape
        return x.reshape((x.shape[0],) + self.target_shape)

    def backward(self, grad):
        return grad.reshape(self._in_shape)


class ReLU(Layer):
    def __init__(self):
        super().__init__()
        self._mask = None

    def forward(self, x, training=False, rng=None):
        self._mask = x > 0
        return x * self._mask

    def backward(self, grad):
        return grad * self._mask

    def pattern(self):
        return np.packbits(self._mask).tobytes() if self._mask is not None else b""


class Sequential:
    """An ordered stack of layers with named parameters ``"<index>.<name>"``."""

    def __init__(self, layers: list[Layer]):
        self.layers = layers

    def init(self, rng: np.random.Generator) -> None:
        for layer in self.layers:
            if hasattr(layer, "init"):
                layer.init(rng)

    def forward(self, x, training=False, rng=None):
        for layer in self.layers:
            x = layer.forward(x, training=training, rng=rng)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
            if grad is None:
                break
        return grad

    def named_params(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.params.items()}

    def named_grads(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.grads.items()}

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        for name, value in params.items():
            i, k = name.split(".", 1)
            layer = self.layers[int(i)]
            if layer.params[k].shape != value.shape:
                raise ShapeError(f"{name}: expected {layer.params[k].shape}, got {value.shape}")
            layer.params[k] = value

    def pattern(self) -> bytes:
        return b"|".join(layer.pattern() for layer in self.layers)

    def parameter_count(self) -> int:
        return sum(v.size for v in self.named_params().values())


def build_layer(spec: LayerSpec, in_shape: tuple[int, ...]) -> tuple[Layer, tuple[int, ...]]:
    """Instantiate ``spec`` for per-sample input shape ``in_shape``; return layer and output shape."""
    if spec.kind == "conv1d":
        length, ch = in_shape
        return Conv1D(ch, spec.filters, spec.kernel_size, spec.activation), (length, spec.filters)
    if spec.kind == "maxpool1d":
        length, ch = in_shape
        return MaxPool1D(spec.pool_size), (-(-length // spec.pool_size), ch)
    if spec.kind == "upsample1d_crop":
        length, ch = in_shape
        target = spec.target_shape[0]
        if target > length * spec.pool_size:
            raise ShapeError(f"cannot crop {length}x{spec.pool_size} up to {target}")
        return Upsample1DCrop(spec.pool_size, target), (target, ch)
    if spec.kind == "dense":
        (n,) = in_shape
        return Dense(n, spec.units, spec.activation), (spec.units,)
    if spec.kind == "dropout":
        return Dropout(spec.rate), in_shape
    if spec.kind == "relu":
        return ReLU(), in_shape
    if spec.kind == "reshape":
        if math.prod(spec.target_shape) != math.prod(in_shape):
            raise ShapeError(f"cannot reshape {in_shape} to {spec.target_shape}")
        return Reshape(spec.target_shape), tuple(spec.target_shape)
    raise ValueError(spec.kind)


def build_sequential(specs: list[LayerSpec], in_shape: tuple[int, ...]) -> tuple[Sequential, tuple[int, ...]]:
    layers = []
    shape = tuple(in_shape)
    for spec in specs:
        layer, shape = build_layer(spec, shape)
        layers.append(layer)
    return Sequential(layers), shape


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState):
    """One bias-corrected Adam update.  Returns new params and the (mutated) state."""
    state.step += 1
    t = state.step
    new = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: grad {g.shape} vs param {p.shape}")
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        new[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return new, state


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: str
    checked: int
    skipped: int
    failures: list[tuple[str, float]]
    tolerance: float

    @property
    def passed(self) -> bool:
        return not self.failures and self.checked > 0

    @classmethod
    def merge(cls, *reports: "GradCheckReport") -> "GradCheckReport":
        worst = max(reports, key=lambda r: r.max_rel_error)
        return cls(worst.max_rel_error, worst.worst, sum(r.checked for r in reports),
                   sum(r.skipped for r in reports), [f for r in reports for f in r.failures],
                   max(r.tolerance for r in reports))


def grad_check(
    loss_fn: Callable[[], float | np.ndarray],
    params: dict[str, np.ndarray],
    analytic: dict[str, np.ndarray],
    tolerance: float = 1e-4,
    h: float = 1e-4,
    pattern: Callable[[], bytes] | None = None,
    floor: float = 1e-6,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients with central differences, coordinate by coordinate.

    ``loss_fn`` evaluates the scalar loss at the *current* contents of ``params``
    (arrays are perturbed in place and restored).  It may instead return an
    array of additive loss terms; the difference is then taken term by term
    before summing, which keeps roundoff at the scale of one term rather than
    of the whole loss.  When ``pattern`` is given it
    is called after every evaluation; coordinates whose +h or -h evaluation takes
    a different branch at a max-pool tie or ReLU kink are skipped, not failed.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    loss_fn()
    base_pattern = pattern() if pattern else None
    coords = [(name, i) for name, p in params.items() for i in range(p.size)]
    if max_coords is not None and len(coords) > max_coords:
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[j] for j in sorted(pick)]
    worst, worst_name = 0.0, ""
    failures = []
    checked = skipped = 0
    for name, i in coords:
        flat = params[name].reshape(-1)
        old = flat[i]
        flat[i] = old + h
        f_plus = loss_fn()
        pat_plus = pattern() if pattern else None
        flat[i] = old - h
        f_minus = loss_fn()
        pat_minus = pattern() if pattern else None
        flat[i] = old
        if pattern and (pat_plus != base_pattern or pat_minus != base_pattern):
            skipped += 1
            continue
        numeric = float(np.sum(np.subtract(f_plus, f_minus))) / (2.0 * h)
        a = analytic[name].reshape(-1)[i]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        checked += 1
        if rel > worst:
            worst, worst_name = rel, f"{name}[{i}]"
        if rel > tolerance:
            failures.append((f"{name}[{i}]", rel))
    return GradCheckReport(worst, worst_name, checked, skipped, failures, tolerance)
