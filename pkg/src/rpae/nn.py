"""Small differentiable building blocks on dense (N, C, H, W) numpy arrays.

Every op is a pair of plain functions: a forward that returns the output and
a cache, and a backward that consumes the upstream gradient and that cache.
Ops compute in whatever float dtype they are handed, so the same code runs
float32 for training and float64 for gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


@dataclass
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int,
                   dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def _check_4d(x, name):
    if x.ndim != 4:
        raise ValueError(f"{name} must be 4-D (n, c, h, w), got shape {x.shape}")


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _windows(xp, kh, kw, stride):
    # (N, C, Ho, Wo, kh, kw) strided view, no copy
    v = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return v[:, :, ::stride, ::stride]


def _scatter_windows(cols, out_shape, stride):
    """Adjoint of ``_windows``: add (N, C, Ho, Wo, kh, kw) patches into an array."""
    n, c, ho, wo, kh, kw = cols.shape
    out = np.zeros(out_shape, dtype=cols.dtype)
    for a in range(kh):
        for b in range(kw):
            out[:, :, a:a + stride * (ho - 1) + 1:stride,
                b:b + stride * (wo - 1) + 1:stride] += cols[:, :, :, :, a, b]
    return out


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int = 1,
           pad: int = 0):
    """Cross-correlation of ``x`` (N, C, H, W) with ``weight`` (F, C, kh, kw).

    Returns ``(out, cache)``; ``out`` has spatial size
    ``(H + 2 * pad - kh) // stride + 1`` (same for width).
    """
    _check_4d(x, "input")
    if weight.ndim != 4 or weight.shape[1] != x.shape[1]:
        raise ValueError(
            f"conv2d shape mismatch: input {x.shape} vs weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ValueError(
            f"conv2d shape mismatch: bias {bias.shape} vs weight {weight.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"bad stride/pad: {stride}/{pad}")
    kh, kw = weight.shape[2:]
    xp = _pad(x, pad)
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ValueError(
            f"conv2d shape mismatch: input {x.shape} too small for weight {weight.shape}")
    win = _windows(xp, kh, kw, stride)
    out = np.tensordot(win, weight, axes=([1, 4, 5], [1, 2, 3]))
    out = out.transpose(0, 3, 1, 2) + bias[None, :, None, None]
    return np.ascontiguousarray(out), (x.shape, xp.shape, win, weight, stride, pad)


def conv2d_backward(dout: np.ndarray, cache):
    """Returns ``(dx, dweight, dbias)``."""
    x_shape, xp_shape, win, weight, stride, pad = cache
    dw = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))
    db = dout.sum(axis=(0, 2, 3))
    dcols = np.tensordot(dout, weight, axes=([1], [0]))  # N, Ho, Wo, C, kh, kw
    dxp = _scatter_windows(dcols.transpose(0, 3, 1, 2, 4, 5), xp_shape, stride)
    h, w = x_shape[2:]
    dx = dxp[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(dx), dw, db


def conv_transpose2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray,
                     stride: int = 1, pad: int = 0):
    """Transposed convolution; ``weight`` is (C_in, C_out, kh, kw).

    Output spatial size is ``(H - 1) * stride + kh - 2 * pad``, the inverse of
    the conv2d size formula.
    """
    _check_4d(x, "input")
    if weight.ndim != 4 or weight.shape[0] != x.shape[1]:
        raise ValueError(
            f"conv_transpose2d shape mismatch: input {x.shape} vs weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ValueError(
            f"conv_transpose2d shape mismatch: bias {bias.shape} vs weight {weight.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"bad stride/pad: {stride}/{pad}")
    n, _, h, w = x.shape
    cout, kh, kw = weight.shape[1:]
    hp, wp = (h - 1) * stride + kh, (w - 1) * stride + kw
    if hp - 2 * pad < 1 or wp - 2 * pad < 1:
        raise ValueError(f"conv_transpose2d: padding {pad} too large for input {x.shape}")
    cols = np.tensordot(x, weight, axes=([1], [0]))  # N, H, W, Cout, kh, kw
    outp = _scatter_windows(cols.transpose(0, 3, 1, 2, 4, 5), (n, cout, hp, wp), stride)
    out = outp[:, :, pad:hp - pad, pad:wp - pad] + bias[None, :, None, None]
    return np.ascontiguousarray(out), (x, weight, stride, pad)


def conv_transpose2d_backward(dout: np.ndarray, cache):
    """Returns ``(dx, dweight, dbias)``."""
    x, weight, stride, pad = cache
    kh, kw = weight.shape[2:]
    win = _windows(_pad(dout, pad), kh, kw, stride)  # N, Cout, H, W, kh, kw
    dx = np.tensordot(win, weight, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    dw = np.tensordot(x, win, axes=([0, 2, 3], [0, 2, 3]))
    db = dout.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(dx), dw, db


# ---------------------------------------------------------------------------
# pointwise, pooling, softmax
# ---------------------------------------------------------------------------

def sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def pointwise(x: np.ndarray, kind: str):
    """Elementwise ``relu`` or ``sigmoid``. Returns ``(out, cache)``."""
    if kind == "relu":
        out = np.maximum(x, 0)
    elif kind == "sigmoid":
        out = sigmoid(x)
    else:
        raise ValueError(f"unknown pointwise kind {kind!r}")
    return out, (kind, x, out)


def pointwise_backward(dout, cache):
    kind, x, out = cache
    if kind == "relu":
        return dout * (x > 0)
    return dout * out * (1 - out)


def max_pool2d(x: np.ndarray, k: int, stride: int):
    _check_4d(x, "input")
    win = _windows(x, k, k, stride)
    n, c, ho, wo = win.shape[:4]
    flat = win.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, arg, k, stride)


def max_pool2d_backward(dout, cache):
    shape, arg, k, stride = cache
    ho, wo = arg.shape[2:]
    dx = np.zeros(shape, dtype=dout.dtype)
    for a in range(k):
        for b in range(k):
            hit = arg == a * k + b
            dx[:, :, a:a + stride * (ho - 1) + 1:stride,
               b:b + stride * (wo - 1) + 1:stride] += dout * hit
    return dx


def softmax_channels(x: np.ndarray) -> np.ndarray:
    """Softmax over axis 1 at every (n, h, w) location."""
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_channels_backward(dout, out):
    return out * (dout - (dout * out).sum(axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# losses: each returns a python float accumulated in float64
# ---------------------------------------------------------------------------

def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def mse(pred, target) -> float:
    _same_shape(pred, target, "mse")
    d = pred.astype(np.float64) - target
    return float(np.mean(d * d))


def mse_backward(pred, target):
    _same_shape(pred, target, "mse")
    return (2.0 / pred.size * (pred.astype(np.float64) - target)).astype(pred.dtype)


BCE_EPS = 1e-7


def bce(prob, target) -> float:
    _same_shape(prob, target, "bce")
    p = np.clip(prob.astype(np.float64), BCE_EPS, 1 - BCE_EPS)
    return float(-np.mean(target * np.log(p) + (1 - target) * np.log(1 - p)))


def bce_backward(prob, target):
    _same_shape(prob, target, "bce")
    p = np.clip(prob.astype(np.float64), BCE_EPS, 1 - BCE_EPS)
    return ((p - target) / (p * (1 - p)) / prob.size).astype(prob.dtype)


def smooth_l1(pred, target, beta: float = 1.0) -> float:
    _same_shape(pred, target, "smooth_l1")
    d = np.abs(pred.astype(np.float64) - target)
    return float(np.mean(np.where(d < beta, 0.5 * d * d / beta, d - 0.5 * beta)))


def smooth_l1_backward(pred, target, beta: float = 1.0):
    _same_shape(pred, target, "smooth_l1")
    d = pred.astype(np.float64) - target
    g = np.where(np.abs(d) < beta, d / beta, np.sign(d))
    return (g / pred.size).astype(pred.dtype)


def cross_entropy(logits, classes) -> float:
    """Mean negative log-likelihood of ``classes`` (M,) under row-softmax of ``logits`` (M, K)."""
    classes = np.asarray(classes)
    if logits.ndim != 2 or classes.shape != (logits.shape[0],):
        raise ValueError(
            f"cross_entropy: shape mismatch {logits.shape} vs {classes.shape}")
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-np.mean(logp[np.arange(len(classes)), classes]))


def cross_entropy_backward(logits, classes):
    classes = np.asarray(classes)
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(len(classes)), classes] -= 1
    return (p / len(classes)).astype(logits.dtype)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Bias-corrected moment-based update. ``step`` zeroes the gradients it consumed."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.value) for p in self.params}
        self.v = {p.name: np.zeros_like(p.value) for p in self.params}

    def step(self):
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p in self.params:
            m, v = self.m[p.name], self.v[p.name]
            m *= self.beta1
            m += (1 - self.beta1) * p.grad
            v *= self.beta2
            v += (1 - self.beta2) * p.grad * p.grad
            p.value -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.value.dtype)
            p.zero_grad()


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)


def finite_diff_check(loss_fn, arrays, grads, tolerance=1e-3, step=1e-3,
                      n_coords=50, seed=0, floor=1e-6, name="check",
                      kink_step=None) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``loss_fn()`` must return a scalar computed from ``arrays``, which are
    perturbed in place. ``grads`` are the analytic gradients aligned with
    ``arrays``. ``n_coords`` coordinates are drawn at random over all arrays
    (every coordinate when there are fewer). The relative error of one
    coordinate is ``|a - n| / max(|a|, |n|, floor)``.

    With ``kink_step``, a failing coordinate whose two one-sided slopes
    disagree (a relu or max switch inside the step) is re-measured with that
    smaller step. Smooth coordinates are never re-measured.
    """
    rng = np.random.default_rng(seed)
    sizes = [a.size for a in arrays]
    total = sum(sizes)
    if total <= n_coords:
        picks = np.arange(total)
    else:
        picks = np.sort(rng.choice(total, size=n_coords, replace=False))
    offsets = np.cumsum([0] + sizes)
    worst = 0.0
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        arr, idx = arrays[k], np.unravel_index(flat - offsets[k], arrays[k].shape)
        orig = arr[idx]
        analytic = float(grads[k][idx])

        def central(h):
            arr[idx] = orig + h
            up = loss_fn()
            arr[idx] = orig - h
            down = loss_fn()
            arr[idx] = orig
            return up, down

        up, down = central(step)
        numeric = (up - down) / (2 * step)
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        if err >= tolerance and kink_step is not None:
            mid = loss_fn()
            right, left = (up - mid) / step, (mid - down) / step
            if abs(right - left) > tolerance * max(abs(right), abs(left), floor):
                up, down = central(kink_step)
                numeric = (up - down) / (2 * kink_step)
                err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        worst = max(worst, err)
    return GradCheckReport(name, worst, len(picks), tolerance)


# ---------------------------------------------------------------------------
# layers: parameter holders around the functional ops above
# ---------------------------------------------------------------------------

class Conv2d:
    def __init__(self, name, c_in, c_out, k, stride=1, pad=0, rng=None,
                 dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        fan = k * k
        self.weight = Parameter(f"{name}.weight", glorot_uniform(
            rng, (c_out, c_in, k, k), c_in * fan, c_out * fan, dtype))
        self.bias = Parameter(f"{name}.bias", np.zeros(c_out, dtype=dtype))
        self.stride, self.pad = stride, pad

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x):
        return conv2d(x, self.weight.value, self.bias.value, self.stride, self.pad)

    def backward(self, dout, cache):
        dx, dw, db = conv2d_backward(dout, cache)
        self.weight.grad += dw
        self.bias.grad += db
        return dx


class ConvTranspose2d(Conv2d):
    def __init__(self, name, c_in, c_out, k, stride=1, pad=0, rng=None,
                 dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        fan = k * k
        self.weight = Parameter(f"{name}.weight", glorot_uniform(
            rng, (c_in, c_out, k, k), c_in * fan, c_out * fan, dtype))
        self.bias = Parameter(f"{name}.bias", np.zeros(c_out, dtype=dtype))
        self.stride, self.pad = stride, pad

    def forward(self, x):
        return conv_transpose2d(x, self.weight.value, self.bias.value, self.stride, self.pad)

    def backward(self, dout, cache):
        dx, dw, db = conv_transpose2d_backward(dout, cache)
        self.weight.grad += dw
        self.bias.grad += db
        return dx


class Activation:
    def __init__(self, kind):
        self.kind = kind

    def parameters(self):
        return []

    def forward(self, x):
        return pointwise(x, self.kind)

    def backward(self, dout, cache):
        return pointwise_backward(dout, cache)


class MaxPool2d:
    def __init__(self, k, stride):
        self.k, self.stride = k, stride

    def parameters(self):
        return []

    def forward(self, x):
        return max_pool2d(x, self.k, self.stride)

    def backward(self, dout, cache):
        return max_pool2d_backward(dout, cache)


class Sequential:
    def __init__(self, layers):
        self.layers = list(layers)

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def forward(self, x):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x)
            caches.append(c)
        return x, caches

    def backward(self, dout, caches):
        for layer, c in zip(reversed(self.layers), reversed(caches)):
            dout = layer.backward(dout, c)
        return dout
