"""Differentiable primitives over (n, c, h, w) tensors."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tape, Tensor, check_tensor4, default_dtype

TRAIN = "train"
INFER = "infer"


def _check_mode(mode: str) -> None:
    if mode not in (TRAIN, INFER):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")


@dataclass
class ConvParams:
    """Convolution weights.

    For :func:`conv2d` the weight layout is (out_ch, in_ch, kh, kw). For
    :func:`conv2d_transpose` it is (in_ch, out_ch, kh, kw), i.e. the layout of
    the forward convolution whose input gradient the transpose computes.
    """

    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: str = "same_ceil"
    transposed: bool = False

    def __post_init__(self):
        if self.weight.data.ndim != 4:
            raise ShapeError(f"conv weight must be 4-D, got {self.weight.shape}")
        kh, kw = self.weight.shape[2:]
        if kh not in (1, 2, 3) or kw not in (1, 2, 3):
            raise ShapeError(f"kernel {kh}x{kw} not supported")
        if self.bias.shape != (self.out_ch,):
            raise ShapeError(f"bias shape {self.bias.shape} != ({self.out_ch},)")
        if self.stride < 1:
            raise ValueError(f"stride must be positive, got {self.stride}")
        if self.padding not in ("same_ceil", "valid"):
            raise ValueError(f"unknown padding mode {self.padding!r}")

    @property
    def in_ch(self) -> int:
        return self.weight.shape[0 if self.transposed else 1]

    @property
    def out_ch(self) -> int:
        return self.weight.shape[1 if self.transposed else 0]

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]

    def tensors(self) -> list[Tensor]:
        return [self.weight, self.bias]


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-3
    momentum: float = 0.99

    @classmethod
    def create(cls, channels: int, name: str = "bn", epsilon: float = 1e-3, momentum: float = 0.99):
        dt = default_dtype()
        return cls(
            gamma=Tensor(np.ones(channels, dt), name=f"{name}.gamma"),
            beta=Tensor(np.zeros(channels, dt), name=f"{name}.beta"),
            running_mean=np.zeros(channels, dt),
            running_var=np.ones(channels, dt),
            epsilon=epsilon,
            momentum=momentum,
        )

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.momentum < 1:
            raise ValueError("momentum must lie in (0, 1)")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def tensors(self) -> list[Tensor]:
        return [self.gamma, self.beta]


def output_extent(size: int, kernel: int, stride: int, padding: str) -> tuple[int, int, int]:
    """Return (out_size, pad_before, pad_after) along one axis."""
    if padding == "same_ceil":
        out = math.ceil(size / stride)
        total = max((out - 1) * stride + kernel - size, 0)
        return out, total // 2, total - total // 2
    if size < kernel:
        raise ShapeError(f"valid convolution: extent {size} smaller than kernel {kernel}")
    return (size - kernel) // stride + 1, 0, 0


def _window(a: np.ndarray, i: int, j: int, stride: int, ho: int, wo: int) -> np.ndarray:
    return a[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Gather kernel taps into a (c*kh*kw, n*ho*wo) matrix."""
    n, c = xp.shape[:2]
    if kh == kw == 1 and stride == 1 and n == 1:
        return xp.reshape(c, ho * wo)
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = _window(xp, i, j, stride, ho, wo).transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * ho * wo)


def _col2im(cols: np.ndarray, shape, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = shape[:2]
    out = np.zeros(shape, dtype=cols.dtype)
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    for i in range(kh):
        for j in range(kw):
            _window(out, i, j, stride, ho, wo)[...] += cols[:, i, j].transpose(1, 0, 2, 3)
    return out


def conv2d(x: Tensor, p: ConvParams, tape: Tape | None = None) -> Tensor:
    """2-D cross-correlation with bias, computed as im2col followed by one GEMM."""
    check_tensor4(x)
    if p.transposed:
        raise ValueError("conv2d got transposed params; use conv2d_transpose")
    n, c, h, w = x.shape
    if c != p.in_ch:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weight {p.weight.shape}")
    kh, kw = p.kernel
    s = p.stride
    ho, pt, pb = output_extent(h, kh, s, p.padding)
    wo, pl, pr = output_extent(w, kw, s, p.padding)
    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if pt or pb or pl or pr else xd
    wt = p.weight.data
    o = wt.shape[0]
    w2 = wt.reshape(o, c * kh * kw)

    cols = _im2col(xp, kh, kw, s, ho, wo)
    out = w2 @ cols
    out += p.bias.data[:, None]
    y = Tensor(np.ascontiguousarray(out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3)))

    if tape is not None:

        def grad_fn(g):
            g2 = g.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
            dw = (g2 @ cols.T).reshape(wt.shape)
            dxp = _col2im(w2.T @ g2, xp.shape, kh, kw, s, ho, wo)
            dx = dxp[:, :, pt : pt + h, pl : pl + w]
            return dx, dw, g2.sum(axis=1)

        tape.record("conv2d", (x, p.weight, p.bias), y, grad_fn)
    return y


def conv2d_transpose(x: Tensor, p: ConvParams, target_hw: tuple[int, int], tape: Tape | None = None) -> Tensor:
    """Strided transposed convolution cropped top-left to ``target_hw``.

    The full output extent is ((h - 1) * stride + kh, (w - 1) * stride + kw);
    for the 2x2 / stride 2 upsampler that is (2h, 2w).
    """
    check_tensor4(x)
    if not p.transposed:
        raise ValueError("conv2d_transpose needs params built with transposed=True")
    n, c, h, w = x.shape
    if c != p.in_ch:
        raise ShapeError(f"conv2d_transpose channel mismatch: input {x.shape} vs weight {p.weight.shape}")
    kh, kw = p.kernel
    s = p.stride
    full_h, full_w = (h - 1) * s + kh, (w - 1) * s + kw
    th, tw = target_hw
    if th > full_h or tw > full_w:
        raise ShapeError(f"target {target_hw} exceeds producible extent {(full_h, full_w)} for input {x.shape}")
    if th < 1 or tw < 1:
        raise ShapeError(f"target extent must be positive, got {target_hw}")
    wt = p.weight.data
    o = wt.shape[1]
    w2 = wt.reshape(c, o * kh * kw)
    xf = x.data.transpose(1, 0, 2, 3).reshape(c, n * h * w)

    # the scatter is the adjoint of im2col over the (o, n, full_h, full_w) output
    full = _col2im(w2.T @ xf, (n, o, full_h, full_w), kh, kw, s, h, w)
    full += p.bias.data[None, :, None, None]
    y = Tensor(np.ascontiguousarray(full[:, :, :th, :tw]))

    if tape is not None:

        def grad_fn(g):
            gf = np.zeros((n, o, full_h, full_w), dtype=g.dtype)
            gf[:, :, :th, :tw] = g
            gcols = _im2col(gf, kh, kw, s, h, w)
            dx = (w2 @ gcols).reshape(c, n, h, w).transpose(1, 0, 2, 3)
            dw = (xf @ gcols.T).reshape(wt.shape)
            return dx, dw, g.sum(axis=(0, 2, 3))

        tape.record("conv2d_transpose", (x, p.weight, p.bias), y, grad_fn)
    return y


def batch_norm(x: Tensor, p: BatchNormParams, mode: str = TRAIN, tape: Tape | None = None) -> Tensor:
    """Per-channel batch normalisation.

    Train mode normalises with the biased batch statistics over (n, h, w)
    and folds them into the running averages; infer mode uses the running
    averages only.
    """
    check_tensor4(x)
    _check_mode(mode)
    if x.shape[1] != p.channels:
        raise ShapeError(f"batch_norm channel mismatch: input {x.shape} vs {p.channels} channels")
    xd = x.data
    gamma = p.gamma.data[None, :, None, None]
    beta = p.beta.data[None, :, None, None]

    if mode == TRAIN:
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        p.running_mean *= p.momentum
        p.running_mean += (1 - p.momentum) * mean.astype(p.running_mean.dtype)
        p.running_var *= p.momentum
        p.running_var += (1 - p.momentum) * var.astype(p.running_var.dtype)
    else:
        mean = p.running_mean.astype(xd.dtype)
        var = p.running_var.astype(xd.dtype)

    inv_std = (1.0 / np.sqrt(var + p.epsilon)).astype(xd.dtype)[None, :, None, None]
    xhat = (xd - mean[None, :, None, None]) * inv_std
    y = Tensor(xhat * gamma + beta)

    if tape is not None:
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]

        def grad_fn(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            dxhat = g * gamma
            if mode == TRAIN:
                dx = inv_std / m * (
                    m * dxhat
                    - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                )
            else:
                dx = dxhat * inv_std
            return dx, dgamma, dbeta

        tape.record("batch_norm", (x, p.gamma, p.beta), y, grad_fn)
    return y


def relu(x: Tensor, tape: Tape | None = None) -> Tensor:
    mask = x.data > 0
    y = Tensor(np.maximum(x.data, 0))
    if tape is not None:
        tape.record("relu", (x,), y, lambda g: (g * mask,))
    return y


def dropout_mask(shape, rate: float, rng: np.random.Generator | int | None, dtype) -> np.ndarray:
    """Inverted-dropout multiplier: 0 with probability ``rate`` else 1/(1-rate)."""
    rng = np.random.default_rng(rng)
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) * dtype(1.0 / (1.0 - rate))


def dropout(
    x: Tensor,
    rate: float,
    mode: str = TRAIN,
    rng: np.random.Generator | int | None = None,
    tape: Tape | None = None,
) -> Tensor:
    """Element-wise inverted dropout.

    ``rng`` may be a Generator (advanced by the call) or an integer seed; a
    fixed seed reproduces the same mask bit for bit.
    """
    _check_mode(mode)
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode == INFER or rate == 0:
        return x
    mask = dropout_mask(x.shape, rate, rng, x.data.dtype.type)
    y = Tensor(x.data * mask)
    if tape is not None:
        tape.record("dropout", (x,), y, lambda g: (g * mask,))
    return y


def concat_channels(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    check_tensor4(a, "first operand")
    check_tensor4(b, "second operand")
    na, ca, ha, wa = a.shape
    nb, cb, hb, wb = b.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise ShapeError(f"concat_channels needs matching (n, h, w): {a.shape} vs {b.shape}")
    y = Tensor(np.concatenate([a.data, b.data], axis=1))
    if tape is not None:
        tape.record("concat_channels", (a, b), y, lambda g: (g[:, :ca], g[:, ca:]))
    return y


def add(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add needs identical shapes: {a.shape} vs {b.shape}")
    y = Tensor(a.data + b.data)
    if tape is not None:
        tape.record("add", (a, b), y, lambda g: (g, g))
    return y


def softmax_channels(x: Tensor, tape: Tape | None = None) -> Tensor:
    check_tensor4(x)
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    y = Tensor(s)
    if tape is not None:
        tape.record("softmax_channels", (x,), y, lambda g: (s * (g - (g * s).sum(axis=1, keepdims=True)),))
    return y


def argmax_channels(x: Tensor | np.ndarray) -> np.ndarray:
    """Per-pixel winning channel; np.argmax already picks the lowest index on ties."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    return np.argmax(data, axis=1)


def reduce_sum(x: Tensor, tape: Tape | None = None) -> Tensor:
    y = Tensor(x.data.sum(), dtype=x.data.dtype)
    if tape is not None:
        tape.record("reduce_sum", (x,), y, lambda g: (np.broadcast_to(g, x.shape).astype(x.data.dtype),))
    return y


def multiply_const(x: Tensor, c: np.ndarray, tape: Tape | None = None) -> Tensor:
    """Element-wise product with a constant (non-differentiated) array."""
    c = np.asarray(c, dtype=x.data.dtype)
    y = Tensor(x.data * c)
    if tape is not None:
        tape.record("multiply_const", (x,), y, lambda g: (g * c,))
    return y
