"""
Numeric kernels for NCHW float32 tensors.

Every kernel has a fast path used by the runtime and a slow ``*_reference``
twin that follows the textbook definition element by element. The reference
versions accumulate in float64 and exist to be compared against.

Tensors are plain ``numpy.ndarray`` objects of rank 4 and dtype float32.
Fast kernels accept an optional ``out`` array so the runtime can recycle
activation buffers.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np

DTYPE = np.float32

# Upper bound on the im2col scratch matrix, in elements (~32 MB of float32).
IM2COL_BUDGET = 8 * 1024 * 1024

IntPair = Union[int, Tuple[int, int]]


class TensorError(ValueError):
    """Rejected kernel input: wrong rank, mismatched dims or non-finite weights."""


class ShapeError(TensorError):
    """A shape rule produced a non-positive output dimension."""


def _pair(v: IntPair) -> Tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


@dataclass(frozen=True)
class ConvParams:
    kernel: Tuple[int, int] = (1, 1)
    stride: Tuple[int, int] = (1, 1)
    padding: Tuple[int, int] = (0, 0)
    has_bias: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kernel", _pair(self.kernel))
        object.__setattr__(self, "stride", _pair(self.stride))
        object.__setattr__(self, "padding", _pair(self.padding))
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise TensorError(f"invalid conv params {self}")


def as_tensor(x, name: str = "input") -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4:
        raise TensorError(f"{name} must be rank 4 (n, c, h, w), got shape {x.shape}")
    return np.ascontiguousarray(x, dtype=DTYPE)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    """Window-count rule shared by convolution and max pooling."""
    out = (size + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise ShapeError(
            f"size {size} with kernel {kernel}, stride {stride}, padding {padding} "
            f"gives non-positive output {out}"
        )
    return out


def _check_out(out, shape):
    if out is None:
        return np.empty(shape, dtype=DTYPE)
    if out.shape != tuple(shape) or out.dtype != DTYPE:
        raise TensorError(f"out buffer {out.shape}/{out.dtype} does not match {shape}")
    return out


def _conv_setup(x, weight, bias, stride, padding):
    x = as_tensor(x)
    weight = np.asarray(weight, dtype=DTYPE)
    if weight.ndim != 4:
        raise TensorError(f"weight must be (cout, cin, kh, kw), got {weight.shape}")
    if not np.all(np.isfinite(weight)):
        raise TensorError("conv weight contains non-finite values")
    cout, cin, kh, kw = weight.shape
    if x.shape[1] != cin:
        raise TensorError(f"input has {x.shape[1]} channels, weight expects {cin}")
    if bias is not None:
        bias = np.asarray(bias, dtype=DTYPE)
        if bias.shape != (cout,):
            raise TensorError(f"bias shape {bias.shape} != ({cout},)")
        if not np.all(np.isfinite(bias)):
            raise TensorError("conv bias contains non-finite values")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if sh < 1 or sw < 1 or ph < 0 or pw < 0:
        raise TensorError("stride must be >= 1 and padding >= 0")
    ho = conv_output_size(x.shape[2], kh, sh, ph)
    wo = conv_output_size(x.shape[3], kw, sw, pw)
    return x, weight, bias, (sh, sw), (ph, pw), ho, wo


class Workspace:
    """Scratch arrays kept across calls, one growable flat buffer per slot.

    Passing the same workspace to repeated convolutions avoids re-faulting
    fresh pages for the padded input and im2col matrix on every call.
    """

    def __init__(self):
        self._bufs = {}

    def get(self, slot: str, shape) -> np.ndarray:
        size = int(np.prod(shape))
        buf = self._bufs.get(slot)
        if buf is None or buf.size < size:
            buf = self._bufs[slot] = np.empty(size, dtype=DTYPE)
        return buf[:size].reshape(shape)

    @property
    def nbytes(self) -> int:
        return sum(b.nbytes for b in self._bufs.values())


def conv2d(x, weight, bias=None, stride: IntPair = 1, padding: IntPair = 0, out=None,
           workspace: Optional[Workspace] = None):
    """2-D cross-correlation with zero padding, via row-chunked im2col + GEMM.

    Each output element is a single GEMM dot product over (cin, kh, kw) in
    row-major tap order, so results do not depend on the chunking much
    beyond the BLAS blocking.
    """
    x, weight, bias, (sh, sw), (ph, pw), ho, wo = _conv_setup(x, weight, bias, stride, padding)
    n, cin, h, w = x.shape
    cout, _, kh, kw = weight.shape
    out = _check_out(out, (n, cout, ho, wo))
    wmat = weight.reshape(cout, cin * kh * kw)
    k = cin * kh * kw
    rows_per_chunk = max(1, min(ho, IM2COL_BUDGET // max(1, k * wo)))
    ws = workspace if workspace is not None else Workspace()

    for i in range(n):
        xi = x[i]
        if ph or pw:
            xp = ws.get("pad", (cin, h + 2 * ph, w + 2 * pw))
            if ph:
                xp[:, :ph] = 0
                xp[:, ph + h:] = 0
            if pw:
                xp[:, :, :pw] = 0
                xp[:, :, pw + w:] = 0
            xp[:, ph:ph + h, pw:pw + w] = xi
        else:
            xp = xi
        oi = out[i]
        if kh == 1 and kw == 1 and sh == 1 and sw == 1:
            np.matmul(wmat, xp.reshape(cin, -1), out=oi.reshape(cout, -1))
        else:
            for r0 in range(0, ho, rows_per_chunk):
                r1 = min(ho, r0 + rows_per_chunk)
                nr = r1 - r0
                cols = ws.get("cols", (cin, kh, kw, nr, wo))
                for a in range(kh):
                    top = r0 * sh + a
                    for b in range(kw):
                        cols[:, a, b] = xp[:, top:top + (nr - 1) * sh + 1:sh,
                                            b:b + (wo - 1) * sw + 1:sw]
                if nr == ho and oi.flags.c_contiguous:
                    np.matmul(wmat, cols.reshape(k, nr * wo), out=oi.reshape(cout, -1))
                else:
                    prod = ws.get("gemm", (cout, nr * wo))
                    np.matmul(wmat, cols.reshape(k, nr * wo), out=prod)
                    oi[:, r0:r1, :] = prod.reshape(cout, nr, wo)
        if bias is not None:
            oi += bias[:, None, None]
    return out


def conv2d_reference(x, weight, bias=None, stride: IntPair = 1, padding: IntPair = 0):
    """Direct definition: one dot product per output site, float64 accumulation."""
    x, weight, bias, (sh, sw), (ph, pw), ho, wo = _conv_setup(x, weight, bias, stride, padding)
    n, cin, h, w = x.shape
    cout, _, kh, kw = weight.shape
    xp = np.zeros((n, cin, h + 2 * ph, w + 2 * pw), dtype=np.float64)
    xp[:, :, ph:ph + h, pw:pw + w] = x
    w64 = weight.astype(np.float64)
    out = np.zeros((n, cout, ho, wo), dtype=np.float64)
    for b in range(n):
        for oy in range(ho):
            for ox in range(wo):
                window = xp[b, :, oy * sh:oy * sh + kh, ox * sw:ox * sw + kw]
                for co in range(cout):
                    out[b, co, oy, ox] = np.sum(w64[co] * window)
    if bias is not None:
        out += bias.astype(np.float64)[None, :, None, None]
    return out.astype(DTYPE)


def batchnorm_infer(x, gamma, beta, mean, var, eps: float = 1e-5, out=None):
    """Inference-mode batch norm: gamma * (x - mean) / sqrt(var + eps) + beta."""
    x = as_tensor(x)
    c = x.shape[1]
    vecs = [np.asarray(v, dtype=np.float64) for v in (gamma, beta, mean, var)]
    for v, label in zip(vecs, ("gamma", "beta", "mean", "var")):
        if v.shape != (c,):
            raise TensorError(f"{label} has shape {v.shape}, expected ({c},)")
    gamma, beta, mean, var = vecs
    if np.any(var < 0):
        raise TensorError("batch norm variance must be non-negative")
    if eps < 0:
        raise TensorError("eps must be non-negative")
    scale = gamma / np.sqrt(var + eps)
    shift = beta - mean * scale
    out = _check_out(out, x.shape)
    np.multiply(x, scale.astype(DTYPE)[None, :, None, None], out=out)
    out += shift.astype(DTYPE)[None, :, None, None]
    return out


def relu(x, out=None):
    x = as_tensor(x)
    out = _check_out(out, x.shape)
    return np.maximum(x, DTYPE(0), out=out)


def add(a, b, out=None):
    a = as_tensor(a, "a")
    b = as_tensor(b, "b")
    if a.shape != b.shape:
        raise TensorError(f"add shape mismatch {a.shape} vs {b.shape}")
    out = _check_out(out, a.shape)
    return np.add(a, b, out=out)


def elementwise(kind: str, a, b=None, out=None):
    if kind == "relu":
        if b is not None:
            raise TensorError("relu takes a single operand")
        return relu(a, out=out)
    if kind == "add":
        if b is None:
            raise TensorError("add needs two operands")
        return add(a, b, out=out)
    raise TensorError(f"unknown elementwise kind {kind!r}")


def _pool_setup(x, kernel, stride, padding):
    x = as_tensor(x)
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if kh < 1 or kw < 1 or sh < 1 or sw < 1 or ph < 0 or pw < 0:
        raise TensorError("invalid pooling parameters")
    ho = conv_output_size(x.shape[2], kh, sh, ph)
    wo = conv_output_size(x.shape[3], kw, sw, pw)
    return x, (kh, kw), (sh, sw), (ph, pw), ho, wo


def maxpool2d(x, kernel: IntPair, stride: IntPair, padding: IntPair = 0, out=None):
    """Max pooling; padded sites count as -inf."""
    x, (kh, kw), (sh, sw), (ph, pw), ho, wo = _pool_setup(x, kernel, stride, padding)
    n, c, h, w = x.shape
    if ph or pw:
        xp = np.full((n, c, h + 2 * ph, w + 2 * pw), -np.inf, dtype=DTYPE)
        xp[:, :, ph:ph + h, pw:pw + w] = x
    else:
        xp = x
    out = _check_out(out, (n, c, ho, wo))
    first = True
    for a in range(kh):
        for b in range(kw):
            tap = xp[:, :, a:a + (ho - 1) * sh + 1:sh, b:b + (wo - 1) * sw + 1:sw]
            if first:
                out[...] = tap
                first = False
            else:
                np.maximum(out, tap, out=out)
    return out


def maxpool2d_reference(x, kernel: IntPair, stride: IntPair, padding: IntPair = 0):
    x, (kh, kw), (sh, sw), (ph, pw), ho, wo = _pool_setup(x, kernel, stride, padding)
    n, c, h, w = x.shape
    out = np.empty((n, c, ho, wo), dtype=DTYPE)
    for b in range(n):
        for ch in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    best = -np.inf
                    for a in range(kh):
                        for d in range(kw):
                            iy, ix = oy * sh + a - ph, ox * sw + d - pw
                            if 0 <= iy < h and 0 <= ix < w:
                                best = max(best, float(x[b, ch, iy, ix]))
                    out[b, ch, oy, ox] = best
    return out


def _bilinear_taps(size: int, factor: int):
    """Source indices and blend weights along one axis (half-pixel centers)."""
    dst = np.arange(size * factor, dtype=np.float64)
    src = np.clip((dst + 0.5) / factor - 0.5, 0.0, size - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, size - 1)
    lam = src - i0
    return i0, i1, lam


def _check_factor(factor, mode):
    if int(factor) != factor or factor < 1:
        raise TensorError(f"upsample factor must be a positive integer, got {factor}")
    if mode not in ("nearest", "bilinear"):
        raise TensorError(f"unknown upsample mode {mode!r}")
    return int(factor)


def upsample(x, factor: int, mode: str = "bilinear", out=None):
    """Integer-factor upsampling, nearest or bilinear (align_corners=False)."""
    x = as_tensor(x)
    f = _check_factor(factor, mode)
    n, c, h, w = x.shape
    out = _check_out(out, (n, c, h * f, w * f))
    if f == 1:
        out[...] = x
        return out
    if mode == "nearest":
        out.reshape(n, c, h, f, w, f)[...] = x[:, :, :, None, :, None]
        return out
    y0, y1, ly = _bilinear_taps(h, f)
    x0, x1, lx = _bilinear_taps(w, f)
    ly = ly.astype(DTYPE)[:, None]
    lx = lx.astype(DTYPE)
    rows = x[:, :, y0, :] * (DTYPE(1) - ly) + x[:, :, y1, :] * ly
    np.add(rows[..., x0] * (DTYPE(1) - lx), rows[..., x1] * lx, out=out)
    return out


def upsample_reference(x, factor: int, mode: str = "bilinear"):
    x = as_tensor(x)
    f = _check_factor(factor, mode)
    n, c, h, w = x.shape
    out = np.empty((n, c, h * f, w * f), dtype=DTYPE)

    def src_pair(d, size):
        s = min(max((d + 0.5) / f - 0.5, 0.0), size - 1)
        i0 = int(np.floor(s))
        return i0, min(i0 + 1, size - 1), s - i0

    for oy in range(h * f):
        for ox in range(w * f):
            if mode == "nearest":
                out[:, :, oy, ox] = x[:, :, oy // f, ox // f]
                continue
            a0, a1, ly = src_pair(oy, h)
            b0, b1, lx = src_pair(ox, w)
            v = ((1 - ly) * (1 - lx) * x[:, :, a0, b0].astype(np.float64)
                 + (1 - ly) * lx * x[:, :, a0, b1]
                 + ly * (1 - lx) * x[:, :, a1, b0]
                 + ly * lx * x[:, :, a1, b1])
            out[:, :, oy, ox] = v
    return out


def concat_channels(inputs: Sequence[np.ndarray], out=None):
    if len(inputs) == 0:
        raise TensorError("concat needs at least one input")
    inputs = [as_tensor(t) for t in inputs]
    n, _, h, w = inputs[0].shape
    for t in inputs[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise TensorError(f"concat spatial mismatch {inputs[0].shape} vs {t.shape}")
    c = sum(t.shape[1] for t in inputs)
    out = _check_out(out, (n, c, h, w))
    start = 0
    for t in inputs:
        out[:, start:start + t.shape[1]] = t
        start += t.shape[1]
    return out


def argmax_channels(x) -> np.ndarray:
    """Per-pixel class index of shape (n, h, w); ties go to the lowest index."""
    x = as_tensor(x)
    if x.size == 0:
        raise TensorError("argmax of an empty tensor")
    return np.argmax(x, axis=1)
