"""Forward kernels and their exact reverse-mode gradients.

Convolutions run as im2col + BLAS matmul; bilinear resampling is a pair
of small interpolation-matrix matmuls, so its backward is the exact
transpose map. All reductions use a fixed order, which keeps repeated
runs bit-identical.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, record_op


def _same_dtype(*tensors: Tensor):
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ShapeError(f"mixed dtypes {dt} vs {t.dtype}")
    return dt


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no implicit broadcasting)")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    _same_dtype(a, b)
    out = Tensor(a.data + b.data)
    return record_op("add", out, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    _same_dtype(a, b)
    out = Tensor(a.data - b.data)
    return record_op("sub", out, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    _same_dtype(a, b)
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data
    return record_op("mul", out, (a, b), lambda g: (g * bd, g * ad))


def scalar_mul(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(a.data * s)
    return record_op("scalar_mul", out, (a,), lambda g: (g * s,))


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))
    mask = x.data > 0  # subgradient at 0 is 0
    return record_op("relu", out, (x,), lambda g: (g * mask,))


def smooth_l1(x: Tensor) -> Tensor:
    """Elementwise 0.5*x^2 for |x| < 1, |x| - 0.5 otherwise."""
    ax = np.abs(x.data)
    inner = ax < 1
    out = Tensor(np.where(inner, 0.5 * x.data * x.data, ax - 0.5))
    grad_branch = np.where(inner, x.data, np.sign(x.data))
    return record_op("smooth_l1", out, (x,), lambda g: (g * grad_branch,))


def sum_all(x: Tensor) -> Tensor:
    """Sum every element into a (1, 1, 1, 1) scalar tensor."""
    out = Tensor(np.array(x.data.sum(), dtype=x.dtype).reshape(1, 1, 1, 1))
    shape = x.data.shape
    return record_op(
        "sum_all", out, (x,),
        lambda g: (np.full(shape, g.reshape(()), dtype=g.dtype),),
    )


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _conv_out_extent(extent: int, k: int, stride: int, dilation: int, padding: int) -> int:
    return (extent + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int,
            oh: int, ow: int) -> np.ndarray:
    b, c = xp.shape[:2]
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=xp.dtype)
    hspan = (oh - 1) * stride + 1
    wspan = (ow - 1) * stride + 1
    for ki in range(kh):
        for kj in range(kw):
            i0 = ki * dilation
            j0 = kj * dilation
            cols[:, :, ki, kj] = xp[:, :, i0:i0 + hspan:stride, j0:j0 + wspan:stride]
    return cols


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, *,
           stride: int = 1, dilation: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x (B,Cin,H,W) with weight (Cout,Cin,KH,KW)."""
    if stride < 1 or dilation < 1 or padding < 0:
        raise ShapeError(f"conv2d: bad stride/dilation/padding ({stride}, {dilation}, {padding})")
    b, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if cin != wcin:
        raise ShapeError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    if bias is not None and bias.shape != (1, cout, 1, 1):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != (1, {cout}, 1, 1)")
    oh = _conv_out_extent(h, kh, stride, dilation, padding)
    ow = _conv_out_extent(w, kw, stride, dilation, padding)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: non-positive output extent ({oh}, {ow}) "
                         f"for input {h}x{w}, kernel {kh}x{kw}")
    dt = _same_dtype(*([x, weight] + ([bias] if bias is not None else [])))

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, stride, dilation, oh, ow)
    ckk = cin * kh * kw
    cols_mat = cols.reshape(b, ckk, oh * ow)
    w_mat = weight.data.reshape(cout, ckk)
    out_data = np.matmul(w_mat, cols_mat).reshape(b, cout, oh, ow)
    if bias is not None:
        out_data += bias.data
    out = Tensor(out_data)

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def grad_fn(g):
        g_mat = g.reshape(b, cout, oh * ow)
        dw = np.matmul(g_mat, cols_mat.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        dcols = np.matmul(w_mat.T, g_mat).reshape(b, cin, kh, kw, oh, ow)
        dxp = np.zeros_like(xp)
        hspan = (oh - 1) * stride + 1
        wspan = (ow - 1) * stride + 1
        for ki in range(kh):
            for kj in range(kw):
                i0 = ki * dilation
                j0 = kj * dilation
                dxp[:, :, i0:i0 + hspan:stride, j0:j0 + wspan:stride] += dcols[:, :, ki, kj]
        dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        if bias is None:
            return np.ascontiguousarray(dx), dw
        db = g.sum(axis=(0, 2, 3)).reshape(1, cout, 1, 1)
        return np.ascontiguousarray(dx), dw, db

    return record_op("conv2d", out, inputs, grad_fn)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: Tensor, running_var: Tensor, *,
               training: bool = False, momentum: float = 0.1,
               epsilon: float = 1e-5, per_sample: bool = False) -> Tensor:
    """Channelwise normalization with learned scale/shift.

    Training mode normalizes by current statistics and updates the running
    buffers in place; inference mode uses the running buffers. With
    ``per_sample=True`` the statistics reduce over spatial dims only, so
    each batch item is normalized independently (keeps batched disparity
    levels decoupled).
    """
    b, c, h, w = x.shape
    for name, t in (("gamma", gamma), ("beta", beta),
                    ("running_mean", running_mean), ("running_var", running_var)):
        if t.shape != (1, c, 1, 1):
            raise ShapeError(f"batch_norm: {name} shape {t.shape} != (1, {c}, 1, 1)")
    if epsilon <= 0:
        raise ShapeError("batch_norm: epsilon must be > 0")
    dt = _same_dtype(x, gamma, beta)
    eps = dt.type(epsilon)

    if training:
        axes = (2, 3) if per_sample else (0, 2, 3)
        n = h * w if per_sample else b * h * w
        if n == 0 or b == 0:
            raise ShapeError("batch_norm: empty batch in training mode")
        mu = x.data.mean(axis=axes, keepdims=True)
        xc = x.data - mu
        var = np.mean(xc * xc, axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        # Running buffers track per-batch statistics (unbiased variance).
        correction = n / (n - 1) if n > 1 else 1.0
        batch_mean = mu.mean(axis=0, keepdims=True) if per_sample else mu
        batch_var = (var * correction).mean(axis=0, keepdims=True) if per_sample \
            else var * correction
        running_mean.data *= (1.0 - momentum)
        running_mean.data += momentum * batch_mean.astype(dt)
        running_var.data *= (1.0 - momentum)
        running_var.data += momentum * batch_var.astype(dt)
    else:
        inv = 1.0 / np.sqrt(running_var.data + eps)
        xhat = (x.data - running_mean.data) * inv

    out = Tensor(gamma.data * xhat + beta.data)
    gdata = gamma.data

    if training:
        axes_ = axes

        def grad_fn(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
            dbeta = g.sum(axis=(0, 2, 3), keepdims=True)
            dxhat = g * gdata
            dx = inv * (dxhat
                        - dxhat.mean(axis=axes_, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=axes_, keepdims=True))
            return dx, dgamma, dbeta
    else:
        def grad_fn(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
            dbeta = g.sum(axis=(0, 2, 3), keepdims=True)
            dx = g * (gdata * inv)
            return dx, dgamma, dbeta

    return record_op("batch_norm", out, (x, gamma, beta), grad_fn)


# ---------------------------------------------------------------------------
# pooling and resizing
# ---------------------------------------------------------------------------

def avg_pool(x: Tensor, window_h: int, window_w: int,
             stride_h: int, stride_w: int) -> Tensor:
    """Mean pooling. Windows larger than the input are clipped to it.

    Window elements accumulate in fixed row-major order, so the result is
    bit-identical to a serial per-window loop.
    """
    if window_h < 1 or window_w < 1 or stride_h < 1 or stride_w < 1:
        raise ShapeError("avg_pool: window and stride must be positive")
    b, c, h, w = x.shape
    wh = min(window_h, h)
    ww = min(window_w, w)
    oh = (h - wh) // stride_h + 1
    ow = (w - ww) // stride_w + 1
    hspan = (oh - 1) * stride_h + 1
    wspan = (ow - 1) * stride_w + 1
    acc = np.zeros((b, c, oh, ow), dtype=x.dtype)
    for dy in range(wh):
        for dx in range(ww):
            acc += x.data[:, :, dy:dy + hspan:stride_h, dx:dx + wspan:stride_w]
    out = Tensor(acc / (wh * ww))
    inv_area = 1.0 / (wh * ww)
    xshape = x.data.shape

    def grad_fn(g):
        dx = np.zeros(xshape, dtype=g.dtype)
        spread = g * inv_area
        for dy in range(wh):
            for dx_ in range(ww):
                dx[:, :, dy:dy + hspan:stride_h, dx_:dx_ + wspan:stride_w] += spread
        return (dx,)

    return record_op("avg_pool", out, (x,), grad_fn)


def _resize_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Row-stochastic bilinear sampling matrix, half-pixel-center convention."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        lo = int(np.floor(src))
        t = src - lo
        lo_c = min(max(lo, 0), n_in - 1)
        hi_c = min(max(lo + 1, 0), n_in - 1)
        m[i, lo_c] += 1.0 - t
        m[i, hi_c] += t
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resampling (align_corners=false) to (out_h, out_w)."""
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: bad target extents ({out_h}, {out_w})")
    b, c, h, w = x.shape
    sy = _resize_matrix(h, out_h, x.dtype)
    sx = _resize_matrix(w, out_w, x.dtype)
    out = Tensor(np.matmul(np.matmul(sy, x.data), sx.T))
    syt, sxt = sy.T.copy(), sx.T.copy()

    def grad_fn(g):
        return (np.matmul(np.matmul(syt, g), sxt.T),)

    return record_op("bilinear_resize", out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# softmax and channel reductions
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int) -> Tensor:
    """Softmax along one axis, computed with max-subtraction for stability."""
    if not 0 <= axis <= 3:
        raise ShapeError(f"softmax: axis {axis} out of range for 4D tensors")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(p)

    def grad_fn(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        return (p * (g - dot),)

    return record_op("softmax", out, (x,), grad_fn)


def index_expectation(probs: Tensor) -> Tensor:
    """Sum over channels of channel_index * probability, clipped to [0, C-1].

    The clip only trims float round-off; mathematically the expectation of
    indices under a distribution already lies in that interval.
    """
    b, c, h, w = probs.shape
    levels = np.arange(c, dtype=probs.dtype).reshape(1, c, 1, 1)
    raw = (probs.data * levels).sum(axis=1, keepdims=True)
    out = Tensor(np.clip(raw, 0.0, c - 1.0))

    def grad_fn(g):
        return (g * levels,)

    return record_op("index_expectation", out, (probs,), grad_fn)


def channel_entropy(probs: Tensor) -> Tensor:
    """Shannon entropy (natural log) across channels, with 0*ln(0) = 0."""
    p = probs.data
    logp = np.log(np.where(p > 0, p, 1.0))
    out = Tensor(-(p * logp).sum(axis=1, keepdims=True))

    def grad_fn(g):
        return (np.where(p > 0, -(logp + 1.0), 0.0) * g,)

    return record_op("channel_entropy", out, (probs,), grad_fn)


# ---------------------------------------------------------------------------
# layout ops
# ---------------------------------------------------------------------------

def concat_channels(inputs: list[Tensor]) -> Tensor:
    if not inputs:
        raise ShapeError("concat_channels: empty input list")
    b, _, h, w = inputs[0].shape
    for t in inputs[1:]:
        tb, _, th, tw = t.shape
        if (tb, th, tw) != (b, h, w):
            raise ShapeError(f"concat_channels: {t.shape} incompatible with "
                             f"(batch={b}, height={h}, width={w})")
    _same_dtype(*inputs)
    out = Tensor(np.concatenate([t.data for t in inputs], axis=1))
    sizes = [t.shape[1] for t in inputs]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        return tuple(np.ascontiguousarray(g[:, offsets[i]:offsets[i + 1]])
                     for i in range(len(sizes)))

    return record_op("concat_channels", out, tuple(inputs), grad_fn)


def stack_batch(inputs: list[Tensor]) -> Tensor:
    """Concatenate along the batch axis (inverse of slicing per item)."""
    if not inputs:
        raise ShapeError("stack_batch: empty input list")
    tail = inputs[0].shape[1:]
    for t in inputs[1:]:
        if t.shape[1:] != tail:
            raise ShapeError(f"stack_batch: {t.shape} incompatible with (*, {tail})")
    _same_dtype(*inputs)
    out = Tensor(np.concatenate([t.data for t in inputs], axis=0))
    sizes = [t.shape[0] for t in inputs]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        return tuple(np.ascontiguousarray(g[offsets[i]:offsets[i + 1]])
                     for i in range(len(sizes)))

    return record_op("stack_batch", out, tuple(inputs), grad_fn)


def batch_to_channels(x: Tensor) -> Tensor:
    """Reinterpret a (B, 1, H, W) stack as one (1, B, H, W) tensor."""
    b, c, h, w = x.shape
    if c != 1:
        raise ShapeError(f"batch_to_channels: expected single-channel input, got C={c}")
    out = Tensor(np.ascontiguousarray(x.data.transpose(1, 0, 2, 3)))

    def grad_fn(g):
        return (np.ascontiguousarray(g.transpose(1, 0, 2, 3)),)

    return record_op("batch_to_channels", out, (x,), grad_fn)


def shift_columns(x: Tensor, d: int) -> Tensor:
    """Shift content right by d columns; vacated columns are zero-filled.

    Output column j equals input column j - d for j >= d. d may equal the
    width (all-zero result); anything outside [0, width] is rejected.
    """
    b, c, h, w = x.shape
    if not 0 <= d <= w:
        raise ShapeError(f"shift_columns: shift {d} out of range [0, {w}]")
    if d == 0:
        out = Tensor(x.data.copy())
        return record_op("shift_columns", out, (x,), lambda g: (g,))
    out_data = np.zeros_like(x.data)
    if d < w:
        out_data[:, :, :, d:] = x.data[:, :, :, :w - d]
    out = Tensor(out_data)

    def grad_fn(g):
        dx = np.zeros_like(g)
        if d < w:
            dx[:, :, :, :w - d] = g[:, :, :, d:]
        return (dx,)

    return record_op("shift_columns", out, (x,), grad_fn)
