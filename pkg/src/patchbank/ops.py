"""Differentiable kernels: convolution, pooling, affine maps, and losses.

Every kernel takes the shapes listed in its docstring and additionally
accepts one extra leading batch axis (the unbatched case is the batched
case with that axis absent).  Kernels are pure functions of their inputs;
they record onto the thread's active GradTape only when one is active and
some input requires grad.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, active_tape


def _record(inputs, out: Tensor, backward) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(inputs, out, backward)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)

    def backward(g):
        return (g if a.requires_grad else None, g if b.requires_grad else None)

    return _record((a, b), out, backward)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply a tensor by a python scalar."""
    a = _as_tensor(a)
    c = float(c)
    out = Tensor(a.data * c)

    def backward(g):
        return (g * c if a.requires_grad else None,)

    return _record((a,), out, backward)


def tsum(a: Tensor) -> Tensor:
    """Sum of all entries, as a rank-0 tensor."""
    a = _as_tensor(a)
    out = Tensor(a.data.sum())

    def backward(g):
        if not a.requires_grad:
            return (None,)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return _record((a,), out, backward)


def relu(x: Tensor) -> Tensor:
    """max(x, 0), elementwise."""
    x = _as_tensor(x)
    out = Tensor(np.maximum(x.data, 0))

    def backward(g):
        if not x.requires_grad:
            return (None,)
        return (g * (x.data > 0),)

    return _record((x,), out, backward)


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlate filters over a feature map.

    x: (C_in, H, W), weight: (C_out, C_in, kh, kw) -> (C_out, H', W') with
    H' = floor((H + 2*pad - kh)/stride) + 1 and likewise for W'.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    xd, wd = x.data, weight.data
    if wd.ndim != 4:
        raise ValueError(f"conv2d weight must be (C_out, C_in, kh, kw), got {weight.shape}")
    if xd.ndim == 3:
        batched = False
        xb = xd[None]
    elif xd.ndim == 4:
        batched = True
        xb = xd
    else:
        raise ValueError(f"conv2d input must be (C,H,W) or (N,C,H,W), got {x.shape}")
    stride, pad = int(stride), int(pad)
    if stride < 1:
        raise ValueError(f"conv2d stride must be >= 1, got {stride}")
    if pad < 0:
        raise ValueError(f"conv2d pad must be >= 0, got {pad}")
    co, ci, kh, kw = wd.shape
    n, c, h, w = xb.shape
    if c != ci:
        raise ValueError(
            f"conv2d channel mismatch: input shape {x.shape} has {c} channels "
            f"but weight shape {weight.shape} expects {ci}"
        )
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ValueError(
            f"conv2d window {kh}x{kw} does not fit input {h}x{w} with pad {pad}"
        )
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1

    xp = np.pad(xb, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xb
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # cols: (N, Ci*kh*kw, Ho*Wo)
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, ci * kh * kw, ho * wo)
    wmat = wd.reshape(co, ci * kh * kw)
    outb = np.matmul(wmat, cols).reshape(n, co, ho, wo)
    out = Tensor(outb if batched else outb[0])

    def backward(g):
        gb = g if batched else g[None]
        gmat = gb.reshape(n, co, ho * wo)
        if weight.requires_grad:
            gw = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(wd.shape)
        else:
            gw = None
        if x.requires_grad:
            dcols = np.matmul(wmat.T, gmat).reshape(n, ci, kh, kw, ho, wo)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                        :, :, i, j
                    ]
            gx = dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp
            if not batched:
                gx = gx[0]
        else:
            gx = None
        return (gx, gw)

    return _record((x, weight), out, backward)


def maxpool2d(x: Tensor, window: int, stride: int) -> Tensor:
    """Max pooling over the two trailing spatial axes (no padding).

    x: (C, H, W) -> (C, H', W') with H' = floor((H - window)/stride) + 1.
    Ties within a window take the smallest row-major index.
    """
    x = _as_tensor(x)
    xd = x.data
    if xd.ndim not in (3, 4):
        raise ValueError(f"maxpool2d input must be (C,H,W) or (N,C,H,W), got {x.shape}")
    window, stride = int(window), int(stride)
    if window < 1 or stride < 1:
        raise ValueError(f"maxpool2d window and stride must be >= 1, got {window}, {stride}")
    h, w = xd.shape[-2:]
    if h < window or w < window:
        raise ValueError(f"maxpool2d window {window} does not fit input {h}x{w}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1

    win = sliding_window_view(xd, (window, window), axis=(-2, -1))[..., ::stride, ::stride, :, :]
    flat = np.ascontiguousarray(win).reshape(xd.shape[:-2] + (ho, wo, window * window))
    idx = flat.argmax(axis=-1)
    out = Tensor(np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0])

    exact_tiling = stride == window and h == ho * window and w == wo * window

    def backward(g):
        if not x.requires_grad:
            return (None,)
        lead = xd.shape[:-2]
        if exact_tiling:
            # Disjoint windows: place each gradient at its window argmax.
            dwin = np.zeros(lead + (ho, wo, window * window), dtype=xd.dtype)
            np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
            dwin = dwin.reshape(lead + (ho, wo, window, window))
            return (np.moveaxis(dwin, -2, -3).reshape(xd.shape),)
        ai, aj = np.divmod(idx, window)
        rows = np.arange(ho)[:, None] * stride + ai
        cols = np.arange(wo)[None, :] * stride + aj
        flat_src = (rows * w + cols).reshape(lead + (-1,)).reshape(-1, ho * wo)
        gx = np.zeros((int(np.prod(lead)) if lead else 1, h * w), dtype=xd.dtype)
        np.add.at(gx, (np.arange(gx.shape[0])[:, None], flat_src), g.reshape(-1, ho * wo))
        return (gx.reshape(xd.shape),)

    return _record((x,), out, backward)


def global_max_pool(x: Tensor) -> tuple[Tensor, np.ndarray]:
    """Spatially pool an entire feature map to one value per channel.

    x: (N, H, W) -> values (N,) plus an int array (N, 2) of (h, w) argmax
    locations.  Ties take the smallest row-major linear index.  Backward
    routes each channel's full gradient to its argmax location only.
    """
    x = _as_tensor(x)
    xd = x.data
    if xd.ndim < 3:
        raise ValueError(f"global_max_pool input must have >= 3 dims, got {x.shape}")
    h, w = xd.shape[-2:]
    flat = xd.reshape(xd.shape[:-2] + (h * w,))
    idx = flat.argmax(axis=-1)
    vals = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    argmax = np.stack(np.divmod(idx, w), axis=-1)
    out = Tensor(vals)

    def backward(g):
        if not x.requires_grad:
            return (None,)
        gx = np.zeros_like(flat)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=-1)
        return (gx.reshape(xd.shape),)

    return _record((x,), out, backward), argmax


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes: (N, H, W) -> (N,).

    Backward spreads each channel's gradient uniformly, 1/(H*W) per site.
    """
    x = _as_tensor(x)
    xd = x.data
    if xd.ndim < 3:
        raise ValueError(f"global_avg_pool input must have >= 3 dims, got {x.shape}")
    h, w = xd.shape[-2:]
    out = Tensor(xd.mean(axis=(-2, -1)))

    def backward(g):
        if not x.requires_grad:
            return (None,)
        return (np.broadcast_to((g / (h * w))[..., None, None], xd.shape) + 0.0,)

    return _record((x,), out, backward)


def cross_channel_avg_pool(x: Tensor, k: int) -> Tensor:
    """Average every group of k consecutive entries: (k*M,) -> (M,).

    Backward hands each entry of group i the gradient g_i / k, so every
    pooled entry is affected, not just the largest.
    """
    x = _as_tensor(x)
    xd = x.data
    k = int(k)
    if k < 1:
        raise ValueError(f"group size must be >= 1, got {k}")
    d = xd.shape[-1]
    if d % k != 0:
        raise ValueError(f"input length {d} is not divisible by group size {k}")
    m = d // k
    out = Tensor(xd.reshape(xd.shape[:-1] + (m, k)).mean(axis=-1))

    def backward(g):
        if not x.requires_grad:
            return (None,)
        return (np.repeat(g[..., None] / k, k, axis=-1).reshape(xd.shape),)

    return _record((x,), out, backward)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map: (D,) x (O, D) + (O,) -> (O,)."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    xd, wd, bd = x.data, weight.data, bias.data
    if wd.ndim != 2 or bd.ndim != 1:
        raise ValueError(
            f"fully_connected expects weight (O,D) and bias (O,), got {weight.shape}, {bias.shape}"
        )
    if xd.ndim not in (1, 2):
        raise ValueError(f"fully_connected input must be (D,) or (N,D), got {x.shape}")
    o, d = wd.shape
    if xd.shape[-1] != d:
        raise ValueError(
            f"fully_connected dimension mismatch: input shape {x.shape} vs weight shape {weight.shape}"
        )
    if bd.shape[0] != o:
        raise ValueError(f"bias shape {bias.shape} does not match weight rows {o}")
    out = Tensor(xd @ wd.T + bd)

    def backward(g):
        gx = g @ wd if x.requires_grad else None
        if weight.requires_grad:
            gw = g.T @ xd if xd.ndim == 2 else np.outer(g, xd)
        else:
            gw = None
        if bias.requires_grad:
            gb = g.sum(axis=0) if g.ndim == 2 else g.copy()
        else:
            gb = None
        return (gx, gw, gb)

    return _record((x, weight, bias), out, backward)


def softmax_cross_entropy(logits: Tensor, label) -> Tensor:
    """Negative log softmax probability of the true class, as a scalar.

    logits: (M,) with an int label, or (N, M) with an int array of labels
    (the batched form returns the mean loss).  Stabilized by subtracting
    the per-row maximum before exponentiation; the gradient is
    softmax(logits) - onehot(label), scaled by 1/N in the batched form.
    """
    logits = _as_tensor(logits)
    ld = logits.data
    if ld.ndim == 1:
        batched = False
        lb = ld[None]
        labels = np.asarray([label], dtype=np.int64)
    elif ld.ndim == 2:
        batched = True
        lb = ld
        labels = np.asarray(label, dtype=np.int64)
        if labels.shape != (lb.shape[0],):
            raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    else:
        raise ValueError(f"logits must be (M,) or (N,M), got {logits.shape}")
    n, m = lb.shape
    if labels.min() < 0 or labels.max() >= m:
        bad = labels[(labels < 0) | (labels >= m)][0]
        raise ValueError(f"label {bad} out of range for {m} classes")

    shifted = lb - lb.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    out = Tensor(np.asarray(loss, dtype=ld.dtype))

    def backward(g):
        if not logits.requires_grad:
            return (None,)
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        gx = p * (g / n)
        return (gx if batched else gx[0],)

    return _record((logits,), out, backward)
