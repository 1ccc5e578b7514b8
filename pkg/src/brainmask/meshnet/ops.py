"""Layer kernels on channel-major activation tensors of shape (C, X, Y, Z).

Convolution is a correlation with zero padding of ``d * (k - 1) / 2`` voxels
per side, so spatial shape is preserved.  Kernels are evaluated tap by tap:
for each kernel offset, a channel-mixing matrix product is accumulated into
the overlapping part of the output.  Work can be restricted to a slab of
x-planes so that temporaries stay bounded and slabs can run concurrently.
"""

from __future__ import annotations

import itertools

import numpy as np

from ..errors import ChannelMismatch, MissingStats


def kernel_offsets(k: int):
    """Kernel index triples and matching signed offsets, in weight-array order."""
    h = k // 2
    for idx in itertools.product(range(k), repeat=3):
        yield idx, tuple(i - h for i in idx)


def _overlap(shift: int, n: int, lo: int = 0, hi: int | None = None):
    """Output range [a, b) within [lo, hi) whose input index p + shift lies in [0, n)."""
    hi = n if hi is None else hi
    a = max(lo, -shift)
    b = min(hi, n - shift)
    return a, b


def conv_slab(out, inp, w, dilation, bias=None, x_range=None):
    """Write ``out[:, x0:x1]`` = dilated correlation of ``inp`` with ``w``.

    ``w`` has shape (C_out, C_in, k, k, k).  ``out`` may be a view into a
    larger buffer; only the requested x-planes are touched.
    """
    c_out, c_in, k = w.shape[0], w.shape[1], w.shape[2]
    if inp.shape[0] != c_in:
        raise ChannelMismatch(f"input has {inp.shape[0]} channels, kernel expects {c_in}")
    _, nx, ny, nz = inp.shape
    x0, x1 = (0, nx) if x_range is None else x_range
    target = out[:, x0:x1]
    if bias is None:
        target.fill(0)
    else:
        target[...] = np.asarray(bias, dtype=out.dtype).reshape(-1, 1, 1, 1)
    for idx, off in kernel_offsets(k):
        sx, sy, sz = (o * dilation for o in off)
        ax, bx = _overlap(sx, nx, x0, x1)
        ay, by = _overlap(sy, ny)
        az, bz = _overlap(sz, nz)
        if ax >= bx or ay >= by or az >= bz:
            continue
        tap = w[(slice(None), slice(None)) + idx]
        src = inp[:, ax + sx:bx + sx, ay + sy:by + sy, az + sz:bz + sz]
        out[:, ax:bx, ay:by, az:bz] += np.tensordot(tap, src, axes=(1, 0)).astype(out.dtype, copy=False)
    return out


def slabs(nx: int, plane_voxels: int, target_voxels: int = 1 << 16):
    step = max(1, target_voxels // max(1, plane_voxels))
    return [(x, min(nx, x + step)) for x in range(0, nx, step)]


def dilated_conv3d(x, w, dilation=1, bias=None, out_dtype=None):
    """Allocate-and-return dilated 3D convolution (isometric, zero padded)."""
    x = np.asarray(x)
    w = np.asarray(w)
    if x.ndim != 4:
        raise ValueError(f"expected (C, X, Y, Z) input, got shape {x.shape}")
    if w.shape[1] != x.shape[0]:
        raise ChannelMismatch(f"input has {x.shape[0]} channels, kernel expects {w.shape[1]}")
    dtype = out_dtype or np.result_type(x.dtype, w.dtype)
    out = np.empty((w.shape[0],) + x.shape[1:], dtype=dtype)
    return conv_slab(out, x, w, dilation, bias)


def conv_weight_grad(grad_out, x, k, dilation):
    """Gradient of sum(grad_out * conv(x, w)) with respect to ``w``."""
    c_out, c_in = grad_out.shape[0], x.shape[0]
    _, nx, ny, nz = x.shape
    gw = np.zeros((c_out, c_in, k, k, k), dtype=np.result_type(grad_out.dtype, x.dtype))
    for idx, off in kernel_offsets(k):
        sx, sy, sz = (o * dilation for o in off)
        ax, bx = _overlap(sx, nx)
        ay, by = _overlap(sy, ny)
        az, bz = _overlap(sz, nz)
        if ax >= bx or ay >= by or az >= bz:
            continue
        g = grad_out[:, ax:bx, ay:by, az:bz]
        src = x[:, ax + sx:bx + sx, ay + sy:by + sy, az + sz:bz + sz]
        gw[(slice(None), slice(None)) + idx] = np.tensordot(g, src, axes=([1, 2, 3], [1, 2, 3]))
    return gw


def conv_input_grad(grad_out, w, dilation):
    """Gradient with respect to the convolution input: correlation with the flipped,
    channel-transposed kernel at the same dilation."""
    w_t = np.ascontiguousarray(np.flip(w, axis=(2, 3, 4)).transpose(1, 0, 2, 3, 4))
    return dilated_conv3d(grad_out, w_t, dilation)


def layernorm_pf(x, eps=1e-5):
    """Parameter-free layer norm: z-score over every element of the tensor."""
    x = np.asarray(x)
    mean = x.mean(dtype=np.float64)
    var = np.mean((x - mean) ** 2, dtype=np.float64)
    return ((x - mean) / np.sqrt(var + eps)).astype(x.dtype, copy=False)


def batchnorm_stats(x, mean, var, scale, shift, eps=1e-5):
    """Inference-time batch norm with stored per-channel statistics."""
    c = x.shape[0]
    stats = [mean, var, scale, shift]
    if any(s is None for s in stats):
        raise MissingStats("batchnorm layer needs mean, var, scale and shift")
    stats = [np.asarray(s, dtype=np.float64).reshape(-1) for s in stats]
    if any(s.shape[0] != c for s in stats):
        raise MissingStats(f"statistics must cover all {c} channels")
    mean, var, scale, shift = stats
    mul = scale / np.sqrt(var + eps)
    add = shift - mean * mul
    bshape = (c,) + (1,) * (x.ndim - 1)
    return (x * mul.reshape(bshape) + add.reshape(bshape)).astype(x.dtype, copy=False)


def relu(x):
    return np.maximum(x, 0)


def argmax_mask(logits):
    """1 where the brain logit strictly exceeds the background logit; ties go to 0."""
    logits = np.asarray(logits)
    if logits.shape[0] != 2:
        raise ChannelMismatch(f"expected 2 logit channels, got {logits.shape[0]}")
    return (logits[1] > logits[0]).astype(np.uint8)
