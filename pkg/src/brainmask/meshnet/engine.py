"""Two-buffer (ping-pong) inference.

Because every layer maps a (C, X, Y, Z) tensor to another tensor with the same
spatial shape, inference only ever needs the current layer's input and
output.  The engine allocates exactly two activation buffers, each sized for
the widest layer, and alternates between them.  Normalisation and the
activation are applied in place on the output buffer.

Allocations go through an :class:`AllocationLedger` so callers can verify
the memory bound without relying on process-level measurements.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from ..errors import ChannelMismatch, WeightShapeMismatch
from . import ops
from .spec import NetworkSpec
from .weights import WeightStore, validate

THREADS_ENV = "BRAINMASK_THREADS"


def default_threads() -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass
class AllocationLedger:
    """Tracks activation-buffer bytes held by the engine."""

    current_bytes: int = 0
    peak_bytes: int = 0
    n_buffers: int = 0
    peak_buffers: int = 0
    scratch_bytes: int = 0
    events: List[tuple] = field(default_factory=list)

    def alloc(self, n_scalars: int, dtype=np.float32) -> np.ndarray:
        arr = np.empty(n_scalars, dtype=dtype)
        self.current_bytes += arr.nbytes
        self.n_buffers += 1
        self.peak_bytes = max(self.peak_bytes, self.current_bytes)
        self.peak_buffers = max(self.peak_buffers, self.n_buffers)
        self.events.append(("alloc", arr.nbytes))
        return arr

    def free(self, arr: np.ndarray) -> None:
        self.current_bytes -= arr.nbytes
        self.n_buffers -= 1
        self.events.append(("free", arr.nbytes))

    def note_scratch(self, nbytes: int) -> None:
        self.scratch_bytes = max(self.scratch_bytes, nbytes)


def activation_bound_bytes(spec: NetworkSpec, spatial_shape, itemsize: int = 4) -> int:
    """Upper bound on activation memory: two buffers of the widest layer."""
    return 2 * spec.max_channels * int(np.prod(spatial_shape)) * itemsize


class _Runner:
    def __init__(self, threads: int, spatial_shape, slab_voxels: int):
        self.threads = max(1, int(threads))
        nx, ny, nz = spatial_shape
        self.slabs = ops.slabs(nx, ny * nz, slab_voxels)
        self.pool = ThreadPoolExecutor(self.threads) if self.threads > 1 else None

    def map(self, fn):
        if self.pool is None:
            return [fn(s) for s in self.slabs]
        return list(self.pool.map(fn, self.slabs))

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()


def _layernorm_inplace(buf, eps, runner):
    # per-slab partial sums reduced in slab order: identical for any thread count
    def moments(s):
        part = buf[:, s[0]:s[1]]
        return part.sum(dtype=np.float64), part.size

    parts = runner.map(moments)
    n = sum(p[1] for p in parts)
    mean = sum(p[0] for p in parts) / n

    def sq(s):
        part = buf[:, s[0]:s[1]].astype(np.float64) - mean
        return np.dot(part.ravel(), part.ravel())

    var = sum(runner.map(sq)) / n
    return mean, 1.0 / np.sqrt(var + eps)


def forward(spec: NetworkSpec, weights: WeightStore, volume_normed, *, threads: Optional[int] = None,
            ledger: Optional[AllocationLedger] = None, slab_voxels: int = 1 << 16) -> np.ndarray:
    """Run the network on a single-channel volume; returns (C_final, X, Y, Z) logits.

    The returned array is a view into one of the two engine buffers.
    """
    validate(spec, weights.layers)
    if weights.spec.fingerprint() != spec.fingerprint():
        raise WeightShapeMismatch("weights were built for a different architecture")
    x = np.asarray(getattr(volume_normed, "data", volume_normed), dtype=np.float32)
    if x.ndim == 4:
        if x.shape[0] != 1:
            raise ChannelMismatch(f"expected a single input channel, got {x.shape[0]}")
        x = x[0]
    if x.ndim != 3:
        raise ValueError(f"expected a 3D volume, got shape {x.shape}")
    if not spec.layers:
        return x[np.newaxis].copy()
    if spec.layers[0].in_channels != 1:
        raise ChannelMismatch("first layer must take a single input channel")

    ledger = ledger if ledger is not None else AllocationLedger()
    shape = x.shape
    nvox = int(np.prod(shape))
    cmax = spec.max_channels
    runner = _Runner(threads if threads is not None else default_threads(), shape, slab_voxels)
    slab_max = max(b - a for a, b in runner.slabs) * shape[1] * shape[2]
    ledger.note_scratch(runner.threads * 2 * cmax * slab_max * 4)

    buf_a = ledger.alloc(cmax * nvox)
    buf_b = ledger.alloc(cmax * nvox)
    try:
        src = buf_a[:nvox].reshape((1,) + shape)
        src[0] = x
        cur, nxt = buf_a, buf_b
        for ls, lw in zip(spec.layers, weights.layers):
            inp = cur[:ls.in_channels * nvox].reshape((ls.in_channels,) + shape)
            out = nxt[:ls.out_channels * nvox].reshape((ls.out_channels,) + shape)
            w = lw.weight

            def conv(s, out=out, inp=inp, w=w, ls=ls, lw=lw):
                ops.conv_slab(out, inp, w, ls.dilation, lw.bias, s)

            runner.map(conv)

            if ls.norm == "paramfree_layernorm":
                mean, inv_std = _layernorm_inplace(out, spec.eps, runner)
                mul = np.full(ls.out_channels, inv_std)
                add = np.full(ls.out_channels, -mean * inv_std)
            elif ls.norm == "batchnorm_stats":
                bn = {k: np.asarray(v, np.float64) for k, v in lw.bn.items()}
                mul = bn["scale"] / np.sqrt(bn["var"] + spec.eps)
                add = bn["shift"] - bn["mean"] * mul
            else:
                mul = add = None

            if mul is not None or ls.activation == "relu":
                mul32 = None if mul is None else mul.astype(np.float32).reshape(-1, 1, 1, 1)
                add32 = None if add is None else add.astype(np.float32).reshape(-1, 1, 1, 1)

                def finish(s, out=out, mul32=mul32, add32=add32, relu=ls.activation == "relu"):
                    part = out[:, s[0]:s[1]]
                    if mul32 is not None:
                        part *= mul32
                        part += add32
                    if relu:
                        np.maximum(part, 0, out=part)

                runner.map(finish)
            cur, nxt = nxt, cur
    finally:
        runner.close()
    # the final output lives in ``cur``; the other buffer is released
    ledger.free(nxt)
    c_final = spec.layers[-1].out_channels
    return cur[:c_final * nvox].reshape((c_final,) + shape)


def forward_reference(spec: NetworkSpec, weights: WeightStore, volume) -> list:
    """Layer-by-layer forward that keeps every intermediate tensor.

    Slow and memory hungry; used to cross-check :func:`forward`.
    """
    x = np.asarray(getattr(volume, "data", volume), dtype=np.float32)
    acts = [x[np.newaxis]]
    for ls, lw in zip(spec.layers, weights.layers):
        y = ops.dilated_conv3d(acts[-1], lw.weight, ls.dilation, lw.bias, out_dtype=np.float32)
        if ls.norm == "paramfree_layernorm":
            y = ops.layernorm_pf(y, spec.eps)
        elif ls.norm == "batchnorm_stats":
            y = ops.batchnorm_stats(y, lw.bn["mean"], lw.bn["var"], lw.bn["scale"], lw.bn["shift"],
                                    spec.eps)
        if ls.activation == "relu":
            y = ops.relu(y)
        acts.append(y)
    return acts
