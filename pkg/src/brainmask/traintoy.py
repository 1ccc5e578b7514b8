"""Desk-scale training of small dilated networks on synthetic shapes.

Gradients are computed by hand-written reverse mode through every layer type
used in training (dilated convolution with optional bias, parameter-free
layer norm, ReLU), the two-class softmax, and the soft Dice loss.  All
arithmetic inside the loss and gradient path runs in float64; the stored
weights stay float32.

With ``checkpoint=True`` (the default) the backward pass keeps no per-layer
activations: the input of layer ``l`` is recomputed from the network input
when it is needed, so live memory is a constant number of layer tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np
from scipy.special import expit

from .errors import DivergedLoss, ShapeMismatch
from .meshnet import ops
from .meshnet.spec import NetworkSpec
from .meshnet.weights import LayerWeights, WeightStore, init_weights

SMOOTH = 1.0


@dataclass
class TrainConfig:
    max_lr: float = 0.02
    total_steps: int = 500
    cycles: int = 1
    pct_warmup: float = 0.25
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 2
    seed: int = 0
    checkpoint: bool = True

    def __post_init__(self):
        if not 0 < self.pct_warmup < 1:
            raise ValueError("pct_warmup must lie in (0, 1)")
        if self.cycles < 1 or self.total_steps < self.cycles:
            raise ValueError("need total_steps >= cycles >= 1")

    @property
    def cycle_len(self) -> int:
        return self.total_steps // self.cycles


# --- loss -----------------------------------------------------------------

def soft_dice_loss(prob, target, smooth: float = SMOOTH) -> float:
    """``1 - (2 sum(p g) + s) / (sum(p) + sum(g) + s)``."""
    p = np.asarray(prob, dtype=np.float64)
    g = np.asarray(getattr(target, "data", target), dtype=np.float64)
    if p.shape != g.shape:
        raise ShapeMismatch(f"probabilities {p.shape} vs target {g.shape}")
    num = 2.0 * np.sum(p * g) + smooth
    den = np.sum(p) + np.sum(g) + smooth
    return float(1.0 - num / den)


def soft_dice_grad(prob, target, smooth: float = SMOOTH):
    p = np.asarray(prob, dtype=np.float64)
    g = np.asarray(target, dtype=np.float64)
    num = 2.0 * np.sum(p * g) + smooth
    den = np.sum(p) + np.sum(g) + smooth
    return -(2.0 * g * den - num) / den ** 2


# --- reverse mode ----------------------------------------------------------

@dataclass
class _Cache:
    z: np.ndarray            # conv output
    yhat: Optional[np.ndarray]  # normalised conv output (None if no norm)
    inv_std: float
    a: np.ndarray            # layer output after activation


def _layer_forward(ls, lw, a_prev, eps):
    if ls.norm == "batchnorm_stats":
        raise NotImplementedError("training supports paramfree_layernorm and no-norm layers only")
    w = lw.weight.astype(np.float64)
    b = None if lw.bias is None else lw.bias.astype(np.float64)
    z = ops.dilated_conv3d(a_prev, w, ls.dilation, b)
    if ls.norm == "paramfree_layernorm":
        mean = z.mean()
        inv_std = 1.0 / math.sqrt(np.mean((z - mean) ** 2) + eps)
        yhat = (z - mean) * inv_std
        y = yhat
    else:
        yhat, inv_std, y = None, 1.0, z
    a = np.maximum(y, 0.0) if ls.activation == "relu" else y
    return _Cache(z, yhat, inv_std, a)


def _layer_backward(ls, lw, a_prev, cache, grad_a, need_input_grad=True):
    g = grad_a
    if ls.activation == "relu":
        pre = cache.yhat if cache.yhat is not None else cache.z
        g = g * (pre > 0)
    if ls.norm == "paramfree_layernorm":
        yhat = cache.yhat
        g = (g - g.mean() - yhat * np.mean(g * yhat)) * cache.inv_std
    k = ls.kernel_size
    gw = ops.conv_weight_grad(g, a_prev, k, ls.dilation)
    gb = g.sum(axis=(1, 2, 3)) if ls.has_bias else None
    w = lw.weight.astype(np.float64)
    ga = ops.conv_input_grad(g, w, ls.dilation) if need_input_grad else None
    return ga, LayerWeights(gw, gb)


def _forward_to(spec, weights, x, upto):
    a = x
    for ls, lw in zip(spec.layers[:upto], weights.layers[:upto]):
        a = _layer_forward(ls, lw, a, spec.eps).a
    return a


def brain_probability(logits):
    return expit(logits[1] - logits[0])


def backward(spec: NetworkSpec, weights: WeightStore, volume, target, checkpoint: bool = True):
    """Soft Dice loss of one sample and its gradient for every weight and bias.

    Returns ``(loss, grads)`` where ``grads`` is a list of :class:`LayerWeights`
    mirroring ``weights.layers`` (float64).
    """
    x = np.asarray(getattr(volume, "data", volume), dtype=np.float64)
    if x.ndim == 3:
        x = x[np.newaxis]
    g_t = np.asarray(getattr(target, "data", target), dtype=np.float64)
    if g_t.shape != x.shape[1:]:
        raise ShapeMismatch(f"target {g_t.shape} vs volume {x.shape[1:]}")
    n = len(spec.layers)
    if spec.layers[-1].out_channels != 2:
        raise ShapeMismatch("training needs a 2-channel final layer")

    stored = None
    if checkpoint:
        a_last_in = _forward_to(spec, weights, x, n - 1)
    else:
        stored = [x]
        for ls, lw in zip(spec.layers, weights.layers):
            stored.append(_layer_forward(ls, lw, stored[-1], spec.eps).a)
        a_last_in = stored[n - 1]
    cache = _layer_forward(spec.layers[-1], weights.layers[-1], a_last_in, spec.eps)
    logits = cache.a
    p = brain_probability(logits)
    loss = soft_dice_loss(p, g_t)
    dp = soft_dice_grad(p, g_t) * p * (1.0 - p)
    grad_a = np.stack([-dp, dp])

    grads: List[Optional[LayerWeights]] = [None] * n
    for l in range(n - 1, -1, -1):
        if l < n - 1:
            a_in = _forward_to(spec, weights, x, l) if checkpoint else stored[l]
            cache = _layer_forward(spec.layers[l], weights.layers[l], a_in, spec.eps)
        else:
            a_in = a_last_in
        grad_a, grads[l] = _layer_backward(spec.layers[l], weights.layers[l], a_in, cache,
                                           grad_a, need_input_grad=l > 0)
    return loss, grads


def loss_only(spec, weights, volume, target) -> float:
    x = np.asarray(getattr(volume, "data", volume), dtype=np.float64)
    if x.ndim == 3:
        x = x[np.newaxis]
    logits = _forward_to(spec, weights, x, len(spec.layers))
    return soft_dice_loss(brain_probability(logits), target)


# --- optimiser and schedule -------------------------------------------------

def onecycle_lr(step: int, cycle_len: int, config: TrainConfig) -> float:
    """Linear warm-up to ``max_lr`` then cosine decay to 0, repeating every cycle."""
    s = step % cycle_len
    warm = config.pct_warmup * cycle_len
    if s < warm:
        return config.max_lr * s / warm
    frac = (s - warm) / (cycle_len - warm)
    return config.max_lr * (1.0 + math.cos(math.pi * frac)) / 2.0


@dataclass
class GradStore:
    grads: List[LayerWeights]
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)


def _params(store: WeightStore):
    out = []
    for lw in store.layers:
        out.append(lw.weight)
        if lw.bias is not None:
            out.append(lw.bias)
    return out


def _flat_grads(grads: List[LayerWeights]):
    out = []
    for g in grads:
        out.append(g.weight)
        if g.bias is not None:
            out.append(g.bias)
    return out


def zero_moments(store: WeightStore):
    return ([np.zeros(p.shape) for p in _params(store)],
            [np.zeros(p.shape) for p in _params(store)])


def adam_update(w, g, m, v, step, lr, config: TrainConfig):
    """Single Adam update with bias correction; works on scalars or arrays."""
    m = config.beta1 * m + (1 - config.beta1) * g
    v = config.beta2 * v + (1 - config.beta2) * g * g
    m_hat = m / (1 - config.beta1 ** step)
    v_hat = v / (1 - config.beta2 ** step)
    return w - lr * m_hat / (np.sqrt(v_hat) + config.eps), m, v


def adam_step(weights: WeightStore, grads: List[LayerWeights], moments, step: int, lr: float,
              config: TrainConfig) -> WeightStore:
    """Apply one Adam step in place; ``moments`` is the ``(m, v)`` pair of lists."""
    if step < 1:
        raise ValueError("Adam steps are counted from 1")
    ms, vs = moments
    for i, (p, g) in enumerate(zip(_params(weights), _flat_grads(grads))):
        new, ms[i], vs[i] = adam_update(p.astype(np.float64), g, ms[i], vs[i], step, lr, config)
        p[...] = new.astype(np.float32)
    return weights


# --- synthetic data and the training loop ----------------------------------

@dataclass
class NoisySpheres:
    """Bright balls in noise, each wrapped in a dimmer shell standing in for the skull."""

    size: int = 24
    radius: tuple = (4.0, 8.0)
    noise: float = 0.1
    shell: float = 0.4

    def __post_init__(self):
        lo, hi = self.radius
        if not 0 < lo <= hi or 2 * hi > self.size - 1:
            raise ValueError(f"radius range {self.radius} does not fit a {self.size}^3 grid")

    @classmethod
    def scaled(cls, size: int, **kw):
        """Task on a ``size``^3 grid with radii in the same proportion as the 24^3 default."""
        return cls(size=size, radius=(size / 6, size / 3), **kw)

    def sample(self, rng: np.random.Generator):
        n = self.size
        r = rng.uniform(*self.radius)
        c = rng.uniform(r, n - 1 - r, size=3)
        grid = np.indices((n, n, n), dtype=np.float64)
        dist = np.sqrt(((grid - c.reshape(3, 1, 1, 1)) ** 2).sum(axis=0))
        mask = (dist <= r).astype(np.uint8)
        img = np.where(dist <= r, rng.uniform(0.7, 1.0), 0.0)
        img = img + np.where((dist > r + 1) & (dist <= r + 2.5), self.shell, 0.0)
        img = img + rng.normal(0.0, self.noise, img.shape)
        lo, hi = np.percentile(img, [2, 98])
        img = np.clip((img - lo) / (hi - lo), 0, 1)
        return img.astype(np.float32), mask

    def batch(self, rng, k):
        return [self.sample(rng) for _ in range(k)]


def predict_mask(spec, weights, volume):
    x = np.asarray(volume, dtype=np.float64)[np.newaxis]
    logits = _forward_to(spec, weights, x, len(spec.layers))
    return ops.argmax_mask(logits)


def _dice(a, b):
    a, b = a.astype(bool), b.astype(bool)
    s = a.sum() + b.sum()
    return 1.0 if s == 0 else 2.0 * np.count_nonzero(a & b) / s


def evaluate_dice(spec, weights, samples) -> float:
    return float(np.mean([_dice(predict_mask(spec, weights, x), m) for x, m in samples]))


def train_toy(spec: NetworkSpec, config: TrainConfig, task=None,
              log: Optional[Callable[[dict], None]] = None,
              init: Optional[WeightStore] = None) -> WeightStore:
    """Train ``spec`` on freshly drawn synthetic samples; deterministic per seed.

    ``log`` receives ``{"step", "lr", "loss", "dice"}`` after every step, where
    ``dice`` is the hard Dice of the training batch before the update.
    """
    task = task or NoisySpheres()
    rng = np.random.default_rng(config.seed)
    weights = init.copy() if init is not None else init_weights(spec, config.seed)
    moments = zero_moments(weights)
    for step in range(config.total_steps):
        lr = onecycle_lr(step, config.cycle_len, config)
        batch = task.batch(rng, config.batch_size)
        total_loss, total = 0.0, None
        dices = []
        for x, m in batch:
            loss, grads = backward(spec, weights, x, m, checkpoint=config.checkpoint)
            if not math.isfinite(loss):
                raise DivergedLoss(f"loss became {loss} at step {step}")
            total_loss += loss
            if log is not None:
                dices.append(_dice(predict_mask(spec, weights, x), m))
            if total is None:
                total = grads
            else:
                for acc, g in zip(total, grads):
                    acc.weight += g.weight
                    if g.bias is not None:
                        acc.bias += g.bias
        k = len(batch)
        for g in total:
            g.weight /= k
            if g.bias is not None:
                g.bias /= k
        adam_step(weights, total, moments, step + 1, lr, config)
        if log is not None:
            log({"step": step, "lr": lr, "loss": total_loss / k, "dice": float(np.mean(dices))})
    return weights
