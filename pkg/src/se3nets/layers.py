"""Mask normalization, weight sharpening and the SE(3) blend layer.

Mask stacks are ``k x H x W`` (or ``N x k x H x W``) non-negative weights
that sum to one over the channel axis at every pixel.
"""

from dataclasses import dataclass

import numpy as np

from .se3 import exp_map_t
from .tensor import ShapeError, Tensor, _channel_axis, _record, as_tensor, channel_softmax

SHARPEN_FLOOR = 1e-6


def normalize_masks(logits):
    return channel_softmax(logits)


@dataclass
class SharpeningSchedule:
    """Linear ramp of the sharpening noise and exponent over the first epochs."""

    sigma_max: float = 0.1
    gamma_max: float = 4.0
    ramp_epochs: float = 30.0

    @classmethod
    def for_training(cls, epochs, sigma_max=0.1, gamma_max=4.0, ramp_fraction=0.5):
        return cls(sigma_max, gamma_max, max(ramp_fraction * epochs, 1e-12))

    @classmethod
    def disabled(cls):
        return cls(0.0, 1.0, 1.0)

    def _progress(self, epoch):
        if self.ramp_epochs <= 0:
            return 1.0
        return min(max(epoch, 0) / self.ramp_epochs, 1.0)

    def sigma(self, epoch):
        return self.sigma_max * self._progress(epoch)

    def gamma(self, epoch):
        return 1.0 + (self.gamma_max - 1.0) * self._progress(epoch)


def sharpen_masks(m, schedule, epoch, rng_seed=0, train_mode=True):
    """Noisy power sharpening ``(m + eps)^gamma`` followed by renormalization.

    The noise is drawn from ``N(0, sigma^2)`` with a generator seeded by
    ``rng_seed`` and is a constant for backward. Eval mode drops the noise but
    keeps the exponent.
    """
    m = as_tensor(m)
    if m.ndim not in (3, 4):
        raise ShapeError(f"mask stack must be 3-D or 4-D, got {m.shape}")
    ax = _channel_axis(m.ndim)
    gamma = float(schedule.gamma(epoch))
    sigma = float(schedule.sigma(epoch)) if train_mode else 0.0

    base = m.data
    if sigma > 0.0:
        base = base + np.random.default_rng(rng_seed).normal(0.0, sigma, size=base.shape)
    clamped = base < SHARPEN_FLOOR
    base = np.maximum(base, SHARPEN_FLOOR)
    powered = base ** gamma
    total = powered.sum(axis=ax, keepdims=True)
    out = powered / total

    def bw(g):
        gp = (g - (g * out).sum(axis=ax, keepdims=True)) / total
        dp = np.where(clamped, 0.0, gamma * base ** (gamma - 1.0))
        return (gp * dp,)

    return _record(out, (m,), bw, "sharpen_masks")


def _blend(x, masks, rot, trans):
    """``y_j = sum_i m_ij (R_i x_j + t_i)`` on flattened batched operands.

    Shapes: x ``(N, 3, P)``, masks ``(N, k, P)``, rot ``(N, k, 3, 3)``,
    trans ``(N, k, 3)``.
    """
    xd, md, rd, td = x.data, masks.data, rot.data, trans.data
    moved = np.einsum("nkab,nbp->nkap", rd, xd) + td[..., None]
    # Blend as offsets from the per-pixel dominant channel a:
    #   y = z_a + sum_i m_i (z_i - z_a),
    # equal to sum_i m_i z_i whenever the weights sum to one, but exact when
    # all z_i coincide (identity transforms) or a single channel carries the
    # pixel (k = 1, one-hot masks).
    anchor = md.argmax(axis=1)
    base = np.take_along_axis(moved, anchor[:, None, None, :], axis=1)[:, 0]
    offsets = moved - base[:, None]
    y = base + np.einsum("nkp,nkap->nap", md, offsets)
    # effective per-channel weights of the z_i terms
    weights = md.copy()
    idx = anchor[:, None, :]
    np.put_along_axis(weights, idx, 0.0, axis=1)
    np.put_along_axis(weights, idx, (1.0 - weights.sum(axis=1))[:, None, :], axis=1)

    def bw(g):
        gx = gm = gr = gt = None
        if x.requires_grad:
            gx = np.einsum("nkab,nkp,nap->nbp", rd, weights, g)
        if masks.requires_grad:
            gm = np.einsum("nap,nkap->nkp", g, offsets)
        if rot.requires_grad or trans.requires_grad:
            wg = np.einsum("nkp,nap->nkap", weights, g)
            if rot.requires_grad:
                gr = np.einsum("nkap,nbp->nkab", wg, xd)
            if trans.requires_grad:
                gt = wg.sum(axis=-1)
        return gx, gm, gr, gt

    return _record(y, (x, masks, rot, trans), bw, "se3_blend")


def transform_layer(x, masks, rotations, translations):
    """Blend ``k`` rigid transforms of the input cloud with per-point weights.

    ``x``: ``3 x H x W`` cloud (or ``N x 3 x H x W``); ``masks``: matching
    ``k x H x W`` stack; ``rotations`` / ``translations``: ``k x 3`` (or
    ``N x k x 3``) axis-angle vectors and translations.
    """
    x, masks = as_tensor(x), as_tensor(masks)
    rotations, translations = as_tensor(rotations), as_tensor(translations)
    single = x.ndim == 3
    if single:
        x, masks = x.reshape((1,) + x.shape), masks.reshape((1,) + masks.shape)
        rotations = rotations.reshape((1,) + rotations.shape)
        translations = translations.reshape((1,) + translations.shape)
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"cloud must be 3 x H x W (optionally batched), got {x.shape}")
    n, _, h, w = x.shape
    if masks.ndim != 4 or masks.shape[0] != n or masks.shape[2:] != (h, w):
        raise ShapeError(f"mask stack {masks.shape} does not match cloud {x.shape}")
    k = masks.shape[1]
    if rotations.shape != (n, k, 3) or translations.shape != (n, k, 3):
        raise ShapeError(f"need {k} transforms per cloud, got {rotations.shape} / {translations.shape}")
    rot = exp_map_t(rotations)
    y = _blend(x.reshape((n, 3, h * w)), masks.reshape((n, k, h * w)), rot, translations)
    y = y.reshape((n, 3, h, w))
    return y.reshape((3, h, w)) if single else y


def hard_assign(m):
    """Per-pixel argmax labels and the matching one-hot stack.

    Ties go to the lowest channel index.
    """
    data = m.data if isinstance(m, Tensor) else np.asarray(m, dtype=np.float64)
    ax = _channel_axis(data.ndim)
    k = data.shape[ax]
    labels = np.argmax(data, axis=ax)
    onehot = (np.expand_dims(labels, ax) == np.arange(k).reshape([-1 if i == ax else 1 for i in range(data.ndim)]))
    return labels, onehot.astype(np.float64)
