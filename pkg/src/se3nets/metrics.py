"""Evaluation metrics.

``flow_mse_cm`` is the mean, over valid points with non-zero ground-truth
flow, of the squared Euclidean flow error with coordinates expressed in
centimetres (so the number is in cm^2, labelled "cm" like the usual tables).
"""

from itertools import permutations

import numpy as np

from .layers import hard_assign

FLOW_MSE_DEFINITION = ("flow_mse_cm: mean over valid points with |gt flow| > 1e-9 m of "
                       "|pred flow - gt flow|^2, coordinates in cm")
MOVING_EPS = 1e-9
MAX_PERMUTATION_K = 8


def _points_last(a):
    """``(..., 3, H, W)`` network layout to ``(..., H, W, 3)``."""
    a = np.asarray(a, dtype=np.float64)
    return np.moveaxis(a, -3, -1)


def flow_error_sums(pred, cloud, target, valid):
    """Sum of squared flow errors [cm^2] and the number of moving points.

    Arrays use the network layout ``(N, 3, H, W)`` / ``(3, H, W)``;
    ``valid`` is ``(N, H, W)`` / ``(H, W)``.
    """
    pred, cloud, target = _points_last(pred), _points_last(cloud), _points_last(target)
    gt_flow = target - cloud
    moving = np.asarray(valid, dtype=bool) & (np.linalg.norm(gt_flow, axis=-1) > MOVING_EPS)
    err = (pred - cloud) - gt_flow
    sq = (err * err).sum(axis=-1) * 1e4
    return float(sq[moving].sum()), int(moving.sum())


def eval_flow_mse(pred, cloud, target, valid):
    """Returns ``(flow_mse_cm, defined)``; with no moving point the value is 0 and ``defined`` False."""
    total, count = flow_error_sums(pred, cloud, target, valid)
    if count == 0:
        return 0.0, False
    return total / count, True


def mask_entropy(m, valid=None):
    """Mean per-pixel Shannon entropy [nats] of a ``k x H x W`` (or batched) mask stack."""
    m = np.asarray(getattr(m, "data", m), dtype=np.float64)
    ax = 0 if m.ndim == 3 else 1
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(m > 0, -m * np.log(m), 0.0)
    ent = terms.sum(axis=ax)
    if valid is not None:
        return float(ent[np.asarray(valid, dtype=bool)].mean())
    return float(ent.mean())


def seg_accuracy(m, labels, valid=None):
    """Best channel-to-label permutation accuracy of the hard-assigned masks.

    ``m`` is a single ``k x H x W`` stack. Channels mapped to a label that
    does not occur count as wrong.
    """
    m = np.asarray(getattr(m, "data", m), dtype=np.float64)
    k = m.shape[0]
    if k > MAX_PERMUTATION_K:
        raise ValueError(f"seg_accuracy enumerates permutations; k={k} > {MAX_PERMUTATION_K}")
    pred, _ = hard_assign(m)
    labels = np.asarray(labels, dtype=np.int64)
    sel = np.ones(labels.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    total = int(sel.sum())
    if total == 0:
        return 1.0
    n_labels = max(k, int(labels[sel].max()) + 1)
    confusion = np.zeros((k, n_labels), dtype=np.int64)
    np.add.at(confusion, (pred[sel], labels[sel]), 1)
    perms = np.array(list(permutations(range(n_labels), k)))
    scores = confusion[np.arange(k)[None, :], perms].sum(axis=1)
    return float(scores.max()) / total
