"""Multi-step prediction by feeding the model its own output."""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import hard_assign
from .metrics import flow_error_sums
from .model import Prediction
from .se3 import RigidTransform, compose

RIGIDITY_SAMPLE = 400


class TrueTransformModel:
    """Oracle that moves each pixel with its label's ground-truth transform.

    Points keep their pixel index across steps, so the label image of the
    first frame stays valid for every fed-back cloud.
    """

    def __init__(self, frame):
        self.frame = frame
        self.labels = np.asarray(frame.labels, dtype=np.int64)
        self.transforms = [frame.transform(i) for i in range(len(frame.transforms))]

    def forward(self, x, u=None, epoch=0, mode="eval", rng_seed=0, hard=False, skip_add=None):
        x = np.asarray(getattr(x, "data", x), dtype=np.float64)
        single = x.ndim == 3
        xb = x[None] if single else x
        out = xb.copy()
        k = len(self.transforms)
        masks = np.zeros((xb.shape[0], k) + xb.shape[2:])
        for i, tr in enumerate(self.transforms):
            sel = self.labels == i
            pts = np.moveaxis(xb[:, :, sel], 1, -1)   # (N, P, 3)
            out[:, :, sel] = np.moveaxis(tr.apply(pts), -1, 1)
            masks[:, i][:, sel] = 1.0
        if single:
            out, masks = out[0], masks[0]
        return Prediction(T.Tensor(out), T.Tensor(masks))


def ground_truth_targets(frame, steps):
    """``steps`` clouds ``T^t X`` per label, built by composing the per-step transform."""
    cloud = np.asarray(frame.cloud, dtype=np.float64)
    out = [np.empty_like(cloud) for _ in range(steps)]
    for label in range(len(frame.transforms)):
        sel = frame.labels == label
        if not sel.any():
            continue
        step = frame.transform(label)
        acc = RigidTransform.identity()
        for t in range(steps):
            acc = compose(step, acc)
            out[t][sel] = acc.apply(cloud[sel])
    return out


def segment_rigidity_error(before, after, labels, valid, sample=RIGIDITY_SAMPLE):
    """Largest change of a within-segment pairwise distance between two ``(H, W, 3)`` clouds.

    Segments with more than ``sample`` points are checked on an evenly spaced
    subset, which keeps the cost bounded on large grids.
    """
    worst = 0.0
    valid = np.asarray(valid, dtype=bool)
    for seg in np.unique(labels[valid]):
        idx = np.flatnonzero((labels == seg) & valid)
        if len(idx) > sample:
            idx = idx[np.linspace(0, len(idx) - 1, sample).astype(np.int64)]
        a = before.reshape(-1, 3)[idx]
        b = after.reshape(-1, 3)[idx]
        da = np.linalg.norm(a[:, None] - a[None], axis=-1)
        db = np.linalg.norm(b[:, None] - b[None], axis=-1)
        if len(idx):
            worst = max(worst, float(np.abs(da - db).max()))
    return worst


@dataclass
class RolloutResult:
    clouds: list                       # predicted (H, W, 3) clouds, one per step
    targets: list                      # ground-truth multi-step clouds
    errors: list                       # per-step flow MSE [cm^2] w.r.t. the first frame
    moving_points: list
    rigidity: list = field(default_factory=list)   # per-step max within-segment distance change
    notes: list = field(default_factory=list)

    @property
    def finite(self):
        return all(np.isfinite(e) for e in self.errors) and all(np.isfinite(c).all() for c in self.clouds)


def rollout(model, frame, steps, u=None, hard=True, epoch=0):
    """Feed predictions back ``steps`` times with the action held fixed."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    u = np.asarray(frame.action if u is None else u, dtype=np.float64)
    x0 = np.asarray(frame.cloud, dtype=np.float64)
    valid = np.asarray(frame.valid, dtype=bool)
    targets = ground_truth_targets(frame, steps)
    result = RolloutResult([], targets, [], [])
    current = x0
    with T.no_grad():
        for t in range(steps):
            pred = model.forward(current.transpose(2, 0, 1), u, epoch=epoch, mode="eval", hard=hard)
            nxt = pred.cloud.data.transpose(1, 2, 0).copy()
            result.clouds.append(nxt)
            if pred.masks is not None:
                seg, _ = hard_assign(pred.masks.data)
                result.rigidity.append(segment_rigidity_error(current, nxt, seg, valid) if hard else float("nan"))
            total, count = flow_error_sums(nxt.transpose(2, 0, 1), x0.transpose(2, 0, 1),
                                           targets[t].transpose(2, 0, 1), valid)
            result.errors.append(total / count if count else 0.0)
            result.moving_points.append(count)
            if not np.isfinite(nxt).all():
                result.notes.append(f"step {t + 1}: non-finite prediction")
            elif count == 0:
                result.notes.append(f"step {t + 1}: no moving ground-truth points, error reported as 0")
            current = nxt
    return result
