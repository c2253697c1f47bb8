"""ADAM, the training loop and split-level evaluation."""

import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .dataset import Dataset, read_dataset
from .layers import SharpeningSchedule, hard_assign
from .metrics import flow_error_sums, mask_entropy, seg_accuracy
from .model import ConfigError, ModelConfig, build_model, canonical_variant, save_checkpoint

log = logging.getLogger(__name__)

LOSS_MODES = ("all_points", "moving_points")
EVAL_BATCH = 64


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, t=None):
    """One bias-corrected ADAM update, in place on the ``params`` arrays.

    ``t`` is the 1-based step number; it defaults to ``state.t + 1``.
    """
    t = state.t + 1 if t is None else t
    if t < 1:
        raise ValueError("ADAM step number must be >= 1")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and ADAM state differ in length")
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch in ADAM step: {p.shape} vs {g.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    state.t = t
    return params, state


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    sigma_max: float = 0.1
    gamma_max: float = 4.0
    ramp_fraction: float = 0.5
    loss_mode: str = "all_points"
    seed: int = 0
    data: str = None
    variant: str = "se3net"
    k: int = 3
    split: float = 0.7
    checkpoint_every: int = 10
    out: str = None
    model_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        self.variant = canonical_variant(self.variant)
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {LOSS_MODES}")

    def schedule(self):
        if self.variant != "se3net":
            return SharpeningSchedule.disabled()
        return SharpeningSchedule.for_training(self.epochs, self.sigma_max, self.gamma_max, self.ramp_fraction)


@dataclass
class MetricsReport:
    flow_mse_cm: float
    moving_points: int
    mask_entropy: float = float("nan")
    seg_accuracy: float = float("nan")
    occupancy: list = field(default_factory=list)
    transform_deviation: list = field(default_factory=list)
    loss_curve: list = field(default_factory=list)
    rollout_error: list = field(default_factory=list)
    train_seconds: float = 0.0


@dataclass
class TrainResult:
    model: object
    report: MetricsReport
    loss_curve: list
    epochs: int
    seconds: float


def model_config_for(dataset, cfg):
    m = dataset.manifest
    kwargs = dict(k=cfg.k, n=m["n"], height=m["H"], width=m["W"], variant=cfg.variant, seed=cfg.seed,
                  scale_divisor=m.get("scale_divisor", 1.0))
    kwargs.update(cfg.model_overrides)
    return ModelConfig(**kwargs)


def loss_weights(cloud, target, valid, mode):
    if mode == "all_points":
        w = valid
    else:
        w = valid & (np.linalg.norm(target - cloud, axis=1) > 1e-9)
    return w[:, None].astype(np.float64)


def train(cfg, dataset=None, test=None, log_every=None):
    """Train ``cfg.variant``; returns the model, test metrics and the epoch loss curve.

    ``dataset`` (or ``cfg.data``) is split ``cfg.split`` : rest unless an
    explicit ``test`` set is given, in which case ``dataset`` is used whole
    for training.
    """
    if dataset is None:
        if cfg.data is None:
            raise ConfigError("no dataset given")
        dataset = read_dataset(cfg.data)
    if test is None:
        train_set, test_set = dataset.split(cfg.split)
    else:
        train_set, test_set = dataset, test
    if len(train_set) == 0:
        raise ConfigError("training split is empty")
    mcfg = model_config_for(train_set, cfg)
    schedule = cfg.schedule()
    model = build_model(mcfg, schedule=schedule)
    start = time.perf_counter()
    curve = []
    if cfg.variant != "no_motion":
        x_all, u_all, y_all, _, v_all = train_set.arrays()
        params = model.params.tensors()
        state = AdamState.zeros_like([p.data for p in params])
        n = len(train_set)
        for epoch in range(cfg.epochs):
            order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
            total, batches = 0.0, 0
            for b, lo in enumerate(range(0, n, cfg.batch_size)):
                idx = np.sort(order[lo:lo + cfg.batch_size])
                x, u, y, v = x_all[idx], u_all[idx], y_all[idx], v_all[idx]
                pred = model.forward(x, u, epoch=epoch, mode="train", rng_seed=[cfg.seed, epoch, b])
                loss = T.mse_loss(pred.cloud, y, loss_weights(x, y, v, cfg.loss_mode))
                model.params.zero_grad()
                if loss.requires_grad:
                    T.backward(loss)
                adam_step([p.data for p in params],
                          [np.zeros_like(p.data) if p.grad is None else p.grad for p in params],
                          state, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
                total += float(loss.data)
                batches += 1
            curve.append(total / batches)
            if log_every and (epoch + 1) % log_every == 0:
                log.info("%s epoch %d loss %.6g", cfg.variant, epoch + 1, curve[-1])
            if cfg.out and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(_periodic_path(cfg.out, epoch + 1), model, epoch + 1)
    final_epoch = cfg.epochs
    if cfg.out:
        save_checkpoint(cfg.out, model, final_epoch, extra={"loss_curve": curve})
    seconds = time.perf_counter() - start
    report = evaluate(model, test_set, epoch=final_epoch)
    report.loss_curve = curve
    return TrainResult(model, report, curve, final_epoch, seconds)


def _periodic_path(out, epoch):
    root, ext = os.path.splitext(out)
    return f"{root}.epoch{epoch:04d}{ext or '.ckpt'}"


def predict(model, x, u, epoch=0, hard=False):
    """Eval-mode batched prediction without building a graph."""
    outs = []
    with T.no_grad():
        for lo in range(0, x.shape[0], EVAL_BATCH):
            outs.append(model.forward(x[lo:lo + EVAL_BATCH], u[lo:lo + EVAL_BATCH], epoch=epoch,
                                      mode="eval", hard=hard))
    return outs


def evaluate(model, dataset, epoch=0, hard=False):
    """Test-split metrics (flow error pooled over all moving points of all frames)."""
    if len(dataset) == 0:
        return MetricsReport(0.0, 0)
    x, u, y, labels, valid = dataset.arrays()
    outs = predict(model, x, u, epoch=epoch, hard=hard)
    pred = np.concatenate([o.cloud.data for o in outs])
    total, count = flow_error_sums(pred, x, y, valid)
    report = MetricsReport(total / count if count else 0.0, count)
    if outs[0].masks is not None:
        masks = np.concatenate([o.masks.data for o in outs])
        rot = np.concatenate([o.rotations.data for o in outs])
        trans = np.concatenate([o.translations.data for o in outs])
        report.mask_entropy = float(np.mean([mask_entropy(m, v) for m, v in zip(masks, valid)]))
        report.seg_accuracy = float(np.mean([seg_accuracy(m, l, v) for m, l, v in zip(masks, labels, valid)]))
        vmask = valid[:, None].astype(np.float64)
        report.occupancy = ((masks * vmask).sum(axis=(0, 2, 3)) / vmask.sum()).tolist()
        dev = np.linalg.norm(rot, axis=-1) + np.linalg.norm(trans, axis=-1)
        report.transform_deviation = dev.mean(axis=0).tolist()
    return report
