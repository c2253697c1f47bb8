"""Finite-difference verification of every differentiable op and both networks."""

import time

import numpy as np

from . import tensor as T
from .layers import SharpeningSchedule, normalize_masks, sharpen_masks, transform_layer
from .model import ModelConfig, build_model
from .se3 import exp_map_t

TOLERANCE = 1e-4
EPS = 1e-5
MODULES = ("tensor", "se3", "layers", "model")


def _projected(out, seed):
    """Scalar ``sum(out * R)`` with a fixed random ``R`` so every output element matters."""
    r = np.random.default_rng(seed).normal(size=out.shape)
    return T.sum(T.mul(out, T.Tensor(r)))


def _rand(rng, *shape, scale=1.0):
    return T.Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


def tiny_model_config(variant="se3net", k=2):
    """The 4 x 4 grid, k = 2 configuration used for whole-network checks."""
    return ModelConfig(k=k, n=3, height=4, width=4, conv_channels=(2, 3), latent=6, action_hidden=4,
                       se3_hidden=5, variant=variant, seed=1)


def _perturbed_model(variant):
    model = build_model(tiny_model_config(variant), schedule=SharpeningSchedule(0.05, 2.0, 1))
    rng = np.random.default_rng(7)
    for _, t in model.params.items():
        t.data += rng.normal(scale=0.3, size=t.shape)
    return model


def _model_check(variant, mode):
    model = _perturbed_model(variant)
    rng = np.random.default_rng(11)
    x = rng.normal(scale=0.5, size=(2, 3, 4, 4)) + np.array([0.0, 0.0, 1.0])[None, :, None, None]
    u = rng.normal(size=(2, 3))
    y = rng.normal(size=(2, 3, 4, 4))
    w = (rng.uniform(size=(2, 1, 4, 4)) > 0.3).astype(np.float64)
    params = model.params.tensors()
    names = [name for name, _ in model.params.items()]

    def f(*ps):
        for name, p in zip(names, ps):
            model.params[name] = p
        pred = model.forward(x, u, epoch=1, mode=mode, rng_seed=5)
        return T.mse_loss(pred.cloud, y, w)

    return T.finite_diff_check(f, params, EPS)


def _checks():
    rng = np.random.default_rng(0)
    checks = {
        "tensor": {
            "matmul": lambda: T.finite_diff_check(lambda a, b: _projected(T.matmul(a, b), 1),
                                                  [_rand(rng, 3, 4), _rand(rng, 4, 2)]),
            "add": lambda: T.finite_diff_check(lambda a, b: _projected(T.add(a, b), 2),
                                               [_rand(rng, 2, 3), _rand(rng, 2, 3)]),
            "add_bias": lambda: T.finite_diff_check(lambda a, b: _projected(T.add_bias(a, b), 3),
                                                    [_rand(rng, 2, 3, 4), _rand(rng, 4)]),
            "linear": lambda: T.finite_diff_check(lambda x, w, b: _projected(T.linear(x, w, b), 4),
                                                  [_rand(rng, 3, 5), _rand(rng, 5, 2), _rand(rng, 2)]),
            "scale": lambda: T.finite_diff_check(lambda a: _projected(T.scale(a, -1.7), 5), [_rand(rng, 4)]),
            "mul": lambda: T.finite_diff_check(lambda a, b: _projected(T.mul(a, b), 6),
                                               [_rand(rng, 2, 3), _rand(rng, 2, 3)]),
            "reshape": lambda: T.finite_diff_check(lambda a: _projected(T.reshape(a, (3, 2)), 7),
                                                   [_rand(rng, 2, 3)]),
            "transpose": lambda: T.finite_diff_check(lambda a: _projected(T.transpose(a, (2, 0, 1)), 8),
                                                     [_rand(rng, 2, 3, 4)]),
            "getitem": lambda: T.finite_diff_check(lambda a: _projected(T.getitem(a, (slice(None), slice(1, 3))), 9),
                                                   [_rand(rng, 2, 4)]),
            "concat": lambda: T.finite_diff_check(lambda a, b: _projected(T.concat([a, b], axis=1), 10),
                                                  [_rand(rng, 2, 3), _rand(rng, 2, 2)]),
            "sum": lambda: T.finite_diff_check(lambda a: T.scale(T.sum(a), 0.5), [_rand(rng, 3, 3)]),
            "conv2d": lambda: T.finite_diff_check(
                lambda x, w, b: _projected(T.conv2d(x, w, b, stride=2, pad=1), 11),
                [_rand(rng, 2, 2, 5, 6), _rand(rng, 3, 2, 3, 3), _rand(rng, 3)]),
            "deconv2d": lambda: T.finite_diff_check(
                lambda x, w, b: _projected(T.deconv2d(x, w, b, stride=2, pad=1), 12),
                [_rand(rng, 2, 3, 3, 2), _rand(rng, 3, 2, 4, 4), _rand(rng, 2)]),
            "prelu": lambda: T.finite_diff_check(lambda x, s: _projected(T.prelu(x, s), 13),
                                                 [_rand(rng, 2, 3, 2, 2), _rand(rng, 3, scale=0.3)]),
            "channel_softmax": lambda: T.finite_diff_check(lambda x: _projected(T.channel_softmax(x), 14),
                                                           [_rand(rng, 2, 3, 2, 2)]),
            "mse_loss": lambda: T.finite_diff_check(
                lambda p: T.mse_loss(p, rng_target, rng_weight), [_rand(rng, 2, 3, 2, 2)]),
        },
        "se3": {
            "exp_map_generic": lambda: T.finite_diff_check(lambda a: _projected(exp_map_t(a), 15),
                                                           [_rand(rng, 4, 3)]),
            "exp_map_small": lambda: T.finite_diff_check(lambda a: _projected(exp_map_t(a), 16),
                                                         [T.Tensor(rng.normal(scale=1e-4, size=(2, 3)))]),
            "exp_map_tiny": lambda: T.finite_diff_check(lambda a: _projected(exp_map_t(a), 17),
                                                        [T.Tensor(rng.normal(scale=1e-9, size=(2, 3)))]),
            "exp_map_near_pi": lambda: T.finite_diff_check(
                lambda a: _projected(exp_map_t(a), 18), [T.Tensor(np.array([[0.0, 3.0, 0.9]]) / 3.132 * 3.1)]),
        },
        "layers": {
            "sharpen_train": lambda: T.finite_diff_check(
                lambda m: _projected(sharpen_masks(normalize_masks(m), SharpeningSchedule(0.05, 3.0, 1), 1,
                                                   rng_seed=3), 19), [_rand(rng, 2, 3, 2, 2)]),
            "sharpen_eval": lambda: T.finite_diff_check(
                lambda m: _projected(sharpen_masks(normalize_masks(m), SharpeningSchedule(0.05, 3.0, 1), 1,
                                                   train_mode=False), 20), [_rand(rng, 2, 3, 2, 2)]),
            "transform_layer": lambda: T.finite_diff_check(
                lambda x, m, a, t: _projected(transform_layer(x, normalize_masks(m), a, t), 21),
                [_rand(rng, 2, 3, 2, 2), _rand(rng, 2, 3, 2, 2), _rand(rng, 2, 3, 3), _rand(rng, 2, 3, 3)]),
        },
        "model": {
            "se3net_train": lambda: _model_check("se3net", "train"),
            "se3net_eval": lambda: _model_check("se3net", "eval"),
            "se3net_no_penalty": lambda: _model_check("se3net_no_penalty", "train"),
            "flow": lambda: _model_check("flow", "train"),
        },
    }
    rng_target = rng.normal(size=(2, 3, 2, 2))
    rng_weight = (rng.uniform(size=(2, 1, 2, 2)) > 0.3).astype(np.float64)
    return checks


def run_gradchecks(module=None):
    """Returns ``[(module, name, max_rel_error, seconds)]`` for one module or all of them."""
    checks = _checks()
    if module is not None and module not in checks:
        raise ValueError(f"unknown module {module!r}; choose from {', '.join(MODULES)}")
    out = []
    for mod in ([module] if module else MODULES):
        for name, fn in checks[mod].items():
            start = time.perf_counter()
            err = fn()
            out.append((mod, name, err, time.perf_counter() - start))
    return out
