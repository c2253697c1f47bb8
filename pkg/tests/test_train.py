import math

import numpy as np
import pytest

from se3nets.dataset import generate_dataset, write_dataset
from se3nets.model import ConfigError, load_checkpoint
from se3nets.train import AdamState, TrainConfig, adam_step, evaluate, loss_weights, train


@pytest.fixture(scope="module")
def tiny():
    return generate_dataset("push", frames=10, seed=4)


def reference_adam(p, grads, lr, b1, b2, eps):
    """Textbook scalar-loop ADAM."""
    p = [float(v) for v in p]
    m = [0.0] * len(p)
    v = [0.0] * len(p)
    for t, g in enumerate(grads, start=1):
        for i, gi in enumerate(g):
            m[i] = b1 * m[i] + (1 - b1) * gi
            v[i] = b2 * v[i] + (1 - b2) * gi * gi
            mhat = m[i] / (1 - b1 ** t)
            vhat = v[i] / (1 - b2 ** t)
            p[i] -= lr * mhat / (math.sqrt(vhat) + eps)
    return np.array(p)


def test_adam_zero_gradient_keeps_params():
    p = np.array([1.0, -2.0, 3.0])
    state = AdamState.zeros_like([p])
    adam_step([p], [np.zeros(3)], state)
    np.testing.assert_array_equal(p, [1.0, -2.0, 3.0])
    assert state.t == 1


def test_adam_first_step_is_lr():
    p = np.array([1.0])
    adam_step([p], [np.array([1.0])], AdamState.zeros_like([p]), lr=0.1)
    assert p[0] == pytest.approx(0.9, abs=1e-8)


def test_adam_matches_reference_over_10_steps():
    rng = np.random.default_rng(0)
    p0 = rng.normal(size=5)
    grads = [rng.normal(size=5) for _ in range(10)]
    p = p0.copy()
    state = AdamState.zeros_like([p])
    for g in grads:
        adam_step([p], [g], state, lr=0.01, beta1=0.8, beta2=0.99, eps=1e-6)
    np.testing.assert_allclose(p, reference_adam(p0, grads, 0.01, 0.8, 0.99, 1e-6), rtol=0, atol=1e-12)


def test_adam_errors():
    p = np.zeros(3)
    with pytest.raises(ValueError):
        adam_step([p], [np.zeros(2)], AdamState.zeros_like([p]))
    with pytest.raises(ValueError):
        adam_step([p], [np.zeros(3)], AdamState.zeros_like([p]), t=0)


def test_config_errors():
    for kw in ({"epochs": 0}, {"batch_size": 0}, {"lr": 0.0}, {"loss_mode": "some"}, {"variant": "huge"}):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)
    with pytest.raises(ConfigError):
        train(TrainConfig())
    with pytest.raises(Exception):
        train(TrainConfig(data="/nonexistent/dir"))


def test_loss_weights_modes():
    cloud = np.zeros((1, 3, 2, 2))
    target = cloud.copy()
    target[0, 0, 0, 0] = 0.1
    valid = np.array([[[True, True], [False, True]]])
    np.testing.assert_array_equal(loss_weights(cloud, target, valid, "all_points")[0, 0], valid[0])
    np.testing.assert_array_equal(loss_weights(cloud, target, valid, "moving_points")[0, 0],
                                  [[1.0, 0.0], [0.0, 0.0]])


@pytest.mark.parametrize("variant", ["se3net", "flow", "no_penalty", "no_motion"])
def test_one_epoch_smoke(tiny, variant):
    result = train(TrainConfig(epochs=1, variant=variant, batch_size=4), dataset=tiny)
    assert len(result.loss_curve) == (0 if variant == "no_motion" else 1)
    assert all(np.isfinite(result.loss_curve))
    rep = result.report
    assert rep.flow_mse_cm >= 0 and rep.moving_points > 0
    if variant in ("se3net", "no_penalty"):
        assert 0 <= rep.seg_accuracy <= 1
        assert 0 <= rep.mask_entropy <= np.log(3) + 1e-12
        assert len(rep.occupancy) == 3 and abs(sum(rep.occupancy) - 1) < 1e-9


def test_training_reduces_loss_on_tiny_set(tiny):
    result = train(TrainConfig(epochs=8, batch_size=2), dataset=tiny)
    assert result.loss_curve[-1] < result.loss_curve[0]


def test_same_seed_bit_identical_checkpoints(tiny, tmp_path):
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    train(TrainConfig(epochs=2, batch_size=3, out=str(a), seed=5), dataset=tiny)
    train(TrainConfig(epochs=2, batch_size=3, out=str(b), seed=5), dataset=tiny)
    assert a.read_bytes() == b.read_bytes()
    c = tmp_path / "c.ckpt"
    train(TrainConfig(epochs=2, batch_size=3, out=str(c), seed=6), dataset=tiny)
    assert a.read_bytes() != c.read_bytes()


def test_periodic_checkpoints_and_reload(tiny, tmp_path):
    out = tmp_path / "run.ckpt"
    result = train(TrainConfig(epochs=4, batch_size=5, out=str(out), checkpoint_every=2), dataset=tiny)
    assert (tmp_path / "run.epoch0002.ckpt").exists() and (tmp_path / "run.epoch0004.ckpt").exists()
    model, header = load_checkpoint(out)
    assert header["epoch"] == 4
    _, test = tiny.split()
    assert evaluate(model, test, epoch=4).flow_mse_cm == result.report.flow_mse_cm


def test_train_reads_dataset_directory(tiny, tmp_path):
    write_dataset(tiny, tmp_path / "d")
    a = train(TrainConfig(epochs=1, data=str(tmp_path / "d")))
    b = train(TrainConfig(epochs=1), dataset=tiny)
    assert a.loss_curve == b.loss_curve
