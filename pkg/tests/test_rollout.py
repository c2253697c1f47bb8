import numpy as np
import pytest

from se3nets.dataset import generate_dataset
from se3nets.model import ModelConfig, build_model
from se3nets.rollout import TrueTransformModel, ground_truth_targets, rollout, segment_rigidity_error
from se3nets.se3 import RigidTransform

# float64 rounding of compose-then-apply against repeated application
ROUNDING_CM2 = 1e-24


@pytest.fixture(scope="module")
def frames():
    return generate_dataset("push", frames=8, seed=21).frames


def randomized_model(seed=0):
    model = build_model(ModelConfig())
    rng = np.random.default_rng(seed)
    for _, t in model.params.items():
        t.data += rng.normal(scale=0.05, size=t.shape)
    return model


def test_identity_model_keeps_frame0(frames):
    model = build_model(ModelConfig())
    f = frames[0]
    r = rollout(model, f, 4)
    for c in r.clouds:
        np.testing.assert_array_equal(c, f.cloud)
    assert len(r.errors) == 4 and r.finite


def test_oracle_rollout_zero_error(frames):
    for f in frames:
        r = rollout(TrueTransformModel(f), f, 5)
        assert r.errors[0] == 0.0
        assert max(r.errors) < ROUNDING_CM2
        assert all(m > 0 for m in r.moving_points)


def test_ground_truth_targets_compose_steps(frames):
    f = frames[1]
    targets = ground_truth_targets(f, 3)
    np.testing.assert_array_equal(targets[0][f.valid], f.target[f.valid])
    for lab in range(len(f.transforms)):
        sel = f.valid & (f.labels == lab)
        tr = f.transform(lab)
        np.testing.assert_allclose(targets[2][sel], tr.apply(tr.apply(tr.apply(f.cloud[sel]))), atol=1e-14)


def test_hard_rollout_is_rigid_per_segment(frames):
    model = randomized_model()
    r = rollout(model, frames[2], 5, hard=True)
    assert len(r.rigidity) == 5 and max(r.rigidity) < 1e-9
    assert r.finite and all(np.isfinite(r.errors))
    soft = rollout(model, frames[2], 2, hard=False)
    assert all(np.isnan(soft.rigidity))


def test_rollout_action_override_and_errors(frames):
    model = randomized_model(1)
    f = frames[3]
    a = rollout(model, f, 2)
    b = rollout(model, f, 2, u=np.zeros_like(f.action))
    assert not np.array_equal(a.clouds[0], b.clouds[0])
    with pytest.raises(ValueError):
        rollout(model, f, 0)


def test_rigidity_error_detects_deformation():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(4, 5, 3))
    labels = np.zeros((4, 5), int)
    valid = np.ones((4, 5), bool)
    tr = RigidTransform.from_axis_angle([0.1, 0.2, 0.3], [1.0, 0.0, 0.0])
    assert segment_rigidity_error(x, tr.apply(x), labels, valid) < 1e-12
    bent = x.copy()
    bent[0, 0] += 0.01
    assert segment_rigidity_error(x, bent, labels, valid) > 1e-3
