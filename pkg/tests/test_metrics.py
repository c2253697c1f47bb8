from itertools import permutations

import numpy as np
import pytest

from se3nets.metrics import eval_flow_mse, mask_entropy, seg_accuracy


def naive_flow_mse(pred, cloud, target, valid):
    total, count = 0.0, 0
    _, h, w = cloud.shape
    for r in range(h):
        for c in range(w):
            if not valid[r, c]:
                continue
            gt = [100.0 * (target[a, r, c] - cloud[a, r, c]) for a in range(3)]
            if sum((g / 100.0) ** 2 for g in gt) ** 0.5 <= 1e-9:
                continue
            pf = [100.0 * (pred[a, r, c] - cloud[a, r, c]) for a in range(3)]
            total += sum((p - g) ** 2 for p, g in zip(pf, gt))
            count += 1
    return total / count


def random_case(seed, h=6, w=7):
    rng = np.random.default_rng(seed)
    cloud = rng.normal(size=(3, h, w))
    target = cloud + rng.normal(scale=0.05, size=(3, h, w)) * (rng.random((h, w)) > 0.4)
    pred = cloud + rng.normal(scale=0.05, size=(3, h, w))
    valid = rng.random((h, w)) > 0.2
    return pred, cloud, target, valid


def test_flow_mse_trivial_cases():
    pred, cloud, target, valid = random_case(0)
    assert eval_flow_mse(target, cloud, target, valid) == (0.0, True)
    moving = valid & (np.linalg.norm(target - cloud, axis=0) > 1e-9)
    expect = (((target - cloud) * 100) ** 2).sum(axis=0)[moving].mean()
    assert eval_flow_mse(cloud, cloud, target, valid)[0] == pytest.approx(expect, rel=1e-14)


def test_flow_mse_matches_naive_loop():
    for seed in range(5):
        case = random_case(seed)
        got, ok = eval_flow_mse(*case)
        assert ok and abs(got - naive_flow_mse(*case)) < 1e-12 * max(1.0, got)


def test_flow_mse_no_moving_points_flagged():
    cloud = np.ones((3, 2, 2))
    assert eval_flow_mse(cloud + 1, cloud, cloud, np.ones((2, 2), bool)) == (0.0, False)


def test_flow_mse_unit_is_centimetres():
    cloud = np.zeros((3, 1, 1))
    target = cloud.copy()
    target[0] = 0.01                 # 1 cm of motion
    assert eval_flow_mse(cloud, cloud, target, np.ones((1, 1), bool))[0] == pytest.approx(1.0)


def test_entropy_cases():
    onehot = np.zeros((3, 4, 4))
    onehot[1] = 1
    assert mask_entropy(onehot) == 0.0
    for k in (2, 3, 6):
        assert mask_entropy(np.full((k, 2, 3), 1.0 / k)) == pytest.approx(np.log(k), abs=1e-14)
    m = np.stack([np.full((3, 3), 0.9), np.full((3, 3), 0.1)])
    assert mask_entropy(m) == pytest.approx(0.3251, abs=1e-4)
    assert mask_entropy(m) == pytest.approx(-(0.9 * np.log(0.9) + 0.1 * np.log(0.1)), abs=1e-15)


def test_entropy_respects_valid_and_batch():
    m = np.stack([np.full((2, 2), 0.5), np.full((2, 2), 0.5)])
    m[:, 0, 0] = [1.0, 0.0]
    valid = np.ones((2, 2), bool)
    valid[0, 0] = False
    assert mask_entropy(m, valid) == pytest.approx(np.log(2))
    assert mask_entropy(np.stack([m, m])) == pytest.approx(mask_entropy(m))


def onehot(labels, k):
    return np.stack([(labels == i).astype(float) for i in range(k)])


def test_seg_accuracy_perfect_and_permuted():
    labels = np.random.default_rng(1).integers(0, 3, size=(5, 6))
    assert seg_accuracy(onehot(labels, 3), labels) == 1.0
    assert seg_accuracy(onehot(labels, 3)[[2, 0, 1]], labels) == 1.0
    assert seg_accuracy(onehot(labels, 5)[[4, 2, 0, 1, 3]], labels) == 1.0


def naive_seg(m, labels, valid):
    pred = m.argmax(axis=0)
    k = m.shape[0]
    n_lab = max(k, labels[valid].max() + 1)
    best = 0
    for perm in permutations(range(n_lab), k):
        hits = sum(1 for p, l in zip(pred[valid], labels[valid]) if perm[p] == l)
        best = max(best, hits)
    return best / valid.sum()


def test_seg_accuracy_matches_brute_force():
    rng = np.random.default_rng(2)
    for k in (2, 3, 4):
        m = rng.dirichlet(np.ones(k), size=(6, 7)).transpose(2, 0, 1)
        labels = rng.integers(0, 3, size=(6, 7))
        valid = rng.random((6, 7)) > 0.2
        assert seg_accuracy(m, labels, valid) == pytest.approx(naive_seg(m, labels, valid), abs=1e-15)


def test_seg_accuracy_bounds():
    with pytest.raises(ValueError):
        seg_accuracy(np.ones((9, 2, 2)) / 9, np.zeros((2, 2), int))
    assert seg_accuracy(np.ones((2, 2, 2)) / 2, np.zeros((2, 2), int), np.zeros((2, 2), bool)) == 1.0
