import numpy as np
import pytest

from pc_lab.chain import ChainSpec
from pc_lab.data import synthetic_splits
from pc_lab.engines import InferenceConfig
from pc_lab.train import accuracy, train


@pytest.fixture(scope="module")
def small():
    splits = synthetic_splits(0, d_in=20, n_classes=4, n_train=600, n_validation=200, n_test=200)
    spec = ChainSpec.uniform(4, 20, 32, 4, "tanh", "identity", "softmax-cross-entropy")
    return spec, splits


def test_same_seed_reproducible(small):
    spec, splits = small
    a, pa = train(spec, splits, "fpa", InferenceConfig("fpa", 0.5, 6), 2, 0.1, 32, 7)
    b, pb = train(spec, splits, "fpa", InferenceConfig("fpa", 0.5, 6), 2, 0.1, 32, 7)
    assert a.val_acc == b.val_acc and a.test_acc == b.test_acc
    for u, v in zip(pa.weights, pb.weights):
        assert np.array_equal(u, v)


def test_zil_tracks_backprop(small):
    spec, splits = small
    a, pa = train(spec, splits, "backprop", None, 3, 0.1, 32, 0)
    b, pb = train(spec, splits, "zil", InferenceConfig("zil", 1.0, 3), 3, 0.1, 32, 0)
    assert a.val_acc == b.val_acc and a.test_acc == b.test_acc
    for u, v in zip(pa.weights, pb.weights):
        assert np.max(np.abs(u - v)) <= 1e-12


def test_backprop_learns(small):
    spec, splits = small
    rec, params = train(spec, splits, "backprop", None, 5, 0.1, 32, 0, probe_size=16)
    assert rec.status == "ok" and rec.test_acc == accuracy(params, splits["test"])
    assert rec.val_acc[-1] > 0.5
    assert all(c == pytest.approx(1.0, abs=1e-12) for c in rec.probe_cosine)


def test_divergence_gives_partial_record(small):
    spec, splits = small
    rec, _ = train(spec, splits, "vpc", InferenceConfig("vpc", 40.0, 30), 2, 0.1, 32, 0)
    assert rec.status == "diverged" and "diverged" in rec.message and rec.test_acc is None


def test_bad_arguments(small):
    spec, splits = small
    with pytest.raises(ValueError):
        train(spec, splits, "backprop", None, 1, 0.0, 32, 0)
