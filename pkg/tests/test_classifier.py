import numpy as np
import pytest
import torch
import torch.nn.functional as F

from casdc.classifier import (
    ClassifierModel,
    argmax_label,
    classify,
    cross_entropy_grad,
    logits_of,
    train_classifier,
)
from casdc.dataset import Dataset, generate_synthetic, make_partition, split_dataset
from casdc.errors import ConfigurationError, MissingClassError, ShapeMismatchError
from casdc.networks import parameter_vector
from casdc.training import TrainConfig

from oracles import central_difference, rel_error


def test_argmax_is_one_indexed():
    assert argmax_label([0.1, 0.9, 0.3]) == 2


def test_argmax_ties_pick_lowest_label():
    assert argmax_label([0.5, 0.5]) == 1
    np.testing.assert_array_equal(argmax_label([[1.0, 3.0, 3.0], [2.0, 2.0, 2.0]]), [2, 1])


def test_rejects_single_class():
    with pytest.raises(ConfigurationError):
        ClassifierModel((4,), [3])
    with pytest.raises(ConfigurationError):
        ClassifierModel((4,), [3, 3])


def test_class_ids_are_sorted_and_mapped():
    f = ClassifierModel((4,), [7, 2, 5], hidden=8, seed=0)
    assert f.class_ids == [2, 5, 7]
    np.testing.assert_array_equal(f.to_index([5, 7, 2]), [1, 2, 0])
    with pytest.raises(MissingClassError):
        f.to_index([4])
    x = np.random.default_rng(0).standard_normal((6, 4))
    ids, logits = classify(f, x)
    np.testing.assert_array_equal(ids, np.array([2, 5, 7])[np.argmax(logits, axis=1)])
    single_id, single_logits = classify(f, x[0])
    assert isinstance(single_id, int) and single_logits.shape == (3,)


def test_classify_is_pure_and_checks_shape():
    f = ClassifierModel((4,), [0, 1], hidden=8, seed=0)
    x = np.random.default_rng(0).standard_normal((5, 4))
    a, b = logits_of(f, x), logits_of(f, x)
    assert a.tobytes() == b.tobytes()
    with pytest.raises(ShapeMismatchError):
        classify(f, np.zeros((5, 3)))


def test_cross_entropy_closed_form_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    for _ in range(20):
        z = rng.standard_normal((6, 4)) * 3
        y = rng.integers(0, 4, size=6)

        def loss(v):
            return F.cross_entropy(torch.tensor(v), torch.tensor(y)).item()

        fd = central_difference(loss, z)
        assert rel_error(cross_entropy_grad(z, y), fd) < 1e-4
        t = torch.tensor(z, requires_grad=True)
        F.cross_entropy(t, torch.tensor(y)).backward()
        assert rel_error(t.grad.numpy(), fd) < 1e-4


def _split():
    src = generate_synthetic(10, 200, 10, 10.0, seed=100)
    return split_dataset(src, make_partition(list(range(10)), 6, 0.5, seed=0))


def test_training_reaches_high_accuracy_on_separable_data():
    kk, _, test = _split()
    f0 = ClassifierModel((10,), kk.classes, hidden=128, seed=0)
    tel = []
    f = train_classifier(kk, f0, TrainConfig(epochs=20, learning_rate=0.01, seed=0), tel)
    pred, _ = classify(f, kk.features)
    assert (pred == kk.labels).mean() >= 0.99
    assert len(tel) == 20 and tel[-1].mean_loss < tel[0].mean_loss
    assert all(s.count == len(kk) for s in tel)
    # held-out known samples come back as their generating class
    known = test.roles == "KK"
    held_pred, _ = classify(f, test.features[known])
    assert (held_pred == test.labels[known]).mean() >= 0.99


def test_zero_epochs_returns_init_unchanged():
    kk, _, _ = _split()
    f0 = ClassifierModel((10,), kk.classes, hidden=8)
    before = parameter_vector(f0)
    assert train_classifier(kk, f0, TrainConfig(epochs=0)) is f0
    np.testing.assert_array_equal(parameter_vector(f0), before)


def test_training_accepts_known_knowns_only():
    kk, ku, _ = _split()
    f0 = ClassifierModel((10,), kk.classes, hidden=8)
    with pytest.raises(ConfigurationError):
        train_classifier(ku, f0, TrainConfig(epochs=1))
    missing = kk.subset(kk.labels != kk.classes[0])
    with pytest.raises(MissingClassError):
        train_classifier(missing, f0, TrainConfig(epochs=1))
    unlabeled_roles = Dataset(kk.features, kk.labels)
    train_classifier(unlabeled_roles, f0, TrainConfig(epochs=1))


def test_checkpoint_round_trip(tmp_path):
    f = ClassifierModel((3,), [4, 9], hidden=5, seed=2)
    torch.save(f.checkpoint("h"), tmp_path / "f.pt")
    g = ClassifierModel.from_checkpoint(tmp_path / "f.pt")
    x = np.random.default_rng(0).standard_normal((4, 3))
    np.testing.assert_array_equal(logits_of(f, x), logits_of(g, x))
    assert g.class_ids == [4, 9]
    assert torch.load(tmp_path / "f.pt", weights_only=False)["class_mapping"] == {"1": 4, "2": 9}
