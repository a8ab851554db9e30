import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cake.autodiff import Tensor
from cake.data import LabeledDataset
from cake.errors import ConfigError, ContractError, DomainError
from cake.losses import LossWeights, cross_entropy
from cake.models import mlp_new
from cake.synthesis import SyntheticDataset
from cake.training import (
    Metrics,
    TrainConfig,
    evaluate,
    onecycle_lr,
    predict_logits,
    sgd_update,
    train_classifier,
    train_student,
)

# ---------------------------------------------------------------------------
# OneCycle

# frozen from a float64 evaluation of the two cosine phases, total=11, peak at step 3
ONECYCLE_11 = [0.02, 0.14, 0.38, 0.5, 0.475244692754, 0.40588186322, 0.305649670466,
               0.194400329534, 0.09416813678, 0.024805307246, 5e-05]


def test_onecycle_endpoints():
    cfg = TrainConfig()
    assert onecycle_lr(0, 1000, cfg) == pytest.approx(0.02)
    assert onecycle_lr(round(0.3 * 999), 1000, cfg) == 0.5
    assert onecycle_lr(999, 1000, cfg) == pytest.approx(5e-5)


def test_onecycle_frozen_trace():
    lrs = [onecycle_lr(s, 11, TrainConfig()) for s in range(11)]
    np.testing.assert_allclose(lrs, ONECYCLE_11, rtol=1e-10)


def test_onecycle_out_of_range():
    for step, total in ((-1, 10), (10, 10), (0, 0)):
        with pytest.raises(DomainError):
            onecycle_lr(step, total, TrainConfig())


def test_constant_schedule():
    cfg = TrainConfig(schedule="constant", lr_max=0.3)
    assert {onecycle_lr(s, 7, cfg) for s in range(7)} == {0.3}


@given(st.integers(3, 5000), st.floats(1e-4, 2.0))
def test_onecycle_peak_once_and_continuous(total, lr_max):
    cfg = TrainConfig(lr_max=lr_max)
    lrs = np.array([onecycle_lr(s, total, cfg) for s in range(total)])
    assert np.sum(lrs == lr_max) == 1
    assert lrs.max() == lr_max and lrs.min() > 0
    peak = int(lrs.argmax())
    assert np.all(np.diff(lrs[: peak + 1]) >= 0) and np.all(np.diff(lrs[peak:]) <= 0)
    # a half cosine over n steps moves at most amplitude * pi / (2n) per step
    shortest = max(min(peak, total - 1 - peak), 1)
    assert np.abs(np.diff(lrs)).max() <= lr_max * np.pi / (2 * shortest) * (1 + 1e-9)


def test_train_config_validation():
    for bad in (dict(epochs=-1), dict(batch_size=0), dict(lr_max=0.0), dict(weight_decay=-1.0),
                dict(pct_start=1.0), dict(schedule="cosine"), dict(div_factor=float("nan"))):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


# ---------------------------------------------------------------------------
# SGD


def test_sgd_hand_arithmetic():
    p = Tensor([[1.0, 2.0], [3.0, 4.0]], dtype=np.float64)
    p.grad = np.array([[0.5, -1.0], [2.0, 0.0]])
    sgd_update([p], 0.1, 0.01)
    # frozen from the scalar rule theta - lr * (g + wd * theta)
    np.testing.assert_allclose(p.data, [[0.949, 2.098], [2.797, 3.996]], rtol=1e-12)


def test_sgd_zero_lr_and_exact_zero():
    p = Tensor([1.0, -2.0])
    p.grad = np.array([5.0, 5.0], dtype=np.float32)
    sgd_update([p], 0.0, 0.1)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    p.grad = p.data.copy()
    sgd_update([p], 1.0)
    np.testing.assert_array_equal(p.data, [0.0, 0.0])


def test_sgd_missing_gradient():
    net = mlp_new(2, [3], 2, np.random.default_rng(0))
    with pytest.raises(ContractError):
        sgd_update(net, 0.1)


def test_small_step_decreases_loss():
    rng = np.random.default_rng(0)
    net = mlp_new(3, [5], 3, rng)
    x, y = Tensor(rng.normal(size=(16, 3))), rng.integers(0, 3, 16)
    loss = cross_entropy(net(x), y)
    loss.backward()
    sgd_update(net, 1e-4)
    assert cross_entropy(net(x), y).item() < loss.item()


# ---------------------------------------------------------------------------
# evaluation


class _Fixed:
    """Stand-in network returning preset logits."""

    def __init__(self, logits):
        self.logits = np.asarray(logits, dtype=np.float32)
        self.num_classes = self.logits.shape[1]
        self._i = 0

    def __call__(self, x):
        out = self.logits[self._i : self._i + len(x.data)]
        self._i += len(x.data)
        return Tensor(out)


def _labeled(y, c):
    return LabeledDataset(np.zeros((len(y), 1), np.float32), np.asarray(y), (np.zeros(1), np.ones(1)), c)


def test_evaluate_all_correct_constant():
    assert evaluate(_Fixed(np.tile([0.0, 1.0], (5, 1))), _labeled([1] * 5, 2)) == 1.0


def test_evaluate_ties_go_low():
    assert evaluate(_Fixed(np.zeros((4, 3))), _labeled([0, 0, 1, 2], 3)) == 0.5


def test_evaluate_complement_for_two_classes():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(200, 2))
    y = rng.integers(0, 2, 200)
    a = evaluate(_Fixed(z), _labeled(y, 2))
    b = evaluate(_Fixed(z), _labeled(1 - y, 2))
    assert a + b == pytest.approx(1.0)


def test_evaluate_random_logits_near_chance():
    rng = np.random.default_rng(2)
    y = np.repeat(np.arange(10), 1000)
    acc = evaluate(_Fixed(rng.normal(size=(10_000, 10))), _labeled(y, 10))
    assert 0.08 <= acc <= 0.12


def test_evaluate_empty():
    with pytest.raises(DomainError):
        evaluate(_Fixed(np.zeros((0, 2))), _labeled([], 2))


# ---------------------------------------------------------------------------
# training loops


def test_moons_teacher_reaches_098(moons_teacher):
    _, _, test, metrics = moons_teacher
    assert metrics.final_test_acc >= 0.98
    assert len(metrics.train_loss) == 30 and all(0 <= a <= 1 for a in metrics.test_acc)


def test_zero_epochs(moons_teacher):
    _, train, test, _ = moons_teacher
    net = mlp_new(2, [8], 2, np.random.default_rng(3))
    before = evaluate(net, test)
    m = train_classifier(net, train, TrainConfig(epochs=0), test)
    assert m.train_loss == [] and m.final_test_acc == before


def test_training_is_deterministic(moons_teacher):
    _, train, test, _ = moons_teacher
    runs = []
    for _ in range(2):
        net = mlp_new(2, [8], 2, np.random.default_rng(3))
        m = train_classifier(net, train.subset(200), TrainConfig(epochs=3, batch_size=32, seed=5), test)
        runs.append((m.train_loss, b"".join(p.data.tobytes() for p in net.params)))
    assert runs[0] == runs[1]


def test_empty_and_bad_labels():
    net = mlp_new(1, [2], 2, np.random.default_rng(0))
    with pytest.raises(DomainError):
        train_classifier(net, _labeled([], 2), TrainConfig())
    with pytest.raises(DomainError):
        train_classifier(mlp_new(1, [2], 2, np.random.default_rng(0)), _labeled([0, 2], 3), TrainConfig())


def _synthetic(n=64, seed=0, c=2):
    r = np.random.default_rng(seed)
    return SyntheticDataset(r.normal(size=(n, 2)).astype(np.float32), r.integers(0, c, n), 1, n, c)


def test_student_training_keeps_teacher_bits(moons_teacher):
    teacher = moons_teacher[0]
    before = [p.data.tobytes() for p in teacher.params]
    train_student(mlp_new(2, [8], 2, np.random.default_rng(0)), teacher, _synthetic(), TrainConfig(epochs=2), LossWeights())
    assert [p.data.tobytes() for p in teacher.params] == before
    assert all(p.grad is None for p in teacher.params)


def test_student_hard_only_equals_classifier_training(moons_teacher):
    teacher = moons_teacher[0]
    synth = _synthetic(seed=4)
    cfg = TrainConfig(epochs=3, batch_size=16, seed=2)
    a = mlp_new(2, [8], 2, np.random.default_rng(1))
    b = mlp_new(2, [8], 2, np.random.default_rng(1))
    ma = train_student(a, teacher, synth, cfg, LossWeights(lambda2=0.0))
    data = LabeledDataset(synth.samples, synth.labels, (np.zeros(2), np.ones(2)), 2)
    mb = train_classifier(b, data, cfg)
    assert ma.train_loss == mb.train_loss
    for p, q in zip(a.params, b.params):
        assert p.data.tobytes() == q.data.tobytes()


def test_student_copy_of_teacher_starts_at_zero_soft_gradient(moons_teacher):
    from cake.losses import student_loss

    teacher = moons_teacher[0]
    student = teacher.copy()
    synth = _synthetic(seed=6)
    z_t = predict_logits(teacher, synth.samples)
    loss = student_loss(student(Tensor(synth.samples)), synth.labels, z_t, LossWeights(lambda1=0.0))
    loss.backward()
    assert max(np.abs(p.grad).max() for p in student.params) < 1e-4


def test_student_class_mismatch(moons_teacher):
    with pytest.raises(ConfigError):
        train_student(mlp_new(2, [4], 3, np.random.default_rng(0)), moons_teacher[0], _synthetic(), TrainConfig(), LossWeights())
    with pytest.raises(ConfigError):
        train_student(mlp_new(2, [4], 2, np.random.default_rng(0)), moons_teacher[0], _synthetic(c=3), TrainConfig(), LossWeights())


def test_metrics_report():
    m = Metrics([0.5, 0.25], [0.8, 0.9], [0.7, 0.95], 0.95, 1.0)
    lines = m.report().splitlines()
    assert lines[0] == "epoch,train_loss,train_acc,test_acc"
    assert lines[2] == "2,0.250000,0.9000,0.9500"
    assert lines[-1] == "final_test_acc,0.9500"
