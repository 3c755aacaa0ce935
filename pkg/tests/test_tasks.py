import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.linear_model import LogisticRegression

from adrp.errors import ContractError
from adrp.tasks import CLS, RULES, SyntheticTask, label_rule


@pytest.mark.parametrize("rule", RULES)
def test_generation_is_deterministic_and_disjoint(rule):
    task = SyntheticTask("t", rule, seed=3, train_size=300, dev_size=100)
    a, b = task.generate(), task.generate()
    assert np.array_equal(a.train_x, b.train_x) and np.array_equal(a.dev_y, b.dev_y)
    train = {r.tobytes() for r in a.train_x}
    assert not any(r.tobytes() in train for r in a.dev_x)
    assert np.all(a.train_x[:, 0] == CLS)
    other = SyntheticTask("t", rule, seed=4, train_size=300, dev_size=100).generate()
    assert not np.array_equal(a.train_x, other.train_x)


@pytest.mark.parametrize("rule", RULES)
def test_labels_match_independent_rule(rule):
    task = SyntheticTask("t", rule, seed=0, train_size=400, dev_size=100)
    d = task.generate()
    for x, y in zip(np.concatenate([d.train_x, d.dev_x]), np.concatenate([d.train_y, d.dev_y])):
        assert label_rule(task, x) == y


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 4), st.integers(8, 24))
def test_majority_has_unique_maximum(seed, classes, seq_len):
    task = SyntheticTask("t", "majority-token-class", seed=seed, num_classes=classes, seq_len=seq_len,
                         train_size=30, dev_size=10)
    d = task.generate()
    for x, y in zip(d.train_x, d.train_y):
        counts = np.array([(x[1:] == c).sum() for c in range(1, classes + 1)])
        assert counts[y] == counts.max() and (counts == counts.max()).sum() == 1
    assert d.train_x.max() < task.vocab_size


def test_classes_are_roughly_balanced():
    d = SyntheticTask("t", "majority-token-class", seed=0, num_classes=3).generate()
    freq = np.bincount(d.train_y, minlength=3) / len(d.train_y)
    assert np.all(np.abs(freq - 1 / 3) < 0.05)


def test_bag_of_tokens_logistic_regression_separates_majority_task():
    d = SyntheticTask("t", "majority-token-class", seed=0, train_size=2000, dev_size=500).generate()

    def bag(x):
        return np.stack([np.bincount(r, minlength=32) for r in x])

    clf = LogisticRegression(max_iter=2000).fit(bag(d.train_x), d.train_y)
    assert clf.score(bag(d.dev_x), d.dev_y) > 0.95


def test_validation():
    with pytest.raises(ContractError):
        SyntheticTask(rule="nope")
    with pytest.raises(ContractError):
        SyntheticTask(rule="first-token-parity", num_classes=3)
    with pytest.raises(ContractError):
        SyntheticTask(vocab_size=4)
    with pytest.raises(ContractError):
        SyntheticTask(vocab_size=6, seq_len=4, train_size=5000, dev_size=10).generate()
