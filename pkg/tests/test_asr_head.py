import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tisv import autograd as ag
from tisv.asr_head import (AsrHeadConfig, KeywordVocabulary, asr_loss, build_head, classify, fit_head,
                           keyword_accuracy, logits, predict)
from tisv.autograd import Tensor
from tisv.errors import ConfigurationError, ContractError
from tisv.gradcheck import finite_diff_check


def test_zero_head_is_uniform():
    head = build_head(AsrHeadConfig(4, 3), zero=True)
    np.testing.assert_array_equal(classify(head, np.ones(3)).data, 0.25)


def test_saturated_logits():
    head = build_head(AsrHeadConfig(2, 1), zero=True)
    head["asr.bias"].data[:] = [10.0, -10.0]
    p = classify(head, np.zeros(1)).data
    assert p[0] == pytest.approx(1.0, abs=1e-8) and p[1] == pytest.approx(2.06e-9, rel=1e-2)


@given(st.floats(-100, 100))
def test_argmax_shift_invariant(c):
    head = build_head(AsrHeadConfig(3, 4), seed=2)
    x = np.random.default_rng(0).normal(size=(6, 4))
    base = predict(head, x)
    head["asr.bias"].data += c
    np.testing.assert_array_equal(predict(head, x), base)


def test_cross_entropy_values():
    assert asr_loss(Tensor([0.5, 0.5]), 0).item() == pytest.approx(np.log(2), abs=1e-15)
    assert asr_loss(Tensor([0.0, 1.0]), 1).item() == 0.0
    batch = Tensor([[0.5, 0.5], [1.0, 0.0]])
    assert asr_loss(batch, [1, 0]).item() == pytest.approx(0.346574, abs=1e-6)


def test_cross_entropy_contract():
    with pytest.raises(ContractError):
        asr_loss(Tensor([0.5, 0.5]), 2)
    with pytest.raises(ContractError):
        asr_loss(Tensor([[0.5, 0.5]]), [0, 1])


def test_cross_entropy_clamps_zero_probability():
    assert np.isfinite(asr_loss(Tensor([1.0, 0.0]), 1).item())


@given(st.integers(0, 1000))
def test_logit_gradient_is_probs_minus_onehot(seed):
    rng = np.random.default_rng(seed)
    z = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    y = rng.integers(0, 4, size=3)
    loss = asr_loss(ag.softmax(z, axis=1), y)
    loss.backward()
    p = ag.softmax(z.data, axis=1).data
    expect = (p - np.eye(4)[y]) / 3
    np.testing.assert_allclose(z.grad, expect, atol=1e-12)
    assert loss.item() >= 0


def test_head_gradient_check():
    rng = np.random.default_rng(1)
    head = build_head(AsrHeadConfig(3, 5), seed=1)
    x, y = rng.normal(size=(6, 5)), rng.integers(0, 3, size=6)
    assert finite_diff_check(lambda: asr_loss(classify(head, x), y), head).max_rel_err < 1e-5


def test_accuracy_and_permutation_invariance():
    head = build_head(AsrHeadConfig(2, 2), zero=True)
    head["asr.weight"].data[:] = np.eye(2)
    x = np.array([[1.0, 0.0], [0.0, 1.0], [0.2, 0.9]])
    assert keyword_accuracy(head, x, [0, 1, 1]) == 1.0
    perm = [2, 0, 1]
    assert keyword_accuracy(head, x[perm], np.array([0, 1, 1])[perm]) == 1.0
    with pytest.raises(ContractError):
        keyword_accuracy(head, x[:0], [])


def test_random_head_near_chance():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(4000, 8))
    y = np.tile(np.arange(4), 1000)
    accs = [keyword_accuracy(build_head(AsrHeadConfig(4, 8), seed=s), x, y) for s in range(10)]
    assert abs(np.mean(accs) - 0.25) < 0.03


def test_fit_head_learns_separable_keywords():
    rng = np.random.default_rng(0)
    y = np.repeat([0, 1, 2], 20)
    x = np.eye(3)[y] + 0.1 * rng.normal(size=(60, 3))
    assert keyword_accuracy(fit_head(x, y, 3), x, y) == 1.0


def test_config_and_vocabulary(tmp_path):
    with pytest.raises(ConfigurationError):
        AsrHeadConfig(1, 4)
    vocab = KeywordVocabulary(["bin-red", "set-blue"])
    assert vocab.index("set-blue") == 1 and vocab.label("bin-red").index == 0
    vocab.save(tmp_path / "v.txt")
    assert (tmp_path / "v.txt").read_text(encoding="utf-8") == "bin-red\nset-blue\n"
    assert KeywordVocabulary.load(tmp_path / "v.txt").names == vocab.names
    with pytest.raises(ConfigurationError):
        KeywordVocabulary(["a", "a"])
    assert logits(build_head(AsrHeadConfig(2, 3)), np.ones((4, 3))).shape == (4, 2)
