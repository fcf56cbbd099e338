import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tisv.autograd import Tensor
from tisv.errors import CheckpointError, ConfigurationError, TrainingDivergedError
from tisv.network import TINY_CONFIG, build_network
from tisv.optim import Sgd, SgdConfig, sgd_step
from tisv.params import FORMAT_VERSION, MAGIC, ParameterStore, SplitMix64, fan_in_uniform


def one(theta=1.0):
    return {"w": Tensor(np.array([theta]), requires_grad=True)}


def test_plain_sgd_step():
    p = one()
    p["w"].grad = np.array([1.0])
    sgd_step(p, SgdConfig(0.1, 0.0, 0.0))
    assert p["w"].data[0] == pytest.approx(0.9)


def test_momentum_recurrence():
    p = one()
    opt = Sgd(p, SgdConfig(0.1, 0.9, 0.0))
    seen = []
    for _ in range(2):
        p["w"].grad = np.array([1.0])
        opt.step()
        seen.append(p["w"].data[0])
    assert seen == pytest.approx([0.9, 0.71], abs=1e-15)
    assert opt.velocity["w"][0] == pytest.approx(1.9)


def test_pure_weight_decay():
    p = one(2.0)
    p["w"].grad = np.array([0.0])
    sgd_step(p, SgdConfig(0.1, 0.9, 1e-5))
    assert p["w"].data[0] == pytest.approx(2.0 - 0.1 * 1e-5 * 2.0, abs=1e-18)


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=6))
def test_zero_grad_zero_decay_is_identity(vals):
    p = {"w": Tensor(np.array(vals), requires_grad=True)}
    p["w"].grad = np.zeros(len(vals))
    sgd_step(p, SgdConfig(0.5, 0.9, 0.0))
    np.testing.assert_array_equal(p["w"].data, vals)


def test_grads_cleared_and_nan_raises_with_step():
    p = one()
    opt = Sgd(p, SgdConfig())
    p["w"].grad = np.array([1.0])
    opt.step()
    assert p["w"].grad is None
    p["w"].grad = np.array([np.nan])
    with pytest.raises(TrainingDivergedError) as info:
        opt.step()
    assert info.value.step == 1


@pytest.mark.parametrize("kw", [dict(learning_rate=0), dict(momentum=1.0), dict(weight_decay=-1)])
def test_bad_sgd_config(kw):
    with pytest.raises(ConfigurationError):
        SgdConfig(**kw)


# -- initialisation -------------------------------------------------------------

def test_splitmix_reference_values():
    # first outputs for seed 0 of the published SplitMix64 generator
    assert SplitMix64(0).next_u64(3).tolist() == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]


def test_fan_in_uniform_bounds():
    w = fan_in_uniform(SplitMix64(1), (8, 3, 5))
    bound = np.sqrt(6.0 / 15)
    assert np.all(np.abs(w) <= bound) and np.abs(w).max() > 0.8 * bound


def test_same_seed_same_parameters():
    a, b = build_network(TINY_CONFIG, 7), build_network(TINY_CONFIG, 7)
    assert a.digest() == b.digest()
    assert a.digest() != build_network(TINY_CONFIG, 8).digest()


# -- checkpoint ---------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    store = build_network(TINY_CONFIG, 3)
    for st_ in store.bn.values():
        st_.mean += 0.25
        st_.initialized = True
    path = tmp_path / "m.ckpt"
    store.save(path)
    back = ParameterStore.load(path)
    assert back.digest() == store.digest()
    assert back.meta == store.meta
    for name, st_ in store.bn.items():
        np.testing.assert_array_equal(back.bn[name].mean, st_.mean)
    raw = path.read_bytes()
    assert raw[:4] == MAGIC and int.from_bytes(raw[4:8], "little") == FORMAT_VERSION


def test_checkpoint_corruption_detected(tmp_path):
    raw = bytearray(build_network(TINY_CONFIG, 3).to_bytes())
    raw[-20] ^= 0xFF
    with pytest.raises(CheckpointError):
        ParameterStore.from_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        ParameterStore.from_bytes(b"XXXX" + bytes(raw[4:]))


def test_subset_and_copy_are_independent():
    store = build_network(TINY_CONFIG, 0)
    dup = store.copy()
    dup["attn.bias"].data += 1.0
    assert store["attn.bias"].data[0] == 0.0
    assert set(store.subset("attn")) == {"attn.weight", "attn.bias"}
