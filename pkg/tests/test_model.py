import numpy as np
import pytest

from pintlab import rng as rng_mod
from pintlab.autodiff import Tensor, backward
from pintlab.errors import ContractError, ShapeError
from pintlab.model import MiniSegNet


def test_init_is_deterministic_per_seed():
    a = MiniSegNet(seed=7).state()
    b = MiniSegNet(seed=7).state()
    c = MiniSegNet(seed=8).state()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_parameter_naming_scheme_and_shapes():
    net = MiniSegNet(seed=0, widths=(8, 16, 32), num_classes=2)
    names = net.named_parameters()
    assert "enc1.0.weight" in names and "head.0.bias" in names
    assert names["enc1.0.weight"].shape == (8, 1, 3, 3)
    assert names["dec2.0.weight"].shape == (16, 48, 3, 3)  # concat of up(32)+skip(16)
    assert names["head.0.weight"].shape == (2, 8, 1, 1)
    assert len(names) == 16  # 8 stages x (weight, bias)


def test_he_init_scale_and_zero_biases():
    net = MiniSegNet(seed=3, widths=(16, 32, 64))
    w = net.named_parameters()["enc3.0.weight"].data  # fan_in = 32*9
    expected_std = np.sqrt(2.0 / (32 * 9))
    assert abs(w.std() / expected_std - 1.0) < 0.1  # 64*32*9 samples, loose bound
    for name, p in net.named_parameters().items():
        if name.endswith("bias"):
            assert not p.data.any()


def test_forward_shape_contract():
    net = MiniSegNet(seed=0)
    logits = net.forward(np.zeros((2, 1, 32, 32)))
    assert logits.shape == (2, 2, 32, 32)
    logits = net.forward(np.zeros((1, 1, 16, 24)))
    assert logits.shape == (1, 2, 16, 24)


def test_forward_shape_errors():
    net = MiniSegNet(seed=0)
    with pytest.raises(ShapeError):
        net.forward(np.zeros((1, 1, 30, 32)))  # not divisible by 4
    with pytest.raises(ShapeError):
        net.forward(np.zeros((1, 2, 32, 32)))  # two input channels
    with pytest.raises(ShapeError):
        net.forward(np.zeros((32, 32)))


def test_zero_input_gives_uniform_softmax():
    # with zero biases a zero image can only produce per-channel constants
    net = MiniSegNet(seed=1)
    logits = net.forward(np.zeros((1, 1, 32, 32))).data
    for c in range(logits.shape[1]):
        assert np.allclose(logits[0, c], logits[0, c, 0, 0], atol=1e-12)
    shifted = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
    assert np.allclose(probs, 0.5, atol=1e-12)


def test_eval_forward_is_deterministic_train_is_not():
    net = MiniSegNet(seed=2)
    x = rng_mod.stream(0, 60).normal(size=(1, 1, 32, 32))
    a = net.forward(x).data
    b = net.forward(x).data
    assert np.array_equal(a, b)
    t1 = net.forward(x, train_mode=True, dropout_rng=rng_mod.stream(0, 61)).data
    t2 = net.forward(x, train_mode=True, dropout_rng=rng_mod.stream(0, 62)).data
    assert not np.array_equal(t1, t2)
    # same dropout stream reproduces the same output
    t3 = net.forward(x, train_mode=True, dropout_rng=rng_mod.stream(0, 61)).data
    assert np.array_equal(t1, t3)


def test_train_mode_requires_rng():
    net = MiniSegNet(seed=0)
    with pytest.raises(ContractError):
        net.forward(np.zeros((1, 1, 32, 32)), train_mode=True)


def test_gradient_reaches_every_parameter():
    net = MiniSegNet(seed=4)
    x = rng_mod.stream(0, 63).normal(size=(2, 1, 16, 16))
    logits = net.forward(x, train_mode=True, dropout_rng=rng_mod.stream(0, 64))
    backward((logits * logits).sum())
    for name, p in net.named_parameters().items():
        assert p.grad is not None, name
        assert np.abs(p.grad).max() > 0.0, name


def test_clone_is_independent_and_grad_flag_respected():
    net = MiniSegNet(seed=5)
    frozen = net.clone(requires_grad=False)
    assert all(not p.requires_grad for p in frozen.parameters())
    before = net.named_parameters()["enc1.0.weight"].data.copy()
    frozen.named_parameters()["enc1.0.weight"].data += 1.0
    assert np.array_equal(net.named_parameters()["enc1.0.weight"].data, before)


def test_state_roundtrip_and_from_state():
    net = MiniSegNet(seed=6, widths=(4, 8, 16), num_classes=3)
    rebuilt = MiniSegNet.from_state(net.state(), dropout_rate=net.dropout_rate)
    assert rebuilt.widths == (4, 8, 16)
    assert rebuilt.num_classes == 3
    x = rng_mod.stream(0, 65).normal(size=(1, 1, 16, 16))
    assert np.array_equal(net.forward(x).data, rebuilt.forward(x).data)

    other = MiniSegNet(seed=6, widths=(4, 8, 16), num_classes=3)
    state = net.state()
    del state["head.0.bias"]
    with pytest.raises(ContractError):
        other.load_state(state)
    with pytest.raises(ContractError):
        MiniSegNet.from_state(state)


def test_constructor_validation():
    with pytest.raises(ContractError):
        MiniSegNet(seed=0, widths=(8, 16))
    with pytest.raises(ContractError):
        MiniSegNet(seed=0, num_classes=1)
    with pytest.raises(ContractError):
        MiniSegNet(seed=0, dropout_rate=1.0)
    with pytest.raises(ContractError):
        MiniSegNet()  # seed required for a fresh init
