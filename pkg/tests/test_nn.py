import math

import numpy as np
import pytest

from fedsign.errors import ShapeError, StateError
from fedsign.nn import (
    Conv2d,
    Dense,
    MaxPool2,
    ModelParams,
    Network,
    Relu,
    ScaleNorm,
    SgdMomentum,
    SoftmaxLayer,
    accuracy,
    build_cnn,
    build_mlp,
    cross_entropy,
    fit,
    network_from_descriptor,
    rng_for,
    sgd_step,
    softmax,
)

from conftest import gradcheck


def tiny_net(layers, input_shape, n_classes):
    return Network(layers, input_shape, n_classes, "custom")


# ---------------------------------------------------------------------------
# forward

def test_zero_weight_dense_gives_zero_logits():
    rng = rng_for(0)
    net = tiny_net([Dense(5, 3, rng)], (5,), 3)
    net.layers[0].w[:] = 0.0
    out = net.forward(rng.normal(size=(4, 5)))
    assert not out.any()


def test_identity_dense_maps_basis_vector():
    rng = rng_for(1)
    net = tiny_net([Dense(4, 4, rng)], (4,), 4)
    net.layers[0].w[:] = np.eye(4)
    e1 = np.zeros((1, 4))
    e1[0, 0] = 1.0
    np.testing.assert_array_equal(net.forward(e1), e1)


def test_fresh_scale_norm_is_identity_at_eval():
    layer = ScaleNorm(6)
    x = rng_for(2).normal(size=(5, 6))
    np.testing.assert_allclose(layer.forward(x, train=False), x, rtol=1e-5)


def test_forward_rejects_wrong_input_shape():
    net = build_mlp(8, [4], 3, seed=0)
    with pytest.raises(ShapeError):
        net.forward(np.zeros((2, 7)))


def test_forward_deterministic():
    net = build_cnn(8, 1, [4, 8], 3, seed=5)
    x = rng_for(3).normal(size=(2, 8, 8, 1))
    np.testing.assert_array_equal(net.forward(x), net.forward(x))


# ---------------------------------------------------------------------------
# backward

def test_backward_before_forward_raises():
    net = build_mlp(4, [4], 2, seed=0)
    with pytest.raises(StateError):
        net.backward(np.zeros((1, 2)))


def test_linear_layer_gradient_is_input_outer_product():
    rng = rng_for(4)
    net = tiny_net([Dense(3, 2, rng)], (3,), 2)
    x = rng.normal(size=(5, 3))
    net.forward(x, train=True)
    # loss = sum of logits -> dlogits = 1
    grads = net.backward(np.ones((5, 2)))
    np.testing.assert_allclose(grads[(0, "kernel")], x.T @ np.ones((5, 2)))
    np.testing.assert_allclose(grads[(0, "bias")], np.full(2, 5.0))


def test_zero_upstream_gradient_gives_zero_grads():
    net = build_mlp(6, [5, 4], 3, seed=1)
    net.forward(rng_for(5).normal(size=(4, 6)), train=True)
    grads = net.backward(np.zeros((4, 3)))
    assert all(not g.any() for g in grads.entries.values())


def layer_cases():
    rng = rng_for("cases")
    return [
        ("dense", tiny_net([Dense(6, 4, rng)], (6,), 4), (6,)),
        ("relu", tiny_net([Dense(6, 5, rng), Relu(), Dense(5, 3, rng)], (6,), 3), (6,)),
        ("scale-norm", tiny_net([Dense(6, 5, rng), ScaleNorm(5), Dense(5, 3, rng)], (6,), 3), (6,)),
        ("softmax", tiny_net([Dense(6, 5, rng), SoftmaxLayer(), Dense(5, 3, rng)], (6,), 3), (6,)),
        ("conv2d", tiny_net([Conv2d(2, 3, 3, rng), Dense(4 * 4 * 3, 3, rng)], (4, 4, 2), 3), (4, 4, 2)),
        ("maxpool", tiny_net([Conv2d(1, 3, 3, rng), MaxPool2(), Dense(2 * 2 * 3, 3, rng)], (4, 4, 1), 3), (4, 4, 1)),
        ("full-cnn", build_cnn(8, 1, [4, 6], 3, seed=9), (8, 8, 1)),
        ("full-mlp", build_mlp(8, [6, 6], 3, seed=9), (8,)),
    ]


@pytest.mark.parametrize("name,net,in_shape", layer_cases(), ids=lambda c: c if isinstance(c, str) else "")
def test_gradients_match_finite_differences(name, net, in_shape):
    rng = rng_for("fd", name)
    x = rng.normal(size=(5,) + in_shape)
    labels = rng.integers(0, net.n_classes, size=5)
    gradcheck(net, x, labels, rng)


# ---------------------------------------------------------------------------
# losses

def test_uniform_logits_loss_is_log_class_count():
    for c in (2, 5, 10):
        loss, _ = cross_entropy(np.zeros((3, c)), np.zeros(3, dtype=int))
        assert loss == pytest.approx(math.log(c), rel=1e-12)


def test_large_margin_loss_tends_to_zero():
    logits = np.zeros((1, 4))
    logits[0, 2] = 50.0
    loss, _ = cross_entropy(logits, [2])
    assert loss < 1e-3


def test_two_class_closed_form():
    loss, _ = cross_entropy(np.array([[1.0, 0.0]]), [0])
    assert loss == pytest.approx(math.log(1 + math.exp(-1)), rel=1e-12)


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    rng = rng_for(6)
    logits = rng.normal(size=(4, 3))
    labels = np.array([0, 2, 1, 1])
    _, d = cross_entropy(logits, labels)
    expect = softmax(logits)
    expect[np.arange(4), labels] -= 1
    np.testing.assert_allclose(d, expect / 4, rtol=1e-12)


def test_out_of_range_label_raises():
    with pytest.raises(ShapeError):
        cross_entropy(np.zeros((2, 3)), [0, 3])


def test_softmax_rows_sum_to_one():
    p = softmax(rng_for(7).normal(size=(50, 9), scale=30))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


# ---------------------------------------------------------------------------
# sgd

def make_params():
    return ModelParams({(0, "kernel"): np.array([1.0, 2.0]), (0, "bias"): np.array([0.5])})


def test_plain_sgd_step():
    p = make_params()
    g = ModelParams({(0, "kernel"): np.array([1.0, -1.0]), (0, "bias"): np.array([2.0])})
    out, _ = sgd_step(p, g, lr=0.01, momentum=0.0)
    np.testing.assert_allclose(out[(0, "kernel")], [0.99, 2.01])
    np.testing.assert_allclose(out[(0, "bias")], [0.48])


def test_zero_grad_keeps_params():
    p = make_params()
    out, _ = sgd_step(p, p.zeros_like(), lr=0.1, momentum=0.9)
    assert out.equal(p)


def test_two_momentum_steps_unroll():
    p = ModelParams({(0, "kernel"): np.zeros(3)})
    g = ModelParams({(0, "kernel"): np.ones(3)})
    p1, v1 = sgd_step(p, g, lr=1.0, momentum=0.9)
    p2, _ = sgd_step(p1, g, lr=1.0, momentum=0.9, velocity=v1)
    np.testing.assert_allclose(p2[(0, "kernel")], np.full(3, -(1.0 + 1.9)))


def test_sgd_key_mismatch_raises():
    p = make_params()
    g = ModelParams({(0, "kernel"): np.zeros(2)})
    with pytest.raises(StateError):
        sgd_step(p, g, lr=0.1, momentum=0.0)


def test_inplace_optimizer_matches_functional():
    net = build_mlp(5, [4], 2, seed=3)
    x = rng_for(8).normal(size=(6, 5))
    y = rng_for(9).integers(0, 2, size=6)
    logits = net.forward(x, train=True)
    _, d = cross_entropy(logits, y)
    grads = net.backward(d)
    snapshot = net.get_params()  # after forward: running stats already updated
    expect, _ = sgd_step(snapshot, grads, lr=0.05, momentum=0.9)
    SgdMomentum(net.params, momentum=0.9).step(net.params, grads, lr=0.05)
    assert net.get_params().equal(expect)


# ---------------------------------------------------------------------------
# params plumbing

def test_flatten_unflatten_roundtrip_bitwise():
    net = build_cnn(8, 1, [4, 8], 5, seed=11)
    p = net.get_params()
    again = p.unflatten(p.flatten())
    assert p.equal(again)


def test_set_get_roundtrip_and_key_check():
    net = build_mlp(6, [4], 3, seed=2)
    other = build_mlp(6, [4], 3, seed=12)
    p = other.get_params()
    net.set_params(p)
    assert net.get_params().equal(p)
    with pytest.raises(StateError):
        net.set_params(build_mlp(6, [5], 3, seed=2).get_params())


def test_vector_space_ops():
    net = build_mlp(4, [3], 2, seed=4)
    p = net.get_params()
    q = (p + p) * 0.5
    assert q.allclose(p, rtol=0, atol=0) or q.equal(p)
    z = p - p
    assert all(not v.any() for v in z.entries.values())


def test_descriptor_roundtrip():
    for net in (build_mlp(32, [16, 16], 4, seed=7), build_cnn(8, 1, [8, 16], 4, seed=7)):
        rebuilt = network_from_descriptor(net.descriptor, seed=7)
        assert rebuilt.get_params().equal(net.get_params())
        assert rebuilt.descriptor == net.descriptor


def test_bad_descriptor_raises():
    with pytest.raises(ShapeError):
        network_from_descriptor("vit:16:2", seed=0)


# ---------------------------------------------------------------------------
# training determinism

def test_fit_is_bitwise_deterministic():
    rng = rng_for(10)
    x = rng.normal(size=(40, 6))
    y = rng.integers(0, 3, size=40)
    runs = []
    for _ in range(2):
        net = build_mlp(6, [8], 3, seed=21)
        fit(net, x, y, epochs=3, lr=0.05, seed=33)
        runs.append(net.get_params())
    assert runs[0].equal(runs[1])


def test_fit_learns_separable_data():
    rng = rng_for(11)
    n = 60
    y = np.repeat([0, 1], n // 2)
    x = rng.normal(size=(n, 4)) + 4.0 * y[:, None]
    net = build_mlp(4, [8], 2, seed=13)
    fit(net, x, y, epochs=30, lr=0.05, seed=1)
    assert accuracy(net, x, y) >= 0.95
