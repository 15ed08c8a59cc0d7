"""Finite-difference checks for every differentiable op (double precision)."""
import numpy as np

from gradcheck import check_gradients
from stpv.conv import conv2d, conv2d_transpose, conv3d
from stpv.tensor import (
    Tensor,
    add,
    bias_add,
    channel_affine,
    concat,
    embedding,
    layer_norm,
    leaky_relu,
    matmul,
    mul,
    reduce_mean,
    reduce_sum,
    reshape,
    sigmoid,
    slice_axis,
    softmax,
    sub,
    tanh,
    transpose,
)


def leaf(rng, shape, scale=1.0):
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True, dtype=np.float64)


def const(rng, shape):
    return Tensor(rng.normal(size=shape), dtype=np.float64)


def weighted_sum(x, w):
    return reduce_sum(mul(x, w))


def test_elementwise_gradients():
    rng = np.random.default_rng(20)
    a = leaf(rng, (3, 4))
    b = leaf(rng, (3, 4))
    w = const(rng, (3, 4))
    check_gradients(lambda: weighted_sum(add(a, b), w), [a, b])
    check_gradients(lambda: weighted_sum(sub(a, b), w), [a, b])
    check_gradients(lambda: weighted_sum(mul(a, b), w), [a, b])


def test_activation_gradients():
    rng = np.random.default_rng(21)
    x = leaf(rng, (4, 5))
    w = const(rng, (4, 5))
    check_gradients(lambda: weighted_sum(sigmoid(x), w), [x])
    check_gradients(lambda: weighted_sum(tanh(x), w), [x])
    # keep clear of the kink at 0 where the derivative is not defined
    y = Tensor(rng.normal(size=(4, 5)) + np.sign(rng.normal(size=(4, 5))) * 0.5,
               requires_grad=True, dtype=np.float64)
    check_gradients(lambda: weighted_sum(leaky_relu(y, 0.2), w), [y])


def test_layer_norm_and_softmax_gradients():
    rng = np.random.default_rng(22)
    x = leaf(rng, (2, 3, 4))
    w = const(rng, (2, 3, 4))
    check_gradients(lambda: weighted_sum(layer_norm(x, num_axes=2), w), [x])
    check_gradients(lambda: weighted_sum(softmax(x, axis=2), w), [x])


def test_matmul_and_shape_op_gradients():
    rng = np.random.default_rng(23)
    a = leaf(rng, (3, 4))
    b = leaf(rng, (4, 2))
    w = const(rng, (3, 2))
    check_gradients(lambda: weighted_sum(matmul(a, b), w), [a, b])

    x = leaf(rng, (2, 3, 4))
    wt = const(rng, (4, 2, 3))
    check_gradients(lambda: weighted_sum(transpose(x, (2, 0, 1)), wt), [x])
    wr = const(rng, (24,))
    check_gradients(lambda: weighted_sum(reshape(x, (24,)), wr), [x])
    ws = const(rng, (2, 2, 4))
    check_gradients(lambda: weighted_sum(slice_axis(x, 1, 1, 3), ws), [x])

    c1 = leaf(rng, (2, 2))
    c2 = leaf(rng, (2, 3))
    wc = const(rng, (2, 5))
    check_gradients(lambda: weighted_sum(concat([c1, c2], axis=1), wc), [c1, c2])


def test_reduction_gradients():
    rng = np.random.default_rng(24)
    x = leaf(rng, (3, 4, 2))
    w = const(rng, (3,))
    check_gradients(lambda: weighted_sum(reduce_sum(x, axes=(1, 2)), w), [x])
    check_gradients(lambda: weighted_sum(reduce_mean(x, axes=(1, 2)), w), [x])
    check_gradients(lambda: reduce_mean(mul(x, x)), [x])


def test_channel_op_gradients():
    rng = np.random.default_rng(25)
    x = leaf(rng, (2, 3, 4))
    b = leaf(rng, (3,))
    g = leaf(rng, (3,))
    w = const(rng, (2, 3, 4))
    check_gradients(lambda: weighted_sum(bias_add(x, b, axis=1), w), [x, b])
    check_gradients(lambda: weighted_sum(channel_affine(x, g, b, axis=1), w), [x, g, b])


def test_embedding_gradient():
    rng = np.random.default_rng(26)
    table = leaf(rng, (5, 3))
    idx = np.array([0, 2, 2, 4])
    w = const(rng, (4, 3))
    check_gradients(lambda: weighted_sum(embedding(table, idx), w), [table])


def test_conv2d_gradients():
    rng = np.random.default_rng(27)
    x = leaf(rng, (2, 3, 6, 6))
    k = leaf(rng, (2, 3, 3, 3))
    b = leaf(rng, (2,))
    w = const(rng, (2, 2, 3, 3))
    check_gradients(
        lambda: weighted_sum(conv2d(x, k, b, stride=2, padding=1), w), [x, k, b])


def test_conv2d_transpose_gradients():
    rng = np.random.default_rng(28)
    x = leaf(rng, (2, 2, 3, 3))
    k = leaf(rng, (2, 3, 4, 4))
    out_shape = (2, 3, (3 - 1) * 2 - 2 + 4, (3 - 1) * 2 - 2 + 4)
    w = const(rng, out_shape)
    check_gradients(
        lambda: weighted_sum(conv2d_transpose(x, k, stride=2, padding=1), w), [x, k])


def test_conv3d_gradients():
    rng = np.random.default_rng(29)
    x = leaf(rng, (1, 2, 4, 3, 3))
    k = leaf(rng, (2, 2, 2, 3, 3))
    w = const(rng, (1, 2, 4, 3, 3))
    check_gradients(
        lambda: weighted_sum(conv3d(x, k, padding=(0, 1, 1), causal_time=True), w), [x, k])


def test_composite_chain_gradient():
    # conv -> layer norm -> softmax -> weighted sum, as one chained graph
    rng = np.random.default_rng(30)
    x = leaf(rng, (1, 2, 5, 5))
    k = leaf(rng, (3, 2, 3, 3))
    w = const(rng, (1, 3, 5, 5))

    def loss():
        y = conv2d(x, k, padding=1)
        y = layer_norm(y, num_axes=2)
        y = softmax(y, axis=1)
        return weighted_sum(y, w)

    check_gradients(loss, [x, k])
