import numpy as np
import pytest

from gsanet import tensor as T
from gsanet.tensor import ContractError, ConvSpec, GradTape, Tensor


def naive_conv(x, w, b, dilation=1, stride=1):
    bsz, h, wd, _ = x.shape
    kh, kw, _, cout = w.shape
    ph, pw = dilation * (kh - 1) // 2, dilation * (kw - 1) // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    ho, wo = (h - 1) // stride + 1, (wd - 1) // stride + 1
    out = np.zeros((bsz, ho, wo, cout))
    for i in range(ho):
        for j in range(wo):
            for u in range(kh):
                for v in range(kw):
                    out[:, i, j] += xp[:, i * stride + u * dilation, j * stride + v * dilation] @ w[u, v]
    return out + b


@pytest.mark.parametrize("dilation,stride", [(1, 1), (2, 1), (1, 2), (6, 1), (3, 2)])
def test_conv2d_matches_loop_reference(dilation, stride):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 7, 9, 3))
    w = rng.normal(size=(3, 3, 3, 5))
    b = rng.normal(size=5)
    got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), dilation=dilation, stride=stride).data
    np.testing.assert_allclose(got, naive_conv(x, w, b, dilation, stride), rtol=1e-10, atol=1e-10)


def test_conv_1x1_is_per_pixel_matmul():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 4, 4, 3))
    w = rng.normal(size=(1, 1, 3, 2))
    got = T.conv2d(Tensor(x), Tensor(w)).data
    np.testing.assert_allclose(got, x @ w[0, 0], rtol=1e-12)


def test_conv_spec_extent_and_macs():
    spec = ConvSpec((3, 3), 4, 8, dilation=2, stride=2)
    assert spec.pads == (2, 2)
    assert spec.output_extent(9, 10) == (5, 5)
    assert spec.macs(9, 10) == 5 * 5 * 9 * 4 * 8


def test_conv_rejects_channel_mismatch_and_even_kernel():
    x = Tensor(np.zeros((1, 4, 4, 3)))
    with pytest.raises(ContractError):
        T.conv2d(x, Tensor(np.zeros((3, 3, 2, 4))))
    with pytest.raises(ContractError):
        T.conv2d(x, Tensor(np.zeros((2, 2, 3, 4))))


def test_conv_mac_log_counts_every_tap():
    x = Tensor(np.zeros((1, 4, 4, 2), np.float32))
    w = Tensor(np.zeros((3, 3, 2, 3), np.float32))
    with T.count_macs() as log:
        T.conv2d(x, w, dilation=18)
    assert [m for _, m in log] == [4 * 4 * 9 * 2 * 3]


def test_resize_bilinear_half_pixel_centres():
    # align_corners=False: 2 -> 4 samples at source coords -0.25, 0.25, 0.75, 1.25 (clamped)
    x = Tensor(np.array([0.0, 1.0]).reshape(1, 1, 2, 1))
    got = T.resize_bilinear(x, (1, 4)).data.ravel()
    np.testing.assert_allclose(got, [0.0, 0.25, 0.75, 1.0], atol=1e-12)


def test_resize_identity_and_upsample_factor():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 5, 4))
    np.testing.assert_array_equal(T.resize_bilinear(Tensor(x), (3, 5)).data, x)
    assert T.bilinear_upsample(Tensor(x), 4).shape == (2, 12, 20, 4)


def test_interp_matrix_rows_sum_to_one():
    m = T.interp_matrix(5, 13)
    np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-12)


def test_global_avg_pool_and_fc():
    x = np.arange(2 * 2 * 3 * 4, dtype=np.float64).reshape(2, 2, 3, 4)
    gap = T.global_avg_pool(Tensor(x)).data
    assert gap.shape == (2, 1, 1, 4)
    np.testing.assert_allclose(gap[:, 0, 0], x.mean(axis=(1, 2)))
    w = np.ones((4, 2))
    y = T.fully_connected(Tensor(gap.reshape(2, 4)), Tensor(w), Tensor(np.array([1.0, -1.0]))).data
    np.testing.assert_allclose(y, np.stack([gap.reshape(2, 4).sum(1) + 1, gap.reshape(2, 4).sum(1) - 1], 1))


def test_matmul_batched_shape_checks():
    a = Tensor(np.ones((2, 3, 4)))
    with pytest.raises(ContractError):
        T.matmul(a, Tensor(np.ones((2, 5, 6))))
    assert T.matmul(a, Tensor(np.ones((2, 4, 6)))).shape == (2, 3, 6)


def test_sigmoid_saturates_exactly():
    s = T.sigmoid(Tensor(np.array([-100.0, 0.0, 100.0], np.float32))).data
    np.testing.assert_array_equal(s, np.array([0.0, 0.5, 1.0], np.float32))


def test_backward_hand_gradient():
    # L = sum(relu(a * b) + a), grad_a = b * [ab > 0] + 1, grad_b = a * [ab > 0]
    tape = GradTape()
    a = tape.watch(np.array([1.0, -2.0, 3.0]))
    b = tape.watch(np.array([2.0, 1.0, -1.0]))
    loss = T.sum_all(T.add(T.relu(T.mul(a, b)), a))
    tape.backward(loss)
    np.testing.assert_allclose(tape.gradient(a), [3.0, 1.0, 1.0])
    np.testing.assert_allclose(tape.gradient(b), [1.0, 0.0, 0.0])


def test_broadcast_gradient_is_reduced():
    tape = GradTape()
    x = tape.watch(np.ones((2, 3, 3, 4)))
    s = tape.watch(np.full((2, 1, 1, 4), 2.0))
    tape.backward(T.sum_all(T.mul(x, s)))
    np.testing.assert_allclose(tape.gradient(s), np.full((2, 1, 1, 4), 9.0))


def test_unreached_leaf_gets_zero_gradient_and_nonscalar_root_rejected():
    tape = GradTape()
    a = tape.watch(np.ones(3))
    unused = tape.watch(np.ones((2, 2)))
    tape.backward(T.sum_all(T.scale(a, 2.0)))
    np.testing.assert_array_equal(tape.gradient(unused), np.zeros((2, 2)))
    with pytest.raises(ContractError):
        tape.backward(T.scale(a, 2.0))


def test_concat_and_slice_round_trip():
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(1, 2, 2, 3)), rng.normal(size=(1, 2, 2, 5))
    cat = T.concat_channels([Tensor(a), Tensor(b)])
    np.testing.assert_array_equal(T.slice_channels(cat, 3, 8).data, b)
    with pytest.raises(ContractError):
        T.concat_channels([Tensor(a), Tensor(np.zeros((1, 3, 2, 1)))])


def test_tensor_data_is_read_only_and_float32_by_default():
    t = Tensor([1, 2, 3])
    assert t.dtype == np.float32
    with pytest.raises(ValueError):
        t.data[0] = 5
