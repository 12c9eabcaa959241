import math

import numpy as np
import pytest

from gsanet import attention as A
from gsanet import tensor as T
from gsanet.rng import stream
from gsanet.tensor import ContractError, Tensor


def branches(rng, channels=(3, 5, 4), hw=(3, 3), batch=2):
    return [Tensor(rng.normal(size=(batch, *hw, c))) for c in channels]


def params(variant, channels=(3, 5, 4), seed=0, gamma="auto"):
    shapes = A.sa_param_shapes(channels, variant, gamma)
    raw = {k: v.astype(np.float64) for k, v in A.he_init(stream(seed, "test"), shapes).items()}
    rng = np.random.default_rng(seed + 1)
    for k in raw:
        if k.endswith(".b"):
            raw[k] = rng.normal(0, 0.1, raw[k].shape)
    return raw


def typed(variant, raw, n):
    return A.SA_PARAM_TYPES[variant].take({f"p.{k}": v for k, v in raw.items()}, "p", n)


def unit_params(variant, channels):
    """Zero weights and a large bias: every sigmoid gate saturates to exactly 1."""
    raw = {k: np.zeros(s) for k, s in A.sa_param_shapes(channels, variant).items()}
    for k in raw:
        if k.startswith(("diffuse", "joint")) and k.endswith(".b") or k.endswith("fc2.b") and k.startswith("se"):
            raw[k][:] = 100.0
    return typed(variant, raw, len(channels))


def test_gamma_and_widths():
    assert A.gamma_for([64] * 5) == 80
    assert A.gamma_for([3, 4]) == 4
    assert A.gamma_for([8, 8], policy=6) == 6
    assert A.se_width(64) == 16 and A.se_width(8) == 4
    assert A.embed_width(64) == 32 and A.embed_width(6) == 4
    with pytest.raises(ContractError):
        A.gamma_for([8], policy=0)


@pytest.mark.parametrize("variant", ["full", "condense_only", "diffuse_only"])
def test_param_count_closed_form(variant):
    for channels in [(3, 5, 4), (64,) * 5, (48, 64)]:
        shapes = A.sa_param_shapes(channels, variant)
        assert A.sa_param_count(channels, variant) == sum(math.prod(s) for s in shapes.values())


def test_full_sa_count_formula_by_hand():
    # channels (64,) * 5: sum C = 320, gamma = h = 80
    # fc1 320*80 + 80, fc2 80*80 + 80, five heads 80*64 + 64
    assert A.sa_param_count([64] * 5, "full") == 320 * 80 + 80 + 80 * 80 + 80 + 5 * (80 * 64 + 64)


def test_condense_only_matches_full_count():
    # one gamma -> sum(C) FC holds exactly as many weights as n gamma -> C_i heads
    for channels in [(3, 5, 4), (64,) * 5]:
        assert A.sa_param_count(channels, "condense_only") == A.sa_param_count(channels, "full")


def test_condense_single_pixel_by_hand():
    # two 1x1 branches with one channel each, gamma = hidden = 1 via an explicit gamma
    bs = [Tensor(np.array([[[[2.0]]]])), Tensor(np.array([[[[-1.0]]]]))]
    raw = {"fc1.w": np.array([[0.5], [1.0]]), "fc1.b": np.array([0.25]),
           "fc2.w": np.array([[3.0]]), "fc2.b": np.array([-1.0]),
           "diffuse0.w": np.array([[1.0]]), "diffuse0.b": np.array([0.0]),
           "diffuse1.w": np.array([[-1.0]]), "diffuse1.b": np.array([0.0])}
    p = typed("full", raw, 2)
    # relu(0.5*2 - 1 + 0.25) = 0.25, then 3 * 0.25 - 1 = -0.25
    np.testing.assert_allclose(A.sa_condense(bs, p).data, [[-0.25]])
    atts = A.sa_diffuse(A.sa_condense(bs, p), p)
    s = 1 / (1 + math.exp(0.25))
    np.testing.assert_allclose([atts[0].data[0, 0], atts[1].data[0, 0]], [s, 1 - s], rtol=1e-12)


def test_zero_condensate_gives_half_attention():
    raw = {k: np.zeros(s) for k, s in A.sa_param_shapes((3, 4), "full").items()}
    bs = [Tensor(np.zeros((1, 2, 2, 3))), Tensor(np.zeros((1, 2, 2, 4)))]
    p = typed("full", raw, 2)
    np.testing.assert_array_equal(A.sa_condense(bs, p).data, np.zeros((1, 4)))
    for a, c in zip(A.attention_vectors(bs, p), (3, 4)):
        np.testing.assert_array_equal(a.data, np.full((1, c), 0.5))


@pytest.mark.parametrize("variant", ["full", "condense_only", "diffuse_only"])
def test_unit_attention_is_concat(variant):
    rng = np.random.default_rng(5)
    channels = (3, 5, 4)
    bs = [Tensor(b.data.astype(np.float32)) for b in branches(rng, channels)]
    out = A.apply_attentions(bs, A.attention_vectors(bs, unit_params(variant, channels)))
    np.testing.assert_array_equal(out.data, T.concat_channels(bs).data)


def test_attention_shapes_and_range():
    rng = np.random.default_rng(6)
    bs = branches(rng)
    raw = params("full")
    atts = A.attention_vectors(bs, typed("full", raw, 3))
    assert [a.shape for a in atts] == [(2, 3), (2, 5), (2, 4)]
    assert all(np.all((a.data > 0) & (a.data < 1)) for a in atts)
    assert A.selective_attention(bs, typed("full", raw, 3)).shape == (2, 3, 3, 12)


def test_annihilated_branch_vanishes():
    channels = (2, 3)
    raw = {k: np.zeros(s) for k, s in A.sa_param_shapes(channels, "full").items()}
    raw["diffuse0.b"][:] = -200.0
    raw["diffuse1.b"][:] = 200.0
    rng = np.random.default_rng(7)
    bs = branches(rng, channels)
    out = A.selective_attention(bs, typed("full", raw, 2)).data
    assert np.abs(out[..., :2]).max() < 1e-80
    np.testing.assert_array_equal(out[..., 2:], bs[1].data)


def cross_sensitivity(variant, eps=1e-4):
    rng = np.random.default_rng(8)
    channels = (3, 5, 4)
    bs = branches(rng, channels)
    raw = params(variant, channels)
    p = typed(variant, raw, 3)
    worst = 0.0
    for idx in [(0, 0, 0, 0), (1, 2, 1, 3), (0, 1, 2, 4)]:
        plus, minus = bs[1].data.copy(), bs[1].data.copy()
        plus[idx] += eps
        minus[idx] -= eps
        a_plus = A.attention_vectors([bs[0], Tensor(plus), bs[2]], p)[0].data
        a_minus = A.attention_vectors([bs[0], Tensor(minus), bs[2]], p)[0].data
        worst = max(worst, np.abs(a_plus - a_minus).max() / (2 * eps))
    return worst


def test_full_sa_couples_branches():
    assert cross_sensitivity("full") > 1e-8
    assert cross_sensitivity("condense_only") > 1e-8


def test_diffuse_only_has_no_cross_path():
    assert cross_sensitivity("diffuse_only") == 0.0


def test_branch_validation():
    with pytest.raises(ContractError):
        A.check_branches([Tensor(np.zeros((1, 2, 2, 3)))])
    with pytest.raises(ContractError):
        A.check_branches([Tensor(np.zeros((1, 2, 2, 3))), Tensor(np.zeros((1, 3, 2, 3)))])
    raw = params("full", (3, 5, 4))
    with pytest.raises(ContractError):
        A.attention_vectors(branches(np.random.default_rng(0), (3, 5)), typed("full", raw, 2))


# ----------------------------------------------------------------------------
# global attention feature
# ----------------------------------------------------------------------------

def gaf_params(c, seed=0, zero_value=False):
    raw = {k: v.astype(np.float64) for k, v in A.he_init(stream(seed, "gaf"), A.gaf_param_shapes(c)).items()}
    if zero_value:
        raw["value.w"][:] = 0
    return A.GAFParams.take({f"g.{k}": v for k, v in raw.items()}, "g")


@pytest.mark.parametrize("mode", ["softmax", "sparsemax"])
def test_gaf_zero_value_is_identity(mode):
    x = Tensor(np.random.default_rng(9).normal(size=(2, 3, 4, 6)).astype(np.float32))
    p = A.GAFParams.take({f"g.{k}": np.zeros(s, np.float32) if k.startswith("value") else
                          np.ones(s, np.float32) for k, s in A.gaf_param_shapes(6).items()}, "g")
    np.testing.assert_array_equal(A.gaf(x, mode, p).data, x.data)


@pytest.mark.parametrize("mode", ["softmax", "sparsemax"])
def test_gaf_rows_on_simplex_and_shape(mode):
    x = Tensor(np.random.default_rng(10).normal(size=(2, 3, 4, 6)))
    out, amap = A.gaf(x, mode, gaf_params(6), return_map=True)
    assert out.shape == x.shape
    assert amap.raw.shape == amap.normalized.shape == (2, 12, 12)
    np.testing.assert_allclose(amap.normalized.data.sum(-1), 1.0, atol=1e-5)
    np.testing.assert_allclose(amap.raw.data, np.swapaxes(amap.raw.data, 1, 2), atol=1e-12)


@pytest.mark.parametrize("mode", ["softmax", "sparsemax"])
def test_gaf_single_pixel(mode):
    x = Tensor(np.random.default_rng(11).normal(size=(1, 1, 1, 6)))
    p = gaf_params(6)
    out, amap = A.gaf(x, mode, p, return_map=True)
    np.testing.assert_array_equal(amap.normalized.data, [[[1.0]]])
    value = T.conv2d(x, p.value_w, p.value_b).data
    np.testing.assert_allclose(out.data, x.data + value, rtol=1e-12)


def test_gaf_constant_map_stays_constant():
    x = Tensor(np.tile(np.random.default_rng(12).normal(size=(1, 1, 1, 6)), (1, 3, 3, 1)))
    out, amap = A.gaf(x, "softmax", gaf_params(6), return_map=True)
    np.testing.assert_allclose(amap.normalized.data, np.full((1, 9, 9), 1 / 9), atol=1e-12)
    np.testing.assert_allclose(out.data, np.broadcast_to(out.data[:, :1, :1], out.shape), atol=1e-12)


def outlier_feature():
    x = np.full((1, 2, 2, 8), 0.1)
    x[0, 1, 1] = 6.0
    return Tensor(x)


def test_gaf_sparsemax_zeroes_dissimilar_pixels():
    p = gaf_params(8, seed=3)
    _, smap = A.gaf(outlier_feature(), "sparsemax", p, return_map=True)
    _, fmap = A.gaf(outlier_feature(), "softmax", p, return_map=True)
    assert (smap.normalized.data == 0).mean() > 0
    assert (fmap.normalized.data == 0).sum() == 0


def test_gaf_validation():
    p = gaf_params(6)
    with pytest.raises(ContractError):
        A.gaf(Tensor(np.zeros((1, 0, 3, 6))), "softmax", p)
    with pytest.raises(ContractError):
        A.gaf(Tensor(np.zeros((1, 2, 2, 6))), "entmax", p)


def test_gaf_macs_match_traced_products():
    x = Tensor(np.zeros((1, 3, 5, 6)))
    with T.count_macs() as log:
        A.gaf(x, "sparsemax", gaf_params(6))
    matmuls = sum(m for op, m in log if op == "matmul")
    assert matmuls == A.gaf_attention_macs(15, A.embed_width(6), 6)
