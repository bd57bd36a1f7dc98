import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcam import encoders as E
from dcam import tensor as T

# toy instance shared by the attention oracles: B=1, L=2, d=4, d_i=2, two heads
E_I = np.array([[1.0, -0.5]])
E_B = np.array([[[0.2, 0.1, -0.3, 0.4], [0.5, -0.2, 0.1, 0.0]]])
W_Q = np.array([[0.1, 0.2, -0.1, 0.3], [0.4, -0.3, 0.2, 0.1]])
W_K = np.array([[0.2, 0.0, 0.1, -0.2], [0.1, 0.3, 0.0, 0.2],
                [-0.1, 0.2, 0.4, 0.0], [0.3, -0.1, 0.2, 0.1]])
W_V = np.array([[0.5, -0.2, 0.1, 0.0], [0.0, 0.3, -0.4, 0.2],
                [0.2, 0.1, 0.0, -0.3], [-0.1, 0.4, 0.2, 0.1]])

# frozen from a scalar pure-Python evaluation of the same instance
TOY_MHTA = [0.13612162232277897, -0.01612162232277893, 0.09423291200040505, 0.04241084799872703]
TOY_MHTA_WEIGHTS = [[0.4958458432489669, 0.5041541567510331],
                    [0.5109583999942138, 0.4890416000057862]]
TOY_SELF_ATTN = [[0.3336588393372387, 0.08634116066276133, -0.205066821509634, 0.4402100104588498],
                 [0.634508386183516, -0.21450838618351603, 0.1953996747341895, 0.03874387940683295]]
TOY_GRU = [0.04854273670190849, 0.08368387988310845]


def test_mhta_toy_instance():
    S, w = E.mhta(E_I, E_B, np.ones((1, 2)), E.MHTAParams(W_Q, W_K, W_V, 2), return_weights=True)
    np.testing.assert_allclose(S.data[0], TOY_MHTA, rtol=0, atol=1e-10)
    np.testing.assert_allclose(w[0], TOY_MHTA_WEIGHTS, rtol=0, atol=1e-10)


def test_mhta_single_event_is_value_projection():
    rng = np.random.default_rng(0)
    e_b = rng.normal(size=(3, 1, 4))
    params = E.MHTAParams(W_Q, W_K, W_V, 2)
    for q in (E_I, rng.normal(size=(1, 2)) * 10):
        S = E.mhta(np.repeat(q, 3, axis=0), e_b, np.ones((3, 1)), params)
        np.testing.assert_allclose(S.data, e_b[:, 0] @ W_V, atol=1e-12)


def test_mhta_duplicate_events_equal_single():
    params = E.MHTAParams(W_Q, W_K, W_V, 2)
    one = E.mhta(E_I, E_B[:, :1], np.ones((1, 1)), params).data
    two = E.mhta(E_I, np.repeat(E_B[:, :1], 2, axis=1), np.ones((1, 2)), params).data
    np.testing.assert_allclose(two, one, atol=1e-12)


def test_mhta_masked_positions_are_ignored():
    params = E.MHTAParams(W_Q, W_K, W_V, 2)
    junk = E_B.copy()
    junk[0, 1] = 1e3
    a = E.mhta(E_I, E_B, np.array([[1.0, 0.0]]), params).data
    b = E.mhta(E_I, junk, np.array([[1.0, 0.0]]), params).data
    np.testing.assert_array_equal(a, b)


def test_mhta_fully_masked_row_is_zero():
    S = E.mhta(E_I, E_B, np.zeros((1, 2)), E.MHTAParams(W_Q, W_K, W_V, 2))
    np.testing.assert_array_equal(S.data, np.zeros((1, 4)))


def test_mhta_rejects_mismatched_query():
    with pytest.raises(ValueError):
        E.mhta(np.ones((1, 3)), E_B, np.ones((1, 2)), E.MHTAParams(W_Q, W_K, W_V, 2))


def test_params_reject_indivisible_heads():
    with pytest.raises(ValueError):
        E.MHTAParams(W_Q, W_K, W_V, 3)


def test_mean_pool_examples():
    v = np.array([1.0, -2.0, 3.0])
    np.testing.assert_array_equal(E.mean_pool(v[None, None], np.ones((1, 1))).data[0], v)
    pair = np.stack([v, -v])[None]
    np.testing.assert_array_equal(E.mean_pool(pair, np.ones((1, 2))).data[0], np.zeros(3))
    rng = np.random.default_rng(1)
    three = rng.normal(size=(1, 4, 5))
    mask = np.array([[1.0, 1.0, 1.0, 0.0]])
    expected = (three[0, 0] + three[0, 1] + three[0, 2]) / 3.0
    np.testing.assert_allclose(E.mean_pool(three, mask).data[0], expected, rtol=0, atol=1e-12)
    np.testing.assert_array_equal(E.mean_pool(three, np.zeros((1, 4))).data, np.zeros((1, 5)))


def test_self_attention_toy_instance():
    y = E.self_attention_encode(E_B, np.ones((1, 2)), E.MHTAParams(W_K, W_K, W_V, 2))
    np.testing.assert_allclose(y.data[0], TOY_SELF_ATTN, rtol=0, atol=1e-10)


def test_self_attention_single_event():
    y = E.self_attention_encode(E_B[:, :1], np.ones((1, 1)), E.MHTAParams(W_K, W_K, W_V, 2))
    np.testing.assert_allclose(y.data[0, 0], E_B[0, 0] + E_B[0, 0] @ W_V, atol=1e-12)


def test_self_attention_padding_rows_are_zero_and_unattended():
    rng = np.random.default_rng(2)
    e_b = rng.normal(size=(2, 4, 4))
    mask = np.array([[1, 1, 0, 0], [1, 1, 1, 1]], dtype=float)
    params = E.MHTAParams(W_K, W_K, W_V, 2)
    y, w = E.self_attention_encode(e_b, mask, params, return_weights=True)
    np.testing.assert_array_equal(y.data[0, 2:], 0.0)
    np.testing.assert_array_equal(w[0, :, :, 2:], 0.0)
    changed = e_b.copy()
    changed[0, 2:] = 99.0
    np.testing.assert_array_equal(E.self_attention_encode(changed, mask, params).data, y.data)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_self_attention_is_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    e_b = rng.normal(size=(1, 5, 4))
    perm = rng.permutation(5)
    params = E.MHTAParams(*(rng.normal(size=(4, 4)) for _ in range(3)), 2)
    y = E.self_attention_encode(e_b, np.ones((1, 5)), params).data
    y_perm = E.self_attention_encode(e_b[:, perm], np.ones((1, 5)), params).data
    np.testing.assert_allclose(y_perm, y[:, perm], atol=1e-12)


def test_position_encoding_breaks_order_symmetry():
    rng = np.random.default_rng(3)
    e_b = rng.normal(size=(1, 3, 4))
    params = E.MHTAParams(W_K, W_K, W_V, 2)
    y = E.self_attention_encode(e_b, np.ones((1, 3)), params, position_encoding=True).data
    y_rev = E.self_attention_encode(e_b[:, ::-1], np.ones((1, 3)), params,
                                    position_encoding=True).data
    assert not np.allclose(y_rev, y[:, ::-1])


def test_sinusoidal_positions_count_back_from_newest():
    pe = E.sinusoidal_positions(np.array([[1.0, 1.0, 1.0, 0.0]]), 4)
    # the newest valid event (index 2) sits at position 0: sin(0)=0, cos(0)=1
    np.testing.assert_allclose(pe[0, 2], [0.0, 1.0, 0.0, 1.0], atol=1e-15)
    np.testing.assert_allclose(pe[0, 0], [np.sin(2.0), np.cos(2.0), np.sin(0.02), np.cos(0.02)])
    np.testing.assert_array_equal(pe[0, 3], 0.0)


def _toy_gru():
    return E.GRUParams(
        W_z=np.array([[0.1, -0.2], [0.3, 0.4]]), U_z=np.array([[0.2, 0.1], [-0.1, 0.3]]),
        b_z=np.array([0.0, 0.1]),
        W_r=np.array([[-0.3, 0.2], [0.1, 0.1]]), U_r=np.array([[0.1, 0.0], [0.2, -0.2]]),
        b_r=np.array([0.05, 0.0]),
        W_h=np.array([[0.4, 0.1], [-0.2, 0.5]]), U_h=np.array([[0.3, -0.1], [0.2, 0.2]]),
        b_h=np.array([0.0, -0.1]))


def test_gru_two_step_instance():
    x = np.array([[[0.5, -1.0], [0.3, 0.8]]])
    h = E.gru_encode(x, np.ones((1, 2)), _toy_gru())
    np.testing.assert_allclose(h.data[0], TOY_GRU, rtol=0, atol=1e-12)


def test_gru_padding_carries_state():
    x = np.array([[[0.5, -1.0], [0.3, 0.8], [9.0, 9.0]]])
    h = E.gru_encode(x, np.array([[1.0, 1.0, 0.0]]), _toy_gru())
    np.testing.assert_allclose(h.data[0], TOY_GRU, rtol=0, atol=1e-12)


def test_gru_zero_cases():
    zero = E.GRUParams(*(np.zeros((3, 3)) if i % 3 != 2 else np.zeros(3) for i in range(9)))
    assert np.all(E.gru_encode(np.zeros((2, 4, 3)), np.ones((2, 4)), zero).data == 0)
    rng = np.random.default_rng(4)
    assert np.all(E.gru_encode(rng.normal(size=(2, 4, 2)), np.zeros((2, 4)), _toy_gru()).data == 0)


def test_encoder_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    e_i = rng.normal(size=(2, 3))
    e_b = rng.normal(size=(2, 3, 4))
    mask = np.array([[1, 1, 0], [1, 1, 1]], dtype=float)
    values = {"Q": rng.normal(size=(3, 4)), "K": rng.normal(size=(4, 4)),
              "V": rng.normal(size=(4, 4)), "SQ": rng.normal(size=(4, 4)),
              "SK": rng.normal(size=(4, 4)), "SV": rng.normal(size=(4, 4))}
    gru_vals = {n: rng.normal(size=(4, 4)) * 0.5 for n in ("W_z", "U_z", "W_r", "U_r", "W_h", "U_h")}
    gru_vals.update({n: rng.normal(size=4) * 0.1 for n in ("b_z", "b_r", "b_h")})
    weights = rng.normal(size=(2, 4))

    def loss(p):
        sa = E.MHTAParams(p["SQ"], p["SK"], p["SV"], 2)
        x = E.self_attention_encode(e_b, mask, sa, position_encoding=True)
        S = E.mhta(e_i, x, mask, E.MHTAParams(p["Q"], p["K"], p["V"], 2))
        h = E.gru_encode(x, mask, E.GRUParams(**{n: p[n] for n in gru_vals}))
        return T.sum((S + h) * weights)

    all_vals = {**values, **gru_vals}
    g = T.Graph()
    grads = T.backward(g, loss(g.register(all_vals)))
    for name, value in all_vals.items():
        numeric = T.finite_difference_gradient(
            lambda v, name=name: float(loss({**all_vals, name: v}).data), value)
        assert T.relative_error(grads[name], numeric) < 1e-6, name


def test_time_diff_buckets():
    b = E.TimeDiffBucketizer()
    assert b.n_buckets == 16
    assert b.bucket(0) == 0
    assert b.bucket(59) == 0
    assert b.bucket(60) == 1
    assert b.bucket(3600) == 6  # 3840 is the first boundary above one hour
    assert b.bucket(10**9) == 15
    assert E.time_diff_bucket(1000, 400) == b.bucket(600)
    with pytest.raises(ValueError):
        E.time_diff_bucket(100, 200)
    np.testing.assert_array_equal(b.buckets([0, 59, 60, 3600, 10**9]), [0, 0, 1, 6, 15])


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**8), st.integers(0, 10**8))
def test_time_diff_bucket_is_monotone(a, b):
    lo, hi = sorted((a, b))
    bz = E.TimeDiffBucketizer()
    assert bz.bucket(lo) <= bz.bucket(hi)
    assert 0 <= bz.bucket(hi) < bz.n_buckets


def test_bucketizer_rejects_unsorted_boundaries():
    with pytest.raises(ValueError):
        E.TimeDiffBucketizer((60, 60, 120))
