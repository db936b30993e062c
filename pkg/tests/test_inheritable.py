import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vlfuse import autodiff as ad
from vlfuse.inheritable import (CrossAttnParams, attention_scores, form_qkv, fused_attention,
                                mask_lattice, mask_to_gray, read_pgm, reset_state, update_mask,
                                write_mask_csv, write_pgm)

ROW = np.array([[0.1, 0.5, -0.2, 0.9]])


def _sort_and_floor(alpha, M, delta, decay):
    # oracle: sort each row with plain Python, decay the first floor(delta*n) columns
    M = M.copy()
    k = math.floor(delta * alpha.shape[1])
    for i, row in enumerate(alpha):
        for j in sorted(range(len(row)), key=lambda c: (row[c], c))[:k]:
            M[i, j] *= decay
    return M


def test_reset_is_all_ones():
    s = reset_state(3, 5, 0.3, 0.85, True)
    assert s.M.shape == (3, 5) and (s.M == 1.0).all()


def test_update_examples():
    s = reset_state(1, 4, 0.3, 0.85, True)
    update_mask(s, ROW)
    np.testing.assert_array_equal(s.M, [[1, 1, 0.85, 1]])
    update_mask(s, ROW)
    np.testing.assert_array_equal(s.M, [[1, 1, 0.85 * 0.85, 1]])
    # the decimal 0.7225 is a different double from 0.85 * 0.85; one ulp apart
    assert abs(s.M[0, 2] - 0.7225) <= np.spacing(0.7225)
    s = reset_state(1, 4, 0.5, 0.85, True)
    update_mask(s, ROW)
    np.testing.assert_array_equal(s.M, [[0.85, 1, 0.85, 1]])


def test_zero_delta_and_inactive_leave_mask():
    for delta, active in ((0.0, True), (0.3, False)):
        s = reset_state(2, 4, delta, 0.85, active)
        update_mask(s, np.vstack([ROW, -ROW]))
        assert (s.M == 1).all()


def test_ties_go_to_lowest_column():
    s = reset_state(1, 5, 0.4, 0.5, True)
    update_mask(s, np.array([[0.2, 0.1, 0.1, 0.1, 0.3]]))
    np.testing.assert_array_equal(s.M, [[1, 0.5, 0.5, 1, 1]])


def test_state_validation():
    with pytest.raises(ValueError):
        reset_state(1, 1, 1.0, 0.85, True)
    with pytest.raises(ValueError):
        reset_state(1, 1, 0.3, 0.0, True)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 5), st.integers(1, 12), st.floats(0, 0.99), st.floats(0.05, 1.0),
       st.integers(0, 2**31), st.integers(1, 5))
def test_update_matches_oracle(n_t, n_v, delta, decay, seed, layers):
    g = np.random.default_rng(seed)
    s = reset_state(n_t, n_v, delta, decay, True)
    expect = s.M.copy()
    for _ in range(layers):
        # rounding creates ties often enough to exercise the tie rule
        alpha = np.round(g.standard_normal((n_t, n_v)), 1)
        update_mask(s, alpha)
        expect = _sort_and_floor(alpha, expect, delta, decay)
    np.testing.assert_array_equal(s.M, expect)
    assert np.isin(s.M, mask_lattice(decay, layers)).all()


def test_form_qkv_examples():
    xv = np.array([[2.0]])
    p = CrossAttnParams(ad.Tensor([[0.5]]), ad.Tensor([[-1.0]]))
    q, k, v = form_qkv(np.array([[1.0]]), xv, p)
    assert (q.data, k.data, v.data) == ([[1.0]], [[2.5]], [[1.0]])
    zero = CrossAttnParams(ad.Tensor(np.zeros((3, 2))), ad.Tensor(np.zeros((3, 2))))
    xv = np.arange(6.0).reshape(3, 2)
    _, k, v = form_qkv(np.ones((1, 2)), xv, zero)
    np.testing.assert_array_equal(k.data, xv)
    np.testing.assert_array_equal(v.data, xv)
    p = CrossAttnParams(ad.Tensor(np.ones((3, 2))), ad.Tensor(2 * np.ones((3, 2))))
    _, k, v = form_qkv(np.ones((1, 2)), np.zeros((3, 2)), p)
    np.testing.assert_array_equal(k.data, p.P1.data)
    np.testing.assert_array_equal(v.data, p.P2.data)


def test_attention_scores_examples():
    assert attention_scores([[1.0]], [[1.0]]).data[0, 0] == pytest.approx(0.7310586, abs=1e-7)
    a = attention_scores([[1.0, 0.0]], [[0.0, 3.0], [0.0, -2.0]]).data
    assert not a.any()


def test_fused_attention_examples(rng):
    s = reset_state(1, 1, 0.0, 0.85, True)
    s.M[...] = 0.85
    out = fused_attention(np.array([[0.7310586]]), s, np.array([[2.0]])).data
    assert out[0, 0] == pytest.approx(1.2428, abs=1e-4)
    alpha, v = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    ones = reset_state(3, 4, 0.3, 0.85, True)
    np.testing.assert_allclose(fused_attention(alpha, ones, v).data,
                               fused_attention(alpha, None, v).data, rtol=0, atol=1e-12)
    ones.M[...] = 0
    assert not fused_attention(alpha, ones, v).data.any()


def test_mask_applies_within_the_same_layer():
    # the decayed column must already be suppressed in this layer's output
    alpha = np.array([[1.0, -5.0, 2.0]])
    v = np.eye(3)
    s = reset_state(1, 3, 0.34, 0.5, True)
    update_mask(s, alpha)
    out = fused_attention(alpha, s, v).data
    np.testing.assert_array_equal(out, [[1.0, -2.5, 2.0]])


def test_mask_carries_no_gradient(rng):
    alpha = ad.Tensor(rng.standard_normal((2, 4)), requires_grad=True)
    v = ad.Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    s = reset_state(2, 4, 0.5, 0.85, True)
    update_mask(s, alpha)
    M0 = s.M.copy()
    with ad.record():
        loss = ad.sum_all(fused_attention(alpha, s, v))
    ad.backward(loss)
    np.testing.assert_array_equal(s.M, M0)
    np.testing.assert_allclose(alpha.grad, M0 * (np.ones((2, 3)) @ v.data.T))


def test_gray_mapping_and_pgm(tmp_path):
    M = np.array([[1.0, 0.85, 0.85 ** 4]])
    g = mask_to_gray(M, 0.85, 4)
    lo = 0.85 ** 4
    assert g.tolist() == [[255, round(255 * (0.85 - lo) / (1 - lo)), 0]]
    write_pgm(g, tmp_path / "m.pgm")
    raw = (tmp_path / "m.pgm").read_bytes()
    assert raw.startswith(b"P5\n3 1\n255\n")
    np.testing.assert_array_equal(read_pgm(tmp_path / "m.pgm"), g)
    write_mask_csv(M, tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "text_token,v0,v1,v2"
    assert [float(x) for x in lines[1].split(",")[1:]] == M[0].tolist()
