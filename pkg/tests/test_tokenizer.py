import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bgts import autodiff as ad
from bgts import tokenizer as tk
from bgts.data import Instance, build_episode
from gradcheck import check


def test_patch_exact_and_padded():
    assert tk.patch(np.arange(16.0), 8).shape == (2, 8)
    p = tk.patch(np.arange(17.0), 8)
    assert p.shape == (3, 8)
    np.testing.assert_array_equal(p[2, 1:], np.zeros(7))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 300), st.integers(1, 16))
def test_patch_round_trip(n, P):
    x = np.random.default_rng(n).standard_normal(n)
    p = tk.patch(x, P)
    assert p.shape[0] == math.ceil(n / P)
    np.testing.assert_array_equal(tk.unpatch(p, n), x)


def test_patch_length_validated():
    with pytest.raises(ValueError):
        tk.patch(np.zeros(4), 0)


def test_rff_zero_weights():
    q = ad.Tensor(np.random.default_rng(0).standard_normal((3, 8)))
    e = tk.rff_encode(q, ad.Tensor(np.zeros((4, 8))), ad.Tensor(np.zeros(4))).data
    np.testing.assert_array_equal(e, np.tile([1, 1, 1, 1, 0, 0, 0, 0], (3, 1)))
    e = tk.rff_encode(q, ad.Tensor(np.zeros((4, 8))), ad.Tensor(np.full(4, np.pi / 2))).data
    np.testing.assert_allclose(e, np.tile([0, 0, 0, 0, 1, 1, 1, 1], (3, 1)), atol=1e-15)


def test_rff_bounded_and_gradient():
    rng = np.random.default_rng(1)
    q, W, b = rng.standard_normal((5, 8)), rng.standard_normal((4, 8)), rng.standard_normal(4)
    e = tk.rff_encode(ad.Tensor(q), ad.Tensor(W), ad.Tensor(b)).data
    assert np.abs(e).max() <= 1.0
    assert check(lambda W_: tk.rff_encode(ad.Tensor(q), W_, ad.Tensor(b)), [W]) < 1e-5


def test_indicator_term():
    rng = np.random.default_rng(2)
    q = ad.Tensor(rng.standard_normal((1, 8)))
    W, b, V = (ad.Tensor(rng.standard_normal(s)) for s in ((4, 8), (4,), (8, 8)))
    base = tk.rff_encode(q, W, b).data
    np.testing.assert_array_equal(tk.encode_target_patch(q, np.zeros((1, 8)), W, b, V).data, base)
    np.testing.assert_array_equal(
        tk.encode_target_patch(q, np.ones((1, 8)), W, b, ad.Tensor(np.zeros((8, 8)))).data, base)
    m1, m2 = (rng.random((1, 8)) < 0.5).astype(float), (rng.random((1, 8)) < 0.5).astype(float)
    diff = tk.encode_target_patch(q, m1, W, b, V).data - tk.encode_target_patch(q, m2, W, b, V).data
    np.testing.assert_allclose(diff, (m1 - m2) @ V.data.T, atol=1e-12)
    with pytest.raises(ad.ShapeError):
        tk.encode_target_patch(q, np.zeros((1, 7)), W, b, V)


def _episode(C, T, H, M, seed=0, future=True):
    rng = np.random.default_rng(seed)

    def one(fut):
        return Instance(rng.standard_normal(T), rng.standard_normal(H) if fut else None,
                        rng.standard_normal((T + H, M)))

    return build_episode(one(False), [one(True) for _ in range(C)])


def _params(P=8, D=4, seed=0):
    p = tk.init_params(np.random.default_rng(seed), P, D)
    p["tok.V"] = np.random.default_rng(seed + 1).standard_normal((D, P))
    return p


def test_tokenize_shape():
    assert tk.tokenize(_episode(1, 16, 8, 2), _params()).shape == (2, 3, 3, 4)


def test_context_masks_zero_target_horizon_masked():
    ep = _episode(2, 16, 8, 1)
    _, ind = tk.patchify(ep.values[None], ep.mask[None], 8)
    assert ind[0, :2].sum() == 0  # context futures are observed
    assert ind[0, 2, 2, 1].all() and ind[0, 2, :2, 1].sum() == 0
    assert ind[0, :, :, 0].sum() == 0  # covariates never carry the indicator


def test_padding_counts_as_unknown():
    ep = _episode(0, 13, 5, 0)
    _, ind = tk.patchify(ep.values[None], ep.mask[None], 8)
    np.testing.assert_array_equal(ind[0, 0, 2, 0], np.ones(8))


def test_init_std_and_zero_V():
    p = tk.init_params(np.random.default_rng(0), 8, 512)
    assert abs(p["tok.W"].std() - 1 / math.sqrt(8)) < 0.01
    assert not p["tok.V"].any()
    with pytest.raises(ValueError):
        tk.init_params(np.random.default_rng(0), 8, 5)


def test_context_permutation_equivariance():
    ep = _episode(3, 16, 8, 2, seed=4)
    perm = [2, 0, 1, 3]
    ep2 = ep.copy(values=ep.values[perm], mask=ep.mask[perm])
    a, b = tk.tokenize(ep, _params()), tk.tokenize(ep2, _params())
    np.testing.assert_array_equal(b, a[perm])
